"""Write the golden rule file for the planted suite from the brute-force oracle.

The explain command's rules on configs/planted_explain.json are checked
against this file in the test suite.
"""

import argparse
import json

from wasd.cli import RunConfig, cmd_oracle


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/planted_explain.json")
    ap.add_argument("--out", default="data/expected_planted_rules.json")
    args = ap.parse_args()
    with open(args.config, encoding="utf-8") as fh:
        cfg = RunConfig.from_dict(json.load(fh))
    body, _ = cmd_oracle(cfg)
    rules = {str(r["instance"]): r["rule"] for r in body["results"]}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"schema_version": 1, "config": args.config, "rules": rules}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(rules)} oracle rules to {args.out}")


if __name__ == "__main__":
    main()
