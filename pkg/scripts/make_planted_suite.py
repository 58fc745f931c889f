"""Regenerate the shipped planted-rule suite (data/planted_suite.json)."""

import argparse

from wasd.suites import build_planted_suite, save_planted_suite


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="data/planted_suite.json")
    args = ap.parse_args()
    suite = build_planted_suite(args.n, args.seed)
    save_planted_suite(suite, args.out)
    sizes = [len(inst.spec.planted_set) for inst in suite]
    print(f"wrote {len(suite)} instances to {args.out} (rule sizes: " +
          ", ".join(f"{k}: {sizes.count(k)}" for k in sorted(set(sizes))) + ")")


if __name__ == "__main__":
    main()
