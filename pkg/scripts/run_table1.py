"""Toy-transformer method comparison over several suite seeds.

Usage: python3 scripts/run_table1.py [--prompts 100] [--suite-seeds 0 1 2 3]
"""

import argparse
import json
import time

from wasd.evaluation import ExperimentParams, run_experiment
from wasd.model import ToyTransformerConfig, build_toy_transformer
from wasd.perturb import PerturbParams
from wasd.search import ExplainParams
from wasd.suites import toy_prompt_suite


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--prompts", type=int, default=100)
    ap.add_argument("--suite-seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--model-seed", type=int, default=42)
    ap.add_argument("--samples", type=int, default=500)
    ap.add_argument("--attribution-samples", type=int, default=50)
    ap.add_argument("--parallelism", type=int, default=1)
    ap.add_argument("--json", help="write all reports to this file")
    args = ap.parse_args()

    model = build_toy_transformer(ToyTransformerConfig(seed=args.model_seed))
    reports = {}
    for s in args.suite_seeds:
        suite = toy_prompt_suite(args.prompts, seed=s)
        ep = ExplainParams(
            perturb=PerturbParams(sample_count=args.samples, seed=1000 + s),
            attribution_samples=args.attribution_samples,
        )
        t0 = time.perf_counter()
        rep = run_experiment(model, suite, ExperimentParams(explain=ep, parallelism=args.parallelism))
        print(f"suite seed {s} ({time.perf_counter() - t0:.1f}s)")
        print(rep.table())
        reports[s] = rep.to_json()
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(reports, fh, indent=1)


if __name__ == "__main__":
    main()
