"""Command-line front end.

    wasd explain     --config cfg.json [overrides]
    wasd experiment  --config cfg.json
    wasd intervene   --config cfg.json --rule rule.json --steps 5
    wasd oracle      --config cfg.json
    wasd grid-search --config cfg.json

Settings are resolved as command-line flag > config file > default.  Each
command writes ``<command>.json`` to the output directory (``--out``, else
``$WASD_OUTPUT_DIR``, else ``runs/``).  That file holds only deterministic
content, so identical configs give byte-identical files; wall time and the
parallelism degree go to ``<command>.timing.json``.

Exit codes: 0 ok, 1 usage or config error, 2 runtime error, 3 tau not
reached (explain only, suppressed by ``--allow-partial``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .attribution import AttributionCache, AttributorKind
from .errors import InvalidSpecError, WasdError
from .evaluation import (
    DEFAULT_BASELINE_KS,
    DEFAULT_LAMBDA_GRID,
    DEFAULT_ORACLE_BOUND,
    ExperimentParams,
    brute_force_minimal_rule,
    grid_search_lambda,
    parallel_map,
    run_experiment,
    run_planted_experiment,
)
from .model import ActivationModel, model_from_spec
from .perturb import PerturbParams, params_from_json, params_to_json
from .predicate import generate_predicates
from .search import (
    ExplainParams,
    OutputAcceptor,
    Rule,
    build_neighborhood,
    estimate_precision,
    explain,
    intervened_generate,
)
from .suites import PlantedInstance, load_planted_suite, toy_prompt_suite

OUTPUT_ENV = "WASD_OUTPUT_DIR"
SCHEMA_VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a command needs; serialised verbatim into the artifact.

    The prompts come from exactly one of ``prompt``, ``suite`` (a planted
    suite or a JSON list of prompts) or a generated toy suite
    (``suite_size`` prompts drawn with ``suite_seed``).
    """

    model: dict = field(default_factory=lambda: {"kind": "toy", "seed": 0})
    prompt: list[int] | None = None
    suite: str | None = None
    instance: int | None = None
    suite_size: int | None = None
    suite_seed: int = 0
    task: str = "suite"
    tau: float = 0.9
    lam: float = 6.5
    perturb: dict = field(default_factory=lambda: params_to_json(PerturbParams()))
    attributor: str = AttributorKind.ABLATION.value
    acceptor: dict = field(default_factory=lambda: OutputAcceptor().to_json())
    max_edits: int | None = None
    shared_sample: bool = True
    attribution_samples: int | None = None
    ablation_top: int | None = None
    methods: list[str] = field(default_factory=lambda: ["wasd", "top3", "top5", "top10"])
    baseline_ks: list[int] = field(default_factory=lambda: list(DEFAULT_BASELINE_KS))
    baseline_coefficients: list[float] | None = None
    coefficient_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    eval_samples: int | None = None
    prefix_file: str | None = None
    lambda_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    oracle_bound: int = DEFAULT_ORACLE_BOUND
    oracle_candidates: int | None = None
    rule_file: str | None = None
    steps: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        if isinstance(cfg.perturb, dict):
            # partial perturb blocks fill in from the defaults
            cfg.perturb = {**params_to_json(PerturbParams()), **cfg.perturb}
        return cfg

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def explain_params(self) -> ExplainParams:
        try:
            p = ExplainParams(
                tau=float(self.tau),
                lam=float(self.lam),
                perturb=params_from_json(self.perturb),
                attributor=AttributorKind(self.attributor).value,
                acceptor=OutputAcceptor.from_json(self.acceptor),
                max_edits=self.max_edits,
                shared_sample=self.shared_sample,
                attribution_samples=self.attribution_samples,
                ablation_top=self.ablation_top,
            )
            p.validate()
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid search settings: {e}") from e
        return p


# --------------------------------------------------------------------------
# config resolution

_FLAG_TYPES = {
    "tau": float,
    "lam": float,
    "attributor": str,
    "max_edits": int,
    "attribution_samples": int,
    "ablation_top": int,
    "suite": str,
    "instance": int,
    "suite_size": int,
    "suite_seed": int,
    "task": str,
    "eval_samples": int,
    "prefix_file": str,
    "oracle_bound": int,
    "oracle_candidates": int,
    "rule_file": str,
    "steps": int,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or runs/)")
    p.add_argument("--parallelism", type=int, default=1, help="worker threads for per-prompt work")
    p.add_argument("--quiet", action="store_true")
    for name, typ in _FLAG_TYPES.items():
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=typ, default=argparse.SUPPRESS)
    p.add_argument("--prompt", type=_int_list, default=argparse.SUPPRESS, help="comma-separated token ids")
    p.add_argument("--model-seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="perturbation seed")
    p.add_argument("--samples", type=int, default=argparse.SUPPRESS, help="perturbation sample count")
    p.add_argument("--methods", type=_str_list, default=argparse.SUPPRESS)
    p.add_argument("--lambda-grid", dest="lambda_grid", type=_float_list, default=argparse.SUPPRESS)
    p.add_argument("--redraw", action="store_true", help="draw a separate neighborhood for predicate generation")


def _int_list(s: str) -> list[int]:
    return [int(t) for t in s.split(",") if t.strip()]


def _float_list(s: str) -> list[float]:
    return [float(t) for t in s.split(",") if t.strip()]


def _str_list(s: str) -> list[str]:
    return [t.strip() for t in s.split(",") if t.strip()]


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
    cfg = RunConfig.from_dict(base)
    ns = vars(args)
    for name in [*_FLAG_TYPES, "prompt", "methods", "lambda_grid"]:
        if name in ns:
            setattr(cfg, name, ns[name])
    if "model_seed" in ns:
        cfg.model = {**cfg.model, "seed": ns["model_seed"]}
    if "seed" in ns:
        cfg.perturb = {**cfg.perturb, "seed": ns["seed"]}
    if "samples" in ns:
        cfg.perturb = {**cfg.perturb, "sample_count": ns["samples"]}
    if ns.get("redraw"):
        cfg.shared_sample = False
    for name in ("suite", "prefix_file", "rule_file"):
        value = getattr(cfg, name)
        if value is not None and not Path(value).is_file():
            raise UsageError(f"{name.replace('_', ' ')} not found: {value}")
    return cfg


def _build_model(cfg: RunConfig) -> ActivationModel:
    try:
        return model_from_spec(cfg.model)
    except (TypeError, ValueError, KeyError) as e:
        raise UsageError(f"invalid model spec: {e}") from e


def _load_suite(cfg: RunConfig):
    """Planted instances, or a list of prompts."""
    data = json.loads(Path(cfg.suite).read_text(encoding="utf-8"))
    if isinstance(data, dict) and data.get("kind") == "planted_suite":
        return load_planted_suite(cfg.suite)
    if isinstance(data, dict):
        data = data.get("prompts")
    if not isinstance(data, list):
        raise UsageError(f"{cfg.suite} is neither a planted suite nor a prompt list")
    return [tuple(int(t) for t in p) for p in data]


def _is_planted(suite) -> bool:
    return bool(suite) and isinstance(suite[0], PlantedInstance)


def _prompts(cfg: RunConfig, model: ActivationModel) -> list[tuple[int, ...]]:
    if cfg.prompt is not None:
        return [tuple(cfg.prompt)]
    if cfg.suite is not None:
        suite = _load_suite(cfg)
        if _is_planted(suite):
            raise UsageError("planted suites carry their own models; this command needs a prompt suite")
        return suite
    if cfg.suite_size is not None:
        return toy_prompt_suite(cfg.suite_size, cfg.suite_seed, model.vocab_size)
    raise UsageError("no prompt given: set prompt, suite or suite_size")


def _instance_params(ep: ExplainParams, inst: PlantedInstance) -> ExplainParams:
    return ep.replace(perturb=inst.perturb, max_edits=inst.max_edits)


def _selected_instances(cfg: RunConfig, suite: list[PlantedInstance]) -> list[tuple[int, PlantedInstance]]:
    if cfg.instance is None:
        return list(enumerate(suite))
    if not 0 <= cfg.instance < len(suite):
        raise UsageError(f"instance {cfg.instance} out of range for a suite of {len(suite)}")
    return [(cfg.instance, suite[cfg.instance])]


# --------------------------------------------------------------------------
# commands


def cmd_explain(cfg: RunConfig, parallelism: int = 1) -> tuple[dict, int]:
    """Search a sufficient rule for each prompt or planted instance."""
    ep = cfg.explain_params()
    cache = AttributionCache()
    if cfg.suite is not None and _is_planted(suite := _load_suite(cfg)):

        def one(item):
            i, inst = item
            res = explain(inst.model(), inst.prompt, _instance_params(ep, inst), cache)
            return {"instance": i, "prompt": list(inst.prompt), **res.to_json()}

        results = parallel_map(one, _selected_instances(cfg, suite), parallelism)
    else:
        model = _build_model(cfg)

        def one(item):
            i, x = item
            return {"index": i, "prompt": list(x), **explain(model, x, ep, cache).to_json()}

        results = parallel_map(one, list(enumerate(_prompts(cfg, model))), parallelism)
    reached = all(r["reached_tau"] for r in results)
    return {"results": results, "all_reached_tau": reached}, EXIT_OK if reached else EXIT_PARTIAL


def cmd_experiment(cfg: RunConfig, parallelism: int = 1) -> tuple[dict, int]:
    """Compare WASD with top-k attribution baselines."""
    ep = cfg.explain_params()
    prefix_texts = None
    if cfg.prefix_file:
        lines = Path(cfg.prefix_file).read_text(encoding="utf-8").splitlines()
        prefix_texts = tuple(ln for ln in lines if ln.strip())
    try:
        params = ExperimentParams(
            explain=ep,
            baseline_ks=tuple(cfg.baseline_ks),
            baseline_coefficients=None if cfg.baseline_coefficients is None else tuple(cfg.baseline_coefficients),
            coefficient_grid=tuple(cfg.coefficient_grid),
            methods=tuple(cfg.methods),
            eval_samples=cfg.eval_samples,
            prefix_texts=prefix_texts,
            parallelism=parallelism,
            task=cfg.task,
        )
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    if cfg.suite is not None and _is_planted(suite := _load_suite(cfg)):
        report = run_planted_experiment(suite, params)
    else:
        model = _build_model(cfg)
        report = run_experiment(model, _prompts(cfg, model), params)
    body = report.to_json()
    body["table"] = report.table()
    return body, EXIT_OK


def _read_rule(path: str) -> Rule:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict):
            data = data["rule"]
        return Rule.from_json(data)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise UsageError(f"malformed rule file {path}: {e}") from e


def cmd_intervene(cfg: RunConfig, parallelism: int = 1) -> tuple[dict, int]:
    """Greedy generation with a saved rule clamped at every step."""
    if cfg.rule_file is None:
        raise UsageError("intervene needs a rule file (--rule)")
    rule = _read_rule(cfg.rule_file)
    if cfg.steps < 1:
        raise UsageError("steps must be >= 1")
    model = _build_model(cfg)
    outputs = []
    for x in _prompts(cfg, model):
        outputs.append({"prompt": list(x), "tokens": intervened_generate(model, x, rule, cfg.steps)})
    return {"rule": rule.to_json(), "steps": cfg.steps, "outputs": outputs}, EXIT_OK


def _oracle_one(model, x, ep: ExplainParams, cfg: RunConfig, cache) -> dict:
    x = model.check_prompt(x)
    sample = build_neighborhood(model, x, ep)
    cands = generate_predicates(model, x, sample, ep.attributor, ep.lam, cache, ep.ablation_top)
    if cfg.oracle_candidates is not None:
        cands = cands[: cfg.oracle_candidates]
    rule = brute_force_minimal_rule(model, x, cands, sample, ep.tau, ep.acceptor, cfg.oracle_bound)
    out = {"prompt": list(x), "candidate_count": len(cands), "found": rule is not None}
    if rule is not None:
        out["rule"] = rule.to_json()
        out["size"] = len(rule)
        out["precision"] = estimate_precision(model, x, rule, sample, ep.acceptor).to_json()
    return out


def cmd_oracle(cfg: RunConfig, parallelism: int = 1) -> tuple[dict, int]:
    """Brute-force smallest sufficient candidate subset."""
    ep = cfg.explain_params()
    cache = AttributionCache()
    results = []
    if cfg.suite is not None and _is_planted(suite := _load_suite(cfg)):
        for i, inst in _selected_instances(cfg, suite):
            results.append({"instance": i, **_oracle_one(inst.model(), inst.prompt, _instance_params(ep, inst), cfg, cache)})
    else:
        model = _build_model(cfg)
        if ep.max_edits is None:
            raise UsageError("the oracle needs an enumerated neighborhood: set max_edits")
        for i, x in enumerate(_prompts(cfg, model)):
            results.append({"index": i, **_oracle_one(model, x, ep, cfg, cache)})
    return {"results": results}, EXIT_OK


def cmd_grid_search(cfg: RunConfig, parallelism: int = 1) -> tuple[dict, int]:
    """Pick lambda by mean search precision over a prompt suite."""
    ep = cfg.explain_params()
    model = _build_model(cfg)
    res = grid_search_lambda(model, _prompts(cfg, model), tuple(cfg.lambda_grid), ep, parallelism)
    return {"best_lambda": res.best, "table": res.table}, EXIT_OK


COMMANDS = {
    "explain": cmd_explain,
    "experiment": cmd_experiment,
    "intervene": cmd_intervene,
    "oracle": cmd_oracle,
    "grid-search": cmd_grid_search,
}


# --------------------------------------------------------------------------
# artifacts and entry point


def seeds_of(cfg: RunConfig) -> dict:
    return {
        "model": cfg.model.get("seed"),
        "perturb": cfg.perturb.get("seed"),
        "suite": cfg.suite_seed if cfg.suite_size is not None else None,
    }


def build_artifact(command: str, cfg: RunConfig, body: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "engine_version": __version__,
        "config": cfg.to_json(),
        "seeds": seeds_of(cfg),
        "result": body,
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _summary(command: str, body: dict) -> str:
    if command in ("explain", "oracle"):
        lines = []
        for r in body["results"]:
            tag = f"instance {r['instance']}" if "instance" in r else f"prompt {r.get('index', 0)}"
            rule = r.get("rule")
            if command == "explain":
                status = f"precision={r['precision']['value']:.4f} reached_tau={r['reached_tau']}"
            else:
                status = "found" if r["found"] else "no subset reaches tau"
            lines.append(f"# {tag}: {status}")
            if rule is not None:
                lines.append(Rule.from_json(rule).render() or "(empty rule)")
        return "\n".join(lines) + "\n"
    if command == "experiment":
        return body["table"]
    if command == "intervene":
        return "\n".join(" ".join(map(str, o["tokens"])) for o in body["outputs"]) + "\n"
    rows = [f"lambda={r['lambda']:g} precision={r['mean_precision']:.4f} size={r['mean_size']:.2f}" for r in body["table"]]
    return "\n".join([*rows, f"best lambda: {body['best_lambda']:g}"]) + "\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="wasd", description="Sufficient neuron-level rules for model outputs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.strip().splitlines()[0])
        _add_common(p)
        if name == "explain":
            p.add_argument("--allow-partial", action="store_true", help="exit 0 even if tau is not reached")
        if name == "intervene":
            p.add_argument("--rule", dest="rule_file", default=argparse.SUPPRESS, help="rule JSON file")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = resolve_config(args)
        body, code = COMMANDS[args.command](cfg, max(1, args.parallelism))
    except UsageError as e:
        print(f"wasd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidSpecError, WasdError, ValueError, TypeError, OSError) as e:
        print(f"wasd: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if code == EXIT_PARTIAL and getattr(args, "allow_partial", False):
        code = EXIT_OK

    out_dir = Path(args.out or os.environ.get(OUTPUT_ENV) or "runs")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = args.command.replace("-", "_")
    (out_dir / f"{stem}.json").write_text(dumps(build_artifact(args.command, cfg, body)), encoding="utf-8")
    summary = _summary(args.command, body)
    (out_dir / f"{stem}.txt").write_text(summary, encoding="utf-8")
    timing = {"wall_time_s": round(time.perf_counter() - started, 3), "parallelism": args.parallelism}
    (out_dir / f"{stem}.timing.json").write_text(dumps(timing), encoding="utf-8")
    if not args.quiet:
        sys.stdout.write(summary)
    if code == EXIT_PARTIAL:
        print("wasd: tau not reached (use --allow-partial to accept)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
