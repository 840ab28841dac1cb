"""Batch experiment commands.

Verbs: ``reproduce-toys`` (exact losses of the three reference problems),
``sweep`` (loss over an arrival-rate grid), ``case-study`` (learning runs on
the redundancy scenarios), ``verify`` (property suites), and ``export-lp``.
Outputs are plain CSV/JSON/LP text without timestamps, so reruns are
byte-identical.  Exit codes: 0 success, 1 verification failure, 2 bad
configuration.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys as _sys
from pathlib import Path

import jsonschema

from . import control, rl, verify
from .oiqueue import RedundancySpec

SCENARIOS = {
    "adversarial": dict(zeta=(0.1, 0.2, 0.5)),
    "nonadversarial": dict(zeta=(0.5, 0.2, 0.1)),
}


def case_study_spec(scenario: str) -> RedundancySpec:
    """Three classes, three servers on a path graph; only abandonment rates
    differ between the two scenarios."""
    return RedundancySpec(
        n=3,
        m=3,
        B=((1, 1, 0), (0, 1, 1), (0, 0, 1)),
        nu=(0.5, 0.5, 0.5),
        zeta=SCENARIOS[scenario]["zeta"],
        mu_srv=(0.5, 0.5, 0.5),
        r=(1.0, 2.0, 16.0),
    )


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "model", "algorithm", "seeds", "steps"],
    "properties": {
        "schema_version": {"const": 1},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "nu", "zeta", "mu", "r", "B"],
            "properties": {
                "kind": {"const": "redundancy"},
                "nu": {"type": "array", "items": {"type": "number"}},
                "zeta": {"type": "array", "items": {"type": "number"}},
                "mu": {"type": "array", "items": {"type": "number"}},
                "r": {"type": "array", "items": {"type": "number"}},
                "B": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "integer"}},
                },
            },
        },
        "algorithm": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["sage", "ac", "q"]},
                "family": {"enum": ["static", "semistatic", "dynamic", "imbalanced"]},
                "batch": {"type": "integer", "minimum": 2},
                "step": {"type": "number"},
                "step_theta": {"type": "number"},
                "step_rbar": {"type": "number"},
                "step_v": {"type": "number"},
                "step_q": {"type": "number"},
                "eps0": {"type": "number"},
                "eps_decrement": {"type": "number"},
                "eps_floor": {"type": "number"},
                "theta0": {"type": "number"},
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "steps": {"type": "integer", "minimum": 0},
        "record_stride": {"type": "integer", "minimum": 0},
    },
}


class ConfigError(ValueError):
    pass


def load_config(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from exc
    return data


def dump_config(data: dict) -> str:
    jsonschema.validate(data, CONFIG_SCHEMA)
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def spec_from_config(model: dict) -> RedundancySpec:
    return RedundancySpec(
        n=len(model["nu"]),
        m=len(model["mu"]),
        B=tuple(tuple(row) for row in model["B"]),
        nu=tuple(model["nu"]),
        zeta=tuple(model["zeta"]),
        mu_srv=tuple(model["mu"]),
        r=tuple(model["r"]),
    )


def _mask_grid(mask, width: int = 6, height: int = 6) -> str:
    rows = []
    for b in reversed(range(height)):
        rows.append(" ".join("#" if (a, b) in mask else "." for a in range(width)))
    return "\n".join(rows)


def _policy_grid(policy, cls: int, width: int = 6, height: int = 6) -> str:
    rows = []
    for b in reversed(range(height)):
        cells = []
        for a in range(width):
            p = policy.probs.get(((a, b), cls), 0.0)
            cells.append("#" if p >= 0.5 else ".")
        rows.append(" ".join(cells))
    return "\n".join(rows)


def cmd_reproduce_toys(args) -> int:
    rows = []
    print(f"{'toy':<14} {'g_opt':>12} {'g_balanced':>12} {'g_worst':>12} {'loss_pct':>9}")
    for kind in control.TOY_KINDS:
        problem = control.toy_example(kind, args.nu1, args.nu2)
        rep = control.loss(problem)
        pct = f"{rep.loss_pct:.4f}" if rep.loss_pct is not None else "nan"
        print(
            f"{kind:<14} {rep.g_opt:>12.8f} {rep.g_balanced:>12.8f} "
            f"{rep.g_worst:>12.8f} {pct:>9}"
        )
        print(f"best balanced mask ({kind}):")
        print(_mask_grid(rep.mask))
        for cls in range(2):
            print(f"optimal policy admissions, class {cls + 1} ({kind}):")
            print(_policy_grid(rep.optimal, cls))
        rows.append((kind, rep.g_opt, rep.g_balanced, rep.g_worst, rep.loss_pct))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "toys.csv", "w") as fh:
            fh.write("toy,g_opt,g_balanced,g_worst,loss_pct\n")
            for kind, gopt, gbal, gworst, pct in rows:
                fh.write(f"{kind},{gopt:.10g},{gbal:.10g},{gworst:.10g},{pct:.10g}\n")
    return 0


def _sweep_cell(task):
    kind, nu1, nu2 = task
    rep = control.loss(control.toy_example(kind, nu1, nu2))
    return (
        nu1,
        nu2,
        rep.g_opt,
        rep.g_balanced,
        rep.g_worst,
        rep.loss_pct if rep.loss_pct is not None else float("nan"),
    )


def _parse_rates(text: str) -> list[float]:
    if ":" in text:
        lo, hi, count = text.split(":")
        lo, hi, count = float(lo), float(hi), int(count)
        if count == 1:
            return [lo]
        return [lo + (hi - lo) * k / (count - 1) for k in range(count)]
    return [float(v) for v in text.split(",")]


def cmd_sweep(args) -> int:
    rates1 = _parse_rates(args.rates)
    rates2 = _parse_rates(args.rates2) if args.rates2 else rates1
    tasks = [(args.toy, r1, r2) for r1 in rates1 for r2 in rates2]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_cell, tasks))
    else:
        results = [_sweep_cell(t) for t in tasks]
    lines = ["nu1,nu2,g_opt,g_balanced,g_worst,loss_pct"]
    for nu1, nu2, gopt, gbal, gworst, pct in results:
        lines.append(f"{nu1:.10g},{nu2:.10g},{gopt:.10g},{gbal:.10g},{gworst:.10g},{pct:.10g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def _case_study_run(task):
    model, algorithm, family, algo_cfg, steps, seed, stride = task
    spec = spec_from_config(model)
    if algorithm == "sage":
        cfg = rl.SageConfig(**algo_cfg)
        return rl.run_sage(spec, family, cfg, steps, seed, record_stride=stride)
    if algorithm == "ac":
        cfg = rl.AcConfig(**algo_cfg)
        return rl.run_ac(spec, family, cfg, steps, seed, record_stride=stride)
    cfg = rl.QConfig(**algo_cfg)
    return rl.run_q(spec, cfg, steps, seed, record_stride=stride)


def cmd_case_study(args) -> int:
    if args.config:
        config = load_config(args.config)
    else:
        spec = case_study_spec(args.scenario)
        config = {
            "schema_version": 1,
            "model": {
                "kind": "redundancy",
                "nu": list(spec.nu),
                "zeta": list(spec.zeta),
                "mu": list(spec.mu_srv),
                "r": list(spec.r),
                "B": [list(row) for row in spec.B],
            },
            "algorithm": {"name": args.algorithm, "family": args.family},
            "seeds": [int(s) for s in args.seeds.split(",")],
            "steps": args.steps,
            "record_stride": 0,
        }
        jsonschema.validate(config, CONFIG_SCHEMA)
    algorithm = config["algorithm"]["name"]
    family = config["algorithm"].get("family", "static")
    if algorithm == "sage" and family == "imbalanced":
        raise ConfigError(
            "the score-aware estimator needs a balance function; "
            "the imbalanced family has none"
        )
    algo_cfg = {
        k: v for k, v in config["algorithm"].items() if k not in ("name", "family")
    }
    stride = config.get("record_stride", 0)
    tasks = [
        (config["model"], algorithm, family, algo_cfg, config["steps"], seed, stride)
        for seed in config["seeds"]
    ]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            logs = list(pool.map(_case_study_run, tasks))
    else:
        logs = [_case_study_run(t) for t in tasks]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(config))
    summaries = []
    for log in logs:
        with open(out / f"runlog_seed{log.seed}.csv", "w", newline="") as fh:
            log.to_csv(fh)
        summaries.append(log.summary())
    (out / "summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(logs)} run logs to {out}")
    return 0


def cmd_verify(args) -> int:
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    return 0 if verify.run_suites(names) else 1


def cmd_export_lp(args) -> int:
    problem = control.toy_example(args.toy, args.nu1, args.nu2)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        control.export_lp(problem, args.variant, fh)
    print(f"wrote {args.variant} LP to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quasirev", description="balanced admission control experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reproduce-toys", help="exact losses of the reference problems")
    p.add_argument("--nu1", type=float, default=0.1)
    p.add_argument("--nu2", type=float, default=0.1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_reproduce_toys)

    p = sub.add_parser("sweep", help="loss over an arrival-rate grid")
    p.add_argument("--toy", choices=control.TOY_KINDS, required=True)
    p.add_argument("--rates", required=True, help="lo:hi:count or comma list")
    p.add_argument("--rates2", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("case-study", help="learning runs on the redundancy scenarios")
    p.add_argument("--scenario", choices=sorted(SCENARIOS), default="adversarial")
    p.add_argument("--algorithm", choices=["sage", "ac", "q"], default="sage")
    p.add_argument(
        "--family",
        choices=["static", "semistatic", "dynamic", "imbalanced"],
        default="static",
    )
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--steps", type=int, default=100000)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_case_study)

    p = sub.add_parser("verify", help="run the property suites")
    p.add_argument("--suite", choices=list(verify.SUITES) + ["all"], default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-lp", help="write an admission problem as an LP file")
    p.add_argument("--toy", choices=control.TOY_KINDS, required=True)
    p.add_argument("--variant", choices=["general", "balanced", "reversible_local"], required=True)
    p.add_argument("--nu1", type=float, default=0.1)
    p.add_argument("--nu2", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_lp)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
