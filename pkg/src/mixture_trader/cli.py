"""Command-line entry point: ``mixture-trader {generate,train,backtest,ablate,rerun,defaults}``.

Every command writes ``manifest.json`` into its output directory before doing
any work. Relative output directories are placed under ``$MIXTURE_TRADER_OUTPUT``
when that variable is set. Exit status: 0 success, 1 configuration or input
error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from importlib import metadata
from pathlib import Path
from typing import Sequence

from . import config as configmod
from .backtest import baseline_suite, comparison_table, write_table
from .data import generate_synthetic, load_bars, parse_regimes, save_bars
from .env import MarketData
from .errors import ConfigError, NumericalAbort, TraderError
from .mixture import export_allocation
from .trainer import (ABLATIONS, ablation_config, evaluate, load_nets, median_by_variant, run_ablation,
                      save_nets, split_index, train)

OUTPUT_ROOT_ENV = "MIXTURE_TRADER_OUTPUT"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def version_tag() -> str:
    """Package version plus a digest of the installed sources."""
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0.0.0"
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"v{base}+{h.hexdigest()[:10]}"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_out(out: str | None, command: str) -> Path:
    p = Path(out) if out else Path(command)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def write_manifest(out: Path, command: str, args: dict, cfg: configmod.RunConfig,
                   inputs: dict[str, str]) -> dict:
    """Record everything needed to repeat the command, then return it."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": args,
        "config_path": args.get("config"),
        "config": configmod.flatten(cfg),
        "seed": cfg.train.seed,
        "inputs": {path: sha256_file(path) for path in inputs.values()},
        "input_roles": inputs,
        "output_dir": str(out),
        "version": version_tag(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _overrides(pairs: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _flag_overrides(ns: argparse.Namespace) -> dict[str, str]:
    """Translate the ablation switches into config keys."""
    out = {}
    if getattr(ns, "actors", None) is not None:
        out["mixture.k"] = str(ns.actors)
    if getattr(ns, "single_actor", False):
        out["mixture.k"] = "1"
    if getattr(ns, "no_ot", False):
        out["mixture.lambda_ot"] = "0"
    if getattr(ns, "no_pretrain", False):
        out["pretrain"] = "false"
    if getattr(ns, "seed", None) is not None:
        out["seed"] = str(ns.seed)
    return out


def _load_config(ns: argparse.Namespace) -> configmod.RunConfig:
    overrides = _overrides(ns.set)
    overrides.update(_flag_overrides(ns))
    return configmod.load(ns.config, overrides)


def _verify_inputs(manifest: dict) -> None:
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).exists():
            raise ConfigError(f"input {path} named in the manifest is missing")
        if sha256_file(path) != digest:
            raise ConfigError(f"input {path} no longer matches its manifest hash")


def _market(path: str, cfg: configmod.RunConfig) -> MarketData:
    return MarketData(load_bars(path), cfg.train.indicators)


# --------------------------------------------------------------------- commands


def cmd_generate(ns, cfg, out: Path) -> None:
    d = cfg.data
    bars = generate_synthetic(parse_regimes(d.regimes), d.seed, p0=d.p0, bar_seconds=d.bar_seconds)
    save_bars(bars, out / "bars.csv")
    print(f"wrote {len(bars)} bars to {out / 'bars.csv'}")


def cmd_train(ns, cfg, out: Path) -> None:
    tc = cfg.train
    market = _market(ns.data, cfg)
    result = train(tc, market, log_path=out / "diagnostics.jsonl")
    save_nets(result.nets, out / "checkpoint.json", tc)
    (out / "phases.log").write_text("\n".join(result.phase_log) + "\n", encoding="utf-8")
    report = evaluate(result, tc, cfg.backtest.periods_per_year)
    report.write(out, "test")
    if report.allocations is not None:
        export_allocation(report.allocations, out / "test_allocation.csv")
    print(f"checkpoint: {out / 'checkpoint.json'}; held-out ARR {report.metrics.ARR:.6g}")


def cmd_backtest(ns, cfg, out: Path) -> None:
    market = _market(ns.data, cfg)
    start, end = None, None
    if ns.range != "all":
        split = split_index(market, cfg.train.train_fraction)
        start, end = (split, None) if ns.range == "test" else (None, split)
    names = tuple(ns.baseline) if ns.baseline else (() if ns.checkpoint else cfg.backtest.baselines)
    nets = load_nets(ns.checkpoint)[0] if ns.checkpoint else None
    reports = baseline_suite(market, cfg.train.env, names, nets, cfg.train.expert, start, end,
                             cfg.backtest.periods_per_year)
    for name, rep in reports.items():
        rep.write(out, name)
        if rep.allocations is not None:
            export_allocation(rep.allocations, out / f"{name}_allocation.csv")
    write_table(comparison_table(reports), out / "comparison.csv")
    for row in comparison_table(reports):
        print(f"{row['policy']:>12}  ARR {row['ARR']:+.6f}  MDD {row['MDD']:.6f}  trades {row['trades']}")


def cmd_ablate(ns, cfg, out: Path) -> None:
    market = _market(ns.data, cfg)
    seeds = [int(s) for s in ns.seeds.split(",") if s.strip()]
    variants = tuple(ns.variants.split(",")) if ns.variants else ABLATIONS
    for v in variants:
        ablation_config(cfg.train, v)
    rows = run_ablation(cfg.train, market, seeds, variants, cfg.backtest.periods_per_year)
    write_table(rows, out / "ablation_runs.csv")
    medians = median_by_variant(rows)
    write_table([{"variant": v, "median_ARR": a} for v, a in medians.items()], out / "ablation_summary.csv")
    for v, a in medians.items():
        print(f"{v:>7}  median ARR {a:+.6f}")


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "backtest": cmd_backtest, "ablate": cmd_ablate}


def _inputs(ns) -> dict[str, str]:
    roles = {}
    if getattr(ns, "config", None):
        roles["config"] = ns.config
    if getattr(ns, "data", None):
        roles["data"] = ns.data
    if getattr(ns, "checkpoint", None):
        roles["checkpoint"] = ns.checkpoint
    return roles


def _run(ns: argparse.Namespace, out_override: str | None = None) -> None:
    for attr in ("data", "checkpoint"):
        if getattr(ns, attr, None):
            setattr(ns, attr, str(Path(getattr(ns, attr)).resolve()))
    cfg = _load_config(ns)
    out = resolve_out(out_override or ns.out, ns.command)
    if ns.command == "backtest" and not (ns.checkpoint or ns.baseline or cfg.backtest.baselines):
        raise ConfigError("nothing to backtest: give --checkpoint or --baseline")
    args = {k: v for k, v in vars(ns).items() if k not in ("func", "out")}
    write_manifest(out, ns.command, args, cfg, _inputs(ns))
    COMMANDS[ns.command](ns, cfg, out)


def cmd_rerun(ns) -> None:
    """Repeat a recorded command into a new output directory."""
    try:
        manifest = json.loads(Path(ns.manifest).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest {ns.manifest}: {exc}") from None
    _verify_inputs(manifest)
    args = dict(manifest["args"])
    # the recorded config is authoritative; the file it came from may have changed since
    args.update(config=None, set=[f"{k}={v}" for k, v in manifest["config"].items()])
    for flag in ("actors", "single_actor", "no_ot", "no_pretrain", "seed"):
        args.pop(flag, None)
    replay = argparse.Namespace(**{**_defaults_for(manifest["command"]), **args})
    _run(replay, ns.out)


def _defaults_for(command: str) -> dict:
    parser = build_parser()
    return vars(parser.parse_args(_minimal_argv(command)))


def _minimal_argv(command: str) -> list[str]:
    if command in ("train", "backtest", "ablate"):
        return [command, "--data", "-"]
    return [command]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixture-trader", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data: bool = True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data", required=True, help="bar CSV")

    common(sub.add_parser("generate", help="write a regime-switching synthetic bar series"), data=False)

    p = sub.add_parser("train", help="pretrain, imitation, then mixture PPO")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--actors", type=int, metavar="K", help="number of actors")
    p.add_argument("--single-actor", action="store_true", help="k = 1 (no mixture)")
    p.add_argument("--no-ot", action="store_true", help="drop the transport alignment term")
    p.add_argument("--no-pretrain", action="store_true", help="skip the supervised pretrain phase")

    p = sub.add_parser("backtest", help="evaluate baselines and/or a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="append", help="long_hold, short_hold or dual_thrust")
    p.add_argument("--range", choices=("all", "train", "test"), default="all")

    p = sub.add_parser("ablate", help="train the full model and its reduced variants over seeds")
    common(p)
    p.add_argument("--seeds", default="0,1,2,3,4,5")
    p.add_argument("--variants", help=f"comma list from {', '.join(ABLATIONS)}")

    p = sub.add_parser("rerun", help="repeat the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)

    sub.add_parser("defaults", help="print every config key with its default")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        if ns.command == "defaults":
            sys.stdout.write(configmod.reference_text())
        elif ns.command == "rerun":
            cmd_rerun(ns)
        else:
            _run(ns)
    except NumericalAbort as exc:
        print(f"numerical abort in phase {exc.phase}: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERICAL
    except (TraderError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
