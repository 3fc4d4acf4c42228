"""Command line: ``ppfl gen-data | train | sweep | eval``.

Output directories come from ``--out``, else from ``$PPFL_OUT_DIR``. Errors
print one ``ppfl: error: <kind>: <message>`` line to stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import typing
from dataclasses import fields
from pathlib import Path

from . import __version__
from .data import DataError, SplitSpec, load_csv, prepare_client, synth_generate, write_csv, TABLE_I
from .federation import ConfigError, ExperimentConfig, evaluate_thetas, run, evaluate
from .metrics import EvalReport
from .model import LayoutError, load_params
from .privacy import DEFAULT_EPSILONS, parse_epsilon

OUT_ENV = "PPFL_OUT_DIR"
METRICS_HEADER = ("method", "epsilon", "mase", "mape")


class CliError(Exception):
    """A user-facing failure with a short kind tag."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- config files --------------------------------------------------------------


def _field_types() -> dict:
    hints = typing.get_type_hints(ExperimentConfig)
    return {f.name: hints[f.name] for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str, hint):
    raw = raw.strip()
    if name == "epsilon":
        return parse_epsilon(raw)
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name} expects a boolean, got {raw!r}")
    args = typing.get_args(hint)
    if args and type(None) in args:
        if raw.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys are config field names."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError("config", f"cannot read config file {path}: {exc.strerror}") from None
    types = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise CliError("config", f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value, types[key])
        except ValueError as exc:
            raise CliError("config", f"{path}:{lineno}: {exc}") from None
    return out


def resolve_config(args, overrides: dict) -> ExperimentConfig:
    values = read_config(args.config) if args.config else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return (ExperimentConfig.full_scale if args.full_scale else ExperimentConfig)(**values)
    except ConfigError as exc:
        raise CliError("config", str(exc)) from None
    except TypeError as exc:
        raise CliError("config", str(exc)) from None


# -- helpers ---------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise CliError("usage", f"no output directory: pass --out or set {OUT_ENV}")
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError("io", f"cannot write to {path}: {exc.strerror}") from None
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _data_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError("data", f"data directory {directory} does not exist")
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise CliError("data", f"no CSV files in {directory}")
    return files


def _load_clients(files, cfg_window: int, cfg_horizon: int):
    try:
        return [prepare_client(load_csv(f), cfg_window, cfg_horizon, SplitSpec()) for f in files]
    except DataError as exc:
        raise CliError("data", str(exc)) from None


def _write_manifest(out: Path, command: str, config: dict | None, files, seed, artifacts) -> None:
    manifest = {
        "command": command,
        "software_version": __version__,
        "seed": seed,
        "config": config,
        "data": {f.name: _sha256(f) for f in files},
        "artifacts": sorted(str(a.relative_to(out)) for a in artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for method, eps, report in rows:
            fh.write(f"{method},{'off' if eps is None else repr(eps)},{report.mean_mase!r},{report.mean_mape!r}\n")


def _train_one(cfg: ExperimentConfig, clients, out: Path) -> tuple[EvalReport, list[Path]]:
    result = run(cfg, clients)
    report = evaluate(result, clients)
    ckpt = result.save_checkpoints(out / "checkpoints", [c.client for c in clients])
    paths = [out / "telemetry.csv", out / "validation.csv", out / "report.csv", out / "ape.csv"]
    result.write_telemetry(paths[0])
    result.write_validation(paths[1])
    report.write_csv(paths[2])
    report.write_ape_csv(paths[3])
    return report, paths + ckpt


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if not 1 <= args.clients <= len(TABLE_I):
        raise CliError("usage", f"--clients must be between 1 and {len(TABLE_I)} (calibration rows), got {args.clients}")
    rows = None
    if args.rows:
        rows = [int(r) for r in args.rows.split(",")]
    try:
        series = synth_generate(args.clients, args.days, args.seed, rows)
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None
    out = _out_dir(args)
    files = []
    for s in series:
        path = out / f"{s.client}.csv"
        write_csv(s, path)
        files.append(path)
    _write_manifest(out, "gen-data", {"clients": args.clients, "days": args.days, "rows": rows}, files,
                    args.seed, files)
    print(f"wrote {len(files)} client files to {out}")
    return 0


def _train_overrides(args) -> dict:
    keys = ("mode", "epsilon", "rounds", "local_steps", "batch_size", "clip", "hidden", "seed", "workers",
            "eval_params", "pooled_batch_size")
    out = {k: getattr(args, k, None) for k in keys}
    if out.get("epsilon") is not None:
        try:
            out["epsilon"] = parse_epsilon(out["epsilon"])
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
        if out["epsilon"] is None:
            out.pop("epsilon")
    return out


def cmd_train(args) -> int:
    cfg = resolve_config(args, _train_overrides(args))
    files = _data_files(args.data)
    clients = _load_clients(files, cfg.window, cfg.horizon)
    out = _out_dir(args)
    report, paths = _train_one(cfg, clients, out)
    metrics = out / "metrics.csv"
    _write_metrics(metrics, [(cfg.mode, cfg.epsilon, report)])
    _write_manifest(out, "train", cfg.to_dict(), files, cfg.seed, paths + [metrics])
    print(f"{cfg.mode}: mean MASE {report.mean_mase:.4f}, mean MAPE {report.mean_mape:.2f}%")
    return 0


def cmd_sweep(args) -> int:
    try:
        eps = [parse_epsilon(e) for e in args.epsilons.split(",")]
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None
    if not eps or any(e is None for e in eps):
        raise CliError("usage", "every sweep epsilon must be a positive number")
    overrides = _train_overrides(args)
    overrides["mode"] = "ppfl"
    base = resolve_config(args, overrides)
    files = _data_files(args.data)
    clients = _load_clients(files, base.window, base.horizon)
    out = _out_dir(args)
    rows, paths = [], []
    for e in eps:
        cfg = base.replace(epsilon=e)
        sub = out / f"eps_{e:g}"
        sub.mkdir(exist_ok=True)
        report, p = _train_one(cfg, clients, sub)
        rows.append(("ppfl", e, report))
        paths += p
        print(f"epsilon {e:g}: mean MASE {report.mean_mase:.4f}, mean MAPE {report.mean_mape:.2f}%")
    sweep = out / "sweep.csv"
    _write_metrics(sweep, rows)
    _write_manifest(out, "sweep", {**base.to_dict(), "epsilon": eps}, files, base.seed, paths + [sweep])
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    client_files = sorted(ckpt.glob("client_*.ckpt")) if ckpt.is_dir() else [ckpt]
    if not client_files or not all(f.exists() for f in client_files):
        raise CliError("checkpoint", f"no client checkpoints at {ckpt}")
    try:
        loaded = [load_params(f) for f in client_files]
    except LayoutError as exc:
        raise CliError("checkpoint", str(exc)) from None
    layout = loaded[0][1]
    if any(l != layout for _, l, _ in loaded):
        raise CliError("checkpoint", "client checkpoints disagree on the parameter layout")
    thetas = [t for t, _, _ in loaded]
    if args.params == "server":
        server = (ckpt if ckpt.is_dir() else ckpt.parent) / "server.ckpt"
        try:
            phi, slayout, meta = load_params(server)
        except LayoutError as exc:
            raise CliError("checkpoint", str(exc)) from None
        if slayout != layout or meta["part"] != "shared":
            raise CliError("checkpoint", f"{server} does not hold the shared segment of this layout")
        thetas = [layout.merge(phi, layout.partition(t)[1]) for t in thetas]
    files = _data_files(args.data)
    by_name = {c.client: c for c in _load_clients(files, layout.config.window, args.horizon)}
    clients = []
    for f, (_, _, meta) in zip(client_files, loaded):
        name = meta.get("name")
        if name not in by_name:
            raise CliError("data", f"no data for client {name!r} of checkpoint {f.name} in {args.data}")
        clients.append(by_name[name])
    out = _out_dir(args)
    report = evaluate_thetas(thetas, layout, clients)
    report.write_csv(out / "report.csv")
    report.write_ape_csv(out / "ape.csv", args.last_n)
    print(f"mean MASE {report.mean_mase:.4f}, mean MAPE {report.mean_mape:.2f}%")
    return 0


# -- parser ---------------------------------------------------------------------------


def _add_training_flags(p: argparse.ArgumentParser, with_mode: bool) -> None:
    if with_mode:
        p.add_argument("--mode", choices=("ppfl", "local", "pooled", "fl", "personalized"))
        p.add_argument("--epsilon", help="privacy budget per message, or 'off'")
    p.add_argument("--config", help="key = value file with experiment settings")
    p.add_argument("--data", required=True, help="directory of client CSV files")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV})")
    p.add_argument("--rounds", type=int, help="server epochs K")
    p.add_argument("--local-steps", dest="local_steps", type=int, help="client epochs per round")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--pooled-batch-size", dest="pooled_batch_size", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="threads for client updates within a round")
    p.add_argument("--eval-params", dest="eval_params", choices=("client", "server"))
    p.add_argument("--full-scale", dest="full_scale", action="store_true",
                   help="start from hidden=30, 4000 rounds instead of the desk-scale profile")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppfl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ppfl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic client CSV files")
    g.add_argument("--clients", type=int, default=4)
    g.add_argument("--days", type=int, default=30)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--rows", help="comma-separated calibration rows (1-based), one per client")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV})")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one method and report test metrics")
    _add_training_flags(t, with_mode=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train PPFL for several privacy budgets")
    s.add_argument("--epsilons", default=",".join(f"{e:g}" for e in DEFAULT_EPSILONS))
    _add_training_flags(s, with_mode=False)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="score checkpoints on the test split")
    e.add_argument("--checkpoint", required=True, help="checkpoint directory or client checkpoint file")
    e.add_argument("--data", required=True)
    e.add_argument("--out", help=f"output directory (default ${OUT_ENV})")
    e.add_argument("--params", choices=("client", "server"), default="client")
    e.add_argument("--horizon", type=int, default=4)
    e.add_argument("--last-n", dest="last_n", type=int, help="keep only the final N APE rows per client")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        kind, msg = exc.kind, str(exc)
    except (DataError, LayoutError, ConfigError) as exc:
        kind, msg = type(exc).__name__, str(exc)
    except OSError as exc:
        kind, msg = "io", f"{exc.filename or ''}: {exc.strerror}"
    print(f"ppfl: error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
