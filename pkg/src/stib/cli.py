"""Command-line experiment runner: ``gen``, ``train``, ``eval``, ``traverse``, ``report``.

Every command is deterministic given its inputs. Metrics files are JSON
manifests carrying the config that produced them; the ``payload_sha256``
field hashes everything except the wall-clock duration, so repeated runs
can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, TrainConfig
from .data import DataFormatError, Dataset, SpiralConfig, gen_spiral, load_csv, save_csv
from .model import Metrics, TrainingDivergedError, evaluate, fit, traverse_z0
from .ndmath import ShapeError
from .params import ParamFileError, load_params, save_params

log = logging.getLogger("stib")

TRAIN_ROWS = 8192
TEST_ROWS = 4096
DEFAULT_GRID = "-3:3:61"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def standard_data(seed: int) -> tuple[Dataset, Dataset]:
    """Train/test spiral draws used when no data files are given.

    Run seed ``s`` uses data seeds ``2s + 1`` (train) and ``2s + 2`` (test),
    so different run seeds never share a draw.
    """
    train = gen_spiral(SpiralConfig(TRAIN_ROWS, seed=2 * seed + 1))
    test = gen_spiral(SpiralConfig(TEST_ROWS, seed=2 * seed + 2))
    return train, test


def format_real(v: float) -> str:
    if not math.isfinite(v):
        raise CliError(f"non-finite value {v!r} in output")
    text = format(v, ".17g")
    if not any(c in text for c in ".en"):
        text += ".0"
    return text


def dumps_json(obj, indent=0) -> str:
    """JSON with reals written to 17 significant digits and sorted keys."""
    pad = "  " * (indent + 1)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        return format_real(float(obj))
    if isinstance(obj, (int, np.integer, str)):
        return json.dumps(obj if isinstance(obj, str) else int(obj))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps_json(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps_json(v, indent + 1) for v in obj) + "\n" + "  " * indent + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def payload_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k not in ("wall_clock_s", "payload_sha256")}
    return hashlib.sha256(dumps_json(body).encode()).hexdigest()


def build_manifest(cfg: TrainConfig, metrics: Metrics, fingerprints: dict, wall_clock: float) -> dict:
    manifest = {
        "tool": "stib",
        "version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "data": fingerprints,
        "metrics": metrics.to_dict(),
        "wall_clock_s": wall_clock,
    }
    manifest["payload_sha256"] = payload_hash(manifest)
    return manifest


def write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, newline="\n")
    except OSError as e:
        raise CliError(f"cannot write {path}: {e.strerror or e}") from e


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise CliError(f"missing file {path}") from e
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: not a metrics file ({e})") from e


def _existing(path, what):
    if path is None:
        raise CliError(f"--{what} is required")
    if not Path(path).is_file():
        raise CliError(f"missing file {path}")
    return path


def _load_data(path, cfg=None) -> Dataset:
    _existing(path, "data")
    if cfg is None:
        return load_csv(path)
    return load_csv(path, d_x=cfg.d_x, d_y=cfg.d_y)


def parse_grid(text: str) -> tuple[float, float, int]:
    parts = text.split(":")
    try:
        lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    except (IndexError, ValueError) as e:
        raise CliError(f"--grid expects lo:hi:steps, got {text!r}") from e
    if len(parts) != 3 or steps < 2:
        raise CliError(f"--grid expects lo:hi:steps with steps >= 2, got {text!r}")
    return lo, hi, steps


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = SpiralConfig(args.n, seed=args.seed, noise_enabled=args.noise == "on")
    ds = gen_spiral(cfg)
    try:
        save_csv(ds, args.out)
    except OSError as e:
        raise CliError(f"cannot write {args.out}: {e.strerror or e}") from e
    sidecar = {
        "tool": "stib",
        "version": __version__,
        "seed": cfg.seed,
        "rows": len(ds),
        "noise": args.noise,
        "fingerprint": ds.fingerprint(),
    }
    write_text(str(args.out) + ".json", dumps_json(sidecar) + "\n")
    log.info("wrote %d rows to %s", len(ds), args.out)
    return 0


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    default_train, default_test = (None, None)
    if args.data is None or args.test is None:
        default_train, default_test = standard_data(cfg.seed)
    train = _load_data(args.data, cfg) if args.data else default_train
    test = _load_data(args.test, cfg) if args.test else default_test

    def progress(epoch, last):
        if (epoch + 1) % 25 == 0 or epoch + 1 == cfg.epochs:
            log.info("epoch %d/%d  main %.4f  mae_x %.4f", epoch + 1, cfg.epochs, last["loss_main"], last["mae_x"])

    start = time.perf_counter()
    params, traces = fit(cfg, train, progress=progress)
    metrics = evaluate(params, cfg, test, traces=traces)
    wall = time.perf_counter() - start
    manifest = build_manifest(cfg, metrics, {"train": train.fingerprint(), "test": test.fingerprint()}, wall)
    text = dumps_json(manifest) + "\n"
    if args.model:
        try:
            save_params(params, args.model)
        except OSError as e:
            raise CliError(f"cannot write {args.model}: {e.strerror or e}") from e
    if args.metrics:
        write_text(args.metrics, text)
    else:
        sys.stdout.write(text)
    log.info("mae_x %.4f  mae_y %.4f  mi_ksg %.3f bits", metrics.mae_x, metrics.mae_y, metrics.mi_ksg_bits)
    return 0


def _model(args):
    _existing(args.model, "model")
    return load_params(args.model)


def cmd_eval(args) -> int:
    params = _model(args)
    cfg = params.config
    test = _load_data(args.test or args.data)
    start = time.perf_counter()
    metrics = evaluate(params, cfg, test)
    manifest = build_manifest(cfg, metrics, {"test": test.fingerprint()}, time.perf_counter() - start)
    text = dumps_json(manifest) + "\n"
    if args.metrics:
        write_text(args.metrics, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_traverse(args) -> int:
    params = _model(args)
    cfg = params.config
    data = _load_data(args.data)
    if data.d_x != cfg.d_x:
        raise ShapeError(f"data has d_x={data.d_x}; model expects d_x={cfg.d_x}")
    if not 0 <= args.index < len(data):
        raise CliError(f"--index {args.index} outside 0..{len(data) - 1}")
    tr = traverse_z0(params, cfg, data.x[args.index], parse_grid(args.grid), dim=args.dim)
    lines = [",".join(tr.header)]
    lines += [",".join(format_real(v) for v in row) for row in tr.table()]
    text = "\n".join(lines) + "\n"
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


REPORT_COLUMNS = (("MAE(X)", "mae_x"), ("MAE(Y)", "mae_y"), ("MI_K(Z0,Y)", "mi_ksg_bits"))


def render_report(manifests: list[tuple[str, dict]]) -> str:
    rows = []
    for name, m in manifests:
        try:
            vals = [float(m["metrics"][key]) for _, key in REPORT_COLUMNS]
            mode = m["config"]["mode"]
        except (KeyError, TypeError, ValueError) as e:
            raise CliError(f"{name}: not a metrics file (missing {e})") from e
        rows.append((name, mode, vals))
    rows.sort(key=lambda r: (-r[2][2], r[0]))
    w_name = max([len("run")] + [len(r[0]) for r in rows])
    w_mode = max([len("mode")] + [len(r[1]) for r in rows])
    header = f"{'run':<{w_name}}  {'mode':<{w_mode}}" + "".join(f"  {c:>10}" for c, _ in REPORT_COLUMNS)
    out = [header, "-" * len(header)]
    for name, mode, vals in rows:
        out.append(f"{name:<{w_name}}  {mode:<{w_mode}}" + "".join(f"  {v:>10.4f}" for v in vals))
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    if not args.metrics_files:
        raise CliError("report needs at least one metrics file")
    manifests = [(Path(p).stem, read_manifest(p)) for p in args.metrics_files]
    text = render_report(manifests)
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stib", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a spiral dataset CSV")
    g.add_argument("--n", type=int, default=TRAIN_ROWS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", choices=("on", "off"), default="on")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit a model and evaluate it")
    t.add_argument("--config", help="flat JSON with TrainConfig keys")
    t.add_argument("--data", help="training CSV (default: fresh spiral draw)")
    t.add_argument("--test", help="held-out CSV (default: fresh spiral draw)")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--model", help="parameter file to write")
    t.add_argument("--metrics", help="metrics JSON to write (default: stdout)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--test")
    e.add_argument("--data")
    e.add_argument("--metrics")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("traverse", help="sweep an invariant coordinate around one data row")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--index", type=int, default=0, help="row of --data used as anchor")
    v.add_argument("--grid", default=DEFAULT_GRID, help="lo:hi:steps")
    v.add_argument("--dim", type=int, default=0, help="invariant coordinate to sweep")
    v.add_argument("--out")
    v.set_defaults(func=cmd_traverse)

    r = sub.add_parser("report", help="comparison table over metrics files")
    r.add_argument("metrics_files", nargs="*")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _join_grid(argv):
    # a grid such as -3:3:61 looks like an option to argparse
    out = []
    it = iter(argv)
    for tok in it:
        if tok == "--grid":
            tok = "--grid=" + next(it, "")
        out.append(tok)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_grid(argv))
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, ConfigError, DataFormatError, ParamFileError, ShapeError, TrainingDivergedError) as e:
        print(f"stib {args.command}: error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"stib {args.command}: error: missing file {e.filename}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"stib {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
