"""Command-line entry point: ``pvconv {train,eval,gradcheck,voxel-analyze,bench}``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 numerical failure. Every command accepts ``--seed``, ``--config`` (a JSON
file whose keys are flag names; explicit flags win) and ``--out``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import bench_compare, sweep_distinguishable
from .cloud import (GENERATORS, CloudFormatError, SyntheticSpec, generate_synthetic, load_cloud,
                    normalize, synthetic_dataset)
from .gradcheck import OP_GROUPS, run_battery
from .layers import ParamFormatError, load_params, save_params
from .model import PVCNNConfig, build_pvcnn, toy_config
from .train import NumericalError, TrainConfig, evaluate, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
PARAMS_FILE, CONFIG_FILE, METRICS_FILE = "params.bin", "config.json", "metrics.jsonl"
VAL_SEED_OFFSET = 1_000_003


class UsageError(Exception):
    """Bad flags, bad config file or inconsistent inputs (exit code 2)."""


DATA_DEFAULTS = {"synthetic": None, "data": None, "val_data": None, "n": 512,
                 "train_clouds": 64, "val_clouds": 16, "num_classes": 2}
DEFAULTS = {
    "train": {**DATA_DEFAULTS, "epochs": 30, "batch_size": 8, "lr": 3e-3,
              "width_multiplier": 0.125, "resolution_multiplier": 1.0,
              "devox_mode": "trilinear", "voxel_convs": 2},
    "eval": {**DATA_DEFAULTS, "checkpoint": None, "split": "val"},
    "gradcheck": {"op": None, "tol": 1e-4, "eps": 1e-5},
    "voxel-analyze": {"cloud": None, "synthetic": "uniform_cube", "n": 2048,
                      "resolutions": "2,4,8,16,32,64,128,256", "channels": 1},
    "bench": {"n": 2048, "k": 16, "c": 64, "r": 16},
}
COMMON_DEFAULTS = {"seed": 0, "out": "pvconv-out"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--config", help="JSON file of flag values; explicit flags override it")
    p.add_argument("--out", help="output directory (default pvconv-out)")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--synthetic", choices=GENERATORS, help="generate a synthetic dataset")
    p.add_argument("--data", help="directory of .pvc cloud files")
    p.add_argument("--val-data", help="directory of validation .pvc files")
    p.add_argument("--n", type=int, help="points per synthetic cloud")
    p.add_argument("--train-clouds", type=int, help="synthetic training clouds")
    p.add_argument("--val-clouds", type=int, help="synthetic validation clouds")
    p.add_argument("--num-classes", type=int, help="segmentation classes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy PVCNN")
    _add_common(p)
    _add_data(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--width-multiplier", type=float)
    p.add_argument("--resolution-multiplier", type=float)
    p.add_argument("--devox-mode", choices=("trilinear", "nearest"))
    p.add_argument("--voxel-convs", type=int, choices=(1, 2, 3))

    p = sub.add_parser("eval", help="part-averaged IoU of a checkpoint")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", help="checkpoint directory written by train")
    p.add_argument("--split", choices=("train", "val"), help="synthetic split to evaluate")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    _add_common(p)
    p.add_argument("--op", action="append", choices=OP_GROUPS, help="restrict to op group (repeatable)")
    p.add_argument("--tol", type=float, help="relative tolerance (default 1e-4)")
    p.add_argument("--eps", type=float, help="finite-difference step (default 1e-5)")

    p = sub.add_parser("voxel-analyze", help="distinguishable points vs. resolution")
    _add_common(p)
    p.add_argument("--cloud", help=".pvc cloud file (overrides --synthetic)")
    p.add_argument("--synthetic", choices=GENERATORS)
    p.add_argument("--n", type=int)
    p.add_argument("--resolutions", help="comma-separated list, e.g. 2,4,8")
    p.add_argument("--channels", type=int, help="channels for the memory estimate")

    p = sub.add_parser("bench", help="indexed-access counts: voxel path vs. KNN gather")
    _add_common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--r", type=int)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    resolved = {**COMMON_DEFAULTS, **DEFAULTS[command]}
    if args.config:
        try:
            overlay = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(overlay, dict):
            raise UsageError("config file must hold a JSON object")
        overlay = {k.replace("-", "_"): v for k, v in overlay.items()}
        unknown = sorted(set(overlay) - set(resolved))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        resolved.update(overlay)
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


# -- data -------------------------------------------------------------------------

def _load_dir(path) -> list:
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    files = sorted(d.glob("*.pvc"))
    if not files:
        raise UsageError(f"no .pvc files in {path}")
    try:
        return [load_cloud(f) for f in files]
    except CloudFormatError as exc:
        raise UsageError(str(exc)) from None


def synthetic_splits(generator, n, train_clouds, val_clouds, seed, num_classes=2):
    return (synthetic_dataset(generator, n, train_clouds, seed, num_classes),
            synthetic_dataset(generator, n, val_clouds, seed + VAL_SEED_OFFSET, num_classes))


def _datasets(cfg: dict) -> tuple[list, list]:
    if cfg["data"]:
        train_set = _load_dir(cfg["data"])
        val_set = _load_dir(cfg["val_data"]) if cfg["val_data"] else []
        return train_set, val_set
    if cfg["synthetic"]:
        if cfg["n"] < 1 or cfg["train_clouds"] < 0 or cfg["val_clouds"] < 0:
            raise UsageError("n must be >= 1 and cloud counts non-negative")
        return synthetic_splits(cfg["synthetic"], cfg["n"], cfg["train_clouds"],
                                cfg["val_clouds"], cfg["seed"], cfg["num_classes"])
    raise UsageError("no dataset: pass --data DIR or --synthetic GENERATOR")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------------

def cmd_train(cfg: dict, out: Path) -> int:
    train_set, val_set = _datasets(cfg)
    if not train_set:
        raise UsageError("training set is empty")
    if any(pc.labels is None for pc in train_set + val_set):
        raise UsageError("training requires labeled clouds")
    try:
        model_cfg = toy_config(cfg["width_multiplier"], cfg["resolution_multiplier"], cfg["num_classes"],
                               in_channels=train_set[0].c)
        tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                         seed=cfg["seed"], devox_mode=cfg["devox_mode"],
                         voxel_convs_per_block=cfg["voxel_convs"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with open(out / METRICS_FILE, "w", encoding="utf-8") as log:
        try:
            result = train(model_cfg, train_set, tc, val_set or None, log_file=log)
        except NumericalError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    ckpt = out / "checkpoint"
    ckpt.mkdir(exist_ok=True)
    save_params(ckpt / PARAMS_FILE, result.params.registry())
    _write_json(ckpt / CONFIG_FILE, result.cfg.to_dict())
    final = result.log[-1]
    print(json.dumps({"final": final, "checkpoint": str(ckpt)}, sort_keys=True))
    return EXIT_OK


def load_checkpoint(path):
    ckpt = Path(path)
    try:
        model_cfg = PVCNNConfig.from_dict(json.loads((ckpt / CONFIG_FILE).read_text(encoding="utf-8")))
        tensors = load_params(ckpt / PARAMS_FILE)
    except (OSError, json.JSONDecodeError, TypeError, ValueError, ParamFormatError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    params = build_pvcnn(model_cfg, 0)
    try:
        params.load_state(tensors)
    except ValueError as exc:
        raise UsageError(f"checkpoint does not match its config: {exc}") from None
    params.set_mode("eval")
    return model_cfg, params


def cmd_eval(cfg: dict, out: Path) -> int:
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    model_cfg, params = load_checkpoint(cfg["checkpoint"])
    if cfg["num_classes"] != model_cfg.num_classes:
        raise UsageError(f"--num-classes {cfg['num_classes']} but checkpoint has {model_cfg.num_classes}")
    train_set, val_set = _datasets(cfg)
    use_train = cfg["split"] == "train" or (cfg["data"] and not cfg["val_data"])
    clouds = train_set if use_train else val_set
    if not clouds or any(pc.labels is None for pc in clouds):
        raise UsageError("evaluation needs a nonempty labeled dataset")
    if clouds[0].c != model_cfg.in_channels:
        raise UsageError(f"clouds have {clouds[0].c} channels, checkpoint expects {model_cfg.in_channels}")
    report, acc = evaluate(params, model_cfg, clouds)
    result = {**report.to_dict(), "point_accuracy": acc}
    _write_json(out / "eval.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    results = run_battery(cfg["op"], tol=cfg["tol"], eps=cfg["eps"], seed=cfg["seed"])
    failing, rows = [], []
    for group, reports in results.items():
        for rep in reports:
            print(rep.row())
            rows.append({"group": group, "op_name": rep.op_name, "max_abs_err": rep.max_abs_err,
                         "max_rel_err": rep.max_rel_err, "passed": rep.passed,
                         "epsilon": rep.epsilon, "tolerance": rep.tolerance})
        if not all(r.passed for r in reports):
            failing.append(group)
    _write_json(out / "gradcheck.json", rows)
    if failing:
        print(f"FAILED: {', '.join(failing)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} op groups passed")
    return EXIT_OK


def _parse_resolutions(text) -> list[int]:
    if isinstance(text, list):
        items = text
    else:
        items = [t for t in str(text).split(",") if t.strip()]
    try:
        res = [int(t) for t in items]
    except ValueError:
        raise UsageError(f"bad resolution list {text!r}") from None
    if not res or any(r < 1 for r in res):
        raise UsageError(f"bad resolution list {text!r}")
    return res


def cmd_voxel_analyze(cfg: dict, out: Path) -> int:
    resolutions = _parse_resolutions(cfg["resolutions"])
    if cfg["cloud"]:
        try:
            pc = load_cloud(cfg["cloud"])
        except (OSError, CloudFormatError) as exc:
            raise UsageError(str(exc)) from None
    else:
        try:
            pc = generate_synthetic(SyntheticSpec(cfg["synthetic"], cfg["n"], cfg["seed"]))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    report = sweep_distinguishable(normalize(pc), resolutions, cfg["channels"])
    (out / "distinguishable.csv").write_text(report.to_csv(), encoding="utf-8")
    for row in report.rows:
        print(f"r={row['r']:<4d} distinguishable={row['distinguishable']:<6d} "
              f"fraction={row['fraction']:.4f} bytes={row['bytes_estimated']}")
    return EXIT_OK


def cmd_bench(cfg: dict, out: Path) -> int:
    n, k, c, r = cfg["n"], cfg["k"], cfg["c"], cfg["r"]
    if n < 1 or c < 1 or r < 1 or not 1 <= k <= n:
        raise UsageError(f"need n, c, r >= 1 and 1 <= k <= n (got n={n}, k={k}, c={c}, r={r})")
    report = bench_compare(n, k, c, r, cfg["seed"])
    (out / "bench.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "bench.json").write_text(report.to_json() + "\n", encoding="utf-8")
    for row in report.rows:
        print(f"{row['config']:<6s} gathers={row['random_gathers']:<8d} "
              f"scatters={row['random_scatters']:<6d} wall_ms={row['wall_time_ms']:.2f}")
    print(f"gather ratio knn/voxel = {report.meta['gather_ratio']:.4f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "voxel-analyze": cmd_voxel_analyze, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.command, args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        print(json.dumps({"command": args.command, "config": cfg}, sort_keys=True))
        _write_json(out / f"{args.command}-config.json", cfg)
        return COMMANDS[args.command](cfg, out)
    except (UsageError, TypeError) as exc:
        # TypeError here means a config-file value of the wrong type
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
