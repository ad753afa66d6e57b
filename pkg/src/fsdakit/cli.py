"""``fsdakit`` command line: stats, balance, sample, compose, loss-eval, metrics, selftest.

Structured results go to stdout as JSON, logs and the resolved configuration
to stderr. Values come from defaults, then an optional ``--config`` JSON
file, then explicit flags. Usage errors exit with 2, data errors with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .balance import AugmentParams, BalanceConfig, BalanceError, balance_with_report, compute_stats
from .batches import ScheduleError, compose_schedule
from .dataset import DatasetError, load_dataset, sample_kshot, sample_random_images, save_dataset
from .features import DEFAULT_S, FeatureDumpError, read_feature_dump
from .imageio import ImageFormatError
from .losses import ClassifierHead, LossConfig, LossInputError, i2da_loss
from .metrics import gt_from_dataset, load_detections, map_suite

log = logging.getLogger("fsdakit")


class UsageError(Exception):
    pass


DATA_ERRORS = (
    DatasetError,
    ImageFormatError,
    FeatureDumpError,
    BalanceError,
    ScheduleError,
    LossInputError,
    OSError,
    ValueError,
)

# per-subcommand defaults; the keys double as the allowed config-file keys
DEFAULTS = {
    "stats": {"manifest": None, "r": 6, "threads": 1},
    "balance": {
        "manifest": None,
        "target": None,
        "out": None,
        "seed": 0,
        "r": 6,
        "beta": 0.9,
        "cap": 4,
        "stride": 8,
        "max_tries": 32,
        "intensity_range": [0.8, 1.2],
        "blur_range": [0.0, 1.5],
        "augment_target_cell": True,
        "threads": 1,
    },
    "sample": {"manifest": None, "out": None, "mode": "kshot", "k": 2, "count": 8, "seed": 0, "threads": 1},
    "compose": {
        "source": None,
        "augmented": None,
        "target": None,
        "out": None,
        "batch_size": 4,
        "epoch_len": None,
        "seed": 0,
        "threads": 1,
    },
    "loss-eval": {
        "features": None,
        "lambda1": 0.005,
        "lambda2": 0.005,
        "lambda3": 0.001,
        "margin": 0.3,
        "S": DEFAULT_S,
        "heads_path": None,
        "num_classes": None,
        "literal_similarity": False,
        "require_target": True,
        "include_gradients": False,
        "threads": 1,
    },
    "metrics": {"dets": None, "manifest": None, "threads": 1},
    "selftest": {"threads": 1},
}

REQUIRED_PATHS = {
    "stats": ["manifest"],
    "balance": ["manifest", "target", "out"],
    "sample": ["manifest", "out"],
    "compose": ["source", "augmented", "target"],
    "loss-eval": ["features"],
    "metrics": ["dets", "manifest"],
    "selftest": [],
}
INPUT_PATHS = {"manifest", "target", "source", "augmented", "features", "heads_path", "dets"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsdakit", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON file with parameter values")
        sp.add_argument("--threads", type=int, default=None, help="upper bound on worker threads")
        return sp

    s = common(sub.add_parser("stats", help="class counts and sparse/dense split of a dataset"))
    s.add_argument("--manifest")
    s.add_argument("--r", type=int)

    b = common(sub.add_parser("balance", help="class-balancing cut-paste"))
    b.add_argument("--manifest", help="source dataset manifest")
    b.add_argument("--target", help="few-shot target dataset manifest")
    b.add_argument("--out", help="output directory")
    b.add_argument("--seed", type=int)
    b.add_argument("--r", type=int)
    b.add_argument("--beta", type=float)
    b.add_argument("--cap", type=int)
    b.add_argument("--stride", type=int)
    b.add_argument("--max-tries", dest="max_tries", type=int)
    b.add_argument("--intensity-range", dest="intensity_range", type=float, nargs=2)
    b.add_argument("--blur-range", dest="blur_range", type=float, nargs=2)
    b.add_argument(
        "--augment-target-cell", dest="augment_target_cell", action=argparse.BooleanOptionalAction, default=None
    )

    sa = common(sub.add_parser("sample", help="k-shot or random few-shot subset"))
    sa.add_argument("--manifest")
    sa.add_argument("--out")
    sa.add_argument("--mode", choices=["kshot", "random"])
    sa.add_argument("--k", type=int)
    sa.add_argument("--count", type=int)
    sa.add_argument("--seed", type=int)

    c = common(sub.add_parser("compose", help="batch schedule as JSON lines"))
    c.add_argument("--source")
    c.add_argument("--augmented")
    c.add_argument("--target")
    c.add_argument("--out", help="JSONL output file (stdout when omitted)")
    c.add_argument("--batch-size", dest="batch_size", type=int)
    c.add_argument("--epoch-len", dest="epoch_len", type=int)
    c.add_argument("--seed", type=int)

    le = common(sub.add_parser("loss-eval", help="alignment loss report for a feature dump"))
    le.add_argument("--features")
    le.add_argument("--lambda1", type=float)
    le.add_argument("--lambda2", type=float)
    le.add_argument("--lambda3", type=float)
    le.add_argument("--margin", type=float)
    le.add_argument("--S", dest="S", type=int)
    le.add_argument("--heads", dest="heads_path")
    le.add_argument("--num-classes", dest="num_classes", type=int)
    le.add_argument(
        "--literal-similarity", dest="literal_similarity", action=argparse.BooleanOptionalAction, default=None
    )
    le.add_argument("--require-target", dest="require_target", action=argparse.BooleanOptionalAction, default=None)
    le.add_argument(
        "--include-gradients", dest="include_gradients", action=argparse.BooleanOptionalAction, default=None
    )

    m = common(sub.add_parser("metrics", help="mAP@50, mAP@50:95 and recall"))
    m.add_argument("--dets")
    m.add_argument("--manifest")

    common(sub.add_parser("selftest", help="run the invariant suite on synthetic fixtures"))
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in REQUIRED_PATHS[command]:
        if cfg.get(key) in (None, ""):
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
    for key in INPUT_PATHS & set(cfg):
        if cfg[key] is not None and not Path(cfg[key]).exists():
            raise FileNotFoundError(f"{key}: no such file: {cfg[key]}")
    if int(cfg.get("threads") or 1) < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def cmd_stats(cfg):
    ds = load_dataset(cfg["manifest"])
    st = compute_stats(ds, int(cfg["r"]))
    _emit(
        {
            "classes": list(ds.classes),
            "per_class_count": [st.per_class_count[c] for c in range(ds.num_classes)],
            "num_images": len(ds),
            "r": st.r,
            "sparse_images": len(st.sparse_images),
            "dense_images": len(st.dense_images),
            "images_with_class": [len(st.class_presence[c]) for c in range(ds.num_classes)],
        }
    )


def _balance_config(cfg) -> BalanceConfig:
    return BalanceConfig(
        r=int(cfg["r"]),
        beta=float(cfg["beta"]),
        cap_per_image=int(cfg["cap"]),
        stride=int(cfg["stride"]),
        max_tries=int(cfg["max_tries"]),
        augment=AugmentParams(tuple(cfg["intensity_range"]), tuple(cfg["blur_range"]), int(cfg["seed"])),
        augment_target_cell=bool(cfg["augment_target_cell"]),
        threads=int(cfg["threads"]),
    )


def cmd_balance(cfg):
    source = load_dataset(cfg["manifest"])
    target = load_dataset(cfg["target"])
    out_ds, report = balance_with_report(source, target, _balance_config(cfg))
    out_dir = Path(cfg["out"])
    manifest = save_dataset(out_ds, out_dir)
    report["manifest"] = manifest.name
    (out_dir / "balance_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _emit(report)


def cmd_sample(cfg):
    ds = load_dataset(cfg["manifest"])
    if cfg["mode"] == "kshot":
        sub = sample_kshot(ds, int(cfg["k"]), int(cfg["seed"]))
    else:
        sub = sample_random_images(ds, int(cfg["count"]), int(cfg["seed"]))
    manifest = save_dataset(sub, cfg["out"])
    _emit({"manifest": str(manifest), "num_images": len(sub), "image_ids": sub.image_ids})


def cmd_compose(cfg):
    sched = compose_schedule(
        load_dataset(cfg["source"]),
        load_dataset(cfg["augmented"]),
        load_dataset(cfg["target"]),
        batch_size=int(cfg["batch_size"]),
        epoch_len=None if cfg["epoch_len"] is None else int(cfg["epoch_len"]),
        seed=int(cfg["seed"]),
    )
    text = sched.to_jsonl()
    if cfg["out"]:
        Path(cfg["out"]).write_text(text, encoding="utf-8")
        log.info("wrote %d batches to %s", len(sched), cfg["out"])
    else:
        sys.stdout.write(text)
    print(json.dumps({"schedule": sched.metadata}), file=sys.stderr)


def load_heads(path, dims, num_classes) -> list[ClassifierHead]:
    if path is None:
        return [ClassifierHead.zeros(num_classes, d) for d in dims]
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            heads = [ClassifierHead(z[f"weights{i}"], z[f"bias{i}"]) for i in range(len(dims))]
    else:
        raw = json.loads(path.read_text(encoding="utf-8"))
        heads = [ClassifierHead(np.array(h["weights"]), np.array(h["bias"])) for h in raw["heads"]]
    if len(heads) != len(dims):
        raise LossInputError(f"{path}: {len(dims)} heads required, got {len(heads)}")
    return heads


def cmd_loss_eval(cfg):
    records = read_feature_dump(cfg["features"])
    if not records:
        raise FeatureDumpError(f"{cfg['features']}: no records")
    dims = [lv.channels for lv in records[0].levels]
    n_cls = cfg["num_classes"]
    if n_cls is None:
        n_cls = 1 + max((g.class_id for r in records for g in r.gt), default=0)
    heads = load_heads(cfg["heads_path"], dims, int(n_cls))
    loss_cfg = LossConfig(
        float(cfg["lambda1"]),
        float(cfg["lambda2"]),
        float(cfg["lambda3"]),
        float(cfg["margin"]),
        bool(cfg["literal_similarity"]),
        bool(cfg["require_target"]),
    )
    report = i2da_loss(records, heads, loss_cfg, int(cfg["S"]))
    out = report.to_dict(include_gradients=bool(cfg["include_gradients"]))
    out["S"] = int(cfg["S"])
    out["num_records"] = len(records)
    _emit(out)


def cmd_metrics(cfg):
    ds = load_dataset(cfg["manifest"])
    dets = load_detections(cfg["dets"])
    _emit(map_suite(dets, gt_from_dataset(ds), ds.num_classes, ds.classes))


def cmd_selftest(cfg):
    from .selftest import run_selftest

    return run_selftest(sys.stdout)


COMMANDS = {
    "stats": cmd_stats,
    "balance": cmd_balance,
    "sample": cmd_sample,
    "compose": cmd_compose,
    "loss-eval": cmd_loss_eval,
    "metrics": cmd_metrics,
    "selftest": cmd_selftest,
}


def _error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
    except UsageError as exc:
        _error("usage", exc)
        return 2
    except FileNotFoundError as exc:
        _error("data", exc)
        return 1
    print(json.dumps({"command": args.command, "config": cfg, "backend": kernels.BACKEND}), file=sys.stderr)
    try:
        status = COMMANDS[args.command](cfg)
    except DATA_ERRORS as exc:
        _error("data", exc)
        return 1
    return int(status or 0)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
