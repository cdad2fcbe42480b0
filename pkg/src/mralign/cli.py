"""Command-line entry point: gen-data, train, eval, ablate.

Every command writes ``run_manifest.json`` into its output directory. On
failure a single JSON line goes to stderr and the exit code is nonzero
(2 for configuration errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from . import model as M
from .ablation import AXES, DataCache, ablation_run, config_diff
from .dataset import load_dataset, manifest_hash, save_dataset
from .trainer import ConfigError, TrainConfig, checkpoint_load, config_text, data_from_config, load_config, train
from .zeroshot import evaluate, format_table, split_slides, write_reports

log = logging.getLogger("mralign")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    config_hash: str
    config: dict
    seed: int
    artifacts: dict[str, str] = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        self.artifacts = {k: str(v) for k, v in sorted(self.artifacts.items())}
        path = out / "run_manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed, data_seed=args.seed)
    return cfg


def _out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"output path {out} is not writable: {exc.strerror}") from None
    return out


def _manifest(args, cfg: TrainConfig) -> RunManifest:
    return RunManifest(args.command, sys.argv[1:], args.config, cfg.hash(), cfg.to_dict(), cfg.seed)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args.out)
    ds = data_from_config(cfg)
    data_manifest = save_dataset(ds, out)
    (out / "config.txt").write_text(config_text(cfg))
    run = _manifest(args, cfg)
    run.artifacts = {
        "dataset_manifest": data_manifest,
        "config": out / "config.txt",
        **{f: out / f for f in ("index.txt", "captions.txt", "labels.txt", "pooled.f32")},
    }
    run.write(out)
    print(f"dataset {out} slides={len(ds.labels)} anchors={len(ds.records)} manifest={manifest_hash(out)[:16]}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if not args.data:
        raise ValueError("train needs --data DIR")
    ds = load_dataset(args.data)  # fails before any step if missing or corrupt
    out = _out(args.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    log_path = out / "train.log"
    log_path.write_text("")
    train_ids, _ = split_slides(ds, cfg.eval_fraction)
    state = checkpoint_load(args.resume, cfg) if args.resume else None
    state, runlog = train(cfg, ds.subset(train_ids), state=state, checkpoint=ckpt, log_path=log_path)
    (out / "config.txt").write_text(config_text(cfg))
    run = _manifest(args, cfg)
    run.artifacts = {"checkpoint": ckpt, "log": log_path, "config": out / "config.txt", "dataset": Path(args.data)}
    run.write(out)
    last = runlog.records[-1] if runlog.records else {}
    print(f"trained steps={state.step} final_total={last.get('total', float('nan')):.6g} checkpoint={ckpt}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ValueError("eval needs --checkpoint FILE")
    if not args.data:
        raise ValueError("eval needs --data DIR")
    state = checkpoint_load(args.checkpoint)
    cfg = state.config
    ds = load_dataset(args.data)
    if len(ds.vocab) != state.model_cfg.vocab_size:
        raise ValueError(f"vocabulary size {len(ds.vocab)} does not match checkpoint {state.model_cfg.vocab_size}")
    out = _out(args.out)
    _, held = split_slides(ds, cfg.eval_fraction)
    P = M.const_params(state.params)
    modes = ["guided", "classical"] if args.mode == "both" else [args.mode]
    reports = [
        evaluate(P, ds.subset(held), m, args.pe, cfg.k_o, name=f"{m}{'+pe' if args.pe else ''}", seg_dir=out / "segmentation")
        for m in modes
    ]
    write_reports(reports, out / "reports.jsonl")
    rows = [
        {
            "protocol": r.name,
            "tile_f1": r.tile_f1,
            "tile_bacc": r.tile_bacc,
            **{f"wsi_top{k}": v for k, v in r.wsi_f1().items()},
            "best_K": r.best_k(),
            "seg_acc": r.seg_pixel_accuracy,
        }
        for r in reports
    ]
    cols = ["protocol", "tile_f1", "tile_bacc"] + [f"wsi_top{k}" for k in (1, 5, 10, 50, 100)] + ["best_K", "seg_acc"]
    table = format_table(rows, cols)
    (out / "report.txt").write_text(table + "\n")
    run = _manifest(args, cfg)
    run.artifacts = {"reports": out / "reports.jsonl", "table": out / "report.txt", "segmentation": out / "segmentation", "checkpoint": Path(args.checkpoint)}
    run.write(out)
    print(table)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.axis not in AXES:
        raise ConfigError("axis", f"expected one of {sorted(AXES)}")
    out = _out(args.out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    cache = DataCache()
    result = ablation_run(cfg, args.axis, seeds, cache)
    table = result.table()
    (out / "ablation.txt").write_text(table + "\n")
    data_hash = {str(s): _data_hash(cfg.replace(seed=s, data_seed=s)) for s in seeds}
    with open(out / "ablation.jsonl", "w") as f:
        for arm in result.arms:
            f.write(json.dumps({
                "arm": arm.name,
                "diff": {k: v[1] for k, v in config_diff(cfg, arm.config).items()},
                "weighted_f1": arm.f1,
                "mean_weighted_f1": arm.mean_f1,
                "mean_balanced_accuracy": arm.mean_bacc,
                "data_hash": data_hash,
                "reports": [r.to_record() for r in arm.reports],
            }, sort_keys=True) + "\n")
    run = _manifest(args, cfg)
    run.artifacts = {"table": out / "ablation.txt", "records": out / "ablation.jsonl"}
    run.write(out)
    print(table)
    return 0


def _data_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(DataCache.key(cfg)).encode()).hexdigest()[:16]


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mralign", description="Multi-resolution patch-text alignment at desk scale.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--seed", type=int, help="overrides both training and data seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(g, "data")
    t = sub.add_parser("train", help="pre-train on a generated dataset")
    common(t, "run")
    t.add_argument("--data", help="dataset directory from gen-data")
    t.add_argument("--checkpoint", help="checkpoint path (default OUT/checkpoint.bin)")
    t.add_argument("--resume", help="checkpoint to resume from")
    e = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint")
    e.add_argument("--out", default="eval")
    e.add_argument("--config", help=argparse.SUPPRESS)
    e.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    e.add_argument("--checkpoint", required=False)
    e.add_argument("--data")
    e.add_argument("--mode", choices=["guided", "classical", "both"], default="guided")
    e.add_argument("--pe", type=_bool, default=True, help="prompt ensembling (true/false)")
    a = sub.add_parser("ablate", help="train and evaluate the arms of one ablation axis")
    common(a, "ablation")
    a.add_argument("--axis", required=True, help=f"one of {', '.join(AXES)}")
    a.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _fail("config", str(exc), key=exc.key)
        return 2
    except (FileNotFoundError, PermissionError, ValueError, KeyError, RuntimeError, OSError) as exc:
        _fail(type(exc).__name__, str(exc))
        return 1


def _fail(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message.replace("\n", " "), **extra}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
