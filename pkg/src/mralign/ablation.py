"""Ablation harness: train and evaluate arms that differ along one axis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .dataset import Dataset
from .trainer import TrainConfig, data_from_config, train
from .zeroshot import EvalReport, evaluate, format_table, split_slides

log = logging.getLogger(__name__)

AXES: dict[str, list[tuple[str, dict]]] = {
    "losses": [
        ("bl", {"enable_cvta": False, "enable_mrtva": False}),
        ("bl+cvta", {"enable_cvta": True, "enable_mrtva": False}),
        ("bl+mrtva", {"enable_cvta": False, "enable_mrtva": True}),
        ("bl+cvta+mrtva", {"enable_cvta": True, "enable_mrtva": True}),
    ],
    "k_o": [(f"k_o={k}", {"k_o": k}) for k in (3, 6, 9, 12, 15, 18)],
    "resolutions": [
        ("5x,10x", {"resolution_subset": (5, 10)}),
        ("20x,40x", {"resolution_subset": (20, 40)}),
        ("5x,10x,20x", {"resolution_subset": (5, 10, 20)}),
        ("10x,20x,40x", {"resolution_subset": (10, 20, 40)}),
        ("5x,10x,20x,40x", {"resolution_subset": (5, 10, 20, 40)}),
    ],
    "parent_child": [
        ("with hierarchy", {"enable_parent_child": True}),
        ("without hierarchy", {"enable_parent_child": False}),
    ],
}


def arm_configs(base: TrainConfig, axis: str) -> list[tuple[str, TrainConfig]]:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    return [(name, base.replace(**over)) for name, over in AXES[axis]]


def config_diff(a: TrainConfig, b: TrainConfig) -> dict[str, tuple]:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


@dataclass
class ArmResult:
    name: str
    config: TrainConfig
    reports: list[EvalReport] = field(default_factory=list)

    @property
    def f1(self) -> list[float]:
        return [r.tile_f1 for r in self.reports]

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1))

    @property
    def mean_bacc(self) -> float:
        return float(np.mean([r.tile_bacc for r in self.reports]))

    @property
    def mean_wsi_f1(self) -> float:
        return float(np.mean([max(r.wsi_f1().values()) for r in self.reports]))


@dataclass
class AblationResult:
    axis: str
    arms: list[ArmResult]
    seeds: list[int]

    def row(self, name: str) -> ArmResult:
        return next(a for a in self.arms if a.name == name)

    def table(self) -> str:
        rows = [
            {
                "arm": a.name,
                "weighted_f1": a.mean_f1,
                "balanced_acc": a.mean_bacc,
                "wsi_f1": a.mean_wsi_f1,
                "per_seed_f1": " ".join(f"{x:.3f}" for x in a.f1),
            }
            for a in self.arms
        ]
        return format_table(rows, ["arm", "weighted_f1", "balanced_acc", "wsi_f1", "per_seed_f1"])


class DataCache:
    """Datasets keyed by their data keys so every arm of a seed sees the same data."""

    def __init__(self):
        self._store: dict[tuple, Dataset] = {}

    @staticmethod
    def key(cfg: TrainConfig) -> tuple:
        return (cfg.n_slides, cfg.n_classes, cfg.data_seed, cfg.anchors_per_slide, cfg.slide_side,
                cfg.min_coverage, cfg.n_signal, cfg.noise_rate, cfg.texture_amplitude, cfg.layout_contrast, cfg.class_design)

    def get(self, cfg: TrainConfig) -> Dataset:
        k = self.key(cfg)
        if k not in self._store:
            self._store[k] = data_from_config(cfg)
        return self._store[k]


def run_arm(cfg: TrainConfig, ds: Dataset, name: str = "") -> EvalReport:
    """Train on the training split and evaluate zero-shot on the held-out split."""
    train_ids, held_ids = split_slides(ds, cfg.eval_fraction)
    state, _ = train(cfg, ds.subset(train_ids))
    P = M.const_params(state.params)
    rep = evaluate(P, ds.subset(held_ids), cfg.eval_mode, cfg.eval_pe, cfg.k_o, name=name)
    rep.config = cfg.to_dict()
    return rep


def ablation_run(
    base: TrainConfig,
    axis: str,
    seeds=(0,),
    cache: DataCache | None = None,
    arms: list[str] | None = None,
) -> AblationResult:
    """Each seed sets both the data seed and the training seed; arms share data."""
    cache = cache or DataCache()
    configs = arm_configs(base, axis)
    if arms is not None:
        configs = [(n, c) for n, c in configs if n in arms]
    results = [ArmResult(n, c) for n, c in configs]
    for s in seeds:
        for res in results:
            cfg = res.config.replace(seed=s, data_seed=s)
            ds = cache.get(cfg)
            rep = run_arm(cfg, ds, res.name)
            log.info("axis %s arm %s seed %d: tile F1 %.4f", axis, res.name, s, rep.tile_f1)
            res.reports.append(rep)
    return AblationResult(axis, results, list(seeds))


def run_named_arms(
    base: TrainConfig,
    arms: list[tuple[str, str]],
    seeds=(0,),
    cache: DataCache | None = None,
) -> dict[tuple[str, str], ArmResult]:
    """Run (axis, arm) pairs; arms with identical configs are trained once per seed."""
    cache = cache or DataCache()
    configs = {}
    for axis, name in arms:
        match = [c for n, c in arm_configs(base, axis) if n == name]
        if not match:
            raise ValueError(f"axis {axis!r} has no arm {name!r}")
        configs[(axis, name)] = match[0]
    results = {key: ArmResult(key[1], cfg) for key, cfg in configs.items()}
    for s in seeds:
        done: dict[str, EvalReport] = {}
        for key, cfg in configs.items():
            cfg_s = cfg.replace(seed=s, data_seed=s)
            h = cfg_s.hash()
            if h not in done:
                done[h] = run_arm(cfg_s, cache.get(cfg_s), key[1])
                log.info("arm %s/%s seed %d: tile F1 %.4f", key[0], key[1], s, done[h].tile_f1)
            results[key].reports.append(done[h])
    return results
