"""Zero-shot tile and slide classification, segmentation and metrics.

Two tile protocols share the prompt side:

* guided: retrieve the tile's top-k_o keywords from the dictionary, fuse them
  with the visual feature and score the fused representation;
* classical: score the visual feature directly.

Both compare features in the ITC projection space, where image and text are
trained to meet.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .autodiff import Tensor
from .bags import Vocabulary
from .dataset import Dataset
from .pyramid import LEVELS, N_BAG, bag_members

K_SET = (1, 5, 10, 50, 100)


# -- dictionary and prompts ------------------------------------------------------------
@dataclass
class KeywordDictionary:
    ids: np.ndarray
    features: np.ndarray  # (n, d), text encoder output

    def __len__(self) -> int:
        return len(self.ids)


def build_dictionary(P: dict[str, Tensor], vocab_size: int | None = None) -> KeywordDictionary:
    n = vocab_size or P["txt.emb"].shape[0]
    ids = np.arange(n)
    return KeywordDictionary(ids, M.text_encode_ids(P, ids).data.copy())


@dataclass
class PromptSet:
    templates: dict[int, list[list[int]]]

    def __post_init__(self):
        if not self.templates:
            raise ValueError("prompt set is empty")
        for c, ts in self.templates.items():
            if not ts or any(len(t) == 0 for t in ts):
                raise ValueError(f"class {c} needs at least one non-empty template")

    @property
    def n_classes(self) -> int:
        return len(self.templates)

    def first_only(self) -> PromptSet:
        return PromptSet({c: ts[:1] for c, ts in self.templates.items()})


def default_prompts(vocab: Vocabulary) -> PromptSet:
    """Per class: all class keywords, the coarse group, the fine group."""
    return PromptSet({c: [vocab.class_keywords(c), list(vocab.coarse[c]), list(vocab.fine[c])] for c in sorted(vocab.coarse)})


def prompt_features(P, dictionary: KeywordDictionary, prompts: PromptSet) -> np.ndarray:
    """(n_templates, C, d) unit features: projected normalised keyword means."""
    n_t = max(len(ts) for ts in prompts.templates.values())
    C = prompts.n_classes
    d = P["itc.t"].shape[1]
    out = np.zeros((n_t, C, d), np.float32)
    valid = np.zeros((n_t, C), bool)
    pos = {int(t): i for i, t in enumerate(dictionary.ids)}
    for c in range(C):
        for j, tpl in enumerate(prompts.templates[c]):
            try:
                feats = dictionary.features[[pos[int(t)] for t in tpl]]
            except KeyError as exc:
                raise KeyError(f"prompt token {exc.args[0]} not in dictionary") from None
            w = _unit(feats.mean(0, keepdims=True))
            out[j, c] = _unit(w @ P["itc.t"].data)[0]
            valid[j, c] = True
    if not valid.all():
        # classes with fewer templates reuse their first template
        for j, c in zip(*np.nonzero(~valid)):
            out[j, c] = out[0, c]
    return out


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def prompt_ensemble(scores) -> np.ndarray:
    """Mean of per-template score vectors, renormalised to sum to 1."""
    s = np.mean(np.asarray(scores, dtype=np.float64), axis=0)
    return s / s.sum(axis=-1, keepdims=True)


def topk_keywords(V: np.ndarray, dictionary: KeywordDictionary, k_o: int) -> np.ndarray:
    """Dictionary rows with highest cosine per visual row; ties to the lower index."""
    if len(dictionary) == 0:
        raise ValueError("empty keyword dictionary")
    sims = _unit(np.asarray(V, np.float64)) @ _unit(dictionary.features.astype(np.float64)).T
    return np.argsort(-sims, axis=1, kind="stable")[:, : min(k_o, len(dictionary))]


def tile_embeddings(P, X: np.ndarray, mode: str, dictionary: KeywordDictionary | None = None, k_o: int = 9) -> np.ndarray:
    """Unit image-side features in the projection space for pooled tiles X."""
    V = M.encode_pooled(P, X)
    if mode == "classical":
        feat = V
    elif mode == "guided":
        if dictionary is None:
            raise ValueError("guided mode needs a keyword dictionary")
        idx = topk_keywords(V.data, dictionary, k_o)
        kw = Tensor(dictionary.features[idx])
        feat = M.fuse(P, V, kw).z
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _unit(feat.data @ P["itc.v"].data)


def score_tiles(emb: np.ndarray, prompt_feats: np.ndarray, temperature: float, pe: bool = True) -> np.ndarray:
    """(n, C) class scores. With ``pe`` every template is scored and ensembled."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    feats = prompt_feats if pe else prompt_feats[:1]
    per_template = [_softmax(emb @ f.T / temperature) for f in feats]
    return prompt_ensemble(per_template)


def _single(P, patch, prompts, dictionary, k_o, mode, pe):
    if not isinstance(prompts, PromptSet):
        prompts = PromptSet(prompts)
    dictionary = dictionary or build_dictionary(P)
    X = M.pool_patch(patch)[None, :] if np.asarray(patch).ndim == 3 else np.asarray(patch, np.float32).reshape(1, -1)
    emb = tile_embeddings(P, X, mode, dictionary, k_o)
    return score_tiles(emb, prompt_features(P, dictionary, prompts), float(M.tau(P).data), pe)[0]


def classify_tile_guided(P, patch, dictionary: KeywordDictionary, prompts: PromptSet, k_o: int = 9, pe: bool = True) -> np.ndarray:
    """Class scores of one (2, 512, 512) patch (or pooled vector) via keyword-guided fusion."""
    return _single(P, patch, prompts, dictionary, k_o, "guided", pe)


def classify_tile_classical(P, patch, prompts: PromptSet, pe: bool = True) -> np.ndarray:
    """Class scores of one patch from the visual feature alone."""
    return _single(P, patch, prompts, None, 1, "classical", pe)


# -- slides ---------------------------------------------------------------------------
def classify_wsi(tile_scores, K_set=K_SET) -> dict[int, int]:
    """Per K: argmax over classes of the sum of each class's top-min(K, n) tile scores."""
    s = np.asarray(tile_scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("classify_wsi: no tiles")
    ordered = -np.sort(-s, axis=0)
    csum = np.cumsum(ordered, axis=0)
    return {K: int(np.argmax(csum[min(K, s.shape[0]) - 1])) for K in K_set}


def backproject_scores(tile_scores, footprints, dims) -> np.ndarray:
    """Average overlapping tile scores per pixel, then argmax; background = C.

    ``footprints`` are (y, x, h, w) in map pixels.
    """
    s = np.asarray(tile_scores, dtype=np.float64)
    H, W = dims
    C = s.shape[1]
    acc = np.zeros((C, H, W))
    cnt = np.zeros((H, W))
    for sc, (y, x, h, w) in zip(s, footprints):
        if y < 0 or x < 0 or h <= 0 or w <= 0 or y + h > H or x + w > W:
            raise ValueError(f"footprint {(y, x, h, w)} outside map {dims}")
        acc[:, y : y + h, x : x + w] += sc[:, None, None]
        cnt[y : y + h, x : x + w] += 1
    labels = np.argmax(acc / np.maximum(cnt, 1), axis=0)
    labels[cnt == 0] = C
    return labels.astype(np.int32)


# -- metrics ------------------------------------------------------------------------
def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _check_counts(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if (cm < 0).any() or cm.sum() == 0:
        raise ValueError("confusion counts must be non-negative with a positive total")
    return cm


def weighted_f1(cm) -> float:
    """Support-weighted mean of per-class F1 (rows = truth, columns = prediction)."""
    cm = _check_counts(cm)
    tp = np.diag(cm)
    support = cm.sum(1)
    predicted = cm.sum(0)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((support / support.sum() * f1).sum())


def balanced_accuracy(cm) -> float:
    """Mean recall over classes with non-zero support."""
    cm = _check_counts(cm)
    support = cm.sum(1)
    keep = support > 0
    return float((np.diag(cm)[keep] / support[keep]).mean())


# -- evaluation reports ----------------------------------------------------------------
@dataclass
class EvalReport:
    name: str
    mode: str
    pe: bool
    tile_confusion: list
    wsi_confusion: dict  # K -> confusion
    seg_pixel_accuracy: float
    runtime: float
    config: dict = field(default_factory=dict)

    @property
    def tile_f1(self) -> float:
        return weighted_f1(self.tile_confusion)

    @property
    def tile_bacc(self) -> float:
        return balanced_accuracy(self.tile_confusion)

    def wsi_f1(self) -> dict[int, float]:
        return {int(K): weighted_f1(cm) for K, cm in self.wsi_confusion.items()}

    def best_k(self) -> int:
        f = self.wsi_f1()
        return max(sorted(f), key=lambda k: f[k])

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "pe": self.pe,
            "tile_confusion": [list(map(int, r)) for r in self.tile_confusion],
            "tile_weighted_f1": self.tile_f1,
            "tile_balanced_accuracy": self.tile_bacc,
            "wsi_confusion": {str(k): [list(map(int, r)) for r in v] for k, v in self.wsi_confusion.items()},
            "wsi_weighted_f1": {str(k): v for k, v in self.wsi_f1().items()},
            "wsi_best_k": self.best_k(),
            "seg_pixel_accuracy": self.seg_pixel_accuracy,
            "runtime": self.runtime,
            "config": self.config,
        }

    @staticmethod
    def from_record(rec: dict) -> EvalReport:
        return EvalReport(
            rec["name"],
            rec["mode"],
            rec["pe"],
            rec["tile_confusion"],
            {int(k): v for k, v in rec["wsi_confusion"].items()},
            rec["seg_pixel_accuracy"],
            rec["runtime"],
            rec.get("config", {}),
        )


def split_slides(ds: Dataset, eval_fraction: float) -> tuple[list[int], list[int]]:
    """Train/held-out split by slide id; the held-out part is class-stratified."""
    by_class: dict[int, list[int]] = {}
    for s, l in sorted(ds.labels.items()):
        by_class.setdefault(l, []).append(s)
    train, held = [], []
    for ids in by_class.values():
        n_eval = int(round(len(ids) * eval_fraction))
        held += ids[len(ids) - n_eval :]
        train += ids[: len(ids) - n_eval]
    return sorted(train), sorted(held)


def evaluate(
    P,
    ds: Dataset,
    mode: str = "guided",
    pe: bool = True,
    k_o: int = 9,
    prompts: PromptSet | None = None,
    name: str = "",
    seg_dir: str | Path | None = None,
) -> EvalReport:
    """Tile, slide and segmentation evaluation over every bag patch of ``ds``."""
    if not ds.records:
        raise ValueError("evaluate: empty dataset")
    t0 = time.perf_counter()
    prompts = prompts or default_prompts(ds.vocab)
    C = prompts.n_classes
    dictionary = build_dictionary(P)
    pf = prompt_features(P, dictionary, prompts)
    temp = float(M.tau(P).data)
    X = np.concatenate([r.pooled for r in ds.records])
    emb = tile_embeddings(P, X, mode, dictionary, k_o)
    scores = score_tiles(emb, pf, temp, pe)
    y_true = np.repeat([r.label for r in ds.records], N_BAG)
    y_pred = np.argmax(scores, axis=1)
    tile_cm = confusion(y_true, y_pred, C)

    per_slide: dict[int, list[np.ndarray]] = {}
    for i, r in enumerate(ds.records):
        per_slide.setdefault(r.anchor.slide_id, []).append(scores[i * N_BAG : (i + 1) * N_BAG])
    slides = sorted(per_slide)
    wsi_true = [ds.labels[s] for s in slides]
    wsi_pred = {K: [] for K in K_SET}
    for s in slides:
        for K, lab in classify_wsi(np.concatenate(per_slide[s]), K_SET).items():
            wsi_pred[K].append(lab)
    wsi_cm = {K: confusion(wsi_true, wsi_pred[K], C).tolist() for K in K_SET}

    # segmentation at 5x map resolution (one map pixel = 8 native pixels)
    correct = covered = 0
    for i, r in enumerate(ds.records):
        side = ds.gen.slide_side // 8
        fps = []
        for p in bag_members(r.anchor):
            y, x, size = ds.index.absolute_footprint(p)
            fps.append((y // 8, x // 8, size // 8, size // 8))
        fine = [j for j, p in enumerate(bag_members(r.anchor)) if p.level == LEVELS[-1]]
        seg = backproject_scores(scores[i * N_BAG : (i + 1) * N_BAG][fine], [fps[j] for j in fine], (side, side))
        hit = seg < C
        covered += int(hit.sum())
        correct += int((seg[hit] == r.label).sum())
        if seg_dir is not None:
            from .pyramid import write_raster

            Path(seg_dir).mkdir(parents=True, exist_ok=True)
            write_raster(Path(seg_dir) / f"seg_{r.anchor.slide_id}_{r.anchor.anchor_idx}.f32", seg.astype(np.float32)[None])
    seg_acc = correct / covered if covered else 0.0
    return EvalReport(name or mode, mode, pe, tile_cm.tolist(), wsi_cm, seg_acc, time.perf_counter() - t0)


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table."""
    cells = [[str(c) for c in columns]] + [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def protocol_comparison(P, ds: Dataset, k_o: int = 9, pe: bool = True) -> tuple[list[EvalReport], str]:
    """Guided vs classical zero-shot on the same checkpoint: two-row table."""
    reports = [evaluate(P, ds, mode, pe, k_o, name=mode) for mode in ("classical", "guided")]
    rows = [
        {"protocol": r.mode, "tile_f1": r.tile_f1, "tile_bacc": r.tile_bacc, "wsi_f1_best": max(r.wsi_f1().values()), "best_K": r.best_k()}
        for r in reports
    ]
    return reports, format_table(rows, ["protocol", "tile_f1", "tile_bacc", "wsi_f1_best", "best_K"])


def write_reports(reports: list[EvalReport], path) -> None:
    Path(path).write_text("".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in reports))


def read_reports(path) -> list[EvalReport]:
    return [EvalReport.from_record(json.loads(l)) for l in Path(path).read_text().splitlines() if l.strip()]
