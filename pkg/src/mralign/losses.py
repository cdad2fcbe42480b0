"""Pre-training losses and the batched forward pass that combines them.

All similarity logits are built from L2-normalised features, so ``v @ w.T``
is a cosine. The temperature is a single learnable scalar shared by the
keyword alignment and the image-text contrastive terms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor, stop_gradient

log = logging.getLogger(__name__)


# -- positives ------------------------------------------------------------------------
def cosine_matrix(V: np.ndarray, T: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.where(n < eps, 0.0, x / np.where(n < eps, 1.0, n))

    return unit(np.asarray(V, np.float64)) @ unit(np.asarray(T, np.float64)).T


def select_topk_positive(V, T, k_o: int) -> np.ndarray:
    """Per row of V, the indices of the ``k_o`` most cosine-similar rows of T.

    Ties go to the lower index. Returns (v_o, min(k_o, k)) ordered by
    decreasing similarity.
    """
    V, T = np.asarray(V), np.asarray(T)
    if T.ndim != 2 or T.shape[0] == 0:
        raise ValueError("select_topk_positive: empty keyword matrix")
    if k_o < 1:
        raise ValueError("k_o must be >= 1")
    sims = cosine_matrix(V, T)
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, : min(k_o, T.shape[0])]


# -- keyword alignment ------------------------------------------------------------------
def _check_tau(tau) -> None:
    value = float(tau.data) if isinstance(tau, Tensor) else float(tau)
    if not value > 0:
        raise ad.DomainError(f"temperature must be positive, got {value}")


def cvta_loss(V: Tensor, T: Tensor, positives: np.ndarray, tau) -> Tensor:
    """Mean over patches and their positives of -log softmax_k(cos(v_a, w_b) / tau)."""
    _check_tau(tau)
    positives = np.asarray(positives, dtype=np.int64)
    if positives.ndim != 2 or positives.shape[0] != V.shape[0]:
        raise ValueError(f"positives shape {positives.shape} does not match {V.shape[0]} visual rows")
    if positives.size and (positives.min() < 0 or positives.max() >= T.shape[0]):
        raise ValueError("positive index outside the keyword matrix")
    logits = ad.l2_normalize(V) @ ad.transpose(ad.l2_normalize(T))
    logits = logits / tau
    lsm = ad.log_softmax(logits, axis=-1)
    rows = np.repeat(np.arange(V.shape[0]), positives.shape[1])
    picked = lsm[rows, positives.reshape(-1)]
    return -ad.tmean(picked)


# -- cross-resolution alignment ---------------------------------------------------------
def mrtva_pair(h_p: Tensor, g_c: Tensor) -> Tensor:
    """Negative cosine along the last axis; zero-norm inputs contribute 0."""
    return -ad.cosine_similarity(h_p, g_c, axis=-1)


def mrtva_symmetric(g: Tensor, h: Tensor, edges: np.ndarray) -> Tensor:
    """Average over (parent, child) edges of
    1/2 [D(h_parent, sg(g_child)) + D(g_parent, sg(h_child))].
    """
    edges = np.asarray(edges, dtype=np.int64)
    if edges.size == 0:
        raise ValueError("mrtva_symmetric: no parent-child edges")
    if edges.max() >= g.shape[0] or h.shape[0] != g.shape[0]:
        raise ValueError("mrtva_symmetric: missing representations for some edge endpoints")
    p, c = edges[:, 0], edges[:, 1]
    first = mrtva_pair(h[p], stop_gradient(g[c]))
    second = mrtva_pair(g[p], stop_gradient(h[c]))
    return ad.scale(ad.tmean(first + second), 0.5)


# -- image-text contrast ------------------------------------------------------------------
class FeatureQueue:
    """Fixed-capacity FIFO of unit-norm image and text features."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = int(capacity)
        self.dim = dim
        self.image = np.zeros((0, dim), np.float32)
        self.text = np.zeros((0, dim), np.float32)

    def __len__(self) -> int:
        return self.image.shape[0]

    def enqueue(self, image: np.ndarray, text: np.ndarray) -> None:
        if self.capacity == 0:
            return
        image = _unit(np.asarray(image, np.float32))
        text = _unit(np.asarray(text, np.float32))
        self.image = np.concatenate([self.image, image])[-self.capacity :]
        self.text = np.concatenate([self.text, text])[-self.capacity :]

    def state(self) -> dict[str, np.ndarray]:
        return {"queue.image": self.image.copy(), "queue.text": self.text.copy()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        self.image = arrays["queue.image"].reshape(-1, self.dim).astype(np.float32)
        self.text = arrays["queue.text"].reshape(-1, self.dim).astype(np.float32)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return (x / np.where(n > 0, n, 1.0)).astype(np.float32)


def itc_loss(v: Tensor, w: Tensor, tau, queue: FeatureQueue | None = None) -> Tensor:
    """1/2 (image->text + text->image) InfoNCE; the queue adds negatives."""
    _check_tau(tau)
    if v.shape[0] < 1 or v.shape != w.shape:
        raise ValueError(f"itc_loss: mismatched batches {v.shape} and {w.shape}")
    n = v.shape[0]
    texts, images = w, v
    if queue is not None and len(queue):
        texts = ad.concat([w, Tensor(queue.text)], axis=0)
        images = ad.concat([v, Tensor(queue.image)], axis=0)
    diag = np.arange(n)
    i2t = ad.log_softmax((v @ ad.transpose(texts)) / tau, axis=-1)[diag, diag]
    t2i = ad.log_softmax((w @ ad.transpose(images)) / tau, axis=-1)[diag, diag]
    return ad.scale(ad.tmean(i2t) + ad.tmean(t2i), -0.5)


# -- matching, masked and prefix language modelling ---------------------------------------
def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of (n, C) logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[0] == 0:
        raise ValueError("cross_entropy: empty batch")
    lsm = ad.log_softmax(logits, axis=-1)
    return -ad.tmean(lsm[np.arange(targets.size), targets])


def itm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Binary matched/unmatched cross-entropy over (n, 2) logits; label 1 = matched."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("itm_loss: empty pair set")
    if not (labels == 1).any() or not (labels == 0).any():
        raise ValueError("itm_loss: needs at least one positive and one negative pair")
    return cross_entropy(logits, labels)


def mlm_mask(valid: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Choose ceil(rate * n_valid) positions per row among the valid ones."""
    valid = np.asarray(valid, dtype=bool)
    out = np.zeros_like(valid)
    for i, row in enumerate(valid):
        idx = np.flatnonzero(row)
        if idx.size == 0:
            continue
        n = max(1, math.ceil(rate * idx.size - 1e-9))
        out[i, rng.choice(idx, size=n, replace=False)] = True
    return out


def mlm_loss(logits: Tensor, targets: np.ndarray, masked: np.ndarray) -> Tensor:
    """Cross-entropy over the vocabulary at masked keyword positions only."""
    masked = np.asarray(masked, dtype=bool)
    if not masked.any():
        raise ValueError("mlm_loss: no masked positions")
    rows, cols = np.nonzero(masked)
    lsm = ad.log_softmax(logits[rows, cols], axis=-1)
    return -ad.tmean(lsm[np.arange(rows.size), np.asarray(targets)[rows, cols]])


def plm_prefixes(lengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Prefix length per sequence, uniform on [1, L-1]; 0 marks a skipped row."""
    lengths = np.asarray(lengths)
    out = np.zeros(lengths.shape, dtype=np.int64)
    for i, L in enumerate(lengths):
        if L >= 2:
            out[i] = rng.integers(1, L)
    return out


def plm_loss(logits: Tensor, tokens: np.ndarray, lengths: np.ndarray, prefixes: np.ndarray) -> Tensor:
    """Per-sequence mean next-token cross-entropy over targets after the prefix,
    averaged over sequences with at least two tokens."""
    tokens = np.asarray(tokens)
    lengths = np.asarray(lengths)
    prefixes = np.asarray(prefixes)
    rows, cols, weights = [], [], []
    for i, (L, lp) in enumerate(zip(lengths, prefixes)):
        if L < 2:
            continue
        n = L - lp
        rows += [i] * n
        cols += list(range(lp, L))
        weights += [1.0 / n] * n
    n_seq = int((lengths >= 2).sum())
    if n_seq == 0:
        log.info("plm_loss: no sequence with length >= 2, term skipped")
        return Tensor(0.0)
    rows, cols = np.asarray(rows), np.asarray(cols)
    lsm = ad.log_softmax(logits[rows, cols], axis=-1)
    picked = lsm[np.arange(rows.size), tokens[rows, cols]]
    w = Tensor(np.asarray(weights, dtype=np.float64) / n_seq)
    return -ad.tsum(picked * w)


# -- total objective ------------------------------------------------------------------------
@dataclass
class LossBreakdown:
    cvta: float = 0.0
    mrtva: float = 0.0
    itc: float = 0.0
    itm: float = 0.0
    mlm: float = 0.0
    plm: float = 0.0

    @property
    def bl(self) -> float:
        return self.itc + self.itm + self.mlm + self.plm

    @property
    def total(self) -> float:
        return self.bl + self.cvta + self.mrtva

    def as_dict(self) -> dict[str, float]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        return {"total": self.total, "bl": self.bl, **d}


@dataclass
class LossFlags:
    cvta: bool = True
    mrtva: bool = True
    itc: bool = True
    itm: bool = True
    mlm: bool = True
    plm: bool = True
    hierarchical: bool = True
    k_o: int = 9
    mask_rate: float = 0.15


@dataclass
class Batch:
    """Everything one optimisation step needs, with model-independent fields only.

    Bags are stacked row-wise; every bag has ``bag_size`` rows in level-major
    order and shares the same ``edges`` (local row pairs). ``captions`` holds
    each row's own caption; ``neg_captions`` a caption from another bag used as
    the unmatched pair.
    """

    pooled: np.ndarray
    bag_size: int
    keywords: list[np.ndarray]
    captions: np.ndarray  # (N, Lmax), -1 padded
    lengths: np.ndarray
    neg_captions: np.ndarray
    neg_lengths: np.ndarray
    edges: np.ndarray
    mask_rng_seed: tuple = (0,)
    prefix_rng_seed: tuple = (0,)

    @property
    def n_bags(self) -> int:
        return len(self.keywords)


@dataclass
class ForwardOut:
    terms: dict[str, Tensor]
    breakdown: LossBreakdown
    total: Tensor
    itc_image: np.ndarray | None = None
    itc_text: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _positive_index(V: np.ndarray, Ts: list[np.ndarray], offsets: list[int], bag_size: int, k_o: int):
    """Global keyword indices (N, k_o), -1 where fewer than k_o keywords exist."""
    N = V.shape[0]
    idx = np.full((N, k_o), -1, dtype=np.int64)
    for b, (T, off) in enumerate(zip(Ts, offsets)):
        rows = slice(b * bag_size, (b + 1) * bag_size)
        pos = select_topk_positive(V[rows], T, k_o)
        idx[rows, : pos.shape[1]] = pos + off
    return idx


def _gather_keywords(P, table: Tensor, idx: np.ndarray) -> Tensor:
    full = ad.concat([table, P["tok.pad"]], axis=0)
    pad_row = table.shape[0]
    flat = np.where(idx >= 0, idx, pad_row).reshape(-1)
    return ad.reshape(full[flat], (*idx.shape, table.shape[1]))


def caption_features(P, tokens: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """(N, Lmax, d) token features and the (N, Lmax) validity mask.

    Empty captions get one PAD slot so that fusion always has a key.
    """
    tokens = np.asarray(tokens)
    valid = np.arange(tokens.shape[1])[None, :] < np.asarray(lengths)[:, None]
    valid[:, 0] = True
    ids = np.where(tokens >= 0, tokens, 0)
    feats = ad.reshape(M.text_encode_ids(P, ids.reshape(-1)), (*tokens.shape, -1))
    empty = np.asarray(lengths) == 0
    if empty.any():
        m = Tensor(empty[:, None, None].astype(np.float32) * np.eye(tokens.shape[1], 1, dtype=np.float32)[None])
        feats = feats * (1.0 - m) + ad.reshape(P["tok.pad"], (1, 1, -1)) * m
    return feats, valid


def masked_mean(feats: Tensor, valid: np.ndarray) -> Tensor:
    m = Tensor(valid[:, :, None].astype(np.float32))
    return ad.tsum(feats * m, axis=1) / Tensor(valid.sum(1, keepdims=True).astype(np.float32))


def total_loss(P: dict[str, Tensor], batch: Batch, flags: LossFlags, queue: FeatureQueue | None = None) -> ForwardOut:
    """Forward pass over a batch of bags; returns every term and the total.

    Keyword alignment and cross-resolution alignment work on bag keywords and
    the fused representation of each patch with its top-k_o positives. The
    baseline terms work on (patch, own caption) pairs.
    """
    if batch.n_bags == 0:
        raise ValueError("total_loss: empty batch")
    bs = batch.bag_size
    N = batch.pooled.shape[0]
    if N != bs * batch.n_bags:
        raise ValueError(f"batch has {N} rows, expected {bs} x {batch.n_bags}")
    tau = M.tau(P)
    V = M.encode_pooled(P, batch.pooled)
    terms: dict[str, Tensor] = {}
    out = ForwardOut(terms, LossBreakdown(), Tensor(0.0))

    if flags.cvta or flags.mrtva:
        offsets = np.cumsum([0] + [len(k) for k in batch.keywords])[:-1].tolist()
        T_all = M.text_encode_ids(P, np.concatenate(batch.keywords))
        Ts = [T_all.data[o : o + len(k)] for o, k in zip(offsets, batch.keywords)]
        pos_idx = _positive_index(V.data, Ts, offsets, bs, flags.k_o)
        out.extras["positives"] = pos_idx

    if flags.cvta:
        parts = []
        for b, (o, k) in enumerate(zip(offsets, batch.keywords)):
            rows = slice(b * bs, (b + 1) * bs)
            local = pos_idx[rows][:, : min(flags.k_o, len(k))] - o
            parts.append(cvta_loss(V[rows], T_all[o : o + len(k)], local, tau))
        terms["cvta"] = ad.scale(sum(parts[1:], parts[0]), 1.0 / len(parts))

    if flags.mrtva:
        kw_mask = pos_idx >= 0
        z = M.fuse(P, V, _gather_keywords(P, T_all, pos_idx), kw_mask).z
        g, h = M.project_predict(P, z)
        edges = np.concatenate([batch.edges + b * bs for b in range(batch.n_bags)])
        terms["mrtva"] = mrtva_symmetric(g, h, edges)
        out.extras["z"] = z

    if flags.itc or flags.itm or flags.mlm:
        cap, cap_valid = caption_features(P, batch.captions, batch.lengths)

    if flags.itc:
        vp, wp = M.itc_project(P, V, masked_mean(cap, cap_valid))
        terms["itc"] = itc_loss(vp, wp, tau, queue)
        out.itc_image, out.itc_text = vp.data.copy(), wp.data.copy()

    if flags.itm:
        neg, neg_valid = caption_features(P, batch.neg_captions, batch.neg_lengths)
        z_pos = M.fuse(P, V, cap, cap_valid).z
        z_neg = M.fuse(P, V, neg, neg_valid).z
        logits = M.itm_logits(P, ad.concat([z_pos, z_neg], axis=0))
        labels = np.concatenate([np.ones(N, np.int64), np.zeros(N, np.int64)])
        terms["itm"] = itm_loss(logits, labels)

    if flags.mlm:
        rng = np.random.default_rng(list(batch.mask_rng_seed))
        real = np.arange(batch.captions.shape[1])[None, :] < batch.lengths[:, None]
        masked = mlm_mask(real, flags.mask_rate, rng)
        mm = Tensor(masked[:, :, None].astype(np.float32))
        d = cap.shape[-1]
        inp = cap * (1.0 - mm) + ad.reshape(P["tok.mask"], (1, 1, d)) * mm
        states = M.fuse(P, V, inp, cap_valid).states
        terms["mlm"] = mlm_loss(M.mlm_logits(P, states), np.maximum(batch.captions, 0), masked)

    if flags.plm:
        rng = np.random.default_rng(list(batch.prefix_rng_seed))
        prefixes = plm_prefixes(batch.lengths, rng)
        toks = np.maximum(batch.captions, 0)
        logits = M.plm_logits(P, V, toks, batch.lengths)
        terms["plm"] = plm_loss(logits, toks, batch.lengths, prefixes)

    total = None
    for name in ("itc", "itm", "mlm", "plm", "cvta", "mrtva"):
        if name in terms:
            total = terms[name] if total is None else total + terms[name]
    if total is None:
        raise ValueError("total_loss: every term is disabled")
    out.total = total
    out.breakdown = LossBreakdown(**{k: float(t.data) for k, t in terms.items()})
    return out
