"""Toy encoders, fusion stack and heads.

Parameters live in a flat ``dict[str, np.ndarray]``. Forward functions take
the same mapping with values wrapped as :class:`Tensor` so that any subset can
be made differentiable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IN_CHANNELS = 2
POOL = 8
POOLED_SIDE = 64
IN_DIM = IN_CHANNELS * POOLED_SIDE * POOLED_SIDE


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d: int = 32
    d_proj: int = 16
    vis_hidden: int = 64
    mlp_hidden: int = 64
    n_blocks: int = 2
    max_caption: int = 16
    in_dim: int = IN_DIM
    tau_init: float = 0.07


def _dense(rng, fan_in, fan_out, gain=1.0):
    return (rng.standard_normal((fan_in, fan_out)) * gain / np.sqrt(fan_in)).astype(np.float32)


def _block_params(rng, prefix: str, d: int, m: int) -> dict[str, np.ndarray]:
    z = lambda *s: np.zeros(s, np.float32)
    return {
        f"{prefix}.wq": _dense(rng, d, d),
        f"{prefix}.wk": _dense(rng, d, d),
        f"{prefix}.wv": _dense(rng, d, d),
        f"{prefix}.wo": _dense(rng, d, d, 0.5),
        f"{prefix}.w1": _dense(rng, d, m),
        f"{prefix}.b1": z(1, m),
        f"{prefix}.w2": _dense(rng, m, d, 0.5),
        f"{prefix}.b2": z(1, d),
    }


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 101])
    d, V = cfg.d, cfg.vocab_size
    z = lambda *s: np.zeros(s, np.float32)
    p = {
        "vis.w1": _dense(rng, cfg.in_dim, cfg.vis_hidden, 4.0),
        "vis.b1": z(1, cfg.vis_hidden),
        "vis.w2": _dense(rng, cfg.vis_hidden, d),
        "vis.b2": z(1, d),
        "txt.emb": rng.standard_normal((V, d)).astype(np.float32),
        "txt.wm": _dense(rng, d, d, 0.5),
        "txt.bm": z(1, d),
        "tok.pad": (rng.standard_normal((1, d)) * 0.1).astype(np.float32),
        "tok.mask": rng.standard_normal((1, d)).astype(np.float32),
        "fuse.type_img": (rng.standard_normal((1, d)) * 0.1).astype(np.float32),
        "fuse.type_txt": (rng.standard_normal((1, d)) * 0.1).astype(np.float32),
        "pj.w": _dense(rng, d, cfg.d_proj),
        "pj.b": z(1, cfg.d_proj),
        "pd.w1": _dense(rng, cfg.d_proj, cfg.d_proj),
        "pd.b1": z(1, cfg.d_proj),
        "pd.w2": z(cfg.d_proj, cfg.d_proj),
        "pd.b2": z(1, cfg.d_proj),
        "itc.v": _dense(rng, d, d),
        "itc.t": _dense(rng, d, d),
        "itm.w": _dense(rng, d, 2),
        "itm.b": z(1, 2),
        "mlm.w": _dense(rng, d, V),
        "mlm.b": z(1, V),
        "plm.pos": (rng.standard_normal((cfg.max_caption, d)) * 0.1).astype(np.float32),
        "plm.w": _dense(rng, d, V),
        "plm.b": z(1, V),
        "log_tau": np.array(np.log(cfg.tau_init), dtype=np.float32),
    }
    for i in range(cfg.n_blocks):
        p.update(_block_params(rng, f"fuse.{i}", d, cfg.mlp_hidden))
    p.update(_block_params(rng, "plm.blk", d, cfg.mlp_hidden))
    return p


NO_DECAY = ("log_tau",)


def as_leaves(params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in params.items()}


def const_params(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return as_leaves(params, trainable=False)


# -- building blocks ---------------------------------------------------------------
def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., k) @ w (k, m) + b (1, m)."""
    lead = x.shape[:-1]
    y = ad.reshape(x, (-1, x.shape[-1])) @ w
    if b is not None:
        y = y + b
    return ad.reshape(y, (*lead, w.shape[-1]))


def attention_block(P: dict[str, Tensor], prefix: str, X: Tensor, bias: np.ndarray) -> Tensor:
    """Single-head self-attention + tanh MLP, both residual.

    ``bias`` is an additive (N, 1 or n, n) mask: 0 where attention is allowed
    and a large negative number elsewhere.
    """
    d = X.shape[-1]
    Q = linear(X, P[f"{prefix}.wq"])
    K = linear(X, P[f"{prefix}.wk"])
    Vv = linear(X, P[f"{prefix}.wv"])
    S = ad.scale(Q @ ad.transpose(K), 1.0 / np.sqrt(d)) + Tensor(bias)
    A = ad.softmax(S, axis=-1)
    X = X + linear(A @ Vv, P[f"{prefix}.wo"])
    H = ad.tanh(linear(X, P[f"{prefix}.w1"], P[f"{prefix}.b1"]))
    return X + linear(H, P[f"{prefix}.w2"], P[f"{prefix}.b2"])


NEG = -1e9


# -- encoders ------------------------------------------------------------------------
def pool_patch(patch: np.ndarray) -> np.ndarray:
    """Fixed 8x average pool of a (2, 512, 512) patch, flattened."""
    patch = np.asarray(patch, dtype=np.float32)
    if patch.shape != (IN_CHANNELS, 512, 512):
        raise ValueError(f"patch must have shape {(IN_CHANNELS, 512, 512)}, got {patch.shape}")
    s = POOLED_SIDE
    return patch.reshape(IN_CHANNELS, s, POOL, s, POOL).mean(axis=(2, 4), dtype=np.float32).reshape(-1)


def encode_pooled(P: dict[str, Tensor], X) -> Tensor:
    """Vision MLP on pooled inputs (N, in_dim) -> (N, d)."""
    X = X if isinstance(X, Tensor) else pooled_input(X)
    h = ad.tanh(X @ P["vis.w1"] + P["vis.b1"])
    return h @ P["vis.w2"] + P["vis.b2"]


def pooled_input(pooled: np.ndarray) -> Tensor:
    """Centered encoder input."""
    return Tensor(np.asarray(pooled, dtype=np.float32) - np.float32(0.5))


def vision_encode(P: dict[str, Tensor], patch: np.ndarray) -> Tensor:
    return encode_pooled(P, pooled_input(pool_patch(patch)[None, :]))[0]


def text_encode_ids(P: dict[str, Tensor], ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = P["txt.emb"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise KeyError(f"token ids outside vocabulary of size {V}: {ids[(ids < 0) | (ids >= V)].tolist()}")
    e = P["txt.emb"][ids]
    return e + ad.tanh(linear(e, P["txt.wm"], P["txt.bm"]))


def text_encode(P: dict[str, Tensor], token_id: int) -> Tensor:
    return text_encode_ids(P, [int(token_id)])[0]


# -- fusion ---------------------------------------------------------------------------
@dataclass
class FusedRep:
    z: Tensor  # (N, d)
    states: Tensor  # (N, k_o, d)


def fuse(P: dict[str, Tensor], v: Tensor, kw: Tensor, kw_mask: np.ndarray | None = None) -> FusedRep:
    """Fuse image features (N, d) with keyword features (N, k_o, d).

    Masked-out keyword slots are replaced by the PAD embedding and excluded as
    attention keys. Keyword slots carry no positional signal.
    """
    if kw.ndim != 3 or kw.shape[1] == 0:
        raise ValueError(f"fuse needs (N, k_o >= 1, d) keyword features, got {kw.shape}")
    N, k, d = kw.shape
    if kw_mask is None:
        kw_mask = np.ones((N, k), dtype=bool)
    kw_mask = np.asarray(kw_mask, dtype=bool)
    if not kw_mask.any(axis=1).all():
        raise ValueError("fuse: every row needs at least one keyword")
    m = kw_mask[:, :, None].astype(np.float32)
    if not m.all():
        kw = kw * Tensor(m) + ad.reshape(P["tok.pad"], (1, 1, d)) * Tensor(1.0 - m)
    img = ad.reshape(v + P["fuse.type_img"], (N, 1, d))
    X = ad.concat([img, kw + ad.reshape(P["fuse.type_txt"], (1, 1, d))], axis=1)
    keys = np.concatenate([np.ones((N, 1), bool), kw_mask], axis=1)
    bias = np.where(keys, 0.0, NEG).astype(np.float32)[:, None, :]
    i = 0
    while f"fuse.{i}.wq" in P:
        X = attention_block(P, f"fuse.{i}", X, bias)
        i += 1
    return FusedRep(z=ad.reshape(X[:, 0:1, :], (N, d)), states=X[:, 1:, :])


def project_predict(P: dict[str, Tensor], z: Tensor) -> tuple[Tensor, Tensor]:
    """g = p_j(z), h = p_d(g); p_d is residual so it starts as the identity."""
    g = linear(z, P["pj.w"], P["pj.b"])
    h = g + linear(ad.tanh(linear(g, P["pd.w1"], P["pd.b1"])), P["pd.w2"], P["pd.b2"])
    return g, h


def itc_project(P: dict[str, Tensor], v: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    return ad.l2_normalize(linear(v, P["itc.v"])), ad.l2_normalize(linear(w, P["itc.t"]))


def itm_logits(P: dict[str, Tensor], z: Tensor) -> Tensor:
    return linear(z, P["itm.w"], P["itm.b"])


def mlm_logits(P: dict[str, Tensor], states: Tensor) -> Tensor:
    return linear(states, P["mlm.w"], P["mlm.b"])


def plm_logits(P: dict[str, Tensor], image: Tensor, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Teacher-forced causal decoder.

    Position 0 holds the image feature; position i >= 1 holds token i-1.
    Output i is the prediction for token i. Returns (N, Lmax, V) logits.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    N, Lmax = tokens.shape
    if Lmax > P["plm.pos"].shape[0]:
        raise ValueError(f"caption length {Lmax} exceeds decoder context {P['plm.pos'].shape[0]}")
    d = image.shape[-1]
    parts = [ad.reshape(image, (N, 1, d))]
    if Lmax > 1:
        prev = np.where(tokens[:, :-1] >= 0, tokens[:, :-1], 0)
        emb = ad.reshape(text_encode_ids(P, prev.reshape(-1)), (N, Lmax - 1, d))
        parts.append(emb)
    Y = ad.concat(parts, axis=1) + ad.reshape(P["plm.pos"][0:Lmax], (1, Lmax, d))
    causal = np.tril(np.ones((Lmax, Lmax), dtype=bool))
    valid = np.arange(Lmax)[None, :] < np.maximum(np.asarray(lengths), 1)[:, None]
    allowed = causal[None, :, :] & valid[:, None, :]
    bias = np.where(allowed, 0.0, NEG).astype(np.float32)
    Y = attention_block(P, "plm.blk", Y, bias)
    return linear(Y, P["plm.w"], P["plm.b"])


def tau(P: dict[str, Tensor]) -> Tensor:
    return ad.exp(P["log_tau"])


# -- checkpoint container -------------------------------------------------------------
CKPT_MAGIC = b"MRCKPT\x00\x01"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    """Versioned container: header, meta key/values, named f32 tensors."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta))]
    for k in sorted(meta):
        for s in (k, str(meta[k])):
            b = s.encode()
            chunks.append(struct.pack("<I", len(b)) + b)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    blob = Path(path).read_bytes()
    if len(blob) < 48 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, n_meta = struct.unpack_from("<II", body, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} != {CKPT_VERSION}")
    off = 16

    def read_str():
        nonlocal off
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        s = body[off : off + n].decode()
        off += n
        return s

    meta = {}
    for _ in range(n_meta):
        k = read_str()
        meta[k] = read_str()
    (n_t,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(n_t):
        name = read_str()
        (nd,) = struct.unpack_from("<I", body, off)
        off += 4
        dims = struct.unpack_from(f"<{nd}I", body, off)
        off += 4 * nd
        n = int(np.prod(dims)) if nd else 1
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
        off += 4 * n
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")
    return tensors, meta


def model_config_from_meta(meta: dict[str, str]) -> ModelConfig:
    return ModelConfig(**json.loads(meta["model_config"]))


def model_config_meta(cfg: ModelConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
