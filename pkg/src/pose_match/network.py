"""Toy-scale forward passes for the matching transformers.

Feature blocks are ``(N + 1, C)`` arrays whose row 0 is the background token.
Parameters live in a flat, read-only mapping keyed by block path, e.g.
``coarse/gt0/self/q/w``. Geometric attention uses only a distance-bias
(pairwise distances bucketed into bins, each bin given a sinusoidal embedding
projected to one bias per head); there is no angular term, no FFN and no
dropout. Every sublayer is ``x <- LayerNorm(x + sublayer(x))``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import CorruptFile, IndexOutOfRange, ShapeMismatch
from .tensorio import load_collection, save_collection

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    width: int = 256
    desc_dim: int = 256
    heads: int = 4
    coarse_blocks: int = 3
    fine_blocks: int = 3
    n_bins: int = 16
    max_dist: float = 2.0
    radii: Tuple[float, ...] = (0.1, 0.2)
    caps: Tuple[int, ...] = (16, 32)
    sa_widths: Tuple[int, ...] = (32, 32, 64)
    # init gains
    residual_gain: float = 0.1
    adapter_noise: float = 0.02
    pe_input_gain: float = 4.0
    pe_gain: float = 1.5

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeMismatch("width must be divisible by heads")
        if len(self.radii) != len(self.caps):
            raise ShapeMismatch("one neighbor cap per radius")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("radii", "caps", "sa_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        for k in ("radii", "caps", "sa_widths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class ModelWeights(Mapping):
    """Immutable parameter store; iterate for names, index for arrays."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        frozen = {}
        for name, arr in params.items():
            a = np.array(arr, dtype=np.float64, copy=True)
            if not np.all(np.isfinite(a)):
                raise CorruptFile(f"non-finite values in {name}")
            a.setflags(write=False)
            frozen[name] = a
        self._params = frozen

    def __getitem__(self, key: str) -> np.ndarray:
        return self._params[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def sub(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix.rstrip("/") + "/")

    def replace(self, **updates: np.ndarray) -> "ModelWeights":
        """Copy with some tensors swapped (keys use ``/`` as usual)."""
        params = dict(self._params)
        for k, v in updates.items():
            if k not in params:
                raise KeyError(k)
            if np.shape(v) != params[k].shape:
                raise ShapeMismatch(f"{k}: {np.shape(v)} vs {params[k].shape}")
            params[k] = v
        return ModelWeights(self.config, params)

    def save(self, path) -> None:
        save_collection(path, self._params, meta={"config": self.config.to_dict(), "kind": "model_weights"})


@dataclass(frozen=True)
class ParamView:
    weights: ModelWeights
    prefix: str

    def __getitem__(self, key: str) -> np.ndarray:
        return self.weights[self.prefix + key]

    def sub(self, key: str) -> "ParamView":
        return ParamView(self.weights, self.prefix + key.rstrip("/") + "/")

    @property
    def config(self) -> ModelConfig:
        return self.weights.config


# ---------------------------------------------------------------------------
# parameter layout and initialization


def _attn_shapes(prefix: str, c: int) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    out = {}
    for name in ("q", "k", "v", "o"):
        out[f"{prefix}/{name}/w"] = ((c, c), "residual" if name == "o" else "uniform")
        out[f"{prefix}/{name}/b"] = ((c,), "zeros")
    out[f"{prefix}/norm/g"] = ((c,), "ones")
    out[f"{prefix}/norm/b"] = ((c,), "zeros")
    return out


def _gt_shapes(prefix: str, cfg: ModelConfig):
    out = _attn_shapes(f"{prefix}/self", cfg.width)
    out[f"{prefix}/self/dist/w"] = ((cfg.n_bins, cfg.heads), "uniform")
    out.update(_attn_shapes(f"{prefix}/cross", cfg.width))
    return out


def _io_shapes(prefix: str, cfg: ModelConfig):
    c = cfg.width
    return {
        f"{prefix}/in_proj/w": ((cfg.desc_dim, c), "adapter"),
        f"{prefix}/in_proj/b": ((c,), "zeros"),
        f"{prefix}/bg_m": ((c,), "token"),
        f"{prefix}/bg_o": ((c,), "token"),
        f"{prefix}/out_proj/w": ((c, c), "adapter"),
        f"{prefix}/out_proj/b": ((c,), "zeros"),
    }


def param_layout(cfg: ModelConfig) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    """Canonical ordered ``name -> (shape, init kind)`` for a config."""
    layout: Dict[str, Tuple[Tuple[int, ...], str]] = {}
    layout.update(_io_shapes("coarse", cfg))
    for l in range(cfg.coarse_blocks):
        layout.update(_gt_shapes(f"coarse/gt{l}", cfg))
    layout.update(_io_shapes("fine", cfg))
    for s in range(len(cfg.radii)):
        fan_in = 6
        for k, w in enumerate(cfg.sa_widths):
            layout[f"fine/pe/s{s}/l{k}/w"] = ((fan_in, w), "pe_in" if k == 0 else "relu")
            layout[f"fine/pe/s{s}/l{k}/b"] = ((w,), "zeros")
            fan_in = w
    layout["fine/pe/out/w"] = ((cfg.sa_widths[-1] * len(cfg.radii), cfg.width), "pe_out")
    layout["fine/pe/out/b"] = ((cfg.width,), "zeros")
    for l in range(cfg.fine_blocks):
        layout.update(_gt_shapes(f"fine/sdpt{l}/gt", cfg))
        layout.update(_attn_shapes(f"fine/sdpt{l}/lin", cfg.width))
    return layout


def _init_tensor(rng: np.random.Generator, shape, kind: str, cfg: ModelConfig) -> np.ndarray:
    def uniform(gain: float) -> np.ndarray:
        a = gain * np.sqrt(3.0 / shape[0])
        return rng.uniform(-a, a, size=shape)

    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "uniform":
        return uniform(1.0)
    if kind == "relu":
        return uniform(np.sqrt(2.0))
    if kind == "residual":
        return uniform(cfg.residual_gain)
    if kind == "pe_in":
        return uniform(cfg.pe_input_gain)
    if kind == "pe_out":
        return uniform(cfg.pe_gain)
    if kind == "token":
        return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)
    if kind == "adapter":
        return np.eye(*shape) + uniform(cfg.adapter_noise)
    raise ValueError(f"unknown init kind {kind}")


def init_weights(seed: int, cfg: Optional[ModelConfig] = None) -> ModelWeights:
    """Deterministic scaled-uniform initialization (one RNG stream per tensor)."""
    cfg = cfg or ModelConfig()
    params = {}
    for i, (name, (shape, kind)) in enumerate(param_layout(cfg).items()):
        rng = np.random.default_rng([seed, i])
        params[name] = _init_tensor(rng, shape, kind, cfg)
    return ModelWeights(cfg, params)


def load_weights(path, cfg: Optional[ModelConfig] = None) -> ModelWeights:
    tensors, meta = load_collection(path)
    file_cfg = ModelConfig.from_dict(meta.get("config", {}))
    if cfg is not None and (cfg.width != file_cfg.width or cfg.desc_dim != file_cfg.desc_dim
                            or cfg.heads != file_cfg.heads):
        raise ShapeMismatch("weight file widths/heads differ from the requested config")
    cfg = cfg or file_cfg
    layout = param_layout(cfg)
    if set(layout) != set(tensors):
        missing = sorted(set(layout) - set(tensors))[:3]
        raise ShapeMismatch(f"weight file does not match config layout (missing e.g. {missing})")
    for name, (shape, _) in layout.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeMismatch(f"{name}: file {tensors[name].shape} vs config {shape}")
    return ModelWeights(cfg, {name: tensors[name] for name in layout})


def init_or_load_weights(source, cfg: Optional[ModelConfig] = None) -> ModelWeights:
    """``source`` is an integer seed or a path to a saved weight collection."""
    if isinstance(source, (int, np.integer)):
        return init_weights(int(source), cfg)
    return load_weights(source, cfg)


# ---------------------------------------------------------------------------
# primitives


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _linear(x: np.ndarray, p: ParamView, name: str) -> np.ndarray:
    return x @ p[f"{name}/w"] + p[f"{name}/b"]


def _split(x: np.ndarray, heads: int) -> np.ndarray:
    return x.reshape(x.shape[0], heads, -1)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def elu_feature_map(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def distance_buckets(points: np.ndarray, n_bins: int, max_dist: float) -> np.ndarray:
    d = cdist(points, points)
    return np.minimum((d * (n_bins / max_dist)).astype(np.int64), n_bins - 1)


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freq = 1.0 / (10000.0 ** (np.arange(half) / max(half, 1)))
    ang = positions[:, None] * freq[None, :]
    emb = np.zeros((positions.shape[0], dim))
    emb[:, 0:2 * half:2] = np.sin(ang)
    emb[:, 1:2 * half:2] = np.cos(ang)
    return emb


def distance_bias_table(p: ParamView) -> np.ndarray:
    """``(heads, n_bins)`` bias per distance bucket."""
    n_bins = p.config.n_bins
    emb = sinusoidal_embedding(np.arange(n_bins, dtype=np.float64), n_bins)
    return (emb @ p["dist/w"]).T


def geometric_bias(points: np.ndarray, p: ParamView) -> np.ndarray:
    """``(heads, N+1, N+1)`` attention bias; background row/column get none."""
    cfg = p.config
    table = distance_bias_table(p)
    idx = distance_buckets(points, cfg.n_bins, cfg.max_dist)
    n = points.shape[0] + 1
    bias = np.zeros((cfg.heads, n, n))
    bias[:, 1:, 1:] = table[:, idx]
    return bias


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: Optional[np.ndarray] = None,
            return_attn: bool = False):
    """Multi-head softmax attention on split tensors ``(N, H, d)``; one head at a time."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    out = np.empty((q.shape[0], q.shape[1], v.shape[-1]))
    maps = []
    for h in range(q.shape[1]):
        logits = (q[:, h] @ k[:, h].T) * scale
        if bias is not None:
            logits += bias[h]
        attn = softmax_rows(logits)
        out[:, h] = attn @ v[:, h]
        if return_attn:
            maps.append(attn)
    return (out, np.stack(maps)) if return_attn else out


def softmax_attention_layer(x: np.ndarray, y: np.ndarray, p: ParamView,
                            bias: Optional[np.ndarray] = None, return_attn: bool = False):
    """``LayerNorm(x + MHA(query=x, key/value=y))``."""
    heads = p.config.heads
    q = _split(_linear(x, p, "q"), heads)
    k = _split(_linear(y, p, "k"), heads)
    v = _split(_linear(y, p, "v"), heads)
    res = _attend(q, k, v, bias, return_attn)
    att, maps = res if return_attn else (res, None)
    out = layer_norm(x + _linear(att.reshape(x.shape[0], -1), p, "o"), p["norm/g"], p["norm/b"])
    return (out, maps) if return_attn else out


def _check_block(points: np.ndarray, feats: np.ndarray, width: int) -> None:
    if feats.ndim != 2 or feats.shape[1] != width:
        raise ShapeMismatch(f"features must be (N+1, {width}), got {feats.shape}")
    if points is not None and feats.shape[0] != points.shape[0] + 1:
        raise ShapeMismatch("feature rows must equal points + 1 (background token)")


# ---------------------------------------------------------------------------
# blocks


def geometric_transformer_block(pts_m, pts_o, fm: np.ndarray, fo: np.ndarray,
                                weights: ModelWeights, block_path: str,
                                return_attn: bool = False):
    """Distance-biased self-attention in each set, then cross-attention between them.

    Both sets share the block's weights. Cross-attention for the two sets is
    computed from the post-self-attention features of both, simultaneously.
    """
    p = weights.sub(block_path)
    pts_m = np.asarray(getattr(pts_m, "points", pts_m), dtype=np.float64)
    pts_o = np.asarray(getattr(pts_o, "points", pts_o), dtype=np.float64)
    _check_block(pts_m, fm, weights.config.width)
    _check_block(pts_o, fo, weights.config.width)
    ps = p.sub("self")
    sm = softmax_attention_layer(fm, fm, ps, geometric_bias(pts_m, ps), return_attn)
    so = softmax_attention_layer(fo, fo, ps, geometric_bias(pts_o, ps), return_attn)
    if return_attn:
        (sm, am), (so, ao) = sm, so
    pc = p.sub("cross")
    cm = softmax_attention_layer(sm, so, pc, None, return_attn)
    co = softmax_attention_layer(so, sm, pc, None, return_attn)
    if return_attn:
        (cm, cam), (co, cao) = cm, co
        return cm, co, {"self_m": am, "self_o": ao, "cross_m": cam, "cross_o": cao}
    return cm, co


def linear_attention_core(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Kernelized attention with ``phi = elu + 1`` on split tensors ``(N, H, d)``.

    Costs O(N d^2): ``phi(Q) (phi(K)^T V) / (phi(Q) . sum_j phi(K_j))``.
    """
    fq = elu_feature_map(q).transpose(1, 0, 2)
    fk = elu_feature_map(k).transpose(1, 2, 0)
    kv = fk @ v.transpose(1, 0, 2)
    z = fq @ fk.sum(axis=2)[:, :, None]
    return (fq @ kv / z).transpose(1, 0, 2)


LINEAR_CHUNK = 256


def _elu_plus_one_(x: np.ndarray) -> np.ndarray:
    """In-place ``elu(x) + 1``."""
    neg = np.minimum(x, 0.0)
    np.exp(neg, out=neg)
    np.maximum(x, 0.0, out=x)
    x += neg
    return x


def _layer_norm_(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """In-place :func:`layer_norm`."""
    x -= x.mean(axis=-1, keepdims=True)
    x /= np.sqrt(np.einsum("ij,ij->i", x, x)[:, None] / x.shape[-1] + LN_EPS)
    x *= g
    x += b
    return x


def linear_cross_attention(queries: np.ndarray, keys_values: np.ndarray, weights: ModelWeights,
                           block_path: str) -> np.ndarray:
    """``LayerNorm(x + LinearMHA(query=x, key/value=y))``, linear in both lengths.

    Same result as :func:`linear_attention_core` wrapped in the usual
    projections; rows are streamed in fixed-size chunks so the working set
    stays in cache and the cost per row does not grow with N.
    """
    cfg = weights.config
    p = weights.sub(block_path) if isinstance(weights, ModelWeights) else weights
    if queries.ndim != 2 or keys_values.ndim != 2 or queries.shape[1] != cfg.width \
            or keys_values.shape[1] != cfg.width:
        raise ShapeMismatch("query and key/value widths must equal the model width")
    c, h = cfg.width, cfg.heads
    d = c // h
    w_kv = np.hstack([p["k/w"], p["v/w"]])
    b_kv = np.concatenate([p["k/b"], p["v/b"]])
    kv = np.zeros((h, d, d))
    k_sum = np.zeros((h, d))
    for s in range(0, keys_values.shape[0], LINEAR_CHUNK):
        proj = keys_values[s:s + LINEAR_CHUNK] @ w_kv
        proj += b_kv
        k = _elu_plus_one_(proj[:, :c]).reshape(-1, h, d)
        kv += k.transpose(1, 2, 0) @ proj[:, c:].reshape(-1, h, d).transpose(1, 0, 2)
        k_sum += k.sum(axis=0)
    out = np.empty((queries.shape[0], c))
    for s in range(0, queries.shape[0], LINEAR_CHUNK):
        x = queries[s:s + LINEAR_CHUNK]
        q = x @ p["q/w"]
        q += p["q/b"]
        q = _elu_plus_one_(q).reshape(-1, h, d).transpose(1, 0, 2)
        att = q @ kv
        att /= q @ k_sum[:, :, None]
        o = att.transpose(1, 0, 2).reshape(x.shape[0], c) @ p["o/w"]
        o += p["o/b"]
        o += x
        out[s:s + LINEAR_CHUNK] = _layer_norm_(o, p["norm/g"], p["norm/b"])
    return out


def _sparse_rows(idx, n_rows: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0 or idx[0] != 0:
        raise IndexOutOfRange("sparse selection must start with the background row 0")
    if np.any(idx < 0) or np.any(idx >= n_rows):
        raise IndexOutOfRange("sparse index outside the feature block")
    return idx


def sdpt_block(dense_m, dense_o, sparse_idx_m, sparse_idx_o, weights: ModelWeights,
               block_path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Sparse-to-dense point transformer block.

    ``dense_*`` are ``(points (N, 3), features (N+1, C))`` pairs. Sparse
    indices are feature-row indices and must include row 0 first. The sparse
    rows go through a geometric transformer block; each dense set then
    queries its enhanced sparse rows with linear cross-attention.
    """
    pts_m, fm = dense_m
    pts_o, fo = dense_o
    pts_m = np.asarray(getattr(pts_m, "points", pts_m), dtype=np.float64)
    pts_o = np.asarray(getattr(pts_o, "points", pts_o), dtype=np.float64)
    im = _sparse_rows(sparse_idx_m, fm.shape[0])
    io = _sparse_rows(sparse_idx_o, fo.shape[0])
    sm, so = geometric_transformer_block(pts_m[im[1:] - 1], pts_o[io[1:] - 1], fm[im], fo[io],
                                         weights, f"{block_path}/gt")
    lin = f"{block_path}/lin"
    return (linear_cross_attention(fm, sm, weights, lin),
            linear_cross_attention(fo, so, weights, lin))


def full_geometric_block(dense_m, dense_o, weights: ModelWeights, block_path: str):
    """Ablation variant: geometric transformer over every dense point."""
    (pts_m, fm), (pts_o, fo) = dense_m, dense_o
    return geometric_transformer_block(pts_m, pts_o, fm, fo, weights, f"{block_path}/gt")


def linear_only_block(dense_m, dense_o, weights: ModelWeights, block_path: str):
    """Ablation variant: linear self-attention then linear cross-attention, no geometry."""
    (_, fm), (_, fo) = dense_m, dense_o
    lin = f"{block_path}/lin"
    sm = linear_cross_attention(fm, fm, weights, lin)
    so = linear_cross_attention(fo, fo, weights, lin)
    cross = weights.sub(f"{block_path}/gt/cross")
    return (linear_cross_attention(sm, so, cross, ""), linear_cross_attention(so, sm, cross, ""))


# ---------------------------------------------------------------------------
# positional encoding


def ball_query(points: np.ndarray, radius: float, cap: int, tree: Optional[cKDTree] = None) -> np.ndarray:
    """Up to ``cap`` nearest neighbors within ``radius``; short groups are padded with self."""
    tree = cKDTree(points) if tree is None else tree
    k = min(cap, points.shape[0])
    _, idx = tree.query(points, k=k, distance_upper_bound=radius)
    idx = np.asarray(idx).reshape(points.shape[0], k)
    own = np.arange(points.shape[0])[:, None]
    idx = np.where(idx >= points.shape[0], own, idx)
    if k < cap:
        idx = np.concatenate([idx, np.repeat(own, cap - k, axis=1)], axis=1)
    return idx


def positional_encoding(pc, weights: ModelWeights, block_path: str = "fine/pe") -> np.ndarray:
    """Multi-scale set-abstraction encoding, one ``C``-vector per point.

    Per scale: ball-query groups, per-neighbor input ``[(x_j - x_i) / r, x_i]``,
    shared ReLU MLP, max-pool. Scales are concatenated, RMS-normalized and
    projected to the model width. Absolute coordinates enter on purpose, so
    the encoding moves with the cloud.
    """
    pts = np.asarray(getattr(pc, "points", pc), dtype=np.float64)
    cfg = weights.config
    p = weights.sub(block_path)
    tree = cKDTree(pts)
    pooled = []
    for s, (radius, cap) in enumerate(zip(cfg.radii, cfg.caps)):
        idx = ball_query(pts, radius, cap, tree)
        rel = (pts[idx] - pts[:, None, :]) / radius
        h = np.concatenate([rel, np.broadcast_to(pts[:, None, :], rel.shape)], axis=-1)
        for k in range(len(cfg.sa_widths)):
            h = np.maximum(_linear(h, p, f"s{s}/l{k}"), 0.0)
        pooled.append(h.max(axis=1))
    feat = np.concatenate(pooled, axis=1)
    feat = feat / np.sqrt(np.mean(feat ** 2, axis=1, keepdims=True) + LN_EPS)
    return _linear(feat, p, "out")


# ---------------------------------------------------------------------------
# heads


def embed(desc: np.ndarray, weights: ModelWeights, module: str, which: str) -> np.ndarray:
    """Input projection of descriptors with the module's background token prepended."""
    p = weights.sub(module)
    feats = _linear(np.asarray(desc, dtype=np.float64), p, "in_proj")
    return np.vstack([p[f"bg_{which}"][None, :], feats])


def with_background(feats: np.ndarray, weights: ModelWeights, module: str, which: str) -> np.ndarray:
    p = weights.sub(module)
    return np.vstack([p[f"bg_{which}"][None, :], feats])


def project_descriptors(desc: np.ndarray, weights: ModelWeights, module: str) -> np.ndarray:
    return _linear(np.asarray(desc, dtype=np.float64), weights.sub(module), "in_proj")


def matching_head(feats: np.ndarray, weights: ModelWeights, module: str) -> np.ndarray:
    """Output projection scaled by ``1/sqrt(C)``; layer-normed inputs give ~unit rows."""
    p = weights.sub(module)
    return _linear(feats, p, "out_proj") / np.sqrt(weights.config.width)
