"""Gated-attention MIL heads with exact backward passes.

``T1`` is a CLAM-style single-branch gated-attention network: instances are
projected with a ReLU layer, scored by a tanh/sigmoid gate, softmax-weighted
and pooled into one bag embedding ``v`` that feeds a linear classifier.

``T2`` runs the same aggregator independently over each sub-bag of a
partition and average-pools the sub-bag embeddings before its classifier.

Both heads are computed by one segment-vectorised core: a bag is a list of
contiguous segments and the attention softmax is taken within each segment.
T1 is the single-segment case.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, ModelError, PartitionError
from .numerics import ParamTensor

PARAM_NAMES = ("proj_w", "proj_b", "attn_V_w", "attn_V_b", "attn_U_w", "attn_U_b",
               "attn_w", "cls_w", "cls_b")


class GatedAttentionParams:
    """Parameters of one gated-attention head.

    Attributes are :class:`ParamTensor` objects named after ``PARAM_NAMES``.
    Biases are stored as ``1 x k`` row matrices.
    """

    def __init__(self, dim, hidden=64, attention=32, n_classes=2, rng=None, prefix="t1"):
        self.dim, self.hidden, self.attention, self.n_classes = dim, hidden, attention, n_classes
        self.prefix = prefix
        rng = np.random.default_rng(0) if rng is None else rng
        shapes = self.shapes()
        for name in PARAM_NAMES:
            shape = shapes[name]
            if name.endswith("_b"):
                value = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, size=shape)
            setattr(self, name, ParamTensor(f"{prefix}.{name}", value))

    def shapes(self):
        d, h, a, c = self.dim, self.hidden, self.attention, self.n_classes
        return {"proj_w": (d, h), "proj_b": (1, h), "attn_V_w": (h, a), "attn_V_b": (1, a),
                "attn_U_w": (h, a), "attn_U_b": (1, a), "attn_w": (a, 1),
                "cls_w": (h, c), "cls_b": (1, c)}

    def tensors(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def zero_grad(self):
        for p in self.tensors():
            p.zero_grad()

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        for n in PARAM_NAMES:
            setattr(new, n, getattr(self, n).copy())
        return new

    def load_values(self, other):
        for n in PARAM_NAMES:
            getattr(self, n).value[...] = getattr(other, n).value


class SubBagModelParams(GatedAttentionParams):
    def __init__(self, dim, hidden=64, attention=32, n_classes=2, rng=None, prefix="t2"):
        super().__init__(dim, hidden, attention, n_classes, rng=rng, prefix=prefix)


@dataclass
class ForwardTrace:
    params: GatedAttentionParams
    features: np.ndarray      # rows in segment order
    order: np.ndarray         # features = original[order]
    starts: np.ndarray        # segment start offsets
    seg: np.ndarray           # segment id per row
    h_pre: np.ndarray
    h: np.ndarray
    gate_a: np.ndarray        # tanh branch
    gate_b: np.ndarray        # sigmoid branch
    scores: np.ndarray
    beta: np.ndarray          # attention, normalised within each segment
    seg_embed: np.ndarray     # S x h
    v: np.ndarray             # pooled embedding
    logits: np.ndarray
    pooling: str = "feature"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_features(features, params):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ModelError(f"bag features must be N x d with N >= 1, got shape {x.shape}")
    if x.shape[1] != params.dim:
        raise ModelError(f"feature dim {x.shape[1]} does not match model dim {params.dim}")
    return x


def _forward(x, order, starts, params, pooling="feature"):
    xs = x[order]
    n = xs.shape[0]
    n_seg = len(starts)
    seg = np.repeat(np.arange(n_seg), np.diff(np.append(starts, n)))
    h_pre = xs @ params.proj_w.value + params.proj_b.value
    h = np.maximum(h_pre, 0.0)
    ga = np.tanh(h @ params.attn_V_w.value + params.attn_V_b.value)
    gb = _sigmoid(h @ params.attn_U_w.value + params.attn_U_b.value)
    scores = (ga * gb) @ params.attn_w.value[:, 0]
    if n_seg == 1:
        e = np.exp(scores - scores.max())
        beta = e / e.sum()
        seg_embed = (beta @ h)[None, :]
    else:
        m = np.maximum.reduceat(scores, starts)
        e = np.exp(scores - m[seg])
        beta = e / np.add.reduceat(e, starts)[seg]
        seg_embed = np.add.reduceat(beta[:, None] * h, starts, axis=0)
    v = seg_embed.mean(axis=0)
    w, b = params.cls_w.value, params.cls_b.value[0]
    if pooling == "feature":
        logits = v @ w + b
    elif pooling == "logit":
        logits = (seg_embed @ w + b).mean(axis=0)
    else:
        raise ModelError(f"unknown pooling {pooling!r}")
    return ForwardTrace(params, xs, order, starts, seg, h_pre, h, ga, gb, scores, beta,
                        seg_embed, v, logits, pooling)


def _backward(trace, dlogits, dv=None, need_features=False):
    p = trace.params
    g = np.asarray(dlogits, dtype=np.float64)
    if g.shape != (p.n_classes,):
        raise ModelError(f"dlogits has shape {g.shape}, expected ({p.n_classes},)")
    n_seg = len(trace.starts)
    p.cls_w.grad += np.outer(trace.v, g)
    p.cls_b.grad[0] += g
    dv_total = p.cls_w.value @ g
    if dv is not None:
        dv_total = dv_total + dv
    # pooled embedding is the mean of segment embeddings
    d_seg = dv_total / n_seg
    h, beta, seg = trace.h, trace.beta, trace.seg
    if n_seg == 1:
        dbeta = h @ d_seg
        dh = np.outer(beta, d_seg)
        ds = beta * (dbeta - beta @ dbeta)
    else:
        d_rows = np.broadcast_to(d_seg, (h.shape[0], d_seg.size))
        dbeta = np.einsum("ij,ij->i", h, d_rows)
        dh = beta[:, None] * d_rows
        ds = beta * (dbeta - np.add.reduceat(beta * dbeta, trace.starts)[seg])
    ga, gb = trace.gate_a, trace.gate_b
    w = p.attn_w.value[:, 0]
    p.attn_w.grad[:, 0] += (ga * gb).T @ ds
    dz = np.outer(ds, w)
    da_pre = dz * gb * (1.0 - ga * ga)
    db_pre = dz * ga * gb * (1.0 - gb)
    p.attn_V_w.grad += h.T @ da_pre
    p.attn_V_b.grad[0] += da_pre.sum(axis=0)
    p.attn_U_w.grad += h.T @ db_pre
    p.attn_U_b.grad[0] += db_pre.sum(axis=0)
    dh += da_pre @ p.attn_V_w.value.T + db_pre @ p.attn_U_w.value.T
    dh_pre = dh * (trace.h_pre > 0)
    p.proj_w.grad += trace.features.T @ dh_pre
    p.proj_b.grad[0] += dh_pre.sum(axis=0)
    if need_features:
        dx = np.empty_like(trace.features)
        dx[trace.order] = dh_pre @ p.proj_w.value.T
        return dx
    return None


def t1_forward(features, params):
    """Gated-attention forward pass over a whole bag.

    Returns ``(beta, v, logits, trace)``; ``beta`` is in the bag's original
    instance order.
    """
    x = _check_features(features, params)
    n = x.shape[0]
    trace = _forward(x, np.arange(n), np.array([0]), params)
    return trace.beta, trace.v, trace.logits, trace


def t1_backward(trace, dlogits, dv=None, need_features=False):
    """Accumulate parameter gradients of a T1 forward into ``trace.params``.

    ``dv`` is an extra gradient on the bag embedding (the contrastive term).
    Returns the gradient with respect to the input features when requested.
    """
    return _backward(trace, dlogits, dv=dv, need_features=need_features)


def subbag_layout(subbags, n_instances=None):
    """Turn a list of index arrays into ``(order, starts)`` for the core."""
    if len(subbags) == 0:
        raise PartitionError("a partition needs at least one sub-bag")
    sizes = np.array([len(s) for s in subbags])
    if np.any(sizes == 0):
        raise PartitionError("empty sub-bag")
    order = np.concatenate([np.asarray(s, dtype=np.int64) for s in subbags])
    if n_instances is not None:
        if order.size != n_instances or not np.array_equal(np.sort(order), np.arange(n_instances)):
            raise PartitionError("sub-bags must cover every instance exactly once")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return order, starts


def t2_forward(partition, features, params, pooling="feature"):
    """Sub-bag head: aggregate each sub-bag, average-pool, classify.

    ``partition`` is a :class:`~subbagmil.sampling.SubBagPartition` or a plain
    list of instance-index arrays. Returns ``(seg_embeddings, logits, trace)``.
    """
    x = _check_features(features, params)
    subbags = getattr(partition, "subbags", partition)
    order, starts = subbag_layout(subbags, x.shape[0])
    trace = _forward(x, order, starts, params, pooling=pooling)
    return trace.seg_embed, trace.logits, trace


def t2_backward(trace, dlogits, need_features=False):
    return _backward(trace, dlogits, need_features=need_features)


@dataclass
class TwinModel:
    """The two heads plus the header fields recorded in checkpoints."""

    t1: GatedAttentionParams
    t2: SubBagModelParams
    n_subbags: int
    seed: int
    epoch: int = 0

    @classmethod
    def create(cls, dim, n_classes, hidden=64, attention=32, n_subbags=11, seed=0):
        rng = np.random.default_rng([seed, 1])
        t1 = GatedAttentionParams(dim, hidden, attention, n_classes, rng=rng, prefix="t1")
        t2 = SubBagModelParams(dim, hidden, attention, n_classes, rng=rng, prefix="t2")
        return cls(t1, t2, n_subbags, seed)

    def tensors(self):
        return self.t1.tensors() + self.t2.tensors()

    def copy(self):
        return TwinModel(self.t1.copy(), self.t2.copy(), self.n_subbags, self.seed, self.epoch)


_CKPT_MAGIC = b"MILC"
_CKPT_HEADER = struct.Struct("<4sHHIIIIIQII")


def encode_checkpoint(model):
    t1 = model.t1
    tensors = model.tensors()
    out = [_CKPT_HEADER.pack(_CKPT_MAGIC, 1, 0, t1.dim, t1.hidden, t1.attention, t1.n_classes,
                             model.n_subbags, model.seed, model.epoch, len(tensors))]
    for p in tensors:
        name = p.name.encode()
        rows, cols = p.shape
        out.append(struct.pack("<H", len(name)) + name + struct.pack("<IIQ", rows, cols, p.step_count))
        for arr in (p.value, p.m1, p.m2):
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(model, path):
    path = Path(path)
    path.write_bytes(encode_checkpoint(model))
    return path


def load_checkpoint(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(data), path=path)
    magic, version, _, d, h, a, c, s, seed, epoch, count = _CKPT_HEADER.unpack_from(data, 0)
    if magic != _CKPT_MAGIC or version != 1:
        raise FormatError("not a checkpoint file", offset=0, path=path)
    model = TwinModel(GatedAttentionParams(d, h, a, c, prefix="t1"),
                      SubBagModelParams(d, h, a, c, prefix="t2"), s, seed, epoch)
    by_name = {p.name: p for p in model.tensors()}
    if count != len(by_name):
        raise FormatError(f"checkpoint holds {count} tensors, expected {len(by_name)}", path=path)
    off = _CKPT_HEADER.size
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + nlen].decode()
            off += 2 + nlen
            rows, cols, steps = struct.unpack_from("<IIQ", data, off)
            off += 16
            p = by_name[name]
            if p.shape != (rows, cols):
                raise FormatError(f"tensor {name} has shape {(rows, cols)}, expected {p.shape}",
                                  offset=off, path=path)
            size = rows * cols * 8
            arrs = []
            for _k in range(3):
                if off + size > len(data):
                    raise FormatError("truncated tensor payload", offset=off, path=path)
                arrs.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off)
                            .reshape(rows, cols).astype(np.float64))
                off += size
            p.value[...], p.m1[...], p.m2[...] = arrs
            p.step_count = steps
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}", offset=off, path=path) from exc
    if off != len(data):
        raise FormatError("trailing bytes after last tensor", offset=off, path=path)
    return model
