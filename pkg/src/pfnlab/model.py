"""Encoder-only PFN transformer for in-context tabular classification.

A context of labeled rows and a set of unlabeled query rows are encoded as
one token per row (feature projection + label embedding, no positional
encoding) and passed through pre-norm transformer blocks.  Every token
attends only to the labeled rows, so queries never see each other and the
output for one query depends on the context and that query alone.

Two execution paths share the same kernels:

* ``forward`` runs a single context, computing labeled tokens first and
  then the queries against the cached per-layer keys/values;
* ``loss_and_grads`` runs a padded batch of tasks and backpropagates by
  hand through every layer (used by meta-training).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .errors import CapacityError, ClassError, ContractError, NumericError

# Context-standardized features are clipped to this magnitude.
FEATURE_CLIP = 100.0
# Queries are evaluated in blocks of this many rows (see ``query_logits``).
QUERY_BLOCK = 32


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_features: int = 20
    max_classes: int = 4
    max_context: int = 1024

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ContractError("d_model must be a positive multiple of n_heads")
        if self.n_layers < 1 or self.d_ff < 1:
            raise ContractError("n_layers and d_ff must be positive")
        if self.max_features < 1:
            raise ContractError("max_features must be >= 1")
        if not 2 <= self.max_classes <= 10:
            raise ContractError("max_classes must lie in [2, 10]")
        if self.max_context < 2:
            raise ContractError("max_context must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of all weights, in serialization order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {
        "enc.w": (cfg.max_features, d),
        "enc.b": (d,),
        "enc.label": (cfg.max_classes, d),
        "enc.masked": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"block{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "qkv.w": (d, 3 * d), p + "qkv.b": (3 * d,),
            p + "out.w": (d, d), p + "out.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff1.w": (d, f), p + "ff1.b": (f,),
            p + "ff2.w": (f, d), p + "ff2.b": (d,),
        })
    shapes.update({
        "head.ln.g": (d,), "head.ln.b": (d,),
        "head.w1": (d, f), "head.b1": (f,),
        "head.w2": (f, cfg.max_classes), "head.b2": (cfg.max_classes,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Random initialization; the final head layer starts at zero (uniform logits)."""
    rng = np.random.Generator(np.random.Philox(seed))
    resid = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("head.w2", "head.b2"):
            arr = np.zeros(shape)
        elif name in ("enc.label", "enc.masked"):
            arr = rng.standard_normal(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("w", "w1", "w2"):
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
            if name.endswith(("out.w", "ff2.w")):
                arr *= resid
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


@dataclass
class Checkpoint:
    """Frozen PFN weights plus the fingerprint of the run that produced them."""

    config: ModelConfig
    params: dict
    prior_hash: str = ""
    seed: int = 0
    steps: int = 0

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.params) != list(shapes):
            missing = set(shapes) ^ set(self.params)
            if missing:
                raise ContractError(f"checkpoint tensors do not match config: {sorted(missing)}")
            self.params = {k: self.params[k] for k in shapes}
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ContractError(f"tensor {name} has shape {self.params[name].shape}, expected {shape}")

    def frozen(self) -> "Checkpoint":
        params = {}
        for k, v in self.params.items():
            a = np.array(v, dtype=np.float32)
            a.setflags(write=False)
            params[k] = a
        return Checkpoint(self.config, params, self.prior_hash, self.seed, self.steps)


@dataclass
class ContextBatch:
    X_train: np.ndarray
    y_train: np.ndarray
    X_query: np.ndarray

    def __post_init__(self):
        self.X_train = np.atleast_2d(np.asarray(self.X_train, dtype=np.float64))
        self.y_train = np.asarray(self.y_train, dtype=np.int64).reshape(-1)
        self.X_query = np.asarray(self.X_query, dtype=np.float64)
        if self.X_query.ndim == 1:
            self.X_query = self.X_query.reshape(-1, self.X_train.shape[1]) if self.X_query.size else np.zeros((0, self.X_train.shape[1]))

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_query(self) -> int:
        return self.X_query.shape[0]

    def validate(self, cfg: ModelConfig) -> None:
        d = self.X_train.shape[1]
        if self.n_train < 1:
            raise ContractError("context needs at least one labeled row")
        if self.X_train.shape[0] != self.n_train:
            raise ContractError("X_train and y_train lengths differ")
        if self.X_query.shape[1] != d:
            raise ContractError("query feature count differs from context")
        if d > cfg.max_features:
            raise CapacityError(f"{d} features exceed model capacity {cfg.max_features}")
        if self.n_train + self.n_query > cfg.max_context:
            raise CapacityError(
                f"context of {self.n_train}+{self.n_query} rows exceeds max_context {cfg.max_context}"
            )
        if self.y_train.min() < 0 or self.y_train.max() >= cfg.max_classes:
            raise ClassError(f"labels must lie in [0, {cfg.max_classes})")
        if not (np.isfinite(self.X_train).all() and np.isfinite(self.X_query).all()):
            raise NumericError("non-finite feature value")


def _feature_stats(X_train):
    X_train = np.asarray(X_train, dtype=np.float64)
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0)
    return mu, np.where(sd > 1e-8 * (1.0 + np.abs(mu)), sd, 1.0)


def _apply_stats(X, mu, sd, max_features, dtype):
    z = np.clip((np.asarray(X, dtype=np.float64) - mu) / sd, -FEATURE_CLIP, FEATURE_CLIP)
    padded = np.zeros((z.shape[0], max_features), dtype=dtype)
    padded[:, : z.shape[1]] = z
    return padded


def standardize_features(X_train, X_query, max_features: int, dtype=np.float32):
    """Standardize with context statistics, clip, and zero-pad to ``max_features``.

    Constant columns keep unit scale, so all-zero padding columns stay zero.
    """
    mu, sd = _feature_stats(X_train)
    return (_apply_stats(X_train, mu, sd, max_features, dtype),
            _apply_stats(X_query, mu, sd, max_features, dtype))


def build_attention_mask(n_train: int, n_query: int) -> np.ndarray:
    """Boolean (n_train+n_query)^2 mask: every row may attend to labeled rows only."""
    if n_train < 1:
        raise ContractError("attention mask needs at least one labeled row")
    n = n_train + n_query
    mask = np.zeros((n, n), dtype=bool)
    mask[:, :n_train] = True
    return mask


def encode_tokens(batch: ContextBatch, ckpt: Checkpoint) -> np.ndarray:
    """Token matrix, labeled rows first then query rows."""
    cfg = ckpt.config
    batch.validate(cfg)
    p = ckpt.params
    Xt, Xq = standardize_features(batch.X_train, batch.X_query, cfg.max_features, p["enc.w"].dtype)
    tr = nn.matmul(Xt, p["enc.w"]) + p["enc.b"] + p["enc.label"][batch.y_train]
    if batch.n_query:
        q = nn.matmul(Xq, p["enc.w"]) + p["enc.b"] + p["enc.masked"]
    else:
        q = np.zeros((0, cfg.d_model), dtype=tr.dtype)
    return np.concatenate([tr, q], axis=0)


def _split_heads(x, n_heads):
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, n_heads, d // n_heads), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def _ffn(p, pre, h):
    a = nn.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
    z = nn.matmul(a, p[pre + "ff1.w"]) + p[pre + "ff1.b"]
    return h + nn.matmul(nn.gelu(z), p[pre + "ff2.w"]) + p[pre + "ff2.b"]


def _head(p, h):
    a = nn.layer_norm(h, p["head.ln.g"], p["head.ln.b"])
    z = nn.matmul(a, p["head.w1"]) + p["head.b1"]
    return nn.matmul(nn.gelu(z), p["head.w2"]) + p["head.b2"]


@dataclass
class EncodedContext:
    """Per-layer keys/values of a labeled context plus its feature statistics."""

    keys: list
    values: list
    mu: np.ndarray
    sd: np.ndarray
    n_train: int


def encode_context(batch: ContextBatch, ckpt: Checkpoint) -> EncodedContext:
    """Run the labeled rows through every layer and keep their keys/values."""
    cfg = ckpt.config
    batch.validate(cfg)
    p = ckpt.params
    dtype = p["enc.w"].dtype
    mu, sd = _feature_stats(batch.X_train)
    Xt = _apply_stats(batch.X_train, mu, sd, cfg.max_features, dtype)
    h = nn.matmul(Xt, p["enc.w"]) + p["enc.b"] + p["enc.label"][batch.y_train]
    n_tr = batch.n_train
    key_mask = np.ones((1, n_tr), dtype=bool)
    H, d = cfg.n_heads, cfg.d_model
    keys, values = [], []
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        a = nn.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = nn.matmul(a, p[pre + "qkv.w"]) + p[pre + "qkv.b"]
        k = _split_heads(qkv[:, d:2 * d], H)
        v = _split_heads(qkv[:, 2 * d:], H)
        att = nn.masked_attention(_split_heads(qkv[:, :d], H), k, v, key_mask)
        h = _ffn(p, pre, h + nn.matmul(_merge_heads(att), p[pre + "out.w"]) + p[pre + "out.b"])
        keys.append(k)
        values.append(v)
    return EncodedContext(keys, values, mu, sd, n_tr)


def query_logits(ctx: EncodedContext, X_query, ckpt: Checkpoint) -> np.ndarray:
    """Logits of query rows against an encoded context.

    Queries run in zero-padded blocks of exactly ``QUERY_BLOCK`` rows.
    Every BLAS call then has the same shape whatever the query count, and a
    row's result does not depend on which other rows share its block, so a
    query's logits are bit-identical however the query set is composed.
    """
    cfg = ckpt.config
    p = ckpt.params
    dtype = p["enc.w"].dtype
    X_query = np.asarray(X_query, dtype=np.float64)
    n = X_query.shape[0]
    out = np.zeros((n, cfg.max_classes), dtype=dtype)
    if n == 0:
        return out
    Xq = _apply_stats(X_query, ctx.mu, ctx.sd, cfg.max_features, dtype)
    key_mask = np.ones((1, ctx.n_train), dtype=bool)
    H, d = cfg.n_heads, cfg.d_model
    for start in range(0, n, QUERY_BLOCK):
        rows = Xq[start:start + QUERY_BLOCK]
        block = np.zeros((QUERY_BLOCK, cfg.max_features), dtype=dtype)
        block[: len(rows)] = rows
        h = nn.matmul(block, p["enc.w"]) + p["enc.b"] + p["enc.masked"]
        for i in range(cfg.n_layers):
            pre = f"block{i}."
            a = nn.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = nn.matmul(a, p[pre + "qkv.w"][:, :d]) + p[pre + "qkv.b"][:d]
            att = nn.masked_attention(_split_heads(q, H), ctx.keys[i], ctx.values[i], key_mask)
            h = h + nn.matmul(_merge_heads(att), p[pre + "out.w"]) + p[pre + "out.b"]
            h = _ffn(p, pre, h)
        out[start:start + len(rows)] = _head(p, h)[: len(rows)]
    return out


def forward(batch: ContextBatch, ckpt: Checkpoint) -> np.ndarray:
    """Query logits, shape ``(n_query, max_classes)``."""
    return query_logits(encode_context(batch, ckpt), batch.X_query, ckpt)


def _active_classes(batch: ContextBatch, n_classes, cfg) -> int:
    c = int(batch.y_train.max()) + 1 if n_classes is None else int(n_classes)
    if c <= batch.y_train.max() or c > cfg.max_classes:
        raise ClassError(f"active class count {c} invalid for labels/capacity {cfg.max_classes}")
    return c


def predict_proba(batch: ContextBatch, ckpt: Checkpoint, n_classes: int | None = None) -> np.ndarray:
    """Class probabilities over the first ``n_classes`` outputs.

    ``n_classes`` defaults to ``max(y_train) + 1`` (labels are contiguous).
    """
    c = _active_classes(batch, n_classes, ckpt.config)
    logits = forward(batch, ckpt)
    return nn.softmax_rows(logits[:, :c].astype(np.float64))


def predict(batch: ContextBatch, ckpt: Checkpoint, n_classes: int | None = None) -> np.ndarray:
    """Most probable class; exact ties go to the lowest index."""
    return np.argmax(predict_proba(batch, ckpt, n_classes), axis=1)


def predict_proba_chunked(X_train, y_train, X_query, ckpt: Checkpoint, n_classes: int | None = None):
    """``predict_proba`` without the context-capacity limit on the query count.

    The context is encoded once and queries stream through it block by
    block; the result equals ``predict_proba`` on any sub-batch.
    """
    X_query = np.asarray(X_query, dtype=np.float64)
    if len(y_train) >= ckpt.config.max_context:
        raise CapacityError(f"{len(y_train)} labeled rows leave no room for queries")
    head = ContextBatch(X_train, y_train, X_query[:1])
    c = _active_classes(head, n_classes, ckpt.config)
    ctx = encode_context(head, ckpt)
    if X_query.ndim != 2 or X_query.shape[1] != head.X_train.shape[1]:
        raise ContractError("query feature count differs from context")
    if not np.isfinite(X_query).all():
        raise NumericError("non-finite feature value")
    logits = query_logits(ctx, X_query, ckpt)
    return nn.softmax_rows(logits[:, :c].astype(np.float64))


# ---------------------------------------------------------------------------
# batched training path


@dataclass
class PaddedBatch:
    """Tasks padded to common train/query lengths.

    Labeled rows occupy positions ``[0, T)`` and queries ``[T, T+Q)`` of the
    token axis; ``train_valid``/``query_valid`` flag real (non-pad) rows.
    """

    X_train: np.ndarray  # (B, T, F) standardized
    y_train: np.ndarray  # (B, T)
    train_valid: np.ndarray  # (B, T) bool
    X_query: np.ndarray  # (B, Q, F)
    y_query: np.ndarray  # (B, Q)
    query_valid: np.ndarray  # (B, Q) bool
    n_classes: np.ndarray  # (B,)
    meta: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.X_train.shape[0]


def pad_batch(contexts, cfg: ModelConfig, dtype=np.float32) -> PaddedBatch:
    """Build a ``PaddedBatch`` from ``(X_train, y_train, X_query, y_query, n_classes)`` tuples."""
    B = len(contexts)
    T = max(len(c[1]) for c in contexts)
    Q = max(len(c[3]) for c in contexts)
    F = cfg.max_features
    Xt = np.zeros((B, T, F), dtype=dtype)
    Xq = np.zeros((B, Q, F), dtype=dtype)
    yt = np.zeros((B, T), dtype=np.int64)
    yq = np.zeros((B, Q), dtype=np.int64)
    tv = np.zeros((B, T), dtype=bool)
    qv = np.zeros((B, Q), dtype=bool)
    nc = np.zeros(B, dtype=np.int64)
    for b, (X_tr, y_tr, X_q, y_q, c) in enumerate(contexts):
        if X_tr.shape[1] > F:
            raise CapacityError(f"{X_tr.shape[1]} features exceed model capacity {F}")
        if c > cfg.max_classes or np.max(y_tr) >= c or (len(y_q) and np.max(y_q) >= c):
            raise ClassError("task labels exceed its class count or model capacity")
        if len(y_tr) < 1 or len(y_q) < 1:
            raise ContractError("each task needs at least one labeled and one query row")
        s_tr, s_q = standardize_features(X_tr, X_q, F, dtype)
        n, m = len(y_tr), len(y_q)
        Xt[b, :n], yt[b, :n], tv[b, :n] = s_tr, y_tr, True
        Xq[b, :m], yq[b, :m], qv[b, :m] = s_q, y_q, True
        nc[b] = c
    return PaddedBatch(Xt, yt, tv, Xq, yq, qv, nc)


def _batch_forward(params, cfg: ModelConfig, pb: PaddedBatch):
    p = params
    H, d = cfg.n_heads, cfg.d_model
    T = pb.X_train.shape[1]
    tok_tr = nn.matmul(pb.X_train, p["enc.w"]) + p["enc.b"] + p["enc.label"][pb.y_train]
    tok_q = nn.matmul(pb.X_query, p["enc.w"]) + p["enc.b"] + p["enc.masked"]
    h = np.concatenate([tok_tr, tok_q], axis=1)
    # (B, 1, 1, T): broadcast over heads and rows
    key_mask = pb.train_valid[:, None, None, :]
    caches = []
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        a1, ln1 = nn.layer_norm_forward(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = nn.matmul(a1, p[pre + "qkv.w"]) + p[pre + "qkv.b"]
        q = _split_heads(qkv[..., :d], H)
        k = _split_heads(qkv[..., d:2 * d][:, :T], H)
        v = _split_heads(qkv[..., 2 * d:][:, :T], H)
        att, attw = nn.masked_attention_forward(q, k, v, key_mask)
        merged = _merge_heads(att)
        h_mid = h + nn.matmul(merged, p[pre + "out.w"]) + p[pre + "out.b"]
        a2, ln2 = nn.layer_norm_forward(h_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
        z = nn.matmul(a2, p[pre + "ff1.w"]) + p[pre + "ff1.b"]
        g, gt = nn.gelu_forward(z)
        h_out = h_mid + nn.matmul(g, p[pre + "ff2.w"]) + p[pre + "ff2.b"]
        caches.append((h, a1, ln1, q, k, v, attw, merged, h_mid, a2, ln2, z, g, gt))
        h = h_out
    hq = h[:, T:]
    af, lnf = nn.layer_norm_forward(hq, p["head.ln.g"], p["head.ln.b"])
    z1 = nn.matmul(af, p["head.w1"]) + p["head.b1"]
    g1, g1t = nn.gelu_forward(z1)
    logits = nn.matmul(g1, p["head.w2"]) + p["head.b2"]
    return logits, (caches, hq, af, lnf, z1, g1, g1t)


def _loss_terms(pb: PaddedBatch, cfg: ModelConfig, dtype):
    """Flattened targets, per-row weights, and inactive-class bias."""
    n_q = pb.query_valid.sum(axis=1)
    w = pb.query_valid / (n_q[:, None] * pb.size)
    cls = np.arange(cfg.max_classes)
    bias = np.where(cls[None, :] < pb.n_classes[:, None], 0.0, nn.MASK_BIAS).astype(dtype)
    return pb.y_query.reshape(-1), w.reshape(-1), bias[:, None, :]


def batch_loss(params, cfg: ModelConfig, pb: PaddedBatch) -> float:
    """Per-task mean cross-entropy on query rows, averaged over tasks."""
    logits, _ = _batch_forward(params, cfg, pb)
    targets, w, bias = _loss_terms(pb, cfg, logits.dtype)
    return nn.cross_entropy((logits + bias).reshape(-1, cfg.max_classes), targets, w)


def batch_logits(params, cfg: ModelConfig, pb: PaddedBatch) -> np.ndarray:
    return _batch_forward(params, cfg, pb)[0]


def loss_and_grads(params, cfg: ModelConfig, pb: PaddedBatch):
    """Loss of ``batch_loss`` and its gradient for every parameter."""
    p = params
    H, d = cfg.n_heads, cfg.d_model
    T = pb.X_train.shape[1]
    B, Q = pb.y_query.shape
    logits, (caches, hq, af, lnf, z1, g1, g1t) = _batch_forward(params, cfg, pb)
    targets, w, bias = _loss_terms(pb, cfg, logits.dtype)
    loss, probs = nn.cross_entropy_forward((logits + bias).reshape(-1, cfg.max_classes), targets, w)
    grads = {}

    def acc_linear(name_w, name_b, x, dy):
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        grads[name_w] = nn.matmul(x2.T, dy2)
        grads[name_b] = dy2.sum(axis=0)

    d_logits = nn.cross_entropy_backward(probs, targets, w).reshape(B, Q, cfg.max_classes)
    acc_linear("head.w2", "head.b2", g1, d_logits)
    d_z1 = nn.gelu_backward(nn.matmul(d_logits, p["head.w2"].T), z1, g1t)
    acc_linear("head.w1", "head.b1", af, d_z1)
    d_af = nn.matmul(d_z1, p["head.w1"].T)
    d_hq, grads["head.ln.g"], grads["head.ln.b"] = nn.layer_norm_backward(d_af, hq, p["head.ln.g"], cache=lnf)
    dh = np.zeros((B, T + Q, d), dtype=logits.dtype)
    dh[:, T:] = d_hq

    for i in reversed(range(cfg.n_layers)):
        pre = f"block{i}."
        h, a1, ln1, q, k, v, attw, merged, h_mid, a2, ln2, z, g, gt = caches[i]
        acc_linear(pre + "ff2.w", pre + "ff2.b", g, dh)
        d_z = nn.gelu_backward(nn.matmul(dh, p[pre + "ff2.w"].T), z, gt)
        acc_linear(pre + "ff1.w", pre + "ff1.b", a2, d_z)
        d_a2 = nn.matmul(d_z, p[pre + "ff1.w"].T)
        d_mid, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = nn.layer_norm_backward(d_a2, h_mid, p[pre + "ln2.g"], cache=ln2)
        d_mid = d_mid + dh
        acc_linear(pre + "out.w", pre + "out.b", merged, d_mid)
        d_att = _split_heads(nn.matmul(d_mid, p[pre + "out.w"].T), H)
        d_q, d_k, d_v = nn.masked_attention_backward(d_att, q, k, v, attw)
        d_qkv = np.zeros((B, T + Q, 3 * d), dtype=dh.dtype)
        d_qkv[..., :d] = _merge_heads(d_q)
        d_qkv[:, :T, d:2 * d] = _merge_heads(d_k)
        d_qkv[:, :T, 2 * d:] = _merge_heads(d_v)
        acc_linear(pre + "qkv.w", pre + "qkv.b", a1, d_qkv)
        d_a1 = nn.matmul(d_qkv, p[pre + "qkv.w"].T)
        d_h, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = nn.layer_norm_backward(d_a1, h, p[pre + "ln1.g"], cache=ln1)
        dh = d_h + d_mid

    d_tr, d_qt = dh[:, :T], dh[:, T:]
    X_all = np.concatenate([pb.X_train, pb.X_query], axis=1)
    acc_linear("enc.w", "enc.b", X_all, dh)
    d_label = np.zeros_like(p["enc.label"])
    np.add.at(d_label, pb.y_train.reshape(-1), d_tr.reshape(-1, d))
    grads["enc.label"] = d_label
    grads["enc.masked"] = d_qt.reshape(-1, d).sum(axis=0)
    grads = {name: grads[name].astype(p[name].dtype, copy=False) for name in p}
    return loss, grads
