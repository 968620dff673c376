"""Tiny single-head transformer classifier with an explicit backward pass.

Weights use the row-vector convention ``y = x @ W + b`` so a matrix of
shape ``(d, k)`` maps ``d`` input features to ``k`` outputs. A LoRA pair
``(a: r x k, b: d x r)`` attached to ``W`` therefore contributes
``scale * b @ a`` to the effective weight.

Block layout::

    h -> [q,k,v] -> softmax(q k^T / sqrt(d)) v -> w_o -> (adapter) -> +h -> RMSNorm
      -> relu(. w_ff1) w_ff2 -> (adapter) -> + -> RMSNorm

followed by mean pooling over positions and a linear classifier.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, DataError
from .linalg import Rng, make_rng

if TYPE_CHECKING:
    from .adapters import AdapterSet

NORM_EPS = 1e-6
INIT_STD = 0.08

ParameterSet = dict  # name -> np.ndarray
GradientSet = dict


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 1024
    seq_len: int = 16
    embed_dim: int = 32
    ffn_dim: int = 64
    num_blocks: int = 1
    num_classes: int = 20

    def __post_init__(self):
        for field in ("vocab_size", "seq_len", "embed_dim", "ffn_dim", "num_blocks", "num_classes"):
            if getattr(self, field) < 1:
                raise ConfigError(f"ModelConfig.{field} must be >= 1, got {getattr(self, field)}")
        if self.embed_dim < 2:
            raise ConfigError(f"ModelConfig.embed_dim must be >= 2, got {self.embed_dim}")


@dataclass(frozen=True)
class Batch:
    token_ids: np.ndarray  # (n, seq_len) int
    labels: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.labels)


BLOCK_MATRICES = ("w_q", "w_k", "w_v", "w_o", "w_ff1", "w_ff2")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes = {
        "token_embedding": (cfg.vocab_size, d),
        "pos_embedding": (cfg.seq_len, d),
    }
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}."
        for m in ("q", "k", "v", "o"):
            shapes[p + f"w_{m}"] = (d, d)
            shapes[p + f"b_{m}"] = (d,)
        shapes[p + "norm1_gain"] = (d,)
        shapes[p + "w_ff1"] = (d, f)
        shapes[p + "b_ff1"] = (f,)
        shapes[p + "w_ff2"] = (f, d)
        shapes[p + "b_ff2"] = (d,)
        shapes[p + "norm2_gain"] = (d,)
    shapes["w_cls"] = (d, cfg.num_classes)
    shapes["b_cls"] = (cfg.num_classes,)
    return shapes


def is_bias_like(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b_") or leaf.endswith("_gain")


def init_params(cfg: ModelConfig, seed: int, std: float = INIT_STD) -> ParameterSet:
    rng = make_rng(seed, "model-init")
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("_gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) * std
    return params


def config_from_params(params: ParameterSet) -> ModelConfig:
    vocab, d = params["token_embedding"].shape
    n_blocks = sum(1 for k in params if k.startswith("blocks.") and k.endswith(".w_q"))
    return ModelConfig(
        vocab_size=vocab,
        seq_len=params["pos_embedding"].shape[0],
        embed_dim=d,
        ffn_dim=params["blocks.0.w_ff1"].shape[1] if n_blocks else 1,
        num_blocks=n_blocks,
        num_classes=params["w_cls"].shape[1],
    )


def scalar_count(tensors) -> int:
    return int(sum(np.prod(s) if isinstance(s, tuple) else np.size(s) for s in tensors.values()))


# --- forward ---------------------------------------------------------------


def _effective(params, adapters, name):
    w = params[name]
    if adapters is not None and name in adapters.lora_targets:
        t = adapters.tensors
        w = w + adapters.scale * (t[name + ".lora_b"] @ t[name + ".lora_a"])
    return w


def _rmsnorm(x, gain):
    rinv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    xhat = x * rinv
    return xhat * gain, (xhat, rinv)


def _bottleneck_fwd(adapters, prefix, x):
    if adapters is None or prefix + ".down" not in adapters.tensors:
        return x, None
    t = adapters.tensors
    z = x @ t[prefix + ".down"] + t[prefix + ".down_b"]
    a = np.maximum(z, 0.0)
    return x + a @ t[prefix + ".up"] + t[prefix + ".up_b"], (x, z, a)


def forward(params: ParameterSet, adapters: "AdapterSet | None", token_ids):
    """Return ``(logits, cache)`` for a batch of token ids."""
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise DataError(f"token_ids must be 2-D (batch, seq_len), got shape {ids.shape}")
    vocab, d = params["token_embedding"].shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DataError(f"token id out of range [0, {vocab}): min={ids.min()} max={ids.max()}")
    n, seq = ids.shape
    if seq > params["pos_embedding"].shape[0]:
        raise DataError(f"sequence length {seq} exceeds model seq_len {params['pos_embedding'].shape[0]}")
    h = params["token_embedding"][ids] + params["pos_embedding"][:seq]
    inv_sqrt_d = 1.0 / np.sqrt(d)
    blocks = []
    i = 0
    while f"blocks.{i}.w_q" in params:
        p = f"blocks.{i}."
        w = {m: _effective(params, adapters, p + m) for m in BLOCK_MATRICES}
        x = h
        q = x @ w["w_q"] + params[p + "b_q"]
        k = x @ w["w_k"] + params[p + "b_k"]
        v = x @ w["w_v"] + params[p + "b_v"]
        s = (q @ k.transpose(0, 2, 1)) * inv_sqrt_d
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        probs = e / e.sum(axis=-1, keepdims=True)
        att = probs @ v
        o = att @ w["w_o"] + params[p + "b_o"]
        o2, ad1 = _bottleneck_fwd(adapters, p + "adapter_attn", o)
        h1, n1 = _rmsnorm(x + o2, params[p + "norm1_gain"])
        z1 = h1 @ w["w_ff1"] + params[p + "b_ff1"]
        a1 = np.maximum(z1, 0.0)
        f = a1 @ w["w_ff2"] + params[p + "b_ff2"]
        f2, ad2 = _bottleneck_fwd(adapters, p + "adapter_ffn", f)
        h, n2 = _rmsnorm(h1 + f2, params[p + "norm2_gain"])
        blocks.append(dict(w=w, x=x, q=q, k=k, v=v, probs=probs, att=att, ad1=ad1, n1=n1, h1=h1, z1=z1, a1=a1, ad2=ad2, n2=n2))
        i += 1
    pooled = h.mean(axis=1)
    logits = pooled @ params["w_cls"] + params["b_cls"]
    cache = dict(ids=ids, blocks=blocks, pooled=pooled, seq=seq)
    return logits, cache


# --- backward --------------------------------------------------------------


def _rmsnorm_bwd(dy, gain, saved):
    xhat, rinv = saved
    dxhat = dy * gain
    dgain = np.einsum("bld,bld->d", dy, xhat)
    dx = rinv * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgain


def _flat(x):
    return x.reshape(-1, x.shape[-1])


class _Router:
    """Collects gradients for the trainable names only."""

    def __init__(self, adapters, trainable):
        self.adapters = adapters
        self.trainable = trainable
        self.grads = {}
        lora = adapters.lora_targets if adapters is not None else ()
        self.lora = set(lora)

    def wants(self, name):
        return name in self.trainable

    def wants_matrix(self, name):
        return name in self.trainable or name in self.lora

    def matrix(self, name, x, dy):
        if not self.wants_matrix(name):
            return
        g = _flat(x).T @ _flat(dy)
        if name in self.trainable:
            self.grads[name] = g
        if name in self.lora:
            t = self.adapters.tensors
            s = self.adapters.scale
            an, bn = name + ".lora_a", name + ".lora_b"
            if an in self.trainable:
                self.grads[an] = s * (t[bn].T @ g)
            if bn in self.trainable:
                self.grads[bn] = s * (g @ t[an].T)

    def vector(self, name, dy):
        if name in self.trainable:
            self.grads[name] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)

    def bottleneck(self, prefix, dy, saved):
        if saved is None:
            return dy
        x, z, a = saved
        t = self.adapters.tensors
        self.matrix(prefix + ".up", a, dy)
        self.vector(prefix + ".up_b", dy)
        dz = (dy @ t[prefix + ".up"].T) * (z > 0)
        self.matrix(prefix + ".down", x, dz)
        self.vector(prefix + ".down_b", dz)
        return dy + dz @ t[prefix + ".down"].T


def backward(params, adapters, cache, dlogits, trainable) -> GradientSet:
    trainable = set(trainable)
    r = _Router(adapters, trainable)
    blocks = cache["blocks"]
    seq = cache["seq"]
    r.matrix("w_cls", cache["pooled"][:, None, :], dlogits[:, None, :])
    r.vector("b_cls", dlogits)
    needs_embed = "token_embedding" in trainable or "pos_embedding" in trainable
    # gradients stop at the lowest block that owns a trainable tensor
    in_blocks = [int(n.split(".")[1]) for n in trainable if n.startswith("blocks.")]
    lowest = -1 if needs_embed else min(in_blocks, default=len(blocks))
    if lowest >= len(blocks):
        return r.grads
    dpooled = dlogits @ params["w_cls"].T
    dh = np.repeat(dpooled[:, None, :] / seq, seq, axis=1)
    inv_sqrt_d = 1.0 / np.sqrt(params["token_embedding"].shape[1])
    for i in range(len(blocks) - 1, max(lowest, 0) - 1, -1):
        p = f"blocks.{i}."
        c = blocks[i]
        w = c["w"]
        dr2, dg2 = _rmsnorm_bwd(dh, params[p + "norm2_gain"], c["n2"])
        if r.wants(p + "norm2_gain"):
            r.grads[p + "norm2_gain"] = dg2
        df = r.bottleneck(p + "adapter_ffn", dr2, c["ad2"])
        r.matrix(p + "w_ff2", c["a1"], df)
        r.vector(p + "b_ff2", df)
        dz1 = (df @ w["w_ff2"].T) * (c["z1"] > 0)
        r.matrix(p + "w_ff1", c["h1"], dz1)
        r.vector(p + "b_ff1", dz1)
        dh1 = dr2 + dz1 @ w["w_ff1"].T
        dr1, dg1 = _rmsnorm_bwd(dh1, params[p + "norm1_gain"], c["n1"])
        if r.wants(p + "norm1_gain"):
            r.grads[p + "norm1_gain"] = dg1
        do = r.bottleneck(p + "adapter_attn", dr1, c["ad1"])
        r.matrix(p + "w_o", c["att"], do)
        r.vector(p + "b_o", do)
        datt = do @ w["w_o"].T
        probs = c["probs"]
        dprobs = datt @ c["v"].transpose(0, 2, 1)
        dv = probs.transpose(0, 2, 1) @ datt
        ds = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) * inv_sqrt_d
        dq = ds @ c["k"]
        dk = ds.transpose(0, 2, 1) @ c["q"]
        x = c["x"]
        for m, dy in (("q", dq), ("k", dk), ("v", dv)):
            r.matrix(p + f"w_{m}", x, dy)
            r.vector(p + f"b_{m}", dy)
        if i > lowest:
            dh = dr1 + dq @ w["w_q"].T + dk @ w["w_k"].T + dv @ w["w_v"].T
    if "token_embedding" in trainable:
        g = np.zeros_like(params["token_embedding"])
        np.add.at(g, cache["ids"].ravel(), _flat(dh))
        r.grads["token_embedding"] = g
    if "pos_embedding" in trainable:
        g = np.zeros_like(params["pos_embedding"])
        g[:seq] = dh.sum(axis=0)
        r.grads["pos_embedding"] = g
    return r.grads


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def loss_and_grads(params, adapters, batch: Batch, trainable=None):
    """Loss and gradients for the trainable tensors of ``adapters.mode``.

    ``trainable`` defaults to ``adapters.trainable_names``; with no adapter
    set every parameter is trainable.
    """
    if len(batch) == 0:
        raise DataError("loss_and_grads called with an empty batch")
    labels = np.asarray(batch.labels)
    num_classes = params["w_cls"].shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"label out of range [0, {num_classes})")
    if trainable is None:
        trainable = adapters.trainable_names if adapters is not None else list(params)
    logits, cache = forward(params, adapters, batch.token_ids)
    loss, dlogits = cross_entropy(logits, labels)
    grads = backward(params, adapters, cache, dlogits, trainable)
    return loss, grads


# --- optimisation ----------------------------------------------------------


def split_update(params, adapters, updates):
    """Return new ``(params, adapters)`` with ``updates`` routed by tensor name."""
    p = dict(params)
    t = dict(adapters.tensors) if adapters is not None else {}
    for name, value in updates.items():
        if name in t:
            target = t
        elif name in p:
            target = p
        else:
            raise ConfigError(f"update for unknown tensor {name!r}")
        if target[name].shape != np.shape(value):
            raise ConfigError(f"shape mismatch for {name!r}: {target[name].shape} vs {np.shape(value)}")
        target[name] = value
    return p, (adapters.with_tensors(t) if adapters is not None else None)


def trainable_view(params, adapters) -> dict:
    names = adapters.trainable_names if adapters is not None else list(params)
    t = adapters.tensors if adapters is not None else {}
    return {n: (t[n] if n in t else params[n]) for n in names}


def sgd_step(params, adapters, grads, lr: float):
    """One plain SGD step on the trainable tensors; frozen tensors are shared, not copied."""
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    current = trainable_view(params, adapters)
    updates = {}
    for name, g in grads.items():
        if name not in current:
            raise ConfigError(f"gradient for non-trainable tensor {name!r}")
        if current[name].shape != g.shape:
            raise ConfigError(f"gradient shape mismatch for {name!r}: {current[name].shape} vs {g.shape}")
        updates[name] = current[name] - lr * g
    return split_update(params, adapters, updates)


class AdamW:
    """Decoupled weight-decay Adam. State lives only as long as this object."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, adapters, grads):
        self.t += 1
        current = trainable_view(params, adapters)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        updates = {}
        for name, g in grads.items():
            m = self.m.get(name)
            m = (1 - self.b1) * g if m is None else self.b1 * m + (1 - self.b1) * g
            v = self.v.get(name)
            v = (1 - self.b2) * g * g if v is None else self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            w = current[name]
            updates[name] = w - self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * w)
        return split_update(params, adapters, updates)


def train_epochs(params, adapters, token_ids, labels, indices, *, epochs, batch_size, lr, rng: Rng, optimizer="sgd"):
    """Mini-batch training over ``indices`` for ``epochs`` passes.

    Each epoch reshuffles with ``rng``; the trailing partial batch is kept.
    Returns ``(params, adapters, mean_loss_of_last_epoch)``.
    """
    from .errors import NumericError

    indices = np.asarray(indices)
    opt = AdamW(lr) if optimizer == "adamw" else None
    last = float("nan")
    for epoch in range(epochs):
        order = indices[rng.permutation(len(indices))]
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            # overflow shows up as a non-finite loss, reported below with context
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(params, adapters, Batch(token_ids[idx], labels[idx]))
            if not np.isfinite(loss):
                raise NumericError(f"loss diverged to {loss} at epoch {epoch}, batch offset {start}")
            total += loss * len(idx)
            if opt is None:
                params, adapters = sgd_step(params, adapters, grads, lr)
            else:
                params, adapters = opt.step(params, adapters, grads)
        last = total / max(len(order), 1)
    return params, adapters, last


# --- evaluation ------------------------------------------------------------


def classification_metrics(labels, preds, num_classes: int) -> dict:
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    f1s = []
    for c in range(num_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        if tp + fp + fn == 0:
            continue
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return {
        "accuracy": float(np.mean(preds == labels)) if len(labels) else 0.0,
        "macro_f1": float(np.mean(f1s)) if f1s else 0.0,
    }


def evaluate(params, adapters, dataset, batch_size: int = 1000) -> dict:
    n = len(dataset.labels)
    if n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    preds = np.empty(n, dtype=np.int64)
    loss = 0.0
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        logits, _ = forward(params, adapters, dataset.tokens[sl])
        l, _ = cross_entropy(logits, dataset.labels[sl])
        loss += l * len(dataset.labels[sl])
        preds[sl] = np.argmax(logits, axis=1)
    out = classification_metrics(dataset.labels, preds, params["w_cls"].shape[1])
    out["loss"] = loss / n
    return out


# --- verification harness --------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(params, adapters, batch: Batch, eps: float = 1e-5) -> float:
    """Worst relative error between analytic gradients and central differences."""
    _, grads = loss_and_grads(params, adapters, batch)
    params = {k: v.copy() for k, v in params.items()}
    if adapters is not None:
        adapters = adapters.with_tensors({k: v.copy() for k, v in adapters.tensors.items()})
    worst = 0.0
    for name, g in grads.items():
        store = adapters.tensors if adapters is not None and name in adapters.tensors else params
        w = store[name].reshape(-1)
        gf = g.reshape(-1)
        for j in range(w.size):
            old = w[j]
            w[j] = old + eps
            lp = cross_entropy(forward(params, adapters, batch.token_ids)[0], batch.labels)[0]
            w[j] = old - eps
            lm = cross_entropy(forward(params, adapters, batch.token_ids)[0], batch.labels)[0]
            w[j] = old
            worst = max(worst, relative_error(gf[j], (lp - lm) / (2 * eps)))
    return worst


def gradient_check(config: ModelConfig, seed: int, batch_size: int = 4, eps: float = 1e-5, modes=None) -> float:
    """Finite-difference check of every trainable scalar across all adapter modes.

    Weights are drawn larger than the training init and adapter tensors are
    perturbed off their zero init so every gradient path carries signal.
    """
    from . import adapters as ad

    if modes is None:
        r = min(2, config.embed_dim)
        modes = [ad.FullFT(), ad.BiasOnly(), ad.Bottleneck(3), ad.LoRA(r), ad.LoRA(1), ad.FeDeRA(r), ad.FeDeRA(1, 0.5)]
    rng = make_rng(seed, "gradient-check")
    base = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("_gain"):
            base[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif len(shape) == 1:
            base[name] = 0.1 * rng.standard_normal(shape)
        else:
            base[name] = 0.5 * rng.standard_normal(shape)
    batch = Batch(
        rng.integers(0, config.vocab_size, size=(batch_size, config.seq_len)),
        rng.integers(0, config.num_classes, size=batch_size),
    )
    worst = 0.0
    for mode in modes:
        params = {k: v.copy() for k, v in base.items()}
        adapters = ad.attach(params, mode, rng)
        if adapters.tensors:
            adapters = adapters.with_tensors(
                {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in adapters.tensors.items()}
            )
        worst = max(worst, check_gradients(params, adapters, batch, eps))
    return worst
