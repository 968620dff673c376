"""Fine-tuning modes: full, bias-only, bottleneck adapters, LoRA and FeDeRA.

FeDeRA differs from LoRA only in how the low-rank pair is initialized: the
pair takes the top-``r`` singular triplets of the pretrained weight with
``sqrt(sigma)`` split evenly between the two factors, and the base weight
keeps the scaled residual so the layer output is unchanged at step 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UnsupportedOperation
from .linalg import Rng, svd
from .model import ModelConfig, ParameterSet, is_bias_like, parameter_shapes

DEFAULT_TARGETS = ("w_q", "w_v")
HEAD = ("w_cls", "b_cls")


@dataclass(frozen=True)
class FullFT:
    name = "fedft"


@dataclass(frozen=True)
class BiasOnly:
    name = "fedbf"


@dataclass(frozen=True)
class Bottleneck:
    dim: int = 8
    name = "fedap"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"bottleneck dim must be >= 1, got {self.dim}")


@dataclass(frozen=True)
class LoRA:
    r: int = 32
    beta: float | None = None
    name = "fedlr"

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.r}")
        if self.beta is None:
            object.__setattr__(self, "beta", float(self.r))
        if self.beta <= 0:
            raise ConfigError(f"LoRA beta must be > 0, got {self.beta}")

    @property
    def scale(self) -> float:
        return self.beta / self.r


@dataclass(frozen=True)
class FeDeRA(LoRA):
    name = "federa"


AdapterMode = FullFT | BiasOnly | Bottleneck | LoRA | FeDeRA
MODE_NAMES = ("fedft", "fedbf", "fedap", "fedlr", "federa")


def parse_mode(name: str, rank: int = 32, beta: float | None = None, bottleneck_dim: int = 8) -> AdapterMode:
    key = name.lower()
    if key in ("fedft", "fullft", "full"):
        return FullFT()
    if key in ("fedbf", "biasonly", "bitfit"):
        return BiasOnly()
    if key in ("fedap", "bottleneck", "adapter"):
        return Bottleneck(bottleneck_dim)
    if key in ("fedlr", "lora"):
        return LoRA(rank, beta)
    if key == "federa":
        return FeDeRA(rank, beta)
    raise ConfigError(f"unknown adapter mode {name!r}; expected one of {', '.join(MODE_NAMES)}")


@dataclass(frozen=True)
class LoraPair:
    a: np.ndarray  # r x k
    b: np.ndarray  # d x r
    r: int
    beta: float
    target_name: str

    @property
    def delta(self) -> np.ndarray:
        return (self.beta / self.r) * (self.b @ self.a)


@dataclass
class AdapterSet:
    mode: AdapterMode
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    lora_targets: tuple[str, ...] = ()
    trainable_names: list[str] = field(default_factory=list)
    merged: bool = False

    @property
    def scale(self) -> float:
        return self.mode.scale if isinstance(self.mode, LoRA) else 1.0

    def pair(self, target: str) -> LoraPair:
        return LoraPair(
            a=self.tensors[target + ".lora_a"],
            b=self.tensors[target + ".lora_b"],
            r=self.mode.r,
            beta=self.mode.beta,
            target_name=target,
        )

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "AdapterSet":
        return AdapterSet(self.mode, tensors, self.lora_targets, list(self.trainable_names), self.merged)


def resolve_targets(names, targets) -> list[str]:
    """Expand short target names (``"w_q"``) to every block's full parameter name."""
    out = []
    for t in targets:
        if t in names:
            out.append(t)
            continue
        hits = [n for n in names if n.rsplit(".", 1)[-1] == t]
        if not hits:
            raise ConfigError(f"adapter target {t!r} matches no parameter")
        out.extend(hits)
    return out


def _check_rank(name, shape, r):
    if len(shape) != 2:
        raise ConfigError(f"adapter target {name!r} is not a matrix (shape {shape})")
    if r > min(shape):
        raise ConfigError(f"rank r={r} exceeds min dimension {min(shape)} of target {name!r} {shape}")


def bottleneck_shapes(cfg: ModelConfig, dim: int) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    shapes = {}
    for i in range(cfg.num_blocks):
        for point in ("adapter_attn", "adapter_ffn"):
            p = f"blocks.{i}.{point}"
            shapes[p + ".down"] = (d, dim)
            shapes[p + ".down_b"] = (dim,)
            shapes[p + ".up"] = (dim, d)
            shapes[p + ".up_b"] = (d,)
    return shapes


def adapter_shapes(mode: AdapterMode, cfg: ModelConfig, targets=DEFAULT_TARGETS) -> dict[str, tuple[int, ...]]:
    if isinstance(mode, Bottleneck):
        return bottleneck_shapes(cfg, mode.dim)
    if isinstance(mode, LoRA):
        base = parameter_shapes(cfg)
        shapes = {}
        for name in resolve_targets(base, targets):
            d, k = base[name]
            _check_rank(name, base[name], mode.r)
            shapes[name + ".lora_a"] = (mode.r, k)
            shapes[name + ".lora_b"] = (d, mode.r)
        return shapes
    return {}


def trainable_names_for(mode: AdapterMode, param_names, adapter_names) -> list[str]:
    param_names = list(param_names)
    if isinstance(mode, FullFT):
        return param_names
    if isinstance(mode, BiasOnly):
        return [n for n in param_names if is_bias_like(n) or n in HEAD]
    return list(adapter_names) + [n for n in HEAD if n in param_names]


def trainable_parameters(mode: AdapterMode, cfg: ModelConfig, targets=DEFAULT_TARGETS) -> dict:
    """Names and scalar count of what a client trains (and uploads) under ``mode``.

    ``adapter_count`` excludes the classifier head, which is trainable in
    every mode.
    """
    base = parameter_shapes(cfg)
    extra = adapter_shapes(mode, cfg, targets)
    names = trainable_names_for(mode, base, extra)
    shapes = {**base, **extra}
    count = int(sum(np.prod(shapes[n]) for n in names))
    return {
        "names": names,
        "count": count,
        "adapter_count": int(sum(np.prod(s) for s in extra.values())),
    }


def no_adapters(params: ParameterSet, mode: AdapterMode | None = None) -> AdapterSet:
    mode = mode or FullFT()
    if not isinstance(mode, (FullFT, BiasOnly)):
        raise ConfigError(f"mode {mode.name} needs attached adapter tensors")
    return AdapterSet(mode, {}, (), trainable_names_for(mode, params, ()))


def attach_lora(params: ParameterSet, targets, r: int, beta: float | None, rng: Rng, mode_cls=LoRA) -> AdapterSet:
    """LoRA init: ``a ~ N(0, 1/k)``, ``b = 0``; base matrices untouched and frozen."""
    mode = mode_cls(r, beta)
    names = resolve_targets(params, targets)
    tensors = {}
    for name in names:
        _check_rank(name, params[name].shape, r)
        d, k = params[name].shape
        tensors[name + ".lora_a"] = rng.standard_normal((r, k)) / np.sqrt(k)
        tensors[name + ".lora_b"] = np.zeros((d, r))
    return AdapterSet(mode, tensors, tuple(names), trainable_names_for(mode, params, tensors))


def federa_factors(w0: np.ndarray, r: int, name: str = "matrix") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(a, b)`` with ``b @ a`` the rank-``r`` truncated SVD of ``w0``."""
    _check_rank(name, w0.shape, r)
    res = svd(w0, name)
    root = np.sqrt(res.sigma[:r])
    a = root[:, None] * res.v_rows[:r, :]
    b = res.u[:, :r] * root[None, :]
    return a, b


def attach_federa(params: ParameterSet, targets, r: int, beta: float | None = None) -> AdapterSet:
    """FeDeRA init. Mutates ``params``: each target becomes ``W0 - (beta/r) b a``."""
    mode = FeDeRA(r, beta)
    names = resolve_targets(params, targets)
    for name in names:
        _check_rank(name, params[name].shape, r)
    tensors = {}
    for name in names:
        w0 = params[name]
        a, b = federa_factors(w0, r, name)
        tensors[name + ".lora_a"] = a
        tensors[name + ".lora_b"] = b
        params[name] = w0 - mode.scale * (b @ a)
    return AdapterSet(mode, tensors, tuple(names), trainable_names_for(mode, params, tensors))


def attach_bottleneck(params: ParameterSet, rng: Rng, dim: int) -> AdapterSet:
    """Houlsby-style adapters after attention and FFN; identity at init (zero up-projection)."""
    mode = Bottleneck(dim)
    d = params["token_embedding"].shape[1]
    n_blocks = sum(1 for k in params if k.startswith("blocks.") and k.endswith(".w_q"))
    tensors = {}
    for i in range(n_blocks):
        for point in ("adapter_attn", "adapter_ffn"):
            p = f"blocks.{i}.{point}"
            tensors[p + ".down"] = rng.standard_normal((d, dim)) / np.sqrt(d)
            tensors[p + ".down_b"] = np.zeros(dim)
            tensors[p + ".up"] = np.zeros((dim, d))
            tensors[p + ".up_b"] = np.zeros(d)
    return AdapterSet(mode, tensors, (), trainable_names_for(mode, params, tensors))


def attach(params: ParameterSet, mode: AdapterMode, rng: Rng, targets=DEFAULT_TARGETS) -> AdapterSet:
    if isinstance(mode, FeDeRA):
        return attach_federa(params, targets, mode.r, mode.beta)
    if isinstance(mode, LoRA):
        return attach_lora(params, targets, mode.r, mode.beta, rng)
    if isinstance(mode, Bottleneck):
        return attach_bottleneck(params, rng, mode.dim)
    return no_adapters(params, mode)


def effective_weight(w0: np.ndarray, pair: LoraPair) -> np.ndarray:
    if pair.b.shape[0] != w0.shape[0] or pair.a.shape[1] != w0.shape[1]:
        raise ConfigError(f"LoRA pair for {pair.target_name!r} does not match base shape {w0.shape}")
    return w0 + pair.delta


def merge(params: ParameterSet, adapters: AdapterSet) -> ParameterSet:
    """Fold LoRA/FeDeRA pairs into their base matrices in place and empty ``adapters``."""
    if isinstance(adapters.mode, Bottleneck):
        raise UnsupportedOperation("bottleneck adapters contain a nonlinearity and cannot be merged")
    if not isinstance(adapters.mode, LoRA):
        raise UnsupportedOperation(f"mode {adapters.mode.name} has no low-rank adapters to merge")
    if adapters.merged or not adapters.lora_targets:
        raise UnsupportedOperation("adapters already merged; no low-rank pairs present")
    for name in adapters.lora_targets:
        params[name] = effective_weight(params[name], adapters.pair(name))
    adapters.tensors = {}
    adapters.lora_targets = ()
    adapters.trainable_names = list(params)
    adapters.merged = True
    return params
