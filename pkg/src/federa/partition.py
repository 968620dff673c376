"""Dirichlet non-IID partitioning and Jensen-Shannon heterogeneity.

Client ``i`` draws class proportions ``X_i ~ Dir(alpha * m)`` where ``m`` is
the global class distribution. Each class's (shuffled) samples are then
split across clients in proportion to ``X[:, c] / sum_i X[i, c]`` with
largest-remainder rounding, so every sample lands on exactly one client.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .linalg import Rng, make_rng

_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)


def log_gamma(x: float) -> float:
    """``log|Gamma(x)|`` by the Lanczos approximation (g=7, 9 terms)."""
    if x < 0.5:
        return math.log(math.pi / abs(math.sin(math.pi * x))) - log_gamma(1.0 - x)
    x -= 1.0
    acc = _LANCZOS[0]
    for i, c in enumerate(_LANCZOS[1:], 1):
        acc += c / (x + i)
    t = x + _LANCZOS_G + 0.5
    return 0.5 * math.log(2 * math.pi) + (x + 0.5) * math.log(t) - t + math.log(acc)


def log_standard_gamma(shape, rng: Rng) -> np.ndarray:
    """Log of Gamma(shape, 1) draws.

    Marsaglia-Tsang squeeze-free rejection for shape >= 1; shapes below 1
    are boosted via ``G(a) = G(a + 1) * U**(1/a)``, kept in log space since
    ``U**(1/a)`` underflows for the tiny shapes produced by small alpha.
    """
    shape = np.asarray(shape, dtype=np.float64)
    dims = shape.shape
    shape = shape.ravel()
    if np.any(~(shape > 0)):
        raise ConfigError(f"gamma shape parameters must be > 0, got {shape.tolist()}")
    boost = shape < 1.0
    a = np.where(boost, shape + 1.0, shape)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(a)
    pending = np.arange(a.size)
    while pending.size:
        x = rng.standard_normal(pending.size)
        v = (1.0 + c[pending] * x) ** 3
        u = 1.0 - rng.random(pending.size)
        dp = d[pending]
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = (v > 0) & (np.log(u) < 0.5 * x * x + dp - dp * v + dp * np.log(v))
        out[pending[ok]] = np.log(dp[ok] * v[ok])
        pending = pending[~ok]
    if boost.any():
        u = 1.0 - rng.random(int(boost.sum()))
        out[boost] += np.log(u) / shape[boost]
    return out.reshape(dims) if dims else out


def dirichlet_sample(concentration, rng: Rng, size: int | None = None) -> np.ndarray:
    """One draw from ``Dir(concentration)``, or a ``(size, K)`` stack of draws."""
    u = np.asarray(concentration, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise ConfigError("dirichlet concentration must be a non-empty vector")
    if np.any(~(u > 0)):
        raise ConfigError(f"dirichlet concentrations must all be > 0, got {u.tolist()}")
    lg = log_standard_gamma(u if size is None else np.tile(u, (size, 1)), rng)
    x = np.exp(lg - lg.max(axis=-1, keepdims=True))
    return x / x.sum(axis=-1, keepdims=True)


def dirichlet_log_pdf(x, concentration) -> float:
    """Log density of ``Dir(u)`` at an interior point of the simplex.

    Boundary points (any ``x_i <= 0``) raise ``DataError`` rather than
    returning an infinity.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(concentration, dtype=np.float64)
    if x.shape != u.shape:
        raise ConfigError(f"x {x.shape} and concentration {u.shape} differ in length")
    if np.any(u <= 0):
        raise ConfigError("dirichlet concentrations must all be > 0")
    if np.any(x <= 0) or abs(x.sum() - 1.0) > 1e-9:
        raise DataError("dirichlet_log_pdf needs x strictly inside the simplex")
    log_beta = sum(log_gamma(float(ui)) for ui in u) - log_gamma(float(u.sum()))
    return float(np.sum((u - 1.0) * np.log(x)) - log_beta)


def class_proportions(labels, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(getattr(labels, "labels", labels))
    if labels.size == 0:
        raise DataError("class_proportions of an empty dataset")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int
    alpha: float
    seed: int = 0

    def validate(self) -> "PartitionConfig":
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        return self


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    sample_indices: np.ndarray
    empirical_dist: np.ndarray

    def __len__(self):
        return len(self.sample_indices)


def largest_remainder(total: int, weights) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``total * weights``; ties go to lower index."""
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum()
    w = np.full_like(w, 1.0 / w.size) if s <= 0 else w / s
    quotas = total * w
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    order = np.lexsort((np.arange(w.size), -(quotas - counts)))
    counts[order[:short]] += 1
    return counts


def partition(dataset, config: PartitionConfig, class_keys=None) -> list[ClientShard]:
    """Split ``dataset`` across ``config.num_clients`` clients with Dirichlet class skew.

    ``class_keys`` (one int per sample) overrides the labels as the
    partitioning class. Every client is guaranteed at least one sample:
    empty clients take one sample from the currently largest client.
    """
    config.validate()
    keys = np.asarray(dataset.labels if class_keys is None else class_keys, dtype=np.int64)
    n = keys.size
    if n == 0:
        raise DataError("cannot partition an empty dataset")
    N = config.num_clients
    if N > n:
        raise DataError(f"num_clients={N} exceeds dataset size {n}")
    num_classes = int(keys.max()) + 1
    m = class_proportions(keys, num_classes)
    present = np.flatnonzero(m > 0)
    props = np.zeros((N, num_classes))
    for i in range(N):
        props[i, present] = dirichlet_sample(config.alpha * m[present], make_rng(config.seed, "partition-dirichlet", client=i))
    owned: list[list[int]] = [[] for _ in range(N)]
    for c in present:
        idx = np.flatnonzero(keys == c)
        idx = idx[make_rng(config.seed, "partition-class", round=int(c)).permutation(idx.size)]
        counts = largest_remainder(idx.size, props[:, c])
        start = 0
        for i in range(N):
            owned[i].extend(idx[start:start + counts[i]].tolist())
            start += counts[i]
    for i in range(N):
        if not owned[i]:
            donor = max(range(N), key=lambda j: (len(owned[j]), -j))
            owned[i].append(owned[donor].pop())
    shards = []
    for i in range(N):
        idx = np.array(sorted(owned[i]), dtype=np.int64)
        shards.append(ClientShard(i, idx, class_proportions(keys[idx], num_classes)))
    return shards


def js_divergence(p, q) -> float:
    """Base-2 Jensen-Shannon divergence, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError(f"js_divergence length mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    js = 0.5 * kl(p) + 0.5 * kl(q)
    return min(1.0, max(0.0, js))


def heterogeneity_matrix(shards) -> tuple[np.ndarray, float]:
    if len(shards) < 2:
        raise ConfigError("heterogeneity_matrix needs at least two shards")
    n = len(shards)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = js_divergence(shards[i].empirical_dist, shards[j].empirical_dist)
    iu = np.triu_indices(n, 1)
    return out, float(out[iu].mean())


def write_shards_json(path, shards) -> None:
    payload = {str(s.client_id): s.sample_indices.tolist() for s in shards}
    Path(path).write_text(json.dumps(payload, separators=(",", ":")) + "\n", encoding="utf-8")


def read_shards_json(path, keys) -> list[ClientShard]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read shards file {path}: {exc}") from exc
    keys = np.asarray(keys)
    num_classes = int(keys.max()) + 1
    shards = []
    for cid in sorted(payload, key=int):
        idx = np.array(payload[cid], dtype=np.int64)
        shards.append(ClientShard(int(cid), idx, class_proportions(keys[idx], num_classes)))
    return shards


def write_matrix_csv(path, matrix) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix):
            w.writerow([f"{x:.17g}" for x in row])
