"""Column-wise magnitude and direction drift between consecutive global weights."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .linalg import column_l2_norms


def _as_columns(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        return w.reshape(-1, 1)
    if w.ndim != 2:
        raise ConfigError(f"drift metrics need a vector or matrix, got shape {w.shape}")
    return w


def magnitude_vector(w) -> np.ndarray:
    return column_l2_norms(_as_columns(w))


def direction_matrix(w) -> np.ndarray:
    w = _as_columns(w)
    norms = column_l2_norms(w)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, w / safe, 0.0)


def _pair(w1, w2):
    w1, w2 = _as_columns(w1), _as_columns(w2)
    if w1.shape != w2.shape:
        raise ConfigError(f"drift shape mismatch: {w1.shape} vs {w2.shape}")
    return w1, w2


def magnitude_variation(w1, w2) -> float:
    w1, w2 = _pair(w1, w2)
    return float(np.mean(np.abs(magnitude_vector(w1) - magnitude_vector(w2))))


def direction_variation(w1, w2) -> float:
    """Mean of ``1 - cos`` over columns; zero/zero columns count 0, zero/nonzero count 1."""
    w1, w2 = _pair(w1, w2)
    d1, d2 = direction_matrix(w1), direction_matrix(w2)
    z1 = column_l2_norms(w1) == 0
    z2 = column_l2_norms(w2) == 0
    cos = np.clip(np.sum(d1 * d2, axis=0), -1.0, 1.0)
    # identical columns compare exactly, so constant snapshots give exactly 0
    same = np.all(w1 == w2, axis=0)
    cos = np.where((z1 & z2) | same, 1.0, cos)
    return float(np.mean(1.0 - cos))


@dataclass
class DriftSeries:
    tensor_name: str
    delta_m: list[float] = field(default_factory=list)
    delta_d: list[float] = field(default_factory=list)
    rounds: list[int] = field(default_factory=list)


def drift_series(snapshots, names, rounds=None) -> dict[str, DriftSeries]:
    """Drift of each named tensor between consecutive snapshots.

    ``snapshots`` is an ordered list of ``{name: tensor}``; entry ``t`` of
    each series compares snapshot ``t`` against ``t - 1``.
    """
    if len(snapshots) < 2:
        raise DataError(f"drift needs at least two snapshots, got {len(snapshots)}")
    available = sorted(set.intersection(*(set(s) for s in snapshots)))
    missing = [n for n in names if n not in available]
    if missing:
        raise DataError(f"unknown tensor name(s) {missing}; available: {', '.join(available)}")
    if rounds is None:
        rounds = list(range(len(snapshots)))
    out = {}
    for name in names:
        series = DriftSeries(name)
        for t in range(1, len(snapshots)):
            prev, cur = snapshots[t - 1][name], snapshots[t][name]
            series.delta_m.append(magnitude_variation(cur, prev))
            series.delta_d.append(direction_variation(cur, prev))
            series.rounds.append(int(rounds[t]))
        out[name] = series
    return out


def effective_snapshots(frozen, snapshots, targets, scale: float) -> list[dict]:
    """Map adapter snapshots to effective weights ``W0 + scale * b @ a`` per target."""
    out = []
    for snap in snapshots:
        eff = {}
        for t in targets:
            eff[t + ".effective"] = frozen[t] + scale * (snap[t + ".lora_b"] @ snap[t + ".lora_a"])
        out.append(eff)
    return out


def write_drift_csv(path, series: DriftSeries) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "delta_m", "delta_d"])
        for r, m, d in zip(series.rounds, series.delta_m, series.delta_d):
            w.writerow([r, f"{m:.17g}", f"{d:.17g}"])
