"""Dense linear algebra helpers and seeded random streams.

Matrices are plain ``float64`` numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi method with round-robin pair ordering so that each
rotation round is a single vectorized update over disjoint column pairs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SvdConvergenceError

Rng = np.random.Generator

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # d x p, orthonormal columns
    sigma: np.ndarray  # p, non-increasing
    v_rows: np.ndarray  # p x k, orthonormal rows

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v_rows


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


def make_rng(seed: int, purpose: str = "default", round: int = 0, client: int = 0) -> Rng:
    """Return an independent PCG64 stream keyed on ``(seed, purpose, round, client)``.

    The key is expanded through ``SeedSequence`` so streams for different
    clients or rounds never overlap, and the draw sequence only depends on
    the key, not on the order in which streams are created.
    """
    if seed < 0 or round < 0 or client < 0:
        raise ConfigError(f"rng key components must be non-negative, got seed={seed} round={round} client={client}")
    key = [seed & 0xFFFFFFFFFFFFFFFF, _label_hash(purpose), round, client]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def as_matrix(w) -> np.ndarray:
    m = np.asarray(w, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(np.sqrt(np.sum(w * w)))


def column_l2_norms(w) -> np.ndarray:
    w = as_matrix(w)
    return np.sqrt(np.sum(w * w, axis=0))


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between ``u`` and ``v``.

    Zero vectors follow the drift convention: two zero vectors are treated
    as having the same direction (1.0), a zero against a nonzero vector as
    orthogonal (0.0).
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ConfigError(f"cosine_similarity length mismatch: {u.shape} vs {v.shape}")
    nu = np.sqrt(np.dot(u, u))
    nv = np.sqrt(np.dot(v, v))
    if nu == 0.0 and nv == 0.0:
        return 1.0
    if nu == 0.0 or nv == 0.0:
        return 0.0
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def gaussian_matrix(rng: Rng, d: int, k: int, std: float) -> np.ndarray:
    if std <= 0:
        raise ConfigError(f"gaussian_matrix needs std > 0, got {std}")
    return rng.standard_normal((d, k)) * std


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Circle-method schedule: n-1 rounds of n/2 disjoint pairs covering all pairs once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` with an orthonormal completion."""
    d, p = u.shape
    basis = [u[:, j] for j in range(p) if good[j]]
    out = u.copy()
    candidates = iter(np.eye(d))
    for j in range(p):
        if good[j]:
            continue
        for e in candidates:
            x = e.copy()
            for _ in range(2):
                for b in basis:
                    x -= np.dot(b, x) * b
            nx = np.linalg.norm(x)
            if nx > 1e-8:
                x /= nx
                basis.append(x)
                out[:, j] = x
                break
    return out


def _jacobi_tall(w: np.ndarray, name: str) -> SvdResult:
    d, k = w.shape
    a = w.copy()
    v = np.eye(k)
    schedule = _round_robin(k) if k > 1 else []
    for sweep in range(SVD_MAX_SWEEPS):
        worst = 0.0
        for ps, qs in schedule:
            if ps.size == 0:
                continue
            ap, aq = a[:, ps], a[:, qs]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                corr = np.where(denom > 0, np.abs(gamma) / denom, 0.0)
            worst = max(worst, float(corr.max()))
            rot = corr > SVD_TOL
            if not rot.any():
                continue
            g = np.where(rot, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(rot, c, 1.0)
            s = np.where(rot, s, 0.0)
            a[:, ps], a[:, qs] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, ps], v[:, qs]
            v[:, ps], v[:, qs] = c * vp - s * vq, s * vp + c * vq
        if worst < SVD_TOL:
            break
    else:
        raise SvdConvergenceError(
            f"SVD of {name!r} ({d}x{k}) did not converge in {SVD_MAX_SWEEPS} sweeps; "
            f"max off-diagonal correlation {worst:.3e}"
        )
    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    cutoff = (sigma[0] if sigma.size else 0.0) * max(d, k) * np.finfo(np.float64).eps
    good = sigma > cutoff
    u = np.zeros_like(a)
    u[:, good] = a[:, good] / sigma[good]
    if not good.all():
        u = _complete_basis(u, good)
    return SvdResult(u=u, sigma=sigma, v_rows=v.T.copy())


def svd(w, name: str = "matrix") -> SvdResult:
    """Thin SVD ``w = u @ diag(sigma) @ v_rows`` with ``p = min(d, k)`` components."""
    w = as_matrix(w)
    d, k = w.shape
    if min(d, k) < 1:
        raise ConfigError(f"svd needs a non-empty matrix, got shape {w.shape} for {name!r}")
    if not np.all(np.isfinite(w)):
        raise ConfigError(f"svd input {name!r} contains non-finite entries")
    if d >= k:
        return _jacobi_tall(w, name)
    t = _jacobi_tall(w.T, name)
    return SvdResult(u=t.v_rows.T.copy(), sigma=t.sigma, v_rows=t.u.T.copy())


def truncated_svd(w, r: int, name: str = "matrix") -> np.ndarray:
    """Best rank-``r`` approximation of ``w``."""
    res = svd(w, name)
    return (res.u[:, :r] * res.sigma[:r]) @ res.v_rows[:r]
