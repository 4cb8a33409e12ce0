"""Dense linear algebra kernels used everywhere else in the package.

Everything operates on float64 numpy arrays with row-major semantics.
All functions are pure; :class:`Rng` is the only stateful object and each
logical consumer (init, batch order, router noise, ...) should own its own
stream rather than share one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "NumericalError",
    "SvdFactors",
    "Rng",
    "as_matrix",
    "as_vector",
    "matmul",
    "svd",
    "truncate_svd",
    "top_k_indices",
    "column_norms",
    "row_norms",
]

# One-sided Jacobi settings: relative off-diagonal threshold and sweep cap.
# Adequate for the desk-scale shapes this package targets (dims <= 1024).
JACOBI_REL_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


class ShapeError(ValueError):
    """Operand dimensions do not compose."""


class NumericalError(RuntimeError):
    """Non-finite values encountered, or an iterative routine failed to converge."""


def as_matrix(data) -> np.ndarray:
    """Coerce to a finite 2-D float64 array (C order)."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if a.size == 0:
        raise ShapeError("matrix must be non-empty")
    if not np.isfinite(a).all():
        raise NumericalError("matrix contains non-finite entries")
    return a


def as_vector(data) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got ndim={v.ndim}")
    if not np.isfinite(v).all():
        raise NumericalError("vector contains non-finite entries")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.isfinite(out).all():
        raise NumericalError("matrix product overflowed to non-finite values")
    return out


def column_norms(a) -> np.ndarray:
    """Euclidean norm of each column."""
    return np.linalg.norm(as_matrix(a), axis=0)


def row_norms(a) -> np.ndarray:
    """Euclidean norm of each row."""
    return np.linalg.norm(as_matrix(a), axis=1)


def top_k_indices(scores, k: int) -> list[int]:
    """Indices of the k largest scores, ascending, ties broken by lower index."""
    s = as_vector(scores)
    if not 1 <= k <= s.size:
        raise ValueError(f"k={k} out of range for {s.size} scores")
    # Stable sort on the negated scores keeps the lower original index first
    # among ties; the chosen set is then reported in ascending index order.
    picked = np.argsort(-s, kind="stable")[:k]
    return sorted(int(i) for i in picked)


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``A = U @ diag(S) @ V.T`` with S sorted descending.

    ``degenerate`` marks the all-zero-spectrum corner of :func:`truncate_svd`,
    where a single zero triplet is retained to keep shapes meaningful.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    degenerate: bool = False

    @property
    def rank(self) -> int:
        """Number of retained singular triplets."""
        return int(self.S.size)

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _rotation_schedule(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Round-robin tournament: n-1 rounds of disjoint column pairs. Disjoint
    # pairs commute, so each round can be applied with vectorized updates.
    slots = list(range(n)) + ([None] if n % 2 else [])
    m = len(slots)
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = slots[i], slots[m - 1 - i]
            if a is not None and b is not None:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.asarray(p, dtype=np.intp), np.asarray(q, dtype=np.intp)))
        slots = [slots[0]] + [slots[-1]] + slots[1:-1]
    return rounds


def _fill_missing_columns(u: np.ndarray, missing: np.ndarray) -> None:
    # Replace flagged columns with unit vectors orthogonal to all others.
    # Candidates are standard basis vectors; the one with the largest residual
    # after projection is always well defined because cols <= rows here.
    m = u.shape[0]
    for j in np.nonzero(missing)[0]:
        residuals = np.eye(m) - u @ (u.T @ np.eye(m))
        norms = np.linalg.norm(residuals, axis=0)
        best = int(np.argmax(norms))
        cand = residuals[:, best]
        cand = cand - u @ (u.T @ cand)  # second pass for orthogonality
        u[:, j] = cand / np.linalg.norm(cand)


def svd(a, *, max_sweeps: int = JACOBI_MAX_SWEEPS, rel_tol: float = JACOBI_REL_TOL) -> SvdFactors:
    """Full thin SVD via one-sided Jacobi rotations.

    Raises :class:`NumericalError` if the off-diagonal measure has not dropped
    below ``rel_tol`` after ``max_sweeps`` sweeps.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        f = svd(a.T, max_sweeps=max_sweeps, rel_tol=rel_tol)
        return SvdFactors(U=f.V, S=f.S, V=f.U)

    g = a.copy()
    v = np.eye(n)
    schedule = _rotation_schedule(n)
    # Columns whose norm falls below eps-scale of the largest are deflated to
    # exact zero: a numerically parallel residue can never pass the relative
    # orthogonality test, it only keeps shrinking.
    deflate_rel = np.finfo(np.float64).eps * max(m, n)
    converged = n == 1
    for _ in range(max_sweeps):
        if converged:
            break
        norms_sq = np.einsum("ij,ij->j", g, g)
        tiny = deflate_rel**2 * float(norms_sq.max())
        g[:, norms_sq <= tiny] = 0.0
        worst = 0.0
        rotated = False
        for p, q in schedule:
            gp = g[:, p]
            gq = g[:, q]
            app = np.einsum("ij,ij->j", gp, gp)
            aqq = np.einsum("ij,ij->j", gq, gq)
            apq = np.einsum("ij,ij->j", gp, gq)
            scale = np.sqrt(app * aqq)
            rel = np.divide(np.abs(apq), scale, out=np.zeros_like(scale), where=scale > 0)
            worst = max(worst, float(rel.max(initial=0.0)))
            hit = rel > rel_tol
            if not hit.any():
                continue
            rotated = True
            ph, qh = p[hit], q[hit]
            zeta = (aqq[hit] - app[hit]) / (2.0 * apq[hit])
            with np.errstate(over="ignore", divide="ignore"):
                denom = np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)
                t = np.where(np.isfinite(denom), np.sign(zeta) / denom, 0.5 / zeta)
            t = np.where(zeta == 0.0, 1.0, t)  # 45-degree rotation when norms tie
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (g, v):
                colp = mat[:, ph]
                colq = mat[:, qh]
                mat[:, ph] = c * colp - s * colq
                mat[:, qh] = s * colp + c * colq
        if not rotated and worst <= rel_tol:
            converged = True
    if not converged:
        raise NumericalError(
            f"one-sided Jacobi SVD did not converge within {max_sweeps} sweeps "
            f"for a {m}x{n} matrix"
        )

    sing = np.linalg.norm(g, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    g = g[:, order]
    v = v[:, order]
    u = np.zeros_like(g)
    nonzero = sing > 0.0
    u[:, nonzero] = g[:, nonzero] / sing[nonzero]
    if not nonzero.all():
        _fill_missing_columns(u, ~nonzero)
    return SvdFactors(U=u, S=sing, V=v)


def truncate_svd(f: SvdFactors, ratio: float) -> SvdFactors:
    """Keep the smallest leading set of triplets whose singular mass reaches
    ``ratio`` of the total.

    An all-zero spectrum keeps a single zero triplet and is flagged degenerate.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    cum = np.cumsum(f.S)
    total = float(cum[-1])
    if total == 0.0:
        return SvdFactors(f.U[:, :1].copy(), f.S[:1].copy(), f.V[:, :1].copy(), degenerate=True)
    # First index whose cumulative mass reaches the target; total is taken from
    # the same cumulative sum so ratio=1.0 is exact in floating point.
    k = int(np.searchsorted(cum, ratio * total, side="left")) + 1
    k = min(k, f.rank)
    return SvdFactors(f.U[:, :k].copy(), f.S[:k].copy(), f.V[:, :k].copy())


class Rng:
    """Seeded random stream; identical seed yields an identical stream.

    ``derive`` builds an independent child stream from a string tag. Children
    depend only on (seed, tag), never on how much of the parent was consumed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, tag: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}/{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
