"""Dense float64 linear algebra: orthonormal bases, uncentered PCA and projections.

Every projection in the library has the form ``P = I - Q^T Q`` where ``Q`` is a
``k x d`` matrix with orthonormal rows. Runtime code never forms ``P``; it calls
:func:`apply_projection`, which costs ``O(k d)`` per vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSubspaceError, InvalidInputError, UndefinedSimilarityError

ORTHO_TOL = 1e-10


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return m


@dataclass(frozen=True, eq=False)
class ProjectionBasis:
    """Orthonormal rows ``Q`` (shape ``rank x dim``) defining ``P = I - Q^T Q``.

    Construction checks ``Q Q^T = I`` to ``ORTHO_TOL``; pass ``check=False`` only
    for intermediate, not-yet-reorthonormalized training iterates.
    """

    rows: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise InvalidInputError(f"basis rows must be 2-D, got shape {rows.shape}")
        if rows.shape[0] > rows.shape[1]:
            raise InvalidInputError(f"rank {rows.shape[0]} exceeds dim {rows.shape[1]}")
        if not np.all(np.isfinite(rows)):
            raise InvalidInputError("basis rows contain non-finite values")
        object.__setattr__(self, "rows", rows)
        if self.check and self.orthonormality_error() > ORTHO_TOL:
            raise InvalidInputError(
                f"basis rows are not orthonormal (max |QQ^T - I| = {self.orthonormality_error():.3e})"
            )

    @classmethod
    def empty(cls, dim: int) -> "ProjectionBasis":
        return cls(np.zeros((0, dim)))

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def rank(self) -> int:
        return self.rows.shape[0]

    def orthonormality_error(self) -> float:
        if self.rank == 0:
            return 0.0
        gram = self.rows @ self.rows.T
        return float(np.max(np.abs(gram - np.eye(self.rank))))

    def __eq__(self, other):
        if not isinstance(other, ProjectionBasis):
            return NotImplemented
        return self.rows.shape == other.rows.shape and np.array_equal(self.rows, other.rows)


def qr_orthobasis(rows, rank_tol: float = 1e-8) -> ProjectionBasis:
    """Orthonormal basis of the row space of ``rows`` via pivoted Householder QR.

    The rows are treated as columns of ``A = rows^T`` and reduced with Householder
    reflections, choosing at each step the column with the largest residual
    norm. Reduction stops once that residual drops below ``rank_tol`` times the
    largest input row norm, so the returned rank is numerical rank.
    """
    if rank_tol <= 0:
        raise InvalidInputError("rank_tol must be positive")
    m_rows = _as_matrix(rows, "rows")
    m, d = m_rows.shape
    if d < 1:
        raise InvalidInputError("rows must have at least one column")
    if m == 0:
        return ProjectionBasis.empty(d)

    a = m_rows.T.copy()  # d x m, columns are the input rows
    scale = float(np.max(np.linalg.norm(a, axis=0)))
    if scale == 0.0:
        return ProjectionBasis.empty(d)
    threshold = rank_tol * scale

    reflectors: list[np.ndarray] = []
    for j in range(min(m, d)):
        sub = a[j:, j:]
        norms = np.linalg.norm(sub, axis=0)
        p = int(np.argmax(norms))
        if norms[p] <= threshold:
            break
        if p:
            a[:, [j, j + p]] = a[:, [j + p, j]]
        x = a[j:, j]
        alpha = -np.copysign(np.linalg.norm(x), x[0])
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)  # nonzero: |v[0]| >= |x| > threshold
        a[j:, j:] -= 2.0 * np.outer(v, v @ a[j:, j:])
        reflectors.append(v)

    r = len(reflectors)
    q = np.eye(d)[:, :r]
    for j in range(r - 1, -1, -1):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return ProjectionBasis(np.ascontiguousarray(q.T))


def pca_top_k(samples, k: int, rank_tol: float = 1e-8) -> np.ndarray:
    """Top-``k`` uncentered principal directions of ``samples`` (rows).

    Components come from the right singular vectors of the raw sample matrix,
    ordered by captured second moment. Directions whose singular value is below
    ``rank_tol`` times the largest are discarded, so fewer than ``k`` rows are
    returned when the samples span fewer dimensions.
    """
    x = _as_matrix(samples, "samples")
    n, d = x.shape
    if n < 1:
        raise InvalidInputError("pca_top_k needs at least one sample")
    if not 1 <= k <= d:
        raise InvalidInputError(f"k must lie in [1, {d}], got {k}")
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    if s[0] == 0.0:
        raise DegenerateSubspaceError("all samples are numerically zero")
    keep = int(np.sum(s > rank_tol * s[0]))
    return np.ascontiguousarray(vt[: min(k, keep)])


def apply_projection(basis: ProjectionBasis, x) -> np.ndarray:
    """Return ``x - Q^T (Q x)`` for a vector or a stack of row vectors."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != basis.dim:
        raise InvalidInputError(f"expected trailing dimension {basis.dim}, got {arr.shape[-1]}")
    if basis.rank == 0:
        return arr.copy()
    q = basis.rows
    return arr - (arr @ q.T) @ q


def materialize_projection(basis: ProjectionBasis) -> np.ndarray:
    """Dense ``I - Q^T Q``; for diagnostics and tests only."""
    q = basis.rows
    return np.eye(basis.dim) - q.T @ q


def cosine_similarity(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def subspace_residual(basis: ProjectionBasis, rows) -> float:
    """Largest relative residual of ``rows`` after projecting onto span(``basis``)."""
    r = _as_matrix(rows, "rows")
    if r.shape[0] == 0:
        return 0.0
    norms = np.linalg.norm(r, axis=1)
    resid = np.linalg.norm(apply_projection(basis, r), axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return float(np.max(resid / safe))
