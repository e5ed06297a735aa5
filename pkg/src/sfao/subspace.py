"""Dense vector math and orthonormal-subspace maintenance.

Vectors are plain 1-D float64 numpy arrays. The basis keeps an explicit
d x r matrix Q with orthonormal columns; projecting a gradient off the
span is ``g - Q (Q^T g)``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, ZeroVector

ZERO_NORM_TOL = 1e-12
DEFAULT_RANK_TOL = 1e-6
SVD_CUTOFF = 1e-10


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        v = v.ravel()
    return v


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"dim {a.shape[0]} vs {b.shape[0]}")


def cosine(a, b) -> float:
    """Cosine of the angle between a and b, clamped to [-1, 1].

    Raises ZeroVector if either norm is at or below 1e-12: the caller
    treats such a pair as unalignable.
    """
    a = as_vector(a)
    b = as_vector(b)
    _check_dims(a, b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= ZERO_NORM_TOL or nb <= ZERO_NORM_TOL:
        raise ZeroVector("cosine undefined for (near-)zero vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


class OrthoBasis:
    """Orthonormal basis Q for the span of inserted vectors.

    Insertion is incremental Gram-Schmidt with one re-orthogonalization
    pass ("twice is enough"); a single pass drifts once the rank grows
    past a few dozen columns.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise DimensionMismatch(f"ambient dim must be positive, got {dim}")
        self.dim = int(dim)
        self.q = np.zeros((self.dim, 0), dtype=np.float64)

    @property
    def rank(self) -> int:
        return self.q.shape[1]

    def columns(self) -> list[np.ndarray]:
        return [self.q[:, j].copy() for j in range(self.rank)]

    def insert(self, g, tol: float = DEFAULT_RANK_TOL) -> bool:
        """Gram-Schmidt insert. Returns True if a new column was added,
        False if g is already represented (residual ratio <= tol)."""
        g = as_vector(g)
        if g.shape[0] != self.dim:
            raise DimensionMismatch(f"dim {g.shape[0]} vs basis dim {self.dim}")
        ng = float(np.linalg.norm(g))
        if ng <= ZERO_NORM_TOL:
            raise ZeroVector("cannot insert a (near-)zero vector")
        r = g - self.q @ (self.q.T @ g)
        r = r - self.q @ (self.q.T @ r)  # second pass
        nr = float(np.linalg.norm(r))
        if nr / ng <= tol:
            return False
        self.q = np.column_stack([self.q, r / nr])
        return True

    def project_onto(self, g) -> np.ndarray:
        g = as_vector(g)
        if g.shape[0] != self.dim:
            raise DimensionMismatch(f"dim {g.shape[0]} vs basis dim {self.dim}")
        return self.q @ (self.q.T @ g)

    def project_out(self, g) -> np.ndarray:
        g = as_vector(g)
        if g.shape[0] != self.dim:
            raise DimensionMismatch(f"dim {g.shape[0]} vs basis dim {self.dim}")
        return g - self.q @ (self.q.T @ g)


def basis_insert(basis: OrthoBasis, g, tol: float = DEFAULT_RANK_TOL) -> bool:
    return basis.insert(g, tol=tol)


def project_out(basis: OrthoBasis, g) -> np.ndarray:
    return basis.project_out(g)


def svd_projection_oracle(dirs, g) -> np.ndarray:
    """Remove the span of ``dirs`` from g via a thin SVD.

    Test-only oracle for small dimensions: singular values below
    1e-10 * sigma_max are treated as zero (Moore-Penrose convention),
    and the result is (I - U_r U_r^T) g.
    """
    g = as_vector(g)
    cols = [as_vector(v) for v in dirs]
    if not cols:
        return g.copy()
    for v in cols:
        _check_dims(v, g)
    mat = np.column_stack(cols)
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    if s.size == 0 or s[0] <= 0.0:
        return g.copy()
    ur = u[:, s > SVD_CUTOFF * s[0]]
    return g - ur @ (ur.T @ g)


def interference_risk(u, dirs) -> float:
    """max over dirs of the positive part of -g.u; 0 for an empty set."""
    u = as_vector(u)
    risk = 0.0
    for d in dirs:
        d = as_vector(d)
        _check_dims(d, u)
        risk = max(risk, max(-float(np.dot(d, u)), 0.0))
    return risk
