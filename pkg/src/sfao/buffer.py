"""Capped store of past gradient directions.

Keeps both the raw vectors (for cosine scans) and an orthonormal basis
over them (for projection). Admission is exact (full scan); only the
max-cosine score used for gating is Monte Carlo subsampled.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DimensionMismatch, EmptyBuffer, ZeroVector
from .subspace import OrthoBasis, ZERO_NORM_TOL, as_vector, cosine

BYTES_PER_FLOAT32 = 4

ADDED = "added"
DUPLICATE = "duplicate"
DROPPED = "dropped"


def memory_mb(num_stored: int, num_params: int) -> float:
    """Megabytes to hold num_stored float32 gradients of num_params each."""
    return num_stored * num_params * BYTES_PER_FLOAT32 / 1048576.0


class GradBuffer:
    """FIFO-capped gradient store with novelty/drop admission.

    Single-writer: concurrent reads are fine only while no admit/evict
    is in flight.
    """

    def __init__(self, dim: int, capacity: int = 200, tau_add: float = 0.99,
                 tau_drop: float = 1e-8, basis_tol: float = 1e-6,
                 rng_seed: int = 0):
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.tau_add = float(tau_add)
        self.tau_drop = float(tau_drop)
        self.basis_tol = float(basis_tol)
        self.rng_seed = int(rng_seed)
        self.entries: list[np.ndarray] = []
        self.basis = OrthoBasis(self.dim)
        self._rng = np.random.default_rng(self.rng_seed)

    def __len__(self) -> int:
        return len(self.entries)

    def sample_subset(self, k: int) -> np.ndarray:
        """min(k, |entries|) distinct indices, uniform without replacement."""
        if not self.entries:
            raise EmptyBuffer("cannot sample from an empty buffer")
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        n = len(self.entries)
        kk = min(k, n)
        return self._rng.choice(n, size=kk, replace=False)

    def mc_max_cos(self, g, subset) -> float:
        """Max cosine of g against the sampled entries.

        A subset maximum never exceeds the full-buffer maximum, so the
        score is a deterministic lower bound on the true alignment.
        """
        g = as_vector(g)
        if g.shape[0] != self.dim:
            raise DimensionMismatch(f"dim {g.shape[0]} vs buffer dim {self.dim}")
        if float(np.linalg.norm(g)) <= ZERO_NORM_TOL:
            raise ZeroVector("max-cosine undefined for a (near-)zero gradient")
        if not self.entries:
            raise EmptyBuffer("no entries to score against")
        best = -1.0
        for i in subset:
            try:
                best = max(best, cosine(g, self.entries[int(i)]))
            except ZeroVector:
                continue
        return best

    def max_cos_full(self, g) -> float:
        return self.mc_max_cos(g, range(len(self.entries)))

    def admit(self, g) -> str:
        """Admission policy: drop tiny gradients, reject near-duplicates
        (full scan against all entries), otherwise append with FIFO
        eviction at capacity."""
        g = as_vector(g)
        if g.shape[0] != self.dim:
            raise DimensionMismatch(f"dim {g.shape[0]} vs buffer dim {self.dim}")
        if float(np.linalg.norm(g)) <= self.tau_drop:
            return DROPPED
        if self.capacity == 0:
            return DROPPED
        for e in self.entries:
            try:
                if cosine(g, e) > self.tau_add:
                    return DUPLICATE
            except ZeroVector:
                continue
        evicted = False
        if len(self.entries) >= self.capacity:
            self.entries.pop(0)
            evicted = True
        self.entries.append(g.copy())
        if evicted:
            self._rebuild_basis()
        else:
            try:
                self.basis.insert(g, tol=self.basis_tol)
            except ZeroVector:
                pass
        return ADDED

    def _rebuild_basis(self) -> None:
        # keeps basis == span(entries) exact after an eviction
        self.basis = OrthoBasis(self.dim)
        for e in self.entries:
            try:
                self.basis.insert(e, tol=self.basis_tol)
            except ZeroVector:
                continue

    # --- snapshot serialization -------------------------------------
    # One record per entry: u64 little-endian element count, then the
    # float32 little-endian payload.

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            for e in self.entries:
                fh.write(struct.pack("<Q", e.shape[0]))
                fh.write(e.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, capacity: int = 200, tau_add: float = 0.99,
             tau_drop: float = 1e-8, rng_seed: int = 0) -> "GradBuffer":
        entries = []
        with open(path, "rb") as fh:
            while True:
                head = fh.read(8)
                if not head:
                    break
                (n,) = struct.unpack("<Q", head)
                raw = fh.read(int(n) * BYTES_PER_FLOAT32)
                entries.append(np.frombuffer(raw, dtype="<f4").astype(np.float64))
        if not entries:
            raise EmptyBuffer(f"no records in {path}")
        buf = cls(entries[0].shape[0], capacity=capacity, tau_add=tau_add,
                  tau_drop=tau_drop, rng_seed=rng_seed)
        buf.entries = entries
        buf._rebuild_basis()
        return buf
