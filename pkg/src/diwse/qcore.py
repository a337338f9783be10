"""Exact one- and two-qubit state engine.

Density operators are plain ``numpy`` complex matrices wrapped in a small
validated type.  Everything here is exact dense linear algebra; the largest
matrix in the package is 4x4.

Trits (values in {0, 1, ⊥}) are encoded as small integers with ``BOT = -1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateProbabilityError,
    DimensionMismatchError,
    InvalidStateError,
)

BOT = -1

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10
DEGENERATE_TOL = 1e-14

# Result of the calibration check in ``devices.calibrate``: with |Φ+> and the
# basis vectors exactly as listed below no relabelling of the test device's
# outcome bit is needed.
TEST_OUTCOME_FLIP = False

P_OPT = 0.5 + 1.0 / (2.0 * math.sqrt(2.0))


class DensityOperator:
    """Validated density matrix of dimension 2 or 4.

    The matrix is copied and frozen on construction.  Pass ``check=False``
    only for matrices produced by operations that are already known to be
    valid (used on hot paths).
    """

    __slots__ = ("_m",)

    def __init__(self, matrix, *, check: bool = True):
        m = np.array(matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] not in (2, 4):
            raise DimensionMismatchError(f"expected a 2x2 or 4x4 matrix, got shape {m.shape}")
        if check:
            _validate(m)
        m.setflags(write=False)
        self._m = m

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @property
    def dim(self) -> int:
        return self._m.shape[0]

    @property
    def n_qubits(self) -> int:
        return 1 if self.dim == 2 else 2

    def trace(self) -> float:
        return float(np.trace(self._m).real)

    def purity(self) -> float:
        return float(np.trace(self._m @ self._m).real)

    def mix(self, other: "DensityOperator", weight: float) -> "DensityOperator":
        """Return ``weight * self + (1 - weight) * other``."""
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"mixing weight must lie in [0, 1], got {weight}")
        if other.dim != self.dim:
            raise DimensionMismatchError("cannot mix operators of different dimension")
        return DensityOperator(weight * self._m + (1.0 - weight) * other._m)

    def allclose(self, other: "DensityOperator", atol: float = 1e-12) -> bool:
        return self.dim == other.dim and bool(np.allclose(self._m, other._m, atol=atol, rtol=0))

    def __repr__(self):
        return f"DensityOperator(dim={self.dim}, purity={self.purity():.6g})"


def _validate(m: np.ndarray) -> None:
    herm_err = np.max(np.abs(m - m.conj().T))
    if herm_err > HERMITIAN_TOL:
        raise InvalidStateError(f"matrix is not Hermitian (max deviation {herm_err:.3g})")
    tr = np.trace(m)
    if abs(tr - 1.0) > TRACE_TOL:
        raise InvalidStateError(f"trace is {tr.real:.15g}, expected 1")
    lam_min = np.linalg.eigvalsh((m + m.conj().T) / 2)[0]
    if lam_min < -PSD_TOL:
        raise InvalidStateError(f"matrix is not positive semidefinite (eigenvalue {lam_min:.3g})")


def is_valid_density(state: DensityOperator) -> bool:
    try:
        _validate(state.matrix)
    except InvalidStateError:
        return False
    return True


@dataclass(frozen=True, eq=False)
class MeasurementBasis:
    """Two orthogonal rank-1 projectors on a qubit, indexed by outcome bit."""

    label: str
    projectors: tuple

    def __post_init__(self):
        if len(self.projectors) != 2:
            raise ValueError("a qubit basis needs exactly two projectors")
        projs = []
        for p in self.projectors:
            p = np.array(p, dtype=complex)
            if p.shape != (2, 2):
                raise DimensionMismatchError("projectors must be 2x2")
            if np.max(np.abs(p - p.conj().T)) > HERMITIAN_TOL:
                raise ValueError(f"{self.label}: projector is not Hermitian")
            if np.max(np.abs(p @ p - p)) > HERMITIAN_TOL:
                raise ValueError(f"{self.label}: projector is not idempotent")
            p.setflags(write=False)
            projs.append(p)
        if np.max(np.abs(projs[0] + projs[1] - np.eye(2))) > HERMITIAN_TOL:
            raise ValueError(f"{self.label}: projectors do not sum to the identity")
        object.__setattr__(self, "projectors", tuple(projs))

    @classmethod
    def from_vectors(cls, label: str, v0, v1) -> "MeasurementBasis":
        projs = []
        for v in (v0, v1):
            v = np.asarray(v, dtype=complex)
            v = v / np.linalg.norm(v)
            projs.append(np.outer(v, v.conj()))
        return cls(label, tuple(projs))

    def relabeled(self) -> "MeasurementBasis":
        """Same basis with the two outcome labels exchanged."""
        return MeasurementBasis(self.label + "~", (self.projectors[1], self.projectors[0]))

    def __repr__(self):
        return f"MeasurementBasis({self.label!r})"


_c1, _s1 = math.cos(math.pi / 8), math.sin(math.pi / 8)
_c3, _s3 = math.cos(3 * math.pi / 8), math.sin(3 * math.pi / 8)
_r2 = 1 / math.sqrt(2)

MAIN_STANDARD = MeasurementBasis.from_vectors("MAIN_STANDARD", [1, 0], [0, 1])
MAIN_HADAMARD = MeasurementBasis.from_vectors("MAIN_HADAMARD", [_r2, _r2], [_r2, -_r2])
TEST_THETA0 = MeasurementBasis.from_vectors("TEST_THETA0", [_c1, _s1], [_c3, -_s3])
TEST_THETA1 = MeasurementBasis.from_vectors("TEST_THETA1", [_c1, -_s1], [_c3, _s3])

MAIN_BASES = (MAIN_STANDARD, MAIN_HADAMARD)
TEST_BASES = (TEST_THETA0, TEST_THETA1)
ALL_BASES = MAIN_BASES + TEST_BASES


class RngStream:
    """Seeded random stream addressed by ``(seed, path)``.

    Two streams with equal seed and path produce identical draws.  Child
    streams extend the path, so independent runs can be derived without
    depending on execution order.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, *index: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(index))

    def random(self, size=None):
        return self._gen.random(size)

    def bit(self) -> int:
        return int(self._gen.integers(2))

    def bits(self, size: int) -> np.ndarray:
        return self._gen.integers(0, 2, size=size, dtype=np.int8)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def ket(*amplitudes) -> np.ndarray:
    v = np.asarray(amplitudes, dtype=complex)
    return v / np.linalg.norm(v)


def pure(vector) -> DensityOperator:
    v = np.asarray(vector, dtype=complex)
    v = v / np.linalg.norm(v)
    return DensityOperator(np.outer(v, v.conj()))


def make_epr() -> DensityOperator:
    """|Φ+> = (|00> + |11>)/√2 as a density operator."""
    return pure([_r2, 0, 0, _r2])


def maximally_mixed(dim: int = 2) -> DensityOperator:
    return DensityOperator(np.eye(dim) / dim)


def werner(visibility: float) -> DensityOperator:
    """``v Φ+ + (1 - v) I/4``."""
    return make_epr().mix(maximally_mixed(4), visibility)


def tensor(a: DensityOperator, b: DensityOperator) -> DensityOperator:
    if a.dim != 2 or b.dim != 2:
        raise DimensionMismatchError("tensor products are limited to two qubits")
    return DensityOperator(np.kron(a.matrix, b.matrix))


def partial_trace(state: DensityOperator, keep: int) -> DensityOperator:
    """Reduced state of qubit ``keep`` (0 = first, 1 = second)."""
    if state.dim != 4:
        raise DimensionMismatchError(f"partial trace needs a 2-qubit state, got dim {state.dim}")
    if keep not in (0, 1):
        raise ValueError(f"keep must be 0 or 1, got {keep}")
    r = state.matrix.reshape(2, 2, 2, 2)
    red = np.einsum("ijkj->ik", r) if keep == 0 else np.einsum("jijk->ik", r)
    return DensityOperator(red, check=False)


def _embed(proj: np.ndarray, subsystem: int, n_qubits: int) -> np.ndarray:
    if n_qubits == 1:
        if subsystem != 0:
            raise ValueError(f"subsystem {subsystem} out of range for one qubit")
        return proj
    if subsystem == 0:
        return np.kron(proj, np.eye(2))
    if subsystem == 1:
        return np.kron(np.eye(2), proj)
    raise ValueError(f"subsystem {subsystem} out of range for two qubits")


def outcome_probabilities(state: DensityOperator, basis: MeasurementBasis, subsystem: int = 0) -> np.ndarray:
    """Born-rule probabilities of outcomes 0 and 1."""
    m = state.matrix
    probs = np.array(
        [np.trace(_embed(p, subsystem, state.n_qubits) @ m).real for p in basis.projectors]
    )
    return np.clip(probs, 0.0, 1.0)


def measure(state: DensityOperator, basis: MeasurementBasis, subsystem: int, rng: RngStream):
    """Projectively measure one qubit; return ``(outcome, post_state)``."""
    m = state.matrix
    ops = [_embed(p, subsystem, state.n_qubits) for p in basis.projectors]
    p0 = max(np.trace(ops[0] @ m).real, 0.0)
    p1 = max(np.trace(ops[1] @ m).real, 0.0)
    if p0 < DEGENERATE_TOL and p1 < DEGENERATE_TOL:
        raise DegenerateProbabilityError(
            f"both outcome probabilities vanish in basis {basis.label} (p0={p0:.3g}, p1={p1:.3g})"
        )
    outcome = int(rng.random() * (p0 + p1) >= p0)
    proj = ops[outcome]
    post = proj @ m @ proj
    post = post / (p1 if outcome else p0)
    post = (post + post.conj().T) / 2
    return outcome, DensityOperator(post, check=False)


def outcome_distribution(state: DensityOperator, basis_a: MeasurementBasis, basis_b: MeasurementBasis) -> np.ndarray:
    """Joint table ``p[a, b]`` for measuring qubit 0 in ``basis_a`` and qubit 1 in ``basis_b``."""
    if state.dim != 4:
        raise DimensionMismatchError("outcome_distribution needs a 2-qubit state")
    m = state.matrix
    table = np.empty((2, 2))
    for a, pa in enumerate(basis_a.projectors):
        for b, pb in enumerate(basis_b.projectors):
            table[a, b] = np.trace(np.kron(pa, pb) @ m).real
    return np.clip(table, 0.0, 1.0)


def chsh_cell_win_probabilities(
    state: DensityOperator,
    main_bases: Sequence[MeasurementBasis] = MAIN_BASES,
    test_bases: Sequence[MeasurementBasis] = TEST_BASES,
    flip_test_outcome: bool = TEST_OUTCOME_FLIP,
) -> np.ndarray:
    """Win probability of the CHSH predicate ``x ⊕ y = θ·θ̄`` for every (θ, θ̄)."""
    cells = np.empty((2, 2))
    for theta in (0, 1):
        for theta_bar in (0, 1):
            table = outcome_distribution(state, main_bases[theta], test_bases[theta_bar])
            win = 0.0
            for x in (0, 1):
                for y in (0, 1):
                    y_out = y ^ 1 if flip_test_outcome else y
                    if x ^ y_out == theta * theta_bar:
                        win += table[x, y]
            cells[theta, theta_bar] = win
    return cells


def chsh_win_probability(
    state: DensityOperator,
    main_bases: Sequence[MeasurementBasis] = MAIN_BASES,
    test_bases: Sequence[MeasurementBasis] = TEST_BASES,
) -> float:
    """Average CHSH win probability over uniform (θ, θ̄) with the protocol bases."""
    return float(chsh_cell_win_probabilities(state, main_bases, test_bases).mean())


class QubitBatch:
    """Stack of single-qubit density matrices, shape ``(m, 2, 2)``.

    Used for the systems delivered to Bob or the prover when whole runs
    are processed at once.  Entries are trusted (they come from validated
    operators or convex combinations of them).
    """

    __slots__ = ("states", "rounds")

    def __init__(self, states: np.ndarray, rounds: np.ndarray):
        states = np.asarray(states, dtype=complex)
        if states.ndim != 3 or states.shape[1:] != (2, 2):
            raise DimensionMismatchError(f"expected shape (m, 2, 2), got {states.shape}")
        self.states = states
        self.rounds = np.asarray(rounds, dtype=np.int64)

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, j: int) -> DensityOperator:
        return DensityOperator(self.states[j], check=False)

    @classmethod
    def from_operators(cls, ops: Sequence[DensityOperator], rounds) -> "QubitBatch":
        arr = np.array([o.matrix for o in ops], dtype=complex).reshape(-1, 2, 2)
        return cls(arr, rounds)

    def prob_one(self, bases: Sequence[MeasurementBasis], choice: np.ndarray) -> np.ndarray:
        """Probability of outcome 1 for each qubit measured in ``bases[choice[j]]``."""
        proj1 = np.stack([b.projectors[1] for b in bases])[np.asarray(choice, dtype=np.int64)]
        p = np.einsum("mij,mji->m", proj1, self.states).real
        return np.clip(p, 0.0, 1.0)

    def measure(self, bases: Sequence[MeasurementBasis], choice: np.ndarray, rng: RngStream) -> np.ndarray:
        p1 = self.prob_one(bases, choice)
        return (rng.random(len(self)) < p1).astype(np.int8)
