"""Device strategies: the source, Alice's two measurement boxes, and Bob.

A :class:`DeviceStrategy` bundles the state the source emits, the bases
Alice's (untrusted) boxes implement and a :class:`BobBehavior` deciding
what happens to the systems routed to Bob.  The protocol engines in
:mod:`diwse.wse` and :mod:`diwse.pv` only talk to this interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import CalibrationError, DomainError, MemoryCapacityError
from .qcore import (
    BOT,
    MAIN_BASES,
    P_OPT,
    TEST_BASES,
    TEST_OUTCOME_FLIP,
    DensityOperator,
    MeasurementBasis,
    QubitBatch,
    RngStream,
    chsh_cell_win_probabilities,
    make_epr,
    maximally_mixed,
    measure,
    partial_trace,
    werner,
)

CALIBRATION_TOL = 1e-9
CALIBRATION_TARGET = 0.8535533906


@dataclass(frozen=True)
class Delivery:
    """One system handed to Bob: round index (1-based), his qubit, and any classical side record."""

    round: int
    qubit: DensityOperator
    record: np.ndarray | None = None


class AdversaryMemory:
    """Bob's storage with an audited qubit budget."""

    def __init__(self, capacity_qubits: int = 0):
        if capacity_qubits < 0:
            raise ValueError("capacity cannot be negative")
        self.capacity_qubits = capacity_qubits
        self._qubits: dict[int, DensityOperator] = {}
        self.classical: dict = {}
        self.max_qubits_held = 0
        self.quantum_touched = False

    @property
    def qubits_held(self) -> int:
        return len(self._qubits)

    def store(self, key: int, qubit: DensityOperator) -> None:
        if qubit.dim != 2:
            raise MemoryCapacityError(f"only single qubits can be stored, got dim {qubit.dim}")
        if key not in self._qubits and len(self._qubits) + 1 > self.capacity_qubits:
            raise MemoryCapacityError(
                f"storing round {key} would exceed the {self.capacity_qubits}-qubit memory"
            )
        self.quantum_touched = True
        self._qubits[key] = qubit
        self.max_qubits_held = max(self.max_qubits_held, len(self._qubits))

    def take(self, key: int) -> DensityOperator:
        self.quantum_touched = True
        return self._qubits.pop(key)

    def discard_all(self) -> None:
        if self._qubits:
            self.quantum_touched = True
        self._qubits.clear()

    def stored_keys(self) -> list[int]:
        return sorted(self._qubits)


class BobBehavior:
    """What a (possibly dishonest) receiver does with the systems routed to him.

    Subclasses implement :meth:`act` for one delivery.  :meth:`act_batch`
    may be overridden with a vectorised version; both must append to the
    same memory layout.
    """

    name = "bob"
    memory_capacity = 0
    side_record_aware = False

    def new_memory(self) -> AdversaryMemory:
        mem = AdversaryMemory(self.memory_capacity)
        mem.classical.update(rounds=[], theta_hat=[], x_hat=[], side=[])
        return mem

    def act(self, delivery: Delivery, rng: RngStream, memory: AdversaryMemory) -> tuple[int, int]:
        raise NotImplementedError

    def act_batch(self, batch: QubitBatch, records, rng: RngStream, memory: AdversaryMemory):
        th, xh = [], []
        for j in range(len(batch)):
            rec = None if records is None else records[j]
            a, b = self.act(Delivery(int(batch.rounds[j]), batch[j], rec), rng, memory)
            th.append(a)
            xh.append(b)
        return np.asarray(th, dtype=np.int8), np.asarray(xh, dtype=np.int8)

    def guess(self, thetas: np.ndarray, memory: AdversaryMemory, rng: RngStream) -> np.ndarray:
        """Guess of Alice's post-processed string over all rounds (BOT where Bob saw nothing)."""
        raise NotImplementedError

    def side_information(self, n: int, memory: AdversaryMemory) -> np.ndarray:
        """Classical register K per round (BOT on rounds Bob never received)."""
        out = np.full(n, BOT, dtype=np.int64)
        rounds = np.asarray(memory.classical["rounds"], dtype=np.int64)
        out[rounds - 1] = np.asarray(memory.classical["side"], dtype=np.int64)
        return out


_BASIS_MODES = ("random", "standard", "hadamard", "none")
_GUESS_RULES = ("outcome", "basis-match", "coin")


class ImmediateMeasureBob(BobBehavior):
    """Measures every received qubit on arrival and keeps only classical data.

    Parameters
    ----------
    basis_mode : {"random", "standard", "hadamard", "none"}
        Basis used on arrival.  ``"none"`` never looks at the qubit.
    guess_rule : {"outcome", "basis-match", "coin"}
        How the final guess is formed: the raw outcome, the outcome only
        when the measured basis equals the announced one (coin otherwise),
        or a fresh coin.
    side : {"outcome", "basis-outcome", "coin"}
        What is recorded as the classical register K.
    """

    def __init__(self, name: str, basis_mode: str, guess_rule: str, side: str = "outcome"):
        if basis_mode not in _BASIS_MODES:
            raise ValueError(f"unknown basis mode {basis_mode!r}")
        if guess_rule not in _GUESS_RULES:
            raise ValueError(f"unknown guess rule {guess_rule!r}")
        if side not in ("outcome", "basis-outcome", "coin"):
            raise ValueError(f"unknown side register {side!r}")
        self.name = name
        self.basis_mode = basis_mode
        self.guess_rule = guess_rule
        self.side = side

    def _bases(self, m: int, rng: RngStream) -> np.ndarray:
        if self.basis_mode in ("random", "none"):
            return rng.bits(m)
        return np.full(m, 0 if self.basis_mode == "standard" else 1, dtype=np.int8)

    def _record(self, memory, rounds, kb, kx, coins):
        if self.side == "outcome":
            side = kx
        elif self.side == "basis-outcome":
            side = 2 * np.asarray(kb, dtype=np.int64) + kx
        else:
            side = coins
        c = memory.classical
        c["rounds"].extend(int(r) for r in rounds)
        c["theta_hat"].extend(int(b) for b in kb)
        c["x_hat"].extend(int(x) for x in kx)
        c["side"].extend(int(s) for s in np.atleast_1d(side))

    def act(self, delivery, rng, memory):
        kb = int(self._bases(1, rng)[0])
        if self.basis_mode == "none":
            kx = rng.bit()
        else:
            kx, _ = measure(delivery.qubit, MAIN_BASES[kb], 0, rng)
        coin = rng.bit()
        self._record(memory, [delivery.round], [kb], np.array([kx]), np.array([coin]))
        return kb, kx

    def act_batch(self, batch, records, rng, memory):
        m = len(batch)
        kb = self._bases(m, rng)
        if self.basis_mode == "none":
            kx = rng.bits(m)
        else:
            kx = batch.measure(MAIN_BASES, kb, rng)
        coins = rng.bits(m)
        self._record(memory, batch.rounds, kb, kx, coins)
        return kb, kx

    def guess(self, thetas, memory, rng):
        thetas = np.asarray(thetas)
        out = np.full(len(thetas), BOT, dtype=np.int8)
        c = memory.classical
        rounds = np.asarray(c["rounds"], dtype=np.int64)
        kb = np.asarray(c["theta_hat"], dtype=np.int8)
        kx = np.asarray(c["x_hat"], dtype=np.int8)
        coins = rng.bits(len(rounds))
        if self.guess_rule == "outcome":
            g = kx
        elif self.guess_rule == "coin":
            g = coins
        else:
            g = np.where(kb == thetas[rounds - 1], kx, coins).astype(np.int8)
        out[rounds - 1] = g
        return out


class SequentialAttackBob(BobBehavior):
    """Receiver colluding with a source that leaks earlier raw outcomes.

    Each delivery carries the record of all earlier main-device outcomes.
    Bob keeps only the qubit of the latest round routed to him, so after
    the last delivery he knows every earlier outcome from the record and
    can measure the single stored qubit in the announced basis.
    """

    name = "sequential-attack"
    memory_capacity = 1
    side_record_aware = True

    def act(self, delivery, rng, memory):
        if delivery.record is None:
            raise ValueError("the attack needs the source's side record")
        memory.discard_all()
        memory.store(delivery.round, delivery.qubit)
        c = memory.classical
        c["record"] = delivery.record
        c["rounds"].append(delivery.round)
        # Declared values are arbitrary for a cheating receiver.
        th, xh = rng.bit(), rng.bit()
        c["theta_hat"].append(th)
        c["x_hat"].append(xh)
        c["side"].append(0)
        return th, xh

    def guess(self, thetas, memory, rng):
        thetas = np.asarray(thetas)
        out = np.full(len(thetas), BOT, dtype=np.int8)
        c = memory.classical
        rounds = np.asarray(c["rounds"], dtype=np.int64)
        if len(rounds) == 0:
            return out
        known = np.asarray(c["record"], dtype=np.int8)
        earlier = rounds[:-1]
        out[earlier - 1] = known[earlier - 1]
        last = int(rounds[-1])
        qubit = memory.take(last)
        out[last - 1], _ = measure(qubit, MAIN_BASES[int(thetas[last - 1])], 0, rng)
        return out


@dataclass(frozen=True)
class BornTables:
    """Exact per-round probabilities used by the vectorised engines.

    ``p_x1[θ]`` is P(X'=1 | Θ=θ); ``cond_b[θ, x]`` is Bob's qubit given
    (θ, x); ``p_y1[θ, x, θ̄]`` is P(Y=1 | θ, x, θ̄) at the test device.
    """

    p_x1: np.ndarray
    cond_b: np.ndarray
    p_y1: np.ndarray


@dataclass(frozen=True, eq=False)
class DeviceStrategy:
    """Source state, Alice's box bases and Bob's behaviour.

    ``side_record`` makes the source append the record of all earlier raw
    main outcomes to the system sent towards Bob.  Honest parties and the
    switch ignore it.
    """

    name: str
    source: DensityOperator
    bob: BobBehavior
    main_bases: tuple = MAIN_BASES
    test_bases: tuple = TEST_BASES
    flip_test_outcome: bool = TEST_OUTCOME_FLIP
    side_record: bool = False
    params: dict = field(default_factory=dict)

    def prepare(self, round_index: int, log: Sequence[int]):
        """State for round ``round_index`` and the optional side record."""
        record = np.asarray(log[: round_index - 1], dtype=np.int8) if self.side_record else None
        return self.source, record

    def main_measure(self, theta: int, state: DensityOperator, rng: RngStream):
        """Measure Alice's half; return the raw bit and the post-measurement joint state."""
        return measure(state, self.main_bases[theta], 0, rng)

    def test_measure(self, theta_bar: int, qubit: DensityOperator, rng: RngStream) -> int:
        if theta_bar == BOT:
            return BOT
        y, _ = measure(qubit, self.test_bases[theta_bar], 0, rng)
        return y ^ 1 if self.flip_test_outcome else y

    def new_memory(self) -> AdversaryMemory:
        return self.bob.new_memory()

    def bob_act(self, delivery: Delivery, rng: RngStream, memory: AdversaryMemory):
        return self.bob.act(delivery, rng, memory)

    def bob_guess(self, thetas, memory: AdversaryMemory, rng: RngStream) -> np.ndarray:
        return self.bob.guess(thetas, memory, rng)

    def with_test_bases(self, test_bases) -> "DeviceStrategy":
        return replace(self, test_bases=tuple(test_bases))

    @cached_property
    def tables(self) -> BornTables:
        m = self.source.matrix
        p_x1 = np.empty(2)
        cond_b = np.empty((2, 2, 2, 2), dtype=complex)
        p_y1 = np.empty((2, 2, 2))
        for theta, basis in enumerate(self.main_bases):
            for x, proj in enumerate(basis.projectors):
                op = np.kron(proj, np.eye(2))
                post = op @ m @ op
                px = float(np.trace(post).real)
                if x == 1:
                    p_x1[theta] = min(max(px, 0.0), 1.0)
                if px > 1e-14:
                    red = partial_trace(DensityOperator(post / px, check=False), keep=1).matrix
                else:
                    red = maximally_mixed(2).matrix
                cond_b[theta, x] = red
                for tb, tbasis in enumerate(self.test_bases):
                    py = float(np.trace(tbasis.projectors[1] @ red).real)
                    py = min(max(py, 0.0), 1.0)
                    p_y1[theta, x, tb] = 1.0 - py if self.flip_test_outcome else py
        for a in (p_x1, cond_b, p_y1):
            a.setflags(write=False)
        return BornTables(p_x1, cond_b, p_y1)

    @cached_property
    def calibration(self) -> "CalibrationReport":
        return calibrate(self, raise_on_failure=False)

    def ensure_calibrated(self) -> None:
        """Raise :class:`CalibrationError` unless the boxes pass :func:`calibrate`."""
        if not self.calibration.passed:
            calibrate(self)

    def exact_win_probability(self) -> float:
        """CHSH win probability of this source with these boxes."""
        cells = chsh_cell_win_probabilities(
            self.source, self.main_bases, self.test_bases, self.flip_test_outcome
        )
        return float(cells.mean())


def _honest_bob() -> ImmediateMeasureBob:
    return ImmediateMeasureBob("honest", "random", "basis-match", side="basis-outcome")


def honest_strategy() -> DeviceStrategy:
    """Fresh |Φ+> every round, protocol bases, Bob measures in a random main basis."""
    return DeviceStrategy("honest", make_epr(), _honest_bob())


def depolarized_strategy(visibility: float) -> DeviceStrategy:
    """Honest devices fed a Werner state ``v Φ+ + (1-v) I/4``."""
    v = float(visibility)
    if not 0.0 <= v <= 1.0 or math.isnan(v):
        raise DomainError(f"visibility must lie in [0, 1], got {visibility}")
    return DeviceStrategy("depolarized", werner(v), _honest_bob(), params={"visibility": v})


def sequential_source_attack() -> DeviceStrategy:
    """Source leaks earlier raw outcomes to Bob, who keeps one qubit at a time."""
    return DeviceStrategy("sequential-source-attack", make_epr(), SequentialAttackBob(), side_record=True)


CLASSICAL_POLICIES = {
    # name: (basis on arrival, guess rule, classical register)
    "standard": ("standard", "outcome", "outcome"),
    "random-guess": ("none", "coin", "coin"),
    "theta-dependent": ("random", "basis-match", "basis-outcome"),
}


def classical_bob(policy: str = "standard") -> DeviceStrategy:
    """Honest devices with a memoryless Bob following a named classical policy.

    ``"standard"`` measures in the standard basis and guesses its outcome,
    ``"random-guess"`` ignores the qubit, ``"theta-dependent"`` measures in
    a random basis and keeps the outcome only when it matches the announced
    basis.
    """
    try:
        mode, rule, side = CLASSICAL_POLICIES[policy]
    except KeyError:
        raise ValueError(f"unknown classical policy {policy!r}; choose from {sorted(CLASSICAL_POLICIES)}") from None
    bob = ImmediateMeasureBob(f"classical-{policy}", mode, rule, side)
    return DeviceStrategy(f"classical-{policy}", make_epr(), bob, params={"policy": policy})


def build_strategy(name: str, **params) -> DeviceStrategy:
    """Build a strategy from a name and keyword parameters (used by the CLI)."""
    if name == "honest":
        _no_params(name, params)
        return honest_strategy()
    if name == "depolarized":
        extra = set(params) - {"visibility"}
        if extra or "visibility" not in params:
            raise ValueError("depolarized takes exactly one parameter: visibility")
        return depolarized_strategy(params["visibility"])
    if name == "sequential-source-attack":
        _no_params(name, params)
        return sequential_source_attack()
    if name == "classical":
        extra = set(params) - {"policy"}
        if extra:
            raise ValueError(f"classical takes only 'policy', got {sorted(extra)}")
        return classical_bob(params.get("policy", "standard"))
    raise ValueError(f"unknown strategy {name!r}")


def _no_params(name, params):
    if params:
        raise ValueError(f"strategy {name!r} takes no parameters, got {sorted(params)}")


@dataclass(frozen=True)
class CalibrationReport:
    value: float
    cells: tuple
    deviation: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "cells": [list(r) for r in self.cells],
            "deviation": self.deviation,
            "passed": self.passed,
        }


def calibrate(strategy: DeviceStrategy | None = None, raise_on_failure: bool = True) -> CalibrationReport:
    """Check that the strategy's measurement boxes win the CHSH game optimally on |Φ+>.

    Every (Θ, Θ̄) cell must win with probability cos²(π/8); a failure
    names the worst cell.  Only the boxes are checked, never the source,
    so noisy sources calibrate like honest ones.
    """
    main = MAIN_BASES if strategy is None else strategy.main_bases
    test = TEST_BASES if strategy is None else strategy.test_bases
    flip = TEST_OUTCOME_FLIP if strategy is None else strategy.flip_test_outcome
    cells = chsh_cell_win_probabilities(make_epr(), main, test, flip)
    per_cell = math.cos(math.pi / 8) ** 2
    dev = np.abs(cells - per_cell)
    worst = tuple(int(i) for i in np.unravel_index(int(np.argmax(dev)), dev.shape))
    value = float(cells.mean())
    deviation = max(float(dev.max()), abs(value - CALIBRATION_TARGET))
    passed = deviation <= CALIBRATION_TOL
    report = CalibrationReport(value, tuple(tuple(float(c) for c in r) for r in cells), deviation, passed)
    if not passed and raise_on_failure:
        raise CalibrationError(
            f"CHSH cell (theta={worst[0]}, theta_bar={worst[1]}) wins with probability "
            f"{cells[worst]:.10f}, expected {per_cell:.10f}; average {value:.10f} vs {P_OPT:.10f}",
            cell=worst,
        )
    return report


def swapped_test_bases() -> tuple[MeasurementBasis, MeasurementBasis]:
    """Test bases with their labels exchanged (a deliberate miscalibration)."""
    return TEST_BASES[1], TEST_BASES[0]
