"""Device-independent weak string erasure: the round loop and its outputs.

Trits are stored as ``int8`` with ``BOT = -1``.  Rounds are 1-indexed in
every user-facing field (index sets, record positions); numpy arrays are
0-indexed internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .devices import AdversaryMemory, Delivery, DeviceStrategy
from .errors import InconsistentRoundError
from .params import WseParams
from .qcore import BOT, QubitBatch, RngStream, partial_trace

__all__ = [
    "WseParams",
    "RoundRecord",
    "WseTranscript",
    "AliceRounds",
    "chsh_outcome_bit",
    "compute_index_set",
    "alice_abort_decision",
    "bob_abort_decision",
    "sample_alice_rounds",
    "run_wse",
]

ENGINES = ("vector", "rounds")
ROUND_KEYS = ("T", "theta", "theta_bar", "x_raw", "y", "c", "x", "theta_hat", "x_hat")


def _trit(v) -> int | None:
    return None if v == BOT else int(v)


@dataclass(frozen=True)
class RoundRecord:
    T: int
    theta: int
    theta_bar: int
    x_raw: int
    y: int
    c: int
    x: int
    theta_hat: int
    x_hat: int

    def validate(self) -> None:
        """Raise :class:`InconsistentRoundError` if the fields contradict each other."""
        if self.T not in (0, 1) or self.theta not in (0, 1) or self.x_raw not in (0, 1):
            raise InconsistentRoundError(f"T, theta and x_raw must be bits: {self}")
        if self.T == 1:
            ok = (
                self.theta_bar in (0, 1)
                and self.y in (0, 1)
                and self.x == BOT
                and self.theta_hat == BOT
                and self.x_hat == BOT
                and self.c == int((self.x_raw ^ self.y) == self.theta * self.theta_bar)
            )
        else:
            ok = self.theta_bar == BOT and self.y == BOT and self.c == BOT and self.x == self.x_raw
        if not ok:
            raise InconsistentRoundError(f"inconsistent round: {self}")

    def to_dict(self) -> dict:
        return {k: _trit(getattr(self, k)) for k in ROUND_KEYS}


def chsh_outcome_bit(x_raw: int, y: int, theta: int, theta_bar: int, t: int) -> int:
    """Score of one round: BOT when not tested, else 1 iff ``x_raw ⊕ y == theta·theta_bar``."""
    if t == 0:
        if y != BOT or theta_bar != BOT:
            raise InconsistentRoundError("untested round cannot carry a test input or output")
        return BOT
    if t != 1:
        raise InconsistentRoundError(f"test flag must be 0 or 1, got {t}")
    if y not in (0, 1) or theta_bar not in (0, 1) or x_raw not in (0, 1) or theta not in (0, 1):
        raise InconsistentRoundError(
            f"tested round needs bits everywhere (x_raw={x_raw}, y={y}, theta={theta}, theta_bar={theta_bar})"
        )
    return int((x_raw ^ y) == theta * theta_bar)


def compute_index_set(theta: Sequence[int], theta_hat: Sequence[int], t: Sequence[int]) -> np.ndarray:
    """1-indexed rounds where Bob's basis matches Alice's on an untested round."""
    theta, theta_hat, t = (np.asarray(a) for a in (theta, theta_hat, t))
    if not theta.shape == theta_hat.shape == t.shape:
        raise ValueError(f"length mismatch: {theta.shape}, {theta_hat.shape}, {t.shape}")
    return np.flatnonzero((theta == theta_hat) & (t == 0)) + 1


def alice_abort_decision(omega: float, delta: float) -> bool:
    return omega < delta


def bob_abort_decision(n_tests: int, n: int, mu: float, eps: float) -> bool:
    return n_tests > mu * n + math.sqrt(n * math.log(1.0 / eps) / 2.0)


@dataclass(frozen=True)
class AliceRounds:
    """Alice-side columns of a run, before Bob's declarations."""

    T: np.ndarray
    theta: np.ndarray
    theta_bar: np.ndarray
    x_raw: np.ndarray
    y: np.ndarray
    c: np.ndarray
    x: np.ndarray

    @property
    def n(self) -> int:
        return len(self.T)

    @property
    def n_tests(self) -> int:
        return int(self.T.sum())

    @property
    def wins(self) -> int:
        return int(np.sum(self.c == 1))

    @property
    def omega(self) -> float:
        # No tested round: define the win fraction as 0 so Alice aborts.
        return self.wins / self.n_tests if self.n_tests else 0.0


def _finish_alice(T, theta, theta_bar, x_raw, y) -> AliceRounds:
    c = np.where(T == 1, ((x_raw ^ y) == theta * theta_bar).astype(np.int8), BOT).astype(np.int8)
    x = np.where(T == 1, BOT, x_raw).astype(np.int8)
    cols = [np.asarray(a, dtype=np.int8) for a in (T, theta, theta_bar, x_raw, y, c, x)]
    for a in cols:
        a.setflags(write=False)
    return AliceRounds(*cols)


def sample_alice_rounds(params: WseParams, strategy: DeviceStrategy, rng: RngStream):
    """Vectorised sampling of Alice's side from exact Born tables.

    Returns the Alice columns and the batch of qubits delivered to Bob
    (untested rounds), each conditioned on its round's basis and outcome.
    """
    n = params.n
    tab = strategy.tables
    T = (rng.random(n) < params.mu).astype(np.int8)
    theta = rng.bits(n)
    tb_draw = rng.bits(n)
    ux = rng.random(n)
    uy = rng.random(n)
    x_raw = (ux < tab.p_x1[theta]).astype(np.int8)
    theta_bar = np.where(T == 1, tb_draw, BOT).astype(np.int8)
    y_all = (uy < tab.p_y1[theta, x_raw, tb_draw]).astype(np.int8)
    y = np.where(T == 1, y_all, BOT).astype(np.int8)
    rounds = _finish_alice(T, theta, theta_bar, x_raw, y)
    idx = np.flatnonzero(T == 0)
    batch = QubitBatch(tab.cond_b[theta[idx], x_raw[idx]], idx + 1)
    return rounds, batch


def _vector_engine(params, strategy, alice_rng, bob_rng, memory):
    alice, batch = sample_alice_rounds(params, strategy, alice_rng)
    records = None
    if strategy.side_record:
        records = [alice.x_raw[: r - 1] for r in batch.rounds]
    th, xh = strategy.bob.act_batch(batch, records, bob_rng, memory)
    return alice, batch.rounds, th, xh


def _rounds_engine(params, strategy, alice_rng, bob_rng, memory):
    n = params.n
    cols = {k: np.empty(n, dtype=np.int8) for k in ("T", "theta", "theta_bar", "x_raw", "y")}
    log: list[int] = []
    delivered, th_list, xh_list = [], [], []
    for i in range(1, n + 1):
        t = int(alice_rng.random() < params.mu)
        theta = alice_rng.bit()
        theta_bar = alice_rng.bit() if t else BOT
        state, record = strategy.prepare(i, log)
        x_raw, post = strategy.main_measure(theta, state, alice_rng)
        log.append(x_raw)
        qubit_b = partial_trace(post, keep=1)
        y = BOT
        if t:
            y = strategy.test_measure(theta_bar, qubit_b, alice_rng)
        else:
            a, b = strategy.bob_act(Delivery(i, qubit_b, record), bob_rng, memory)
            delivered.append(i)
            th_list.append(a)
            xh_list.append(b)
        for k, v in zip(("T", "theta", "theta_bar", "x_raw", "y"), (t, theta, theta_bar, x_raw, y)):
            cols[k][i - 1] = v
    alice = _finish_alice(cols["T"], cols["theta"], cols["theta_bar"], cols["x_raw"], cols["y"])
    return (
        alice,
        np.asarray(delivered, dtype=np.int64),
        np.asarray(th_list, dtype=np.int8),
        np.asarray(xh_list, dtype=np.int8),
    )


@dataclass(frozen=True, eq=False)
class WseTranscript:
    """Outcome of one run.

    ``index_set`` holds 1-indexed round numbers; ``index_set_compact``
    holds the 1-indexed positions of the same rounds inside ``x_out``
    (Alice's string with the tested rounds erased).  When Alice aborts no
    bases are announced, ``index_set`` is empty and ``x_out`` is uniformly
    random.  When Bob aborts, ``x_i`` is uniformly random.
    """

    params: WseParams
    strategy: str
    T: np.ndarray
    theta: np.ndarray
    theta_bar: np.ndarray
    x_raw: np.ndarray
    y: np.ndarray
    c: np.ndarray
    x: np.ndarray
    theta_hat: np.ndarray
    x_hat: np.ndarray
    omega: float
    n_tests: int
    alice_aborted: bool
    bob_aborted: bool
    x_out: np.ndarray
    index_set: np.ndarray
    index_set_compact: np.ndarray
    x_i: np.ndarray
    bob_guess: np.ndarray | None
    max_stored_qubits: int
    quantum_memory_used: bool
    side_information: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.T)

    @property
    def k(self) -> int:
        return self.n - self.n_tests

    @property
    def aborted(self) -> bool:
        return self.alice_aborted or self.bob_aborted

    @property
    def omega_prime(self) -> int:
        return self.n_tests

    @property
    def rounds(self) -> list[RoundRecord]:
        cols = [getattr(self, k) for k in ROUND_KEYS]
        return [RoundRecord(*(int(c[i]) for c in cols)) for i in range(self.n)]

    @property
    def alice_x_i(self) -> np.ndarray:
        """Alice's bits at the index set (for checking Bob's substring)."""
        return self.x[self.index_set - 1]

    @property
    def match_rate(self) -> float | None:
        if self.aborted or len(self.index_set) == 0:
            return None
        return float(np.mean(self.x_i == self.alice_x_i))

    @property
    def guess_correct(self) -> bool:
        """Bob's guess equals Alice's whole string (tested rounds as BOT); never true after Alice aborts."""
        if self.bob_guess is None or self.alice_aborted:
            return False
        return bool(np.array_equal(self.bob_guess, self.x))

    def check_consistency(self) -> None:
        """Vectorised form of the per-round rules plus the run-level identities."""
        T = self.T
        test, untested = T == 1, T == 0
        bad = np.zeros(self.n, dtype=bool)
        bad |= ~np.isin(T, (0, 1)) | ~np.isin(self.theta, (0, 1)) | ~np.isin(self.x_raw, (0, 1))
        bad |= test & ~np.isin(self.theta_bar, (0, 1))
        bad |= test & ~np.isin(self.y, (0, 1))
        bad |= test & ((self.x != BOT) | (self.theta_hat != BOT) | (self.x_hat != BOT))
        win = ((self.x_raw ^ self.y) == self.theta * self.theta_bar).astype(np.int8)
        bad |= test & (self.c != win)
        bad |= untested & ((self.theta_bar != BOT) | (self.y != BOT) | (self.c != BOT))
        bad |= untested & (self.x != self.x_raw)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InconsistentRoundError(f"round {i + 1} violates the transcript rules: {self.rounds[i]}")
        if self.k != int(untested.sum()) or len(self.x_out) != self.k:
            raise InconsistentRoundError("output length does not match the untested round count")
        if not self.alice_aborted:
            expected = compute_index_set(self.theta, self.theta_hat, T)
            if not np.array_equal(expected, self.index_set):
                raise InconsistentRoundError("index set does not match the basis-agreement rule")

    def summary(self) -> dict:
        return {
            "alice_aborted": self.alice_aborted,
            "bob_aborted": self.bob_aborted,
            "omega": self.omega,
            "omega_prime": self.n_tests,
            "k": self.k,
            "index_set_size": int(len(self.index_set)),
            "match_rate": self.match_rate,
        }

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "strategy": self.strategy,
            "omega": self.omega,
            "omega_prime": self.n_tests,
            "k": self.k,
            "alice_aborted": self.alice_aborted,
            "bob_aborted": self.bob_aborted,
            "x_out": self.x_out.tolist(),
            "index_set": self.index_set.tolist(),
            "index_set_compact": self.index_set_compact.tolist(),
            "x_i": self.x_i.tolist(),
            "max_stored_qubits": self.max_stored_qubits,
            "rounds": [r.to_dict() for r in self.rounds],
        }


def _spread(n: int, rounds: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.full(n, BOT, dtype=np.int8)
    out[rounds - 1] = values
    out.setflags(write=False)
    return out


def run_wse(
    params: WseParams,
    strategy: DeviceStrategy,
    rng: RngStream,
    engine: str = "vector",
    check_calibration: bool = True,
) -> WseTranscript:
    """Run the erasure protocol once.

    Parameters
    ----------
    engine : {"vector", "rounds"}
        ``"vector"`` samples Alice's side from exact Born tables and hands
        Bob a batch of conditional qubits; ``"rounds"`` steps through the
        devices one round at a time with explicit state updates.  Both
        produce the same distribution but consume randomness differently.

    Notes
    -----
    Randomness is split by purpose: ``rng.child(0)`` drives Alice's side,
    ``rng.child(1)`` Bob's actions, ``rng.child(2)`` his final guess and
    ``rng.child(3)`` the random outputs that replace an aborting party's
    string.  Bob's randomness therefore never influences Alice's view.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; choose from {ENGINES}")
    if check_calibration:
        strategy.ensure_calibrated()
    memory: AdversaryMemory = strategy.new_memory()
    alice_rng, bob_rng = rng.child(0), rng.child(1)
    run = _vector_engine if engine == "vector" else _rounds_engine
    alice, delivered, th, xh = run(params, strategy, alice_rng, bob_rng, memory)
    n = params.n
    theta_hat = _spread(n, delivered, th)
    x_hat = _spread(n, delivered, xh)

    omega = alice.omega
    alice_aborted = alice_abort_decision(omega, params.delta)
    bob_aborted = bob_abort_decision(alice.n_tests, n, params.mu, params.eps)

    out_rng = rng.child(3)
    untested = np.flatnonzero(alice.T == 0)
    if alice_aborted:
        x_out = out_rng.bits(len(untested))
        index_set = np.empty(0, dtype=np.int64)
        guess = None
    else:
        x_out = alice.x_raw[untested].copy()
        index_set = compute_index_set(alice.theta, theta_hat, alice.T)
        # Bob only learns the bases after the waiting time, i.e. after both abort checks.
        guess = strategy.bob_guess(alice.theta, memory, rng.child(2))
    compact = np.searchsorted(untested, index_set - 1) + 1
    x_i = out_rng.bits(len(index_set)) if bob_aborted else x_hat[index_set - 1].copy()
    side = strategy.bob.side_information(n, memory)
    memory.discard_all()

    return WseTranscript(
        params=params,
        strategy=strategy.name,
        T=alice.T,
        theta=alice.theta,
        theta_bar=alice.theta_bar,
        x_raw=alice.x_raw,
        y=alice.y,
        c=alice.c,
        x=alice.x,
        theta_hat=theta_hat,
        x_hat=x_hat,
        omega=omega,
        n_tests=alice.n_tests,
        alice_aborted=alice_aborted,
        bob_aborted=bob_aborted,
        x_out=x_out,
        index_set=index_set,
        index_set_compact=compact.astype(np.int64),
        x_i=x_i,
        bob_guess=guess,
        max_stored_qubits=memory.max_qubits_held,
        quantum_memory_used=memory.quantum_touched,
        side_information=side,
    )
