"""Position verification on a line with unit signal speed.

Verifier V1 sits left of the claimed position and runs the same source,
switch and test device as in the erasure protocol; V2 sits to the right
and sends the main bases so that both arrive at the claimed position at
the same time.  All rounds share one geometry and are timed as a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .devices import DeviceStrategy
from .errors import GeometryError, QuantumPayloadError
from .params import WseParams
from .qcore import BOT, MAIN_BASES, DensityOperator, QubitBatch, RngStream
from .wse import AliceRounds, alice_abort_decision, sample_alice_rounds

TIME_TOL = 1e-9


@dataclass(frozen=True)
class PvScenario:
    x_v1: float
    x_p: float
    x_v2: float
    delta_t: float
    params: WseParams

    def __post_init__(self):
        if not self.x_v1 < self.x_p < self.x_v2:
            raise GeometryError(
                f"positions must satisfy x_v1 < x_p < x_v2, got {self.x_v1}, {self.x_p}, {self.x_v2}"
            )
        if not self.delta_t > 0 or math.isinf(self.delta_t):
            raise GeometryError(f"timing window must be positive and finite, got {self.delta_t}")

    @property
    def v1_send(self) -> float:
        return 0.0

    @property
    def v2_send(self) -> float:
        """V2 fires so that the bases reach the claimed position together with the qubits."""
        return (self.x_p - self.x_v1) - (self.x_v2 - self.x_p)

    @property
    def arrival(self) -> float:
        return self.x_p - self.x_v1

    def light_cone_note(self) -> str:
        need = 2.0 * max(self.x_p - self.x_v1, self.x_v2 - self.x_p)
        return (
            f"an honest reply needs a round trip of {need:g} to the farther verifier "
            f"but the window is {self.delta_t:g}"
        )


@dataclass(frozen=True)
class Timing:
    v1_reply: float
    v2_reply: float
    v1_elapsed: float
    v2_elapsed: float
    ok: bool


def _timing(s: PvScenario, ready_v1: float, ready_v2: float, pos_v1: float, pos_v2: float) -> Timing:
    """Replies leave ``pos_v1``/``pos_v2`` at the ready times and travel to V1/V2."""
    r1 = ready_v1 + (pos_v1 - s.x_v1)
    r2 = ready_v2 + (s.x_v2 - pos_v2)
    e1 = r1 - s.v1_send
    e2 = r2 - s.v2_send
    ok = e1 <= s.delta_t + TIME_TOL and e2 <= s.delta_t + TIME_TOL
    return Timing(r1, r2, e1, e2, ok)


def prover_timing(s: PvScenario, prover_position: float | None = None) -> Timing:
    """Timing of an honest prover standing at ``prover_position`` (default: the claimed spot)."""
    x = s.x_p if prover_position is None else prover_position
    if not s.x_v1 <= x <= s.x_v2:
        raise GeometryError(f"prover at {x} lies outside the verifiers' segment")
    got_qubits = s.v1_send + (x - s.x_v1)
    got_bases = s.v2_send + (s.x_v2 - x)
    ready = max(got_qubits, got_bases)
    return _timing(s, ready, ready, x, x)


def timing_feasible(s: PvScenario) -> bool:
    """Whether a prover at the claimed position can answer both verifiers within the window."""
    return prover_timing(s).ok


@dataclass(frozen=True, eq=False)
class PvTranscript:
    alice: AliceRounds
    answers_v1: np.ndarray
    answers_v2: np.ndarray
    timing: Timing
    aborted: bool
    answers_ok: bool
    per_round_correct: np.ndarray = field(repr=False)

    @property
    def timing_ok(self) -> bool:
        return self.timing.ok

    @property
    def accepted(self) -> bool:
        return (not self.aborted) and self.timing_ok and self.answers_ok

    @property
    def n_untested(self) -> int:
        return int(np.sum(self.alice.T == 0))

    @property
    def omega(self) -> float:
        return self.alice.omega

    def summary(self) -> dict:
        return {
            "aborted": self.aborted,
            "timing_ok": self.timing_ok,
            "answers_ok": self.answers_ok,
            "accepted": self.accepted,
            "omega": self.omega,
            "n_untested": self.n_untested,
            "v1_elapsed": self.timing.v1_elapsed,
            "v2_elapsed": self.timing.v2_elapsed,
        }

    def to_dict(self) -> dict:
        a = self.alice

        def t(v):
            return None if v == BOT else int(v)

        rounds = [
            {
                "T": int(a.T[i]),
                "theta": int(a.theta[i]),
                "theta_bar": t(a.theta_bar[i]),
                "x_raw": int(a.x_raw[i]),
                "y": t(a.y[i]),
                "c": t(a.c[i]),
                "x": t(a.x[i]),
                "answer_v1": t(self.answers_v1[i]),
                "answer_v2": t(self.answers_v2[i]),
            }
            for i in range(a.n)
        ]
        return {**self.summary(), "v1_reply": self.timing.v1_reply, "v2_reply": self.timing.v2_reply, "rounds": rounds}


def _check_answers(alice: AliceRounds, y: np.ndarray, z: np.ndarray):
    untested = alice.T == 0
    correct = (y == alice.x) & (z == alice.x)
    return bool(np.all(correct[untested])), correct


def run_pv_honest(
    scenario: PvScenario,
    strategy: DeviceStrategy,
    rng: RngStream,
    prover_position: float | None = None,
) -> PvTranscript:
    """Honest prover measuring each received qubit in the announced main basis.

    ``prover_position`` moves the prover away from the claimed spot (the
    verifiers keep their schedule); this is how a misplaced prover is
    modelled.
    """
    if not timing_feasible(scenario):
        raise GeometryError("infeasible timing: " + scenario.light_cone_note())
    strategy.ensure_calibrated()
    alice, batch = sample_alice_rounds(scenario.params, strategy, rng.child(0))
    idx = batch.rounds - 1
    answers = np.full(alice.n, BOT, dtype=np.int8)
    answers[idx] = batch.measure(MAIN_BASES, alice.theta[idx], rng.child(1))
    aborted = alice_abort_decision(alice.omega, scenario.params.delta)
    ok, correct = _check_answers(alice, answers, answers)
    return PvTranscript(alice, answers, answers.copy(), prover_timing(scenario, prover_position), aborted, ok, correct)


def check_classical(payload: Any, path: str = "message") -> None:
    """Raise :class:`QuantumPayloadError` if ``payload`` contains a quantum system."""
    if isinstance(payload, (DensityOperator, QubitBatch)):
        raise QuantumPayloadError(f"{path} carries a quantum system ({type(payload).__name__})")
    if isinstance(payload, np.ndarray):
        if np.iscomplexobj(payload):
            raise QuantumPayloadError(f"{path} carries complex amplitudes; only classical data may cross")
        if payload.dtype == object:
            for i, v in enumerate(payload.ravel()):
                check_classical(v, f"{path}[{i}]")
        return
    if isinstance(payload, complex):
        raise QuantumPayloadError(f"{path} carries a complex amplitude")
    if isinstance(payload, dict):
        for k, v in payload.items():
            check_classical(k, f"{path}.key")
            check_classical(v, f"{path}[{k!r}]")
    elif isinstance(payload, (list, tuple, set, frozenset)):
        for i, v in enumerate(payload):
            check_classical(v, f"{path}[{i}]")
    elif not isinstance(payload, (str, bytes, int, float, bool, np.generic, type(None))):
        raise QuantumPayloadError(f"{path} has unsupported type {type(payload).__name__}")


class CheatPolicy(Protocol):
    """Processors of the two colluding cheaters.

    ``encode_m1`` sees the qubits (as a batch over untested rounds) and
    ``encode_m2`` sees all main bases; each returns ``(message, local)``.
    ``decode_m1``/``decode_m2`` combine local data with the partner's
    message into an answer string over all rounds (BOT allowed).
    """

    name: str

    def encode_m1(self, batch: QubitBatch, n: int, rng: RngStream) -> tuple[Any, Any]: ...
    def encode_m2(self, theta: np.ndarray, rng: RngStream) -> tuple[Any, Any]: ...
    def decode_m1(self, local: Any, message: Any, rng: RngStream) -> np.ndarray: ...
    def decode_m2(self, local: Any, message: Any, rng: RngStream) -> np.ndarray: ...


class MeasureImmediately:
    """M1 measures every qubit in one fixed main basis and both cheaters answer the outcome."""

    def __init__(self, basis: int = 0):
        if basis not in (0, 1):
            raise ValueError("basis must be 0 or 1")
        self.basis = basis
        self.name = f"measure-immediately-{basis}"

    def encode_m1(self, batch, n, rng):
        out = np.full(n, BOT, dtype=np.int8)
        out[batch.rounds - 1] = batch.measure(MAIN_BASES, np.full(len(batch), self.basis), rng)
        return out, out

    def encode_m2(self, theta, rng):
        return np.asarray(theta, dtype=np.int8), None

    def decode_m1(self, local, message, rng):
        return local

    def decode_m2(self, local, message, rng):
        return np.asarray(message, dtype=np.int8)


class RandomGuess:
    """Cheaters ignore everything and answer shared coin flips."""

    name = "random-guess"

    def encode_m1(self, batch, n, rng):
        out = np.full(n, BOT, dtype=np.int8)
        out[batch.rounds - 1] = rng.bits(len(batch))
        return out, out

    def encode_m2(self, theta, rng):
        return None, None

    def decode_m1(self, local, message, rng):
        return local

    def decode_m2(self, local, message, rng):
        return np.asarray(message, dtype=np.int8)


class ForwardQubits:
    """Tries to send the qubits themselves to M2; always rejected."""

    name = "forward-qubits"

    def encode_m1(self, batch, n, rng):
        return batch, None

    def encode_m2(self, theta, rng):
        return np.asarray(theta, dtype=np.int8), None

    def decode_m1(self, local, message, rng):
        return np.zeros(0, dtype=np.int8)

    def decode_m2(self, local, message, rng):
        return np.zeros(0, dtype=np.int8)


CHEAT_POLICIES = {
    "measure-immediately": MeasureImmediately,
    "random-guess": RandomGuess,
    "forward-qubits": ForwardQubits,
}


def cheat_policy(name: str, **params) -> CheatPolicy:
    try:
        cls = CHEAT_POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown cheat policy {name!r}; choose from {sorted(CHEAT_POLICIES)}") from None
    return cls(**params)


@dataclass(frozen=True)
class CheatScenario:
    x_m1: float
    x_m2: float
    policy: CheatPolicy
    d: int = 1

    def validate(self, s: PvScenario) -> None:
        if not s.x_v1 < self.x_m1 < s.x_p < self.x_m2 < s.x_v2:
            raise GeometryError(
                f"cheaters must sit at x_v1 < x_m1 < x_p < x_m2 < x_v2, got {self.x_m1}, {self.x_m2}"
            )


def cheater_timing(s: PvScenario, c: CheatScenario) -> Timing:
    got_qubits = s.v1_send + (c.x_m1 - s.x_v1)
    got_bases = s.v2_send + (s.x_v2 - c.x_m2)
    gap = c.x_m2 - c.x_m1
    ready_m1 = max(got_qubits, got_bases + gap)
    ready_m2 = max(got_bases, got_qubits + gap)
    return _timing(s, ready_m1, ready_m2, c.x_m1, c.x_m2)


def run_pv_cheat(scenario: PvScenario, cheat: CheatScenario, strategy: DeviceStrategy, rng: RngStream) -> PvTranscript:
    """Two cheaters flanking the claimed position, one classical message each way."""
    cheat.validate(scenario)
    strategy.ensure_calibrated()
    alice, batch = sample_alice_rounds(scenario.params, strategy, rng.child(0))
    pol = cheat.policy
    msg1, local1 = pol.encode_m1(batch, alice.n, rng.child(1))
    msg2, local2 = pol.encode_m2(alice.theta, rng.child(2))
    check_classical(msg1, "M1 -> M2 message")
    check_classical(msg2, "M2 -> M1 message")
    y = np.asarray(pol.decode_m1(local1, msg2, rng.child(3)), dtype=np.int8)
    z = np.asarray(pol.decode_m2(local2, msg1, rng.child(4)), dtype=np.int8)
    if y.shape != (alice.n,) or z.shape != (alice.n,):
        raise ValueError(f"answers must cover all {alice.n} rounds")
    aborted = alice_abort_decision(alice.omega, scenario.params.delta)
    ok, correct = _check_answers(alice, y, z)
    return PvTranscript(alice, y, z, cheater_timing(scenario, cheat), aborted, ok, correct)
