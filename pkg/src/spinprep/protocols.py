"""Field-optimization protocols.

* GTO updates every slice of the full schedule at once.
* STO optimizes slice by slice, each slice against the overlap at its own end time.
* FGTO starts from a single slice and repeatedly doubles the time resolution,
  seeding each stage with the previous stage's fields.
"""
from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .control import (
    LossKind,
    NumericalError,
    OptimizerState,
    adam_step,
    evaluate_loss,
    schedule_gradient,
)
from .dynamics import ControlSchedule, evolve, evolve_unitary, fidelity
from .hilbert import ModelSpec

SWAP = np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex)
SQRT_SWAP = np.array(
    [
        [1, 0, 0, 0],
        [0, (1 + 1j) / 2, (1 - 1j) / 2, 0],
        [0, (1 - 1j) / 2, (1 + 1j) / 2, 0],
        [0, 0, 0, 1],
    ],
    dtype=complex,
)
# control on site 1 (leftmost factor)
CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)
GATES = {"swap": SWAP, "sqrt_swap": SQRT_SWAP, "cnot": CNOT}


class Protocol(str, Enum):
    STO = "sto"
    GTO = "gto"
    FGTO = "fgto"


@dataclass(frozen=True)
class ProtocolConfig:
    """One optimization run.

    ``epochs`` is the per-stage budget for FGTO, the total budget for GTO and
    the per-slice budget for STO; see :func:`fair_configs` for compute-matched
    settings.
    """

    protocol: Protocol = Protocol.FGTO
    total_time: float = 6.0
    n_slices: int = 16
    epochs: int = 200
    seed: int = 0
    init_scale: float = 1.0
    loss: LossKind = LossKind.NLF
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: str = "random"
    phase_invariant: bool = False

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.n_slices < 1:
            raise ValueError("n_slices must be positive")
        if self.total_time <= 0:
            raise ValueError("total_time must be positive")
        if self.init not in ("random", "sto"):
            raise ValueError(f"init must be 'random' or 'sto', got {self.init!r}")
        if self.protocol is Protocol.FGTO and self.n_slices & (self.n_slices - 1):
            raise ValueError(f"FGTO needs a power-of-two slice count, got {self.n_slices}")

    @property
    def stages(self) -> int:
        """Number of fine-graining stages after the first (log2 of n_slices)."""
        return int(self.n_slices).bit_length() - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = self.protocol.value
        d["loss"] = self.loss.value
        return d

    def hash(self, *extra) -> str:
        payload = json.dumps([self.to_dict(), *extra], sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def optimizer(self, shape) -> OptimizerState:
        return OptimizerState.fresh(shape, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class RunResult:
    fidelity: float
    loss: float
    history: np.ndarray
    schedule: ControlSchedule
    wall_clock: float
    config_hash: str
    seed: int
    stage_ends: list = field(default_factory=list)
    # FGTO only: fidelity of the best schedule seen up to the end of each stage,
    # which is what a run stopped at K = 2**stage would report
    stage_fidelities: list = field(default_factory=list)


def fair_configs(base: ProtocolConfig) -> dict[Protocol, ProtocolConfig]:
    """STO/GTO/FGTO configs sharing FGTO's total epoch budget.

    ``base.epochs`` is read as the FGTO per-stage budget.
    """
    total = base.epochs * (base.stages + 1)
    return {
        Protocol.FGTO: replace(base, protocol=Protocol.FGTO),
        Protocol.GTO: replace(base, protocol=Protocol.GTO, epochs=total),
        Protocol.STO: replace(base, protocol=Protocol.STO, epochs=max(total // base.n_slices, 1)),
    }


def init_fields(n_slices: int, n_sites: int, seed: int, scale: float = 1.0) -> np.ndarray:
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_slices, n_sites, 3)) * scale


def fine_grain(schedule: ControlSchedule) -> ControlSchedule:
    """Double the slice count at fixed total time by repeating every slice."""
    return schedule.with_fields(np.repeat(schedule.fields, 2, axis=0))


def refine_to(schedule: ControlSchedule, n_slices: int) -> ControlSchedule:
    while schedule.n_slices < n_slices:
        schedule = fine_grain(schedule)
    return schedule


def _descend(schedule: ControlSchedule, objective, config: ProtocolConfig, epochs: int, offset: int = 0):
    """Adam on ``objective(schedule) -> (loss, grad)``.

    Returns (best schedule, best loss, per-epoch losses). The parameters left
    after the last update are also scored, so ``epochs=0`` scores the start.
    """
    state = config.optimizer(schedule.fields.shape)
    params = np.array(schedule.fields)
    history = np.empty(epochs)
    best_loss, best_params = np.inf, params
    for epoch in range(epochs):
        try:
            loss, grad = objective(schedule.with_fields(params))
        except (NumericalError, ValueError) as exc:
            raise NumericalError(f"epoch {offset + epoch}: {exc}") from exc
        history[epoch] = loss
        if loss < best_loss:
            best_loss, best_params = loss, params
        params, state = adam_step(params, grad, state)
    final_schedule = schedule.with_fields(params)
    final_loss = objective(final_schedule)[0]
    if final_loss < best_loss:
        return final_schedule, final_loss, history
    return schedule.with_fields(best_params), best_loss, history


def _state_result(config, spec, schedule, target, psi0, history, started, stage_ends=()):
    psi = evolve(schedule, spec, psi0).final_state
    f = fidelity(target, psi)
    loss = evaluate_loss(schedule, spec, psi0, target, config.loss)
    return RunResult(
        fidelity=f,
        loss=loss,
        history=np.asarray(history, dtype=float),
        schedule=schedule,
        wall_clock=time.perf_counter() - started,
        config_hash=config.hash(spec.to_dict()),
        seed=config.seed,
        stage_ends=list(stage_ends),
    )


def _state_objective(spec, psi0, target, kind):
    return lambda s: schedule_gradient(s, spec, psi0, target, kind)


def _check_state_loss(config):
    if config.loss.is_gate:
        raise ValueError("state preparation needs a state loss (nlf or one_minus_f)")


def run_gto(config: ProtocolConfig, spec: ModelSpec, target, psi0) -> RunResult:
    _check_state_loss(config)
    started = time.perf_counter()
    if config.init == "sto":
        per_slice = max(config.epochs // config.n_slices, 1)
        sto = run_sto(replace(config, protocol=Protocol.STO, init="random", epochs=per_slice), spec, target, psi0)
        start = sto.schedule
    else:
        fields = init_fields(config.n_slices, spec.n_sites, config.seed, config.init_scale)
        start = ControlSchedule(config.total_time, fields)
    best, _, history = _descend(start, _state_objective(spec, psi0, target, config.loss), config, config.epochs)
    return _state_result(config, spec, best, target, psi0, history, started)


def run_sto(config: ProtocolConfig, spec: ModelSpec, target, psi0) -> RunResult:
    """Greedy slice-by-slice optimization; each slice minimizes the loss of the
    state at its own end time with earlier slices frozen."""
    _check_state_loss(config)
    started = time.perf_counter()
    fields = init_fields(config.n_slices, spec.n_sites, config.seed, config.init_scale)
    tau = config.total_time / config.n_slices
    psi = np.asarray(psi0, dtype=complex)
    histories, stage_ends = [], []
    for k in range(config.n_slices):
        piece = ControlSchedule(tau, fields[k : k + 1])
        objective = _state_objective(spec, psi, target, config.loss)
        best, _, hist = _descend(piece, objective, config, config.epochs, offset=k * config.epochs)
        fields[k] = best.fields[0]
        psi = evolve(best, spec, psi).final_state
        histories.append(hist)
        stage_ends.append(sum(len(h) for h in histories))
    schedule = ControlSchedule(config.total_time, fields)
    return _state_result(config, spec, schedule, target, psi0, np.concatenate(histories), started, stage_ends)


def run_fgto(config: ProtocolConfig, spec: ModelSpec, target, psi0) -> RunResult:
    """Optimize at K=1, then alternate fine-graining and optimization up to
    ``config.n_slices``. The returned schedule is the lowest-loss one seen over
    all stages, expressed at the final resolution."""
    _check_state_loss(config)
    started = time.perf_counter()
    objective = _state_objective(spec, psi0, target, config.loss)
    schedule = ControlSchedule(config.total_time, init_fields(1, spec.n_sites, config.seed, config.init_scale))
    best, best_loss = schedule, np.inf
    histories, stage_ends, stage_f = [], [], []
    for stage in range(config.stages + 1):
        if stage:
            schedule = fine_grain(schedule)
        schedule, loss, hist = _descend(schedule, objective, config, config.epochs, offset=stage * config.epochs)
        if loss < best_loss:
            best, best_loss = schedule, loss
            best_f = fidelity(target, evolve(best, spec, psi0).final_state)
        histories.append(hist)
        stage_ends.append(sum(len(h) for h in histories))
        stage_f.append(best_f)
    best = refine_to(best, config.n_slices)
    result = _state_result(config, spec, best, target, psi0, np.concatenate(histories), started, stage_ends)
    result.stage_fidelities = stage_f
    return result


RUNNERS = {Protocol.STO: run_sto, Protocol.GTO: run_gto, Protocol.FGTO: run_fgto}


def run_protocol(config: ProtocolConfig, spec: ModelSpec, target, psi0) -> RunResult:
    return RUNNERS[config.protocol](config, spec, target, psi0)


def gate_fidelity(g: np.ndarray, target: np.ndarray) -> float:
    return float(min(abs(np.trace(target.conj().T @ g)) / g.shape[0], 1.0))


def synthesize_gate(config: ProtocolConfig, spec: ModelSpec, target_gate) -> RunResult:
    """GTO on the gate distance ||G(T) - G_tar||."""
    target_gate = np.asarray(target_gate, dtype=complex)
    if target_gate.shape != (spec.dim, spec.dim):
        raise ValueError(f"target gate must be {spec.dim}x{spec.dim}")
    if np.max(np.abs(target_gate.conj().T @ target_gate - np.eye(spec.dim))) > 1e-9:
        raise ValueError("target gate is not unitary")
    config = replace(config, loss=LossKind.GATE_FROBENIUS)
    started = time.perf_counter()
    start = ControlSchedule(
        config.total_time, init_fields(config.n_slices, spec.n_sites, config.seed, config.init_scale)
    )

    def objective(s):
        return schedule_gradient(s, spec, None, target_gate, config.loss, config.phase_invariant)

    best, loss, history = _descend(start, objective, config, config.epochs)
    g = evolve_unitary(best, spec)
    return RunResult(
        fidelity=gate_fidelity(g, target_gate),
        loss=loss,
        history=history,
        schedule=best,
        wall_clock=time.perf_counter() - started,
        config_hash=config.hash(spec.to_dict(), target_gate.round(12).tolist().__repr__()),
        seed=config.seed,
    )


def locate_knee(times, losses, threshold: float) -> float | None:
    """Smallest time on the grid whose loss, and every later loss, is within threshold."""
    times = np.asarray(times, dtype=float)
    losses = np.asarray(losses, dtype=float)
    order = np.argsort(times)
    times, losses = times[order], losses[order]
    below = losses <= threshold
    if not below[-1]:
        return None
    idx = len(below) - 1
    while idx > 0 and below[idx - 1]:
        idx -= 1
    return float(times[idx])


def fit_exponential_scaling(points) -> tuple[float, float]:
    """Least-squares fit of ln(1 - f) = ln(mu) + nu N over (N, f) pairs."""
    usable = []
    for n, f in points:
        if f >= 1:
            warnings.warn(f"dropping point N={n} with f={f} >= 1 from the scaling fit", stacklevel=2)
            continue
        usable.append((float(n), float(f)))
    if len(usable) < 2:
        raise ValueError("need at least two points with f < 1")
    ns = np.array([p[0] for p in usable])
    y = np.log1p(-np.array([p[1] for p in usable]))
    design = np.column_stack([np.ones_like(ns), ns])
    (log_mu, nu), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(np.exp(log_mu)), float(nu)
