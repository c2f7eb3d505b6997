# adamw_ema/optimizer.py
"""
AdamW in the library convention: the decay factor is the product eta_t * lam,
applied to the pre-update weight, and the schedule scales both the gradient
term and the decay term (lam itself is never scheduled).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adamw_ema.errors import ConfigError, NonFiniteError, TimescaleError

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("constant", "cosine-to-fraction", "cosine-to-zero")


# ---------- schedule ----------
@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "constant"
    final_fraction: float = 0.1
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind '{self.kind}' (expected one of {SCHEDULE_KINDS})")
        if not 0.0 <= self.final_fraction <= 1.0:
            raise ConfigError(f"final_fraction must lie in [0, 1], got {self.final_fraction}")
        if self.total_steps < 1:
            raise ConfigError(f"schedule horizon must be at least one step, got {self.total_steps}")


def schedule_eta(spec: ScheduleSpec, eta0: float, t: int) -> float:
    """Learning rate at schedule position t; positions past the horizon clamp to the final value."""
    if spec.kind == "constant":
        return eta0
    f = spec.final_fraction if spec.kind == "cosine-to-fraction" else 0.0
    frac = min(max(t, 0), spec.total_steps) / spec.total_steps
    return eta0 * (f + (1.0 - f) * (1.0 + math.cos(math.pi * frac)) / 2.0)


# ---------- hyperparameters ----------
@dataclass(frozen=True)
class HyperParams:
    eta0: float
    lam: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ConfigError(f"eta0 must be positive, got {self.eta0}")
        if self.lam < 0:
            raise ConfigError(f"weight decay must be non-negative, got {self.lam}")
        for name in ("beta1", "beta2"):
            beta = getattr(self, name)
            if not 0.0 <= beta < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {beta}")
        if self.eps < 0:
            raise ConfigError(f"eps must be non-negative, got {self.eps}")
        # schedules never exceed eta0, so checking the first step covers the run
        if self.eta0 * self.lam >= 1.0:
            raise TimescaleError(
                f"eta0*lam = {self.eta0 * self.lam:g} >= 1: timescale shorter than one step"
            )

    def eta_at(self, t: int) -> float:
        return schedule_eta(self.schedule, self.eta0, t)


def from_timescale(tau_iter: float, eta0: float) -> Dict[str, float]:
    """lam = 1/(eta0 * tau_iter); returns the `eta0`/`lam` fragment of HyperParams."""
    if not (tau_iter > 0 and eta0 > 0):
        raise ConfigError(f"tau_iter and eta0 must be positive, got {tau_iter} and {eta0}")
    lam = 1.0 / (eta0 * tau_iter)
    if eta0 * lam >= 1.0:
        raise TimescaleError(f"tau_iter = {tau_iter:g}: timescale shorter than one step")
    return {"eta0": eta0, "lam": lam}


def timescale_trace(hp: HyperParams) -> np.ndarray:
    """Effective per-step timescale 1/(eta_t * lam) for steps 1..T (inf where eta_t * lam is 0)."""
    rates = np.array([hp.eta_at(t - 1) * hp.lam for t in range(1, hp.schedule.total_steps + 1)])
    return np.divide(1.0, rates, out=np.full_like(rates, np.inf), where=rates > 0)


# ---------- state ----------
@dataclass(frozen=True)
class OptState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, w: np.ndarray) -> "OptState":
        return cls(np.zeros_like(w, dtype=np.float64), np.zeros_like(w, dtype=np.float64), 0)


@dataclass(frozen=True)
class ParamGroup:
    name: str
    params: Tuple[str, ...]
    apply_decay: bool = True
    lr_override: Optional[float] = None
    eps_override: Optional[float] = None

    def eta0(self, hp: HyperParams) -> float:
        return hp.eta0 if self.lr_override is None else self.lr_override

    def eps(self, hp: HyperParams) -> float:
        return hp.eps if self.eps_override is None else self.eps_override


def adamw_step(
    state: OptState,
    w: np.ndarray,
    g: np.ndarray,
    hp: HyperParams,
    eta: Optional[float] = None,
    apply_decay: bool = True,
    eps: Optional[float] = None,
    name: str = "param",
) -> Tuple[OptState, np.ndarray]:
    """
    One AdamW update. `eta` defaults to the schedule value at position
    state.t, so step t (counted from 1) uses eta at schedule position t-1.
    """
    t = state.t + 1
    if g.shape != w.shape:
        raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient for {name} at step {t}", param=name, step=t)
    lr = hp.eta_at(state.t) if eta is None else eta
    eps = hp.eps if eps is None else eps

    m = hp.beta1 * state.m + (1.0 - hp.beta1) * g
    v = hp.beta2 * state.v + (1.0 - hp.beta2) * g * g
    m_hat = m / (1.0 - hp.beta1 ** t)
    v_hat = v / (1.0 - hp.beta2 ** t)
    decay = 1.0 - lr * hp.lam if apply_decay else 1.0
    w_new = decay * w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptState(m, v, t), w_new


def ema_form_update(w, m_hat, v_hat, eta: float, lam: float, eps: float):
    """The same update written as ema_t = (1 - 1/tau) ema_{t-1} + (1/tau) q_t."""
    if lam <= 0:
        raise ConfigError("the EMA form needs a positive weight decay")
    inv_tau = eta * lam
    q = -(1.0 / lam) * m_hat / (np.sqrt(v_hat) + eps)
    return (1.0 - inv_tau) * w + inv_tau * q


# ---------- optimizer ----------
class AdamW:
    def __init__(self, groups: Sequence[ParamGroup], hp: HyperParams):
        self.groups = list(groups)
        self.hp = hp
        self.states: Dict[str, OptState] = {}
        seen: Dict[str, str] = {}
        for group in self.groups:
            for p in group.params:
                if p in seen:
                    raise ConfigError(f"parameter '{p}' is in both '{seen[p]}' and '{group.name}'")
                seen[p] = group.name

    @property
    def step_count(self) -> int:
        return max((s.t for s in self.states.values()), default=0)

    def group_eta(self, group: ParamGroup, position: int) -> float:
        return schedule_eta(self.hp.schedule, group.eta0(self.hp), position)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        out = dict(params)
        for group in self.groups:
            for p in group.params:
                state = self.states.get(p) or OptState.zeros_like(params[p])
                self.states[p], out[p] = adamw_step(
                    state, params[p], grads[p], self.hp,
                    eta=self.group_eta(group, state.t),
                    apply_decay=group.apply_decay,
                    eps=group.eps(self.hp),
                    name=p,
                )
        return out
