# adamw_ema/transfer.py
"""
Hyperparameter transfer arithmetic: dataset-size rule, the two width rules
(muP-direct and timescale-fixed) and the exact equivalence map between
settings for scale-invariant networks.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from adamw_ema.ema import iterations_per_epoch, timescale_of
from adamw_ema.errors import ConfigError, TimescaleError
from adamw_ema.nets import InitSpec
from adamw_ema.optimizer import HyperParams, ScheduleSpec

logger = logging.getLogger(__name__)

WIDTH_RULES = ("direct", "timescale-fixed")


@dataclass(frozen=True)
class BaseRun:
    eta_base: float
    lam_base: float
    eps_base: float = 1e-8
    sigma_base: float = 1.0
    N_base: int = 2000
    B: int = 100
    fan_in_base: int = 32

    def __post_init__(self):
        for name in ("eta_base", "lam_base", "eps_base", "sigma_base", "N_base", "B", "fan_in_base"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.eta_base * self.lam_base >= 1.0:
            raise TimescaleError(f"eta_base*lam_base = {self.eta_base * self.lam_base:g} >= 1")

    @property
    def tau_iter(self) -> float:
        return 1.0 / (self.eta_base * self.lam_base)

    @property
    def tau_epoch(self) -> float:
        return timescale_of(self.eta_base, self.lam_base, self.N_base, self.B).tau_epoch


@dataclass(frozen=True)
class ScaleMap:
    """How a target setting relates to a base run."""
    c: float = 1.0        # equivalence constant: sigma/sigma' = eta/eta' = lam'/lam = eps'/eps
    s: float = 1.0        # width factor fan_in / fan_in_base
    N_ratio: float = 1.0  # dataset growth N_new / N_base

    def __post_init__(self):
        for name in ("c", "s", "N_ratio"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def for_target(
        cls,
        base: BaseRun,
        c: float = 1.0,
        s: Optional[float] = None,
        fan_in: Optional[int] = None,
        N_new: Optional[int] = None,
    ) -> "ScaleMap":
        """Width given either as s or as the target hidden fan_in."""
        if s is not None and fan_in is not None:
            raise ConfigError("give the width change as s or as fan_in, not both")
        if fan_in is not None:
            if not fan_in > 0:
                raise ConfigError(f"fan_in must be positive, got {fan_in}")
            s = fan_in / base.fan_in_base
        return cls(c=c, s=1.0 if s is None else s, N_ratio=1.0 if N_new is None else N_new / base.N_base)

    @classmethod
    def between(cls, base: BaseRun, other: BaseRun, rel: float = 1e-9) -> "ScaleMap":
        """Recover the map from two runs; the four equivalence ratios must agree on one c."""
        ratios = {
            "sigma": base.sigma_base / other.sigma_base,
            "eta": base.eta_base / other.eta_base,
            "lam": other.lam_base / base.lam_base,
            "eps": other.eps_base / base.eps_base,
        }
        c = ratios["eta"]
        off = {k: v for k, v in ratios.items() if not math.isclose(v, c, rel_tol=rel)}
        if off:
            detail = ", ".join(f"{k} gives {v:g}" for k, v in off.items())
            raise ConfigError(f"runs are not equivalent: eta gives c={c:g} but {detail}")
        return cls(c=c, s=other.fan_in_base / base.fan_in_base, N_ratio=other.N_base / base.N_base)


@dataclass(frozen=True)
class WidthTransfer:
    rule: str
    s: float
    eta: float
    lam: float
    tau_iter: float
    timescale_preserving: bool


# ---------- dataset size ----------
def scale_for_dataset(base: BaseRun, N_new: int, tau_epoch_target: float) -> float:
    """lam = 1 / (eta * M * tau_epoch) with M = N_new / B."""
    if not tau_epoch_target > 0:
        raise ConfigError(f"tau_epoch target must be positive, got {tau_epoch_target}")
    M = iterations_per_epoch(N_new, base.B)
    lam = 1.0 / (base.eta_base * M * tau_epoch_target)
    if base.eta_base * lam >= 1.0:
        raise TimescaleError(
            f"tau_epoch = {tau_epoch_target:g} is infeasible for N={N_new}, B={base.B}: "
            f"eta*lam must stay below 1, which needs tau_epoch > {base.B / N_new:g}"
        )
    return lam


# ---------- width ----------
def scale_for_width_direct(base: BaseRun, s: float) -> WidthTransfer:
    """eta = eta_base / s with lam fixed; the implied timescale grows by s."""
    if not s > 0:
        raise ConfigError(f"width factor must be positive, got {s}")
    return WidthTransfer("direct", s, base.eta_base / s, base.lam_base, s * base.tau_iter, False)


def scale_for_width_timescale_fixed(base: BaseRun, s: float) -> WidthTransfer:
    """eta = eta_base / s and lam = s * lam_base, leaving tau_iter unchanged."""
    if not s > 0:
        raise ConfigError(f"width factor must be positive, got {s}")
    return WidthTransfer("timescale-fixed", s, base.eta_base / s, s * base.lam_base, base.tau_iter, True)


def scale_for_width(base: BaseRun, s: float, rule: str) -> WidthTransfer:
    if rule == "direct":
        return scale_for_width_direct(base, s)
    if rule == "timescale-fixed":
        return scale_for_width_timescale_fixed(base, s)
    raise ConfigError(f"unknown width rule '{rule}' (expected one of {WIDTH_RULES})")


def scale_width(widths: Sequence[int], s: float) -> Tuple[int, ...]:
    """Hidden widths scaled by s; the output width stays fixed."""
    hidden = [max(1, int(round(w * s))) for w in widths[:-1]]
    return tuple(hidden) + (int(widths[-1]),)


# ---------- equivalence map ----------
def map_hyperparams(hp: HyperParams, init: InitSpec, c: float, scale_eps: bool = True) -> Tuple[HyperParams, InitSpec]:
    """eta' = eta/c, lam' = c*lam, eps' = c*eps, sigma' = sigma/c; eta*lam and eta/sigma are unchanged."""
    if not c > 0:
        raise ConfigError(f"equivalence constant must be positive, got {c}")
    if not scale_eps:
        logger.warning("epsilon kept fixed under a c=%g map; trajectories are no longer exactly equivalent", c)
    hp_c = replace(hp, eta0=hp.eta0 / c, lam=hp.lam * c, eps=hp.eps * c if scale_eps else hp.eps)
    if init.sigma is None:
        init_c = replace(init, eta0=hp_c.eta0)
    else:
        init_c = replace(init, eta0=hp_c.eta0, sigma=init.sigma / c)
    return hp_c, init_c


def theorem1_map(
    base: BaseRun,
    c: Union[float, ScaleMap],
    schedule: Optional[ScheduleSpec] = None,
    seed: int = 0,
) -> Tuple[HyperParams, InitSpec]:
    """Equivalent setting for a scale-invariant net: (eta/c, c*lam, c*eps, sigma/c)."""
    c = c.c if isinstance(c, ScaleMap) else c
    hp = HyperParams(eta0=base.eta_base, lam=base.lam_base, eps=base.eps_base, schedule=schedule or ScheduleSpec())
    init = InitSpec(rho=base.eta_base / base.sigma_base, eta0=base.eta_base, seed=seed)
    return map_hyperparams(hp, init, c)


def mapped_base(base: BaseRun, c: Union[float, ScaleMap]) -> BaseRun:
    hp, init = theorem1_map(base, c)
    return replace(base, eta_base=hp.eta0, lam_base=hp.lam, eps_base=hp.eps, sigma_base=init.scale)


# ---------- planning table ----------
def _row(rule: str, eta: float, lam: float, N: int, B: int, flags: str, **extra) -> Dict:
    ts = timescale_of(eta, lam, N, B)
    return {"rule": rule, "eta": eta, "lam": lam, "tau_iter": ts.tau_iter,
            "tau_epoch": ts.tau_epoch, "N": N, "flags": flags, **extra}


def plan(
    base: BaseRun,
    s: Optional[float] = None,
    N_new: Optional[int] = None,
    tau_epoch_target: Optional[float] = None,
    c: Optional[float] = None,
    fan_in: Optional[int] = None,
) -> pd.DataFrame:
    """One row per applicable transfer, starting with the base run itself."""
    scale = ScaleMap.for_target(base, c=1.0 if c is None else c, s=s, fan_in=fan_in, N_new=N_new)
    rows: List[Dict] = [_row("base", base.eta_base, base.lam_base, base.N_base, base.B, "")]
    if N_new is not None:
        target = base.tau_epoch if tau_epoch_target is None else tau_epoch_target
        lam = scale_for_dataset(base, N_new, target)
        rows.append(_row("dataset", base.eta_base, lam, N_new, base.B, "tau_epoch fixed",
                         N_ratio=scale.N_ratio))
    if s is not None or fan_in is not None:
        for rule in WIDTH_RULES:
            wt = scale_for_width(base, scale.s, rule)
            flag = "timescale preserved" if wt.timescale_preserving else "timescale-breaking"
            rows.append(_row(f"width-{rule}", wt.eta, wt.lam, base.N_base, base.B, flag,
                             s=scale.s, fan_in=round(base.fan_in_base * scale.s)))
    if c is not None:
        mb = mapped_base(base, scale)
        rows.append(_row("equivalent", mb.eta_base, mb.lam_base, base.N_base, base.B,
                         f"eps={mb.eps_base:g} sigma={mb.sigma_base:g}", c=ScaleMap.between(base, mb).c))
    return pd.DataFrame(rows)
