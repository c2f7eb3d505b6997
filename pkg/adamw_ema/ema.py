# adamw_ema/ema.py
"""
Closed-form EMA mathematics behind the AdamW timescale view:
timescales in iterations and epochs, exact vs. exponential EMA weights,
the relative-update-size law r = sqrt(2*gamma), and weight-magnitude
measurement.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from adamw_ema.errors import ConfigError, TimescaleError
from adamw_ema.utils import progress_enabled

logger = logging.getLogger(__name__)

CHAIN_LENGTH = 25


# ---------- timescales ----------
@dataclass(frozen=True)
class Timescale:
    tau_iter: float
    tau_epoch: float
    M: int
    N: int
    B: int


def iterations_per_epoch(N: int, B: int) -> int:
    if not (N > 0 and B > 0):
        raise ConfigError(f"dataset size and batch size must be positive, got N={N}, B={B}")
    if int(N) != N or int(B) != B or int(N) % int(B):
        raise TimescaleError(f"batch size B={B} does not divide dataset size N={N}")
    return int(N) // int(B)


def timescale_of(eta: float, lam: float, N: int, B: int) -> Timescale:
    if not (eta > 0 and lam > 0):
        raise ConfigError(f"eta and lam must be positive, got eta={eta}, lam={lam}")
    M = iterations_per_epoch(N, B)
    if eta * lam >= 1.0:
        raise TimescaleError(f"eta*lam = {eta * lam:g} >= 1: timescale shorter than one step")
    tau_iter = 1.0 / (eta * lam)
    return Timescale(tau_iter, tau_iter * B / N, M, int(N), int(B))


# ---------- EMA weights ----------
@dataclass(frozen=True)
class EmaWeights:
    t: int
    tau: float
    exact: np.ndarray   # weight on q_{t'} for t' = 1..t
    approx: np.ndarray

    @property
    def lags(self) -> np.ndarray:
        return self.t - np.arange(1, self.t + 1)


def _check_horizon(t: int, tau: float):
    if t < 1:
        raise ConfigError(f"horizon must be at least one step, got t={t}")
    if not tau > 1:
        raise ConfigError(f"tau must exceed 1 for the EMA weights to make sense, got {tau}")


def ema_update(ema, q, tau: float):
    return (1.0 - 1.0 / tau) * ema + (1.0 / tau) * q


def ema_weights(t: int, tau: float) -> EmaWeights:
    _check_horizon(t, tau)
    rate = 1.0 / tau
    lags = t - np.arange(1, t + 1)
    exact = rate * (1.0 - rate) ** lags
    approx = rate * np.exp(-lags / tau)
    return EmaWeights(t, tau, exact, approx)


def impulse_response(t: int, tau: float) -> np.ndarray:
    """Weights obtained by pushing a unit impulse at each t' through the literal recursion."""
    _check_horizon(t, tau)
    ema = np.zeros(t)
    q = np.zeros(t)
    for s in range(t):
        q[s] = 1.0
        ema = ema_update(ema, q, tau)
        q[s] = 0.0
    return ema


def approximation_error(weights: EmaWeights) -> Tuple[float, float]:
    """(max pointwise relative error, max error relative to the peak weight 1/tau)."""
    diff = np.abs(weights.exact - weights.approx)
    return float(np.max(diff / weights.exact)), float(np.max(diff) * weights.tau)


def approximation_envelope(weights: EmaWeights) -> np.ndarray:
    """Per-lag bound on approx/exact - 1: expm1(k / (2 tau^2 (1 - 1/tau)))."""
    tau = weights.tau
    return np.expm1(weights.lags / (2 * tau ** 2 * (1 - 1 / tau)))


# ---------- relative update size ----------
@dataclass(frozen=True)
class UpdateSizeEstimate:
    ratio: float
    stderr: float
    theory: float
    samples: int
    chains: int


def relative_update_size_theory(gamma: float) -> float:
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    return math.sqrt(2.0 * gamma)


def relative_update_size_mc(
    gamma: float,
    sigma: float = 1.0,
    samples: int = 1_000_000,
    seed: int = 0,
    chain_length: int = CHAIN_LENGTH,
) -> UpdateSizeEstimate:
    """
    Simulate a_{t+1} = (1-gamma) a_t + gamma b_t with b_t ~ N(0, sigma^2)
    over independent chains and estimate sqrt(E[(a_{t+1}-a_t)^2] / E[a_t^2]).

    Each chain starts from the state reached after ceil(20/gamma) burn-in
    steps from a_0 = 0; that state is Gaussian with a known variance and is
    drawn directly instead of being iterated.
    """
    theory = relative_update_size_theory(gamma)
    if samples < 10_000:
        raise ConfigError(f"need at least 1e4 samples, got {samples}")
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    chains = max(2, math.ceil(samples / chain_length))
    burn_in = math.ceil(20.0 / gamma)
    decay = 1.0 - gamma
    burn_var = gamma ** 2 * (1.0 - decay ** (2 * burn_in)) / (1.0 - decay ** 2)

    rng = np.random.default_rng(seed)
    a = sigma * math.sqrt(burn_var) * rng.standard_normal(chains)
    sum_sq = np.zeros(chains)
    sum_step = np.zeros(chains)
    for _ in range(chain_length):
        a_next = decay * a + gamma * sigma * rng.standard_normal(chains)
        sum_sq += a * a
        sum_step += (a_next - a) ** 2
        a = a_next

    # ratio of means, delta-method error over independent chains
    x = sum_sq / chain_length
    y = sum_step / chain_length
    r2 = y.mean() / x.mean()
    se_r2 = np.std(y - r2 * x, ddof=1) / math.sqrt(chains) / x.mean()
    ratio = math.sqrt(r2)
    return UpdateSizeEstimate(ratio, se_r2 / (2.0 * ratio), theory, chains * chain_length, chains)


def relative_update_size_mc_seeds(
    gamma: float,
    sigma: float = 1.0,
    samples: int = 1_000_000,
    seeds: Sequence[int] = (0, 1, 2, 3),
    parallel: int = 1,
    progress: bool = False,
) -> UpdateSizeEstimate:
    """Average of independent per-seed estimates; the errors combine in quadrature."""
    run = partial(relative_update_size_mc, gamma, sigma, samples)
    bar = dict(total=len(seeds), desc=f"mc gamma={gamma:g}", leave=False,
               disable=not (progress and progress_enabled()))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            parts = list(tqdm(pool.map(run, seeds), **bar))
    else:
        parts = [run(s) for s in tqdm(seeds, **bar)]
    n = len(parts)
    return UpdateSizeEstimate(
        ratio=sum(p.ratio for p in parts) / n,
        stderr=math.sqrt(sum(p.stderr ** 2 for p in parts)) / n,
        theory=parts[0].theory,
        samples=sum(p.samples for p in parts),
        chains=sum(p.chains for p in parts),
    )


# ---------- weight magnitude ----------
@dataclass(frozen=True)
class MagnitudeRecord:
    per_layer: Dict[str, float]
    global_mean: float


def mean_abs_weight(
    params: Dict[str, np.ndarray],
    decayed: Optional[Iterable[str]] = None,
    decayed_only: bool = True,
) -> MagnitudeRecord:
    """Mean |W_ij| per layer and over all elements of the selected layers."""
    if decayed_only:
        keep = set(decayed or ())
        names = [n for n in params if n in keep]
    else:
        names = list(params)
    if not names:
        raise ConfigError("no parameters selected for the weight-magnitude record")
    per_layer = {n: float(np.mean(np.abs(params[n]))) for n in names}
    total = sum(float(np.abs(params[n]).sum()) for n in names)
    count = sum(params[n].size for n in names)
    return MagnitudeRecord(per_layer, total / count)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if len(xs) < 2 or np.any(xs <= 0) or np.any(ys <= 0):
        raise ConfigError("log-log slope needs at least two strictly positive points")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])
