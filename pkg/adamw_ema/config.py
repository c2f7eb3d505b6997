# adamw_ema/config.py
"""
Flat run-config files (JSON or TOML) <-> typed specs.

Every key belongs to exactly one spec; unknown keys are rejected. The
learning rate and decay can be given directly or through a timescale:
any two of (eta0, lam, tau_iter) determine the third, and tau_epoch is
converted to tau_iter with N/B.
"""
import json
import math
import tomllib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from adamw_ema.data import DataSpec
from adamw_ema.errors import ConfigError
from adamw_ema.nets import DEFAULT_NORM_LR, InitSpec, SINetSpec
from adamw_ema.optimizer import HyperParams, ScheduleSpec

NET_KEYS = ("widths", "activation", "normalize", "output_global_norm", "norm_affine",
            "norm_kind", "norm_eps", "scale_invariant", "loss")
INIT_KEYS = ("rho", "init_seed", "init_sigma")
HP_KEYS = ("eta0", "lam", "beta1", "beta2", "eps", "schedule", "final_fraction",
           "total_steps", "tau_iter", "tau_epoch")
DATA_KEYS = ("task", "N", "B", "features", "classes", "data_seed", "shuffle_seed",
             "n_test", "noise", "separation")
RUN_KEYS = ("name", "epochs", "record_every", "decouple_norm", "norm_lr", "norm_group_eps")
SWEEP_KEYS = ("axes", "series", "width_rule")
RUN_CONFIG_KEYS = NET_KEYS + INIT_KEYS + HP_KEYS + DATA_KEYS + RUN_KEYS


@dataclass(frozen=True)
class RunConfig:
    net: SINetSpec = field(default_factory=SINetSpec)
    init: InitSpec = field(default_factory=InitSpec)
    hp: HyperParams = field(default_factory=lambda: HyperParams(eta0=1e-3, lam=1e-2))
    data: DataSpec = field(default_factory=DataSpec)
    epochs: int = 1
    record_every: int = 20
    decouple_norm: bool = True
    norm_lr: float = DEFAULT_NORM_LR
    norm_group_eps: float = 1e-8
    name: str = ""

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.record_every < 1:
            raise ConfigError(f"record_every must be at least 1, got {self.record_every}")
        if self.net.widths[-1] != self.data.classes:
            raise ConfigError(
                f"output width {self.net.widths[-1]} does not match the task's {self.data.classes} outputs"
            )
        if self.hp.schedule.total_steps != self.total_steps:
            raise ConfigError(
                f"schedule horizon {self.hp.schedule.total_steps} does not match "
                f"epochs*N/B = {self.total_steps}"
            )
        if not self.norm_lr > 0:
            raise ConfigError(f"norm_lr must be positive, got {self.norm_lr}")

    @property
    def total_steps(self) -> int:
        return max(1, self.epochs * self.data.steps_per_epoch)

    @property
    def training_steps(self) -> int:
        return self.epochs * self.data.steps_per_epoch


# ---------- dict <-> config ----------
def _pick(flat: Dict[str, Any], keys, rename: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    rename = rename or {}
    return {rename.get(k, k): flat[k] for k in keys if k in flat}


def _resolve_rates(flat: Dict[str, Any], N: int, B: int) -> Dict[str, float]:
    eta0, lam = flat.get("eta0"), flat.get("lam")
    tau_iter, tau_epoch = flat.get("tau_iter"), flat.get("tau_epoch")
    if tau_epoch is not None:
        from_epoch = float(tau_epoch) * N / B
        if tau_iter is not None and not math.isclose(float(tau_iter), from_epoch, rel_tol=1e-12):
            raise ConfigError(f"tau_iter={tau_iter} conflicts with tau_epoch={tau_epoch} at N={N}, B={B}")
        tau_iter = from_epoch
    if tau_iter is None:
        if eta0 is None or lam is None:
            raise ConfigError("need eta0 and lam, or one of them together with tau_iter or tau_epoch")
        return {"eta0": float(eta0), "lam": float(lam)}
    tau_iter = float(tau_iter)
    if not tau_iter > 0:
        raise ConfigError(f"timescale must be positive, got {tau_iter}")
    if eta0 is not None and lam is not None:
        if not math.isclose(float(eta0) * float(lam) * tau_iter, 1.0, rel_tol=1e-9):
            raise ConfigError(f"eta0={eta0}, lam={lam} and tau_iter={tau_iter:g} are inconsistent")
        return {"eta0": float(eta0), "lam": float(lam)}
    if eta0 is not None:
        return {"eta0": float(eta0), "lam": 1.0 / (float(eta0) * tau_iter)}
    if lam is not None:
        return {"eta0": 1.0 / (float(lam) * tau_iter), "lam": float(lam)}
    raise ConfigError("a timescale alone does not fix eta0 and lam; give one of them")


def config_from_dict(flat: Dict[str, Any]) -> RunConfig:
    unknown = sorted(set(flat) - set(RUN_CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    try:
        net_kw = _pick(flat, NET_KEYS)
        if "widths" in net_kw:
            net_kw["widths"] = tuple(int(w) for w in net_kw["widths"])
        net = SINetSpec(**net_kw)
        data = DataSpec(**_pick(flat, DATA_KEYS))
        epochs = int(flat.get("epochs", 1))
        steps = max(1, epochs * data.steps_per_epoch)
        if "total_steps" in flat and int(flat["total_steps"]) != steps:
            raise ConfigError(f"total_steps={flat['total_steps']} does not match epochs*N/B = {steps}")
        schedule = ScheduleSpec(
            kind=flat.get("schedule", "constant"),
            final_fraction=float(flat.get("final_fraction", 0.1)),
            total_steps=steps,
        )
        rates = _resolve_rates(flat, data.N, data.B)
        hp = HyperParams(schedule=schedule, **rates, **_pick(flat, ("beta1", "beta2", "eps")))
        init = InitSpec(
            rho=float(flat.get("rho", 1e-3)),
            eta0=hp.eta0,
            seed=int(flat.get("init_seed", 0)),
            sigma=flat.get("init_sigma"),
        )
        extra = _pick(flat, ("name", "record_every", "decouple_norm", "norm_lr", "norm_group_eps"))
        return RunConfig(net=net, init=init, hp=hp, data=data, epochs=epochs, **extra)
    except TypeError as e:
        raise ConfigError(f"malformed config: {e}") from e


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    """Flat, JSON-safe echo of a RunConfig; `config_from_dict` inverts it."""
    net = asdict(config.net)
    net["widths"] = list(config.net.widths)
    out: Dict[str, Any] = {
        **net,
        "rho": config.init.rho,
        "init_seed": config.init.seed,
        "eta0": config.hp.eta0,
        "lam": config.hp.lam,
        "beta1": config.hp.beta1,
        "beta2": config.hp.beta2,
        "eps": config.hp.eps,
        "schedule": config.hp.schedule.kind,
        "final_fraction": config.hp.schedule.final_fraction,
        "total_steps": config.hp.schedule.total_steps,
        **asdict(config.data),
        "epochs": config.epochs,
        "record_every": config.record_every,
        "decouple_norm": config.decouple_norm,
        "norm_lr": config.norm_lr,
        "norm_group_eps": config.norm_group_eps,
        "name": config.name,
    }
    if config.init.sigma is not None:
        out["init_sigma"] = config.init.sigma
    return out


# ---------- files ----------
def load_file(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        if p.suffix == ".toml":
            return tomllib.loads(p.read_text(encoding="utf-8"))
        return json.loads(p.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {p}: {e}") from e


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    flat = load_file(path)
    flat.update(overrides or {})
    return config_from_dict(flat)


def split_sweep(flat: Dict[str, Any]):
    """(base run keys, axes, series, width_rule) of a sweep file."""
    axes = flat.get("axes")
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("a sweep config needs a non-empty [axes] table")
    base = {k: v for k, v in flat.items() if k not in SWEEP_KEYS}
    series = list(flat.get("series", []))
    missing = [s for s in series if s not in axes]
    if missing:
        raise ConfigError(f"series {missing} are not sweep axes")
    return base, axes, series, flat.get("width_rule", "timescale-fixed")
