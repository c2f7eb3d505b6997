# tests/test_transfer.py
import logging
from dataclasses import replace

import numpy as np
import pytest

from adamw_ema.ema import timescale_of
from adamw_ema.errors import ConfigError, TimescaleError
from adamw_ema.nets import InitSpec
from adamw_ema.optimizer import HyperParams, ScheduleSpec
from adamw_ema.transfer import (
    BaseRun, ScaleMap, map_hyperparams, mapped_base, plan, scale_for_dataset, scale_for_width_direct,
    scale_for_width_timescale_fixed, scale_width, theorem1_map,
)


@pytest.fixture
def base():
    return BaseRun(eta_base=1e-3, lam_base=1e-2, eps_base=1e-8, sigma_base=1.0, N_base=2000, B=100, fan_in_base=32)


def _random_bases(n=50, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        B = int(rng.choice([10, 50, 100]))
        yield BaseRun(
            eta_base=float(10 ** rng.uniform(-5, -2)),
            lam_base=float(10 ** rng.uniform(-3, 0)),
            eps_base=float(10 ** rng.uniform(-10, -6)),
            sigma_base=float(10 ** rng.uniform(-1, 1)),
            N_base=B * int(rng.integers(10, 1000)),
            B=B,
        )


# ---------- dataset size ----------
def test_doubling_data_halves_decay(base):
    lam1 = scale_for_dataset(base, 4000, 20.0)
    lam2 = scale_for_dataset(base, 8000, 20.0)
    assert lam2 == pytest.approx(lam1 / 2)


def test_dataset_rule_example():
    b = BaseRun(eta_base=1e-3, lam_base=1e-3, B=100)
    assert scale_for_dataset(b, 320000, 31.25) == pytest.approx(1e-2)


def test_dataset_rule_round_trip(base):
    assert scale_for_dataset(base, base.N_base, base.tau_epoch) == pytest.approx(base.lam_base)


def test_dataset_rule_inverts_timescale():
    for b in _random_bases():
        N_new = b.N_base * 2
        lam = scale_for_dataset(b, N_new, 5.0)
        assert timescale_of(b.eta_base, lam, N_new, b.B).tau_epoch == pytest.approx(5.0, rel=1e-12)


def test_dataset_rule_infeasible(base):
    with pytest.raises(TimescaleError, match=r"tau_epoch > 0.5"):
        scale_for_dataset(base, 200, 1e-4)


# ---------- width ----------
def test_direct_width_rule(base):
    same = scale_for_width_direct(base, 1.0)
    assert (same.eta, same.lam) == (base.eta_base, base.lam_base)
    wt = scale_for_width_direct(base, 2.0)
    assert wt.eta == pytest.approx(base.eta_base / 2)
    assert wt.lam == base.lam_base
    assert wt.tau_iter == pytest.approx(2 * base.tau_iter)
    assert not wt.timescale_preserving
    assert scale_for_width_direct(base, 0.5).tau_iter == pytest.approx(base.tau_iter / 2)


def test_timescale_fixed_width_rule(base):
    wt = scale_for_width_timescale_fixed(base, 2.0)
    assert wt.eta == pytest.approx(base.eta_base / 2)
    assert wt.lam == pytest.approx(2 * base.lam_base)
    assert wt.tau_iter == base.tau_iter
    products = [scale_for_width_timescale_fixed(base, s) for s in (0.5, 1.0, 2.0, 4.0)]
    assert all(p.eta * p.lam == pytest.approx(base.eta_base * base.lam_base, rel=1e-14) for p in products)


def test_width_rules_random():
    rng = np.random.default_rng(1)
    for b in _random_bases(seed=2):
        s = float(10 ** rng.uniform(-1, 1))
        fixed = scale_for_width_timescale_fixed(b, s)
        direct = scale_for_width_direct(b, s)
        assert 1 / (fixed.eta * fixed.lam) == pytest.approx(b.tau_iter, rel=1e-12)
        assert 1 / (direct.eta * direct.lam) == pytest.approx(s * b.tau_iter, rel=1e-12)


def test_bad_width_factor(base):
    with pytest.raises(ConfigError):
        scale_for_width_direct(base, 0.0)


def test_scale_width_keeps_output():
    assert scale_width((32, 32, 10), 2.0) == (64, 64, 10)
    assert scale_width((32, 32, 10), 0.5) == (16, 16, 10)


# ---------- equivalence map ----------
def test_theorem1_map_example(base):
    hp, init = theorem1_map(base, 2.0)
    assert hp.eta0 == pytest.approx(5e-4)
    assert hp.lam == pytest.approx(2e-2)
    assert hp.eps == pytest.approx(2e-8)
    assert init.scale == pytest.approx(0.5)


def test_theorem1_map_identity(base):
    hp, init = theorem1_map(base, 1.0)
    assert (hp.eta0, hp.lam, hp.eps, init.scale) == (base.eta_base, base.lam_base, base.eps_base, base.sigma_base)


def test_theorem1_map_invariants():
    rng = np.random.default_rng(3)
    schedule = ScheduleSpec("cosine-to-fraction", total_steps=50)
    for b in _random_bases(seed=4):
        c = float(10 ** rng.uniform(-1, 1))
        hp0, init0 = theorem1_map(b, 1.0, schedule)
        hp, init = theorem1_map(b, c, schedule)
        for t in range(0, 51, 10):
            assert hp.eta_at(t) * hp.lam == pytest.approx(hp0.eta_at(t) * hp0.lam, rel=1e-12)
        assert hp.eta0 / init.scale == pytest.approx(hp0.eta0 / init0.scale, rel=1e-12)
        assert hp.eps == pytest.approx(c * b.eps_base, rel=1e-12)


def test_theorem1_map_composes():
    hp = HyperParams(eta0=1e-3, lam=1e-2, eps=1e-8)
    init = InitSpec(rho=1e-3, eta0=1e-3)
    hp_a, init_a = map_hyperparams(*map_hyperparams(hp, init, 2.0), 5.0)
    hp_b, init_b = map_hyperparams(hp, init, 10.0)
    assert hp_a.eta0 == pytest.approx(hp_b.eta0)
    assert hp_a.lam == pytest.approx(hp_b.lam)
    assert hp_a.eps == pytest.approx(hp_b.eps)
    assert init_a.scale == pytest.approx(init_b.scale)


def test_fixed_sigma_is_mapped_too():
    hp = HyperParams(eta0=1e-3, lam=1e-2)
    _, init = map_hyperparams(hp, InitSpec(sigma=2.0), 4.0)
    assert init.scale == 0.5


def test_unscaled_eps_warns(caplog):
    hp = HyperParams(eta0=1e-3, lam=1e-2, eps=1e-8)
    with caplog.at_level(logging.WARNING, logger="adamw_ema.transfer"):
        hp_c, _ = map_hyperparams(hp, InitSpec(), 10.0, scale_eps=False)
    assert hp_c.eps == 1e-8
    assert "epsilon kept fixed" in caplog.text


def test_scale_map_validation():
    assert ScaleMap(c=2.0, s=4.0).N_ratio == 1.0
    with pytest.raises(ConfigError):
        ScaleMap(c=-1.0)


def test_scale_map_from_target(base):
    assert ScaleMap.for_target(base, fan_in=128, N_new=8000) == ScaleMap(c=1.0, s=4.0, N_ratio=4.0)
    assert ScaleMap.for_target(base, s=0.5).s == 0.5
    with pytest.raises(ConfigError, match="not both"):
        ScaleMap.for_target(base, s=2.0, fan_in=64)


@pytest.mark.parametrize("c", [0.1, 0.5, 2.0, 10.0])
def test_scale_map_recovered_from_mapped_run(base, c):
    scale = ScaleMap.between(base, mapped_base(base, ScaleMap(c=c)))
    assert scale.c == pytest.approx(c, rel=1e-12)
    assert (scale.s, scale.N_ratio) == (1.0, 1.0)
    hp, init = theorem1_map(base, ScaleMap(c=c))
    hp_c, init_c = theorem1_map(base, c)
    assert (hp.eta0, hp.lam, hp.eps, init.scale) == (hp_c.eta0, hp_c.lam, hp_c.eps, init_c.scale)


def test_scale_map_rejects_inconsistent_runs(base):
    # the width rule moves eta and lam but not sigma or eps
    wt = scale_for_width_timescale_fixed(base, 2.0)
    other = replace(base, eta_base=wt.eta, lam_base=wt.lam)
    with pytest.raises(ConfigError, match="not equivalent"):
        ScaleMap.between(base, other)


def test_base_run_validation():
    with pytest.raises(TimescaleError):
        BaseRun(eta_base=1.0, lam_base=2.0)


# ---------- plan ----------
def test_plan_table(base):
    df = plan(base, s=4.0, N_new=8000, c=2.0)
    assert list(df["rule"]) == ["base", "dataset", "width-direct", "width-timescale-fixed", "equivalent"]
    rows = df.set_index("rule")
    assert rows.loc["dataset", "tau_epoch"] == pytest.approx(rows.loc["base", "tau_epoch"])
    assert rows.loc["dataset", "lam"] == pytest.approx(base.lam_base / 4)
    assert rows.loc["width-timescale-fixed", "tau_iter"] == pytest.approx(base.tau_iter)
    assert rows.loc["width-direct", "tau_iter"] == pytest.approx(4 * base.tau_iter)
    assert rows.loc["width-direct", "flags"] == "timescale-breaking"
    assert rows.loc["equivalent", "tau_iter"] == pytest.approx(base.tau_iter)
    assert rows.loc["equivalent", "c"] == pytest.approx(2.0)
    assert rows.loc["dataset", "N_ratio"] == 4.0
    assert rows.loc["width-direct", "fan_in"] == 128


def test_plan_width_from_fan_in(base):
    by_fan_in = plan(base, fan_in=64).set_index("rule")
    by_factor = plan(base, s=2.0).set_index("rule")
    assert by_fan_in.loc["width-timescale-fixed", "s"] == 2.0
    for rule in ("width-direct", "width-timescale-fixed"):
        assert by_fan_in.loc[rule, "eta"] == by_factor.loc[rule, "eta"]
        assert by_fan_in.loc[rule, "lam"] == by_factor.loc[rule, "lam"]
    with pytest.raises(ConfigError, match="not both"):
        plan(base, s=2.0, fan_in=64)


def test_plan_base_only(base):
    assert len(plan(base)) == 1
