# tests/test_harness.py
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from adamw_ema import harness
from adamw_ema.config import config_from_dict, load_file
from adamw_ema.errors import ConfigError, HypothesisError, NonFiniteError
from adamw_ema.harness import (
    CONTROLS, GridSpec, check_hypotheses, ema_checks, magnitude_slope, materialize, stability, sweep,
    train, verify_theorem1,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# ---------- single runs ----------
def test_train_is_deterministic(small_config):
    a, b = train(small_config), train(small_config)
    assert a.to_dict() == b.to_dict()
    assert a.steps == list(range(1, 9))
    assert a.magnitude_steps == [0, 3, 6, 8]
    assert a.etas[0] == pytest.approx(small_config.hp.eta0)
    assert a.final_test_loss is not None and 0.0 <= a.final_test_accuracy <= 1.0
    assert a.tau_iter == pytest.approx(1 / (1e-2 * 1e-1))
    assert a.tau_epoch == pytest.approx(a.tau_iter * 50 / 200)


def test_seeds_change_the_run(small_flat):
    a = train(config_from_dict(small_flat))
    b = train(config_from_dict({**small_flat, "init_seed": 1}))
    assert a.run_id != b.run_id
    assert a.losses != b.losses


def test_zero_epochs(small_flat):
    record = train(config_from_dict({**small_flat, "epochs": 0}))
    assert record.steps == []
    assert record.magnitude_steps == [0]
    assert not record.diverged
    assert record.final_test_loss is not None


def test_divergence_is_recorded(monkeypatch, small_config):
    real = harness.loss_and_grad
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NonFiniteError("non-finite loss", step=3)
        return real(*args)

    monkeypatch.setattr(harness, "loss_and_grad", flaky)
    record = train(small_config)
    assert record.diverged and record.diverged_at == 3
    assert record.steps == [1, 2]
    assert record.final_test_loss is None


def test_magnitude_follows_inverse_decay(small_flat):
    # same init for every lam; 1000 constant-rate steps cover ten timescales
    flat = {k: v for k, v in small_flat.items() if k not in ("eta0", "lam")}
    base = {**flat, "tau_iter": 100, "schedule": "constant", "init_sigma": 1.0, "epochs": 250,
            "record_every": 100}
    records, _ = sweep(GridSpec(base, {"lam": (1e-3, 1e-2, 1e-1, 1.0)}))
    assert [r.config["eta0"] for r in records] == pytest.approx([10.0, 1.0, 0.1, 0.01])
    assert not any(r.diverged for r in records)
    assert len({r.global_magnitudes[0] for r in records}) == 1
    assert abs(magnitude_slope(records, at=0)) < 1e-9
    assert magnitude_slope(records) == pytest.approx(-1.0, abs=0.15)


def test_magnitude_slope_is_zero_without_training(small_flat):
    flat = {k: v for k, v in small_flat.items() if k not in ("eta0", "lam")}
    base = {**flat, "tau_iter": 100, "init_sigma": 1.0, "epochs": 0}
    records, _ = sweep(GridSpec(base, {"lam": (1e-3, 1e-1)}))
    assert magnitude_slope(records) == magnitude_slope(records, at=0)
    assert abs(magnitude_slope(records)) < 1e-9


def test_lr_dependent_init_starts_on_the_inverse_law(small_flat):
    # sigma = eta0/rho with eta0 = 1/(lam tau) puts the init itself on the 1/lam line
    flat = {k: v for k, v in small_flat.items() if k not in ("eta0", "lam")}
    records, _ = sweep(GridSpec({**flat, "tau_iter": 100, "epochs": 0}, {"lam": (1e-3, 1e-1)}))
    assert magnitude_slope(records, at=0) == pytest.approx(-1.0, abs=1e-9)


# ---------- trajectory equivalence ----------
def test_equivalence_holds(verify_config):
    report = verify_theorem1(verify_config, (0.5, 2.0, 10.0), steps=200)
    assert report.passed, report.frame()
    for r in report.results:
        assert r.weight_dev < 1e-6
        assert r.output_dev < 1e-8
        assert len(r.weight_trace) == 200
    assert list(report.frame()["verdict"]) == ["PASS"] * 3


def test_unit_constant_is_exact(verify_config):
    r = verify_theorem1(verify_config, (1.0,), steps=20).results[0]
    assert (r.weight_dev, r.m_dev, r.v_dev, r.output_dev) == (0.0, 0.0, 0.0, 0.0)


@pytest.mark.parametrize("control", CONTROLS)
def test_each_control_breaks_equivalence(verify_config, control):
    report = verify_theorem1(verify_config, (10.0,), steps=200, control=control)
    assert not report.passed
    r = report.results[0]
    assert max(r.weight_dev, r.m_dev, r.v_dev, r.output_dev) > 1e-3


def test_unknown_control(verify_config):
    with pytest.raises(ConfigError, match="unknown control"):
        verify_theorem1(verify_config, control="beta")


@pytest.mark.parametrize("override", [
    {"norm_eps": 1e-5},
    {"init_sigma": 1.0},
    {"norm_affine": True, "decouple_norm": False},
    {"output_global_norm": False, "scale_invariant": False},
])
def test_hypotheses_are_checked(small_flat, override):
    with pytest.raises(HypothesisError):
        check_hypotheses(config_from_dict({**small_flat, **override}))


def test_hypotheses_accept_decoupled_affine_norms(small_flat):
    check_hypotheses(config_from_dict({**small_flat, "norm_affine": True}))


# ---------- sweeps ----------
def test_single_point_sweep_matches_train(small_flat, small_config):
    records, summary = sweep(GridSpec(small_flat, {"lam": (0.1,)}))
    alone = train(small_config)
    assert records[0].run_id == alone.run_id
    assert records[0].losses == alone.losses
    assert records[0].axis == {"lam": 0.1}
    assert list(summary.columns[:2]) == ["run_id", "lam"]
    assert bool(summary["best"].iloc[0])


def test_sweep_order_does_not_matter(small_flat):
    fwd, _ = sweep(GridSpec(small_flat, {"lam": (0.1, 0.05)}))
    rev, _ = sweep(GridSpec(small_flat, {"lam": (0.05, 0.1)}))
    assert {r.run_id: r.losses for r in fwd} == {r.run_id: r.losses for r in rev}
    assert [r.config["lam"] for r in rev] == [0.05, 0.1]


def test_materialize_timescale_axis(small_flat):
    config = materialize(GridSpec(small_flat, {"tau_epoch": (10.0,)}), {"tau_epoch": 10.0})
    assert config.hp.eta0 == 1e-2
    # 10 epochs of 4 steps
    assert config.hp.lam == pytest.approx(1 / (1e-2 * 40))


def test_materialize_rate_axis_over_timescale_base(small_flat):
    base = {**small_flat, "tau_iter": 1e3}
    base.pop("eta0")
    config = materialize(GridSpec(base, {"lam": (0.5,)}), {"lam": 0.5})
    assert config.hp.lam == 0.5
    assert config.hp.eta0 == pytest.approx(1 / (0.5 * 1e3))


def test_materialize_width_axis(small_flat):
    grid = GridSpec(small_flat, {"s": (2.0,)}, width_rule="timescale-fixed")
    config = materialize(grid, {"s": 2.0})
    assert config.net.widths == (32, 32, 4)
    assert config.hp.eta0 == pytest.approx(5e-3)
    assert config.hp.lam == pytest.approx(0.2)
    assert config.hp.eta0 * config.hp.lam == pytest.approx(1e-3)
    direct = materialize(GridSpec(small_flat, {"s": (2.0,)}, width_rule="direct"), {"s": 2.0})
    assert direct.hp.lam == pytest.approx(0.1)


def test_width_rates_follow_the_realized_fan_in(small_flat):
    # 16 * 0.3 rounds to 5 hidden units, so the rates move by 5/16, not 0.3
    config = materialize(GridSpec(small_flat, {"s": (0.3,)}, width_rule="timescale-fixed"), {"s": 0.3})
    assert config.net.widths == (5, 5, 4)
    assert config.hp.eta0 == pytest.approx(1e-2 * 16 / 5)
    assert config.hp.lam == pytest.approx(0.1 * 5 / 16)


def test_grid_validation(small_flat):
    with pytest.raises(ConfigError, match="unknown sweep axes"):
        GridSpec(small_flat, {"momentum": (0.9,)})
    with pytest.raises(ConfigError, match="no values"):
        GridSpec(small_flat, {"lam": ()})
    with pytest.raises(ConfigError, match="at most one"):
        GridSpec(small_flat, {"tau_iter": (10.0,), "tau_epoch": (1.0,)})
    with pytest.raises(ConfigError, match="non-finite"):
        GridSpec(small_flat, {"lam": (math.nan,)})
    assert len(GridSpec(small_flat, {"lam": (0.1, 0.2, 0.3), "N": (200, 400)})) == 6


def test_stability_counts_grid_steps():
    summary = pd.DataFrame({
        "N": [2000, 2000, 2000, 4000, 4000, 4000],
        "lam": [1e-2, 1e-1, 1.0] * 2,
        "best": [False, True, False, False, False, True],
    })
    st = stability(summary, ["N"], "lam")
    assert st.argmins == {2000: 0.1, 4000: 1.0}
    assert st.spread == 1 and st.within(1) and not st.within(0)


def test_stability_needs_a_best_run():
    summary = pd.DataFrame({"N": [1], "lam": [0.1], "best": [False]})
    with pytest.raises(ConfigError, match="non-diverged best"):
        stability(summary, ["N"], "lam")


def test_stability_averages_over_seeds():
    # seed 0 alone prefers lam=1.0; the two-seed mean prefers lam=0.1
    summary = pd.DataFrame({
        "N": [2000] * 6,
        "lam": [0.1, 1.0, 10.0] * 2,
        "seed": [0, 0, 0, 1, 1, 1],
        "final_test_loss": [0.50, 0.45, 0.9, 0.50, 0.70, None],
        "diverged": [False, False, False, False, False, True],
        "best": [False, True, False, False, False, False],
    })
    assert stability(summary, ["N"], "lam").argmins == {2000: 1.0}
    assert stability(summary, ["N"], "lam", average=True).argmins == {2000: 0.1}


def test_stability_average_skips_diverged_groups():
    summary = pd.DataFrame({
        "N": [2000, 2000], "lam": [0.1, 1.0], "seed": [0, 0],
        "final_test_loss": [None, 0.3], "diverged": [True, False], "best": [False, True],
    })
    assert stability(summary, ["N"], "lam", average=True).argmins == {2000: 1.0}
    with pytest.raises(ConfigError, match="non-diverged best"):
        stability(summary.iloc[:1], ["N"], "lam", average=True)


def test_ema_checks_pass():
    df = ema_checks(samples=1_000_000, trials=20)
    assert df["passed"].all(), df
    assert len(df) == 3 + 3 + 1 + 1 + 3 * 3
    assert set(df[df["check"].str.contains("invariance")]["check"].str.split().str[0]) == {"sigma", "seed"}
    # a shared seed would make the sigma=10 chain a rescaled copy with a zero gap
    assert (df[df["check"].str.contains("invariance")]["value"] > 1e-9).all()


# ---------- full protocols (minutes each) ----------
def _sweep_flat(**extra):
    return {"widths": [32, 32, 10], "N": 2000, "B": 100, "features": 20, "classes": 10,
            "rho": 1e-3, "schedule": "cosine-to-fraction", "epochs": 20, "record_every": 100, **extra}


POWERS_OF_2 = tuple(2.0 ** k for k in range(-2, 7))


def _dataset_flat():
    # init far above every equilibrium norm: a run learns only once decay has
    # shrunk it, which takes a fixed fraction of training, i.e. a fixed number of epochs
    flat = _sweep_flat(eta0=8e-4, init_sigma=100.0, epochs=200, record_every=1000)
    return {k: v for k, v in flat.items() if k != "rho"}


@pytest.mark.slow
def test_optimal_timescale_is_stable_across_dataset_size():
    lams = tuple(2.0 ** k for k in range(0, 8))
    grid = GridSpec(_dataset_flat(), {"N": (2000, 4000, 8000), "lam": lams, "seed": (0, 1)}, ("N",))
    _, summary = sweep(grid, parallel=4)
    best_lam = stability(summary, ["N"], "lam", average=True).argmins
    assert best_lam[2000] > best_lam[4000] > best_lam[8000]
    assert min(lams) < best_lam[8000] and best_lam[2000] < max(lams)
    assert stability(summary, ["N"], "tau_epoch", average=True).within(1)


def test_shipped_dataset_sweep_matches_the_tested_protocol():
    grid = GridSpec.from_dict(load_file(str(CONFIGS / "sweep_dataset.toml")))
    for key, value in _dataset_flat().items():
        assert grid.base[key] == value, key
    assert grid.axes["N"] == (2000, 4000, 8000)
    assert grid.axes["lam"] == tuple(2.0 ** k for k in range(0, 8))
    assert grid.series == ("N",)


@pytest.mark.slow
def test_timescale_fixed_width_rule_is_stable():
    spread = {}
    for rule in ("timescale-fixed", "direct"):
        grid = GridSpec(_sweep_flat(eta0=1e-3), {"s": (0.5, 1.0, 2.0), "lam": POWERS_OF_2}, ("s",), width_rule=rule)
        _, summary = sweep(grid, parallel=4)
        spread[rule] = stability(summary, ["s"], "lam").spread
    assert spread["timescale-fixed"] <= 1 < spread["direct"]


def _magnitude_flat():
    # one fixed init for every lam; 5e5 steps cover five initial timescales
    flat = _sweep_flat(N=50000, tau_iter=1e5, epochs=1000, record_every=50000, schedule="cosine-to-zero",
                       init_sigma=0.01)
    return {k: v for k, v in flat.items() if k != "rho"}


@pytest.mark.slow
def test_magnitude_slope_full_protocol():
    records, _ = sweep(GridSpec(_magnitude_flat(), {"lam": (1e-3, 1e-2, 1e-1, 1.0)}), parallel=4)
    assert not any(r.diverged for r in records)
    assert abs(magnitude_slope(records, at=0)) < 1e-9
    assert magnitude_slope(records) == pytest.approx(-1.0, abs=0.15)


def test_shipped_magnitude_sweep_matches_the_tested_protocol():
    grid = GridSpec.from_dict(load_file(str(CONFIGS / "sweep_magnitude.toml")))
    for key, value in _magnitude_flat().items():
        assert grid.base[key] == value, key
    assert grid.axes["lam"] == (0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0)


@pytest.mark.slow
def test_parallel_sweep_matches_serial(small_flat):
    grid = GridSpec(small_flat, {"lam": (0.05, 0.1, 0.2)})
    serial, _ = sweep(grid)
    par, _ = sweep(grid, parallel=3)
    assert [r.to_dict() for r in serial] == [r.to_dict() for r in par]


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("sweep_*.toml")), ids=lambda p: p.stem)
def test_shipped_sweeps_materialize(path):
    grid = GridSpec.from_dict(load_file(str(path)))
    configs = [materialize(grid, p) for p in grid.points()]
    assert len(configs) == len(grid)
    for config in configs:
        assert config.hp.eta0 * config.hp.lam < 1
