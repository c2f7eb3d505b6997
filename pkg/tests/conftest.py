# tests/conftest.py
import pytest

from adamw_ema.config import config_from_dict


@pytest.fixture(autouse=True)
def _quiet_env(monkeypatch):
    monkeypatch.setenv("ADAMW_EMA_PROGRESS", "0")
    monkeypatch.delenv("ADAMW_EMA_DB", raising=False)


@pytest.fixture
def small_flat():
    """A run that takes well under a second."""
    return {
        "name": "small",
        "widths": [16, 16, 4],
        "N": 200,
        "B": 50,
        "features": 8,
        "classes": 4,
        "n_test": 100,
        "eta0": 1e-2,
        "lam": 1e-1,
        "rho": 1e-2,
        "schedule": "cosine-to-fraction",
        "epochs": 2,
        "record_every": 3,
    }


@pytest.fixture
def small_config(small_flat):
    return config_from_dict(small_flat)


@pytest.fixture
def verify_config():
    # 32-32-10 scale-invariant MLP, 10-class task, N=2000, B=100
    return config_from_dict({
        "widths": [32, 32, 10],
        "N": 2000,
        "B": 100,
        "features": 20,
        "classes": 10,
        "eta0": 1e-2,
        "lam": 1e-2,
        "eps": 1e-2,
        "rho": 1e-2,
        "schedule": "cosine-to-zero",
        "epochs": 10,
    })
