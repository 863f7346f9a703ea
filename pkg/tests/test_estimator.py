import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tracerbench.estimator import TransportEmulator
from tracerbench.exceptions import InvalidArgumentError
from tracerbench.pipeline import write_dataset
from tracerbench.validation import check_field, check_positive, check_same_shape
from tracerbench.exceptions import InvalidStateError

FAST = dict(arch="unet", size="S", steps=8, warmup_steps=2, curriculum_steps=4, max_lead=2, batch_size=2)


def test_params_round_trip():
    est = TransportEmulator(**FAST)
    params = est.get_params()
    assert params["arch"] == "unet" and params["steps"] == 8
    est.set_params(seed=4, centflux=False)
    c = clone(est)
    assert c.get_params() == est.get_params() and not hasattr(c, "model_")


def test_not_fitted(small_world):
    with pytest.raises(NotFittedError):
        TransportEmulator().predict(small_world[0])


def test_fit_predict_score(small_world, tmp_path):
    ds, stats, _ = small_world
    est = TransportEmulator(**FAST).fit(ds, stats=stats)
    assert est.n_params_ > 0 and len(est.loss_log_) == 12
    traj = est.predict(ds, start=2, n_steps=5)
    assert traj.shape == (6, ds.n_lev) + ds.grid.shape
    np.testing.assert_array_equal(traj[0], ds.fields3d["co2"][2])
    assert all(abs(r["residual"]) < 1e-10 for r in est.ledger_)
    score = est.score(ds, start=2, n_steps=5)
    assert np.isfinite(score) and score <= 1
    store_path = tmp_path / "store"
    write_dataset(ds, store_path)
    np.testing.assert_array_equal(est.predict(store_path, start=2, n_steps=5), traj)


def test_fit_is_deterministic(small_world):
    ds, stats, _ = small_world
    a = TransportEmulator(**FAST).fit(ds, stats=stats).predict(ds, n_steps=3)
    b = TransportEmulator(**FAST).fit(ds, stats=stats).predict(ds, n_steps=3)
    np.testing.assert_array_equal(a, b)


def test_bad_inputs(small_world):
    with pytest.raises(InvalidArgumentError):
        TransportEmulator(**FAST).fit(12)


def test_validation_helpers():
    assert check_field([[1.0, 2.0]], ndim=2, shape=(2,)).dtype == np.float64
    with pytest.raises(InvalidArgumentError):
        check_field([1.0, np.nan])
    with pytest.raises(InvalidArgumentError):
        check_field([1.0], ndim=2)
    with pytest.raises(InvalidArgumentError):
        check_field(np.zeros((2, 3)), shape=(4,))
    with pytest.raises(InvalidArgumentError):
        check_same_shape(np.zeros(2), np.zeros(3))
    with pytest.raises(InvalidStateError):
        check_positive([1.0, 0.0])
