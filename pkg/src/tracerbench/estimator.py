"""Scikit-learn style wrapper around training and rollout."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .evalsuite import metric_arrays
from .exceptions import InvalidArgumentError
from .pipeline import Dataset, DatasetStore, compute_stats
from .stepper import Forcing, Stepper, StepperConfig, n_input_channels
from .train import TrainConfig, curriculum_train
from .validation import check_is_fitted
from .zoo import build, preset


def _as_dataset(X):
    if isinstance(X, Dataset):
        return X
    if isinstance(X, DatasetStore):
        return X.load()
    try:
        return DatasetStore(X).load()
    except (TypeError, FileNotFoundError) as exc:
        raise InvalidArgumentError("X must be a Dataset, a DatasetStore or a store path") from exc


class TransportEmulator(BaseEstimator, RegressorMixin):
    """Neural tracer-transport emulator.

    ``fit`` trains on the dataset's ``train`` split (or all of it);
    ``predict`` rolls the model out from a state of any dataset on the same
    grid; ``score`` is the global R2 of that rollout.
    """

    def __init__(self, arch="swin", size="tiny", centflux=True, massfixer=True, spec_weight=0.1,
                 steps=20000, curriculum_steps=5000, max_lead=31, batch_size=4, peak_lr=5e-4,
                 warmup_steps=500, curriculum_lr=5e-5, seed=0):
        self.arch = arch
        self.size = size
        self.centflux = centflux
        self.massfixer = massfixer
        self.spec_weight = spec_weight
        self.steps = steps
        self.curriculum_steps = curriculum_steps
        self.max_lead = max_lead
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.curriculum_lr = curriculum_lr
        self.seed = seed

    def _train_config(self):
        return TrainConfig(peak_lr=self.peak_lr, warmup_steps=min(self.warmup_steps, self.steps),
                           steps=self.steps, curriculum_lr=self.curriculum_lr,
                           curriculum_steps=self.curriculum_steps, max_lead=self.max_lead,
                           spec_weight=self.spec_weight, batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y=None, stats=None):
        ds = _as_dataset(X)
        split = ds.splits.get("train", (0, ds.n_times))
        self.stats_ = stats if stats is not None else compute_stats(ds, split)
        self.model_, self.n_params_ = build(preset(self.arch, self.size), n_input_channels(ds.n_lev),
                                            ds.n_lev, seed=self.seed, grid_shape=ds.grid.shape)
        self.stepper_config_ = StepperConfig(self.stats_, ds.grid, ds.hybrid, ds.dt,
                                             self.centflux, self.massfixer)
        result = curriculum_train(self.model_, ds, self.stepper_config_, self._train_config(), split)
        self.loss_log_ = result.log
        self.grid_shape_ = ds.grid.shape
        return self

    def predict(self, X, start=0, n_steps=None):
        """Trajectory ``[n_steps+1, lev, lat, lon]`` starting from state ``start`` of ``X``."""
        check_is_fitted(self, ["model_", "stats_"])
        ds = _as_dataset(X)
        if ds.grid.shape != self.grid_shape_:
            raise InvalidArgumentError(f"grid {ds.grid.shape} differs from the fitted {self.grid_shape_}")
        n = ds.n_times - 1 - start if n_steps is None else n_steps
        stepper = Stepper(self.model_, self.stepper_config_)
        traj, self.ledger_ = stepper.rollout(ds.fields3d["co2"][start], Forcing(ds, self.stats_, self.stepper_config_.model_dtype), start, n)
        return traj

    def score(self, X, y=None, start=0, n_steps=None):
        ds = _as_dataset(X)
        traj = self.predict(ds, start, n_steps)
        target = ds.fields3d["co2"][start:start + len(traj)]
        return float(metric_arrays(traj[1:], target[1:])["r2"])
