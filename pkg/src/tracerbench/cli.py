"""Command-line entry point.

    tracerbench <subcommand> CONFIG [--section.key=value ...]

Subcommands: world, prep, train, rollout, eval, ablate, gradcheck, all.
Artifacts go to the configured output directory together with
``manifest.json``. Exit codes: 0 success, 2 configuration error,
3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig
from .evalsuite import (
    ablation_harness, default_stations, decorrelation_time, lead_metrics, quarterly_eval,
    station_extract, write_ablation, write_reports,
)
from .exceptions import ConfigError, InvalidArgumentError, InvalidStateError, NumericalAbort
from .gradchecks import run_all
from .pipeline import DatasetStore, preprocess, write_dataset
from .refsolver import generate_world
from .tensor import dtype_for
from .stepper import Forcing, Stepper, StepperConfig, n_input_channels, trajectory_dataset, write_ledger
from .train import curriculum_train, write_loss_log
from .zoo import build, load_checkpoint, preset, save_checkpoint

log = logging.getLogger("tracerbench")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
SUBCOMMANDS = ("world", "prep", "train", "rollout", "eval", "ablate", "gradcheck", "all")
PIPELINE_ORDER = ("world", "prep", "train", "rollout", "eval")


def configure_threads():
    n = os.environ.get("TRACERBENCH_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


# -- manifest ----------------------------------------------------------------

class Manifest:
    """``manifest.json``: enough to rerun the experiment, plus per-command status."""

    def __init__(self, outdir, cfg):
        self.path = Path(outdir) / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"commands": {}}
        self.data.update({"version": __version__, "config_hash": cfg.hash, "config": cfg.resolved(),
                          "seeds": {"global": cfg.seed, "scenario": cfg.scenario.seed, "train": cfg.train.seed}})

    def mark(self, command, status, outputs=None):
        entry = self.data["commands"].setdefault(command, {})
        entry["status"] = status
        if outputs is not None:
            entry["outputs"] = sorted(str(o) for o in outputs)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------

class Experiment:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.output)

    @property
    def world_dir(self):
        return self.out / "world"

    @property
    def data_dir(self):
        return self.out / "data"

    @property
    def ckpt(self):
        return self.out / "model.ckpt"

    def _data(self):
        store = DatasetStore(self.data_dir)
        return store.load(), store.read_stats()

    def _stepper_config(self, ds, stats, centflux=None):
        st = self.cfg.stepper
        return StepperConfig(stats, ds.grid, ds.hybrid, ds.dt,
                             centflux=st["centflux"] if centflux is None else centflux,
                             massfixer=st["massfixer"], model_dtype=dtype_for(self.cfg.train.precision))

    def world(self):
        generate_world(self.cfg.scenario, self.world_dir)
        return [self.world_dir]

    def prep(self):
        p = self.cfg.pipeline
        ds = DatasetStore(self.world_dir).load()
        ds, stats, audit = preprocess(ds, p["boundaries"], p["horiz_factor"], p["vert_groups"],
                                      p["time_factor"], tuple(p["fractions"]))
        store = write_dataset(ds, self.data_dir, p["store_dtype"])
        store.write_stats(stats)
        (self.data_dir / "audit.json").write_text(json.dumps(
            {"max_relative_pre": audit.max_relative_pre, "max_relative_post": audit.max_relative_post,
             "correction": audit.correction.tolist()}, indent=2) + "\n")
        return [self.data_dir]

    def _train_model(self, ds, stats, arch, centflux, spec_weight, log_path=None):
        cfg = self.cfg
        model, n_params = build(arch, n_input_channels(ds.n_lev), ds.n_lev, seed=cfg.train.seed,
                                grid_shape=ds.grid.shape, dtype=dtype_for(cfg.train.precision))
        log.info("training %s (%d parameters)", arch.id, n_params)
        tc = cfg.train if spec_weight is None else type(cfg.train)(**{**cfg.train.to_dict(),
                                                                       "spec_weight": spec_weight})
        result = curriculum_train(model, ds, self._stepper_config(ds, stats, centflux), tc)
        if log_path is not None:
            write_loss_log(log_path, result.log)
        return model, result

    def train(self):
        ds, stats = self._data()
        model, result = self._train_model(ds, stats, self.cfg.arch, None, None, self.out / "loss_log.csv")
        save_checkpoint(self.ckpt, model, stats_fingerprint=stats.fingerprint(),
                        provenance={"config_hash": self.cfg.hash, "version": __version__,
                                    "steps": result.steps_done, "train": self.cfg.train.to_dict()})
        return [self.ckpt, self.out / "loss_log.csv"]

    def _stepper(self, ds, stats):
        model, _ = load_checkpoint(self.ckpt, expected_fingerprint=stats.fingerprint())
        return Stepper(model, self._stepper_config(ds, stats).validate(ds))

    def rollout(self):
        ds, stats = self._data()
        stepper = self._stepper(ds, stats)
        s0, s1 = ds.splits["test"]
        n = self.cfg.eval["rollout_steps"] or (s1 - s0 - 1)
        forcing = Forcing(ds, stats, stepper.config.model_dtype)
        traj, ledger = stepper.rollout(ds.fields3d["co2"][s0], forcing, s0, n)
        write_dataset(trajectory_dataset(ds, s0, traj), self.out / "rollout", self.cfg.pipeline["store_dtype"])
        write_ledger(self.out / "rollout" / "ledger.csv", ledger)
        return [self.out / "rollout"]

    def _evaluate(self, stepper, ds, stats):
        ev = self.cfg.eval
        forcing = Forcing(ds, stats, stepper.config.model_dtype)
        return quarterly_eval(stepper, ds, forcing, ds.splits["test"], ev["run_days"], ev["mode"], ev["max_runs"])

    def eval(self):
        ds, stats = self._data()
        stepper = self._stepper(ds, stats)
        result = self._evaluate(stepper, ds, stats)
        ev = self.cfg.eval
        extra = {"config_hash": self.cfg.hash}
        lead = min(int(ev["lead"]), len(result.runs[0].trajectory) - 1)
        extra[f"lead_{lead}"] = lead_metrics(result, lead)
        if ev["decorrelation"] == "single":
            s0, s1 = ds.splits["test"]
            traj, _ = stepper.rollout(ds.fields3d["co2"][s0], Forcing(ds, stats, stepper.config.model_dtype), s0, s1 - s0 - 1)
            dec = decorrelation_time(traj, ds.fields3d["co2"][s0:s1], result.steps_per_day)
            extra["decorrelation_single_run"] = {"days": dec.days, "censored": dec.censored}
        stations = None
        if ev["stations"]:
            run = result.runs[0]
            times = (np.arange(len(run.trajectory)) * ds.dt).astype(float)
            z = ds.fields3d["z"][run.start:run.start + len(run.trajectory)]
            specs = default_stations(ds.grid)
            pred = station_extract(run.trajectory, z, ds.grid, times, specs)
            target = station_extract(run.target, z, ds.grid, times, specs)
            stations = {sid: (pred[sid], target[sid]) for sid in pred}
        files = write_reports(self.out / "reports", result, stations, extra_summary=extra)
        return list(files.values())

    def ablate(self):
        ds, stats = self._data()
        ev = self.cfg.eval
        combos = ev["ablation"] or [{"arch": a, "size": s, "centflux": c, "specloss": sp}
                                    for a, s in (("unet", "S"), ("swin", "tiny"), ("sfno", "S"))
                                    for c in (True, False) for sp in (True, False)]

        def run_row(combo):
            arch = preset(combo["arch"], combo.get("size", "S"))
            centflux = bool(combo.get("centflux", True))
            spec = self.cfg.train.spec_weight if combo.get("specloss", True) else 0.0
            model, _ = self._train_model(ds, stats, arch, centflux, spec)
            stepper = Stepper(model, self._stepper_config(ds, stats, centflux))
            result = self._evaluate(stepper, ds, stats)
            lead = min(int(ev["lead"]), len(result.runs[0].trajectory) - 1)
            lm = lead_metrics(result, lead)
            return {"decorrelation_days": result.mean.decorrelation_days, "r2": lm["r2"], "rmse": lm["rmse"]}

        rows = ablation_harness(combos, run_row)
        path = write_ablation(self.out / "reports" / "ablation.csv", rows)
        return [path]

    def gradcheck(self):
        reports = run_all()
        path = self.out / "gradcheck.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({k: {"passed": r.passed, "max_rel_error": r.max_rel_error,
                                        "worst_input": r.worst_input, "worst_index": list(r.worst_index)}
                                    for k, r in reports.items()}, indent=2, sort_keys=True) + "\n")
        failed = [k for k, r in reports.items() if not r.passed]
        if failed:
            raise NumericalAbort(f"gradient check failed for: {', '.join(failed)}")
        return [path]


def run(subcommand, config_path, overrides=()):
    """Execute one subcommand; returns the process exit status."""
    manifest = None
    try:
        cfg = ExperimentConfig.load(config_path, overrides)
        exp = Experiment(cfg)
        exp.out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(exp.out, cfg)
        commands = PIPELINE_ORDER if subcommand == "all" else (subcommand,)
        for cmd in commands:
            manifest.mark(cmd, "incomplete")
            outputs = getattr(exp, cmd)()
            manifest.mark(cmd, "complete", [Path(o).relative_to(exp.out) for o in outputs])
            log.info("%s: complete", cmd)
        return EXIT_OK
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, InvalidStateError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        log.debug("%s", traceback.format_exc())
        return EXIT_IO


def build_parser():
    parser = argparse.ArgumentParser(prog="tracerbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="experiment YAML file")
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [e for e in extra if not (e.startswith("--") and "=" in e)]
    if bad:
        print(f"config error: unrecognized arguments {' '.join(bad)}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    return run(args.command, args.config, extra)


if __name__ == "__main__":
    sys.exit(main())
