"""The world-seed x model-seed sweep on synthetic test splits."""

from __future__ import annotations

import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline
from .constraints import ConstraintSpec
from .distill_train import StudentCheckpoint, train_sandwich, train_supervised
from .evaluation import (BASELINES, STUDENTS, EvalReport, baseline_weights, hold_track, mu_from_features,
                         report_from_track)
from .nn_core import Network
from .rng import stream

STUDENT_KINDS = {
    "DNN-sup": (False, False),
    "DNN-S": (False, True),
    "BNN-sup": (True, False),
    "BNN-S": (True, True),
}


@dataclass
class WorldBundle:
    world_seed: int
    splits: pipeline.Splits
    panel: object
    baseline_reports: list = field(default_factory=list)


@dataclass
class GridResult:
    reports: list
    failures: list
    checkpoints: list
    timings: dict

    @property
    def complete(self) -> bool:
        return not self.failures


def build_student(cfg: dict, model: str, n_assets: int, model_seed: int) -> Network:
    bayes, _ = STUDENT_KINDS[model]
    # the same initial draw for a supervised student and its sandwich twin
    return Network.init(pipeline.network_spec(cfg, n_assets, bayes), stream(model_seed, "init", int(bayes)))


def train_student(cfg: dict, model: str, splits: pipeline.Splits, n_assets: int, model_seed: int) -> StudentCheckpoint:
    _, sandwich = STUDENT_KINDS[model]
    net = build_student(cfg, model, n_assets, model_seed)
    tc = pipeline.train_config(cfg, model_seed)
    if sandwich:
        ck = train_sandwich(net, pipeline.dataset_for(splits), tc, model_id=model)
    else:
        ck = train_supervised(net, splits.train, tc, model_id=model)
    ck.provenance.update({"model_seed": model_seed, "n_train": len(splits.train)})
    return ck


def test_track(panel, pairs, weights, hold: int):
    return hold_track(panel, [p.date_index for p in pairs], weights, hold)


def evaluate_student(ck: StudentCheckpoint, bundle: WorldBundle, cfg: dict, model_seed: int) -> EvalReport:
    test = bundle.splits.test
    X = np.stack([p.features for p in test])
    W = ck.predict(X, cfg["eval"]["mc_samples"], model_seed)
    track = test_track(bundle.panel, test, W, cfg["eval"]["hold"])
    return report_from_track(track, model=ck.model_id, world_seed=bundle.world_seed, model_seed=model_seed,
                             universe="GRID", level="L1", stress="none", regime="ALL")


def baseline_reports(bundle: WorldBundle, cfg: dict) -> list[EvalReport]:
    test = bundle.splits.test
    n = bundle.panel.n_assets
    window = cfg["teacher"]["window"]
    out = []
    for name in BASELINES:
        W = []
        for p in test:
            win = bundle.panel.simple[p.date_index - window + 1 : p.date_index + 1]
            W.append(baseline_weights(name, win, mu_from_features(p.features, n), teacher=p.teacher,
                                      alpha=cfg["teacher"]["alpha"]))
        track = test_track(bundle.panel, test, np.array(W), cfg["eval"]["hold"])
        out.append(report_from_track(track, model=name, world_seed=bundle.world_seed, model_seed=-1,
                                     universe="GRID", level="L1", stress="none", regime="ALL"))
    return out


def prepare_world(cfg: dict, world_seed: int, generator=None) -> WorldBundle:
    real = pipeline.cached_real_world(cfg)
    synth = pipeline.synth_world(cfg, world_seed, generator)
    splits = pipeline.make_splits(real, synth, cfg, world_seed)
    bundle = WorldBundle(world_seed, splits, synth.panel)
    bundle.baseline_reports = baseline_reports(bundle, cfg)
    return bundle


def run_cell(cfg: dict, bundle: WorldBundle, model_seed: int, models=STUDENTS, checkpoint_dir=None):
    """Train and evaluate every student for one (world, model seed) cell.

    Returns ``(reports, failures, checkpoint_paths)``; baselines are copied in
    with this cell's model seed so each cell carries all strategies.
    """
    reports, failures, paths = [], [], []
    n = bundle.panel.n_assets
    for model in models:
        try:
            ck = train_student(cfg, model, bundle.splits, n, model_seed)
            reports.append(evaluate_student(ck, bundle, cfg, model_seed))
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"w{bundle.world_seed}_m{model_seed}_{model}.ckpt"
                ck.save(path)
                paths.append(str(path))
        except Exception as e:  # a failed run is recorded and the sweep continues
            failures.append({"world_seed": bundle.world_seed, "model_seed": model_seed, "model": model,
                             "error": f"{type(e).__name__}: {e}", "trace": traceback.format_exc(limit=3)})
    for rep in bundle.baseline_reports:
        reports.append(EvalReport(**{**rep.__dict__, "model_seed": model_seed}))
    return reports, failures, paths


def _cell_job(args):
    cfg, bundle, model_seed, models, checkpoint_dir = args
    return run_cell(cfg, bundle, model_seed, models, checkpoint_dir)


def run_grid(cfg: dict, *, workers: int | None = None, checkpoint_dir=None, models=STUDENTS,
             progress=None) -> GridResult:
    """Full sweep. Worlds are built first; cells then run on a bounded pool.

    Output order is fixed by (world seed, model seed, model) regardless of the
    order in which workers finish.
    """
    g = cfg["grid"]
    workers = g["workers"] if workers is None else workers
    timings = {}
    t0 = time.perf_counter()
    generator = pipeline.fit_generator(cfg)
    bundles, failures = [], []
    for ws in g["world_seeds"]:
        try:
            bundles.append(prepare_world(cfg, ws, generator))
        except Exception as e:
            failures.append({"world_seed": ws, "model_seed": None, "model": None,
                             "error": f"{type(e).__name__}: {e}", "trace": traceback.format_exc(limit=3)})
        if progress:
            progress(f"world {ws} ready")
    timings["worlds"] = time.perf_counter() - t0
    jobs = [(cfg, b, ms, tuple(models), checkpoint_dir) for b in bundles for ms in g["model_seeds"]]
    t1 = time.perf_counter()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_cell_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_cell_job(job))
            if progress:
                progress(f"cell world={job[1].world_seed} model_seed={job[2]} done")
    timings["cells"] = time.perf_counter() - t1
    reports, paths = [], []
    for reps, fails, ps in results:
        reports.extend(reps)
        failures.extend(fails)
        paths.extend(ps)
    order = {m: i for i, m in enumerate(STUDENTS + BASELINES)}
    reports.sort(key=lambda r: (r.world_seed, r.model_seed, order.get(r.model, 99)))
    return GridResult(reports, failures, paths, timings)


def directional_checks(reports: list[EvalReport]) -> dict:
    """Per world: sandwich vs supervised mean Sharpe, and Bayesian vs DNN-S turnover."""
    by_world: dict = {}
    for r in reports:
        by_world.setdefault(r.world_seed, {}).setdefault(r.model, []).append(r)
    out = {}
    for ws, models in sorted(by_world.items()):
        def mean(model, attr):
            v = np.array([getattr(r, attr) for r in models.get(model, [])], dtype=float)
            return float(np.nanmean(v)) if v.size else float("nan")
        sw = np.mean([mean("DNN-S", "sharpe"), mean("BNN-S", "sharpe")])
        sup = np.mean([mean("DNN-sup", "sharpe"), mean("BNN-sup", "sharpe")])
        bnn_to = [mean("BNN-sup", "mean_turnover"), mean("BNN-S", "mean_turnover")]
        dnn_s_to = mean("DNN-S", "mean_turnover")
        out[ws] = {
            "sandwich_sharpe": float(sw), "supervised_sharpe": float(sup), "sandwich_wins": bool(sw >= sup),
            "bnn_turnover": bnn_to, "dnn_s_turnover": dnn_s_to,
            "bnn_lower_turnover": bool(all(t < dnn_s_to for t in bnn_to)),
        }
    return out
