"""End-to-end dataset construction from a run config."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import allocators, synth_market
from .allocators import LabeledPair
from .data_panel import FactorPanel, ReturnPanel, load_price_pipeline
from .distill_train import Dataset, TrainConfig, UnlabeledExample, split_dataset
from .errors import ConfigError
from .features import FeatureParams, build_features
from .nn_core import NetworkSpec


@dataclass
class World:
    """A panel with its feature dates, teacher labels and feature vectors."""

    panel: ReturnPanel
    factors: FactorPanel
    pairs: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def windows(self, window: int) -> list[np.ndarray]:
        return [allocators.scenario_window(self.panel.simple, p.date_index, window) for p in self.pairs]


def feature_params(cfg: dict) -> FeatureParams:
    return FeatureParams(**cfg["features"], min_hist=cfg["synth"]["min_hist"],
                         market_asset=cfg["universe"]["market_asset"])


def teacher_kwargs(cfg: dict) -> dict:
    t = cfg["teacher"]
    return {"alpha": t["alpha"], "step0": t["step0"], "iterations": t["iterations"]}


def train_config(cfg: dict, model_seed: int) -> TrainConfig:
    return TrainConfig(**cfg["train"], alpha=cfg["teacher"]["alpha"], model_seed=model_seed)


def network_spec(cfg: dict, n_assets: int, bayesian: bool) -> NetworkSpec:
    n = cfg["network"]
    spec = NetworkSpec.for_universe(n_assets, hidden=tuple(n["hidden"]), bayesian=bayesian,
                                    n_variational=n["n_variational"])
    return NetworkSpec(spec.sizes, spec.variational, n["activation"], n["prior_sigma"])


def feature_cap(level: str, cfg: dict) -> float:
    return cfg["constraints"]["w_max"] if level == "L3" else 1.0


def label_world(panel: ReturnPanel, factors: FactorPanel, dates, cfg: dict, cap: float = 1.0) -> World:
    """Teacher labels at each date, then features whose previous-weight block is
    the teacher label at the preceding date (uniform for the first)."""
    window = cfg["teacher"]["window"]
    eligible = [int(t) for t in dates if t - window + 1 >= 0 and t < panel.n_weeks]
    labels = {}
    for t in eligible:
        res = allocators.solve_cvar_teacher(allocators.scenario_window(panel.simple, t, window),
                                            **teacher_kwargs(cfg))
        labels[t] = res.weights
    prev = {t: labels[s] for s, t in zip(eligible[:-1], eligible[1:])}
    mats, skipped = build_features(panel, factors, eligible, prev, cap, feature_params(cfg))
    pairs = [LabeledPair(m.date_index, m.flattened, labels[m.date_index]) for m in mats]
    return World(panel, factors, pairs, skipped)


def _reference(cfg: dict, weeks: int):
    u = cfg["universe"]
    return synth_market.reference_market(u["n_assets"], weeks, seed=u["reference_seed"])


def real_panel(cfg: dict, full: bool = False) -> tuple[ReturnPanel, FactorPanel]:
    """The training-era real panel; ``full`` adds the out-of-sample evaluation weeks.

    With no price file the built-in reference market is used.
    """
    d, u = cfg["data"], cfg["universe"]
    if d["prices_csv"]:
        if not d["factors_csv"]:
            raise ConfigError("data.prices_csv requires data.factors_csv")
        returns, factors = load_price_pipeline(d["prices_csv"], d["factors_csv"], fx_csv=d["fx_csv"],
                                               anchor=d["anchor"], min_coverage=d["min_coverage"],
                                               fill_limit=d["fill_limit"], factor_units=d["factor_units"])
        if full:
            return returns, factors
        cut = min(returns.n_weeks, u["real_weeks"])
        return returns.take(np.arange(cut)), factors.take(np.arange(cut))
    weeks = u["real_weeks"] + (u["eval_weeks"] if full else 0)
    return _reference(cfg, weeks)


def d2a_panel(cfg: dict) -> tuple[ReturnPanel, FactorPanel]:
    """Partially disjoint universe on the same factor path as the real panel."""
    u = cfg["universe"]
    keep = int(round(u["d2a_keep_frac"] * u["n_assets"]))
    return synth_market.reference_market(u["n_assets"], u["real_weeks"] + u["eval_weeks"], seed=u["reference_seed"],
                                         asset_seed=u["d2a_asset_seed"], keep_assets=keep,
                                         base_asset_seed=u["reference_seed"], prefix="B")


def real_dates(cfg: dict, n_weeks: int) -> list[int]:
    return list(range(cfg["synth"]["min_hist"], n_weeks, cfg["universe"]["real_stride"]))


def real_world(cfg: dict) -> World:
    panel, factors = real_panel(cfg)
    return label_world(panel, factors, real_dates(cfg, panel.n_weeks), cfg)


def fit_generator(cfg: dict) -> synth_market.GeneratorModel:
    panel, factors = real_panel(cfg)
    return synth_market.fit_generator(panel, factors, cfg["synth"]["nu"], cfg["synth"]["ridge_lambda"])


def synth_world(cfg: dict, world_seed: int, generator: synth_market.GeneratorModel | None = None) -> World:
    gen = fit_generator(cfg) if generator is None else generator
    s = cfg["synth"]
    panel, factors = synth_market.simulate_world(gen, s["horizon"], world_seed)
    dates = synth_market.stride_dates(s["horizon"], s["min_hist"], s["stride"])
    return label_world(panel, factors, dates, cfg)


@lru_cache(maxsize=4)
def _cached_real_world(sub_json: str) -> World:
    return real_world(json.loads(sub_json))


def cached_real_world(cfg: dict) -> World:
    """Real labels depend only on the data, universe, synth, features and teacher sections."""
    sub = {k: cfg[k] for k in ("data", "universe", "synth", "features", "teacher")}
    return _cached_real_world(json.dumps(sub, sort_keys=True))


@dataclass
class Splits:
    train: list
    val: list
    test: list
    unlabeled: list
    n_real: int
    n_synth: int


def make_splits(real: World, synth: World, cfg: dict, split_seed: int) -> Splits:
    train, val, test = split_dataset(real.pairs, synth.pairs, tuple(cfg["split"]["ratios"]), split_seed)
    W = cfg["teacher"]["window"]
    unl = [UnlabeledExample(p.features, allocators.scenario_window(synth.panel.simple, p.date_index, W))
           for p in synth.pairs]
    return Splits(train, val, test, unl, len(real.pairs), len(synth.pairs))


def dataset_for(splits: Splits) -> Dataset:
    return Dataset(list(splits.train), list(splits.unlabeled))


def expected_pair_count(horizon: int, min_hist: int, stride: int) -> int:
    return max(0, math.ceil((horizon - min_hist) / stride))
