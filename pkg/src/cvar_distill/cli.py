"""Command-line entry point: ``cvar-distill <subcommand> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data or I/O error, 4 numerical
failure, 5 grid finished with failed cells.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import config as cfgmod
from . import data_panel, evaluation, grid, pipeline, stress, synth_market
from .allocators import LabeledPair, scenario_window
from .constraints import ConstraintSpec
from .distill_train import Dataset, UnlabeledExample, train_sandwich, train_supervised, write_curves_csv
from .errors import ConfigError, DataError, NumericalError
from .features import COL, N_FEATURES, build_features, column_names, feature_schema, read_feature_csv, write_feature_csv
from .manifest import write_json, write_run_manifest

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> dict:
    cfg = cfgmod.load_config(args.config, args.preset)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfgmod.set_dotted(cfg, key.strip(), _parse_value(value))
    return cfg


def _out(args, default=None) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing input file: {p}")
    return p


# --- panel directories -----------------------------------------------------------


def write_panel_dir(out: Path, panel, factors, dates: list[int], extra: dict | None = None) -> list[Path]:
    data_panel.write_return_csv(panel, out / "returns.csv")
    data_panel.write_factor_csv(factors, out / "factors.csv")
    write_json(out / "dates.json", {"dates": [int(d) for d in dates], "count": len(dates), **(extra or {})})
    return [out / "returns.csv", out / "factors.csv", out / "dates.json"]


def read_panel_dir(d: Path):
    panel = data_panel.read_return_csv(_need_file(d / "returns.csv"))
    factors = data_panel.read_factor_csv(_need_file(d / "factors.csv"))
    dates = json.loads(_need_file(d / "dates.json").read_text())["dates"]
    return panel, factors, dates


# --- subcommands -----------------------------------------------------------------


def cmd_gen_synth(args, cfg) -> int:
    if args.horizon is not None:
        cfg = cfgmod.set_dotted(cfg, "synth.horizon", args.horizon)
    if args.stride is not None:
        cfg = cfgmod.set_dotted(cfg, "synth.stride", args.stride)
    out = _out(args, "synth")
    s = cfg["synth"]
    if args.real:
        panel, factors = pipeline.real_panel(cfg)
        dates = pipeline.real_dates(cfg, panel.n_weeks)
        files = write_panel_dir(out, panel, factors, dates, {"kind": "real"})
        seeds = {"reference_seed": cfg["universe"]["reference_seed"]}
    else:
        if args.world_seed is None:
            raise ConfigError("gen-synth needs --world-seed (or --real)")
        gen = pipeline.fit_generator(cfg)
        panel, factors = synth_market.simulate_world(gen, s["horizon"], args.world_seed)
        dates = synth_market.stride_dates(s["horizon"], s["min_hist"], s["stride"])
        files = write_panel_dir(out, panel, factors, dates, {"kind": "synthetic", "world_seed": args.world_seed})
        gen.save(out / "generator.json")
        real, _ = pipeline.real_panel(cfg)
        write_json(out / "validation.json", synth_market.validation_report(real, panel))
        files += [out / "generator.json", out / "validation.json"]
        seeds = {"world_seed": args.world_seed}
    print(f"{len(dates)} feature dates ({panel.n_weeks} weeks, {panel.n_assets} assets) -> {out}")
    write_run_manifest(out, command="gen-synth", cfg=cfg, seeds=seeds, outputs=files)
    return EXIT_OK


def cmd_features(args, cfg) -> int:
    src = Path(args.panel)
    panel, factors, dates = read_panel_dir(src)
    out = _out(args, src)
    level = args.level
    cap = pipeline.feature_cap(level, cfg)
    params = pipeline.feature_params(cfg)
    mats, skipped = build_features(panel, factors, dates, None, cap, params)
    write_feature_csv(out / "features.csv", mats, panel.dates, panel.assets)
    schema = feature_schema(panel.assets, params, cap)
    schema["prev_weight_source"] = "uniform until labeled"
    write_json(out / "feature_schema.json", schema)
    write_json(out / "skipped.json", [{"date_index": s.date_index, "reason": s.reason} for s in skipped])
    print(f"{len(mats)} feature rows, {len(skipped)} skipped -> {out}")
    write_run_manifest(out, command="features", cfg=cfg, seeds={},
                       inputs=[src / "returns.csv", src / "factors.csv", src / "dates.json"],
                       outputs=[out / "features.csv", out / "feature_schema.json", out / "skipped.json"])
    return EXIT_OK


def set_prev_weights(X: np.ndarray, n_assets: int, prev: np.ndarray) -> np.ndarray:
    X = np.array(X, dtype=float).reshape(len(X), n_assets, N_FEATURES)
    X[:, :, COL["prev_weight"]] = prev
    return X.reshape(len(X), -1)


def cmd_label(args, cfg) -> int:
    src = Path(args.panel)
    panel, _, _ = read_panel_dir(src)
    feat_dir = Path(args.features or src)
    idx, X = read_feature_csv(_need_file(feat_dir / "features.csv"))
    out = _out(args, src)
    t = cfg["teacher"]
    labels, keep = [], []
    for k, d in enumerate(idx):
        if d - t["window"] + 1 < 0:
            continue
        res = pipeline.allocators.solve_cvar_teacher(scenario_window(panel.simple, int(d), t["window"]),
                                                     **pipeline.teacher_kwargs(cfg))
        labels.append(res.weights)
        keep.append(k)
    idx, X = idx[keep], X[keep]
    L = np.array(labels).reshape(len(keep), panel.n_assets)
    n = panel.n_assets
    prev = np.vstack([np.full((1, n), 1.0 / n), L[:-1]]) if len(L) else L
    X = set_prev_weights(X, n, prev)
    write_pairs_csv(out / "pairs.csv", idx, X, L, panel.assets, ["real" if args.real else "synthetic"] * len(idx))
    write_json(out / "label_manifest.json", {"window": t["window"], "alpha": t["alpha"], "solver": {
        "method": "projected subgradient", "step0": t["step0"], "iterations": t["iterations"]},
        "n_pairs": int(len(idx)), "prev_weight_source": "teacher label at the previous date"})
    print(f"{len(idx)} labeled pairs -> {out / 'pairs.csv'}")
    write_run_manifest(out, command="label", cfg=cfg, seeds={},
                       inputs=[src / "returns.csv", feat_dir / "features.csv"],
                       outputs=[out / "pairs.csv", out / "label_manifest.json"])
    return EXIT_OK


def write_pairs_csv(path, idx, X, L, assets, sources) -> None:
    cols = column_names(assets)
    frame = pd.DataFrame(np.asarray(X), columns=cols)
    for i, a in enumerate(assets):
        frame[f"label.{a}"] = np.asarray(L)[:, i]
    frame.insert(0, "date_index", np.asarray(idx, dtype=int))
    frame.insert(0, "source", list(sources))
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_pairs_csv(path):
    frame = pd.read_csv(_need_file(path), float_precision="round_trip")
    label_cols = [c for c in frame.columns if c.startswith("label.")]
    feat_cols = [c for c in frame.columns if c not in label_cols and c not in ("source", "date_index")]
    idx = frame["date_index"].to_numpy(dtype=int)
    X = frame[feat_cols].to_numpy(dtype=float)
    L = frame[label_cols].to_numpy(dtype=float)
    pairs = [LabeledPair(int(i), x, y) for i, x, y in zip(idx, X, L)]
    return pairs, frame["source"].tolist(), [c[len("label."):] for c in label_cols]


def cmd_split(args, cfg) -> int:
    real_pairs, _, assets = read_pairs_csv(Path(args.real) / "pairs.csv")
    synth_pairs, _, synth_assets = read_pairs_csv(Path(args.synth) / "pairs.csv")
    if len(assets) != len(synth_assets):
        raise DataError("real and synthetic pairs have different universe sizes")
    from .distill_train import split_dataset
    train, val, test = split_dataset(real_pairs, synth_pairs, tuple(cfg["split"]["ratios"]), args.world_seed)
    out = _out(args, "split")
    n_real = len(real_pairs)
    for name, part in (("train", train), ("val", val), ("test", test)):
        src = ["real" if (name == "train" and i < n_real) else "synthetic" for i in range(len(part))]
        write_pairs_csv(out / f"{name}.csv", [p.date_index for p in part], [p.features for p in part],
                        [p.teacher for p in part], synth_assets, src)
    write_pairs_csv(out / "unlabeled.csv", [p.date_index for p in synth_pairs], [p.features for p in synth_pairs],
                    [p.teacher for p in synth_pairs], synth_assets, ["synthetic"] * len(synth_pairs))
    info = {"n_real": n_real, "n_synthetic": len(synth_pairs), "total": n_real + len(synth_pairs),
            "train": len(train), "val": len(val), "test": len(test), "world_seed": args.world_seed,
            "synth_panel": str(Path(args.synth).resolve()), "ratios": cfg["split"]["ratios"]}
    write_json(out / "split.json", info)
    print(f"train {len(train)} / val {len(val)} / test {len(test)} (total {info['total']}) -> {out}")
    write_run_manifest(out, command="split", cfg=cfg, seeds={"split_seed": args.world_seed},
                       inputs=[Path(args.real) / "pairs.csv", Path(args.synth) / "pairs.csv"],
                       outputs=[out / f"{n}.csv" for n in ("train", "val", "test", "unlabeled")] + [out / "split.json"])
    return EXIT_OK


def _load_split(d: Path):
    info = json.loads(_need_file(d / "split.json").read_text())
    parts = {n: read_pairs_csv(d / f"{n}.csv")[0] for n in ("train", "val", "test")}
    unl_pairs, _, assets = read_pairs_csv(d / "unlabeled.csv")
    panel, factors, _ = read_panel_dir(Path(info["synth_panel"]))
    return info, parts, unl_pairs, assets, panel, factors


def cmd_train(args, cfg) -> int:
    d = Path(args.split)
    info, parts, unl_pairs, assets, panel, _ = _load_split(d)
    out = _out(args, d / "checkpoints")
    ms = args.model_seed
    model = args.model
    net = grid.build_student(cfg, model, len(assets), ms)
    tc = pipeline.train_config(cfg, ms)
    W = cfg["teacher"]["window"]
    if grid.STUDENT_KINDS[model][1]:
        unl = [UnlabeledExample(p.features, scenario_window(panel.simple, p.date_index, W)) for p in unl_pairs]
        ck = train_sandwich(net, Dataset(parts["train"], unl), tc, model_id=model)
    else:
        ck = train_supervised(net, parts["train"], tc, model_id=model)
    ck.provenance.update({"model_seed": ms, "world_seed": info["world_seed"], "n_train": len(parts["train"])})
    path = out / f"{model}_m{ms}.ckpt"
    ck.save(path)
    write_curves_csv(out / f"{model}_m{ms}_curves.csv", ck.curves)
    print(f"{model} seed {ms}: final loss {ck.curves[-1]['total']:.6g} -> {path}")
    write_run_manifest(out, command=f"train {model}", cfg=cfg, seeds={"model_seed": ms},
                       inputs=[d / "train.csv"], outputs=[path, out / f"{model}_m{ms}_curves.csv"])
    return EXIT_OK


def _write_track(path, track: evaluation.BacktestTrack, assets) -> None:
    frame = pd.DataFrame(track.weights, columns=[f"w.{a}" for a in assets])
    frame.insert(0, "cost", track.costs)
    frame.insert(0, "turnover", track.turnover)
    frame.insert(0, "net_return", track.returns)
    frame.insert(0, "week", track.dates)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _walk_forward_reports(cfg, checkpoints, protocol: str, levels, out: Path, model_seed: int):
    from .distill_train import StudentCheckpoint
    u = cfg["universe"]
    panel, factors = pipeline.real_panel(cfg, full=True) if protocol == "C2A" else pipeline.d2a_panel(cfg)
    start = min(u["real_weeks"], panel.n_weeks - 2)
    dates = list(range(start, panel.n_weeks - 1))
    adaptive = evaluation.AdaptiveConfig(**cfg["adaptive"])
    params = pipeline.feature_params(cfg)
    market = evaluation.market_for(panel, u["market_asset"])
    reports = []
    for level in levels:
        used, stress_kind = panel, "none"
        if level == "L2":
            stress_kind = cfg["eval"]["stress"]
            spec = stress.StressSpec(stress_kind, {}, cfg["eval"]["stress_seed"])
            stressed = panel.simple.copy()
            stressed[start:] = stress.apply_stress(panel.simple[start:], spec)
            used = data_panel.ReturnPanel(panel.dates, panel.assets, stressed, panel.rf)
        cons = (ConstraintSpec.for_level("L3", **cfg["constraints"]) if level == "L3" else ConstraintSpec(level))
        tracks = {}
        for path in checkpoints:
            ck = StudentCheckpoint.load(path)
            tracks[ck.model_id] = evaluation.adaptive_walk_forward(
                ck, used, factors, dates, cons, adaptive, feature_params=params,
                mc_samples=cfg["eval"]["mc_samples"], mc_seed=model_seed)
        for name in evaluation.BASELINES:
            tracks[name] = evaluation.baseline_walk_forward(name, used, factors, dates, cons,
                                                            window=cfg["teacher"]["window"],
                                                            alpha=cfg["teacher"]["alpha"], feature_params=params)
        for name, tr in tracks.items():
            _write_track(out / f"exec_{protocol}_{level}_{name}.csv", tr, panel.assets)
            high, low = evaluation.regime_split(tr, market)
            for regime, sub in (("ALL", tr), ("HIGHVOL", high), ("LOWVOL", low)):
                reports.append(evaluation.report_from_track(
                    sub, model=name, world_seed=-1, model_seed=model_seed, universe=protocol, level=level,
                    stress=stress_kind, regime=regime))
    return reports


def cmd_evaluate(args, cfg) -> int:
    from .distill_train import StudentCheckpoint
    out = _out(args, "eval")
    reports = []
    inputs = [Path(p) for p in args.checkpoints]
    for p in inputs:
        _need_file(p)
    if args.protocol == "test":
        if not args.split:
            raise ConfigError("--protocol test needs --split")
        d = Path(args.split)
        info, parts, _, assets, panel, _ = _load_split(d)
        splits = pipeline.Splits(parts["train"], parts["val"], parts["test"], [], info["n_real"], info["n_synthetic"])
        if not splits.test:
            raise DataError("the test split is empty")
        bundle = grid.WorldBundle(info["world_seed"], splits, panel)
        for p in inputs:
            reports.append(grid.evaluate_student(StudentCheckpoint.load(p), bundle, cfg, args.model_seed))
        for r in grid.baseline_reports(bundle, cfg):
            r.model_seed = args.model_seed
            reports.append(r)
        inputs.append(d / "test.csv")
    else:
        reports = _walk_forward_reports(cfg, inputs, args.protocol.upper(), args.level, out, args.model_seed)
    evaluation.write_reports_csv(out / "reports.csv", reports)
    print(f"{len(reports)} report rows -> {out / 'reports.csv'}")
    write_run_manifest(out, command=f"evaluate {args.protocol}", cfg=cfg, seeds={"model_seed": args.model_seed},
                       inputs=inputs, outputs=sorted(out.glob("*.csv")))
    return EXIT_OK


def cmd_stress(args, cfg) -> int:
    src = Path(args.panel)
    path = src / "returns.csv" if src.is_dir() else src
    panel = data_panel.read_return_csv(_need_file(path))
    params = {}
    for item in args.param or []:
        k, v = item.split("=", 1)
        params[k] = _parse_value(v)
    try:
        spec = stress.StressSpec(args.kind, params, args.seed)
        X = stress.apply_stress(panel.simple, spec)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    out = _out(args, "stressed")
    data_panel.write_return_csv(data_panel.ReturnPanel(panel.dates, panel.assets, X, panel.rf), out / "returns.csv")
    (out / "stress.json").write_text(spec.to_json() + "\n")
    print(f"{spec.kind} stress -> {out / 'returns.csv'}")
    write_run_manifest(out, command="stress", cfg=cfg, seeds={"stress_seed": args.seed}, inputs=[path],
                       outputs=[out / "returns.csv", out / "stress.json"])
    return EXIT_OK


def write_summary(out: Path, reports) -> list[Path]:
    rows = evaluation.summarize(reports)
    pd.DataFrame(rows).to_csv(out / "summary.csv", index=False, float_format="%.17g", lineterminator="\n")
    grid_reports = [r for r in reports if r.universe == "GRID" and r.regime == "ALL"]
    files = [out / "summary.csv"]
    if grid_reports:
        runs = sorted({(r.world_seed, r.model_seed) for r in grid_reports})
        by = {}
        for r in grid_reports:
            by.setdefault(r.model, {})[(r.world_seed, r.model_seed)] = r.sharpe
        complete = {m: [v[k] for k in runs] for m, v in by.items() if all(k in v for k in runs)}
        names, M = evaluation.win_rate_matrix(complete)
        pd.DataFrame(M, index=names, columns=names).to_csv(out / "win_rate.csv", float_format="%.17g",
                                                           lineterminator="\n")
        write_json(out / "directional.json", {str(k): v for k, v in grid.directional_checks(grid_reports).items()})
        files += [out / "win_rate.csv", out / "directional.json"]
    sens = evaluation.constraint_sensitivity(reports)
    if sens:
        pd.DataFrame(sens).to_csv(out / "sensitivity.csv", index=False, float_format="%.17g", lineterminator="\n")
        files.append(out / "sensitivity.csv")
    write_json(out / "summary.json", rows)
    files.append(out / "summary.json")
    return files


def cmd_grid(args, cfg) -> int:
    if args.workers is not None:
        cfg = cfgmod.set_dotted(cfg, "grid.workers", args.workers)
    out = _out(args, "grid")
    res = grid.run_grid(cfg, checkpoint_dir=out / "checkpoints", progress=lambda m: print(m, file=sys.stderr))
    evaluation.write_reports_csv(out / "reports.csv", res.reports)
    write_json(out / "failures.json", [{k: v for k, v in f.items() if k != "trace"} for f in res.failures])
    files = [out / "reports.csv", out / "failures.json"] + write_summary(out, res.reports)
    write_run_manifest(out, command="grid", cfg=cfg,
                       seeds={"world_seeds": cfg["grid"]["world_seeds"], "model_seeds": cfg["grid"]["model_seeds"]},
                       outputs=files + [Path(p) for p in res.checkpoints], extra={"timings": res.timings})
    n_students = sum(1 for r in res.reports if r.model in grid.STUDENTS)
    print(f"{n_students} student runs, {len(res.failures)} failures -> {out}")
    if res.failures:
        for f in res.failures:
            print(f"failed: world {f['world_seed']} seed {f['model_seed']} {f['model']}: {f['error']}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    reports = []
    for p in args.reports:
        reports.extend(evaluation.read_reports_csv(_need_file(p)))
    out = _out(args, "report")
    files = write_summary(out, reports)
    print(f"summarized {len(reports)} rows -> {out}")
    write_run_manifest(out, command="report", cfg=cfg, seeds={}, inputs=args.reports, outputs=files)
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth, "features": cmd_features, "label": cmd_label, "split": cmd_split,
    "train": cmd_train, "evaluate": cmd_evaluate, "stress": cmd_stress, "grid": cmd_grid, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (relative paths also searched in "
                                         f"${cfgmod.CONFIG_DIR_ENV})")
    common.add_argument("--preset", default="default", choices=sorted(cfgmod.PRESETS))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="cvar-distill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synth", parents=[common], help="simulate a synthetic world (or write the real panel)")
    s.add_argument("--world-seed", type=int)
    s.add_argument("--horizon", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--real", action="store_true", help="write the real (reference) panel instead")

    s = sub.add_parser("features", parents=[common], help="build feature matrices for a panel directory")
    s.add_argument("--panel", required=True)
    s.add_argument("--level", default="L1", choices=["L1", "L2", "L3"])

    s = sub.add_parser("label", parents=[common], help="teacher labels for feature dates")
    s.add_argument("--panel", required=True)
    s.add_argument("--features", help="directory holding features.csv (default: --panel)")
    s.add_argument("--real", action="store_true", help="tag the pairs as real")

    s = sub.add_parser("split", parents=[common], help="train/val/test split of real and synthetic pairs")
    s.add_argument("--real", required=True)
    s.add_argument("--synth", required=True)
    s.add_argument("--world-seed", type=int, required=True)

    s = sub.add_parser("train", parents=[common], help="train one student")
    s.add_argument("--split", required=True)
    s.add_argument("--model", required=True, choices=list(grid.STUDENT_KINDS))
    s.add_argument("--model-seed", type=int, required=True)

    s = sub.add_parser("evaluate", parents=[common], help="evaluate checkpoints and baselines")
    s.add_argument("--checkpoints", nargs="*", default=[])
    s.add_argument("--split")
    s.add_argument("--protocol", default="test", choices=["test", "c2a", "d2a"])
    s.add_argument("--level", nargs="+", default=["L1"], choices=["L1", "L2", "L3"])
    s.add_argument("--model-seed", type=int, default=0)

    s = sub.add_parser("stress", parents=[common], help="apply a stress transform to a return panel")
    s.add_argument("--panel", required=True)
    s.add_argument("--kind", required=True, choices=list(stress.KINDS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--param", action="append", metavar="NAME=VALUE")

    s = sub.add_parser("grid", parents=[common], help="full world-seed x model-seed sweep")
    s.add_argument("--workers", type=int)

    s = sub.add_parser("report", parents=[common], help="summarize report CSVs")
    s.add_argument("--reports", nargs="+", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            cfg = resolve_config(args)
            return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
