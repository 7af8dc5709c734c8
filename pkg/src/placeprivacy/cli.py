"""Command-line entry point: ``placeprivacy {ingest,run,variogram,fit,report,synth}``.

Exit codes: 0 success, 1 at least one sweep point failed, 2 invalid input or config.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import (
    EvaluationReport,
    density_stratified_accuracy,
    make_spatial_folds,
    make_user_folds,
    run_scenario,
)
from .features import FeatureMatrix, PoiContext, feature_columns, featurize
from .geo import GeoPoint, centroid, project_arrays
from .ingest import (
    CategoryTaxonomy,
    load_taxonomy,
    map_categories,
    merge_repeat_checkins,
    group_to_samples,
    osm_taxonomy,
    parse_checkins,
    parse_pois,
    pois_from_checkins,
    read_pois,
    read_samples,
    subsample_pois,
    write_pois,
    write_samples,
)
from .model import GbdtParams
from .obfuscate import ObfuscationPolicy, tune_m
from .profiling import PrivacyLossReport, fit_decay, profile_users
from .variogram import semivariogram

log = logging.getLogger("placeprivacy")

SUMMARY_COLUMNS = ["city", "policy", "radius", "scenario", "status", "n_samples", "n_users", "accuracy",
                   "profiling_error", "profiling_error_hard", "hit@1", "hit@5", "median_PL"]
COMBINED = "combined"


class CliError(Exception):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _data_dir(cfg: ExperimentConfig, city: str) -> str:
    return os.path.join(cfg.out, "data", city)


# -- ingest ----------------------------------------------------------------------

def _taxonomy(cfg: ExperimentConfig) -> CategoryTaxonomy:
    return load_taxonomy(cfg.resolve(cfg.mapping), cfg.categories)


def _poi_taxonomy(cfg: ExperimentConfig, source) -> CategoryTaxonomy:
    if source.mapping is not None:
        return load_taxonomy(cfg.resolve(source.mapping), cfg.categories)
    if source.format == "osm_mapped_csv":
        return osm_taxonomy(cfg.categories)
    return _taxonomy(cfg)


def ingest_city(cfg: ExperimentConfig, city) -> dict:
    taxonomy = _taxonomy(cfg)
    path = cfg.resolve(city.checkins)
    checkins, malformed = parse_checkins(path)
    if not checkins:
        raise CliError(f"{city.name}: no check-ins parsed from {path}")
    mapped, dropped = map_categories(checkins, taxonomy)
    merged, removed = merge_repeat_checkins(mapped)
    samples = group_to_samples(merged)
    if not samples:
        raise CliError(f"{city.name}: no samples left after category cleaning")

    src = city.pois
    if src.path is None:
        pois = pois_from_checkins(mapped, taxonomy)
    elif src.format == "canonical_csv":
        pois = read_pois(cfg.resolve(src.path))
    else:
        pois = parse_pois(cfg.resolve(src.path), src.format, _poi_taxonomy(cfg, src))
    if not pois:
        raise CliError(f"{city.name}: no POIs available")

    anchor = GeoPoint(*city.anchor) if city.anchor else centroid(
        np.array([s.geo.lat for s in samples]), np.array([s.geo.lon for s in samples]))
    outdir = _data_dir(cfg, city.name)
    os.makedirs(outdir, exist_ok=True)
    write_samples(samples, os.path.join(outdir, "samples.csv"))
    write_pois(pois, os.path.join(outdir, "pois.csv"))
    report = {
        "city": city.name,
        "checkins_parsed": len(checkins),
        "malformed_lines": len(malformed),
        "dropped_checkins": dropped,
        "removed_by_merge": removed,
        "removed_share": removed / len(mapped) if mapped else 0.0,
        "samples": len(samples),
        "users": len({s.user_id for s in samples}),
        "pois": len(pois),
        "anchor": [anchor.lat, anchor.lon],
    }
    _write_json(os.path.join(outdir, "ingest_report.json"), report)
    return report


def cmd_ingest(cfg: ExperimentConfig) -> int:
    for city in cfg.cities:
        r = ingest_city(cfg, city)
        print(f"{r['city']}: {r['samples']} samples, {r['users']} users, {r['pois']} POIs, "
              f"{r['removed_by_merge']} check-ins merged ({100 * r['removed_share']:.3f}%), "
              f"{r['dropped_checkins']} dropped labels, {r['malformed_lines']} malformed lines")
    return 0


# -- run -------------------------------------------------------------------------

@dataclass
class CityData:
    name: str
    samples: list
    pois: list
    anchor: GeoPoint


def load_city(cfg: ExperimentConfig, name: str) -> CityData:
    d = _data_dir(cfg, name)
    paths = [os.path.join(d, f) for f in ("samples.csv", "pois.csv", "ingest_report.json")]
    if not all(os.path.exists(p) for p in paths):
        raise CliError(f"{name}: ingested data not found in {d}; run `placeprivacy ingest` first")
    with open(paths[2], encoding="utf-8") as fh:
        anchor = GeoPoint(*json.load(fh)["anchor"])
    return CityData(name, read_samples(paths[0]), read_pois(paths[1]), anchor)


def _policies(cfg: ExperimentConfig, ctx: PoiContext, samples) -> list[ObfuscationPolicy]:
    out = [ObfuscationPolicy.fixed(r, cfg.seed) for r in cfg.sweep.radii]
    ms = list(cfg.sweep.context_aware_m)
    if cfg.sweep.tune_target_radius is not None:
        m, achieved = tune_m(ctx.index, ctx.local_xy([s.geo for s in samples]), cfg.sweep.tune_target_radius)
        log.info("tuned m=%d (mean radius %.1f m)", m, achieved)
        ms.append(m)
    out += [ObfuscationPolicy.context_aware(m, cfg.seed) for m in dict.fromkeys(ms)]
    return out


def _slice(full: FeatureMatrix, mode: str, categories) -> FeatureMatrix:
    cols = feature_columns(mode, categories)
    idx = [full.columns.index(c) for c in cols]
    return FeatureMatrix(full.X[:, idx], full.y, cols, full.keys, full.radius_used)


def _point_metrics(rep: EvaluationReport, weighted: bool) -> tuple[PrivacyLossReport, PrivacyLossReport]:
    soft = profile_users(rep.user_ids, rep.y_true, rep.weights, rep.n_classes, "soft",
                         rep.y_pred, rep.proba, weighted=weighted)
    hard = profile_users(rep.user_ids, rep.y_true, rep.weights, rep.n_classes, "hard",
                         rep.y_pred, rep.proba, weighted=weighted)
    return soft, hard


def _row(city, policy, radius, scenario, status, n=None, users=None, acc=None, soft=None, hard=None) -> dict:
    return {
        "city": city, "policy": policy, "radius": radius, "scenario": scenario, "status": status,
        "n_samples": n, "n_users": users, "accuracy": acc,
        "profiling_error": None if soft is None else soft.mean_error,
        "profiling_error_hard": None if hard is None else hard.mean_error,
        "hit@1": None if soft is None else soft.hit_at[1],
        "hit@5": None if soft is None else soft.hit_at[5],
        "median_PL": None if soft is None else soft.median_pl,
    }


def _write_bundle(outdir, rep: EvaluationReport, soft, hard, density) -> None:
    rep.write(outdir, "")
    soft.write_csv(os.path.join(outdir, "profiles_soft.csv"), rep.categories)
    hard.write_csv(os.path.join(outdir, "profiles_hard.csv"), rep.categories)
    density.write_csv(os.path.join(outdir, "density.csv"))
    with open(os.path.join(outdir, "pl_cdf.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["privacy_loss", "cdf"])
        for v, q in soft.cdf():
            w.writerow([repr(v), repr(q)])
    _write_json(os.path.join(outdir, "metrics.json"), {
        "evaluation": {k: v for k, v in rep.summary().items() if k not in ("confusion", "confusion_normalized")},
        "profiling_soft": soft.summary(),
        "profiling_hard": hard.summary(),
        "density": {"rows": density.rows, "mean_density_correct": density.mean_density_correct,
                    "mean_density_incorrect": density.mean_density_incorrect},
    })


def run_city(cfg: ExperimentConfig, data: CityData, workers: int | None, collect: dict) -> list[dict]:
    categories = list(cfg.categories)
    samples = data.samples
    pois = subsample_pois(data.pois, cfg.poi_fraction, cfg.seed) if cfg.poi_fraction < 1 else data.pois
    ctx = PoiContext(pois, categories, data.anchor)
    plan = make_user_folds(samples, cfg.n_folds, cfg.seed) if cfg.split == "user_cv" else make_spatial_folds(samples)
    rows = []
    spatial_needed = any(s in ("gbdt_spatial", "gbdt_spatiotemporal") for s in cfg.scenarios)
    temporal = featurize(samples, "temporal", None, None, categories) if "gbdt_temporal" in cfg.scenarios else None
    for policy in _policies(cfg, ctx, samples):
        full = None
        if spatial_needed:
            try:
                full = featurize(samples, "spatiotemporal", ctx, policy, categories, cfg.k, cfg.feature_radius)
            except Exception as exc:  # recorded per point below
                full = exc
        for scenario in cfg.scenarios:
            radius = policy.radius if policy.mode == "fixed" else None
            try:
                if isinstance(full, Exception):
                    raise full
                feats = None
                if scenario == "gbdt_temporal":
                    feats = temporal
                elif scenario == "gbdt_spatial":
                    feats = _slice(full, "spatial", categories)
                elif scenario == "gbdt_spatiotemporal":
                    feats = full
                rep = run_scenario(samples, scenario, policy, plan, ctx, categories, cfg.model,
                                   cfg.k, cfg.feature_radius, cfg.seed, features=feats, workers=workers)
                soft, hard = _point_metrics(rep, cfg.profiling_weighted)
                density = density_stratified_accuracy(rep, samples, ctx, cfg.density_radius, cfg.density_edges)
                _write_bundle(os.path.join(cfg.out, "runs", data.name, policy.label, scenario), rep, soft, hard, density)
                rows.append(_row(data.name, policy.label, rep.radius, scenario, "ok", len(samples),
                                 len(soft.user_ids), rep.accuracy, soft, hard))
                collect.setdefault((policy.label, scenario), []).append((data.name, rep))
                log.info("%s %s %s: accuracy %.4f", data.name, policy.label, scenario, rep.accuracy)
            except Exception as exc:
                msg = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
                log.error("%s %s %s %s", data.name, policy.label, scenario, msg)
                rows.append(_row(data.name, policy.label, radius, scenario, msg))
    return rows


def _combined_rows(cfg: ExperimentConfig, rows: list[dict], collect: dict) -> list[dict]:
    n_cities = len(cfg.cities)
    out = []
    for (policy, scenario), reps in collect.items():
        if len(reps) != n_cities:
            continue
        city_rows = [r for r in rows if r["policy"] == policy and r["scenario"] == scenario and r["status"] == "ok"]
        radius = float(np.mean([r["radius"] for r in city_rows]))
        if cfg.pool == "joint":
            # one pool over all cities; user ids are prefixed with the city name
            uid = np.concatenate([[f"{c}/{u}" for u in r.user_ids] for c, r in reps])
            yt = np.concatenate([r.y_true for _, r in reps])
            yp = np.concatenate([r.y_pred for _, r in reps])
            pr = np.concatenate([r.proba for _, r in reps])
            w = np.concatenate([r.weights for _, r in reps])
            nc = reps[0][1].n_classes
            soft = profile_users(uid, yt, w, nc, "soft", yp, pr, weighted=cfg.profiling_weighted)
            hard = profile_users(uid, yt, w, nc, "hard", yp, pr, weighted=cfg.profiling_weighted)
            acc = float(np.mean([r["accuracy"] for r in city_rows]))
            out.append(_row(COMBINED, policy, radius, scenario, "ok", int(len(yt)), len(soft.user_ids), acc, soft, hard))
        else:
            row = {"city": COMBINED, "policy": policy, "radius": radius, "scenario": scenario, "status": "ok",
                   "n_samples": sum(r["n_samples"] for r in city_rows), "n_users": sum(r["n_users"] for r in city_rows)}
            for key in ("accuracy", "profiling_error", "profiling_error_hard", "hit@1", "hit@5", "median_PL"):
                row[key] = float(np.mean([r[key] for r in city_rows]))
            out.append(row)
    return out


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])


def read_summary(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _versions() -> dict:
    import numba
    import scipy
    import yaml

    return {"placeprivacy": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "pyyaml": yaml.__version__}


def write_manifest(cfg: ExperimentConfig, command: str) -> None:
    inputs = {}
    for city in cfg.cities:
        d = _data_dir(cfg, city.name)
        for f in ("samples.csv", "pois.csv"):
            p = os.path.join(d, f)
            if os.path.exists(p):
                inputs[f"{city.name}/{f}"] = _sha256(p)
    _write_json(os.path.join(cfg.out, f"manifest_{command}.json"), {
        "command": command,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs_sha256": inputs,
        "versions": _versions(),
    })


def cmd_run(cfg: ExperimentConfig, workers: int | None = None) -> int:
    datasets = [load_city(cfg, c.name) for c in cfg.cities]
    os.makedirs(cfg.out, exist_ok=True)
    rows: list[dict] = []
    collect: dict = {}
    for data in datasets:
        rows += run_city(cfg, data, workers, collect)
    if len(cfg.cities) > 1:
        rows += _combined_rows(cfg, rows, collect)
    path = os.path.join(cfg.out, "summary.csv")
    write_summary(rows, path)
    write_manifest(cfg, "run")
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"wrote {path} ({len(rows)} rows, {len(failed)} failed)")
    return 1 if failed else 0


# -- variogram / fit / report ----------------------------------------------------

def cmd_variogram(cfg: ExperimentConfig, city: str | None = None, output: str | None = None) -> int:
    vc = cfg.variogram
    data = load_city(cfg, city or vc.city or cfg.cities[0].name)
    lat = np.array([p.geo.lat for p in data.pois])
    lon = np.array([p.geo.lon for p in data.pois])
    x, y = project_arrays(data.anchor, lat, lon)
    code = {c: i for i, c in enumerate(cfg.categories)}
    codes = np.array([code[p.category] for p in data.pois])
    center = None
    if vc.center is not None:
        cx, cy = project_arrays(data.anchor, np.array([vc.center[0]]), np.array([vc.center[1]]))
        center = (float(cx[0]), float(cy[0]))
    size = None if vc.size_km is None else vc.size_km * 1000.0
    res = semivariogram(np.column_stack([x, y]), codes, vc.n_pairs, vc.bins, cfg.seed, center, size)
    os.makedirs(cfg.out, exist_ok=True)
    path = output or os.path.join(cfg.out, f"variogram_{data.name}.csv")
    res.write_csv(path)
    for lo, hi, g, n in res.rows():
        print(f"({lo:g}, {hi:g}]  gamma={'nan' if g is None else f'{g:.4f}'}  pairs={n}")
    return 0


def fit_summary(rows: list[dict], scenario: str, metric: str = "accuracy", city: str | None = None) -> dict:
    if city is None:
        city = COMBINED if any(r["city"] == COMBINED for r in rows) else rows[0]["city"]
    pts = [r for r in rows if r["city"] == city and r["scenario"] == scenario and r["status"] == "ok"
           and r["policy"].startswith("r")]
    if len(pts) < 3:
        raise CliError(f"need at least 3 fixed-radius rows for {city}/{scenario}, found {len(pts)}")
    xs = [float(r["radius"]) for r in pts]
    ys = [float(r[metric]) for r in pts]
    fit = fit_decay(xs, ys)
    return {"city": city, "scenario": scenario, "metric": metric, "a": fit.a, "c": fit.c, "lam": fit.lam,
            "rss": fit.rss, "half_radius": None if fit.lam == 0 else fit.half_radius(),
            "radii": xs, "values": ys}


def cmd_fit(summary: str, scenario: str, metric: str, city: str | None, output: str | None) -> int:
    if not os.path.exists(summary):
        raise CliError(f"summary file not found: {summary}")
    result = fit_summary(read_summary(summary), scenario, metric, city)
    path = output or os.path.join(os.path.dirname(os.path.abspath(summary)), f"fit_{result['city']}_{scenario}_{metric}.json")
    _write_json(path, result)
    hr = result["half_radius"]
    print(f"{metric} = {result['a']:.4f} + {result['c']:.4f} * exp(-{result['lam']:.6f} r)"
          f"  (half radius {'inf' if hr is None else f'{hr:.2f}'} m) -> {path}")
    return 0


def format_report(rows: list[dict], policy: str) -> str:
    sel = [r for r in rows if r["policy"] == policy]
    if not sel:
        raise CliError(f"no rows for policy {policy!r}")
    cols = ["city", "scenario", "accuracy", "profiling_error", "hit@5", "median_PL"]
    table = [cols] + [[r["city"], r["scenario"]] + [
        f"{float(r[c]):.3f}" if r[c] not in ("", None) else r["status"] for c in cols[2:]] for r in sel]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table)


def cmd_report(summary: str, policy: str, output: str | None) -> int:
    if not os.path.exists(summary):
        raise CliError(f"summary file not found: {summary}")
    rows = read_summary(summary)
    text = format_report(rows, policy)
    print(text)
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_synth(outdir: str, n_users: int, seed: int) -> int:
    from .synth import SynthSpec, write_city

    spec = SynthSpec(n_users=n_users, seed=seed)
    paths = write_city(spec, os.path.join(outdir, "city"))
    cfg_path = os.path.join(outdir, "config.yaml")
    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write(
            "output_dir: out\n"
            f"seed: {seed}\n"
            "mapping: city/mapping.tsv\n"
            "cities:\n"
            "  - name: synth\n"
            "    checkins: city/checkins.tsv\n"
            f"    anchor: [{spec.anchor.lat}, {spec.anchor.lon}]\n"
            "    pois: {path: city/pois.csv, format: canonical_csv}\n"
            "n_folds: 5\n"
            "sweep:\n"
            "  radii: [0, 50, 100, 200, 400, 800]\n"
            "model: {n_rounds: 30, max_depth: 6}\n"
            "variogram: {size_km: 4, n_pairs: 1000000}\n"
        )
    print(f"wrote {paths['checkins']}, {paths['pois']} and {cfg_path}")
    return 0


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="placeprivacy", description="Semantic location privacy attack simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    def with_config(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted key, YAML value); repeatable")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        return sp

    with_config(command("ingest", "parse check-ins and POIs into canonical CSV files"))
    run = with_config(command("run", "run the obfuscation sweep for all scenarios"))
    run.add_argument("--workers", type=int, help="worker processes for CV folds (default: $PLACEPRIVACY_WORKERS or 1)")
    vg = with_config(command("variogram", "semivariogram of POI categories"))
    vg.add_argument("--city")
    vg.add_argument("--output")

    fit = command("fit", "fit an exponential decay to a sweep summary")
    fit.add_argument("summary")
    fit.add_argument("--scenario", default="gbdt_spatiotemporal")
    fit.add_argument("--metric", default="accuracy", choices=["accuracy", "profiling_error", "hit@1", "hit@5", "median_PL"])
    fit.add_argument("--city")
    fit.add_argument("--output")

    rep = command("report", "print the results table for one sweep point")
    rep.add_argument("summary")
    rep.add_argument("--policy", default="r100", help="policy label, e.g. r100 or m16")
    rep.add_argument("--output")

    syn = command("synth", "write a synthetic city and a matching config")
    syn.add_argument("outdir")
    syn.add_argument("--users", type=int, default=200)
    syn.add_argument("--seed", type=int, default=0)
    return p


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(os.path.abspath(args.output_dir))}")
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fit":
            return cmd_fit(args.summary, args.scenario, args.metric, args.city, args.output)
        if args.command == "report":
            return cmd_report(args.summary, args.policy, args.output)
        if args.command == "synth":
            return cmd_synth(args.outdir, args.users, args.seed)
        cfg = _config_from_args(args)
        if args.command == "ingest":
            code = cmd_ingest(cfg)
            write_manifest(cfg, "ingest")
            return code
        if args.command == "run":
            return cmd_run(cfg, args.workers)
        if args.command == "variogram":
            return cmd_variogram(cfg, args.city, args.output)
    except (CliError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
