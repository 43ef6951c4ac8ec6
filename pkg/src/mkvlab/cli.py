"""Orchestration and the ``mkv`` command line.

``mkv simulate --config exp.cfg`` runs every replica of an experiment and
writes::

    <output.dir>/<id>/
        manifest.json          config echo, versions, sha256 of every file
        metrics.csv            per-step columns averaged over replicas
        report.json            final distances, branches, G ladder, checks
        replica_<r>/           trajectory.bin, metrics.csv, record.json
        stationary/            branch_<i>.mkvg, branches.json (if computed)

The exit status is 0 when every configured threshold holds, 1 on a breach
or a failed replica, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import math
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config, render
from .core import PURPOSE_REFERENCE, RngStream
from .diagnostics import (
    GFunctional,
    ResolutionError,
    ergodic_distance_curve,
    estimate_density,
    evaluate_G,
    helmholtz,
    martingale_ladder,
    stationarity_residual,
)
from .dynamics import METRIC_COLUMNS, DivergenceError, RunRecord, path_sample, read_trajectory, run
from .fields import bump
from .io import json_dumps, write_csv, write_json
from .stationary import GridSpec, enumerate_branches, gaussian_grid, gaussian_reference, write_grid
from .transport import WeightedSampleMeasure, distance_to_set, wasserstein

__all__ = ["References", "build_references", "diagnose_record", "orchestrate", "main"]


class References:
    """Reference measures for distance diagnostics and their free energies."""

    def __init__(self, measures, energies, source, branches=None, grids=None):
        self.measures = measures
        self.energies = energies
        self.source = source
        self.branches = branches or []
        self.grids = grids or []


def _reference_source(cfg: ExperimentConfig) -> str:
    ref = cfg["diagnostics.reference"]
    if ref == "auto":
        ref = "closed_form" if cfg["model.kind"] == "quadratic" else "branches"
    return ref


def _grid_samples(grid, m: int, seed: int) -> np.ndarray:
    # inverse-CDF draws of cell centres
    rng = RngStream(seed)
    u = rng.uniform(0, np.arange(m), 0, 0, purpose=PURPOSE_REFERENCE)
    cdf = np.cumsum(grid.masses().ravel())
    idx = np.minimum(np.searchsorted(cdf, u * cdf[-1]), cdf.size - 1)
    return grid.centers()[idx]


def _grid_measure(grid, cfg: ExperimentConfig) -> WeightedSampleMeasure:
    if grid.d == 1:
        return grid.as_measure(1e-14)
    return WeightedSampleMeasure.uniform(
        _grid_samples(grid, cfg["diagnostics.reference_samples"], cfg["run.seed"]))


def solve_branches(cfg: ExperimentConfig, model=None):
    model = model or cfg.model()
    d = cfg["run.d"]
    if d > 2:
        raise ValueError("the lattice solver supports d = 1 and d = 2")
    spec = GridSpec.symmetric(cfg["stationary.grid.half_width"], cfg["stationary.grid.h"], d)
    inits = [gaussian_grid(spec, np.full(d, c), cfg["stationary.init_variance"])
             for c in cfg["stationary.inits"]]
    return enumerate_branches(model, inits, damping=cfg["stationary.damping"],
                              tol=cfg["stationary.tol"], max_iter=cfg["stationary.max_iter"])


def build_references(cfg: ExperimentConfig, model=None) -> References:
    model = model or cfg.model()
    d = cfg["run.d"]
    if _reference_source(cfg) == "closed_form":
        if cfg["model.kind"] != "quadratic":
            raise ValueError("closed-form reference exists only for the quadratic model")
        lam, alpha, sigma = cfg["model.lambda"], cfg["model.alpha"], cfg["model.sigma"]
        if d <= 2:
            var, grid = gaussian_reference(lam, alpha, sigma, d=d)
            return References([_grid_measure(grid, cfg)], [helmholtz(grid, model).H],
                              "closed_form", grids=[grid])
        var = sigma**2 / (lam + alpha)
        z = RngStream(cfg["run.seed"]).particle_normals(
            0, np.arange(cfg["diagnostics.reference_samples"]), 0, d, purpose=PURPOSE_REFERENCE)
        return References([WeightedSampleMeasure.uniform(math.sqrt(var) * z)], [math.nan],
                          "closed_form")
    branches = solve_branches(cfg, model)
    return References([_grid_measure(b.grid, cfg) for b in branches],
                      [helmholtz(b.grid, model).H for b in branches], "branches",
                      branches=branches, grids=[b.grid for b in branches])


def diagnose_record(rec: RunRecord, cfg: ExperimentConfig, refs: References | None,
                    model=None, instruments=None) -> dict:
    """Diagnostic columns for one run, aligned with its per-step series.

    Entries are NaN at steps without a recorded state (and wherever an
    instrument does not apply).
    """
    model = model or cfg.model()
    enabled = list(cfg["diagnostics.enabled"] if instruments is None else instruments)
    K = len(rec.diagnostics["k"]) - 1
    cols = {c: rec.diagnostics[c] for c in METRIC_COLUMNS[:4]}
    if not enabled:
        return cols
    for c in METRIC_COLUMNS[4:]:
        cols[c] = np.full(K + 1, np.nan)
    store = rec.store
    every = cfg["diagnostics.every"]
    sel = list(range(0, len(store), every))
    if sel[-1] != len(store) - 1:
        sel.append(len(store) - 1)
    p = cfg["diagnostics.p"]
    if refs is not None and refs.measures:
        if "w2_ref" in enabled:
            for r in sel:
                cols["w2_ref"][store.ks[r]] = distance_to_set(rec.measure_at(r), refs.measures, p)[0]
        if "wp_erg" in enabled:
            curve = ergodic_distance_curve(rec, refs.measures, p)
            cols["wp_erg"][curve.ks] = curve.values
    d = store.d
    if d <= 2 and ({"helmholtz", "residual"} & set(enabled)):
        spec = GridSpec.symmetric(cfg["diagnostics.grid.half_width"], cfg["diagnostics.grid.h"], d)
        for r in sel:
            dens = estimate_density(rec.measure_at(r), spec)
            k = store.ks[r]
            if "helmholtz" in enabled:
                hz = helmholtz(dens, model)
                cols["helmholtz_F"][k], cols["helmholtz_V"][k] = hz.F, hz.V_term
                cols["helmholtz_U"][k], cols["helmholtz_H"][k] = hz.U_term, hz.H
            if "residual" in enabled:
                try:
                    cols["residual"][k] = stationarity_residual(dens, model)
                except ValueError:
                    pass
    if "g_value" in enabled:
        win = cfg["diagnostics.g.window"]
        G = GFunctional(bump(np.zeros(d), cfg["diagnostics.g.radius"]), 0.0, win)
        t_end = store.times[-1]
        for r in sel:
            t0 = store.times[r]
            if t0 + win > t_end:
                break
            try:
                P = path_sample(store, t0, win, cfg["diagnostics.g.grid_step"])
                cols["g_value"][store.ks[r]] = evaluate_G(G, P, model)
            except ResolutionError:
                pass
    return cols


def _last_finite(x) -> float | None:
    x = np.asarray(x, dtype=float)
    ok = np.isfinite(x)
    return float(x[ok][-1]) if ok.any() else None


def _check(name, value, threshold, ok):
    return {"name": name, "value": value, "threshold": threshold, "pass": bool(ok)}


def _run_one(cfg: ExperimentConfig, r: int, threads: int):
    try:
        return run(cfg.run_config(r, threads=threads)), None
    except DivergenceError as err:
        return err.record, str(err)


def orchestrate(cfg: ExperimentConfig, out: str | Path | None = None, *, force: bool = False,
                threads: int | None = None) -> tuple[int, Path, dict]:
    """Run an experiment end to end and persist it; returns ``(status, run_dir, report)``."""
    threads = cfg["run.threads"] if threads is None else int(threads)
    root = Path(out if out is not None else cfg["output.dir"]) / cfg.run_id()
    if root.exists():
        if not force:
            raise FileExistsError(f"{root} exists; pass --force to overwrite")
        shutil.rmtree(root)
    root.mkdir(parents=True)
    model = cfg.model()
    R = cfg["run.replicas"]

    refs = None
    enabled = cfg["diagnostics.enabled"]
    if cfg.needs_branches() or {"w2_ref", "wp_erg"} & set(enabled) or \
            cfg["diagnostics.thresholds.final_helmholtz_gap"] is not None:
        refs = build_references(cfg, model)
    if refs is None and cfg["stationary.enabled"]:
        refs = References([], [], "none", branches=solve_branches(cfg, model))
    branch_summaries = []
    if refs is not None and refs.branches:
        sdir = root / "stationary"
        sdir.mkdir()
        for i, b in enumerate(refs.branches):
            write_grid(sdir / f"branch_{i}.mkvg", b.grid)
            branch_summaries.append({"index": i, **b.summary(), "H": refs.energies[i]})
        write_json(sdir / "branches.json", branch_summaries)

    inner = threads if R == 1 else 1
    if R > 1 and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda r: _run_one(cfg, r, 1), range(R)))
    else:
        results = [_run_one(cfg, r, inner) for r in range(R)]

    per_replica, all_cols = [], []
    for r, (rec, failure) in enumerate(results):
        rec.manifest["experiment"] = cfg.values
        cols = diagnose_record(rec, cfg, refs, model)
        rec.diagnostics.update(cols)
        rec.save(root / f"replica_{r}")
        all_cols.append(cols)
        entry = {"replica": r, "failure": failure, "steps": int(rec.diagnostics["k"][-1]),
                 "max_m2": float(np.max(rec.diagnostics["m2"]))}
        for c in ("w2_ref", "wp_erg", "helmholtz_H", "residual"):
            if c in cols:
                entry[f"final_{c}"] = _last_finite(cols[c])
        if "w2_ref" in cols and refs is not None and refs.measures:
            entry["final_argmin"] = distance_to_set(rec.measure_at(len(rec.store) - 1),
                                                    refs.measures, cfg["diagnostics.p"])[1]
        per_replica.append(entry)

    names = list(all_cols[0].keys())
    K = max(len(c["k"]) for c in all_cols)
    merged = []
    for name in names:
        mat = np.full((len(all_cols), K), np.nan)
        for i, c in enumerate(all_cols):
            mat[i, : len(c[name])] = c[name]
        if name == "k":
            merged.append(np.arange(K))
        else:
            with np.errstate(all="ignore"):
                cnt = np.isfinite(mat).sum(axis=0)
                merged.append(np.where(cnt > 0, np.nansum(mat, axis=0) / np.maximum(cnt, 1), np.nan))
    write_csv(root / "metrics.csv", names, merged)

    ladder = []
    if cfg["diagnostics.g.ladder"]:
        template = cfg.replace(schedule__exponent=cfg["diagnostics.g.ladder_schedule_exponent"],
                               schedule__kind="power_law").run_config(0)
        G = GFunctional(bump(np.zeros(cfg["run.d"]), cfg["diagnostics.g.radius"]), 0.0,
                        cfg["diagnostics.g.window"])
        rungs = martingale_ladder(template, [tuple(x) for x in cfg["diagnostics.g.ladder"]], G,
                                  replicas=R, grid_step=cfg["diagnostics.g.grid_step"],
                                  threads=threads)
        ladder = [{"t": g.t, "n": g.n, "mean_abs_G": g.mean_abs, "stderr": g.stderr} for g in rungs]

    checks = []
    th = {k.rsplit(".", 1)[1]: cfg[k] for k in cfg.values if k.startswith("diagnostics.thresholds.")}
    for r_entry in per_replica:
        r = r_entry["replica"]
        if r_entry["failure"]:
            checks.append(_check(f"replica_{r}.completed", False, True, False))
        if th["max_m2"] is not None:
            v = r_entry["max_m2"]
            checks.append(_check(f"replica_{r}.max_m2", v, th["max_m2"], v <= th["max_m2"]))
        for key, col in (("final_w2_ref", "final_w2_ref"), ("final_wp_erg", "final_wp_erg")):
            if th[key] is not None:
                v = r_entry.get(col)
                checks.append(_check(f"replica_{r}.{key}", v, th[key], v is not None and v <= th[key]))
        if th["final_helmholtz_gap"] is not None:
            v = r_entry.get("final_helmholtz_H")
            gap = None if v is None or refs is None else min(abs(v - e) for e in refs.energies)
            checks.append(_check(f"replica_{r}.final_helmholtz_gap", gap, th["final_helmholtz_gap"],
                                 gap is not None and gap <= th["final_helmholtz_gap"]))
    if th["g_ratio"] is not None:
        vals = [g["mean_abs_G"] for g in ladder]
        ok = len(vals) >= 2 and all(a > b for a, b in zip(vals, vals[1:]))
        ratio = vals[-1] / vals[0] if len(vals) >= 2 and vals[0] > 0 else None
        checks.append(_check("g_ladder.decreasing", ok, True, ok))
        checks.append(_check("g_ladder.ratio", ratio, th["g_ratio"],
                             ratio is not None and ratio <= th["g_ratio"]))
    passed = all(c["pass"] for c in checks) and not any(e["failure"] for e in per_replica)
    report = {
        "pass": passed,
        "checks": checks,
        "replicas": per_replica,
        "branches": branch_summaries,
        "g_ladder": ladder,
        "reference": None if refs is None else {"source": refs.source, "H": refs.energies},
    }
    write_json(root / "report.json", report)

    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "run_id": cfg.run_id(),
        "code_version": __version__,
        "config": cfg.values,
        "config_text": render(cfg),
        "seed": cfg["run.seed"],
        "replicas": R,
        "model": results[0][0].manifest["model"],
        "schedule": results[0][0].manifest["schedule"],
        "files": {str(p.relative_to(root)): _sha256(p) for p in files},
    }
    write_json(root / "manifest.json", manifest)
    return (0 if passed else 1), root, report


def _sha256(path: Path) -> str:
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()


def verify_manifest(root: str | Path) -> list[str]:
    """Files whose checksum differs from ``manifest.json`` (or are missing from it)."""
    root = Path(root)
    man = json.loads((root / "manifest.json").read_text())
    bad = [name for name, h in man["files"].items()
           if not (root / name).exists() or _sha256(root / name) != h]
    extra = [str(p.relative_to(root)) for p in root.rglob("*")
             if p.is_file() and p.name != "manifest.json" and str(p.relative_to(root)) not in man["files"]]
    return bad + extra


# --- command line -----------------------------------------------------------------


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise SystemExit("error: --config is required")
    cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(run__seed=args.seed)
    return cfg


def _cmd_simulate(args) -> int:
    cfg = _load_config(args)
    status, root, report = orchestrate(cfg, args.out, force=args.force, threads=args.threads)
    for c in report["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']} value={c['value']} threshold={c['threshold']}")
    print(f"{root} {'pass' if report['pass'] else 'fail'}")
    return status


def _cmd_stationary(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or Path(cfg["output.dir"]) / cfg.run_id() / "stationary")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.model()
    branches = solve_branches(cfg, model)
    summary = []
    for i, b in enumerate(branches):
        write_grid(out / f"branch_{i}.mkvg", b.grid)
        summary.append({"index": i, "file": f"branch_{i}.mkvg", **b.summary(),
                        "H": helmholtz(b.grid, model).H})
    write_json(out / "branches.json", summary)
    sys.stdout.write(json_dumps(summary))
    return 0


def _slice(path, index: int) -> WeightedSampleMeasure:
    times, arr = read_trajectory(path)
    if len(times) == 0:
        raise ValueError(f"{path} holds no records")
    return WeightedSampleMeasure.uniform(arr[index])


def _cmd_distance(args) -> int:
    a, b = _slice(args.first, args.index), _slice(args.second, args.index)
    res = wasserstein(a, b, args.p, full=True)
    sys.stdout.write(json_dumps({"p": args.p, "value": res.value, "method": res.method,
                                 "exact": res.exact, "epsilon": res.epsilon, "m": [a.m, b.m]}))
    return 0


def _record_config(rec: RunRecord, args) -> ExperimentConfig:
    if args.config:
        return _load_config(args)
    vals = rec.manifest.get("experiment")
    if vals is None:
        raise SystemExit("error: record has no embedded experiment config; pass --config")
    return parse_config(render(ExperimentConfig(vals)))


def _cmd_diagnose(args) -> int:
    rec = RunRecord.load(args.record)
    cfg = _record_config(rec, args)
    instruments = list(METRIC_INSTRUMENTS)
    model = cfg.model()
    refs = build_references(cfg, model) if {"w2_ref", "wp_erg"} & set(instruments) else None
    cols = diagnose_record(rec, cfg, refs, model, instruments)
    series = [cols.get(c) for c in METRIC_COLUMNS]
    if not args.out:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            write_csv(Path(tmp) / "metrics.csv", METRIC_COLUMNS, series)
            sys.stdout.write((Path(tmp) / "metrics.csv").read_text())
        return 0
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, METRIC_COLUMNS, series)
    return 0


METRIC_INSTRUMENTS = ("w2_ref", "wp_erg", "helmholtz", "residual", "g_value")


def _replica_dirs(path: Path) -> list[Path]:
    if (path / "record.json").exists():
        return [path]
    dirs = sorted((p for p in path.glob("replica_*") if (p / "record.json").exists()),
                  key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise FileNotFoundError(f"no run records under {path}")
    return dirs


def _cmd_ergodic(args) -> int:
    out = []
    dirs = _replica_dirs(Path(args.run))
    cfg = None
    refs = None
    for d in dirs:
        rec = RunRecord.load(d)
        if cfg is None:
            cfg = _record_config(rec, args)
            refs = build_references(cfg)
        curve = ergodic_distance_curve(rec, refs.measures, cfg["diagnostics.p"])
        out.append({"record": str(d), "final": float(curve.values[-1]),
                    "final_tau": float(curve.taus[-1]),
                    "final_argmin": curve.argmins[-1],
                    "at_tau": {str(t): curve.value_at_tau(t) for t in args.at}})
    sys.stdout.write(json_dumps(out))
    return 0


def _cmd_report(args) -> int:
    root = Path(args.run)
    report = json.loads((root / "report.json").read_text())
    bad = verify_manifest(root) if (root / "manifest.json").exists() else ["manifest.json"]
    for c in report["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']} value={c['value']} threshold={c['threshold']}")
    for e in report["replicas"]:
        if e.get("failure"):
            print(f"FAIL replica_{e['replica']} {e['failure']}")
    if bad:
        print("FAIL checksums " + ", ".join(bad))
    ok = report["pass"] and not bad
    print("pass" if ok else "fail")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mkv", description="McKean-Vlasov particle experiments")
    ap.add_argument("--version", action="version", version=f"mkv {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="experiment config file")
        if out:
            p.add_argument("--out", help="output directory (output file for diagnose; default stdout)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--force", action="store_true", help="overwrite existing output")

    p = sub.add_parser("simulate", help="run all replicas, diagnose and report")
    common(p)
    p.set_defaults(func=_cmd_simulate)
    p = sub.add_parser("stationary", help="solve for stationary branches on a lattice")
    common(p)
    p.set_defaults(func=_cmd_stationary)
    p = sub.add_parser("distance", help="W_p between two trajectory-file slices")
    p.add_argument("first")
    p.add_argument("second")
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--index", type=int, default=-1, help="time slice to compare (default last)")
    p.set_defaults(func=_cmd_distance)
    p = sub.add_parser("diagnose", help="recompute metrics.csv for a run record")
    p.add_argument("record")
    common(p)
    p.set_defaults(func=_cmd_diagnose)
    p = sub.add_parser("ergodic", help="step-weighted ergodic distance per replica")
    p.add_argument("run")
    p.add_argument("--at", type=float, nargs="*", default=[], help="also report the curve at these times")
    common(p, out=False)
    p.set_defaults(func=_cmd_ergodic)
    p = sub.add_parser("report", help="print checks of a finished run and verify checksums")
    p.add_argument("run")
    p.set_defaults(func=_cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 2
    except (FileExistsError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
