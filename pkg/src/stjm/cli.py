"""Command-line workflows: simulate, fit, select and report.

Every command writes its outputs plus a single ``manifest.json`` into the
``--out`` directory. Exit codes: 0 success, 2 configuration error, 3 numerical
failure, 4 data or selection error.
"""

from __future__ import annotations

import argparse
import json
import os
import pickle
import subprocess
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DATA = 4

BUNDLE = "fit.pkl"
MANIFEST = "manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _version() -> str:
    from . import __version__

    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise CliError(EXIT_CONFIG, f"config {path} is not valid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise CliError(EXIT_CONFIG, f"config {path} must be a JSON object")
    return cfg


def _parse_times(text) -> list[int]:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    try:
        return [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--times must be comma-separated integers, got {text!r}") from None


def _write_manifest(out: Path, command: str, args, config: dict, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "config_path": str(args.config) if getattr(args, "config", None) else None,
        "config": config,
        "seed": config.get("seed"),
        "version": _version(),
        "outputs": [str(Path(p).name) for p in outputs],
        "duration_s": round(time.time() - started, 3),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def _limit_threads(n: int | None) -> None:
    n = n or os.cpu_count() or 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    from .errors import ModelSpecError
    from .simulate import SimConfig, simulate, write_dataset

    started = time.time()
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        sim = SimConfig.from_dict(cfg)
    except (ModelSpecError, TypeError, ValueError) as err:
        raise CliError(EXIT_CONFIG, str(err)) from None
    panel, truth = simulate(sim)
    out = Path(args.out)
    try:
        paths = write_dataset(panel, truth, out, sim.graph)
    except OSError as err:
        raise CliError(EXIT_CONFIG, f"cannot write to {out}: {err}") from None
    _write_manifest(out, "simulate", args, cfg, paths, started)
    print(f"simulated {panel.N} loans ({int(panel.event.sum())} events) -> {out}")
    return EXIT_OK


def _read_T_study(data_dir: Path, cfg: dict):
    if "T_study" in cfg:
        return int(cfg["T_study"])
    truth = data_dir / "truth.json"
    if truth.exists():
        return int(json.loads(truth.read_text())["T_study"])
    return None


def cmd_fit(args) -> int:
    from .data import load_panel
    from .errors import ConvergenceError, DataError, GraphError, InvalidHyperparameterError, ModelSpecError, NotPositiveDefiniteError
    from .gmrf import read_adjacency
    from .laplace import fit, write_summary_csv
    from .mcmc import run_mcmc
    from .model import ModelConfig, build_model

    started = time.time()
    cfg = _load_config(args.config)
    for key, val in (("seed", args.seed), ("variant", args.variant), ("method", args.method), ("data", args.data)):
        if val is not None:
            cfg[key] = val
    cfg.setdefault("variant", "m1")
    cfg.setdefault("method", "laplace")
    variant = str(cfg["variant"]).upper()
    method = cfg["method"]
    if method not in ("laplace", "mcmc"):
        raise CliError(EXIT_CONFIG, f"unknown method {method!r}")
    if "data" not in cfg:
        raise CliError(EXIT_CONFIG, "no data directory given (--data or config 'data')")
    if method == "mcmc" and cfg.get("seed") is None:
        raise CliError(EXIT_CONFIG, "seed required for mcmc")
    data_dir = Path(cfg["data"])

    graph = None
    adj = Path(cfg.get("adjacency", data_dir / "adjacency.txt"))
    if variant in ("M2", "M3"):
        if not adj.exists():
            raise CliError(EXIT_CONFIG, f"variant {variant} needs an adjacency file; none found at {adj}")
        try:
            graph = read_adjacency(adj)
        except (GraphError, ValueError) as err:
            raise CliError(EXIT_CONFIG, f"bad adjacency file {adj}: {err}") from None

    model_keys = {"tau_f", "covariates", "priors", "survival"}
    try:
        mcfg = ModelConfig.from_dict({"variant": variant, **{k: v for k, v in cfg.items() if k in model_keys}})
    except (TypeError, ValueError) as err:
        raise CliError(EXIT_CONFIG, f"bad model config: {err}") from None
    try:
        panel = load_panel(data_dir, T_study=_read_T_study(data_dir, cfg), standardize_names=cfg.get("standardize"))
        model = build_model(panel, graph, variant=variant, config=mcfg)
    except FileNotFoundError as err:
        raise CliError(EXIT_DATA, f"missing data file: {err.filename}") from None
    except (DataError, KeyError) as err:
        raise CliError(EXIT_DATA, f"data error: {err}") from None
    except ModelSpecError as err:
        raise CliError(EXIT_CONFIG, str(err)) from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    try:
        if method == "laplace":
            result = fit(model, grid_strategy=cfg.get("grid_strategy"))
            summaries = result.summaries
        else:
            mc = cfg.get("mcmc", {})
            theta0 = steps0 = None
            if mc.get("laplace_start", True):
                pilot = fit(model, grid_strategy="eb")
                theta0 = pilot.mode_internal
            result = run_mcmc(
                model,
                iterations=int(mc.get("iterations", 20000)),
                burn_in=int(mc.get("burn_in", 5000)),
                thin=int(mc.get("thin", 5)),
                seed=int(cfg["seed"]),
                theta0=theta0,
                steps0=steps0,
            )
            summaries = result.summaries()
            outputs += result.export(out / "chain")
    except (ConvergenceError, NotPositiveDefiniteError, InvalidHyperparameterError, FloatingPointError) as err:
        dump = {"error": type(err).__name__, "message": str(err), "trace": getattr(err, "trace", None)}
        (out / "diagnostics.json").write_text(json.dumps(dump, indent=1, default=float))
        _write_manifest(out, "fit", args, cfg, [out / "diagnostics.json"], started)
        raise CliError(EXIT_NUMERIC, f"inference failed: {err}") from None

    summary = out / "summary.csv"
    write_summary_csv(summaries, summary)
    bundle = out / BUNDLE
    label = cfg.get("label", f"{variant}-{method}")
    with open(bundle, "wb") as fh:
        pickle.dump({"kind": method, "label": label, "result": result}, fh, protocol=pickle.HIGHEST_PROTOCOL)
    outputs = [summary, bundle] + outputs
    _write_manifest(out, "fit", args, cfg, outputs, started)
    n_par = len(summaries)
    print(f"{label}: {n_par} parameters summarised in {time.time() - started:.1f} s -> {out}")
    return EXIT_OK


def load_bundle(fit_dir) -> dict:
    path = Path(fit_dir) / BUNDLE
    if not path.exists():
        raise CliError(EXIT_DATA, f"no fit bundle in {fit_dir}")
    with open(path, "rb") as fh:
        return pickle.load(fh)


def cmd_select(args) -> int:
    from .errors import SelectionError
    from .selection import CvdclReport, cvdcl_inla_times, cvdcl_mcmc_times

    started = time.time()
    cfg = _load_config(args.config)
    for key, val in (("seed", args.seed), ("times", args.times), ("draws", args.draws), ("method", args.method)):
        if val is not None:
            cfg[key] = val
    times = _parse_times(cfg.get("times", "12,18,24,30,36"))
    cfg["times"] = times
    if not times:
        raise CliError(EXIT_CONFIG, "no evaluation times")
    R = int(cfg.get("draws", 50))
    h_method = cfg.get("method", "laplace")
    if h_method == "mcmc":
        h_method = "laplace"
    if h_method not in ("laplace", "eb", "quadrature"):
        raise CliError(EXIT_CONFIG, f"unknown h method {h_method!r}")
    n_batches = int(cfg.get("n_batches", 20))
    fit_dirs = list(args.fits) or list(cfg.get("fits", []))
    if not fit_dirs:
        raise CliError(EXIT_CONFIG, "no fit directories given")
    cfg["fits"] = [str(f) for f in fit_dirs]

    report = CvdclReport()
    labels = []
    for fd in fit_dirs:
        bundle = load_bundle(fd)
        label = bundle["label"]
        if label in labels:
            label = f"{label}@{Path(fd).name}"
        labels.append(label)
        res = bundle["result"]
        model = res.model
        for t in times:
            if model.dataset.n_at_risk(t) == 0:
                raise CliError(EXIT_DATA, f"no loans at risk after month {t} in {fd}")
        try:
            if bundle["kind"] == "mcmc":
                for r in cvdcl_mcmc_times(res, times, n_batches):
                    report.add(r, label)
            else:
                rs = cvdcl_inla_times(res, times, R, (h_method,), seed=cfg.get("seed"))
                for t in times:
                    report.add(rs[t, h_method], label)
        except SelectionError as err:
            raise CliError(EXIT_DATA, str(err)) from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_csv = out / "cvdcl.csv"
    report.write_csv(report_csv)
    area_csv = out / "cvdcl_by_area.csv"
    report.write_area_csv(area_csv, baseline=cfg.get("baseline", labels[0]))
    _write_manifest(out, "select", args, cfg, [report_csv, area_csv], started)
    for r in sorted(report.results, key=lambda r: (r.t, r.model_label)):
        print(f"t={r.t:3d} N_t={r.N_t:5d} {r.model_label:>16s} {r.method:>13s} {r.estimate:.4f} ({r.mc_se:.4f})")
    return EXIT_OK


def cmd_report(args) -> int:
    """Collect parameter summaries from fit directories into one wide table."""
    import csv

    started = time.time()
    cfg = _load_config(args.config)
    dirs = list(args.fits) or list(cfg.get("fits", []))
    if not dirs:
        raise CliError(EXIT_CONFIG, "no fit directories given")
    cfg["fits"] = [str(d) for d in dirs]
    columns = []
    table: dict[str, dict] = {}
    for d in dirs:
        path = Path(d) / "summary.csv"
        if not path.exists():
            raise CliError(EXIT_DATA, f"no summary.csv in {d}")
        label = Path(d).name
        man = Path(d) / MANIFEST
        if man.exists():
            snap = json.loads(man.read_text())["config"]
            label = snap.get("label", f"{str(snap.get('variant', '')).upper()}-{snap.get('method', '')}")
        columns.append(label)
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                table.setdefault(row["name"], {})[label] = (row["mean"], row["sd"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / "parameters.csv"
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name"] + [f"{c}:{k}" for c in columns for k in ("mean", "sd")])
        for name, vals in table.items():
            w.writerow([name] + [x for c in columns for x in vals.get(c, ("", ""))])
    _write_manifest(out, "report", args, cfg, [dest], started)
    print(f"{len(table)} parameters x {len(columns)} fits -> {dest}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stjm", description="Spatio-temporal joint models for loan panels.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="thread limit for numerical libraries (default: all cores)")
    common.add_argument("--out", required=True, help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="simulate a dataset")

    f = sub.add_parser("fit", parents=[common], help="fit a model variant")
    f.add_argument("--data", help="directory with origination.csv / performance.csv")
    f.add_argument("--variant", type=str.lower, choices=["m1", "m2", "m3"])
    f.add_argument("--method", choices=["laplace", "mcmc"])

    s = sub.add_parser("select", parents=[common], help="cvDCL model comparison")
    s.add_argument("fits", nargs="*", help="fit directories")
    s.add_argument("--times", help="comma-separated evaluation months")
    s.add_argument("--draws", type=int, help="posterior draws per grid point")
    s.add_argument("--method", choices=["laplace", "eb", "quadrature"], help="h_i evaluation method")

    r = sub.add_parser("report", parents=[common], help="tabulate parameter summaries")
    r.add_argument("fits", nargs="*", help="fit directories")
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "select": cmd_select, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    _limit_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except CliError as err:
        print(f"stjm {args.command}: error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
