"""Batch pipeline: ingest curves, build artifacts, estimate, report.

Stages run in dependency order and each one is skipped when its artifact
already exists with matching input hashes, so a rerun with unchanged
inputs touches nothing and reproduces the same report. All randomness is
derived from the configured seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rivest import io
from rivest.coarse import ade_ls_fit, ade_peak_fit, laplace_fit, moment_match
from rivest.dataset import FIRST_ORDER, POWER_LAW, DimensionlessParams, fit_prior, generate_dataset
from rivest.embedding import MeasuredCurve, VelocityGrid, embed_over_velocities, pad_with_zeros, tune_sigma_c
from rivest.klmodel import fit_kl
from rivest.lipo import model_values_at, refine
from rivest.metrics import evaluate as evaluate_metrics
from rivest.pbi import (
    EstimationResult,
    dataset_coefficients,
    estimate_nni,
    estimate_pbi,
    regularization_weight,
)
from rivest.solver import Formulation, ade_analytical

KNOWN_METHODS = ("pbi", "nni", "laplace", "moments", "ade-ls", "ade-peak")


@dataclass
class RunConfig:
    """Everything a batch run needs; JSON-serializable."""

    curves_dir: str
    output_dir: str
    family: str = FIRST_ORDER
    formulation: int = 4
    methods: tuple = ("pbi", "nni")
    sigma_c: str | float = "auto"
    b: float = 2.0
    n_synth: int = 1000
    n_modes: int = 20
    seed: int = 0
    train_fraction: float = 0.9
    refine_budget: int = 0
    regularize_velocity: bool = False
    velocity_low: float = 0.9
    velocity_high: float = 1.5
    velocity_step: float = 0.005
    workers: int = 1

    def __post_init__(self):
        unknown = set(self.methods) - set(KNOWN_METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)} (known: {KNOWN_METHODS})")
        if self.family not in (FIRST_ORDER, POWER_LAW):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == POWER_LAW and "moments" in self.methods:
            raise ValueError("temporal moments are undefined for the power-law family")

    @classmethod
    def from_json(cls, path, overrides: dict | None = None) -> "RunConfig":
        record = json.loads(Path(path).read_text())
        record.update(overrides or {})
        record["methods"] = tuple(record.get("methods", ("pbi", "nni")))
        return cls(**record)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["methods"] = list(self.methods)
        return out


@dataclass
class BatchReport:
    """Per-curve, per-method results plus split labels and medians."""

    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "summary": self.summary, "config": self.config}

    @classmethod
    def from_dict(cls, record: dict) -> "BatchReport":
        return cls(rows=record["rows"], summary=record["summary"], config=record.get("config", {}))


def _curves_fingerprint(paths: list[Path]) -> str:
    import hashlib

    digest = hashlib.sha256()
    for p in paths:
        digest.update(p.name.encode())
        digest.update(io.sha256_file(p).encode())
        meta = p.with_suffix(".json")
        if meta.exists():
            digest.update(io.sha256_file(meta).encode())
    return digest.hexdigest()


def _inputs_match(path: Path, inputs: dict) -> bool:
    sidecar = path.with_name(path.name + ".inputs.json")
    if not path.exists() or not sidecar.exists():
        return False
    try:
        return json.loads(sidecar.read_text()) == inputs
    except (json.JSONDecodeError, OSError):
        return False


def _record_inputs(path: Path, inputs: dict) -> None:
    path.with_name(path.name + ".inputs.json").write_text(json.dumps(inputs, indent=2, sort_keys=True))


def discover_curves(curves_dir) -> list[Path]:
    paths = sorted(Path(curves_dir).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no curve CSVs in {curves_dir}")
    return paths


def train_test_split(names: list[str], train_fraction: float, seed: int) -> dict[str, str]:
    """Deterministic curve-level split; at least one training curve."""
    rng = np.random.default_rng(seed)
    shuffled = list(names)
    rng.shuffle(shuffled)
    n_train = max(1, int(round(train_fraction * len(shuffled))))
    train = set(shuffled[:n_train])
    return {name: ("train" if name in train else "test") for name in names}


def coarse_prior_estimate(
    curve: MeasuredCurve,
    family: str,
    formulation: Formulation,
    seed: int = 0,
) -> tuple[DimensionlessParams, str]:
    """The coarse estimate that seeds the prior for one curve.

    Power law: Laplace-domain fit. First order: the better of the Laplace
    fit and moment matching by reconstruction RMSE. Fits that ended pinned
    to a parameter search bound are not identified and are not trusted to
    seed the prior.
    """
    lap = laplace_fit(curve, family, formulation, seed=seed)
    candidates = []
    if not lap.extra.get("bound_active"):
        candidates.append((lap, "laplace"))
    if family == FIRST_ORDER:
        mom = moment_match(curve, formulation, seed=seed)
        if not mom.extra.get("bound_active"):
            candidates.append((mom, "moments"))
    if not candidates:
        raise RuntimeError("no identifiable coarse estimate (all fits hit parameter bounds)")
    if len(candidates) == 1:
        result, label = candidates[0]
        return result.params, label
    padded = pad_with_zeros(curve)

    def rec_rmse(result: EstimationResult) -> float:
        try:
            model = model_values_at(padded.times, curve.reach_length, result.velocity, result.params, formulation)
            return evaluate_metrics(padded, model).rmse
        except Exception:
            return float("inf")

    result, label = min(candidates, key=lambda item: rec_rmse(item[0]))
    return result.params, label


def _method_results(
    curve: MeasuredCurve,
    config: RunConfig,
    dataset,
    kl,
    coeffs,
    sigma_c: float,
    lambda_reg: float,
) -> dict[str, EstimationResult]:
    formulation = Formulation(config.formulation)
    padded = pad_with_zeros(curve)
    results: dict[str, EstimationResult] = {}
    needs_embedding = bool({"pbi", "nni"} & set(config.methods))
    embedded = None
    if needs_embedding:
        grid = VelocityGrid.for_curve(curve, config.velocity_low, config.velocity_high, config.velocity_step)
        embedded = embed_over_velocities(padded, kl, grid, sigma_c)
    for method in config.methods:
        try:
            if method == "pbi":
                res = estimate_pbi(
                    embedded, dataset, kl, regularization=lambda_reg, peak_velocity=curve.peak_velocity, coeffs=coeffs
                )
                if config.refine_budget > 0:
                    res = refine(res, curve, formulation, budget=config.refine_budget, seed=config.seed)
            elif method == "nni":
                res = estimate_nni(embedded, dataset, kl, coeffs=coeffs)
            elif method == "laplace":
                res = laplace_fit(curve, config.family, formulation, seed=config.seed)
            elif method == "moments":
                res = moment_match(curve, formulation, seed=config.seed)
            elif method == "ade-ls":
                fit = ade_ls_fit(curve, seed=config.seed)
                res = EstimationResult(
                    method="ADE-LS", velocity=fit.velocity, params=None, converged=fit.converged,
                    extra={"Pe": fit.pe, "dispersion_m2_per_s": fit.dispersion},
                )
            elif method == "ade-peak":
                fit = ade_peak_fit(curve)
                res = EstimationResult(
                    method="ADE-Peak", velocity=fit.velocity, params=None, converged=fit.converged,
                    extra={"Pe": fit.pe, "dispersion_m2_per_s": fit.dispersion, "note": fit.note},
                )
            results[method] = res
        except Exception as exc:
            results[method] = EstimationResult(
                method=method, velocity=float("nan"), params=None, converged=False, extra={"error": str(exc)}
            )
    return results


def _attach_metrics(curve: MeasuredCurve, result: EstimationResult, formulation: Formulation, out_csv: Path | None):
    if not result.converged and result.params is None and not np.isfinite(result.velocity):
        return
    padded = pad_with_zeros(curve)
    try:
        if result.params is not None:
            model = model_values_at(padded.times, curve.reach_length, result.velocity, result.params, formulation)
        elif "Pe" in result.extra and np.isfinite(result.velocity):
            tau = padded.times * result.velocity / curve.reach_length
            model = ade_analytical(result.extra["Pe"], 1.0, 1.0, tau, Formulation.INFINITE)
        else:
            return
        result.metrics = evaluate_metrics(padded, model)
        if out_csv is not None:
            io.write_curve_csv(out_csv, padded.times, model)
            result.extra["reconstructed_curve_csv"] = str(out_csv)
    except Exception as exc:
        result.extra["metrics_error"] = str(exc)


def pipeline_run(config: RunConfig) -> BatchReport:
    """Run every stage that is out of date and assemble the batch report."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    formulation = Formulation(config.formulation)

    curve_paths = discover_curves(config.curves_dir)
    curves = {p.stem: io.read_curve_csv(p) for p in curve_paths}
    curves_hash = _curves_fingerprint(curve_paths)
    split = train_test_split(sorted(curves), config.train_fraction, config.seed)
    train_names = [n for n, s in split.items() if s == "train"]

    # stage: coarse estimates and prior
    prior_path = out / "prior.json"
    prior_inputs = {
        "curves": curves_hash,
        "family": config.family,
        "formulation": config.formulation,
        "b": config.b,
        "seed": config.seed,
        "train_fraction": config.train_fraction,
    }
    if _inputs_match(prior_path, prior_inputs):
        prior = io.load_prior(prior_path)
    else:
        estimates = []
        for name in train_names:
            try:
                params, _ = coarse_prior_estimate(curves[name], config.family, formulation, seed=config.seed)
                estimates.append(params)
            except Exception as exc:
                warnings.warn(f"coarse estimate failed for {name}: {exc}", stacklevel=2)
        prior = fit_prior(estimates, b=config.b)
        io.save_prior(prior, prior_path)
        _record_inputs(prior_path, prior_inputs)

    # stage: synthetic dataset
    dataset_path = out / "dataset.bin"
    dataset_inputs = {
        "prior": io.sha256_file(prior_path),
        "n_synth": config.n_synth,
        "seed": config.seed,
        "family": config.family,
        "formulation": config.formulation,
    }
    if _inputs_match(dataset_path, dataset_inputs):
        dataset = io.load_dataset(dataset_path)
    else:
        dataset = generate_dataset(
            prior, config.n_synth, formulation, family=config.family, seed=config.seed
        )
        io.save_dataset(dataset, dataset_path)
        _record_inputs(dataset_path, dataset_inputs)

    # stage: KL model
    kl_path = out / "kl.bin"
    kl_inputs = {"dataset": io.sha256_file(dataset_path), "n_modes": config.n_modes}
    if _inputs_match(kl_path, kl_inputs):
        kl = io.load_kl_model(kl_path)
    else:
        kl = fit_kl(dataset, config.n_modes, dataset_hash=kl_inputs["dataset"])
        io.save_kl_model(kl, kl_path)
        _record_inputs(kl_path, kl_inputs)

    # stage: sigma_c
    sigma_path = out / "sigma_c.json"
    sigma_inputs = {"kl": io.sha256_file(kl_path), "curves": curves_hash, "seed": config.seed,
                    "policy": str(config.sigma_c)}
    if isinstance(config.sigma_c, (int, float)):
        sigma_c = float(config.sigma_c)
    elif _inputs_match(sigma_path, sigma_inputs):
        sigma_c = json.loads(sigma_path.read_text())["sigma_c"]
    else:
        sigma_c = tune_sigma_c([curves[n] for n in train_names], kl, seed=config.seed)
        sigma_path.write_text(json.dumps({"sigma_c": sigma_c}))
        _record_inputs(sigma_path, sigma_inputs)

    # stage: velocity regularization weight (power law only)
    lambda_reg = 0.0
    if config.regularize_velocity and config.family == POWER_LAW:
        train_curves = [curves[n] for n in train_names]
        embedded = [
            embed_over_velocities(
                pad_with_zeros(c),
                kl,
                VelocityGrid.for_curve(c, config.velocity_low, config.velocity_high, config.velocity_step),
                sigma_c,
            )
            for c in train_curves
        ]
        lambda_reg = regularization_weight(train_curves, embedded, dataset, kl)

    # stage: estimation and report
    report_path = out / "report.json"
    report_inputs = {
        "kl": io.sha256_file(kl_path),
        "curves": curves_hash,
        "methods": list(config.methods),
        "sigma_c": sigma_c,
        "lambda_reg": lambda_reg,
        "refine_budget": config.refine_budget,
        "seed": config.seed,
    }
    if _inputs_match(report_path, report_inputs):
        return BatchReport.from_dict(json.loads(report_path.read_text()))

    coeffs = dataset_coefficients(kl, dataset)
    rec_dir = out / "reconstructions"
    rec_dir.mkdir(exist_ok=True)
    rows = []
    for name in sorted(curves):
        curve = curves[name]
        results = _method_results(curve, config, dataset, kl, coeffs, sigma_c, lambda_reg)
        for method, result in results.items():
            _attach_metrics(curve, result, formulation, rec_dir / f"{name}_{method}.csv")
            row = {"curve": name, "split": split[name], "reach_length_m": curve.reach_length,
                   "method_key": method}
            row.update(result.to_dict())
            rows.append(row)

    summary = {}
    for method in config.methods:
        for split_name in ("train", "test"):
            matching = [r for r in rows
                        if r["split"] == split_name and r["method_key"] == method and r.get("metrics")]
            if matching:
                summary[f"{method}/{split_name}"] = {
                    "median_rmse": float(np.median([r["metrics"]["rmse"] for r in matching])),
                    "median_kld": float(np.median([r["metrics"]["kld"] for r in matching])),
                    "count": len(matching),
                }

    report = BatchReport(rows=rows, summary=summary, config=config.to_dict())
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    _record_inputs(report_path, report_inputs)
    return report


def export_plot_data(report: BatchReport, kind: str, out_dir) -> list[Path]:
    """Write plot-ready CSV/JSON data products from a batch report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if kind == "error-cdf":
        methods = sorted({row["method"] for row in report.rows})
        for method in methods:
            rmses = sorted(r["metrics"]["rmse"] for r in report.rows if r["method"] == method and r.get("metrics"))
            klds = sorted(r["metrics"]["kld"] for r in report.rows if r["method"] == method and r.get("metrics"))
            if not rmses:
                continue
            path = out / f"error_cdf_{method.lower().replace('+', '_')}.csv"
            with open(path, "w") as fh:
                fh.write("fraction,rmse_sorted,kld_sorted\n")
                n = len(rmses)
                for i, (a, b) in enumerate(zip(rmses, klds)):
                    fh.write(f"{(i + 1) / n:.9g},{a:.9g},{b:.9g}\n")
            written.append(path)
    elif kind == "btc-overlay":
        by_curve: dict[str, list[dict]] = {}
        for row in report.rows:
            by_curve.setdefault(row["curve"], []).append(row)
        for name, rows in sorted(by_curve.items()):
            series = {}
            for row in rows:
                path = row.get("extra", {}).get("reconstructed_curve_csv")
                if path and Path(path).exists():
                    series[row["method"]] = path
            if not series:
                continue
            first = next(iter(series.values()))
            times = []
            with open(first) as fh:
                next(fh)
                times = [line.split(",")[0] for line in fh]
            columns = {}
            for method, path in series.items():
                with open(path) as fh:
                    next(fh)
                    columns[method] = [line.strip().split(",")[1] for line in fh]
            path = out / f"btc_overlay_{name}.csv"
            with open(path, "w") as fh:
                fh.write("time_s," + ",".join(columns) + "\n")
                for i, t in enumerate(times):
                    fh.write(t.strip() + "," + ",".join(columns[m][i] for m in columns) + "\n")
            written.append(path)
    elif kind == "param-scatter":
        path = out / "param_scatter.csv"
        with open(path, "w") as fh:
            fh.write("curve,split,method,reach_length_m,velocity_m_per_s,Pe,exchange_1,exchange_2\n")
            for row in report.rows:
                params = row.get("params") or {}
                pe = params.get("Pe", row.get("extra", {}).get("Pe", ""))
                names = [k for k in params if k != "Pe"]
                e1 = params.get(names[0], "") if names else ""
                e2 = params.get(names[1], "") if len(names) > 1 else ""
                fh.write(
                    f"{row['curve']},{row['split']},{row['method']},{row['reach_length_m']:.9g},"
                    f"{row['velocity_m_per_s']:.9g},{pe},{e1},{e2}\n"
                )
        written.append(path)
    else:
        raise ValueError(f"unknown export kind {kind!r} (use btc-overlay, error-cdf, or param-scatter)")
    return written
