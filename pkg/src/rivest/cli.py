"""Command-line interface.

Subcommands mirror the pipeline stages so each artifact can be produced,
inspected, or reused on its own:

    rivest forward   --params params.json --formulation 4 --out curve.csv
    rivest coarse    --curve btc.csv --method laplace --family first_order
    rivest generate  --prior prior.json --n 1000 --family first_order --seed 42 --out dataset.bin
    rivest fit-kl    --dataset dataset.bin --n-modes 20 --out kl.bin
    rivest embed     --curve btc.csv --kl kl.bin --sigma-c 1e-3 --out embedded.json
    rivest estimate  --curve btc.csv --dataset dataset.bin --kl kl.bin --method pbi --out result.json
    rivest refine    --result result.json --curve btc.csv --dataset dataset.bin --kl kl.bin --budget 300
    rivest metrics   --curve btc.csv --model-curve model.csv
    rivest run       --config run.json [--set key=value ...]
    rivest export    --report report.json --kind error-cdf --out-dir plots/
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from rivest import io
from rivest.coarse import ade_ls_fit, ade_peak_fit, laplace_fit, moment_match
from rivest.dataset import DimensionlessParams, generate_dataset
from rivest.embedding import VelocityGrid, embed_over_velocities, pad_with_zeros, tune_sigma_c
from rivest.klmodel import fit_kl
from rivest.lipo import model_values_at, refine
from rivest.metrics import evaluate as evaluate_metrics
from rivest.pbi import EstimationResult, estimate_nni, estimate_pbi
from rivest.pipeline import BatchReport, RunConfig, export_plot_data, pipeline_run
from rivest.solver import Formulation, TimeGrid, TransportParams, breakthrough


def _add_curve_args(parser):
    parser.add_argument("--curve", required=True, help="measured-curve CSV (time_s,concentration)")
    parser.add_argument("--meta", default=None, help="sidecar JSON with reach_length_m (default <curve>.json)")


def _load_curve(args):
    return io.read_curve_csv(args.curve, args.meta)


def _cmd_forward(args):
    record = json.loads(Path(args.params).read_text())
    mass = float(record.pop("mass", 1.0))
    if "family" in record:
        params = DimensionlessParams.from_array(
            record["family"],
            [record["Pe"], record.get("beta_k_f", record.get("beta_alpha")),
             record.get("k_r", 1.0 - record.get("gamma", 0.0))],
        ).transport_params(mass)
    else:
        params = TransportParams(pe=float(record["Pe"]), mass=mass)
    count = int(round(args.tmax / args.dt)) + 1
    grid = TimeGrid(step=args.dt, count=count)
    values = breakthrough(params, Formulation(args.formulation), grid)
    io.write_curve_csv(args.out, grid.times, values)
    print(f"wrote {args.out} ({count} samples, t_hat <= {grid.t_max:g})")


def _cmd_coarse(args):
    curve = _load_curve(args)
    formulation = Formulation(args.formulation)
    if args.method == "laplace":
        result = laplace_fit(curve, args.family, formulation, seed=args.seed)
    elif args.method == "moments":
        result = moment_match(curve, formulation, seed=args.seed)
    elif args.method == "ade-ls":
        fit = ade_ls_fit(curve, seed=args.seed)
        result = EstimationResult(method="ADE-LS", velocity=fit.velocity, params=None,
                                  converged=fit.converged, extra={"Pe": fit.pe})
    else:
        fit = ade_peak_fit(curve)
        result = EstimationResult(method="ADE-Peak", velocity=fit.velocity, params=None,
                                  converged=fit.converged, extra={"Pe": fit.pe, "note": fit.note})
    _finish_result(args, curve, result, formulation)


def _cmd_generate(args):
    prior = io.load_prior(args.prior)
    dataset = generate_dataset(prior, args.n, Formulation(args.formulation), family=args.family, seed=args.seed)
    io.save_dataset(dataset, args.out)
    print(f"wrote {args.out} ({dataset.n_samples} curves on {dataset.grid.count} grid points)")


def _cmd_fit_kl(args):
    dataset = io.load_dataset(args.dataset)
    model = fit_kl(dataset, args.n_modes, dataset_hash=io.sha256_file(args.dataset))
    io.save_kl_model(model, args.out)
    print(f"wrote {args.out} ({model.n_modes} modes, leading eigenvalue {model.eigenvalues[0]:.4e})")


def _resolve_sigma(args, curve, kl):
    if args.sigma_c == "auto":
        return tune_sigma_c([curve], kl, seed=args.seed)
    return float(args.sigma_c)


def _cmd_embed(args):
    curve = _load_curve(args)
    kl = io.load_kl_model(args.kl)
    sigma_c = _resolve_sigma(args, curve, kl)
    grid = VelocityGrid.for_curve(curve)
    embedded = embed_over_velocities(pad_with_zeros(curve), kl, grid, sigma_c)
    out = {
        "sigma_c": sigma_c,
        "velocities_m_per_s": embedded.velocities.tolist(),
        "feasible": embedded.feasible.tolist(),
        "coefficients": [row.tolist() for row in embedded.coefficients],
    }
    Path(args.out).write_text(json.dumps(out))
    print(f"wrote {args.out} ({int(embedded.feasible.sum())}/{len(grid)} feasible velocities, sigma_c={sigma_c:g})")


def _cmd_estimate(args):
    curve = _load_curve(args)
    dataset = io.load_dataset(args.dataset)
    kl = io.load_kl_model(args.kl)
    sigma_c = _resolve_sigma(args, curve, kl)
    grid = VelocityGrid.for_curve(curve)
    embedded = embed_over_velocities(pad_with_zeros(curve), kl, grid, sigma_c)
    if args.method == "pbi":
        result = estimate_pbi(embedded, dataset, kl)
    else:
        result = estimate_nni(embedded, dataset, kl)
    result.extra["sigma_c"] = sigma_c
    _finish_result(args, curve, result, dataset.formulation)


def _cmd_refine(args):
    record = json.loads(Path(args.result).read_text())
    curve = _load_curve(args)
    dataset = io.load_dataset(args.dataset)
    initial = EstimationResult(
        method=record["method"],
        velocity=record["velocity_m_per_s"],
        params=DimensionlessParams.from_array(record["family"], record["y"]),
        residual=record.get("residual", float("nan")),
    )
    result = refine(initial, curve, dataset.formulation, budget=args.budget, seed=args.seed)
    _finish_result(args, curve, result, dataset.formulation)


def _cmd_metrics(args):
    curve = _load_curve(args)
    padded = pad_with_zeros(curve)
    times, values = [], []
    with open(args.model_curve) as fh:
        next(fh)
        for line in fh:
            t, c = line.strip().split(",")
            times.append(float(t))
            values.append(float(c))
    model = np.interp(padded.times, np.asarray(times), np.asarray(values), left=0.0, right=0.0)
    report = evaluate_metrics(padded, model)
    print(json.dumps(report.to_dict(), indent=2))


def _cmd_run(args):
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    config = RunConfig.from_json(args.config, overrides)
    report = pipeline_run(config)
    print(json.dumps(report.summary, indent=2, sort_keys=True))
    print(f"report: {Path(config.output_dir) / 'report.json'}")


def _cmd_export(args):
    report = BatchReport.from_dict(json.loads(Path(args.report).read_text()))
    written = export_plot_data(report, args.kind, args.out_dir)
    for path in written:
        print(f"wrote {path}")


def _finish_result(args, curve, result, formulation):
    """Attach metrics and a reconstruction, then write/print the result."""
    padded = pad_with_zeros(curve)
    try:
        if result.params is not None:
            model = model_values_at(padded.times, curve.reach_length, result.velocity, result.params, formulation)
            result.metrics = evaluate_metrics(padded, model)
            if getattr(args, "out", None):
                rec_path = Path(args.out).with_suffix(".reconstruction.csv")
                io.write_curve_csv(rec_path, padded.times, model)
                result.extra["reconstructed_curve_csv"] = str(rec_path)
    except Exception as exc:
        result.extra["metrics_error"] = str(exc)
    if getattr(args, "out", None):
        io.write_result_json(result, args.out)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rivest", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="solve one breakthrough curve")
    p.add_argument("--params", required=True, help="JSON with Pe and optional family/exchange parameters")
    p.add_argument("--formulation", type=int, default=4, choices=(1, 2, 3, 4))
    p.add_argument("--dt", type=float, default=1.0 / 150.0)
    p.add_argument("--tmax", type=float, default=24.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_forward)

    p = sub.add_parser("coarse", help="forward-solver-free estimators")
    _add_curve_args(p)
    p.add_argument("--method", required=True, choices=("laplace", "moments", "ade-ls", "ade-peak"))
    p.add_argument("--family", default="first_order", choices=("first_order", "power_law"))
    p.add_argument("--formulation", type=int, default=4, choices=(1, 2, 3, 4))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_coarse)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--prior", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--family", default=None, choices=("first_order", "power_law"))
    p.add_argument("--formulation", type=int, default=4, choices=(1, 2, 3, 4))
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("fit-kl", help="fit the KL reduced-order model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-modes", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_kl)

    p = sub.add_parser("embed", help="embed a measured curve over the velocity grid")
    _add_curve_args(p)
    p.add_argument("--kl", required=True)
    p.add_argument("--sigma-c", default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("estimate", help="estimate parameters on the synthetic manifold")
    _add_curve_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--kl", required=True)
    p.add_argument("--method", default="pbi", choices=("pbi", "nni"))
    p.add_argument("--sigma-c", default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("refine", help="LIPO refinement of an estimate")
    p.add_argument("--result", required=True)
    _add_curve_args(p)
    p.add_argument("--dataset", required=True, help="dataset file (for the formulation tag)")
    p.add_argument("--kl", required=False, default=None)
    p.add_argument("--budget", type=int, default=300)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("metrics", help="compare a measured curve with a model curve CSV")
    _add_curve_args(p)
    p.add_argument("--model-curve", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("run", help="run the batch pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("export", help="export plot-ready data from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--kind", required=True, choices=("btc-overlay", "error-cdf", "param-scatter"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
