"""Command-line interface: simulate, fit, predict, calibrate, map, score, bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import io as fio
from . import studies
from .bench import bench_scaling, write_bench_csv
from .calibration import CalibrationProblem, DiscrepancySpec, calibrated_predict, linear_discrepancy_basis, mcmc_calibrate
from .config import ConfigError, RunConfig
from .dataset import DataError, Ensemble, FieldData, from_unit_hypercube, to_unit_hypercube
from .emulator import fit, predict
from .gp_core import NumericalError
from .map_estimation import map_optimize
from .metrics import score

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SUBSTREAMS = {"fit": 0, "mcmc": 1, "predict": 2, "map": 3}
LENGTHSCALE_PRIOR_NOTE = (
    "heuristic Gamma(shape 1.5) prior per lengthscale, mode at the squared 10th-percentile "
    "pairwise distance of each subset"
)

logger = logging.getLogger("flagp")


def substream(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SUBSTREAMS[name]])


def _load_config(args) -> RunConfig:
    return cfgmod.load(args.config) if args.config else RunConfig()


def _manifest(path, command, cfg: RunConfig, **extra):
    fio.write_manifest(path, command, cfg.digest(), cfg.seed, extra or None)


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {p}: {exc}") from exc
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = _mkdir(args.out)
    seed = args.seed
    if args.preset == "emulation":
        ens = studies.emulation_ensemble(args.M or 242, seed=seed)
        X_test, Y_test = studies.emulation_holdout(args.n_test, seed=seed + 1)
        field = None
        test_raw = from_unit_hypercube(X_test, ens.input_ranges)
    else:
        make = studies.unbiased_study if args.preset == "unbiased" else studies.biased_study
        default_M = 242 if args.preset == "unbiased" else 1058
        st = make(args.M or default_M, seed=seed, noise_sd=args.noise_sd, n_test=args.n_test)
        ens, field, Y_test = st.ensemble, st.field, st.Y_test
        d_x = ens.X.shape[1] - st.t_dim
        test_raw = from_unit_hypercube(st.X_test, ens.input_ranges[:d_x])
        fio.write_csv(out / "field_inputs.csv", list(ens.names[:d_x]), from_unit_hypercube(field.X_F, ens.input_ranges[:d_x]))
        fio.write_outputs(out / "field_outputs.csv", field.Y)
        fio.write_csv(out / "index_values.csv", ["index"], st.index_values[:, None])
        fio.write_json(out / "truth.json", {"theta": from_unit_hypercube(st.theta_true, ens.input_ranges[d_x:]).tolist(), "t_dim": st.t_dim})
    fio.write_csv(out / "inputs.csv", list(ens.names), from_unit_hypercube(ens.X, ens.input_ranges))
    fio.write_outputs(out / "outputs.csv", ens.Z_raw)
    fio.write_ranges(out / "ranges.json", ens.names, ens.input_ranges)
    header = list(ens.names[: test_raw.shape[1]])
    fio.write_csv(out / "test_inputs.csv", header, test_raw)
    fio.write_outputs(out / "test_outputs.csv", Y_test)
    fio.write_manifest(out / "manifest.json", "simulate", "", seed, {"preset": args.preset, "M": ens.M})
    logger.info("wrote %s preset (M=%d, d_y=%d) to %s", args.preset, ens.M, ens.d_y, out)
    return EXIT_OK


def _ensemble_from_files(args) -> Ensemble:
    names, ranges = fio.read_ranges(args.ranges)
    header, X_raw = fio.read_csv(args.inputs)
    if X_raw.shape[1] != len(ranges):
        raise DataError(f"{args.inputs}: {X_raw.shape[1]} input columns but {len(ranges)} ranges")
    Z = fio.read_outputs(args.outputs)
    return Ensemble(X=to_unit_hypercube(X_raw, ranges, strict=True), Z_raw=Z, input_ranges=ranges, names=names)


def cmd_fit(args) -> int:
    cfg = _load_config(args)
    ens = _ensemble_from_files(args)
    model = fit(ens, cfg.emulator_config(workers=args.threads))
    fio.save_model(model, args.model)
    _manifest(
        f"{args.model}.manifest.json",
        "fit",
        cfg,
        p=model.p,
        var_explained=model.basis.var_explained,
        subsample=asdict(model.config.subsample),
        lengthscale_prior=LENGTHSCALE_PRIOR_NOTE,
    )
    return EXIT_OK


def _unit_inputs(path, ranges):
    _, X_raw = fio.read_csv(path)
    if X_raw.shape[1] != len(ranges):
        raise DataError(f"{path}: expected {len(ranges)} input columns, found {X_raw.shape[1]}")
    return to_unit_hypercube(X_raw, ranges)


def _write_bands(path, mean, lower, upper):
    d_y, k = mean.shape
    rows = [(i + 1, j + 1, mean[j, i], lower[j, i], upper[j, i]) for i in range(k) for j in range(d_y)]
    fio.write_csv(path, ["run", "index", "mean", "lower", "upper"], rows)


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    model = fio.load_model(args.model)
    X = _unit_inputs(args.inputs, model.input_ranges)
    if cfg.m > model.M:
        raise ConfigError(f"emulator.m={cfg.m} exceeds the ensemble size {model.M}")
    pred = predict(model, X, m=cfg.m, S=args.samples, rng=substream(cfg.seed, "predict"))
    lower, upper = pred.quantiles()
    _write_bands(args.out, pred.mean, lower, upper)
    _manifest(f"{args.out}.manifest.json", "predict", cfg, samples=args.samples)
    return EXIT_OK


def _problem(args, cfg: RunConfig, model):
    c = cfg.calibration
    t_dim = args.t_dim
    if not 1 <= t_dim < model.d:
        raise ConfigError(f"--t-dim must be between 1 and {model.d - 1}")
    d_x = model.d - t_dim
    X_F = _unit_inputs(args.field_inputs, model.input_ranges[:d_x])
    Y = fio.read_outputs(args.field_outputs)
    if Y.shape[0] != model.basis.d_y:
        raise DataError(f"field outputs have {Y.shape[0]} indices, the model has {model.basis.d_y}")
    field = FieldData(X_F=X_F, Y=Y)
    kind = args.discrepancy or ("none" if c.discrepancy == "none" else "linear" if c.discrepancy == "linear" else "file")
    spec = None
    if kind == "linear":
        index = fio.read_csv(args.index_values)[1][:, 0] if args.index_values else np.arange(1.0, model.basis.d_y + 1)
        if index.size != model.basis.d_y:
            raise DataError("index values must have one entry per functional index")
        K = linear_discrepancy_basis(index)
    elif kind == "file":
        basis_file = args.discrepancy_file or (c.discrepancy.get("basis_file") if isinstance(c.discrepancy, dict) else None)
        if not basis_file:
            raise ConfigError("a discrepancy basis file is required (--discrepancy-file)")
        K = fio.read_csv(basis_file)[1]
        if K.shape[0] != model.basis.d_y:
            raise DataError(f"{basis_file}: basis needs {model.basis.d_y} rows, found {K.shape[0]}")
    if kind != "none":
        try:
            spec = DiscrepancySpec(K, nugget_mode=c.nugget_mode, refit_every=c.refit_every)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    if c.m_c > model.M:
        raise ConfigError(f"calibration.m_c={c.m_c} exceeds the ensemble size {model.M}")
    return CalibrationProblem.from_field(model, field, t_dim, prior_sigma2=cfg.sigma2_prior(), discrepancy=spec, m_c=c.m_c)


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    c = cfg.calibration
    model = fio.load_model(args.model)
    problem = _problem(args, cfg, model)
    out = _mkdir(args.out)
    post = mcmc_calibrate(problem, c.n_samples, c.n_burn, seed=substream(cfg.seed, "mcmc"), thin=c.thin, estimator=c.estimator)
    fio.write_posterior(out / "posterior.csv", post, problem.t_names(), problem.t_ranges())
    theta_nat = from_unit_hypercube(post.theta_post, problem.t_ranges())
    fio.write_json(
        out / "diagnostics.json",
        {
            "acceptance_rate": post.acceptance_rate,
            "proposal_cov": post.proposal_cov.tolist(),
            "n_samples": c.n_samples,
            "n_burn": c.n_burn,
            "posterior_mean": dict(zip(problem.t_names(), theta_nat.mean(axis=0).tolist())),
            "sigma2_mean": float(post.sigma2_post.mean()),
        },
    )
    if args.test_inputs:
        X_new = _unit_inputs(args.test_inputs, model.input_ranges[: model.d - problem.t_dim])
        cp = calibrated_predict(problem, post, X_new, m=min(cfg.m, model.M), S_sub=c.S_sub, rng=substream(cfg.seed, "predict"))
        _write_bands(out / "predictions.csv", cp.mean, cp.lower, cp.upper)
    _manifest(out / "manifest.json", "calibrate", cfg, estimator=c.estimator)
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = _load_config(args)
    model = fio.load_model(args.model)
    problem = _problem(args, cfg, model)
    res = map_optimize(problem, restarts=cfg.restarts, seed=substream(cfg.seed, "map"), workers=args.threads)
    out = {**res.to_dict(), "names": list(problem.t_names())}
    fio.write_json(args.out, out)
    _manifest(f"{args.out}.manifest.json", "map", cfg)
    return EXIT_OK


def cmd_score(args) -> int:
    header, rows = fio.read_csv(args.predictions)
    if header != ["run", "index", "mean", "lower", "upper"]:
        raise DataError(f"{args.predictions}: expected columns run,index,mean,lower,upper")
    truth = fio.read_outputs(args.truth)
    d_y, k = truth.shape
    if rows.shape[0] != d_y * k:
        raise DataError(f"{rows.shape[0]} prediction rows but the truth holds {d_y} x {k} values")
    run = rows[:, 0].astype(int) - 1
    idx = rows[:, 1].astype(int) - 1
    y = truth[idx, run]
    report = score(rows[:, 2], rows[:, 3], rows[:, 4], y, alpha=args.alpha)
    fio.write_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = bench_scaling(args.M, args.d, args.seeds, m=args.m, n_pred=args.n_pred)
    write_bench_csv(args.out, rows)
    for r in rows:
        logger.info("M=%d d=%d seed=%d ratio=%.2f", r.M, r.d, r.seed, r.ratio)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_calibration_args(p):
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--field-inputs", required=True)
    p.add_argument("--field-outputs", required=True)
    p.add_argument("--t-dim", type=int, default=1, help="trailing model inputs that are calibration parameters")
    p.add_argument("--discrepancy", choices=("linear", "file", "none"), help="overrides calibration.discrepancy")
    p.add_argument("--discrepancy-file", help="CSV basis, d_y rows by p_delta columns")
    p.add_argument("--index-values", help="CSV of functional index values for the linear basis")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flagp", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate ball-drop ensembles and field data")
    p.add_argument("--preset", choices=("emulation", "unbiased", "biased"), default="unbiased")
    p.add_argument("--M", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the emulator and write a model bundle")
    p.add_argument("--config")
    p.add_argument("--inputs", required=True)
    p.add_argument("--outputs", required=True)
    p.add_argument("--ranges", required=True)
    p.add_argument("--model", required=True, help="bundle path to write")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="emulator predictions with 95%% bands")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", help="MCMC calibration, optionally with calibrated predictions")
    _add_calibration_args(p)
    p.add_argument("--test-inputs", help="field-input CSV to predict at after calibration")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("map", help="deterministic MAP calibration")
    _add_calibration_args(p)
    p.add_argument("--out", required=True, help="MAP JSON path")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("score", help="score prediction bands against true curves")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", help="time fixed-lengthscale vs re-estimating neighbourhood prediction")
    p.add_argument("--M", type=int, nargs="+", default=[20000])
    p.add_argument("--d", type=int, nargs="+", default=[10])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--n-pred", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
