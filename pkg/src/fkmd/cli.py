"""Command-line front end: dataset generation, fitting, forecasting, scoring.

Commands: generate-lorenz, fit-predict, ordinary-kmd, score.
Exit codes: 0 success, 2 argument error, 3 data error, 4 numerical error.
The FKMD_THREADS environment variable (or --threads) caps worker threads.
"""

import argparse
import contextlib
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__, _accel
from .errors import DataError, FkmdError, IterationError, NumericalError
from .koopman import ModeFilter, ObservationMap
from .lorenz96 import Lorenz96Params, simulate
from .mahalanobis import channel_block_norms
from .pipeline import FKMDConfig, ordinary_kmd, run
from .tseries import TimeSeries, augment_noise, load_csv, save_csv

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

@contextlib.contextmanager
def _thread_cap(n_threads):
    """Cap numba and BLAS threads for one command; restored afterwards."""
    if n_threads is None:
        env = os.environ.get("FKMD_THREADS", "").strip()
        n_threads = int(env) if env else None
    if n_threads is None:
        yield
        return
    if n_threads < 1:
        raise ValueError(f"thread count must be >= 1, got {n_threads}")
    old_numba = None
    if _accel.NUMBA_ENABLED:
        import numba

        old_numba = numba.get_num_threads()
    _accel.set_num_threads(n_threads)
    try:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            yield
        else:
            with threadpool_limits(limits=n_threads):
                yield
    finally:
        if old_numba is not None:
            _accel.set_num_threads(old_numba)


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def _positive_int(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _nonneg_float(text):
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return value


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save_table(path, header, rows):
    np.savetxt(path, rows, fmt="%.17g", delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

CONFIG_KEYS = (
    "lag", "ell", "feature_kind", "n_features", "h", "iterations", "ridge",
    "metric_delta", "subsample", "seed", "prediction_steps", "prediction_scheme",
    "j_source", "rff_redraw", "block_rows", "observation",
    "metric_re_max", "metric_re_min", "metric_im_max", "metric_top_k",
    "predict_re_max", "predict_re_min", "predict_im_max", "predict_top_k",
)


def _load_config_file(path):
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise ValueError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return data


def _parse_observation(spec):
    if spec is None or spec == "identity":
        return ObservationMap.identity()
    if isinstance(spec, str):
        tokens = [t for t in spec.split(",") if t.strip()]
        return ObservationMap.select(int(t) for t in tokens)
    return ObservationMap.select(spec)


def _mode_filter_from(settings, prefix):
    kwargs = {}
    for name, attr in (("re_max", "re_max"), ("re_min", "re_min"), ("im_max", "im_max")):
        value = settings.get(f"{prefix}_{name}")
        if value is not None:
            kwargs[attr] = float(value)
    top_k = settings.get(f"{prefix}_top_k")
    if top_k is not None:
        kwargs["top_k"] = int(top_k)
    return kwargs


def _resolve_config(args):
    settings = {}
    if args.config:
        settings.update(_load_config_file(args.config))
    for key in CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if args.rff_fixed:
        settings["rff_redraw"] = False

    if "lag" not in settings:
        raise ValueError("lag is required (flag --lag or config key 'lag')")
    if "ell" not in settings:
        raise ValueError("ell is required (flag --ell or config key 'ell')")

    feature_kind = settings.get("feature_kind", "kernel")
    n_features = int(settings.get("n_features", 0))
    if feature_kind == "kernel" and n_features:
        print(
            "warning: n_features is ignored for kernel features (R = N)",
            file=sys.stderr,
        )
        n_features = 0

    metric_kwargs = _mode_filter_from(settings, "metric")
    if "top_k" not in metric_kwargs:
        metric_kwargs["top_k"] = 20
    predict_kwargs = _mode_filter_from(settings, "predict")

    config = FKMDConfig(
        ell=int(settings["ell"]),
        feature_kind=feature_kind,
        n_features=n_features,
        h=float(settings.get("h", 1.0)),
        iterations=int(settings.get("iterations", 1)),
        ridge=None if settings.get("ridge") is None else float(settings["ridge"]),
        metric_delta=float(settings.get("metric_delta", 0.0)),
        subsample=int(settings.get("subsample", 5000)),
        metric_mode_filter=ModeFilter(**metric_kwargs),
        predict_mode_filter=ModeFilter(**predict_kwargs),
        seed=int(settings.get("seed", 0)),
        observation=_parse_observation(settings.get("observation")),
        prediction_steps=int(settings.get("prediction_steps", 100)),
        prediction_scheme=settings.get("prediction_scheme", "spectral"),
        j_source=settings.get("j_source", "modal"),
        rff_redraw=bool(settings.get("rff_redraw", True)),
        block_rows=int(settings.get("block_rows", 1024)),
    )
    return config, float(settings["lag"])


def _filter_payload(mode_filter):
    def opt(value):
        return None if value is None or math.isinf(value) else value

    return {
        "re_max": opt(mode_filter.re_max),
        "re_min": opt(mode_filter.re_min),
        "im_max": opt(mode_filter.im_max),
        "top_k": mode_filter.top_k,
    }


def _config_payload(config, lag):
    obs = config.observation
    return {
        "lag": lag,
        "ell": config.ell,
        "feature_kind": config.feature_kind,
        "n_features": config.n_features,
        "h": config.h,
        "iterations": config.iterations,
        "ridge": config.ridge,
        "metric_delta": config.metric_delta,
        "subsample": config.subsample,
        "seed": config.seed,
        "observation": "identity" if obs.indices is None else list(obs.indices),
        "prediction_steps": config.prediction_steps,
        "prediction_scheme": config.prediction_scheme,
        "j_source": config.j_source,
        "rff_redraw": config.rff_redraw,
        "block_rows": config.block_rows,
        "metric_mode_filter": _filter_payload(config.metric_mode_filter),
        "predict_mode_filter": _filter_payload(config.predict_mode_filter),
    }


# ---------------------------------------------------------------------------
# generate-lorenz
# ---------------------------------------------------------------------------

def cmd_generate_lorenz(args):
    params = Lorenz96Params(
        n_coords=args.coords,
        forcing=args.forcing,
        dt=args.dt,
        sample_lag=args.lag,
        n_samples=args.samples,
    )
    series = simulate(params, burn_in=args.burn_in)

    meta = {}
    if args.observe_first:
        first = series.values[:, :1]
        series = TimeSeries(values=first, lag=series.lag, channel_names=("theta_1",))
    if args.center_first:
        centered = series.values.copy()
        center = float(centered[:, 0].mean())
        centered[:, 0] -= center
        series = TimeSeries(
            values=centered, lag=series.lag, channel_names=series.channel_names
        )
        meta["theta_1_center"] = center

    series = augment_noise(series, args.noise, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(series, out)
    if meta:
        _write_json(out.with_suffix(out.suffix + ".meta.json"), meta)
    print(
        f"wrote {series.n_samples} x {series.n_channels} samples "
        f"(lag {series.lag:g}) to {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit-predict / ordinary-kmd
# ---------------------------------------------------------------------------

def _forecast_labels(series, config):
    base = series.channel_names
    labels = [f"{ch}.t{t}" for t in range(config.ell) for ch in base]
    if config.observation.indices is not None:
        labels = [labels[i] for i in config.observation.indices]
    return labels


def _iteration_writer(outdir, series, config):
    labels = _forecast_labels(series, config)

    def write(report):
        it_dir = outdir / f"iter_{report.iteration}"
        it_dir.mkdir(parents=True, exist_ok=True)

        steps = np.arange(1, report.forecast.shape[0] + 1)[:, None]
        _save_table(
            it_dir / "forecast.csv",
            ",".join(["step"] + labels),
            np.hstack([steps, report.forecast]),
        )
        _save_table(
            it_dir / "eigenvalues.csv",
            "index,mu_re,mu_im,lambda_re,lambda_im,mode_norm",
            report.eigenvalue_table(),
        )
        metric = report.metric_updated if report.metric_updated is not None else report.metric
        _save_table(it_dir / "metric.csv", "", metric.M)
        _save_table(it_dir / "metric_sqrt.csv", "", metric.sqrt)
        blocks = channel_block_norms(metric, series.n_channels, config.ell)
        _save_table(
            it_dir / "metric_blocks.csv", ",".join(series.channel_names), blocks
        )
        _write_json(
            it_dir / "diagnostics.json",
            {
                "iteration": report.iteration,
                "sigma": report.sigma,
                "ridge": report.ridge,
                "residual": report.residual,
                "retained_predict": report.retained_predict,
                "retained_metric": report.retained_metric,
                "constancy_deviation": report.constancy_deviation,
            },
        )
        _write_json(it_dir / "timings.json", report.timings)
        print(
            f"iteration {report.iteration}: sigma={report.sigma:.6g} "
            f"residual={report.residual:.6g} "
            f"modes(predict)={report.retained_predict}",
            flush=True,
        )

    return write


def _run_fit(args, single_pass):
    config, lag = _resolve_config(args)
    series = load_csv(args.data, lag=lag)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    iterations = 1 if single_pass else config.iterations
    manifest = {
        "tool": "fkmd",
        "version": __version__,
        "command": "ordinary-kmd" if single_pass else "fit-predict",
        "seed": config.seed,
        "config": _config_payload(config, lag),
        "data": {
            "path": str(args.data),
            "rows": series.n_samples,
            "columns": series.n_channels,
            "sha256": _sha256(args.data),
        },
        "iterations": [
            {"index": i, "path": f"iter_{i}"} for i in range(1, iterations + 1)
        ],
    }
    _write_json(outdir / "manifest.json", manifest)

    writer = _iteration_writer(outdir, series, config)
    if single_pass:
        writer(ordinary_kmd(config, series))
    else:
        run(config, series, on_report=writer)
    print(f"run complete: {outdir}")
    return EXIT_OK


def cmd_fit_predict(args):
    return _run_fit(args, single_pass=False)


def cmd_ordinary_kmd(args):
    return _run_fit(args, single_pass=True)


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def _resolve_columns(series, selector):
    if selector is None:
        return list(range(series.n_channels)), list(series.channel_names)
    indices = []
    labels = []
    for token in selector.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            idx = int(token)
        except ValueError:
            try:
                idx = series.channel_names.index(token)
            except ValueError:
                raise ValueError(
                    f"unknown column {token!r}; available: "
                    f"{', '.join(series.channel_names)}"
                ) from None
        if not 0 <= idx < series.n_channels:
            raise ValueError(f"column index {idx} out of range")
        indices.append(idx)
        labels.append(series.channel_names[idx])
    if not indices:
        raise ValueError("empty column selector")
    return indices, labels


def _column_metrics(pred, ref):
    result = {}
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm == 0.0:
        result["relative_rms"] = None
        result["relative_rms_reason"] = "reference column has zero norm"
    else:
        result["relative_rms"] = float(np.linalg.norm(pred - ref) / ref_norm)
    ps = pred.std()
    rs = ref.std()
    if ps == 0.0 or rs == 0.0:
        result["correlation"] = None
        result["correlation_reason"] = (
            "zero-variance " + ("prediction" if ps == 0.0 else "reference")
        )
    else:
        result["correlation"] = float(np.corrcoef(pred, ref)[0, 1])
    return result


def cmd_score(args):
    pred = load_csv(args.pred, lag=1.0)
    ref = load_csv(args.ref, lag=1.0)

    pred_sel = args.pred_columns or args.columns
    ref_sel = args.ref_columns or args.columns
    pred_idx, pred_labels = _resolve_columns(pred, pred_sel)
    ref_idx, ref_labels = _resolve_columns(ref, ref_sel)
    if len(pred_idx) != len(ref_idx):
        raise ValueError(
            f"selected {len(pred_idx)} prediction columns but {len(ref_idx)} "
            "reference columns"
        )
    if pred.n_samples != ref.n_samples:
        raise DataError(
            f"row count mismatch: prediction has {pred.n_samples}, "
            f"reference has {ref.n_samples}"
        )

    p = pred.values[:, pred_idx]
    r = ref.values[:, ref_idx]
    columns = {}
    for j, (pl, rl) in enumerate(zip(pred_labels, ref_labels)):
        key = pl if pl == rl else f"{pl}~{rl}"
        columns[key] = _column_metrics(p[:, j], r[:, j])

    ref_norm = float(np.linalg.norm(r))
    correlations = [
        c["correlation"] for c in columns.values() if c["correlation"] is not None
    ]
    payload = {
        "rows": pred.n_samples,
        "columns": columns,
        "aggregate": {
            "relative_rms": (
                float(np.linalg.norm(p - r) / ref_norm) if ref_norm > 0 else None
            ),
            "mean_correlation": (
                float(np.mean(correlations)) if correlations else None
            ),
        },
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_fit_flags(p):
    p.add_argument("--data", required=True, help="training series CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="TOML config file (flags override it)")
    p.add_argument("--lag", type=_positive_float, help="time between rows")
    p.add_argument("--ell", type=_positive_int, help="embedding length")
    p.add_argument("--feature-kind", choices=("kernel", "rff"), dest="feature_kind")
    p.add_argument("--R", type=_positive_int, dest="n_features",
                   help="feature count for rff (ignored for kernel: R = N)")
    p.add_argument("--h", type=_positive_float, help="bandwidth factor")
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--ridge", type=_nonneg_float)
    p.add_argument("--metric-delta", type=_nonneg_float, dest="metric_delta")
    p.add_argument("--subsample", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=_positive_int, dest="prediction_steps")
    p.add_argument("--scheme", choices=("spectral", "rollout"),
                   dest="prediction_scheme")
    p.add_argument("--j-source", choices=("modal", "finite_difference", "full_state"),
                   dest="j_source")
    p.add_argument("--rff-fixed", action="store_true",
                   help="keep one frequency draw across iterations")
    p.add_argument("--block-rows", type=_positive_int, dest="block_rows")
    p.add_argument("--observe", dest="observation",
                   help="'identity' or comma-separated embedded coordinate indices")
    p.add_argument("--metric-re-max", type=float, dest="metric_re_max")
    p.add_argument("--metric-re-min", type=float, dest="metric_re_min")
    p.add_argument("--metric-im-max", type=float, dest="metric_im_max")
    p.add_argument("--metric-top-k", type=_positive_int, dest="metric_top_k")
    p.add_argument("--predict-re-max", type=float, dest="predict_re_max")
    p.add_argument("--predict-re-min", type=float, dest="predict_re_min")
    p.add_argument("--predict-im-max", type=float, dest="predict_im_max")
    p.add_argument("--predict-top-k", type=_positive_int, dest="predict_top_k")
    p.add_argument("--threads", type=_positive_int,
                   help="worker thread cap (also: FKMD_THREADS)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fkmd",
        description=__doc__.splitlines()[0],
    )
    parser.add_argument("--version", action="version", version=f"fkmd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-lorenz", help="simulate a Lorenz-96 series to CSV")
    gen.add_argument("--samples", type=_positive_int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--noise", type=_nonneg_int, default=0,
                     help="number of Gaussian nuisance channels to append")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--coords", type=_positive_int, default=40)
    gen.add_argument("--forcing", type=float, default=8.0)
    gen.add_argument("--dt", type=_positive_float, default=1e-2)
    gen.add_argument("--lag", type=_positive_float, default=0.05)
    gen.add_argument("--burn-in", type=_nonneg_float, default=0.0, dest="burn_in")
    gen.add_argument("--observe-first", action="store_true", dest="observe_first",
                     help="keep only the first coordinate")
    gen.add_argument("--center-first", action="store_true", dest="center_first",
                     help="mean-center the first coordinate (constant saved next to the CSV)")
    gen.set_defaults(func=cmd_generate_lorenz)

    fit = sub.add_parser("fit-predict", help="run the iterative procedure on a CSV")
    _add_fit_flags(fit)
    fit.set_defaults(func=cmd_fit_predict)

    okmd = sub.add_parser("ordinary-kmd",
                          help="single pass with the metric update skipped")
    _add_fit_flags(okmd)
    okmd.set_defaults(func=cmd_ordinary_kmd)

    score = sub.add_parser("score", help="relative RMS and correlation of a forecast")
    score.add_argument("--pred", required=True, help="forecast CSV")
    score.add_argument("--ref", required=True, help="reference CSV")
    score.add_argument("--columns", help="columns (indices or names) for both files")
    score.add_argument("--pred-columns", dest="pred_columns",
                       help="columns for the forecast file only")
    score.add_argument("--ref-columns", dest="ref_columns",
                       help="columns for the reference file only")
    score.add_argument("--out", help="write the metrics JSON here instead of stdout")
    score.set_defaults(func=cmd_score)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_cap(getattr(args, "threads", None)):
            return args.func(args)
    except IterationError as exc:
        cause = exc.__cause__
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, DataError):
            return EXIT_DATA
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except FkmdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
