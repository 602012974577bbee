"""Uniformly sampled multichannel time series: CSV ingestion and noise channels."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, InsufficientDataError


@dataclass(frozen=True)
class TimeSeries:
    """T x d array of observations on a uniform time grid with spacing ``lag``.

    Immutable: the value array is marked read-only after construction.
    """

    values: np.ndarray
    lag: float
    channel_names: tuple = ()

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"values must be 2-D (time x channel), got shape {vals.shape}")
        t, d = vals.shape
        if t < 2:
            raise InsufficientDataError(f"need at least 2 time points, got {t}")
        if d < 1:
            raise ValueError("need at least one channel")
        if not self.lag > 0:
            raise ValueError(f"lag must be positive, got {self.lag}")
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(vals))[0]
            raise DataFormatError(
                f"non-finite value at row {bad[0] + 1}, column {bad[1] + 1}"
            )
        names = tuple(self.channel_names) or tuple(f"c{j + 1}" for j in range(d))
        if len(names) != d:
            raise ValueError(f"expected {d} channel names, got {len(names)}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "lag", float(self.lag))
        object.__setattr__(self, "channel_names", names)

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_channels(self):
        return self.values.shape[1]


def _parse_cell(cell, line_no, col_no):
    try:
        value = float(cell)
    except ValueError:
        raise DataFormatError(
            f"row {line_no}, column {col_no}: could not parse {cell!r} as a number"
        ) from None
    if not math.isfinite(value):
        raise DataFormatError(
            f"row {line_no}, column {col_no}: non-finite value {cell!r}"
        )
    return value


def load_csv(path, lag):
    """Read a comma-separated series: one row per time point, one column per channel.

    An optional single header line (no cell parseable as a number) supplies
    channel names. Ragged or non-numeric rows raise DataFormatError with the
    1-based file location.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        raw_rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh)) if row]

    if not raw_rows:
        raise InsufficientDataError(f"{path}: no data rows")

    names = ()
    first_line, first = raw_rows[0]
    numeric_flags = []
    for cell in first:
        try:
            float(cell)
            numeric_flags.append(True)
        except ValueError:
            numeric_flags.append(False)
    if not any(numeric_flags):
        names = tuple(cell.strip() for cell in first)
        raw_rows = raw_rows[1:]

    if len(raw_rows) < 2:
        raise InsufficientDataError(
            f"{path}: need at least 2 data rows, got {len(raw_rows)}"
        )

    width = len(raw_rows[0][1])
    if names and len(names) != width:
        raise DataFormatError(
            f"{path}: header has {len(names)} columns, data rows have {width}"
        )
    data = np.empty((len(raw_rows), width))
    for r, (line_no, row) in enumerate(raw_rows):
        if len(row) != width:
            raise DataFormatError(
                f"{path}: row {line_no} has {len(row)} columns, expected {width}"
            )
        for c, cell in enumerate(row):
            data[r, c] = _parse_cell(cell.strip(), line_no, c + 1)

    return TimeSeries(values=data, lag=lag, channel_names=names)


def save_csv(series, path):
    """Write a TimeSeries as CSV with a header line, at round-trip precision."""
    np.savetxt(
        path,
        series.values,
        fmt="%.17g",
        delimiter=",",
        header=",".join(series.channel_names),
        comments="",
    )


def augment_noise(series, n_noise, seed):
    """Append ``n_noise`` channels of i.i.d. standard Gaussian draws.

    Original channels are untouched; the draws are deterministic under
    ``seed`` (one fresh value per time point per channel).
    """
    if n_noise < 0:
        raise ValueError(f"n_noise must be >= 0, got {n_noise}")
    if n_noise == 0:
        return series
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((series.n_samples, n_noise))
    values = np.hstack([series.values, noise])
    names = series.channel_names + tuple(
        f"noise_{j + 1}" for j in range(n_noise)
    )
    return TimeSeries(values=values, lag=series.lag, channel_names=names)
