"""Time-embedded sample pairs (x_n, y_n) built from a TimeSeries.

Each embedded vector stacks ``ell`` consecutive raw rows in time order,
channels contiguous within each time step. The output sequence is the input
sequence shifted by one lag, so row n of Y is bit-identical to row n+1 of X.

X and Y are overlapping windows into the source series, so they are kept as
views by default; ``x_rows``/``y_rows`` materialize row blocks on demand
(the whole matrices are built lazily and cached on first attribute access).
"""

import numpy as np

from .errors import InsufficientDataError


class EmbeddedDataset:
    """Window-backed embedded inputs X and shifted outputs Y."""

    def __init__(self, values, ell, lag):
        self._values = values
        self.ell = int(ell)
        self.lag = float(lag)
        self.d_raw = values.shape[1]
        self.n_samples = values.shape[0] - self.ell
        self.dim = self.ell * self.d_raw
        self._X = None
        self._Y = None

    def window_rows(self, lo, hi):
        """Distinct embedded windows lo..hi-1; index N is the final output row.

        Window n flattens source rows n..n+ell-1, so there are N+1 of them:
        windows 0..N-1 are the X rows and windows 1..N the Y rows.
        """
        if not (0 <= lo <= hi <= self.n_samples + 1):
            raise IndexError(
                f"windows [{lo}, {hi}) out of range [0, {self.n_samples + 1})"
            )
        ell = self.ell
        return np.hstack([self._values[lo + t : hi + t] for t in range(ell)])

    def x_rows(self, lo, hi):
        """Embedded input rows lo..hi-1, materialized as a fresh array."""
        if not (0 <= lo <= hi <= self.n_samples):
            raise IndexError(f"x rows [{lo}, {hi}) out of range [0, {self.n_samples})")
        return self.window_rows(lo, hi)

    def y_rows(self, lo, hi):
        """Embedded output rows lo..hi-1 (inputs shifted by one lag)."""
        if not (0 <= lo <= hi <= self.n_samples):
            raise IndexError(f"y rows [{lo}, {hi}) out of range [0, {self.n_samples})")
        return self.window_rows(lo + 1, hi + 1)

    def x_take(self, indices):
        """Embedded input rows at arbitrary indices (for subsampling)."""
        indices = np.asarray(indices, dtype=np.intp)
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_samples):
            raise IndexError("embedded row index out of range")
        return np.hstack([self._values[indices + t] for t in range(self.ell)])

    @property
    def X(self):
        if self._X is None:
            self._X = self.x_rows(0, self.n_samples)
        return self._X

    @property
    def Y(self):
        if self._Y is None:
            self._Y = self.y_rows(0, self.n_samples)
        return self._Y


def embed(series, ell):
    """Build the embedded dataset of length-``ell`` windows from a series."""
    if ell < 1:
        raise ValueError(f"embedding length must be >= 1, got {ell}")
    if series.n_samples <= ell:
        raise InsufficientDataError(
            f"series has {series.n_samples} rows; embedding length {ell} "
            f"needs at least {ell + 1}"
        )
    return EmbeddedDataset(series.values, ell, series.lag)


def embedding_of_prefix(series, ell, end_index):
    """Embedded state whose window ends at row ``end_index`` (1-based count).

    The window covers rows end_index-ell .. end_index-1; with
    end_index = series.n_samples this is the forecast seed at the end of the
    training data.
    """
    if ell < 1:
        raise ValueError(f"embedding length must be >= 1, got {ell}")
    if end_index < ell:
        raise ValueError(
            f"end_index {end_index} too small for embedding length {ell}"
        )
    if end_index > series.n_samples:
        raise ValueError(
            f"end_index {end_index} exceeds series length {series.n_samples}"
        )
    return series.values[end_index - ell : end_index].reshape(-1).copy()
