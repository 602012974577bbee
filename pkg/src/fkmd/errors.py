"""Exception taxonomy.

Two broad families matter for the CLI exit codes: problems with the input
data (DataError) and problems arising inside the numerics (NumericalError).
Argument/usage mistakes raise plain ValueError.
"""


class FkmdError(Exception):
    """Base class for all library errors."""


class DataError(FkmdError):
    """The input data is unusable (malformed, too short, degenerate)."""


class DataFormatError(DataError):
    """Malformed input file: ragged rows, unparseable or non-finite cells."""


class InsufficientDataError(DataError):
    """Too few samples for the requested operation."""


class DegenerateDataError(DataError):
    """Data carries no usable spread (e.g. all pairwise distances equal)."""


class NumericalError(FkmdError):
    """A numerical routine failed or produced unusable output."""


class NotPositiveSemidefiniteError(NumericalError):
    """Matrix expected to be PSD has a significantly negative eigenvalue."""


class RankDeficiencyError(NumericalError):
    """Normal equations are singular; a positive ridge is required."""


class SingularMetricError(NumericalError):
    """Metric matrix is not invertible where an inverse is required."""


class DivergenceError(NumericalError):
    """A forecast blew up (non-finite values from a growing retained mode)."""


class IntegrationError(NumericalError):
    """Time integration produced a non-finite state."""


class UnsupportedObservationError(FkmdError):
    """The requested operation needs a different observation map."""


class IterationError(FkmdError):
    """An iteration of the driver failed.

    Carries the reports completed so far and the step that failed; the
    underlying exception is chained as ``__cause__``.
    """

    def __init__(self, message, iteration, step, reports):
        super().__init__(message)
        self.iteration = iteration
        self.step = step
        self.reports = reports
