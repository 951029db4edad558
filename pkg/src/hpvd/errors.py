"""Exception hierarchy.

Data problems carry a short machine-readable ``code`` so batch tools can
record them per study without parsing messages.
"""


class HPVDError(Exception):
    code = "error"
    exit_code = 1


class DataError(HPVDError):
    code = "data_error"
    exit_code = 3


class MissingFileError(DataError):
    code = "missing_file"


class DimsMismatchError(DataError):
    code = "dims_mismatch"


class ManifestError(DataError):
    code = "malformed_manifest"


class PhaseUnavailableError(DataError):
    code = "phase_unavailable"


class DivergenceError(HPVDError):
    """Raised when training produces a non-finite loss."""

    code = "divergence"
    exit_code = 4
