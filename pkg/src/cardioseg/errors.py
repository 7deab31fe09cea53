"""Exception hierarchy shared across the toolkit.

The CLI maps these onto its stable exit codes: input-format problems
exit 2, numeric failures exit 3, I/O failures exit 4.
"""


class CardiosegError(Exception):
    """Base class for all toolkit errors."""


class InputFormatError(CardiosegError):
    """A file or in-memory input violates its declared format."""


class NumericError(CardiosegError):
    """A computation produced a non-finite value or failed a check."""


# --- NIfTI-1 -----------------------------------------------------------

class NiftiError(InputFormatError):
    pass


class NiftiHeaderError(NiftiError):
    """sizeof_hdr is not 348 or another header field is malformed."""


class NiftiMagicError(NiftiError):
    """Magic bytes are neither 'n+1\\0' nor 'ni1\\0'."""


class NiftiDatatypeError(NiftiError):
    """Datatype code outside the supported {uint8, int16, float32} set."""


class NiftiDimError(NiftiError):
    """dim[0] outside {2, 3, 4}."""


class NiftiTruncatedError(NiftiError):
    """Voxel payload shorter than the header promises."""


# --- model container ---------------------------------------------------

class ModelFormatError(InputFormatError):
    pass


class ModelMagicError(ModelFormatError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class ModelTruncatedError(ModelFormatError):
    pass


class ModelShapeError(ModelFormatError):
    """Stored tensor census disagrees with the config's layer chain."""
