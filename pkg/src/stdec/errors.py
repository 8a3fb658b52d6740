""" Exceptions raised by stdec.

They subclass the builtin exceptions the checks would otherwise raise, so callers
can keep catching ``ValueError``.
"""


class StdecError(Exception):
    """ Root of every error raised on purpose by this package. """


class ConfigurationError(StdecError, ValueError):
    """ Inconsistent shapes, hyper-parameters or variant settings. """


class DataError(StdecError, ValueError):
    """ Input data that cannot be ingested, scaled, windowed or tested. """


class GradientCheckError(StdecError, RuntimeError):
    """ The finite-difference check could not be carried out. """
