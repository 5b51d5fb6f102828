"""Exception types shared across the package.

Each CLI-facing error carries an ``exit_code`` so the command line can map
failures to distinct process exit statuses.
"""


class ProbStereoError(Exception):
    exit_code = 1


class ConfigError(ProbStereoError, ValueError):
    exit_code = 2


class DataError(ProbStereoError, ValueError):
    exit_code = 3


class NumericalError(ProbStereoError, ArithmeticError):
    exit_code = 4


class ShapeError(ProbStereoError, ValueError):
    exit_code = 5
