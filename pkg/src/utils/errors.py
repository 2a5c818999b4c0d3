class CrispError(RuntimeError):
    """Base class for every failure the command line reports with an exit code."""

    exit_code = 1


class InputError(CrispError):
    exit_code = 2


class FitError(CrispError):
    exit_code = 3


class ManifestParse(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class NonFiniteData(InputError):
    pass


class InsufficientOverlap(InputError):
    pass


class EmptySet(InputError):
    pass


class LengthMismatch(InputError):
    pass


class ScenarioMismatch(InputError):
    pass


class UnknownFormat(InputError):
    pass


class ConfigError(InputError):
    pass


class ConfigMismatch(InputError):
    pass


class DegenerateInput(FitError):
    pass


class InsufficientPoints(FitError):
    pass


def error_record(err: CrispError) -> dict:
    return {
        "error": type(err).__name__,
        "message": str(err),
        "exit_code": err.exit_code,
    }
