"""Exception types raised across the package."""


class D2CError(Exception):
    """Base class. ``component`` names the module that failed."""

    component = "d2c"

    def __str__(self) -> str:
        return f"[{self.component}] {super().__str__()}"


class InvalidParameter(D2CError, ValueError):
    pass


class ShapeMismatch(D2CError, ValueError):
    pass


class DegenerateSchedule(D2CError, ValueError):
    component = "schedule"


class DegenerateLatent(D2CError, ValueError):
    component = "autoencoder"


class NonFiniteLoss(D2CError, FloatingPointError):
    def __init__(self, message: str, component: str = "trainer"):
        super().__init__(message)
        self.component = component


class NonFiniteOutput(D2CError, FloatingPointError):
    component = "diffusion"


class SingleClassInput(D2CError, ValueError):
    component = "conditional"


class EmptySplit(D2CError, ValueError):
    component = "conditional"


class AcceptanceStarvation(D2CError, RuntimeError):
    component = "conditional"


class QuadratureNonconvergence(D2CError, ArithmeticError):
    component = "priorhole"


class CorruptFile(D2CError, IOError):
    """Bad magic, unsupported version, truncation or CRC failure."""

    component = "io"


class CorruptHeader(CorruptFile):
    pass


class TruncatedPayload(CorruptFile):
    pass


class ConfigError(D2CError, ValueError):
    component = "config"
