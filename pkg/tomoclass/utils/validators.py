import math

from tomoclass.core.errors import ParameterError


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def check_open_fraction(name: str, value: float) -> float:
    """0 < value < 1, finite."""
    if not (isinstance(value, (int, float)) and math.isfinite(value) and 0.0 < value < 1.0):
        raise ParameterError(f"{name} must be in (0,1), got {value}")
    return float(value)
