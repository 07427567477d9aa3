from typing import List

import numpy as np

_DECIMALS = 12


def _round(value: float) -> float:
    return round(float(value), _DECIMALS)


def rho_grid(step: float) -> List[float]:
    """
    Interior grid {step, 2*step, ..., 1 - step} searched for the load cap.

    Args:
        step: Grid spacing, 0 < step <= 0.1

    Returns:
        List[float]: Ascending grid values rounded to 12 decimals
    """
    if not 0 < step <= 0.1:
        raise ValueError(f"Grid step must lie in (0, 0.1], got {step!r}")
    count = int(round(1.0 / step))
    values = [_round(k * step) for k in range(1, count)]
    return [v for v in values if 0 < v < 1]


def _parse_range(part: str) -> List[float]:
    start, step, stop = (float(x) for x in part.split(":"))
    if step <= 0:
        raise ValueError(f"Range step must be positive in {part!r}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [_round(start + k * step) for k in range(max(count, 0))]


def parse_rho_grid(text: str) -> List[float]:
    """
    Parse a rho grid given as ``start:step:stop`` (inclusive) or a comma list.

    Examples:
        >>> parse_rho_grid("0.25:0.25:0.75")
        [0.25, 0.5, 0.75]
        >>> parse_rho_grid("0.5, 1")
        [0.5, 1.0]
    """
    values: List[float] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if ":" in part:
                values.extend(_parse_range(part))
            else:
                values.append(_round(float(part)))
    except ValueError as e:
        raise ValueError(f"Invalid rho grid {text!r}: {e}")

    values = sorted(set(values))
    if not values:
        raise ValueError(f"Invalid rho grid {text!r}: no values")
    bad = [v for v in values if not 0 < v <= 1]
    if bad:
        raise ValueError(f"Invalid rho grid {text!r}: values outside (0, 1]: {bad}")
    return values


def format_seconds(seconds: float) -> str:
    """Human-readable duration for progress output."""
    if seconds < 1:
        return f"{seconds * 1000:.0f} ms"
    if seconds < 60:
        return f"{seconds:.1f} s"
    minutes, rest = divmod(seconds, 60)
    return f"{int(minutes)} min {rest:.0f} s"
