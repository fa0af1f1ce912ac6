"""Input validation helpers shared by loaders, estimators, and the CLI."""

from __future__ import annotations

from typing import Any, Iterable


class SchemaError(ValueError):
    """A line or object violates a wire-format schema."""


def ensure(condition: bool, message: str, exc: type[Exception] = ValueError) -> None:
    if not condition:
        raise exc(message)


def require_keys(obj: dict, keys: Iterable[str], where: str) -> None:
    """Raise SchemaError naming the first missing key in ``obj``."""
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    for key in keys:
        if key not in obj:
            raise SchemaError(f"{where}: missing required key {key!r}")


def check_type(value: Any, types, name: str, where: str) -> Any:
    if not isinstance(value, types):
        expected = getattr(types, "__name__", str(types))
        raise SchemaError(f"{where}: {name} must be {expected}, got {type(value).__name__}")
    return value


def check_positive_int(value: Any, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return value


def check_fraction(value: float, name: str) -> float:
    if not (0.0 < value <= 1.0):
        raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
    return float(value)


def check_fitted(estimator, attribute: str) -> None:
    """Raise sklearn's NotFittedError when ``attribute`` is absent."""
    from sklearn.exceptions import NotFittedError

    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; call fit() before using this method"
        )
