"""Estimator base class, exceptions, and input validation helpers.

The estimator API mirrors the scikit-learn contract (``get_params`` /
``set_params``, ``fit`` returns ``self``, fitted attributes carry a trailing
underscore) without requiring scikit-learn itself: any tooling that relies on
the duck-typed contract, including ``sklearn.clone``, works with these
classes.
"""

from __future__ import annotations

import inspect

import numpy as np


class NotFittedError(ValueError):
    """Raised when a model is used before ``fit``."""


class NumericalError(RuntimeError):
    """Raised when an operation encounters non-finite values."""


class BaseEstimator:
    """Minimal scikit-learn-compatible estimator base.

    Subclasses must assign every ``__init__`` argument to an attribute of the
    same name and do no other work in ``__init__``.
    """

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        names = []
        for name, p in sig.parameters.items():
            if name == "self":
                continue
            if p.kind in (p.VAR_POSITIONAL, p.VAR_KEYWORD):
                raise TypeError(
                    f"{cls.__name__}.__init__ must use explicit keyword arguments"
                )
            names.append(name)
        return names

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


def check_fitted(estimator, attributes: tuple[str, ...]) -> None:
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; missing {missing}. "
            "Call fit() first."
        )


def as_float_array(x, name: str = "x", ndim: int | None = None) -> np.ndarray:
    """Convert to a float64 array, validating dimensionality and finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_length(x: np.ndarray, length: int, name: str = "x") -> np.ndarray:
    if x.shape[-1] != length:
        raise ValueError(f"{name} must have length {length}, got {x.shape[-1]}")
    return x


def check_same_shape(a: np.ndarray, b: np.ndarray, names: str = "a, b") -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch for {names}: {a.shape} vs {b.shape}")
