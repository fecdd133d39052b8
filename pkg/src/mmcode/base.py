"""Estimator base class, input validation helpers, and shared errors."""

from __future__ import annotations

import hashlib
import inspect

import numpy as np


class ValidationError(ValueError):
    """Bad input data or configuration. CLI maps this to exit code 2."""


class TrainingError(RuntimeError):
    """Model fitting failed. CLI maps this to exit code 3."""


class BaseEstimator:
    """Minimal sklearn-style estimator base.

    Subclasses keep every constructor argument as an attribute of the same
    name (no renaming, no mutation in __init__), which is what makes
    get_params/set_params work by introspection.
    """

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        ]

    def get_params(self, deep=True):
        params = {}
        for name in self._param_names():
            value = getattr(self, name)
            params[name] = value
            if deep and hasattr(value, "get_params"):
                for k, v in value.get_params(deep=True).items():
                    params[f"{name}__{k}"] = v
        return params

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValidationError(
                    f"invalid parameter {name!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params(deep=False).items())
        return f"{type(self).__name__}({args})"


def check_array(X, ndim=2, dtype=np.float64, name="X"):
    """Coerce to a contiguous float ndarray and reject non-finite values."""
    X = np.ascontiguousarray(X, dtype=dtype)
    if X.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} contains non-finite values")
    return X


def check_binary_labels(y, name="y"):
    """Return labels as a {0, 1} int array; both classes must be present."""
    y = np.asarray(y)
    values = np.unique(y)
    if set(values.tolist()) <= {0, 1}:
        y01 = y.astype(np.int64)
    elif set(values.tolist()) <= {-1, 1}:
        y01 = (y > 0).astype(np.int64)
    else:
        raise ValidationError(f"{name} must be binary (0/1 or -1/+1), got values {values}")
    if np.unique(y01).size < 2:
        raise ValidationError(f"{name} contains a single class; need both classes")
    return y01


def check_X_y(X, y, name_x="X", name_y="y"):
    X = check_array(X, name=name_x)
    y = check_binary_labels(y, name=name_y)
    if X.shape[0] != y.shape[0]:
        raise ValidationError(
            f"{name_x} and {name_y} have inconsistent lengths: {X.shape[0]} vs {y.shape[0]}"
        )
    return X, y


def rng_from_seed(seed):
    """numpy Generator from a 64-bit seed (None picks an OS-entropy seed)."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(master_seed, *labels):
    """Derive a per-task 64-bit seed from a master seed and task labels.

    The derivation hashes the label path, so adding or removing other tasks
    never reshuffles this task's randomness.
    """
    key = str(int(master_seed)) + "|" + "/".join(str(x) for x in labels)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def state_hash(obj):
    """SHA-256 over a canonical serialization of fitted state.

    Supports nested dicts/lists/tuples of ndarrays, scalars, and strings.
    Dict keys are sorted, so hash equality means value equality.
    """
    h = hashlib.sha256()
    _feed_hash(h, obj)
    return h.hexdigest()


def _feed_hash(h, obj):
    if obj is None:
        h.update(b"N")
    elif isinstance(obj, np.ndarray):
        h.update(b"A")
        h.update(str(obj.dtype).encode())
        h.update(str(obj.shape).encode())
        h.update(np.ascontiguousarray(obj).tobytes())
    elif isinstance(obj, (bool, int, float, np.integer, np.floating)):
        h.update(b"S")
        h.update(repr(obj).encode())
    elif isinstance(obj, (str, bytes)):
        h.update(b"T")
        h.update(obj.encode() if isinstance(obj, str) else obj)
    elif isinstance(obj, dict):
        h.update(b"D")
        for k in sorted(obj, key=repr):
            _feed_hash(h, k)
            _feed_hash(h, obj[k])
    elif isinstance(obj, (list, tuple)):
        h.update(b"L")
        for item in obj:
            _feed_hash(h, item)
    elif hasattr(obj, "state_dict"):
        _feed_hash(h, obj.state_dict())
    else:
        raise TypeError(f"cannot hash object of type {type(obj).__name__}")
