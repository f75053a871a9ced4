"""Float-arithmetic instrumentation for the integer path.

Every integer kernel is wrapped with :func:`integer_op`. While a
:class:`FloatTrace` is active, each call inspects its operands and results
and records any floating-point array or scalar it finds. An integer-only
forward pass must finish with ``trace.float_ops == 0``.
"""

from __future__ import annotations

import contextvars
import dataclasses
import functools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_ACTIVE: contextvars.ContextVar["FloatTrace | None"] = contextvars.ContextVar(
    "iqkernel_float_trace", default=None
)


@dataclass
class FloatTrace:
    calls: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def float_ops(self) -> int:
        return len(self.violations)

    @property
    def integer_calls(self) -> int:
        return len(self.calls)


def _float_leaves(obj, path, depth=0):
    if depth > 4 or obj is None:
        return
    if isinstance(obj, (bool, np.bool_, str)):
        return
    if isinstance(obj, (float, np.floating, complex)):
        yield path, type(obj).__name__
    elif isinstance(obj, np.ndarray):
        if obj.dtype.kind in "fc":
            yield path, str(obj.dtype)
        elif obj.dtype.kind == "O":
            for i, item in enumerate(obj.flat):
                if isinstance(item, float):
                    yield f"{path}[{i}]", "float"
                    break
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _float_leaves(item, f"{path}[{i}]", depth + 1)
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from _float_leaves(item, f"{path}.{key}", depth + 1)
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from _float_leaves(getattr(obj, f.name), f"{path}.{f.name}", depth + 1)


def integer_op(fn):
    """Mark ``fn`` as an integer-only kernel and audit it under tracing."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        trace = _ACTIVE.get()
        if trace is None:
            return fn(*args, **kwargs)
        name = fn.__qualname__
        found = list(_float_leaves(args, "args")) + list(_float_leaves(kwargs, "kwargs"))
        result = fn(*args, **kwargs)
        found += list(_float_leaves(result, "result"))
        trace.calls.append(name)
        for where, kind in found:
            trace.violations.append((name, where, kind))
        return result

    wrapper.__integer_op__ = True
    return wrapper


@contextmanager
def trace_float():
    trace = FloatTrace()
    token = _ACTIVE.set(trace)
    try:
        yield trace
    finally:
        _ACTIVE.reset(token)
