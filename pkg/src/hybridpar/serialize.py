"""JSON-friendly conversion shared by reports and the CLI.

Exact quantities (bytes, counts) serialize as integers; everything else as a
decimal string with 12 significant digits so outputs round-trip losslessly
across languages.
"""

from __future__ import annotations

import dataclasses
import decimal
import enum
import math
from fractions import Fraction
from typing import Any

_CTX = decimal.Context(prec=12, rounding=decimal.ROUND_HALF_EVEN)


def real_str(x: Fraction | float | int) -> str:
    if isinstance(x, Fraction):
        d = _CTX.divide(decimal.Decimal(x.numerator), decimal.Decimal(x.denominator))
    else:
        d = _CTX.create_decimal(repr(float(x)))
    return format(d.normalize(_CTX), "g") if d != 0 else "0"


def number(x: Any) -> int | str:
    if isinstance(x, bool):
        raise TypeError("bool is not a number here")
    if isinstance(x, int):
        return x
    if isinstance(x, Fraction):
        return x.numerator if x.denominator == 1 else real_str(x)
    if isinstance(x, float):
        if math.isfinite(x) and x.is_integer():
            return int(x)
        return real_str(x)
    raise TypeError(f"not a number: {x!r}")


def to_jsonable(obj: Any) -> Any:
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (int, float, Fraction)):
        return number(obj)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if hasattr(obj, "item"):  # numpy scalar
        return to_jsonable(obj.item())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))
