"""Context variables, their raw featurization, and the ReLU context encoder.

A :class:`ContextSchema` declares the metadata variables attached to every
document. Categorical variables reserve index 0 for rare or unseen values;
numeric variables carry the mean and standard deviation (measured on the
training split) used to standardize them.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, EncodingError, NumericError, SchemaError

OTHER_LABEL = "<other>"

# One entry per schema variable: category index, raw float, or None (missing).
ContextValue = tuple


@dataclass(frozen=True)
class Categorical:
    name: str
    cardinality: int
    labels: Optional[tuple] = None

    def __post_init__(self):
        if self.cardinality < 2:
            raise SchemaError(f"categorical variable {self.name!r} needs cardinality >= 2, got {self.cardinality}")
        if self.labels is not None:
            if len(self.labels) != self.cardinality:
                raise SchemaError(f"variable {self.name!r}: {len(self.labels)} labels for cardinality {self.cardinality}")
            if len(set(self.labels)) != len(self.labels):
                raise SchemaError(f"variable {self.name!r} has duplicate labels")

    kind = "categorical"

    @property
    def width(self) -> int:
        return self.cardinality

    def index_of(self, label) -> int:
        """Map a raw label to its index; unseen labels go to the reserved bucket 0."""
        if self.labels is None:
            raise SchemaError(f"variable {self.name!r} has no label table")
        try:
            return self.labels.index(str(label))
        except ValueError:
            return 0


@dataclass(frozen=True)
class Numeric:
    name: str
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise SchemaError(f"numeric variable {self.name!r} needs a positive finite stddev, got {self.std}")
        if not math.isfinite(self.mean):
            raise SchemaError(f"numeric variable {self.name!r} has non-finite mean")

    kind = "numeric"
    width = 1


Variable = Union[Categorical, Numeric]


@dataclass(frozen=True)
class ContextSchema:
    variables: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate context variable names in {names}")

    @property
    def names(self) -> list:
        return [v.name for v in self.variables]

    @property
    def raw_width(self) -> int:
        return sum(v.width for v in self.variables)

    @property
    def all_categorical(self) -> bool:
        return all(isinstance(v, Categorical) for v in self.variables)

    @property
    def n_classes(self) -> int:
        """Size of the cross product of all categorical variables."""
        n = 1
        for v in self.variables:
            if isinstance(v, Categorical):
                n *= v.cardinality
        return n

    def __len__(self):
        return len(self.variables)

    def value(self, mapping: Mapping[str, Any], strict: bool = True) -> ContextValue:
        """Build a ContextValue from a ``{name: raw value}`` mapping.

        Keys absent from ``mapping`` become missing entries. Unknown keys raise
        :class:`SchemaError` when ``strict``.
        """
        if strict:
            unknown = set(mapping) - set(self.names)
            if unknown:
                raise SchemaError(f"unknown context key(s): {sorted(unknown)}")
        out = []
        for var in self.variables:
            raw = mapping.get(var.name)
            if raw is None:
                out.append(None)
            elif isinstance(var, Categorical):
                out.append(var.index_of(raw) if var.labels is not None else int(raw))
            else:
                try:
                    x = float(raw)
                except (TypeError, ValueError):
                    raise EncodingError(f"variable {var.name!r}: {raw!r} is not numeric") from None
                out.append(x)
        return tuple(out)

    def describe(self, value: ContextValue) -> list:
        """Human-readable field values (labels for categoricals)."""
        out = []
        for var, x in zip(self.variables, value):
            if x is None:
                out.append("")
            elif isinstance(var, Categorical) and var.labels is not None:
                out.append(var.labels[x])
            else:
                out.append(x)
        return out

    def to_dict(self) -> dict:
        out = []
        for v in self.variables:
            if isinstance(v, Categorical):
                out.append({"name": v.name, "kind": "categorical", "cardinality": v.cardinality,
                            "labels": list(v.labels) if v.labels is not None else None})
            else:
                out.append({"name": v.name, "kind": "numeric", "mean": v.mean, "std": v.std})
        return {"variables": out}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextSchema":
        vs = []
        for item in d.get("variables", []):
            if item["kind"] == "categorical":
                labels = item.get("labels")
                vs.append(Categorical(item["name"], int(item["cardinality"]),
                                      tuple(labels) if labels is not None else None))
            elif item["kind"] == "numeric":
                vs.append(Numeric(item["name"], float(item["mean"]), float(item["std"])))
            else:
                raise SchemaError(f"unknown variable kind {item['kind']!r}")
        return cls(tuple(vs))


def build_schema(contexts: Sequence[Mapping[str, Any]], kinds: Optional[Mapping[str, str]] = None,
                 min_count: int = 1) -> ContextSchema:
    """Infer a schema from training-split context dicts.

    ``kinds`` maps variable names to ``"categorical"``/``"numeric"``; variables
    not listed are categorical when any value is a string, numeric otherwise.
    Categories seen fewer than ``min_count`` times share the reserved bucket.
    """
    kinds = dict(kinds or {})
    names: list = []
    for ctx in contexts:
        for name in ctx:
            if name not in names:
                names.append(name)
    for name in kinds:
        if name not in names:
            names.append(name)
    variables = []
    for name in names:
        vals = [ctx[name] for ctx in contexts if ctx.get(name) is not None]
        kind = kinds.get(name)
        if kind is None:
            kind = "categorical" if any(isinstance(v, (str, bool)) for v in vals) else "numeric"
        if kind == "categorical":
            counts = Counter(str(v) for v in vals)
            kept = sorted(lab for lab, n in counts.items() if n >= min_count)
            variables.append(Categorical(name, len(kept) + 1, (OTHER_LABEL, *kept)))
        elif kind == "numeric":
            x = np.asarray([float(v) for v in vals], dtype=np.float64)
            mean = float(x.mean()) if x.size else 0.0
            std = float(x.std()) if x.size else 1.0
            variables.append(Numeric(name, mean, std if std > 0 else 1.0))
        else:
            raise SchemaError(f"variable {name!r}: unknown kind {kind!r}")
    return ContextSchema(tuple(variables))


def encode_raw(schema: ContextSchema, value: ContextValue) -> np.ndarray:
    """Concatenate one-hot blocks and standardized scalars for ``value``.

    Missing categorical entries become the uniform distribution over their
    block and missing numeric entries become 0 (the standardized mean).
    """
    if len(value) != len(schema):
        raise EncodingError(f"context has {len(value)} entries, schema declares {len(schema)}")
    out = np.zeros(schema.raw_width, dtype=np.float64)
    pos = 0
    for var, x in zip(schema.variables, value):
        if isinstance(var, Categorical):
            if x is None:
                out[pos:pos + var.cardinality] = 1.0 / var.cardinality
            else:
                if isinstance(x, (bool, np.bool_)) or int(x) != x or not 0 <= int(x) < var.cardinality:
                    raise EncodingError(f"variable {var.name!r}: category index {x!r} outside [0, {var.cardinality})")
                out[pos + int(x)] = 1.0
        else:
            if x is not None:
                x = float(x)
                if not math.isfinite(x):
                    raise NumericError(f"variable {var.name!r}: non-finite value {x}")
                out[pos] = (x - var.mean) / var.std
        pos += var.width
    return out


def class_weights(schema: ContextSchema, value: ContextValue) -> np.ndarray:
    """Distribution over the categorical cross product (mixed radix, first variable most significant).

    A fully observed value gives a one-hot vector; missing variables spread
    mass uniformly over their categories.
    """
    w = np.ones(1, dtype=np.float64)
    for var, x in zip(schema.variables, value):
        if not isinstance(var, Categorical):
            continue
        if x is None:
            block = np.full(var.cardinality, 1.0 / var.cardinality)
        else:
            if not 0 <= int(x) < var.cardinality:
                raise EncodingError(f"variable {var.name!r}: category index {x!r} outside [0, {var.cardinality})")
            block = np.zeros(var.cardinality)
            block[int(x)] = 1.0
        w = np.outer(w, block).reshape(-1)
    return w


@dataclass
class ContextEncoder:
    """``c = W2 relu(W1 x + b1) + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def input_width(self) -> int:
        return self.W1.shape[1]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[0]

    @classmethod
    def from_params(cls, params: Mapping[str, np.ndarray]) -> "ContextEncoder":
        return cls(params["enc_W1"], params["enc_b1"], params["enc_W2"], params["enc_b2"])


def embed_context(enc: ContextEncoder, raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.ndim != 1 or raw.shape[0] != enc.input_width:
        raise DimensionError(f"encoder expects a raw vector of width {enc.input_width}, got shape {raw.shape}")
    hidden = np.maximum(enc.W1 @ raw + enc.b1, 0.0)
    return enc.W2 @ hidden + enc.b2


def embed_batch(enc: ContextEncoder, raw: np.ndarray):
    """Row-wise :func:`embed_context`; also returns the pre-activations for backprop."""
    if raw.ndim != 2 or raw.shape[1] != enc.input_width:
        raise DimensionError(f"encoder expects raw rows of width {enc.input_width}, got shape {raw.shape}")
    pre = raw @ enc.W1.T + enc.b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ enc.W2.T + enc.b2, pre, hidden
