"""Declarative description of a heterogeneous table.

A Schema is an ordered list of features, each bernoulli, categorical over a
fixed vocabulary, or continuous with a Gaussian-mixture decomposition.
Exactly one feature is flagged as the downstream label and must be
bernoulli. The schema also carries row filters (predicates on named
columns, applied before encoding) and the name of the column used for the
train/test split.

Encoded widths: 1 for bernoulli, K for categorical-K, M+1 for continuous
with M mixture modes (the mode one-hot plus the within-mode scalar).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SchemaError

SIGMA_FLOOR = 1e-4

KINDS = ("bernoulli", "categorical", "continuous")
FILTER_OPS = ("eq", "ne", "in", "not_in", "lt", "le", "gt", "ge")


@dataclass
class GmmModel:
    """A fitted one-dimensional Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if not (self.weights.shape == self.means.shape == self.stds.shape):
            raise ConfigError("mixture parameter arrays must share a shape")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights sum to {self.weights.sum()!r}, not 1")
        if np.any(self.stds < SIGMA_FLOOR):
            raise ConfigError(f"mixture stds must be >= {SIGMA_FLOOR}")

    @property
    def n_modes(self) -> int:
        return len(self.weights)

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "GmmModel":
        return GmmModel(obj["weights"], obj["means"], obj["stds"])


@dataclass
class FeatureSpec:
    name: str
    kind: str
    categories: list[str] | None = None
    modes: int = 5
    count: bool = False
    label: bool = False
    gmm: GmmModel | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.categories or len(self.categories) < 2:
                raise ConfigError(
                    f"feature {self.name!r}: categorical needs >= 2 categories"
                )
            if len(set(self.categories)) != len(self.categories):
                raise ConfigError(f"feature {self.name!r}: duplicate categories")
        if self.kind == "continuous" and self.modes < 1:
            raise ConfigError(f"feature {self.name!r}: modes must be >= 1")
        if self.label and self.kind != "bernoulli":
            raise ConfigError(f"label feature {self.name!r} must be bernoulli")
        if self.gmm is not None and self.gmm.n_modes != self.modes:
            raise ConfigError(
                f"feature {self.name!r}: fitted mixture has {self.gmm.n_modes} "
                f"modes, schema declares {self.modes}"
            )

    @property
    def encoded_width(self) -> int:
        if self.kind == "bernoulli":
            return 1
        if self.kind == "categorical":
            return len(self.categories)
        return self.modes + 1

    def to_json(self) -> dict:
        obj: dict = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            obj["categories"] = list(self.categories)
        if self.kind == "continuous":
            obj["modes"] = self.modes
            if self.count:
                obj["count"] = True
            if self.gmm is not None:
                obj["gmm"] = self.gmm.to_json()
        if self.label:
            obj["label"] = True
        return obj

    @staticmethod
    def from_json(obj: dict) -> "FeatureSpec":
        gmm = obj.get("gmm")
        return FeatureSpec(
            name=obj["name"],
            kind=obj["kind"],
            categories=obj.get("categories"),
            modes=obj.get("modes", 5),
            count=obj.get("count", False),
            label=obj.get("label", False),
            gmm=GmmModel.from_json(gmm) if gmm else None,
        )


@dataclass
class RowFilter:
    """Keep rows of a named column satisfying op(value). Numeric ops coerce."""

    column: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in FILTER_OPS:
            raise ConfigError(f"unknown filter op {self.op!r}")

    def matches(self, cell: str) -> bool:
        if self.op == "eq":
            return cell == str(self.value)
        if self.op == "ne":
            return cell != str(self.value)
        if self.op == "in":
            return cell in {str(v) for v in self.value}
        if self.op == "not_in":
            return cell not in {str(v) for v in self.value}
        x, y = float(cell), float(self.value)
        return {"lt": x < y, "le": x <= y, "gt": x > y, "ge": x >= y}[self.op]

    def to_json(self) -> dict:
        return {"column": self.column, "op": self.op, "value": self.value}

    @staticmethod
    def from_json(obj: dict) -> "RowFilter":
        return RowFilter(obj["column"], obj["op"], obj["value"])


@dataclass
class Schema:
    features: list[FeatureSpec]
    filters: list[RowFilter] = field(default_factory=list)
    split_column: str | None = None

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate feature names in schema")
        labels = [f for f in self.features if f.label]
        if len(labels) != 1:
            raise ConfigError(f"schema needs exactly one label feature, got {len(labels)}")

    @property
    def encoded_width(self) -> int:
        return sum(f.encoded_width for f in self.features)

    @property
    def label_feature(self) -> FeatureSpec:
        return next(f for f in self.features if f.label)

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"no feature named {name!r}")

    def block_slices(self) -> dict[str, slice]:
        """Column range of each feature inside the encoded matrix."""
        out, offset = {}, 0
        for f in self.features:
            out[f.name] = slice(offset, offset + f.encoded_width)
            offset += f.encoded_width
        return out

    def label_column_index(self) -> int:
        return self.block_slices()[self.label_feature.name].start

    def to_json(self) -> dict:
        obj: dict = {"features": [f.to_json() for f in self.features]}
        if self.filters:
            obj["filters"] = [f.to_json() for f in self.filters]
        if self.split_column:
            obj["split_column"] = self.split_column
        return obj

    @staticmethod
    def from_json(obj: dict) -> "Schema":
        return Schema(
            features=[FeatureSpec.from_json(f) for f in obj["features"]],
            filters=[RowFilter.from_json(f) for f in obj.get("filters", [])],
            split_column=obj.get("split_column"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return Schema.from_json(json.load(fh))
