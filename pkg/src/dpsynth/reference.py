"""Seeded reference dataset with a fully known generative process.

A desk-scale stand-in for an admission-level health record extract: every
marginal distribution and the logistic label mechanism are declared up
front, so fidelity and utility results can be checked against exact ground
truth. The year column only drives the train/test split (the last year is
the holdout) and is not a modelled feature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import substream
from .schema import FeatureSpec, Schema

FIRST_YEAR = 2012


@dataclass
class MixtureSpec:
    """Parameters of a clipped Gaussian mixture column."""

    weights: list[float]
    means: list[float]
    sigmas: list[float]
    lo: float
    hi: float
    count: bool = False  # round to integers

    def __post_init__(self):
        k = len(self.weights)
        if k < 1 or len(self.means) != k or len(self.sigmas) != k:
            raise ConfigError("mixture weights/means/sigmas must align")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must sum to 1: {self.weights}")
        if any(w <= 0 for w in self.weights):
            raise ConfigError(f"mixture weights must be positive: {self.weights}")
        if any(s <= 0 for s in self.sigmas):
            raise ConfigError(f"mixture sigmas must be positive: {self.sigmas}")
        if not self.lo < self.hi:
            raise ConfigError(f"mixture clip range is empty: [{self.lo}, {self.hi}]")

    def to_json(self) -> dict:
        return {
            "weights": self.weights,
            "means": self.means,
            "sigmas": self.sigmas,
            "lo": self.lo,
            "hi": self.hi,
            "count": self.count,
        }


@dataclass
class LabelMechanism:
    """y ~ Bernoulli(sigmoid(intercept + sum coef * x)) over named columns.

    Continuous columns are standardized by the declared (center, scale)
    before the coefficient applies; bernoulli columns enter as 0/1.
    """

    name: str
    intercept: float
    coefficients: dict[str, float]
    standardize: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for col, (center, scale) in self.standardize.items():
            if scale <= 0:
                raise ConfigError(f"label mechanism: scale for {col!r} must be > 0")
            if col not in self.coefficients:
                raise ConfigError(f"label mechanism: {col!r} standardized but has no coefficient")

    def logits(self, columns: dict[str, np.ndarray]) -> np.ndarray:
        n = len(next(iter(columns.values())))
        z = np.full(n, self.intercept, dtype=np.float64)
        for col, coef in self.coefficients.items():
            if col not in columns:
                raise ConfigError(f"label mechanism references unknown column {col!r}")
            x = np.asarray(columns[col], dtype=np.float64)
            if col in self.standardize:
                center, scale = self.standardize[col]
                x = (x - center) / scale
            z += coef * x
        return z

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "intercept": self.intercept,
            "coefficients": self.coefficients,
            "standardize": {k: list(v) for k, v in self.standardize.items()},
        }


@dataclass
class ReferenceDataSpec:
    n_rows: int = 20000
    bernoulli: dict[str, float] = field(default_factory=dict)
    categorical: dict[str, dict[str, float]] = field(default_factory=dict)
    continuous: dict[str, MixtureSpec] = field(default_factory=dict)
    label: LabelMechanism | None = None
    n_years: int = 6  # the last year becomes the holdout

    def __post_init__(self):
        if self.n_rows < 1:
            raise ConfigError(f"n_rows must be >= 1, got {self.n_rows}")
        if self.n_years < 2:
            raise ConfigError(f"need >= 2 years for a holdout split, got {self.n_years}")
        for name, p in self.bernoulli.items():
            if not 0.0 < p < 1.0:
                raise ConfigError(f"bernoulli p for {name!r} must be in (0, 1), got {p}")
        for name, cats in self.categorical.items():
            if len(cats) < 2:
                raise ConfigError(f"categorical {name!r} needs >= 2 categories")
            if any(p <= 0 for p in cats.values()):
                raise ConfigError(f"categorical {name!r} has a non-positive probability")
            if abs(sum(cats.values()) - 1.0) > 1e-9:
                raise ConfigError(f"categorical {name!r} probabilities must sum to 1")
        if self.label is None:
            raise ConfigError("a label mechanism is required")
        all_names = (
            ["year"]
            + list(self.bernoulli)
            + list(self.categorical)
            + list(self.continuous)
            + [self.label.name]
        )
        if len(set(all_names)) != len(all_names):
            raise ConfigError(f"duplicate column names in spec: {all_names}")

    @property
    def column_order(self) -> list[str]:
        return (
            ["year"]
            + list(self.bernoulli)
            + list(self.categorical)
            + list(self.continuous)
            + [self.label.name]
        )

    def schema(self, modes: int = 5) -> Schema:
        feats = [FeatureSpec(name=n, kind="bernoulli") for n in self.bernoulli]
        feats += [
            FeatureSpec(name=n, kind="categorical", categories=list(cats))
            for n, cats in self.categorical.items()
        ]
        feats += [
            FeatureSpec(name=n, kind="continuous", modes=modes, count=m.count)
            for n, m in self.continuous.items()
        ]
        feats.append(FeatureSpec(name=self.label.name, kind="bernoulli", label=True))
        return Schema(features=feats, split_column="year")

    def to_json(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "bernoulli": self.bernoulli,
            "categorical": self.categorical,
            "continuous": {k: v.to_json() for k, v in self.continuous.items()},
            "label": self.label.to_json(),
            "n_years": self.n_years,
        }

    @staticmethod
    def from_json(obj: dict) -> "ReferenceDataSpec":
        return ReferenceDataSpec(
            n_rows=obj["n_rows"],
            bernoulli=dict(obj["bernoulli"]),
            categorical={k: dict(v) for k, v in obj["categorical"].items()},
            continuous={
                k: MixtureSpec(
                    weights=list(v["weights"]),
                    means=list(v["means"]),
                    sigmas=list(v["sigmas"]),
                    lo=v["lo"],
                    hi=v["hi"],
                    count=v["count"],
                )
                for k, v in obj["continuous"].items()
            },
            label=LabelMechanism(
                name=obj["label"]["name"],
                intercept=obj["label"]["intercept"],
                coefficients=dict(obj["label"]["coefficients"]),
                standardize={
                    k: (v[0], v[1]) for k, v in obj["label"]["standardize"].items()
                },
            ),
            n_years=obj["n_years"],
        )


def default_spec(n_rows: int = 20000) -> ReferenceDataSpec:
    """The standard 20k-row admission-style dataset."""
    return ReferenceDataSpec(
        n_rows=n_rows,
        bernoulli={
            "sex": 0.5,
            "emergency": 0.55,
            "icu": 0.2,
            "smoker": 0.25,
            "prior_admission": 0.3,
            "weekend_admit": 0.28,
            "on_medication": 0.6,
            "has_allergy": 0.12,
            "transfer_in": 0.08,
            "overnight": 0.7,
        },
        categorical={
            "region": {"north": 0.5, "central": 0.3, "south": 0.2},
            "admission_type": {
                "acute": 0.4,
                "elective": 0.25,
                "maternity": 0.15,
                "outpatient": 0.12,
                "other": 0.08,
            },
            "diag_group": {
                "circulatory": 0.3,
                "respiratory": 0.2,
                "digestive": 0.15,
                "injury": 0.12,
                "musculoskeletal": 0.1,
                "neoplasm": 0.08,
                "other": 0.05,
            },
            "proc_group": {
                "P01": 0.18,
                "P02": 0.15,
                "P03": 0.12,
                "P04": 0.10,
                "P05": 0.09,
                "P06": 0.08,
                "P07": 0.07,
                "P08": 0.06,
                "P09": 0.05,
                "P10": 0.04,
                "P11": 0.03,
                "P12": 0.03,
            },
        },
        continuous={
            "age": MixtureSpec(
                weights=[0.35, 0.65],
                means=[8.0, 52.0],
                sigmas=[5.0, 16.0],
                lo=0.0,
                hi=99.0,
                count=True,
            ),
            "stay_days": MixtureSpec(
                weights=[0.7, 0.3],
                means=[2.5, 11.0],
                sigmas=[1.2, 4.0],
                lo=0.0,
                hi=60.0,
            ),
        },
        label=LabelMechanism(
            name="outcome",
            intercept=-2.2,
            coefficients={
                "emergency": 3.0,
                "sex": 1.2,
                "icu": 1.8,
                "smoker": -1.4,
                "age": 0.9,
            },
            standardize={"age": (40.0, 20.0)},
        ),
    )


def _sample_mixture(spec: MixtureSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
    vals = rng.normal(np.asarray(spec.means)[comp], np.asarray(spec.sigmas)[comp])
    vals = np.clip(vals, spec.lo, spec.hi)
    if spec.count:
        vals = np.rint(vals)
    return vals


def sample_columns(spec: ReferenceDataSpec, seed: int) -> dict[str, np.ndarray]:
    """Numeric column arrays (categoricals as category indices)."""
    rng = substream(seed, "data")
    n = spec.n_rows
    cols: dict[str, np.ndarray] = {}
    cols["year"] = FIRST_YEAR + (spec.n_years * np.arange(n)) // n
    for name, p in spec.bernoulli.items():
        cols[name] = (rng.random(n) < p).astype(np.int64)
    for name, cats in spec.categorical.items():
        cols[name] = rng.choice(len(cats), size=n, p=list(cats.values()))
    for name, mix in spec.continuous.items():
        cols[name] = _sample_mixture(mix, n, rng)
    z = spec.label.logits(cols)
    p = 1.0 / (1.0 + np.exp(-z))
    cols[spec.label.name] = (rng.random(n) < p).astype(np.int64)
    return cols


def _format_cell(name: str, value, spec: ReferenceDataSpec) -> str:
    if name in spec.categorical:
        return list(spec.categorical[name])[int(value)]
    if name in spec.continuous and not spec.continuous[name].count:
        return repr(round(float(value), 3))
    return str(int(value))


def make_reference_data(spec: ReferenceDataSpec, seed: int, out_dir) -> dict:
    """Write reference.csv, schema.json and ground_truth.json; return paths."""
    from pathlib import Path

    from .encoding import Table

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = sample_columns(spec, seed)
    order = spec.column_order
    rows = [
        [_format_cell(name, cols[name][i], spec) for name in order]
        for i in range(spec.n_rows)
    ]
    table = Table(order, rows)
    csv_path = out / "reference.csv"
    table.write_csv(csv_path)
    schema_path = out / "schema.json"
    spec.schema().save(schema_path)
    truth_path = out / "ground_truth.json"
    truth = {
        "seed": seed,
        "spec": spec.to_json(),
        "label_prevalence": float(np.mean(cols[spec.label.name])),
    }
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"csv": csv_path, "schema": schema_path, "ground_truth": truth_path}
