"""Fidelity and downstream-utility metrics.

Fidelity compares marginal parameter estimates between a real and a
synthetic encoded matrix: bernoulli columns by |p_real - p_synth| with the
synthetic column thresholded at 0.5, categorical blocks by the mean
absolute gap of per-category probabilities under argmax assignment, plus
the |difference of Frobenius norms| of two equally sized row samples.

Utility is AUROC (tie-corrected Mann-Whitney), AUPRC (average-precision
step rule), and thresholded accuracy, reported per repetition with a
normal-approximation 95% confidence interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MetricUndefinedError
from .rng import substream
from .schema import Schema

FROBENIUS_SAMPLE = 1000


# ---------------------------------------------------------------------------
# discrete assignment of soft generator output


def threshold_bernoulli(column: np.ndarray) -> np.ndarray:
    return (np.asarray(column) >= 0.5).astype(np.float64)


def argmax_onehot(block: np.ndarray) -> np.ndarray:
    out = np.zeros_like(block)
    out[np.arange(block.shape[0]), block.argmax(axis=1)] = 1.0
    return out


# ---------------------------------------------------------------------------
# fidelity


def bernoulli_divergence(real: np.ndarray, synth: np.ndarray, schema: Schema):
    """Mean |p_real - p_synth| over bernoulli features; None when there are none."""
    blocks = schema.block_slices()
    gaps = []
    for f in schema.features:
        if f.kind != "bernoulli":
            continue
        col = blocks[f.name].start
        p_real = float(np.mean(threshold_bernoulli(real[:, col])))
        p_synth = float(np.mean(threshold_bernoulli(synth[:, col])))
        gaps.append(abs(p_real - p_synth))
    return float(np.mean(gaps)) if gaps else None


def categorical_divergence(real: np.ndarray, synth: np.ndarray, schema: Schema):
    """Mean |p_i gap| over every (categorical feature, category) pair."""
    blocks = schema.block_slices()
    gaps = []
    for f in schema.features:
        if f.kind != "categorical":
            continue
        sl = blocks[f.name]
        p_real = argmax_onehot(real[:, sl]).mean(axis=0)
        p_synth = argmax_onehot(synth[:, sl]).mean(axis=0)
        gaps.extend(np.abs(p_real - p_synth).tolist())
    return float(np.mean(gaps)) if gaps else None


def category_sum_check(synth: np.ndarray, schema: Schema, mode: str = "argmax"):
    """Per-categorical-feature sum of estimated category probabilities.

    With argmax assignment each row lands in exactly one category, so every
    sum is exactly 1. The threshold mode reproduces the raw sanity check:
    category i counts for a row whenever its column value >= 0.5, which can
    assign zero or several categories per row.
    """
    if mode not in ("argmax", "threshold"):
        raise ContractError(f"unknown category sum mode {mode!r}")
    blocks = schema.block_slices()
    sums: dict[str, float] = {}
    for f in schema.features:
        if f.kind != "categorical":
            continue
        block = synth[:, blocks[f.name]]
        if mode == "argmax":
            assigned = argmax_onehot(block)
        else:
            assigned = (block >= 0.5).astype(np.float64)
        # integer total / n so a clean one-per-row assignment sums to exactly 1
        sums[f.name] = float(assigned.sum()) / block.shape[0]
    deviation = (
        float(np.mean([abs(s - 1.0) for s in sums.values()])) if sums else None
    )
    return sums, deviation


def frobenius_divergence(real_sample: np.ndarray, synth_sample: np.ndarray) -> float:
    """| ||R||_F - ||S||_F | on two equally sized samples."""
    if real_sample.shape != synth_sample.shape:
        raise ContractError(
            f"Frobenius comparison needs equal shapes, got "
            f"{real_sample.shape} / {synth_sample.shape}"
        )
    return float(abs(np.linalg.norm(real_sample) - np.linalg.norm(synth_sample)))


def sample_rows(matrix: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n distinct rows, or the whole matrix when it has fewer."""
    total = matrix.shape[0]
    if total <= n:
        return matrix
    idx = rng.choice(total, size=n, replace=False)
    return matrix[np.sort(idx)]


@dataclass
class FidelityReport:
    bernoulli: float | None
    categorical: float | None
    category_sums: dict[str, float]
    category_sum_deviation: float | None
    frobenius: float

    def __post_init__(self):
        for v in (self.bernoulli, self.categorical, self.frobenius):
            if v is not None and v < 0:
                raise ContractError(f"divergence cannot be negative: {v}")

    def to_json(self) -> dict:
        return {
            "bernoulli_divergence": self.bernoulli,
            "categorical_divergence": self.categorical,
            "category_sums": self.category_sums,
            "category_sum_deviation": self.category_sum_deviation,
            "frobenius_divergence": self.frobenius,
        }


def evaluate_fidelity(
    real: np.ndarray,
    synth: np.ndarray,
    schema: Schema,
    seed: int,
    sample_n: int = FROBENIUS_SAMPLE,
) -> FidelityReport:
    n = min(sample_n, real.shape[0], synth.shape[0])
    # both samples replay the same stream, so comparing a dataset against
    # itself draws identical rows and the divergence is exactly zero
    r = sample_rows(real, n, substream(seed, "eval", 0))
    s = sample_rows(synth, n, substream(seed, "eval", 0))
    sums, dev = category_sum_check(synth, schema, mode="argmax")
    return FidelityReport(
        bernoulli=bernoulli_divergence(real, synth, schema),
        categorical=categorical_divergence(real, synth, schema),
        category_sums=sums,
        category_sum_deviation=dev,
        frobenius=frobenius_divergence(r, s),
    )


# ---------------------------------------------------------------------------
# ranking metrics


def _check_binary_labels(labels: np.ndarray, metric: str) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ContractError(f"{metric}: labels must be 1-d")
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0, 1))):
        raise ContractError(f"{metric}: labels must be 0/1, got {classes}")
    return y.astype(np.int64)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count half a win."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary_labels(labels, "auroc")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("auroc needs both classes present")
    ranks = _average_ranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over distinct score thresholds (step rule)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary_labels(labels, "auprc")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise MetricUndefinedError("auprc needs both classes present")
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    s_sorted = s[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # keep only the last index of each tied block of scores
    last = np.nonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))[0]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary_labels(labels, "accuracy")
    return float(np.mean((s >= threshold).astype(np.int64) == y))


# ---------------------------------------------------------------------------
# utility reports


def _ci95(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return 1.96 * float(np.std(values, ddof=1)) / math.sqrt(len(values))


@dataclass
class UtilityReport:
    auroc_reps: list[float] = field(default_factory=list)
    auprc_reps: list[float] = field(default_factory=list)
    accuracy_reps: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name, reps in (
            ("auroc", self.auroc_reps),
            ("auprc", self.auprc_reps),
            ("accuracy", self.accuracy_reps),
        ):
            if any(not 0.0 <= v <= 1.0 for v in reps):
                raise ContractError(f"{name} repetitions must lie in [0, 1]: {reps}")

    def add(self, auroc_v: float, auprc_v: float, accuracy_v: float) -> None:
        self.auroc_reps.append(float(auroc_v))
        self.auprc_reps.append(float(auprc_v))
        self.accuracy_reps.append(float(accuracy_v))

    @property
    def auroc_mean(self) -> float:
        return float(np.mean(self.auroc_reps))

    @property
    def auprc_mean(self) -> float:
        return float(np.mean(self.auprc_reps))

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracy_reps))

    def to_json(self) -> dict:
        def pack(reps):
            return {
                "mean": float(np.mean(reps)) if reps else None,
                "ci95": _ci95(reps),
                "reps": list(reps),
            }

        return {
            "auroc": pack(self.auroc_reps),
            "auprc": pack(self.auprc_reps),
            "accuracy": pack(self.accuracy_reps),
        }


@dataclass
class SliceMetrics:
    n: int
    accuracy: float
    auroc: float | None
    auprc: float | None

    def to_json(self) -> dict:
        return {"n": self.n, "accuracy": self.accuracy, "auroc": self.auroc, "auprc": self.auprc}


@dataclass
class SubpopulationReport:
    slices: dict[str, SliceMetrics | None]

    def to_json(self) -> dict:
        return {k: (v.to_json() if v is not None else None) for k, v in self.slices.items()}


def slice_metrics(scores: np.ndarray, labels: np.ndarray) -> SliceMetrics:
    """Per-slice metrics; ranking metrics are None when a class is missing."""
    try:
        roc = auroc(scores, labels)
        prc = auprc(scores, labels)
    except MetricUndefinedError:
        roc, prc = None, None
    return SliceMetrics(
        n=len(labels), accuracy=accuracy(scores, labels), auroc=roc, auprc=prc
    )


def subpopulation_report(
    scores: np.ndarray, labels: np.ndarray, slices: dict[str, np.ndarray]
) -> SubpopulationReport:
    """Metrics per named row-index slice; empty slices reported absent (None)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    out: dict[str, SliceMetrics | None] = {}
    for name, idx in slices.items():
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            out[name] = None
            continue
        out[name] = slice_metrics(scores[idx], labels[idx])
    return SubpopulationReport(out)


def standard_slices(
    sex: np.ndarray, age: np.ndarray
) -> dict[str, np.ndarray]:
    """Row indices for the sex and age groupings (18 and 50 go to the younger bins)."""
    sex = np.asarray(sex, dtype=np.float64)
    age = np.asarray(age, dtype=np.float64)
    if sex.shape != age.shape:
        raise ContractError("sex and age columns must align")
    idx = np.arange(len(sex))
    return {
        "female": idx[sex == 1.0],
        "male": idx[sex == 0.0],
        "age_0_18": idx[age <= 18],
        "age_19_50": idx[(age >= 19) & (age <= 50)],
        "age_51_plus": idx[age >= 51],
    }


def split_features_labels(matrix: np.ndarray, schema: Schema):
    """Drop the label column from the encoded matrix; labels thresholded at 0.5."""
    col = schema.label_column_index()
    labels = (np.asarray(matrix[:, col]) >= 0.5).astype(np.int64)
    features = np.delete(matrix, col, axis=1)
    return features, labels


def evaluate_utility(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    seeds,
    **classifier_kwargs,
) -> UtilityReport:
    """Train one classifier per seed and score it on the fixed test split."""
    from .classifier import train_classifier

    report = UtilityReport()
    for s in seeds:
        model = train_classifier(train_x, train_y, seed=int(s), **classifier_kwargs)
        scores = model.predict(test_x)
        report.add(auroc(scores, test_y), auprc(scores, test_y), accuracy(scores, test_y))
    return report


# ---------------------------------------------------------------------------
# PCA projection


def pca_project(datasets: dict[str, np.ndarray], k: int = 2):
    """Project all datasets onto the top-k axes of their pooled covariance.

    Returns (coords, eigenvalues) where coords maps each dataset label to an
    (n, k) array and eigenvalues are the top-k pooled covariance eigenvalues.
    """
    if not datasets:
        raise ContractError("pca_project needs at least one dataset")
    mats = list(datasets.values())
    width = mats[0].shape[1]
    if any(m.shape[1] != width for m in mats):
        raise ContractError("all datasets must share a column width")
    pooled = np.vstack(mats)
    center = pooled.mean(axis=0)
    x = pooled - center
    cov = x.T @ x / max(1, x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals, eigvecs = eigvals[::-1], eigvecs[:, ::-1]
    rank = int(np.sum(eigvals > max(eigvals.max(), 0.0) * 1e-12))
    if k > rank:
        raise MetricUndefinedError(
            f"asked for {k} components but the pooled data has rank {rank}"
        )
    axes = eigvecs[:, :k]
    # sign convention: the largest-magnitude loading of each axis is positive
    for j in range(k):
        lead = np.argmax(np.abs(axes[:, j]))
        if axes[lead, j] < 0:
            axes[:, j] = -axes[:, j]
    coords = {label: (m - center) @ axes for label, m in datasets.items()}
    return coords, eigvals[:k].copy()


def write_pca_csv(path, coords: dict[str, np.ndarray]) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_label", "pc1", "pc2"])
        for label, m in coords.items():
            for row in m:
                w.writerow([label, repr(float(row[0])), repr(float(row[1]))])


# ---------------------------------------------------------------------------
# text rendering


def fidelity_text(report: FidelityReport) -> str:
    def fmt(v):
        return "absent" if v is None else f"{v:.6f}"

    lines = [
        f"{'bernoulli divergence':<28}{fmt(report.bernoulli)}",
        f"{'categorical divergence':<28}{fmt(report.categorical)}",
        f"{'category sum deviation':<28}{fmt(report.category_sum_deviation)}",
        f"{'frobenius divergence':<28}{fmt(report.frobenius)}",
    ]
    return "\n".join(lines)


def utility_text(report: UtilityReport) -> str:
    def line(name, reps):
        if not reps:
            return f"{name:<12}absent"
        return f"{name:<12}{float(np.mean(reps)):.4f} +/- {_ci95(reps):.4f}  reps={['%.4f' % r for r in reps]}"

    return "\n".join(
        [
            line("auroc", report.auroc_reps),
            line("auprc", report.auprc_reps),
            line("accuracy", report.accuracy_reps),
        ]
    )
