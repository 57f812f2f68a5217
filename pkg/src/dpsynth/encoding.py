"""Table preprocessing: filtering, balancing, ICD grouping, and the
encode/decode between raw tables and [0, 1] matrices.

Tables keep every cell as a string (exactly what was in the CSV); typing is
driven by the schema at encode time. That keeps CSV round trips byte-exact
and independent of any parser's dtype guessing.

Encoding layout per feature: bernoulli -> one 0/1 column; categorical-K ->
one-hot of width K; continuous -> mode one-hot of width M followed by one
scalar in [0, 1]. Mode selection samples from the mixture posteriors with
the run's seed; the scalar is (v - mu_m) / (4 sigma_m), clamped to [-1, 1]
and mapped affinely onto [0, 1]. Decoding thresholds bernoulli at 0.5,
takes argmax over one-hot blocks, and inverts the affine map.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BalanceError, ParseError, SchemaError
from .gmm import responsibilities
from .rng import substream
from .schema import GmmModel, RowFilter, Schema

MATRIX_MAGIC = b"DPSENC01"


# ---------------------------------------------------------------------------
# tables


@dataclass
class Table:
    columns: list[str]
    rows: list[list[str]]

    def __post_init__(self):
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ParseError(
                    f"row has {len(r)} cells, header has {len(self.columns)}"
                )

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list[str]:
        try:
            i = self.columns.index(name)
        except ValueError:
            raise SchemaError(f"table has no column {name!r}") from None
        return [r[i] for r in self.rows]

    def select_rows(self, indices) -> "Table":
        return Table(self.columns, [self.rows[i] for i in indices])

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            w.writerows(self.rows)

    @staticmethod
    def read_csv(path) -> "Table":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError(f"{path}: empty CSV") from None
            return Table(header, [row for row in reader])


def apply_filters(table: Table, filters: list[RowFilter]) -> Table:
    """Keep rows satisfying every filter predicate."""
    keep = list(range(len(table)))
    for flt in filters:
        col = table.column(flt.column)
        keep = [i for i in keep if flt.matches(col[i])]
    return table.select_rows(keep)


def holdout_split(table: Table, column: str) -> tuple[Table, Table]:
    """Split off the rows with the largest numeric value of a column.

    Mirrors a by-year split: every year but the last is training data, the
    last year is the held-out test set.
    """
    vals = [float(c) for c in table.column(column)]
    if not vals:
        raise SchemaError("cannot split an empty table")
    top = max(vals)
    train = [i for i, v in enumerate(vals) if v != top]
    test = [i for i, v in enumerate(vals) if v == top]
    return table.select_rows(train), table.select_rows(test)


def balance_by_label(table: Table, label: str, rng: np.random.Generator) -> Table:
    """Uniformly undersample the majority class to the minority count.

    Surviving rows keep their relative order.
    """
    col = table.column(label)
    pos = [i for i, c in enumerate(col) if c == "1"]
    neg = [i for i, c in enumerate(col) if c == "0"]
    if not pos or not neg:
        raise BalanceError(
            f"label {label!r}: class counts {len(pos)}/{len(neg)}, cannot balance"
        )
    k = min(len(pos), len(neg))
    if len(pos) > k:
        sel = rng.choice(len(pos), size=k, replace=False)
        pos = [pos[i] for i in sorted(sel.tolist())]
    if len(neg) > k:
        sel = rng.choice(len(neg), size=k, replace=False)
        neg = [neg[i] for i in sorted(sel.tolist())]
    return table.select_rows(sorted(pos + neg))


# ---------------------------------------------------------------------------
# ICD code grouping


def _norm_code(code: str) -> str:
    return code.strip().upper()


def group_icd_main(code: str) -> str:
    """Alphabetical diagnosis category: the leading letter of the code."""
    s = _norm_code(code)
    if not s or not s[0].isalpha():
        raise ParseError(f"diagnosis code {code!r} does not start with a letter")
    return s[0]


def group_icd_additional(code: str) -> str:
    """Letter plus major number, e.g. A15.3 -> A1."""
    s = _norm_code(code)
    if not s or not s[0].isalpha():
        raise ParseError(f"diagnosis code {code!r} does not start with a letter")
    if len(s) < 2 or not s[1].isdigit():
        raise ParseError(f"diagnosis code {code!r} has no major number")
    return s[:2]


def group_icd_procedure(code: str) -> str:
    """Procedure codes grouped after the third digit."""
    s = _norm_code(code)
    if len(s) < 3:
        raise ParseError(f"procedure code {code!r} is shorter than 3 characters")
    return s[:3]


# ---------------------------------------------------------------------------
# continuous feature encode/decode

SCALAR_RANGE = 4.0  # within-mode values are scaled by 4 sigma


def encode_continuous(v: float, model: GmmModel, rng: np.random.Generator):
    """One value -> (mode one-hot, scalar in [0, 1])."""
    modes, scalars = encode_continuous_column(np.array([v]), model, rng)
    onehot = np.zeros(model.n_modes)
    onehot[modes[0]] = 1.0
    return onehot, float(scalars[0])


def encode_continuous_column(values: np.ndarray, model: GmmModel, rng):
    """Vectorized mode sampling + scaling for a whole column."""
    v = np.asarray(values, dtype=np.float64)
    resp = responsibilities(v, model)
    u = rng.random(len(v))
    modes = (resp.cumsum(axis=1) < u[:, None]).sum(axis=1)
    modes = np.minimum(modes, model.n_modes - 1)
    mu = model.means[modes]
    sd = model.stds[modes]
    s = np.clip((v - mu) / (SCALAR_RANGE * sd), -1.0, 1.0)
    return modes, (s + 1.0) / 2.0


def decode_continuous(mode_block: np.ndarray, scalar: float, model: GmmModel) -> float:
    """Invert the mode-specific scaling; modes are read by argmax."""
    m = int(np.argmax(mode_block))
    return float((2.0 * scalar - 1.0) * SCALAR_RANGE * model.stds[m] + model.means[m])


# ---------------------------------------------------------------------------
# whole-table encode/decode


def fit_schema(schema: Schema, table: Table, seed: int = 0) -> Schema:
    """Fit mixture models for every continuous feature on the given table."""
    from .gmm import fit_gmm

    fitted = []
    for f in schema.features:
        if f.kind == "continuous":
            vals = np.array([float(c) for c in table.column(f.name)])
            g = fit_gmm(vals, f.modes, seed=seed)
            fitted.append(
                type(f)(f.name, f.kind, f.categories, f.modes, f.count, f.label, g)
            )
        else:
            fitted.append(f)
    return Schema(fitted, schema.filters, schema.split_column)


def encode_table(table: Table, schema: Schema, seed: int) -> np.ndarray:
    """Raw table -> (n, encoded_width) matrix with every entry in [0, 1]."""
    n = len(table)
    out = np.zeros((n, schema.encoded_width))
    offset = 0
    for fi, f in enumerate(schema.features):
        col = table.column(f.name)
        if f.kind == "bernoulli":
            for i, c in enumerate(col):
                if c not in ("0", "1"):
                    raise SchemaError(
                        f"feature {f.name!r}: expected 0/1, got {c!r}"
                    )
                out[i, offset] = float(c)
            offset += 1
        elif f.kind == "categorical":
            index = {c: j for j, c in enumerate(f.categories)}
            for i, c in enumerate(col):
                j = index.get(c)
                if j is None:
                    raise SchemaError(
                        f"feature {f.name!r}: unknown category {c!r}"
                    )
                out[i, offset + j] = 1.0
            offset += len(f.categories)
        else:
            if f.gmm is None:
                raise SchemaError(f"feature {f.name!r}: mixture not fitted")
            vals = np.array([float(c) for c in col])
            rng = substream(seed, "encode", fi)
            modes, scalars = encode_continuous_column(vals, f.gmm, rng)
            out[np.arange(n), offset + modes] = 1.0
            out[:, offset + f.modes] = scalars
            offset += f.modes + 1
    return out


def decode_matrix(matrix: np.ndarray, schema: Schema) -> Table:
    """Matrix (possibly soft generator output) -> raw table."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != schema.encoded_width:
        raise SchemaError(
            f"matrix width {m.shape} does not match schema width "
            f"{schema.encoded_width}"
        )
    cols: list[list[str]] = []
    offset = 0
    for f in schema.features:
        if f.kind == "bernoulli":
            cols.append(["1" if v >= 0.5 else "0" for v in m[:, offset]])
            offset += 1
        elif f.kind == "categorical":
            block = m[:, offset : offset + len(f.categories)]
            idx = block.argmax(axis=1)
            cols.append([f.categories[j] for j in idx])
            offset += len(f.categories)
        else:
            if f.gmm is None:
                raise SchemaError(f"feature {f.name!r}: mixture not fitted")
            block = m[:, offset : offset + f.modes]
            scal = m[:, offset + f.modes]
            modes = block.argmax(axis=1)
            vals = (2.0 * scal - 1.0) * SCALAR_RANGE * f.gmm.stds[modes] + f.gmm.means[
                modes
            ]
            if f.count:
                vals = np.maximum(np.rint(vals), 0.0)
                cols.append([str(int(v)) for v in vals])
            else:
                cols.append([repr(float(v)) for v in vals])
            offset += f.modes + 1
    names = [f.name for f in schema.features]
    rows = [list(r) for r in zip(*cols)] if cols else []
    return Table(names, rows)


# ---------------------------------------------------------------------------
# binary matrix cache: 16-byte header (magic, u32 rows, u32 cols), f64 LE data


def save_matrix(path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise SchemaError("matrix cache stores 2-d matrices")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:8] != MATRIX_MAGIC:
            raise ParseError(f"{path}: not an encoded-matrix cache")
        rows, cols = struct.unpack("<II", head[8:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ParseError(f"{path}: truncated matrix payload")
    return data.reshape(rows, cols).astype(np.float64)
