"""Tabular dataset ingestion: CSV loading, encoding, targets and train/test splits."""

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ContractError

MISSING_TOKENS = frozenset({"", "?", "NA", "N/A", "nan", "NaN"})
DATA_DIR_ENV = "MCBOOST_DATA_DIR"


@dataclass
class RawTable:
    columns: list
    kinds: list
    cells: list
    source: str = ""

    @property
    def n_rows(self):
        return len(self.cells)

    def column(self, name):
        try:
            j = self.columns.index(name)
        except ValueError:
            raise ContractError(f"column {name!r} not found; available: {self.columns}") from None
        return [row[j] for row in self.cells]

    def drop(self, names):
        keep = [j for j, c in enumerate(self.columns) if c not in set(names)]
        return RawTable(
            [self.columns[j] for j in keep],
            [self.kinds[j] for j in keep],
            [[row[j] for j in keep] for row in self.cells],
            self.source,
        )


def _is_number(text):
    try:
        return math.isfinite(float(text))
    except ValueError:
        return False


def _infer_kinds(columns, cells):
    kinds = []
    for j in range(len(columns)):
        present = [row[j] for row in cells if row[j] not in MISSING_TOKENS]
        kinds.append("numeric" if present and all(_is_number(v) for v in present) else "categorical")
    return kinds


def load_csv(path):
    """Read a headed, comma-separated UTF-8 file; a column is numeric if all present cells parse."""
    path = os.fspath(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        try:
            header = next(reader)
        except StopIteration:
            raise ContractError(f"{path}: file is empty") from None
        except csv.Error as exc:
            raise ContractError(f"{path}: line 1: {exc}") from None
        header = [h.strip() for h in header]
        rows = []
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error as exc:
                raise ContractError(f"{path}: line {reader.line_num}: {exc}") from None
            if not row:
                continue
            if len(row) != len(header):
                raise ContractError(
                    f"{path}: line {reader.line_num} has {len(row)} fields, header has {len(header)}"
                )
            rows.append([c.strip() for c in row])
    return RawTable(header, _infer_kinds(header, rows), rows, path)


# --- dataset descriptions ---------------------------------------------------


def _col(table, *aliases):
    for a in aliases:
        if a in table.columns:
            return a
    raise ContractError(f"missing required column {aliases[0]!r} (also tried {list(aliases[1:])})")


def _numeric(table, name):
    vals = table.column(name)
    try:
        return np.array([float(v) for v in vals])
    except ValueError as exc:
        raise ContractError(f"target column {name!r} is not numeric: {exc}") from None


def _target_adult(table):
    a = _col(table, "education-num", "education_num", "educational-num")
    b = _col(table, "hours-per-week", "hours_per_week")
    return _numeric(table, a) + _numeric(table, b), [a, b]


def _target_column(*aliases):
    def build(table):
        c = _col(table, *aliases)
        return _numeric(table, c), [c]

    return build


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: str
    target: object
    drop_columns: tuple = ()
    expected_dim: int = None
    description: str = ""


DATASET_SPECS = {
    "california": DatasetSpec(
        "california",
        _target_column("MedHouseVal", "median_house_value", "target"),
        expected_dim=8,
        description="California housing, median house value",
    ),
    "diabetes": DatasetSpec(
        "diabetes",
        _target_column("target", "Y", "y", "progression"),
        expected_dim=10,
        description="Diabetes progression one year after baseline",
    ),
    "adult": DatasetSpec(
        "adult",
        _target_adult,
        expected_dim=101,
        description="Adult census; target education-num + hours-per-week",
    ),
    "german": DatasetSpec(
        "german",
        _target_column("CreditAmount", "Credit amount", "credit_amount", "credit amount"),
        drop_columns=("", "Unnamed: 0"),
        expected_dim=48,
        description="German credit; target requested credit amount",
    ),
    "communities": DatasetSpec(
        "communities",
        _target_column("ViolentCrimesPerPop", "violentcrimesperpop"),
        drop_columns=("state", "county", "community", "communityname", "fold"),
        expected_dim=122,
        description="Communities and crime; target violent crimes per capita",
    ),
}


def get_spec(dataset_id):
    try:
        return DATASET_SPECS[dataset_id]
    except KeyError:
        raise ContractError(f"unknown dataset {dataset_id!r}; known: {sorted(DATASET_SPECS)}") from None


def make_target(table, dataset_id):
    """Target vector and the table with the target column(s) removed."""
    spec = get_spec(dataset_id) if isinstance(dataset_id, str) else dataset_id
    y, used = spec.target(table)
    return y, table.drop(used)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list
    numeric_mask: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape[0] != len(self.y):
            raise ContractError(f"X has {self.X.shape[0]} rows but y has {len(self.y)}")

    @property
    def n(self):
        return len(self.y)

    @property
    def d(self):
        return self.X.shape[1]

    def take(self, idx):
        return replace(self, X=self.X[idx], y=self.y[idx], provenance=dict(self.provenance))

    def save(self, prefix):
        """Write ``<prefix>_features.csv``, ``<prefix>_target.csv`` and ``<prefix>_provenance.json``."""
        with open(f"{prefix}_features.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.feature_names)
            w.writerows([repr(float(v)) for v in row] for row in self.X)
        with open(f"{prefix}_target.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["target"])
            w.writerows([repr(float(v))] for v in self.y)
        with open(f"{prefix}_provenance.json", "w", encoding="utf-8") as fh:
            json.dump(self.provenance, fh, indent=2)


def preprocess(table, spec):
    """Encode ``table`` into an (unscaled) numeric design matrix and target.

    Rows with any missing cell are dropped (with a warning). Categorical
    columns become one indicator column per observed category in lexicographic
    order. Standardization happens in :func:`split` / :func:`standardize` so
    that it can use training rows only.
    """
    spec = get_spec(spec) if isinstance(spec, str) else spec
    keep = [i for i, row in enumerate(table.cells) if not any(c in MISSING_TOKENS for c in row)]
    dropped = table.n_rows - len(keep)
    if dropped:
        warnings.warn(f"dropped {dropped} of {table.n_rows} rows with missing cells", stacklevel=2)
    cells = [table.cells[i] for i in keep]
    if not cells:
        raise ContractError("no complete rows remain after dropping missing cells")
    clean = RawTable(table.columns, _infer_kinds(table.columns, cells), cells, table.source)
    y, feats = make_target(clean, spec)
    feats = feats.drop([c for c in spec.drop_columns if c in feats.columns])

    blocks, names, numeric = [], [], []
    for j, (name, kind) in enumerate(zip(feats.columns, feats.kinds)):
        col = [row[j] for row in feats.cells]
        if kind == "numeric":
            blocks.append(np.array([float(v) for v in col])[:, None])
            names.append(name)
            numeric.append(True)
        else:
            cats = sorted(set(col))
            arr = np.array(col)
            blocks.append(np.column_stack([(arr == c).astype(np.float64) for c in cats]))
            names.extend(f"{name}={c}" for c in cats)
            numeric.extend([False] * len(cats))
    X = np.hstack(blocks) if blocks else np.zeros((len(y), 0))
    prov = {
        "dataset_id": spec.dataset_id,
        "source": table.source,
        "rows_read": table.n_rows,
        "rows_dropped_missing": dropped,
        "raw_feature_columns": len(feats.columns),
        "encoded_dim": X.shape[1],
        "expected_dim": spec.expected_dim,
        "category_order": "lexicographic",
    }
    if spec.expected_dim is not None and X.shape[1] != spec.expected_dim:
        warnings.warn(
            f"{spec.dataset_id}: encoded dimension {X.shape[1]} differs from expected {spec.expected_dim}",
            stacklevel=2,
        )
    return Dataset(X, y, names, np.array(numeric, dtype=bool), prov)


def standardize(train, test=None):
    """Scale numeric columns with training mean / std; zero-variance columns become zeros."""
    cols = np.flatnonzero(train.numeric_mask)
    mu = train.X[:, cols].mean(axis=0)
    sd = train.X[:, cols].std(axis=0)
    zero = sd == 0
    if zero.any():
        bad = [train.feature_names[cols[i]] for i in np.flatnonzero(zero)]
        warnings.warn(f"zero-variance numeric columns standardized to zeros: {bad}", stacklevel=2)
    safe = np.where(zero, 1.0, sd)

    def apply(ds):
        X = ds.X.copy()
        X[:, cols] = np.where(zero, 0.0, (X[:, cols] - mu) / safe)
        prov = dict(ds.provenance, standardized=True)
        return replace(ds, X=X, provenance=prov)

    out = apply(train)
    return (out, apply(test)) if test is not None else out


def split_sizes(n, train_frac):
    if not (0.0 < train_frac < 1.0):
        raise ContractError(f"train_frac must lie in (0, 1), got {train_frac}")
    n_train = min(max(int(math.floor(train_frac * n)), 1), n - 1)
    if n < 2 or n_train < 1:
        raise ContractError(f"cannot split {n} rows into two nonempty parts")
    return n_train, n - n_train


def split(dataset, train_frac=0.8, seed=0, scale=True):
    """Seeded permutation split; numeric columns standardized with training statistics."""
    n_train, _ = split_sizes(dataset.n, train_frac)
    perm = np.random.default_rng(seed).permutation(dataset.n)
    train, test = dataset.take(perm[:n_train]), dataset.take(perm[n_train:])
    for ds in (train, test):
        ds.provenance.update({"train_frac": train_frac, "split_seed": int(seed)})
    if scale:
        train, test = standardize(train, test)
    return train, test


# --- sources ----------------------------------------------------------------


def write_diabetes_csv(path):
    """Write the diabetes data bundled with scikit-learn (unscaled) as a headed CSV."""
    from sklearn.datasets import load_diabetes

    bunch = load_diabetes(scaled=False)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(bunch.feature_names) + ["target"])
        w.writerows([repr(float(v)) for v in row] + [repr(float(t))] for row, t in zip(bunch.data, bunch.target))
    return path


def resolve_path(dataset_id, path=None):
    """Explicit path, else ``$MCBOOST_DATA_DIR/<id>.csv``; None if neither exists."""
    if path:
        return os.fspath(path)
    root = os.environ.get(DATA_DIR_ENV)
    if root:
        cand = os.path.join(root, f"{dataset_id}.csv")
        if os.path.exists(cand):
            return cand
    return None


def load_dataset(dataset_id, path=None, cache_dir=None):
    """Load and encode a named dataset; diabetes falls back to the bundled copy."""
    src = resolve_path(dataset_id, path)
    if src is None:
        if dataset_id != "diabetes":
            raise ContractError(
                f"no file for dataset {dataset_id!r}: pass a path or set {DATA_DIR_ENV}"
            )
        import tempfile

        cache_dir = cache_dir or tempfile.gettempdir()
        src = os.path.join(cache_dir, "mcboost_diabetes.csv")
        if not os.path.exists(src):
            write_diabetes_csv(src)
    return preprocess(load_csv(src), dataset_id)


def make_synthetic(n=200, d=3, seed=0, noise=0.1):
    """Smooth nonlinear regression data with standardized features."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    coef = rng.normal(size=d)
    y = X @ coef + np.sin(2.0 * X[:, 0]) + 0.5 * X[:, -1] ** 2 + noise * rng.normal(size=n)
    names = [f"x{j}" for j in range(d)]
    prov = {"dataset_id": "synthetic", "seed": int(seed), "n": n, "d": d}
    return Dataset(X, y, names, np.ones(d, dtype=bool), prov)
