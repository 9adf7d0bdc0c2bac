"""Dataset schemas, CSV ingestion, standardization and splitting."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from fairvic.errors import DataLoadError, InvalidArgumentError

BUILTIN_DATASETS = ("adult", "compas", "german")
DATA_DIR_ENV = "FAIRVIC_DATA_DIR"
MISSING_TOKENS = frozenset({"", "?", "NA", "NaN", "nan"})
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    target: str
    favourable: tuple[str, ...]
    protected: str
    features: tuple[str, ...]
    continuous: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    privileged: tuple[str, ...] = ()
    unprivileged: tuple[str, ...] = ()
    privileged_above: float | None = None
    file: str | None = None

    def __post_init__(self):
        if self.protected not in self.features:
            raise InvalidArgumentError(f"{self.name}: protected column must be one of the features")
        if self.target in self.features:
            raise InvalidArgumentError(f"{self.name}: target cannot also be a feature")
        if len(set(self.features)) != len(self.features):
            raise InvalidArgumentError(f"{self.name}: duplicate feature names")
        if not self.favourable:
            raise InvalidArgumentError(f"{self.name}: no favourable label given")
        if (self.privileged_above is None) == (not self.privileged):
            raise InvalidArgumentError(
                f"{self.name}: give exactly one of 'privileged' or 'privileged_above'"
            )
        for col in self.features:
            if col == self.protected:
                continue
            kinds = (col in self.continuous) + (col in self.categorical)
            if kinds != 1:
                raise InvalidArgumentError(
                    f"{self.name}: feature {col!r} must be listed as exactly one of "
                    "continuous/categorical"
                )

    def kind(self, column: str) -> str:
        if column == self.target:
            return "target"
        if column == self.protected:
            return "protected"
        return "continuous" if column in self.continuous else "categorical"

    @property
    def columns(self) -> list[tuple[str, str]]:
        """(name, kind) for every column the schema reads."""
        return [(c, self.kind(c)) for c in (*self.features, self.target)]


def _split_list(value: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in value.replace("\n", " ").split(",") if p.strip())


def parse_schema(text: str, source: str = "<string>") -> DatasetSchema:
    """Build a schema from INI text with a single ``[dataset]`` section."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
        sec = parser["dataset"]
    except (configparser.Error, KeyError) as exc:
        raise InvalidArgumentError(f"{source}: cannot parse schema: {exc}") from exc
    try:
        above = sec.get("privileged_above")
        return DatasetSchema(
            name=sec["name"],
            target=sec["target"],
            favourable=_split_list(sec["favourable"]),
            protected=sec["protected"],
            features=_split_list(sec["features"]),
            continuous=_split_list(sec.get("continuous", "")),
            categorical=_split_list(sec.get("categorical", "")),
            privileged=_split_list(sec.get("privileged", "")),
            unprivileged=_split_list(sec.get("unprivileged", "")),
            privileged_above=float(above) if above is not None else None,
            file=sec.get("file"),
        )
    except KeyError as exc:
        raise InvalidArgumentError(f"{source}: missing schema key {exc}") from exc


def load_schema(path: str | Path) -> DatasetSchema:
    path = Path(path)
    return parse_schema(path.read_text(encoding="utf-8"), source=str(path))


def builtin_schema(name: str) -> DatasetSchema:
    if name not in BUILTIN_DATASETS:
        raise InvalidArgumentError(
            f"unknown dataset {name!r}; expected one of {', '.join(BUILTIN_DATASETS)}"
        )
    text = resources.files("fairvic.schemas").joinpath(f"{name}.ini").read_text("utf-8")
    return parse_schema(text, source=f"builtin:{name}")


@dataclass(frozen=True)
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    protected: np.ndarray
    feature_names: tuple[str, ...]
    protected_col: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    categories: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.protected.shape != (n,):
            raise InvalidArgumentError("features, labels and protected must have equal row counts")
        if self.features.shape[1] != len(self.feature_names):
            raise InvalidArgumentError("feature_names does not match the feature matrix width")
        for arr in (self.features, self.labels, self.protected):
            arr.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def standardized(self) -> bool:
        return self.mean is not None

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows].copy(),
            labels=self.labels[rows].copy(),
            protected=self.protected[rows].copy(),
        )


def default_data_dir() -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    cwd = Path.cwd() / "data"
    if cwd.is_dir():
        return cwd
    return Path(__file__).resolve().parents[2] / "data"


def _encode_protected(values: pd.Series, schema: DatasetSchema) -> tuple[np.ndarray, np.ndarray]:
    """Return (protected codes, row keep-mask)."""
    if schema.privileged_above is not None:
        nums = pd.to_numeric(values, errors="coerce")
        bad = nums.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataLoadError(
                f"row {row}, column {schema.protected!r}: cannot parse {values.iloc[row]!r} as a number"
            )
        return (nums.to_numpy() > schema.privileged_above).astype(np.float64), np.ones(len(values), bool)
    priv = values.isin(schema.privileged).to_numpy()
    if schema.unprivileged:
        keep = priv | values.isin(schema.unprivileged).to_numpy()
    else:
        keep = np.ones(len(values), bool)
    return priv.astype(np.float64), keep


def load_csv(path: str | Path, schema: DatasetSchema) -> Dataset:
    """Read a header CSV and encode it according to ``schema``.

    Rows missing any used column are dropped, as are rows whose protected
    value is neither privileged nor (when listed) unprivileged. Categoricals
    get ordinal codes in sorted order of their distinct strings.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataLoadError(f"{path}: {exc}") from exc
    used = [name for name, _ in schema.columns]
    missing_cols = [c for c in used if c not in df.columns]
    if missing_cols:
        raise DataLoadError(f"{path}: missing column(s) {', '.join(missing_cols)}")
    df = df[used].apply(lambda s: s.str.strip())
    complete = ~df.isin(MISSING_TOKENS).any(axis=1)
    df = df[complete].reset_index(drop=True)

    protected, keep = _encode_protected(df[schema.protected], schema)
    df = df[keep].reset_index(drop=True)
    protected = protected[keep]
    if len(df) == 0:
        raise DataLoadError(f"{path}: no usable rows")

    columns = []
    categories: dict[str, tuple[str, ...]] = {}
    for name in schema.features:
        kind = schema.kind(name)
        if kind == "protected":
            columns.append(protected)
        elif kind == "continuous":
            nums = pd.to_numeric(df[name], errors="coerce")
            if nums.isna().any():
                row = int(np.flatnonzero(nums.isna().to_numpy())[0])
                raise DataLoadError(
                    f"{path}: row {row}, column {name!r}: cannot parse {df[name].iloc[row]!r}"
                )
            columns.append(nums.to_numpy(dtype=np.float64))
        else:
            levels = tuple(sorted(df[name].unique()))
            categories[name] = levels
            lookup = {v: float(i) for i, v in enumerate(levels)}
            columns.append(df[name].map(lookup).to_numpy(dtype=np.float64))
    labels = df[schema.target].isin(schema.favourable).to_numpy().astype(np.float64)
    return Dataset(
        name=schema.name,
        features=np.column_stack(columns),
        labels=labels,
        protected=protected.copy(),
        feature_names=schema.features,
        protected_col=schema.features.index(schema.protected),
        categories=categories,
    )


def load_builtin(name: str, data_dir: str | Path | None = None) -> Dataset:
    schema = builtin_schema(name)
    directory = Path(data_dir) if data_dir is not None else default_data_dir()
    return load_csv(directory / (schema.file or f"{name}.csv"), schema)


def standardize(train: Dataset, others: Sequence[Dataset] = ()) -> tuple[Dataset, list[Dataset]]:
    """Z-score every feature with train-set statistics; the protected column is left as 0/1."""
    if train.n_rows == 0:
        raise InvalidArgumentError("cannot standardize an empty training set")
    for ds in (train, *others):
        if ds.standardized:
            raise InvalidArgumentError(f"dataset {ds.name!r} is already standardized")
    mean = train.features.mean(axis=0)
    std = np.maximum(train.features.std(axis=0), STD_FLOOR)
    mean[train.protected_col] = 0.0
    std[train.protected_col] = 1.0

    def apply(ds: Dataset) -> Dataset:
        return replace(ds, features=(ds.features - mean) / std, mean=mean.copy(), std=std.copy())

    return apply(train), [apply(ds) for ds in others]


def train_test_split(data: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise InvalidArgumentError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = data.n_rows
    n_test = int(round(n * test_fraction))
    if n_test == 0 or n_test == n:
        raise InvalidArgumentError(f"test_fraction {test_fraction} leaves an empty split of {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))
