"""
Panel data model and file ingestion.

Holds the unbalanced asset panel (next-period excess returns keyed at the
decision period t, raw firm characteristics), the macro series and the
precomputed news sentence embeddings, plus chronological splitting.
"""
import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import ValidationError

from app.core.errors import ConfigError, DataError
from app.models.schemas import SplitSpec

PathLike = Union[str, Path]

RETURNS_FILE = "returns.csv"
CHARACTERISTICS_FILE = "characteristics.csv"
MACRO_FILE = "macro.csv"
EMBEDDINGS_FILE = "embeddings.csv"
SPLIT_FILE = "split.cfg"
DATES_FILE = "dates.csv"
DATASET_FILES = (RETURNS_FILE, CHARACTERISTICS_FILE, MACRO_FILE, EMBEDDINGS_FILE)

KEY_COLUMNS = ["period", "asset_id"]
RETURN_COLUMN = "excess_return_next"
FLOAT_FORMAT = "%.17g"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Panel:
    """Observations sorted by (period, asset_id).

    ``frame`` columns: period, asset_id, excess_return_next, then one column
    per characteristic (NaN = missing).
    """

    frame: pd.DataFrame
    characteristic_names: Tuple[str, ...]

    def __post_init__(self) -> None:
        ordered = self.frame.sort_values(KEY_COLUMNS, kind="mergesort").reset_index(drop=True)
        object.__setattr__(self, "frame", ordered)

    @cached_property
    def periods(self) -> np.ndarray:
        return np.unique(self.frame["period"].to_numpy(dtype=np.int64))

    @cached_property
    def n_t(self) -> pd.Series:
        """Number of assets per period."""
        return self.frame.groupby("period").size()

    @cached_property
    def t_i(self) -> pd.Series:
        """Number of periods per asset."""
        return self.frame.groupby("asset_id").size()

    @property
    def T(self) -> int:  # pylint: disable=invalid-name
        return int(len(self.periods))

    @property
    def n_observations(self) -> int:
        return int(len(self.frame))

    @property
    def assets(self) -> List[str]:
        return sorted(self.frame["asset_id"].unique().tolist())

    @property
    def returns(self) -> np.ndarray:
        return self.frame[RETURN_COLUMN].to_numpy(dtype=np.float64)

    @property
    def characteristics(self) -> np.ndarray:
        return self.frame[list(self.characteristic_names)].to_numpy(dtype=np.float64)

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.characteristics)

    def select_periods(self, start: int, end: int) -> "Panel":
        """Observations with ``start <= period <= end``."""
        periods = self.frame["period"]
        return Panel(
            self.frame[(periods >= start) & (periods <= end)].copy(),
            self.characteristic_names,
        )

    def subset(self, periods: Iterable[int]) -> "Panel":
        wanted = np.asarray(list(periods), dtype=np.int64)
        return Panel(
            self.frame[self.frame["period"].isin(wanted)].copy(), self.characteristic_names
        )

    def is_empty(self) -> bool:
        return self.frame.empty


@dataclass(frozen=True, eq=False)
class MacroSeries:
    """Macro indicators I_t on a gap-free run of periods."""

    periods: np.ndarray
    values: np.ndarray
    names: Tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.periods) and np.any(np.diff(self.periods) != 1):
            raise DataError("macro series has gaps between periods")
        if self.values.shape != (len(self.periods), len(self.names)):
            raise DataError(
                f"macro values shape {self.values.shape} does not match "
                f"{len(self.periods)} periods x {len(self.names)} series"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError("macro series contains non-finite values")
        self.values.setflags(write=False)

    @property
    def dim(self) -> int:
        return len(self.names)

    def window(self, period: int, k: int) -> Optional[np.ndarray]:
        """Rows I_{t-k}, ..., I_t or None when not fully covered."""
        if not len(self.periods):
            return None
        start = period - k - int(self.periods[0])
        stop = period - int(self.periods[0]) + 1
        if start < 0 or stop > len(self.periods):
            return None
        return self.values[start:stop]


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Sentence embeddings per (period, asset_id), sorted by sentence index."""

    dim: int
    vectors: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict)

    def get(self, period: int, asset_id: str) -> np.ndarray:
        found = self.vectors.get((int(period), str(asset_id)))
        if found is None:
            return np.zeros((0, self.dim))
        return found

    def count(self, period: int, asset_id: str) -> int:
        return int(self.get(period, asset_id).shape[0])

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Everything the pipeline reads from one data directory."""

    panel: Panel
    macro: MacroSeries
    embeddings: EmbeddingSet
    period_labels: Dict[int, str] = field(default_factory=dict)
    digest: str = ""


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def _read_table(path: PathLike, leading: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: {e}") from e
    header = list(df.columns)
    if header[: len(leading)] != list(leading):
        raise DataError(
            f"{path}:1: header must start with {','.join(leading)}, got {','.join(header)}"
        )
    return df


def _numeric_column(df: pd.DataFrame, column: str, path: PathLike) -> pd.Series:
    raw = df[column].str.strip()
    values = pd.to_numeric(raw.replace("", np.nan), errors="coerce")
    bad = raw.ne("") & values.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{path}:{row + 2}: non-numeric value '{raw.iloc[row]}' in '{column}'")
    return values.astype(np.float64)


def _period_column(df: pd.DataFrame, path: PathLike) -> pd.Series:
    values = _numeric_column(df, "period", path)
    bad = values.isna() | (values != np.round(values))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{path}:{row + 2}: period must be an integer")
    return values.astype(np.int64)


def _check_duplicates(df: pd.DataFrame, keys: List[str], path: PathLike) -> None:
    dup = df.duplicated(keys, keep="first")
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        key = ", ".join(str(df[k].iloc[row]) for k in keys)
        raise DataError(f"{path}:{row + 2}: duplicate key ({key})")


# ---------------------------------------------------------------------------
# Loaders and writers
# ---------------------------------------------------------------------------


def load_panel(returns_file: PathLike, characteristics_file: PathLike) -> Panel:
    """Join returns and characteristics on (period, asset_id)."""
    returns = _read_table(returns_file, KEY_COLUMNS + [RETURN_COLUMN])
    if len(returns.columns) != 3:
        raise DataError(f"{returns_file}:1: unexpected extra columns {list(returns.columns[3:])}")
    returns["period"] = _period_column(returns, returns_file)
    returns["asset_id"] = returns["asset_id"].str.strip()
    returns[RETURN_COLUMN] = _numeric_column(returns, RETURN_COLUMN, returns_file)
    _check_duplicates(returns, KEY_COLUMNS, returns_file)

    chars = _read_table(characteristics_file, KEY_COLUMNS)
    names = tuple(chars.columns[2:])
    if not names:
        raise DataError(f"{characteristics_file}:1: no characteristic columns")
    chars["period"] = _period_column(chars, characteristics_file)
    chars["asset_id"] = chars["asset_id"].str.strip()
    for name in names:
        chars[name] = _numeric_column(chars, name, characteristics_file)
    _check_duplicates(chars, KEY_COLUMNS, characteristics_file)

    missing_return = returns[RETURN_COLUMN].isna()
    if missing_return.any():
        logger.warning(
            f"Dropped {int(missing_return.sum())} rows without a next-period return"
        )
    returns = returns[~missing_return]

    merged = returns.merge(chars, on=KEY_COLUMNS, how="left", indicator=True)
    no_chars = int((merged["_merge"] == "left_only").sum())
    if no_chars:
        logger.warning(f"{no_chars} return rows have no characteristics row")
    orphan = len(chars) - int((merged["_merge"] == "both").sum())
    if orphan:
        logger.warning(f"Dropped {orphan} characteristic rows without a return row")
    merged = merged.drop(columns="_merge")

    panel = Panel(merged[KEY_COLUMNS + [RETURN_COLUMN, *names]], names)
    logger.info(
        f"Loaded panel: {panel.n_observations} observations, {panel.T} periods, "
        f"{len(panel.t_i)} assets, {len(names)} characteristics"
    )
    return panel


def write_panel(panel: Panel, returns_file: PathLike, characteristics_file: PathLike) -> None:
    frame = panel.frame
    frame[KEY_COLUMNS + [RETURN_COLUMN]].to_csv(
        returns_file, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )
    frame[KEY_COLUMNS + list(panel.characteristic_names)].to_csv(
        characteristics_file, index=False, float_format=FLOAT_FORMAT, na_rep="",
        lineterminator="\n",
    )


def load_macro(path: PathLike) -> MacroSeries:
    df = _read_table(path, ["period"])
    names = tuple(df.columns[1:])
    if not names:
        raise DataError(f"{path}:1: no macro series columns")
    df["period"] = _period_column(df, path)
    for name in names:
        df[name] = _numeric_column(df, name, path)
    _check_duplicates(df, ["period"], path)
    df = df.sort_values("period", kind="mergesort")
    values = df[list(names)].to_numpy(dtype=np.float64)
    if np.isnan(values).any():
        row = int(np.flatnonzero(np.isnan(values).any(axis=1))[0])
        raise DataError(f"{path}: missing macro value at period {int(df['period'].iloc[row])}")
    macro = MacroSeries(df["period"].to_numpy(dtype=np.int64), values, names)
    logger.info(f"Loaded macro series: {len(macro.periods)} periods x {macro.dim} series")
    return macro


def write_macro(macro: MacroSeries, path: PathLike) -> None:
    df = pd.DataFrame(macro.values, columns=list(macro.names))
    df.insert(0, "period", macro.periods)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def load_embeddings(path: PathLike) -> EmbeddingSet:
    """Read a ``dim=<d>`` header line followed by per-sentence CSV rows."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(encoding="utf-8") as handle:
        header = handle.readline().strip()
    if not header.startswith("dim="):
        raise DataError(f"{path}:1: expected 'dim=<d_emb>' header, got '{header}'")
    try:
        dim = int(header[4:])
    except ValueError as e:
        raise DataError(f"{path}:1: invalid embedding dimension '{header[4:]}'") from e
    if dim < 1:
        raise DataError(f"{path}:1: embedding dimension must be positive")

    width = 3 + dim
    try:
        df = pd.read_csv(path, skiprows=1, header=None, dtype={1: str}, encoding="utf-8")
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: inconsistent vector length ({e})") from e
    except pd.errors.EmptyDataError:
        return EmbeddingSet(dim)
    if df.empty:
        return EmbeddingSet(dim)
    if df.shape[1] != width:
        raise DataError(
            f"{path}:2: rows carry {df.shape[1] - 3} vector components, header declares {dim}"
        )

    numeric = df.drop(columns=[1]).apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"{path}:{row + 2}: expected {dim} vector components with numeric keys"
        )
    df = pd.concat([numeric[[0, 2]].astype(np.int64), df[[1]].apply(lambda s: s.str.strip())], axis=1)
    _check_duplicates(df, [0, 1, 2], path)
    vectors = numeric[list(range(3, width))].to_numpy(dtype=np.float64)

    df["_row"] = np.arange(len(df))
    df = df.sort_values([0, 1, 2], kind="mergesort")
    grouped: Dict[Tuple[int, str], np.ndarray] = {}
    for (period, asset_id), rows in df.groupby([0, 1], sort=False)["_row"]:
        block = vectors[rows.to_numpy()]
        block.setflags(write=False)
        grouped[(int(period), str(asset_id))] = block
    embeddings = EmbeddingSet(dim, grouped)
    logger.info(f"Loaded {len(df)} sentence embeddings (dim={dim}) for {len(embeddings)} keys")
    return embeddings


def write_embeddings(embeddings: EmbeddingSet, path: PathLike) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(f"dim={embeddings.dim}\n")
        for (period, asset_id) in sorted(embeddings.vectors):
            for k, vector in enumerate(embeddings.vectors[(period, asset_id)]):
                cells = ",".join(FLOAT_FORMAT % v for v in vector)
                handle.write(f"{period},{asset_id},{k},{cells}\n")


# ---------------------------------------------------------------------------
# Split, sidecars and dataset bundle
# ---------------------------------------------------------------------------


def split(panel: Panel, spec: SplitSpec) -> Dict[str, Panel]:
    """Partition ``panel`` by period into train / val / test (closed ranges)."""
    first, last = int(panel.periods[0]), int(panel.periods[-1])
    if spec.train_start < first or spec.test_end > last:
        raise ConfigError(
            f"split ranges [{spec.train_start}, {spec.test_end}] exceed panel "
            f"periods [{first}, {last}]"
        )
    parts = {name: panel.select_periods(lo, hi) for name, (lo, hi) in spec.ranges().items()}
    covered = sum(part.n_observations for part in parts.values())
    if covered != panel.n_observations:
        logger.warning(
            f"{panel.n_observations - covered} observations fall between split ranges"
        )
    for name, part in parts.items():
        logger.info(f"Split '{name}': {part.T} periods, {part.n_observations} observations")
    return parts


def load_split_spec(path: PathLike) -> SplitSpec:
    from config.run_config import parse_key_values  # pylint: disable=import-outside-toplevel

    path = Path(path)
    values = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    try:
        return SplitSpec(**values)
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid split: {e.errors()[0]['msg']}") from e


def write_split_spec(spec: SplitSpec, path: PathLike) -> None:
    lines = [f"{key} = {value}" for key, value in spec.model_dump().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_period_labels(path: PathLike) -> Dict[int, str]:
    df = _read_table(path, ["period", "label"])
    df["period"] = _period_column(df, path)
    return dict(zip(df["period"].tolist(), df["label"].tolist()))


def dataset_digest(data_dir: PathLike) -> str:
    """SHA-256 over the dataset files, in a fixed order."""
    digest = hashlib.sha256()
    for name in DATASET_FILES:
        path = Path(data_dir) / name
        digest.update(name.encode("utf-8"))
        if path.exists():
            digest.update(path.read_bytes())
    return digest.hexdigest()


def load_dataset(data_dir: PathLike) -> Dataset:
    data_dir = Path(data_dir)
    panel = load_panel(data_dir / RETURNS_FILE, data_dir / CHARACTERISTICS_FILE)
    macro = load_macro(data_dir / MACRO_FILE)
    embeddings = load_embeddings(data_dir / EMBEDDINGS_FILE)
    labels_path = data_dir / DATES_FILE
    labels = load_period_labels(labels_path) if labels_path.exists() else {}
    return Dataset(panel, macro, embeddings, labels, dataset_digest(data_dir))


def write_dataset(dataset: Dataset, data_dir: PathLike) -> List[Path]:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    write_panel(dataset.panel, data_dir / RETURNS_FILE, data_dir / CHARACTERISTICS_FILE)
    write_macro(dataset.macro, data_dir / MACRO_FILE)
    write_embeddings(dataset.embeddings, data_dir / EMBEDDINGS_FILE)
    return [data_dir / name for name in DATASET_FILES]
