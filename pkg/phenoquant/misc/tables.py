"""
Delimiter-separated tables read and written by the command line tools.

Every file written here starts with a comment line naming the schema
version and the producing command, e.g.::

    # phenoquant schema=1 command=prep

Readers accept files with or without that line but reject a foreign
schema version. Missing values are empty fields.
"""
from collections.abc import Iterable, Mapping, Sequence
import logging
import math
from pathlib import Path
import re
from warnings import warn

import numpy as np
from numpy.typing import NDArray
import pandas as pd

from .. import errors
from .const import CONTINUOUS_FEATURES, SCHEMA_VERSION
from ..model.features import FeatureMatrix, ObservationTable, PreprocessorState, RawPixelRecord

__all__ = (
    "header_line",
    "read_header",
    "read_table",
    "write_table",
    "parse_habitat",
    "format_habitat",
    "read_pixel_records",
    "pixel_records_frame",
    "read_raw_observations",
    "write_features",
    "read_features",
    "write_observations",
    "read_observations",
    "read_pixel_set",
)

HEADER_PREFIX = "# phenoquant"
_HEADER_PATTERN = re.compile(r"^# phenoquant schema=(\S+) command=(\S+)")

PIXEL_COLUMNS = ("pixel_id", "species_id", "habitat")
RAW_OBSERVATION_COLUMNS = ("pixel_id", "date", "ndvi")
FEATURE_COLUMNS = ("pixel_id", "row", "col", "species", "habitat")
OBSERVATION_COLUMNS = ("pixel_id", "date", "t", "ndvi")


def header_line(command: str) -> str:
    return f"{HEADER_PREFIX} schema={SCHEMA_VERSION} command={command}"


def read_header(path: str|Path) -> dict|None:
    """The parsed header comment of a table, :const:`None` if it has none"""
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    match = _HEADER_PATTERN.match(first)
    if match is None:
        return None
    return {"schema": match.group(1), "command": match.group(2)}


def read_table(
        path: str|Path,
        required: Sequence[str],
        *,
        source: str|None=None
) -> pd.DataFrame:
    """
    Read a table with every cell as text.

    :param path: Path of the table
    :param required: :class:`Sequence[str]` Columns that must be present
    :param source: :class:`str|None` Name used in error messages, defaults to the path

    Raises
    ------
    :class:`FileNotFoundError`
        The path does not exist
    :class:`SchemaVersionError`
        The header names another schema version
    :class:`MissingColumnsError`
        A required column is absent
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Input table {path} does not exist")
    header = read_header(path)
    if header is not None and header["schema"] != str(SCHEMA_VERSION):
        raise errors.SchemaVersionError(
            f"{path} was written with schema {header['schema']}, expected {SCHEMA_VERSION}"
        )
    try:
        frame = pd.read_csv(
            path,
            skiprows=0 if header is None else 1,
            dtype=str,
            keep_default_na=False,
            na_values=[""],
        )
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame()
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = tuple(c for c in required if c not in frame.columns)
    if missing:
        raise errors.MissingColumnsError(source or str(path), missing)
    return frame


def write_table(path: str|Path, frame: pd.DataFrame, command: str) -> None:
    """Write a frame below the header line, rows separated by ``\\n``"""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(header_line(command) + "\n")
        frame.to_csv(f, index=False, lineterminator="\n")


def _numeric(column: pd.Series) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Values and a mask of cells that hold text but no number"""
    values = pd.to_numeric(column, errors="coerce").to_numpy(dtype=np.float64)
    return values, column.notna().to_numpy() & np.isnan(values)


def _integer(column: pd.Series) -> tuple[NDArray[np.int64], NDArray[np.bool_]]:
    values, bad = _numeric(column)
    bad |= np.isnan(values) | (np.floor(values) != values)
    return np.where(bad, -1, values).astype(np.int64), bad


def parse_habitat(text: str|None) -> dict[str, int]:
    """
    Decode ``"code:count;code:count"``. An empty field means no counts.

    Raises
    ------
    :class:`ValueError`
        An entry has no count or the count is not an integer
    """
    if text is None or (isinstance(text, float) and math.isnan(text)) or not text.strip():
        return {}
    counts: dict[str, int] = {}
    for entry in text.split(";"):
        code, sep, count = entry.rpartition(":")
        if not sep or not code.strip():
            raise ValueError(f"Habitat entry {entry!r} is not of the form code:count")
        counts[code.strip()] = counts.get(code.strip(), 0) + int(count)
    return counts


def format_habitat(counts: Mapping) -> str:
    return ";".join(f"{code}:{value}" for code, value in counts.items())


def read_pixel_records(
        path: str|Path,
        feature_names: Sequence[str]=CONTINUOUS_FEATURES,
        *,
        skipped: list|None=None
) -> list[RawPixelRecord]:
    """Raw pixel covariates, one record per row

    Rows with an unparsable id, number or habitat entry are skipped with a
    :class:`MalformedRecordWarning`; their row positions go into ``skipped``.
    Columns ``row`` and ``col`` are optional.
    """
    frame = read_table(path, (*PIXEL_COLUMNS, *feature_names), source="pixel table")
    n = len(frame)
    pixel_ids, bad = _integer(frame["pixel_id"])
    values = np.empty((n, len(feature_names)))
    for j, feature in enumerate(feature_names):
        values[:, j], bad_feature = _numeric(frame[feature])
        bad |= bad_feature
    coords = {}
    for axis in ("row", "col"):
        if axis in frame.columns:
            present = frame[axis].notna().to_numpy()
            position, bad_axis = _integer(frame[axis])
            bad |= bad_axis & present
            coords[axis] = np.where(present, position, -1)

    records = []
    for i in range(n):
        try:
            if bad[i]:
                raise ValueError("unparsable number")
            habitat = parse_habitat(frame["habitat"].iat[i])
        except ValueError as e:
            warn(f"pixel table row {i}: {e}", errors.MalformedRecordWarning)
            if skipped is not None:
                skipped.append(i)
            continue
        species = frame["species_id"].iat[i]
        row = coords.get("row", None)
        col = coords.get("col", None)
        records.append(RawPixelRecord(
            int(pixel_ids[i]),
            {f: None if np.isnan(values[i, j]) else float(values[i, j]) for j, f in enumerate(feature_names)},
            None if pd.isna(species) else str(species),
            habitat,
            None if row is None or row[i] < 0 else int(row[i]),
            None if col is None or col[i] < 0 else int(col[i]),
        ))
    logging.info("Read %d pixel records from %s", len(records), path)
    return records


def pixel_records_frame(
        records: Iterable[RawPixelRecord],
        feature_names: Sequence[str]=CONTINUOUS_FEATURES
) -> pd.DataFrame:
    """The table layout :func:`read_pixel_records` reads"""
    records = list(records)
    frame = pd.DataFrame({"pixel_id": [r.pixel_id for r in records]})
    for feature in feature_names:
        frame[feature] = [r.value(feature) for r in records]
    frame["species_id"] = [r.species_id for r in records]
    frame["habitat"] = [format_habitat(r.habitat_counts) for r in records]
    frame["row"] = pd.array([r.row for r in records], dtype="Int64")
    frame["col"] = pd.array([r.col for r in records], dtype="Int64")
    return frame


def read_raw_observations(path: str|Path) -> dict[str, NDArray]:
    """
    Raw observation columns ready for :func:`filter_table`.

    Unparsable cells become NaN (or NaT for dates) so that the quality
    filter counts the row as malformed. ``ndsi`` and ``mask`` are optional
    and default to 0.
    """
    frame = read_table(path, RAW_OBSERVATION_COLUMNS, source="observation table")
    pixel_ids, bad = _integer(frame["pixel_id"])
    ndvi, bad_ndvi = _numeric(frame["ndvi"])
    dates = pd.to_datetime(frame["date"], format="%Y-%m-%d", errors="coerce")
    bad |= bad_ndvi | dates.isna().to_numpy()
    if "ndsi" in frame.columns:
        ndsi, bad_ndsi = _numeric(frame["ndsi"])
        ndsi = np.where(frame["ndsi"].isna().to_numpy(), 0.0, ndsi)
        bad |= bad_ndsi
    else:
        ndsi = np.zeros(len(frame))
    if "mask" in frame.columns:
        mask, bad_mask = _integer(frame["mask"].fillna("0"))
        bad |= bad_mask
    else:
        mask = np.zeros(len(frame), dtype=np.int64)

    return {
        "pixel_id": pixel_ids,
        "date": dates.to_numpy(dtype="datetime64[D]"),
        "ndvi": np.where(bad, np.nan, ndvi),
        "ndsi": ndsi,
        "mask": np.where(bad, -1, mask),
    }


def write_features(
        path: str|Path,
        features: FeatureMatrix,
        state: PreprocessorState,
        coords: pd.DataFrame|None,
        command: str
) -> None:
    """Write preprocessed features; habitat weights as ``"index:weight;..."``"""
    frame = pd.DataFrame({"pixel_id": features.pixel_ids})
    if coords is not None and len(coords):
        located = coords.drop_duplicates("pixel_id").set_index("pixel_id")
        frame["row"] = pd.array(located["row"].reindex(features.pixel_ids).to_numpy(), dtype="Int64")
        frame["col"] = pd.array(located["col"].reindex(features.pixel_ids).to_numpy(), dtype="Int64")
    else:
        frame["row"] = pd.array([None] * len(features), dtype="Int64")
        frame["col"] = pd.array([None] * len(features), dtype="Int64")
    frame["species"] = features.species
    frame["habitat"] = [
        format_habitat({int(h): repr(float(w)) for h, w in enumerate(weights) if w > 0})
        for weights in features.habitat
    ]
    for j, feature in enumerate(state.feature_names):
        frame[feature] = features.continuous[:, j]
    write_table(path, frame, command)


def read_features(path: str|Path, state: PreprocessorState) -> tuple[FeatureMatrix, pd.DataFrame]:
    """
    Preprocessed features written by :func:`write_features`.

    Returns
    -------
    :class:`tuple[FeatureMatrix, DataFrame]`
        The features and a ``pixel_id, row, col`` frame (rows without a
        position are dropped from it)

    Raises
    ------
    :class:`DimensionMismatchError`
        The table's features or category indices do not fit ``state``
    """
    frame = read_table(path, FEATURE_COLUMNS, source="feature table")
    continuous = [c for c in frame.columns if c not in FEATURE_COLUMNS]
    if tuple(continuous) != state.feature_names:
        raise errors.DimensionMismatchError(
            f"Feature table has continuous columns {continuous}, the model expects {list(state.feature_names)}"
        )
    pixel_ids, bad = _integer(frame["pixel_id"])
    species, bad_species = _integer(frame["species"])
    if (bad | bad_species).any():
        raise ValueError(f"{path} holds unparsable ids")
    if len(frame) and (species.max() > state.n_species or species.min() < 0):
        raise errors.DimensionMismatchError("Species index out of range for this model")

    habitat = np.zeros((len(frame), state.n_habitats + 1))
    for i, text in enumerate(frame["habitat"]):
        for code, weight in (entry.split(":") for entry in str(text).split(";") if entry):
            index = int(code)
            if not 0 <= index <= state.n_habitats:
                raise errors.DimensionMismatchError("Habitat index out of range for this model")
            habitat[i, index] = float(weight)

    values = np.empty((len(frame), state.n_continuous))
    for j, feature in enumerate(state.feature_names):
        values[:, j], _ = _numeric(frame[feature])
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{path} holds missing or non-finite standardised features")

    coords = pd.DataFrame({
        "pixel_id": pixel_ids,
        "row": pd.to_numeric(frame["row"]),
        "col": pd.to_numeric(frame["col"]),
    }).dropna().astype(np.int64)
    return FeatureMatrix(pixel_ids, values, species, habitat), coords


def write_observations(path: str|Path, table: ObservationTable, command: str) -> None:
    frame = pd.DataFrame({
        "pixel_id": table.pixel_id,
        "date": np.datetime_as_string(table.date, unit="D"),
        "t": table.t,
        "ndvi": table.ndvi,
    })
    write_table(path, frame, command)


def read_observations(path: str|Path) -> ObservationTable:
    """Filtered observations; normalised days are recomputed from the dates"""
    frame = read_table(path, ("pixel_id", "date", "ndvi"), source="observation table")
    pixel_ids, bad = _integer(frame["pixel_id"])
    ndvi, bad_ndvi = _numeric(frame["ndvi"])
    dates = pd.to_datetime(frame["date"], format="%Y-%m-%d", errors="coerce")
    bad |= bad_ndvi | np.isnan(ndvi) | dates.isna().to_numpy()
    if bad.any():
        warn(f"{path}: skipping {int(bad.sum())} malformed observations", errors.MalformedRecordWarning)
    keep = ~bad
    return ObservationTable.from_columns(
        pixel_ids[keep], dates.to_numpy(dtype="datetime64[D]")[keep], ndvi[keep]
    )


def read_pixel_set(path: str|Path) -> NDArray[np.int64]:
    """Pixel ids listed in the ``pixel_id`` column of a table"""
    frame = read_table(path, ("pixel_id",), source="pixel set")
    ids, bad = _integer(frame["pixel_id"])
    return np.unique(ids[~bad])
