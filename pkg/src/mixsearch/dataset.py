"""Raw table ingestion, feature derivation, scaling, splitting, and windowing.

The pipeline operates on plain multivariate tables: one row per timestep and
an integer profile id per row marking which recording session the row belongs
to.  Columns carry a role, either ``input`` (measured or derived channels the
forecaster may read) or ``target`` (channels the forecaster must predict).

All operations are pure: each returns a new table and leaves its argument
untouched, so per-profile work can run in parallel without shared state.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

ROLE_INPUT = "input"
ROLE_TARGET = "target"
ROLE_ID = "id"

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"


class DatasetError(ValueError):
    """Raised when a table or file violates the ingestion contract."""


@dataclass
class RawTable:
    """A multivariate time-series table.

    ``values`` holds the numeric columns (inputs and targets) row-major;
    the profile id column is kept separately as integers.  ``split`` is
    ``None`` until :func:`split_by_profile` tags the rows.
    """

    column_names: list[str]
    roles: list[str]
    profile_ids: np.ndarray
    values: np.ndarray
    split: np.ndarray | None = None
    id_column: str = "profile_id"

    def __post_init__(self) -> None:
        if len(self.column_names) != len(self.roles):
            raise DatasetError("column_names and roles must align")
        if self.values.ndim != 2 or self.values.shape[1] != len(self.column_names):
            raise DatasetError("values shape does not match column count")
        if self.profile_ids.shape[0] != self.values.shape[0]:
            raise DatasetError("every row needs a profile id")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def input_columns(self) -> list[str]:
        return [c for c, r in zip(self.column_names, self.roles) if r == ROLE_INPUT]

    @property
    def target_columns(self) -> list[str]:
        return [c for c, r in zip(self.column_names, self.roles) if r == ROLE_TARGET]

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise DatasetError(f"unknown column {name!r}") from None

    def role_indices(self, role: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.roles) if r == role], dtype=np.intp)

    def profiles(self) -> list[int]:
        """Distinct profile ids in first-appearance order."""
        seen: dict[int, None] = {}
        for pid in self.profile_ids:
            seen.setdefault(int(pid), None)
        return list(seen)

    def profile_runs(self) -> list[tuple[int, slice]]:
        """Contiguous runs of equal profile id, in row order.

        Derivations and windowing treat each run as an independent recording;
        a change of profile id is a hard boundary.
        """
        runs: list[tuple[int, slice]] = []
        ids = self.profile_ids
        start = 0
        for i in range(1, len(ids) + 1):
            if i == len(ids) or ids[i] != ids[start]:
                runs.append((int(ids[start]), slice(start, i)))
                start = i
        return runs


@dataclass(frozen=True)
class SplitSpec:
    """Profile-based train/val/test split rule."""

    test_profiles: frozenset[int]
    val_profiles: frozenset[int]

    def __post_init__(self) -> None:
        overlap = self.test_profiles & self.val_profiles
        if overlap:
            raise DatasetError(f"test and val profiles overlap: {sorted(overlap)}")

    @classmethod
    def of(cls, test_profiles, val_profiles) -> "SplitSpec":
        return cls(frozenset(int(p) for p in test_profiles),
                   frozenset(int(p) for p in val_profiles))

    def tag_for(self, profile: int) -> str:
        if profile in self.test_profiles:
            return SPLIT_TEST
        if profile in self.val_profiles:
            return SPLIT_VAL
        return SPLIT_TRAIN


@dataclass
class Scaler:
    """Per-column min/max fitted on training rows only.

    Columns constant on the training rows are flagged degenerate and map
    to 0 when applied, so they contribute no signal downstream.
    """

    column_names: list[str]
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.mins == self.maxs


@dataclass
class WindowSet:
    """Fixed-length windows cut per profile, with input/target channel split."""

    inputs: np.ndarray        # (n, W, C_in)
    targets: np.ndarray       # (n, W, C_tgt)
    split: np.ndarray         # (n,) unicode tags
    profile: np.ndarray       # (n,) int
    start: np.ndarray         # (n,) int, row offset within the profile run
    window_length: int
    stride: int
    input_names: list[str]
    target_names: list[str]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def split_mask(self, split: str) -> np.ndarray:
        return self.split == split

    def split_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)


def load_dataset(path: str | Path, schema: dict[str, str]) -> RawTable:
    """Parse a CSV file into a :class:`RawTable` under a column-role schema.

    The header must match the schema keys exactly.  Exactly one column must
    carry role ``id`` and hold integer profile ids; every cell of the other
    columns must parse to a finite number.  Errors name the offending row
    (1-based, counting data rows) and column.
    """
    _validate_schema(schema)
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in schema if c not in header]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {missing}")
        unexpected = [c for c in header if c not in schema]
        if unexpected:
            raise DatasetError(f"{path}: column(s) {unexpected} not in schema")

        id_col = next(c for c, r in schema.items() if r == ROLE_ID)
        id_pos = header.index(id_col)
        value_cols = [c for c in header if c != id_col]
        value_pos = [header.index(c) for c in value_cols]

        profile_ids: list[int] = []
        rows: list[list[float]] = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            profile_ids.append(_parse_profile_id(row[id_pos], path, row_no, id_col))
            parsed = []
            for col, pos in zip(value_cols, value_pos):
                parsed.append(_parse_cell(row[pos], path, row_no, col))
            rows.append(parsed)

    if not rows:
        raise DatasetError(f"{path}: no data rows")

    table = RawTable(
        column_names=value_cols,
        roles=[schema[c] for c in value_cols],
        profile_ids=np.asarray(profile_ids, dtype=np.int64),
        values=np.asarray(rows, dtype=np.float64),
        id_column=id_col,
    )
    logger.info("loaded %s: %d rows, %d inputs, %d targets, %d profiles",
                path, table.n_rows, len(table.input_columns),
                len(table.target_columns), len(table.profiles()))
    return table


def _validate_schema(schema: dict[str, str]) -> None:
    roles = list(schema.values())
    bad = sorted({r for r in roles if r not in (ROLE_INPUT, ROLE_TARGET, ROLE_ID)})
    if bad:
        raise DatasetError(f"unknown role(s) {bad}; expected input/target/id")
    if roles.count(ROLE_ID) != 1:
        raise DatasetError("schema must designate exactly one id column")
    if roles.count(ROLE_INPUT) < 1 or roles.count(ROLE_TARGET) < 1:
        raise DatasetError("schema needs at least one input and one target column")


def _parse_profile_id(text: str, path: Path, row_no: int, col: str) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(
            f"{path}: row {row_no}, column {col!r}: unparsable value {text!r}") from None
    if not math.isfinite(value) or value != int(value):
        raise DatasetError(
            f"{path}: row {row_no}, column {col!r}: profile id must be an integer, got {text!r}")
    return int(value)


def _parse_cell(text: str, path: Path, row_no: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(
            f"{path}: row {row_no}, column {col!r}: unparsable value {text!r}") from None
    if not math.isfinite(value):
        raise DatasetError(
            f"{path}: row {row_no}, column {col!r}: non-finite value {text!r}")
    return value


def derive_ewma(table: RawTable, spans: list[int]) -> RawTable:
    """Append exponentially weighted moving averages of every input column.

    For each input column x and span s a new input column is appended with
    smoothing alpha = 2/(s+1), seeded with the first observation of each
    profile run: y_0 = x_0, y_t = alpha*x_t + (1-alpha)*y_{t-1}.  Runs are
    smoothed independently; no value leaks across a profile boundary.
    """
    if table.n_rows == 0:
        raise DatasetError("cannot derive features from an empty table")
    for s in spans:
        if int(s) != s or s <= 0:
            raise DatasetError(f"EWMA span must be a positive integer, got {s!r}")

    base_cols = [(name, table.column_index(name)) for name in table.input_columns]
    new_names = [f"{name}_ewma{int(s)}" for name, _ in base_cols for s in spans]
    clash = set(new_names) & set(table.column_names)
    if clash:
        raise DatasetError(f"derived column name(s) already present: {sorted(clash)}")

    derived = np.empty((table.n_rows, len(new_names)), dtype=np.float64)
    runs = table.profile_runs()
    j = 0
    for _, idx in base_cols:
        x = table.values[:, idx]
        for s in spans:
            alpha = 2.0 / (int(s) + 1.0)
            out = derived[:, j]
            for _, sl in runs:
                out[sl] = _ewma_run(x[sl], alpha)
            j += 1

    return replace(
        table,
        column_names=table.column_names + new_names,
        roles=table.roles + [ROLE_INPUT] * len(new_names),
        values=np.hstack([table.values, derived]),
        split=None if table.split is None else table.split.copy(),
    )


def _ewma_run(x: np.ndarray, alpha: float) -> np.ndarray:
    # y[t] = alpha*x[t] + (1-alpha)*y[t-1] as a first-order IIR filter,
    # with state chosen so that y[0] == x[0].
    zi = np.array([(1.0 - alpha) * x[0]])
    y, _ = lfilter([alpha], [1.0, -(1.0 - alpha)], x, zi=zi)
    return y


def split_by_profile(table: RawTable, split: SplitSpec) -> RawTable:
    """Tag every row train/val/test by its profile id.

    Profiles listed in the split but absent from the data only produce a
    warning.  A split in which the test or the val set swallows every
    profile is rejected.
    """
    present = set(table.profiles())
    for name, wanted in (("test", split.test_profiles), ("val", split.val_profiles)):
        absent = sorted(wanted - present)
        if absent:
            logger.warning("%s profiles %s not present in the data", name, absent)
        if wanted and present <= wanted:
            raise DatasetError(f"{name} profiles would cover every profile in the data")

    tags = np.array([split.tag_for(int(p)) for p in table.profile_ids], dtype="U5")
    counts = {s: int(np.sum(tags == s)) for s in (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST)}
    logger.info("split rows: train=%(train)d val=%(val)d test=%(test)d", counts)
    return replace(table, split=tags, values=table.values.copy())


def fit_scaler(table: RawTable, split: SplitSpec) -> Scaler:
    """Fit per-column min/max exclusively on training rows."""
    excluded = split.test_profiles | split.val_profiles
    train_mask = ~np.isin(table.profile_ids, sorted(excluded))
    if not train_mask.any():
        raise DatasetError("no training rows left to fit the scaler on")
    train = table.values[train_mask]
    scaler = Scaler(
        column_names=list(table.column_names),
        mins=train.min(axis=0),
        maxs=train.max(axis=0),
    )
    n_deg = int(scaler.degenerate.sum())
    if n_deg:
        deg = [c for c, d in zip(scaler.column_names, scaler.degenerate) if d]
        logger.warning("%d column(s) constant on train, will scale to 0: %s", n_deg, deg)
    return scaler


def apply_scaler(table: RawTable, scaler: Scaler) -> RawTable:
    """Map every column through (x - min) / (max - min).

    Values outside the training range land outside [0, 1]; they are not
    clamped.  Degenerate columns map to 0.
    """
    if scaler.column_names != table.column_names:
        raise DatasetError("scaler columns do not match table columns")
    span = scaler.maxs - scaler.mins
    safe_span = np.where(scaler.degenerate, 1.0, span)
    scaled = (table.values - scaler.mins) / safe_span
    scaled[:, scaler.degenerate] = 0.0
    return replace(table, values=scaled,
                   split=None if table.split is None else table.split.copy())


def make_windows(table: RawTable, length: int, stride: int = 1) -> WindowSet:
    """Cut fixed-length windows per profile run.

    Windows start at offsets 0, stride, 2*stride, ... within each run and
    never cross a run boundary.  Runs shorter than ``length`` contribute
    no windows.  The table must already carry split tags.
    """
    if length < 1:
        raise DatasetError(f"window length must be >= 1, got {length}")
    if stride < 1:
        raise DatasetError(f"stride must be >= 1, got {stride}")
    if table.split is None:
        raise DatasetError("table must be split-tagged before windowing")

    in_idx = table.role_indices(ROLE_INPUT)
    tgt_idx = table.role_indices(ROLE_TARGET)

    inputs, targets, tags, profs, starts = [], [], [], [], []
    for pid, sl in table.profile_runs():
        rows = table.values[sl]
        n_rows = rows.shape[0]
        if n_rows < length:
            logger.warning("profile %d run of %d rows is shorter than W=%d, skipped",
                           pid, n_rows, length)
            continue
        view = np.lib.stride_tricks.sliding_window_view(rows, length, axis=0)
        # view: (n_rows - length + 1, n_cols, length) -> stride and reorder
        block = view[::stride].transpose(0, 2, 1)
        inputs.append(block[:, :, in_idx])
        targets.append(block[:, :, tgt_idx])
        n_win = block.shape[0]
        tags.append(np.full(n_win, table.split[sl.start], dtype="U5"))
        profs.append(np.full(n_win, pid, dtype=np.int64))
        starts.append(np.arange(0, n_rows - length + 1, stride, dtype=np.int64))

    if not inputs:
        raise DatasetError(f"no profile run is long enough for W={length}")

    ws = WindowSet(
        inputs=np.ascontiguousarray(np.concatenate(inputs)),
        targets=np.ascontiguousarray(np.concatenate(targets)),
        split=np.concatenate(tags),
        profile=np.concatenate(profs),
        start=np.concatenate(starts),
        window_length=length,
        stride=stride,
        input_names=list(table.input_columns),
        target_names=list(table.target_columns),
    )
    logger.info("cut %d windows of %d steps (stride %d): train=%d val=%d test=%d",
                len(ws), length, stride,
                int(ws.split_mask(SPLIT_TRAIN).sum()),
                int(ws.split_mask(SPLIT_VAL).sum()),
                int(ws.split_mask(SPLIT_TEST).sum()))
    return ws


def expected_window_count(run_length: int, length: int, stride: int) -> int:
    """Closed-form window count for one run: floor((T-W)/stride)+1 if T >= W."""
    if run_length < length:
        return 0
    return (run_length - length) // stride + 1


# ---------------------------------------------------------------------------
# Persistence: processed table as CSV, scaler as a plain-text sidecar.

def save_table(table: RawTable, path: str | Path) -> None:
    """Write a (typically split-tagged, scaled) table as CSV.

    Floats are written with shortest round-trip formatting so a reload is
    bit-exact.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = [table.id_column]
        if table.split is not None:
            header.append("split")
        header.extend(table.column_names)
        writer.writerow(header)
        for i in range(table.n_rows):
            row: list[str] = [str(int(table.profile_ids[i]))]
            if table.split is not None:
                row.append(str(table.split[i]))
            row.extend(repr(float(v)) for v in table.values[i])
            writer.writerow(row)


def load_processed_table(path: str | Path, roles: dict[str, str],
                         id_column: str = "profile_id") -> RawTable:
    """Reload a table written by :func:`save_table` (split column required)."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if header[:2] != [id_column, "split"]:
            raise DatasetError(f"{path}: expected header starting {id_column},split")
        value_cols = header[2:]
        missing = [c for c in value_cols if c not in roles]
        if missing:
            raise DatasetError(f"{path}: no role recorded for column(s) {missing}")
        pids, tags, rows = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            pids.append(_parse_profile_id(row[0], path, row_no, id_column))
            if row[1] not in (SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST):
                raise DatasetError(f"{path}: row {row_no}: bad split tag {row[1]!r}")
            tags.append(row[1])
            rows.append([_parse_cell(v, path, row_no, c) for v, c in zip(row[2:], value_cols)])
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return RawTable(
        column_names=value_cols,
        roles=[roles[c] for c in value_cols],
        profile_ids=np.asarray(pids, dtype=np.int64),
        values=np.asarray(rows, dtype=np.float64),
        split=np.asarray(tags, dtype="U5"),
        id_column=id_column,
    )


def save_scaler(scaler: Scaler, path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write("column,min,max\n")
        for name, lo, hi in zip(scaler.column_names, scaler.mins, scaler.maxs):
            fh.write(f"{name},{float(lo)!r},{float(hi)!r}\n")


def load_scaler(path: str | Path) -> Scaler:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    names, mins, maxs = [], [], []
    with path.open() as fh:
        header = fh.readline().strip()
        if header != "column,min,max":
            raise DatasetError(f"{path}: not a scaler sidecar file")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DatasetError(f"{path}: line {line_no}: expected column,min,max")
            names.append(parts[0])
            mins.append(_parse_cell(parts[1], path, line_no, "min"))
            maxs.append(_parse_cell(parts[2], path, line_no, "max"))
    scaler = Scaler(column_names=names,
                    mins=np.asarray(mins), maxs=np.asarray(maxs))
    if np.any(scaler.mins > scaler.maxs):
        raise DatasetError(f"{path}: min exceeds max for some column")
    return scaler
