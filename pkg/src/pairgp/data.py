"""Match data ingestion, design matrices and the walk-forward splitter."""

from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

SURFACES = ("clay", "grass", "hard", "indoor_hard")
DEFAULT_TIME_SCALE = 300.0
CSV_COLUMNS = ("match_id", "date", "winner", "loser", "surface")


class DataError(ValueError):
    """Raised for malformed match data."""


@dataclass(frozen=True)
class MatchRecord:
    match_id: str
    date: dt.date
    winner: str
    loser: str
    surface: str | None = None

    def __post_init__(self):
        if self.winner == self.loser:
            raise DataError(f"match {self.match_id}: winner and loser are both {self.winner!r}")
        if self.surface is not None and self.surface not in SURFACES:
            raise DataError(f"match {self.match_id}: unknown surface {self.surface!r}")


@dataclass(frozen=True)
class MatchDataset:
    """Matches sorted by (date, match_id) with players indexed by first appearance."""

    records: tuple[MatchRecord, ...]
    players: dict[str, int] = field(compare=False)

    @classmethod
    def from_records(cls, records: Iterable[MatchRecord]) -> "MatchDataset":
        ordered = tuple(sorted(records, key=lambda r: (r.date, r.match_id)))
        seen: set[str] = set()
        for rec in ordered:
            if rec.match_id in seen:
                raise DataError(f"duplicate match_id {rec.match_id!r}")
            seen.add(rec.match_id)
        players: dict[str, int] = {}
        for rec in ordered:
            for name in (rec.winner, rec.loser):
                if name not in players:
                    players[name] = len(players)
        return cls(ordered, players)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_matches(self) -> int:
        return len(self.records)

    @property
    def n_players(self) -> int:
        return len(self.players)

    @property
    def start_date(self) -> dt.date | None:
        return self.records[0].date if self.records else None

    @property
    def end_date(self) -> dt.date | None:
        return self.records[-1].date if self.records else None

    @property
    def has_surface(self) -> bool:
        return bool(self.records) and all(r.surface is not None for r in self.records)

    def before(self, date: dt.date) -> "MatchDataset":
        """All matches strictly before ``date``."""
        return MatchDataset.from_records(r for r in self.records if r.date < date)

    def between(self, start: dt.date, end: dt.date) -> "MatchDataset":
        """Matches with ``start <= date <= end``."""
        return MatchDataset.from_records(r for r in self.records if start <= r.date <= end)


def _parse_date(text: str, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"row {line}: malformed date {text!r}") from None


def parse_match_csv(stream: IO[bytes] | IO[str]) -> MatchDataset:
    """Parse the ``match_id,date,winner,loser[,surface]`` CSV format.

    Lines starting with ``#`` are treated as comments.  Row numbers in error
    messages count data rows from 1.
    """
    raw = stream.read()
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise DataError("missing header row")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    if header not in (list(CSV_COLUMNS), list(CSV_COLUMNS[:4])):
        raise DataError(f"unexpected header {','.join(header)!r}; expected {','.join(CSV_COLUMNS)}")
    has_surface = len(header) == 5
    records = []
    seen: dict[str, int] = {}
    for line, row in enumerate(reader, start=1):
        if len(row) != len(header):
            raise DataError(f"row {line}: expected {len(header)} fields, got {len(row)}")
        match_id, date_text, winner, loser = (v.strip() for v in row[:4])
        surface = row[4].strip() if has_surface else ""
        if match_id in seen:
            raise DataError(f"row {line}: duplicate match_id {match_id!r} (first seen in row {seen[match_id]})")
        seen[match_id] = line
        date = _parse_date(date_text, line)
        if winner == loser:
            raise DataError(f"row {line}: winner and loser are both {winner!r}")
        if surface and surface not in SURFACES:
            raise DataError(f"row {line}: unknown surface {surface!r}")
        records.append(MatchRecord(match_id, date, winner, loser, surface or None))
    return MatchDataset.from_records(records)


def read_match_csv(path) -> MatchDataset:
    with open(path, "rb") as fh:
        return parse_match_csv(fh)


def format_match_csv(dataset: MatchDataset, header_comment: str | None = None) -> str:
    """Serialize to the CSV format read by :func:`parse_match_csv`."""
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    with_surface = any(r.surface is not None for r in dataset.records)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS if with_surface else CSV_COLUMNS[:4])
    for r in dataset.records:
        row = [r.match_id, r.date.isoformat(), r.winner, r.loser]
        if with_surface:
            row.append(r.surface or "")
        writer.writerow(row)
    return buf.getvalue()


@dataclass(frozen=True)
class DesignMatrix:
    """One input row per player appearance.

    Match ``k`` owns rows ``2k`` (winner) and ``2k + 1`` (loser).  Column 0 is
    scaled time; surface models append four one-hot columns.
    """

    rows: np.ndarray
    winner_row: np.ndarray
    loser_row: np.ndarray
    player_of_row: np.ndarray
    rows_of_player: tuple[np.ndarray, ...]
    players: dict[str, int]
    origin: dt.date | None
    time_scale: float
    use_surface: bool

    @property
    def n_matches(self) -> int:
        return len(self.winner_row)

    @property
    def n_players(self) -> int:
        return len(self.rows_of_player)

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    def time_of(self, date: dt.date) -> float:
        if self.origin is None:
            return 0.0
        return (date - self.origin).days / self.time_scale

    def input_for(self, date: dt.date, surface: str | None = None) -> np.ndarray:
        """Input vector for predicting a skill on ``date`` (and ``surface``)."""
        x = np.zeros(self.width)
        x[0] = self.time_of(date)
        if self.use_surface:
            if surface is None:
                raise DataError("surface model needs a surface for prediction")
            x[1:] = surface_one_hot(surface)
        return x


def surface_one_hot(surface: str) -> np.ndarray:
    if surface not in SURFACES:
        raise DataError(f"unknown surface {surface!r}")
    out = np.zeros(len(SURFACES))
    out[SURFACES.index(surface)] = 1.0
    return out


def build_design(
    dataset: MatchDataset,
    use_surface: bool = False,
    time_scale: float = DEFAULT_TIME_SCALE,
    origin: dt.date | None = None,
) -> DesignMatrix:
    """Build the 2n-row input matrix and winner/loser row maps.

    ``origin`` defaults to the first match date, so time starts at zero.
    """
    if time_scale <= 0:
        raise ValueError("time_scale must be positive")
    n = dataset.n_matches
    width = 1 + (len(SURFACES) if use_surface else 0)
    rows = np.zeros((2 * n, width))
    player_of_row = np.empty(2 * n, dtype=np.int64)
    origin = origin if origin is not None else dataset.start_date
    for k, rec in enumerate(dataset.records):
        t = (rec.date - origin).days / time_scale
        rows[2 * k, 0] = rows[2 * k + 1, 0] = t
        if use_surface:
            if rec.surface is None:
                raise DataError(f"match {rec.match_id} has no surface but the model uses surfaces")
            rows[2 * k : 2 * k + 2, 1:] = surface_one_hot(rec.surface)
        player_of_row[2 * k] = dataset.players[rec.winner]
        player_of_row[2 * k + 1] = dataset.players[rec.loser]
    order = np.argsort(player_of_row, kind="stable")
    counts = np.bincount(player_of_row, minlength=dataset.n_players)
    rows_of_player = tuple(np.split(order, np.cumsum(counts)[:-1])) if n else tuple(
        np.empty(0, dtype=np.int64) for _ in range(dataset.n_players)
    )
    return DesignMatrix(
        rows=rows,
        winner_row=np.arange(0, 2 * n, 2),
        loser_row=np.arange(1, 2 * n, 2),
        player_of_row=player_of_row,
        rows_of_player=rows_of_player,
        players=dict(dataset.players),
        origin=origin,
        time_scale=float(time_scale),
        use_surface=use_surface,
    )


def walk_forward_split(
    dataset: MatchDataset, eval_start: dt.date, eval_end: dt.date
) -> list[tuple[MatchDataset, list[MatchRecord]]]:
    """One ``(train, test_day)`` pair per distinct match date in the window.

    ``train`` holds every match strictly before the test day.
    """
    if eval_start > eval_end:
        raise ValueError("eval_start must not be after eval_end")
    by_day: dict[dt.date, list[MatchRecord]] = {}
    for rec in dataset.records:
        if eval_start <= rec.date <= eval_end:
            by_day.setdefault(rec.date, []).append(rec)
    return [(dataset.before(day), matches) for day, matches in sorted(by_day.items())]


def evaluation_days(dataset: MatchDataset, eval_start: dt.date, eval_end: dt.date) -> Sequence[dt.date]:
    return sorted({r.date for r in dataset.records if eval_start <= r.date <= eval_end})
