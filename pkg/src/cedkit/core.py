"""Vocabulary, window/time semantics and trace containers.

Every other module speaks in terms of the types defined here: the nine
atomic-event symbols, the eleven complex-event labels, the window grid and
the three trace flavours (concept, labeled, probabilistic) together with
their JSONL record format.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Sequence, Union

import numpy as np

NORM_TOL = 1e-9
N_AE = 9
N_CLASSES = 11
CE_IDS = tuple(range(1, N_CLASSES))
SEED_MAX = 2**64 - 1


class CedError(Exception):
    """Base class for data and configuration errors raised by cedkit."""


class UnknownSymbol(CedError, ValueError):
    def __init__(self, text: object):
        super().__init__(f"unknown atomic event {text!r}")
        self.text = text


class NotNormalized(CedError, ValueError):
    """A probability vector is negative somewhere or does not sum to one."""


class FormatError(CedError, ValueError):
    """A JSONL record does not follow the trace record schema."""


class AtomicEvent(enum.IntEnum):
    """The nine activity symbols; integer codes are part of every file format."""

    WALK = 0
    SIT = 1
    BRUSH_TEETH = 2
    CLICK_MOUSE = 3
    DRINK = 4
    EAT = 5
    TYPE = 6
    FLUSH_TOILET = 7
    WASH = 8

    @property
    def symbol(self) -> str:
        return self.name.lower()

    def __str__(self) -> str:
        return self.symbol


AE_SYMBOLS = tuple(ae.symbol for ae in AtomicEvent)
_BY_SYMBOL = {ae.symbol: ae for ae in AtomicEvent}


def parse_ae(text: str) -> AtomicEvent:
    """Parse a canonical symbol name (case-sensitive, exact)."""
    try:
        return _BY_SYMBOL[text]
    except (KeyError, TypeError):
        raise UnknownSymbol(text) from None


# Complex-event labels are plain ints: 0 is the default "no event" label e0,
# 1..10 are the monitored classes.
CeLabel = int

CE_NAMES = {
    0: "default",
    1: "workspace_sanitary_violation",
    2: "sanitary_eating_violation",
    3: "inadequate_brushing",
    4: "routine_sequence",
    5: "work_then_break",
    6: "sufficient_washing",
    7: "adequate_brushing",
    8: "post_meal_rest",
    9: "active_typing_session",
    10: "focused_work_start",
}


def check_label(label: int) -> int:
    if isinstance(label, bool) or not isinstance(label, (int, np.integer)) or not 0 <= label < N_CLASSES:
        raise FormatError(f"complex-event label must be an int in 0..10, got {label!r}")
    return int(label)


@dataclass(frozen=True)
class WindowSpec:
    window_seconds: int = 5

    def __post_init__(self):
        if isinstance(self.window_seconds, bool) or not isinstance(self.window_seconds, int) or self.window_seconds < 1:
            raise ValueError(f"window_seconds must be a positive int, got {self.window_seconds!r}")

    def ticks(self, seconds: int | float) -> int:
        return ticks(self, seconds)


DEFAULT_WINDOW = WindowSpec()


def ticks(spec: WindowSpec, seconds: int | float) -> int:
    """Number of windows needed to cover ``seconds`` (ceiling)."""
    if seconds < 0:
        raise ValueError("seconds must be nonnegative")
    if isinstance(seconds, int):
        return -(-seconds // spec.window_seconds)
    return math.ceil(seconds / spec.window_seconds)


def _check_seed(seed: int) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or not 0 <= seed <= SEED_MAX:
        raise FormatError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return int(seed)


@dataclass(frozen=True)
class ConceptTrace:
    id: str
    events: tuple[AtomicEvent, ...]
    window: WindowSpec = DEFAULT_WINDOW
    seed: int = 0
    generator_tag: str = ""

    def __post_init__(self):
        events = tuple(e if isinstance(e, AtomicEvent) else AtomicEvent(e) for e in self.events)
        if not events:
            raise FormatError(f"trace {self.id!r} is empty")
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "seed", _check_seed(self.seed))

    def __len__(self) -> int:
        return len(self.events)

    @classmethod
    def from_symbols(cls, symbols: Iterable[str], id: str = "trace", **kwargs) -> ConceptTrace:
        return cls(id=id, events=tuple(parse_ae(s) for s in symbols), **kwargs)

    @property
    def symbols(self) -> list[str]:
        return [e.symbol for e in self.events]

    @property
    def duration_seconds(self) -> int:
        return len(self.events) * self.window.window_seconds

    def prefix(self, t: int) -> ConceptTrace:
        if not 1 <= t <= len(self.events):
            raise IndexError(f"prefix length {t} outside 1..{len(self.events)}")
        return ConceptTrace(self.id, self.events[:t], self.window, self.seed, self.generator_tag)


class Completion(NamedTuple):
    """One complex-event instance: completion window, class and anchor window.

    Window indices are 0-based positions in the trace.
    """

    window: int
    ce_id: int
    anchor: int

    @property
    def span(self) -> int:
        return self.window - self.anchor + 1


@dataclass(frozen=True)
class LabeledTrace:
    trace: ConceptTrace
    labels: tuple[int, ...]
    completions: tuple[Completion, ...] = ()

    def __post_init__(self):
        labels = tuple(check_label(y) for y in self.labels)
        if len(labels) != len(self.trace):
            raise FormatError(f"trace {self.trace.id!r}: {len(labels)} labels for {len(self.trace)} windows")
        comps = tuple(Completion(*map(int, c)) for c in self.completions)
        for c in comps:
            if not 0 <= c.anchor <= c.window < len(labels):
                raise FormatError(f"trace {self.trace.id!r}: bad completion {c}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "completions", comps)

    @property
    def id(self) -> str:
        return self.trace.id

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class ProbTrace:
    """Per-window probability vectors over the nine atomic events."""

    id: str
    dists: tuple[tuple[float, ...], ...]
    window: WindowSpec = DEFAULT_WINDOW
    seed: int = 0
    generator_tag: str = ""
    _array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        arr = np.array(self.dists, dtype=float)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != N_AE:
            raise FormatError(f"prob trace {self.id!r} must have shape (T>=1, 9), got {arr.shape}")
        check_distributions(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "dists", tuple(tuple(float(v) for v in row) for row in arr))
        object.__setattr__(self, "_array", arr)
        object.__setattr__(self, "seed", _check_seed(self.seed))

    def __len__(self) -> int:
        return len(self.dists)

    def as_array(self) -> np.ndarray:
        return self._array

    @classmethod
    def one_hot(cls, trace: ConceptTrace) -> ProbTrace:
        arr = np.zeros((len(trace), N_AE))
        arr[np.arange(len(trace)), [int(e) for e in trace.events]] = 1.0
        return cls(trace.id, tuple(map(tuple, arr)), trace.window, trace.seed, trace.generator_tag)


def check_distributions(arr: np.ndarray, tol: float = NORM_TOL) -> None:
    """Raise NotNormalized unless every row of ``arr`` is a probability vector."""
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise NotNormalized("probabilities must be finite and nonnegative")
    dev = np.abs(arr.sum(axis=-1) - 1.0)
    if dev.size and dev.max() > tol:
        raise NotNormalized(f"distribution sums deviate from 1 by {dev.max():.3g} (> {tol:g})")


# --- JSONL records --------------------------------------------------------

Record = Union[ConceptTrace, LabeledTrace, ProbTrace]


def to_record(obj: Record) -> dict:
    if isinstance(obj, LabeledTrace):
        rec = to_record(obj.trace)
        rec["ce"] = list(obj.labels)
        rec["spans"] = [list(c) for c in obj.completions]
        return rec
    if isinstance(obj, ConceptTrace):
        return {
            "id": obj.id,
            "window_s": obj.window.window_seconds,
            "ae": obj.symbols,
            "seed": obj.seed,
            "gen": obj.generator_tag,
        }
    if isinstance(obj, ProbTrace):
        return {
            "id": obj.id,
            "window_s": obj.window.window_seconds,
            "p": [list(row) for row in obj.dists],
            "seed": obj.seed,
            "gen": obj.generator_tag,
        }
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def from_record(rec: dict) -> Record:
    """Inverse of :func:`to_record`; the record's keys select the trace flavour."""
    if not isinstance(rec, dict):
        raise FormatError("trace record must be a JSON object")
    try:
        common = dict(
            window=WindowSpec(int(rec.get("window_s", 5))),
            seed=rec.get("seed", 0),
            generator_tag=str(rec.get("gen", "")),
        )
        rid = str(rec["id"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed trace record: {exc}") from None
    if "p" in rec:
        return ProbTrace(rid, tuple(tuple(row) for row in rec["p"]), **common)
    if "ae" not in rec:
        raise FormatError(f"record {rid!r} has neither 'ae' nor 'p'")
    trace = ConceptTrace(rid, tuple(parse_ae(s) for s in rec["ae"]), **common)
    if "ce" not in rec:
        return trace
    return LabeledTrace(trace, tuple(rec["ce"]), tuple(tuple(c) for c in rec.get("spans", ())))


def dumps(obj: Record) -> str:
    return json.dumps(to_record(obj), separators=(",", ":"))


def loads(line: str) -> Record:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from None
    return from_record(rec)


def iter_jsonl(source: str | Path | IO[str]) -> Iterator[Record]:
    """Stream records from a path or open text file, skipping blank lines."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from iter_jsonl(fh)
        return
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            yield loads(line)
        except CedError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None


def write_jsonl(records: Iterable[Record], dest: str | Path | IO[str]) -> int:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            return write_jsonl(records, fh)
    n = 0
    for rec in records:
        dest.write(dumps(rec))
        dest.write("\n")
        n += 1
    return n


def one_hot_matrix(events: Sequence[int]) -> np.ndarray:
    arr = np.zeros((len(events), N_AE))
    arr[np.arange(len(events)), np.asarray(events, dtype=int)] = 1.0
    return arr
