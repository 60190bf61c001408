"""Dataset builder and dataset statistics.

A dataset is a directory holding ``traces.jsonl`` (one labeled trace per
line, completions included) and ``manifest.json`` (the build manifest plus
build bookkeeping). Samples whose labeling hits a simultaneous completion
are regenerated from a derived seed, so a build is a pure function of its
manifest and configs.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from .core import CE_IDS, N_CLASSES, CedError, LabeledTrace, iter_jsonl, write_jsonl
from .fsm import SimultaneousCompletion, label_trace
from .simulator import GeneratorConfig, InvalidConfig, derive_seed, generate, load_suite, stretch

SPLITS = ("train", "val", "test5", "test15", "test30")
# (duration in seconds, stretch factor) used when a manifest leaves them unset
SPLIT_DEFAULTS = {
    "train": (300, 1),
    "val": (300, 1),
    "test5": (300, 1),
    "test15": (900, 3),
    "test30": (1800, 6),
}
MAX_DISCARD_RATE = 0.05
MAX_ATTEMPTS = 1000
TRACES_FILE = "traces.jsonl"
MANIFEST_FILE = "manifest.json"


class DiscardRateExceeded(CedError):
    def __init__(self, discarded: int, attempts: int, limit: float = MAX_DISCARD_RATE):
        self.discarded = discarded
        self.attempts = attempts
        self.limit = limit
        super().__init__(
            f"{discarded} of {attempts} generated samples had simultaneous completions "
            f"({discarded / attempts:.1%} > {limit:.0%})"
        )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    count: int
    config_id: str = "default"
    seed_base: int = 0
    window_s: int = 5
    created: str | None = None
    duration_s: int | None = None
    stretch: float | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidConfig(f"split must be one of {', '.join(SPLITS)}, got {self.split!r}")
        if isinstance(self.count, bool) or not isinstance(self.count, int) or self.count <= 0:
            raise InvalidConfig(f"count must be a positive integer, got {self.count!r}")
        if self.duration_s is not None and self.duration_s < self.window_s:
            raise InvalidConfig("duration_s must cover at least one window")
        if self.stretch is not None and self.stretch < 1:
            raise InvalidConfig("stretch factor must be >= 1")

    @property
    def resolved_duration(self) -> int:
        return self.duration_s if self.duration_s is not None else SPLIT_DEFAULTS[self.split][0]

    @property
    def resolved_stretch(self) -> float:
        return self.stretch if self.stretch is not None else SPLIT_DEFAULTS[self.split][1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> DatasetManifest:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"build"}
        if unknown:
            raise InvalidConfig(f"unknown manifest keys: {sorted(unknown)}")
        try:
            return cls(**{k: v for k, v in data.items() if k in known})
        except TypeError as exc:
            raise InvalidConfig(f"bad manifest: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read manifest {path}: {exc}") from None
        return cls.from_dict(data)


@dataclass(frozen=True)
class BuildResult:
    path: Path
    count: int
    attempts: int
    discarded: int
    config_digests: dict[str, str]

    @property
    def discard_rate(self) -> float:
        return self.discarded / self.attempts


def _sample(args) -> tuple[LabeledTrace, int]:
    cfg, duration_s, seed_base, index, trace_id = args
    for attempt in range(MAX_ATTEMPTS):
        seed = derive_seed(seed_base, index, attempt)
        trace = generate(cfg, duration_s, seed, id=trace_id)
        try:
            return label_trace(trace), attempt
        except SimultaneousCompletion:
            continue
    raise DiscardRateExceeded(MAX_ATTEMPTS, MAX_ATTEMPTS)


def generate_labeled(
    manifest: DatasetManifest, configs: Sequence[GeneratorConfig], jobs: int = 1
) -> tuple[list[LabeledTrace], int]:
    """All samples of a manifest in order, plus the number of discarded draws.

    Sample ``i`` comes from ``configs[i % len(configs)]`` with seed
    ``derive_seed(seed_base, i, attempt)``, attempt counting rejected draws.
    """
    if not configs:
        raise InvalidConfig("no generator configs given")
    factor = manifest.resolved_stretch
    cfgs = [stretch(c, factor) for c in configs]
    for c in cfgs:
        if c.window.window_seconds != manifest.window_s:
            raise InvalidConfig(f"config {c.name!r} uses {c.window.window_seconds} s windows, manifest {manifest.window_s} s")
    tasks = [
        (cfgs[i % len(cfgs)], manifest.resolved_duration, manifest.seed_base, i, f"{manifest.name}-{manifest.split}-{i:05d}")
        for i in range(manifest.count)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sample, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_sample(t) for t in tasks]
    return [r[0] for r in results], sum(r[1] for r in results)


def build(
    manifest: DatasetManifest,
    out_dir: str | Path,
    configs: Sequence[GeneratorConfig] | None = None,
    jobs: int = 1,
    max_discard_rate: float = MAX_DISCARD_RATE,
) -> BuildResult:
    """Generate, label and write a dataset; raises DiscardRateExceeded before writing anything.

    Collisions grow with trace length, so long splits may need a looser
    ``max_discard_rate`` than the default.
    """
    if not 0 <= max_discard_rate <= 1:
        raise ValueError("max_discard_rate must lie in [0, 1]")
    if configs is None:
        configs = load_suite(manifest.config_id)
    traces, discarded = generate_labeled(manifest, configs, jobs)
    attempts = manifest.count + discarded
    if discarded / attempts > max_discard_rate:
        raise DiscardRateExceeded(discarded, attempts, max_discard_rate)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(traces, out / TRACES_FILE)
    digests = {c.name: c.digest() for c in configs}
    record = manifest.to_dict()
    record["build"] = {
        "attempts": attempts,
        "discarded": discarded,
        "discard_rate": discarded / attempts,
        "duration_s": manifest.resolved_duration,
        "stretch": manifest.resolved_stretch,
        "configs": digests,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return BuildResult(out, manifest.count, attempts, discarded, digests)


def load_dataset(path: str | Path) -> list[LabeledTrace]:
    """Labeled traces from a dataset directory or a JSONL file."""
    p = Path(path)
    if p.is_dir():
        p = p / TRACES_FILE
    out = []
    for rec in iter_jsonl(p):
        if not isinstance(rec, LabeledTrace):
            raise CedError(f"{p}: record {rec.id!r} carries no complex-event labels")
        out.append(rec)
    return out


# --- statistics -----------------------------------------------------------


@dataclass(frozen=True)
class CeOverlap:
    """Per-class overlap summary (one row of the overlap table)."""

    pct_overlap: float
    min_types: int
    max_types: int
    max_instances: int


@dataclass
class DatasetStats:
    n_samples: int
    occurrence: dict[int, float]
    only_e0: float
    spans: dict[int, list[int]]
    overlap: list[list[int]]
    per_ce_overlap: dict[int, CeOverlap] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "occurrence": {f"e{k}": v for k, v in self.occurrence.items()},
            "only_e0": self.only_e0,
            "spans": {f"e{k}": v for k, v in self.spans.items()},
            "overlap": self.overlap,
            "per_ce_overlap": {f"e{k}": asdict(v) for k, v in self.per_ce_overlap.items()},
        }

    def occurrence_csv(self, split: str = "dataset") -> str:
        """One row in the layout of the per-split occurrence table (percentages)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", *(f"e{k}" for k in CE_IDS), "only_e0"])
        w.writerow([split, *(f"{100 * self.occurrence[k]:.1f}" for k in CE_IDS), f"{100 * self.only_e0:.1f}"])
        return buf.getvalue()

    def overlap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ce", "pct_overlap", "min", "max", "max_inst"])
        for k, row in self.per_ce_overlap.items():
            w.writerow([f"e{k}", f"{row.pct_overlap:.1f}", row.min_types, row.max_types, row.max_instances])
        return buf.getvalue()


def _intersects(a, b) -> bool:
    return a.anchor <= b.window and b.anchor <= a.window


def stats(traces: Iterable[LabeledTrace]) -> DatasetStats:
    """Occurrence, span and overlap statistics in a single pass.

    Two instances overlap when their closed [anchor, completion] intervals
    intersect. ``overlap[i][j]`` (i != j) counts samples holding an
    overlapping pair of classes i and j; the diagonal counts samples where
    two distinct instances of the same class overlap. Row and column 0 stay
    zero because e0 has no instances.
    """
    n = 0
    n_only0 = 0
    present = dict.fromkeys(CE_IDS, 0)
    spans: dict[int, list[int]] = {k: [] for k in CE_IDS}
    overlap = [[0] * N_CLASSES for _ in range(N_CLASSES)]
    with_class = dict.fromkeys(CE_IDS, 0)
    overlapping_samples = dict.fromkeys(CE_IDS, 0)
    min_types: dict[int, int | None] = dict.fromkeys(CE_IDS, None)
    max_types = dict.fromkeys(CE_IDS, 0)
    max_inst = dict.fromkeys(CE_IDS, 0)
    for lt in traces:
        n += 1
        comps = lt.completions
        classes = {c.ce_id for c in comps}
        fired = {y for y in lt.labels if y}
        if not fired:
            n_only0 += 1
        for k in fired:
            present[k] += 1
        for c in comps:
            spans[c.ce_id].append(c.span)
        pairs = set()
        partners: dict[int, set[int]] = {k: set() for k in classes}
        others: dict[int, set[int]] = {k: set() for k in classes}
        for i, a in enumerate(comps):
            for j in range(i + 1, len(comps)):
                b = comps[j]
                if not _intersects(a, b):
                    continue
                pairs.add((min(a.ce_id, b.ce_id), max(a.ce_id, b.ce_id)))
                if a.ce_id != b.ce_id:
                    partners[a.ce_id].add(b.ce_id)
                    partners[b.ce_id].add(a.ce_id)
                    others[a.ce_id].add(j)
                    others[b.ce_id].add(i)
        for i, j in pairs:
            overlap[i][j] += 1
            if i != j:
                overlap[j][i] += 1
        for k in classes:
            with_class[k] += 1
            types = len(partners[k])
            overlapping_samples[k] += types > 0
            min_types[k] = types if min_types[k] is None else min(min_types[k], types)
            max_types[k] = max(max_types[k], types)
            max_inst[k] = max(max_inst[k], len(others[k]))
    occurrence = {0: 1.0 if n else 0.0}
    occurrence.update({k: present[k] / n if n else 0.0 for k in CE_IDS})
    per_ce = {}
    for k in CE_IDS:
        pct = 100.0 * overlapping_samples[k] / with_class[k] if with_class[k] else 0.0
        per_ce[k] = CeOverlap(pct, min_types[k] or 0, max_types[k], max_inst[k])
    return DatasetStats(n, occurrence, n_only0 / n if n else 0.0, spans, overlap, per_ce)
