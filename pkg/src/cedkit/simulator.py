"""Config-driven stochastic generators of atomic-event concept traces.

A configuration describes *semantic groups* (restroom, work, meal, ...).
Each group owns a set of activities; an activity is a short sequence of
steps, each step one atomic event held for a sampled number of windows and
optionally skipped with some probability. The generator walks between
groups with weighted transitions, samples a duration for each group
session, and inside a session chains activities with weighted
sub-transitions.

Randomness comes from numpy's PCG64 bit generator seeded with the trace
seed; only uniform doubles are drawn (``Generator.random``) and every
categorical/integer draw is derived from them here, so a trace depends on
nothing but (config, duration, seed).
"""

from __future__ import annotations

import hashlib
import json
import struct
import sys
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .core import (
    DEFAULT_WINDOW,
    N_AE,
    AtomicEvent,
    CedError,
    ConceptTrace,
    ProbTrace,
    UnknownSymbol,
    WindowSpec,
    parse_ae,
    ticks,
)

SCHEMA_VERSION = 1
DEFAULT_NOISE = 0.02
DEFAULT_EXEMPT = frozenset({AtomicEvent.WASH, AtomicEvent.BRUSH_TEETH})


class InvalidConfig(CedError, ValueError):
    pass


class InvalidMatrix(CedError, ValueError):
    pass


# --- config model ---------------------------------------------------------


@dataclass(frozen=True)
class Step:
    ae: AtomicEvent
    duration_s: tuple[int, int]
    p: float = 1.0


@dataclass(frozen=True)
class Activity:
    name: str
    steps: tuple[Step, ...]


@dataclass(frozen=True)
class Group:
    name: str
    duration_s: tuple[int, int]
    activities: Mapping[str, Activity]
    start: Mapping[str, float]
    transitions: Mapping[str, Mapping[str, float]]
    once_only: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Guarantee:
    """Boost ``target_group`` once it has been absent for ``max_windows_without`` windows."""

    target_group: str
    max_windows_without: int
    boost: float = 1.0


@dataclass(frozen=True)
class GeneratorConfig:
    name: str
    groups: Mapping[str, Group]
    group_transitions: Mapping[str, Mapping[str, float]]
    initial_distribution: Mapping[str, float]
    guarantee: Guarantee | None = None
    noise_rate: float = DEFAULT_NOISE
    window: WindowSpec = DEFAULT_WINDOW
    stretch_exempt: frozenset[AtomicEvent] = DEFAULT_EXEMPT
    description: str = ""

    def __post_init__(self):
        validate(self)

    @property
    def vocabulary(self) -> tuple[AtomicEvent, ...]:
        """Atomic events the config can emit, in canonical order."""
        used = {s.ae for g in self.groups.values() for a in g.activities.values() for s in a.steps}
        return tuple(sorted(used))

    def with_noise(self, noise_rate: float) -> GeneratorConfig:
        return replace(self, noise_rate=noise_rate)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(config_to_dict(self), sort_keys=True).encode()).hexdigest()


def _check_weights(where: str, weights: Mapping[str, float], allowed) -> None:
    if not weights:
        raise InvalidConfig(f"{where}: empty weight table")
    for k, w in weights.items():
        if k not in allowed:
            raise InvalidConfig(f"{where}: unknown target {k!r}")
        if not (w >= 0) or w == float("inf"):
            raise InvalidConfig(f"{where}: weight for {k!r} must be finite and nonnegative")
    if sum(weights.values()) <= 0:
        raise InvalidConfig(f"{where}: weights sum to zero")


def _check_range(where: str, rng: tuple[int, int]) -> None:
    lo, hi = rng
    if not (0 < lo <= hi):
        raise InvalidConfig(f"{where}: duration range must satisfy 0 < min <= max, got {rng}")


def validate(cfg: GeneratorConfig) -> None:
    if not cfg.groups:
        raise InvalidConfig(f"{cfg.name}: no groups")
    if not 0 <= cfg.noise_rate <= 1:
        raise InvalidConfig(f"{cfg.name}: noise_rate outside [0, 1]")
    names = set(cfg.groups)
    _check_weights(f"{cfg.name}.initial", cfg.initial_distribution, names)
    for gname, group in cfg.groups.items():
        where = f"{cfg.name}.groups.{gname}"
        if not group.activities:
            raise InvalidConfig(f"{where}: no activities")
        _check_range(where, group.duration_s)
        acts = set(group.activities)
        _check_weights(f"{where}.start", group.start, acts)
        for aname, act in group.activities.items():
            if not act.steps:
                raise InvalidConfig(f"{where}.{aname}: no steps")
            for s in act.steps:
                _check_range(f"{where}.{aname}", s.duration_s)
                if not 0 <= s.p <= 1:
                    raise InvalidConfig(f"{where}.{aname}: step probability outside [0, 1]")
        for src, row in group.transitions.items():
            if src not in acts:
                raise InvalidConfig(f"{where}.transitions: unknown activity {src!r}")
            if row:
                _check_weights(f"{where}.transitions.{src}", row, acts)
        if not group.once_only <= acts:
            raise InvalidConfig(f"{where}.once_only names unknown activities")
        if gname not in cfg.group_transitions:
            raise InvalidConfig(f"{cfg.name}: no group transitions out of {gname!r}")
        _check_weights(f"{cfg.name}.group_transitions.{gname}", cfg.group_transitions[gname], names)
    if cfg.guarantee is not None:
        g = cfg.guarantee
        if g.target_group not in names:
            raise InvalidConfig(f"{cfg.name}.guarantee: unknown group {g.target_group!r}")
        if g.max_windows_without < 1 or g.boost < 0:
            raise InvalidConfig(f"{cfg.name}.guarantee: bad parameters")


# --- TOML loading ---------------------------------------------------------


def _range(value, where: str) -> tuple[int, int]:
    try:
        lo, hi = value
        return int(lo), int(hi)
    except (TypeError, ValueError):
        raise InvalidConfig(f"{where}: expected [min_s, max_s], got {value!r}") from None


def _ae(name: str, where: str) -> AtomicEvent:
    try:
        return parse_ae(name)
    except UnknownSymbol:
        raise InvalidConfig(f"{where}: unknown atomic event {name!r}") from None


def _activity(name: str, spec, where: str) -> Activity:
    # shorthands: `sit = [5, 30]` is a one-step activity emitting its own name;
    # `rest = { ae = "sit", s = [5, 30] }` is a one-step activity under another name
    if isinstance(spec, list):
        return Activity(name, (Step(_ae(name, where), _range(spec, where)),))
    if isinstance(spec, dict) and "ae" in spec:
        spec = {"steps": [spec]}
    if not isinstance(spec, dict) or "steps" not in spec:
        raise InvalidConfig(f"{where}: activity must be [min_s, max_s], a single step table or a table with 'steps'")
    steps = []
    for i, st in enumerate(spec["steps"]):
        w = f"{where}.steps[{i}]"
        steps.append(Step(_ae(st["ae"], w), _range(st["s"], w), float(st.get("p", 1.0))))
    return Activity(name, tuple(steps))


def config_from_dict(data: Mapping) -> GeneratorConfig:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise InvalidConfig(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    name = str(data.get("name", "unnamed"))
    try:
        groups = {}
        for gname, g in data["groups"].items():
            where = f"{name}.groups.{gname}"
            acts = {a: _activity(a, spec, f"{where}.{a}") for a, spec in g["activities"].items()}
            start = {k: float(v) for k, v in g.get("start", {a: 1.0 for a in acts}).items()}
            trans = {k: {kk: float(vv) for kk, vv in row.items()} for k, row in g.get("transitions", {}).items()}
            groups[gname] = Group(
                gname, _range(g["duration_s"], where), acts, start, trans, frozenset(g.get("once_only", ()))
            )
        guarantee = None
        if "guarantee" in data:
            gd = data["guarantee"]
            guarantee = Guarantee(str(gd["target_group"]), int(gd["max_windows_without"]), float(gd.get("boost", 1.0)))
        exempt = data.get("stretch_exempt")
        return GeneratorConfig(
            name=name,
            groups=groups,
            group_transitions={k: {kk: float(vv) for kk, vv in row.items()} for k, row in data["group_transitions"].items()},
            initial_distribution={k: float(v) for k, v in data["initial"].items()},
            guarantee=guarantee,
            noise_rate=float(data.get("noise_rate", DEFAULT_NOISE)),
            window=WindowSpec(int(data.get("window_s", 5))),
            stretch_exempt=DEFAULT_EXEMPT if exempt is None else frozenset(_ae(a, name) for a in exempt),
            description=str(data.get("description", "")),
        )
    except KeyError as exc:
        raise InvalidConfig(f"{name}: missing key {exc}") from None


def config_to_dict(cfg: GeneratorConfig) -> dict:
    def act(a: Activity):
        return {"steps": [{"ae": s.ae.symbol, "s": list(s.duration_s), "p": s.p} for s in a.steps]}

    data = {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.name,
        "description": cfg.description,
        "window_s": cfg.window.window_seconds,
        "noise_rate": cfg.noise_rate,
        "stretch_exempt": [ae.symbol for ae in sorted(cfg.stretch_exempt)],
        "initial": dict(cfg.initial_distribution),
        "groups": {
            g.name: {
                "duration_s": list(g.duration_s),
                "start": dict(g.start),
                "once_only": sorted(g.once_only),
                "activities": {a: act(v) for a, v in g.activities.items()},
                "transitions": {k: dict(v) for k, v in g.transitions.items()},
            }
            for g in cfg.groups.values()
        },
        "group_transitions": {k: dict(v) for k, v in cfg.group_transitions.items()},
    }
    if cfg.guarantee:
        data["guarantee"] = {
            "target_group": cfg.guarantee.target_group,
            "max_windows_without": cfg.guarantee.max_windows_without,
            "boost": cfg.guarantee.boost,
        }
    return data


def load_config(source: str | Path) -> GeneratorConfig:
    """Load a config from a TOML path, or by name from the bundled configs."""
    path = Path(source)
    if path.suffix == ".toml" and path.exists():
        data = path.read_bytes()
    else:
        res = resources.files("cedkit") / "configs" / f"{source}.toml"
        if not res.is_file():
            raise InvalidConfig(f"no config file or bundled config named {str(source)!r}")
        data = res.read_bytes()
    try:
        return config_from_dict(tomllib.loads(data.decode("utf-8")))
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{source}: {exc}") from None


def bundled_configs() -> list[str]:
    root = resources.files("cedkit") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml") and not p.name.startswith("_"))


DEFAULT_SUITE = (
    "restroom_work",
    "daytime",
    "meal_hygiene",
    "morning_routine",
    "breakfast",
    "office",
    "evening_routine",
    "handwashing",
    "lunch_break",
    "dental_care",
)


def load_suite(name_or_path: str | Path) -> list[GeneratorConfig]:
    """``default`` names the bundled 10-config suite; anything else is a single config."""
    if str(name_or_path) == "default":
        return [load_config(n) for n in DEFAULT_SUITE]
    return [load_config(name_or_path)]


# --- RNG helpers ----------------------------------------------------------


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts (BLAKE2b of their big-endian encoding)."""
    payload = b"".join(struct.pack(">Q", p & 0xFFFFFFFFFFFFFFFF) for p in parts)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


class Rng:
    """Uniform-double stream from PCG64 with categorical and integer draws on top."""

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def uniform(self) -> float:
        return float(self._gen.random())

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi]."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def categorical(self, weights: Sequence[float]) -> int:
        """Index drawn with probability proportional to ``weights``."""
        u = self.uniform() * sum(weights)
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return max(i for i, w in enumerate(weights) if w > 0)

    def choice(self, weights: Mapping[str, float]) -> str:
        keys = list(weights)
        return keys[self.categorical([weights[k] for k in keys])]


# --- generation -----------------------------------------------------------


class Run(NamedTuple):
    """One sampled step: ``length`` windows of ``ae`` starting at ``start``."""

    ae: AtomicEvent
    start: int
    length: int
    sampled: int
    group: str


@dataclass
class Generation:
    events: list[AtomicEvent]
    clean: list[AtomicEvent]
    runs: list[Run] = field(default_factory=list)
    groups: list[tuple[str, int, int]] = field(default_factory=list)


def _group_session(cfg, group: Group, rng: Rng, t: int, end: int, gen: Generation) -> int:
    used: set[str] = set()
    current: str | None = None
    while t < end:
        weights = None
        if current is not None and group.transitions.get(current):
            weights = dict(group.transitions[current])
        if weights is None:
            weights = dict(group.start)
        for a in used & group.once_only:
            weights[a] = 0.0
        if sum(weights.values()) <= 0:
            weights = {a: w for a, w in group.start.items() if a not in (used & group.once_only)}
            if not weights or sum(weights.values()) <= 0:
                break
        current = rng.choice(weights)
        used.add(current)
        emitted = False
        for step in group.activities[current].steps:
            if step.p < 1.0 and rng.uniform() >= step.p:
                continue
            lo, hi = (ticks(cfg.window, s) for s in step.duration_s)
            n = rng.randint(max(lo, 1), max(hi, 1))
            k = min(n, end - t)
            gen.runs.append(Run(step.ae, t, k, n, group.name))
            gen.clean.extend([step.ae] * k)
            t += k
            emitted = True
            if t >= end:
                break
        if not emitted and not any(s.p > 0 for s in group.activities[current].steps):
            break
    return t


def simulate(cfg: GeneratorConfig, duration_s: int, seed: int) -> Generation:
    """Generate one trace with run-level bookkeeping (used by :func:`generate` and tests)."""
    if duration_s < cfg.window.window_seconds:
        raise InvalidConfig(f"duration_s must be at least one window ({cfg.window.window_seconds} s)")
    rng = Rng(seed)
    T = ticks(cfg.window, duration_s)
    gen = Generation(events=[], clean=[])
    guarantee = cfg.guarantee
    since_target = 0
    t = 0
    group = rng.choice(cfg.initial_distribution)
    while t < T:
        lo, hi = (ticks(cfg.window, s) for s in cfg.groups[group].duration_s)
        end = min(t + rng.randint(max(lo, 1), max(hi, 1)), T)
        start = t
        t = _group_session(cfg, cfg.groups[group], rng, t, end, gen)
        if t == start:
            # a session that cannot emit anything would stall the walk
            raise InvalidConfig(f"{cfg.name}: group {group!r} produced no events")
        gen.groups.append((group, start, t))
        if guarantee is not None:
            since_target = 0 if group == guarantee.target_group else since_target + (t - start)
        weights = dict(cfg.group_transitions[group])
        if guarantee is not None and since_target >= guarantee.max_windows_without:
            total = sum(weights.values())
            weights[guarantee.target_group] = weights.get(guarantee.target_group, 0.0) + guarantee.boost * total
        group = rng.choice(weights)
    gen.events = _add_noise(gen.clean, cfg, rng)
    return gen


def _add_noise(clean: Sequence[AtomicEvent], cfg: GeneratorConfig, rng: Rng) -> list[AtomicEvent]:
    vocab = cfg.vocabulary
    if cfg.noise_rate <= 0 or len(vocab) < 2:
        return list(clean)
    out = []
    for x in clean:
        if rng.uniform() < cfg.noise_rate:
            others = [v for v in vocab if v != x]
            x = others[rng.randint(0, len(others) - 1)]
        out.append(x)
    return out


def generate(cfg: GeneratorConfig, duration_s: int, seed: int, id: str | None = None) -> ConceptTrace:
    """Trace of exactly ``ceil(duration_s / W)`` windows, determined by (cfg, duration_s, seed)."""
    gen = simulate(cfg, duration_s, seed)
    return ConceptTrace(
        id=id if id is not None else f"{cfg.name}-{seed:016x}",
        events=tuple(gen.events),
        window=cfg.window,
        seed=seed,
        generator_tag=cfg.name,
    )


def generate_many(
    configs: Sequence[GeneratorConfig], count: int, duration_s: int, seed: int, prefix: str = "trace"
) -> Iterator[ConceptTrace]:
    """Round-robin over ``configs``; trace ``i`` uses seed ``derive_seed(seed, i)``."""
    for i in range(count):
        cfg = configs[i % len(configs)]
        yield generate(cfg, duration_s, derive_seed(seed, i), id=f"{prefix}-{i:05d}")


# --- noisy classifier channel ---------------------------------------------


def _check_confusion(confusion) -> np.ndarray:
    m = np.asarray(confusion, dtype=float)
    if m.shape != (N_AE, N_AE) or not np.all(np.isfinite(m)) or np.any(m < 0):
        raise InvalidMatrix("confusion must be a nonnegative 9x9 matrix")
    if np.abs(m.sum(axis=1) - 1).max() > 1e-9:
        raise InvalidMatrix("confusion rows must sum to 1")
    return m


def uniform_confusion() -> np.ndarray:
    m = np.full((N_AE, N_AE), 1.0 / (N_AE - 1))
    np.fill_diagonal(m, 0.0)
    return m


def corrupt(
    trace: ConceptTrace, accuracy: float, seed: int, confusion=None
) -> tuple[ProbTrace, ConceptTrace]:
    """Simulated atomic-event classifier.

    Each window keeps its symbol with probability ``accuracy``; otherwise the
    symbol is replaced by a draw from the confusion row of the true symbol
    (default: uniform over the other eight). The returned ProbTrace is the
    posterior over the true symbol given the observed one under a uniform
    prior, so it peaks on the observed symbol whenever accuracy > 1/9; the
    returned ConceptTrace holds the observed symbols.
    """
    if not 0 <= accuracy <= 1:
        raise ValueError("accuracy must lie in [0, 1]")
    m = uniform_confusion() if confusion is None else _check_confusion(confusion)
    # two uniforms per window regardless of the outcome, so that for a fixed
    # seed the windows flipped at a lower error rate stay flipped at higher ones
    u = np.random.Generator(np.random.PCG64(seed)).random((len(trace), 2))
    cdf = np.cumsum(m, axis=1)
    observed = []
    for x, (u_flip, u_sym) in zip(trace.events, u):
        if u_flip >= accuracy:
            row = cdf[int(x)]
            k = int(np.searchsorted(row, u_sym * row[-1], side="right"))
            x = AtomicEvent(min(k, N_AE - 1))
        observed.append(x)
    # likelihood[s, o] = P(observe o | true s)
    likelihood = accuracy * np.eye(N_AE) + (1 - accuracy) * m
    obs = np.array([int(x) for x in observed])
    post = likelihood[:, obs].T
    post = post / post.sum(axis=1, keepdims=True)
    ptrace = ProbTrace(trace.id, tuple(map(tuple, post)), trace.window, seed, trace.generator_tag)
    return ptrace, ConceptTrace(trace.id, tuple(observed), trace.window, seed, trace.generator_tag)


# --- OOD stretching -------------------------------------------------------


def _scale(rng: tuple[int, int], factor: Fraction) -> tuple[int, int]:
    return tuple(max(1, int(round(v * factor))) for v in rng)  # type: ignore[return-value]


def stretch(cfg: GeneratorConfig, factor: float | Fraction) -> GeneratorConfig:
    """Longer activities and wider gaps: scale group and step durations by ``factor``.

    Steps emitting an event in ``cfg.stretch_exempt`` (by default wash and
    brush_teeth, whose durations carry rule thresholds) keep their ranges.
    """
    factor = Fraction(factor).limit_denominator(1000)
    if factor < 1:
        raise ValueError("stretch factor must be >= 1")
    if factor == 1:
        return cfg
    groups = {}
    for gname, g in cfg.groups.items():
        acts = {
            a: Activity(
                a,
                tuple(
                    s if s.ae in cfg.stretch_exempt else replace(s, duration_s=_scale(s.duration_s, factor))
                    for s in act.steps
                ),
            )
            for a, act in g.activities.items()
        }
        groups[gname] = replace(g, duration_s=_scale(g.duration_s, factor), activities=acts)
    guarantee = cfg.guarantee
    if guarantee is not None:
        guarantee = replace(guarantee, max_windows_without=int(round(guarantee.max_windows_without * factor)))
    return replace(cfg, name=f"{cfg.name}@x{factor}", groups=groups, guarantee=guarantee)

