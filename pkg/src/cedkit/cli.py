"""Command-line entry point: ``cedkit <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a data or
configuration error. Every file output gets a ``<output>.run.json``
record next to it (``run.json`` inside directory outputs).
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Callable, Iterable, Iterator, Sequence

import numpy as np

from . import __version__
from .core import CedError, ConceptTrace, FormatError, LabeledTrace, ProbTrace, dumps, iter_jsonl
from .dataset import MANIFEST_FILE, MAX_DISCARD_RATE, DatasetManifest, build, load_dataset, stats
from .eval import DIVISION_RULES, curve_csv, degradation_curve, f1_report
from .fsm import SimultaneousCompletion, detect_labels, label_trace
from .probfsm import DEFAULT_THRESHOLD, detect_prob
from .simulator import corrupt, derive_seed, generate, load_suite, stretch

SEED_ENV = "CEDKIT_SEED"
CHUNK = 256


class UsageError(Exception):
    pass


@dataclass
class RunRecord:
    subcommand: str
    argv: list[str]
    config_hash: str | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    wall_time_s: float = 0.0

    def write(self, output: str | Path) -> None:
        out = Path(output)
        path = out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- helpers --------------------------------------------------------------


@contextmanager
def _open_out(path: str) -> Iterator[IO[str]]:
    if path == "-":
        yield sys.stdout
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yield fh


def _records(path: str) -> Iterator:
    if path == "-":
        yield from iter_jsonl(sys.stdin)
    else:
        yield from iter_jsonl(path)


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        raise UsageError(f"no seed given: pass --seed or set {SEED_ENV}")
    try:
        return int(env, 0)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _prob(text: str) -> float:
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return value


def _threshold(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError("threshold must lie in (0, 1]")
    return value


def _stretch(text: str) -> float:
    value = float(text)
    if not value >= 1:
        raise argparse.ArgumentTypeError("stretch factor must be >= 1")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _suite_hash(configs) -> str:
    return hashlib.sha256("".join(c.digest() for c in configs).encode()).hexdigest()


def _file_hash(path: str) -> str | None:
    if path == "-" or not Path(path).is_file():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _ordered_map(fn: Callable, items: Iterable, jobs: int) -> Iterator:
    """``map`` that keeps input order and, with jobs > 1, works in bounded chunks."""
    if jobs <= 1:
        yield from map(fn, items)
        return
    it = iter(items)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        while chunk := list(itertools.islice(it, CHUNK * jobs)):
            yield from pool.map(fn, chunk, chunksize=CHUNK)


def _prediction_record(rid: str, labels: Sequence[int], window_s: int, seed: int, gen: str) -> str:
    return json.dumps(
        {"id": rid, "window_s": window_s, "ce": [int(y) for y in labels], "seed": seed, "gen": gen},
        separators=(",", ":"),
    )


def _read_predictions(path: str) -> dict[str, list[int]]:
    preds: dict[str, list[int]] = {}
    fh = sys.stdin if path == "-" else open(path, encoding="utf-8")
    try:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid, labels = str(rec["id"]), [int(y) for y in rec["ce"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: not a prediction record ({exc})") from None
            if rid in preds:
                raise FormatError(f"{path}:{lineno}: duplicate trace id {rid!r}")
            preds[rid] = labels
    finally:
        if fh is not sys.stdin:
            fh.close()
    return preds


# --- per-record workers (module level so they pickle) ---------------------


def _label_one(item):
    rec, on_conflict = item
    trace = rec.trace if isinstance(rec, LabeledTrace) else rec
    if not isinstance(trace, ConceptTrace):
        raise FormatError(f"record {rec.id!r}: label needs atomic-event traces")
    try:
        return dumps(label_trace(trace))
    except SimultaneousCompletion:
        if on_conflict == "error":
            raise
        if on_conflict == "skip":
            return None
        labels = detect_labels(trace)
        return dumps(LabeledTrace(trace, labels))


def _detect_one(item):
    rec, threshold = item
    if isinstance(rec, LabeledTrace):
        rec = rec.trace
    ptrace = rec if isinstance(rec, ProbTrace) else ProbTrace.one_hot(rec)
    labels = detect_prob(ptrace, threshold)
    return _prediction_record(ptrace.id, labels, ptrace.window.window_seconds, ptrace.seed, ptrace.generator_tag)


def _generate_one(item):
    cfg, duration_s, seed, trace_id = item
    return dumps(generate(cfg, duration_s, seed, id=trace_id))


# --- subcommands ----------------------------------------------------------


def cmd_generate(args, rec: RunRecord) -> None:
    seed = _seed(args)
    configs = load_suite(args.config)
    if args.noise is not None:
        configs = [c.with_noise(args.noise) for c in configs]
    configs = [stretch(c, args.stretch) for c in configs]
    rec.config_hash = _suite_hash(configs)
    rec.seeds = {"seed": seed}
    items = (
        (configs[i % len(configs)], args.duration_s, derive_seed(seed, i), f"{args.prefix}-{i:05d}")
        for i in range(args.count)
    )
    with _open_out(args.out) as out:
        for line in _ordered_map(_generate_one, items, args.jobs):
            out.write(line + "\n")


def cmd_corrupt(args, rec: RunRecord) -> None:
    seed = _seed(args)
    rec.seeds = {"seed": seed}
    confusion = None
    if args.confusion:
        try:
            confusion = np.asarray(json.loads(Path(args.confusion).read_text(encoding="utf-8")), dtype=float)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            raise FormatError(f"cannot read confusion matrix: {exc}") from None
    accuracy = 1.0 - args.noise
    with _open_out(args.out) as out, _open_out(args.observed) if args.observed else _null() as obs_out:
        for i, r in enumerate(_records(args.input)):
            trace = r.trace if isinstance(r, LabeledTrace) else r
            if not isinstance(trace, ConceptTrace):
                raise FormatError(f"record {r.id!r}: corrupt needs atomic-event traces")
            ptrace, observed = corrupt(trace, accuracy, derive_seed(seed, i), confusion)
            out.write(dumps(ptrace) + "\n")
            if obs_out is not None:
                obs_out.write(dumps(observed) + "\n")


@contextmanager
def _null():
    yield None


def cmd_label(args, rec: RunRecord) -> None:
    rec.config_hash = _file_hash(args.input)
    items = ((r, args.on_conflict) for r in _records(args.input))
    with _open_out(args.out) as out:
        for line in _ordered_map(_label_one, items, args.jobs):
            if line is not None:
                out.write(line + "\n")


def cmd_detect(args, rec: RunRecord) -> None:
    rec.config_hash = _file_hash(args.input)
    items = ((r, args.threshold) for r in _records(args.input))
    with _open_out(args.out) as out:
        for line in _ordered_map(_detect_one, items, args.jobs):
            out.write(line + "\n")


def cmd_build(args, rec: RunRecord) -> None:
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
    else:
        if args.count is None:
            raise UsageError("build needs --manifest or --count")
        manifest = DatasetManifest(
            name=args.name, split=args.split, count=args.count, config_id=args.config or "default",
            seed_base=_seed(args),
        )
    configs = load_suite(args.config or manifest.config_id)
    rec.config_hash = _suite_hash(configs)
    rec.seeds = {"seed_base": manifest.seed_base}
    result = build(manifest, args.out, configs, jobs=args.jobs, max_discard_rate=args.max_discard_rate)
    print(
        f"wrote {result.count} traces to {result.path} "
        f"({result.discarded} discarded, rate {result.discard_rate:.2%})",
        file=sys.stderr,
    )


def cmd_stats(args, rec: RunRecord) -> None:
    rec.config_hash = _file_hash(str(Path(args.input) / MANIFEST_FILE)) if Path(args.input).is_dir() else _file_hash(args.input)
    st = stats(load_dataset(args.input))
    if args.format == "json":
        text = json.dumps(st.to_dict(), indent=2) + "\n"
    else:
        text = st.occurrence_csv(args.split_name) + "\n" + st.overlap_csv()
    with _open_out(args.out) as out:
        out.write(text)


def cmd_eval(args, rec: RunRecord) -> None:
    truth = load_dataset(args.truth)
    preds = _read_predictions(args.pred)
    rec.config_hash = _file_hash(args.truth)
    report = f1_report(preds, truth, division=args.division)
    text = json.dumps(report.to_dict(), indent=2) + "\n" if args.format == "json" else report.to_csv()
    with _open_out(args.out) as out:
        out.write(text)


def cmd_curve(args, rec: RunRecord) -> None:
    seed = _seed(args)
    rec.seeds = {"seed": seed}
    rec.config_hash = _file_hash(args.input)
    dataset = load_dataset(args.input)
    points = degradation_curve(dataset, args.noise, args.threshold, seed)
    if args.format == "json":
        text = json.dumps([asdict(p) for p in points], indent=2) + "\n"
    else:
        text = curve_csv(points)
    with _open_out(args.out) as out:
        out.write(text)


# --- parser ---------------------------------------------------------------


def _noise_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None
    if not values or any(not 0 <= v <= 1 for v in values):
        raise argparse.ArgumentTypeError("noise levels must lie in [0, 1]")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cedkit", description="Complex-event traces: generate, label, detect, evaluate.")
    parser.add_argument("--version", action="version", version=f"cedkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(func=fn)
        return p

    def seed_opt(p):
        p.add_argument("--seed", type=_u64, help=f"64-bit seed (falls back to ${SEED_ENV})")

    def jobs_opt(p):
        p.add_argument("--jobs", type=_positive, default=1, help="worker processes (output order is unaffected)")

    p = add("generate", cmd_generate, "Sample atomic-event traces from a generator config.")
    p.add_argument("--config", default="default", help="config file, bundled config name, or 'default' suite")
    p.add_argument("--count", type=_positive, default=1)
    p.add_argument("--duration-s", type=_positive, default=300)
    p.add_argument("--noise", type=_prob, help="override the configs' per-window noise rate")
    p.add_argument("--stretch", type=_stretch, default=1.0, help="duration stretch factor (>= 1)")
    p.add_argument("--prefix", default="trace", help="trace id prefix")
    p.add_argument("--out", default="-")
    seed_opt(p)
    jobs_opt(p)

    p = add("corrupt", cmd_corrupt, "Pass traces through a simulated atomic-event classifier.")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--noise", type=_prob, default=0.05, help="classifier error rate (1 - accuracy)")
    p.add_argument("--confusion", help="JSON 9x9 row-stochastic confusion matrix")
    p.add_argument("--out", default="-", help="probabilistic traces")
    p.add_argument("--observed", help="also write the argmax symbol traces here")
    seed_opt(p)

    p = add("label", cmd_label, "Label atomic-event traces with the complex-event monitors.")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default="-")
    p.add_argument(
        "--on-conflict", choices=("error", "skip", "lowest"), default="error",
        help="simultaneous completions: fail, drop the trace, or keep the lowest class id",
    )
    jobs_opt(p)

    p = add("detect", cmd_detect, "Detect complex events from probabilistic (or symbol) traces.")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    jobs_opt(p)

    p = add("build", cmd_build, "Build a labeled dataset directory.")
    p.add_argument("--manifest", help="manifest JSON; otherwise --count/--split/--seed describe it")
    p.add_argument("--config", help="config file or bundled name (overrides the manifest's config_id)")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="dataset")
    p.add_argument("--split", default="train")
    p.add_argument("--count", type=_positive)
    p.add_argument(
        "--max-discard-rate", type=_prob, default=MAX_DISCARD_RATE,
        help="fail if a larger share of draws is rejected for simultaneous completions",
    )
    seed_opt(p)
    jobs_opt(p)

    p = add("stats", cmd_stats, "Occurrence, span and overlap statistics of a labeled dataset.")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--split-name", default="dataset", help="row name in the CSV occurrence table")

    p = add("eval", cmd_eval, "Window-level F1 of predictions against labeled traces.")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--division", choices=DIVISION_RULES, default="exclude")

    p = add("curve", cmd_curve, "F1 of both symbolic detectors as classifier noise grows.")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--noise", type=_noise_list, default=[0.0, 0.05, 0.1, 0.2])
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", default="-")
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    seed_opt(p)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        rec = RunRecord(args.command, argv, started=datetime.now(timezone.utc).isoformat())
        t0 = time.perf_counter()
        args.func(args, rec)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (CedError, OSError, ValueError) as exc:
        print(f"cedkit: error: {exc}", file=sys.stderr)
        return 2
    rec.wall_time_s = round(time.perf_counter() - t0, 6)
    out = getattr(args, "out", "-")
    if out != "-":
        rec.write(out)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
