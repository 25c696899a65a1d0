"""Benchmark harness: run strategies over prompt sets and emit reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import __version__
from .bandit import DEFAULT_LAMBDA_GAMMA, UCBTreeSearch
from .engine import GenerationConfig, RunMetrics, Strategy, generate
from .errors import InvalidConfigError, SpecDraftError
from .models import Model, load_model
from .rng import RUN, derive_seed
from .tree import TreeConfig
from .verify import Mode

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "experiment_id",
    "strategy",
    "prompt_idx",
    "rep",
    "committed",
    "forward_passes",
    "acceptance_length",
    "throughput",
    "wall_time_s",
)
FORMATS = ("csv", "json", "plotdata")


def load_prompts(source: str, vocab_size: int) -> list[list[int]]:
    """Read a prompt file (one space-separated id list per line) or ``synthetic:SEED:COUNT:LEN``."""
    if source.startswith("synthetic:"):
        try:
            _, seed, count, length = source.split(":")
            seed, count, length = int(seed), int(count), int(length)
        except ValueError:
            raise InvalidConfigError(f"bad synthetic prompt source {source!r}") from None
        if count < 1 or length < 0:
            raise InvalidConfigError("synthetic prompts need count >= 1 and length >= 0")
        rng = np.random.default_rng(seed)
        return rng.integers(0, vocab_size, size=(count, length)).tolist()
    try:
        lines = Path(source).read_text().splitlines()
    except OSError as exc:
        raise InvalidConfigError(f"cannot read prompt file {source}: {exc}") from exc
    try:
        prompts = [[int(t) for t in line.split()] for line in lines if line.strip()]
    except ValueError:
        raise InvalidConfigError(f"prompt file {source} has a non-integer token") from None
    if not prompts:
        raise InvalidConfigError(f"prompt file {source} is empty")
    return prompts


@dataclass
class ExperimentSpec:
    target: Union[str, Model]
    drafter: Union[str, Model]
    prompts: Union[str, Sequence[Sequence[int]]]
    strategies: list[Strategy]
    mode: Mode = Mode.SAMPLING
    max_new_tokens: int = 64
    stop_tokens: tuple[int, ...] = ()
    repetitions: int = 1
    seed: int = 0
    experiment_id: str = "exp"
    no_timing: bool = False
    threads: int = 0  # 0: read SPECDRAFT_THREADS, default 1
    carry_bandit: bool = False  # share bandit statistics across queries of a row

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        if self.repetitions < 1:
            raise InvalidConfigError("repetitions must be >= 1")
        if self.max_new_tokens < 1:
            raise InvalidConfigError("max_new_tokens must be >= 1")

    def resolve_models(self) -> tuple[Model, Model]:
        target = load_model(self.target) if isinstance(self.target, (str, Path)) else self.target
        drafter = load_model(self.drafter) if isinstance(self.drafter, (str, Path)) else self.drafter
        return target, drafter

    def resolve_prompts(self, vocab_size: int) -> list[list[int]]:
        if isinstance(self.prompts, str):
            return load_prompts(self.prompts, vocab_size)
        return [list(map(int, p)) for p in self.prompts]

    def thread_count(self) -> int:
        if self.threads:
            return self.threads
        try:
            return max(1, int(os.environ.get("SPECDRAFT_THREADS", "1")))
        except ValueError:
            return 1


@dataclass
class RunRow:
    prompt_idx: int
    rep: int
    seed: int
    committed: int
    forward_passes: int
    acceptance_length: float
    throughput: float
    wall_time_s: float
    arm_counts: list[int] = field(default_factory=list)

    @classmethod
    def from_metrics(cls, prompt_idx: int, rep: int, seed: int, m: RunMetrics, n_arms: int, no_timing: bool) -> "RunRow":
        return cls(
            prompt_idx,
            rep,
            seed,
            m.committed_total,
            m.target_forward_passes,
            m.acceptance_length,
            0.0 if no_timing else m.throughput,
            0.0 if no_timing else m.wall_time_s,
            m.arm_counts(n_arms),
        )


@dataclass
class StrategyRow:
    strategy: str
    runs: list[RunRow] = field(default_factory=list)
    error: str | None = None
    acceptance_mean: float = 0.0
    acceptance_std: float = 0.0
    throughput_mean: float = 0.0
    throughput_std: float = 0.0
    arm_counts: list[int] = field(default_factory=list)

    def aggregate(self) -> "StrategyRow":
        if self.runs:
            acc = np.array([r.acceptance_length for r in self.runs])
            thr = np.array([r.throughput for r in self.runs])
            self.acceptance_mean, self.acceptance_std = float(acc.mean()), float(acc.std())
            self.throughput_mean, self.throughput_std = float(thr.mean()), float(thr.std())
            self.arm_counts = [int(x) for x in np.sum([r.arm_counts for r in self.runs], axis=0)]
        return self

    @property
    def committed_total(self) -> int:
        return sum(r.committed for r in self.runs)

    @property
    def forward_passes(self) -> int:
        return sum(r.forward_passes for r in self.runs)

    @property
    def pooled_acceptance_length(self) -> float:
        return self.committed_total / self.forward_passes if self.forward_passes else 0.0


@dataclass
class ResultRecord:
    experiment_id: str
    rows: list[StrategyRow]
    environment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ResultRecord":
        rows = []
        for row in doc["rows"]:
            row = dict(row)
            row["runs"] = [RunRow(**r) for r in row["runs"]]
            rows.append(StrategyRow(**row))
        return cls(doc["experiment_id"], rows, dict(doc.get("environment", {})))

    def row(self, strategy: str) -> StrategyRow:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)

    @property
    def errored(self) -> list[StrategyRow]:
        return [r for r in self.rows if r.error is not None]


def environment_stamp() -> dict:
    clock = time.get_clock_info("perf_counter")
    return {
        "build": f"specdraft-{__version__}",
        "clock_resolution_s": clock.resolution,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def run_seed(master: int, prompt_idx: int, rep: int) -> int:
    # strategy index is deliberately excluded: strategies see matched seeds
    return derive_seed(master, RUN, prompt_idx, rep)


def _run_strategy(spec: ExperimentSpec, strategy: Strategy, target: Model, drafter: Model, prompts) -> StrategyRow:
    if spec.no_timing and strategy.lambda_gamma == "auto":
        strategy = replace(strategy, lambda_gamma=DEFAULT_LAMBDA_GAMMA)
    row = StrategyRow(str(strategy))
    jobs = [(i, rep) for i in range(len(prompts)) for rep in range(spec.repetitions)]

    carry = spec.carry_bandit and strategy.kind == "bandit"

    def one(job, search=None):
        i, rep = job
        seed = run_seed(spec.seed, i, rep)
        cfg = GenerationConfig(strategy, spec.mode, spec.max_new_tokens, spec.stop_tokens, seed)
        _, metrics = generate(target, drafter, prompts[i], cfg, search)
        return RunRow.from_metrics(i, rep, seed, metrics, len(strategy.arms), spec.no_timing)

    try:
        threads = spec.thread_count()
        if carry:
            # shared state makes the order matter: run queries serially in (prompt, rep) order
            search = UCBTreeSearch(strategy.arms, strategy.lambda_ucb, strategy.lambda_gamma)
            runs = [one(j, search) for j in jobs]
        elif threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                runs = list(pool.map(one, jobs))
        else:
            runs = [one(j) for j in jobs]
    except SpecDraftError as exc:
        log.warning("strategy %s failed: %s", strategy, exc)
        row.error = f"{type(exc).__name__}: {exc}"
        return row
    row.runs = sorted(runs, key=lambda r: (r.prompt_idx, r.rep))
    return row.aggregate()


def run_experiment(spec: ExperimentSpec) -> ResultRecord:
    """Run every strategy of ``spec`` over the same prompts and per-run seeds.

    A strategy that fails is kept as an errored row; the others are unaffected.
    Model and prompt problems raise before anything runs.
    """
    target, drafter = spec.resolve_models()
    if target.vocab_size != drafter.vocab_size:
        raise InvalidConfigError("target and drafter vocabularies differ")
    if not spec.strategies:
        raise InvalidConfigError("experiment has no strategies")
    prompts = spec.resolve_prompts(target.vocab_size)
    rows = [_run_strategy(spec, s, target, drafter, prompts) for s in spec.strategies]
    return ResultRecord(spec.experiment_id, rows, environment_stamp())


def sweep_tree_configs(spec: ExperimentSpec, configs: Sequence[TreeConfig]) -> ResultRecord:
    if not configs:
        raise InvalidConfigError("sweep needs at least one config")
    return run_experiment(replace(spec, strategies=[Strategy.tree(c) for c in configs]))


def compare_fixed_vs_bandit(
    spec: ExperimentSpec,
    fixed: TreeConfig,
    arms: Sequence[TreeConfig],
    lambda_ucb: float = 1.0,
    lambda_gamma="auto",
) -> ResultRecord:
    """Two rows on identical prompts and seeds: ``tree:fixed`` then the bandit over ``arms``."""
    strategies = [Strategy.tree(fixed), Strategy.bandit(list(arms), lambda_ucb, lambda_gamma)]
    return run_experiment(replace(spec, strategies=strategies))


def _csv_text(record: ResultRecord) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in record.rows:
        for r in row.runs:
            writer.writerow(
                [
                    record.experiment_id,
                    row.strategy,
                    r.prompt_idx,
                    r.rep,
                    r.committed,
                    r.forward_passes,
                    repr(r.acceptance_length),
                    repr(r.throughput),
                    repr(r.wall_time_s),
                ]
            )
    return buf.getvalue()


def plot_data(record: ResultRecord) -> dict:
    """(x, y, label) triples for throughput-vs-config and acceptance-vs-config charts."""
    ok = [r for r in record.rows if r.error is None]
    return {
        "throughput_vs_config": [[r.strategy, r.throughput_mean, "throughput"] for r in ok],
        "acceptance_vs_config": [[r.strategy, r.acceptance_mean, "acceptance_length"] for r in ok],
    }


def render_report(record: ResultRecord, fmt: str) -> str:
    if fmt == "csv":
        return _csv_text(record)
    if fmt == "json":
        return json.dumps(record.to_dict(), indent=2)
    if fmt == "plotdata":
        return json.dumps(plot_data(record), indent=2)
    raise InvalidConfigError(f"unknown report format {fmt!r}")


def emit_report(record: ResultRecord, fmt: str, path: Union[str, Path]) -> Path:
    text = render_report(record, fmt)
    path = Path(path)
    # write-then-rename so a failed write never leaves a partial report
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        tmp.replace(path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise
    return path


def load_record(path: Union[str, Path]) -> ResultRecord:
    return ResultRecord.from_dict(json.loads(Path(path).read_text()))
