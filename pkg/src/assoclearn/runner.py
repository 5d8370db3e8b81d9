"""Sequential-task training, evaluation and the experiment drivers.

Methods
-------
``tl``      fine-tune on each task in turn (lower bound)
``jl``      stage ``i`` trains on the union of tasks ``1..i`` (upper bound)
``ewc``     ``tl`` plus the Fisher-weighted anchor penalty
``replay``  ``tl`` plus a buffer of raw past-task pairs mixed into batches
``assoc``   ``tl`` plus inverse-mapped association batches and the anchor penalty

An ablation mask (subset of ``mse, adv, feature, heuristics``) switches the
individual components of ``assoc`` on and off.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .continual import FisherSnapshot, LossWeights, estimate_diag_fisher, total_loss
from .data import SUITE_METRIC, SUITE_TASKS, SUITES, TaskSpec, gen_task, make_rng, stream_seed
from .heuristics import (INDEX_HEADER, MappingMemory, association_count, save_memory, store_mapping,
                         synthesize_association_batch, train_mapper)
from .imageio import MANIFEST_NAME, load_split, save_task
from .metrics import batch_metric
from .models import ArchSpec, discriminator_logit, generator_forward, init_params
from .optim import OptimState, adam_update
from .params import encode_container

log = logging.getLogger(__name__)

METHODS = ("tl", "jl", "ewc", "replay", "assoc")
COMPONENTS = ("mse", "adv", "feature", "heuristics")
METHOD_MASKS = {
    "tl": frozenset({"mse", "adv"}),
    "jl": frozenset({"mse", "adv"}),
    "ewc": frozenset({"mse", "adv", "feature"}),
    "replay": frozenset({"mse", "adv"}),
    "assoc": frozenset(COMPONENTS),
}
# Table-ordered ablation ladder: backbone, +mse, +adv, +feature, +heuristics, full
ABLATION_LADDER = (
    ("backbone", ()),
    ("+mse", ("mse",)),
    ("+adv", ("mse", "adv")),
    ("+feature", ("mse", "adv", "feature")),
    ("+heuristics", ("mse", "adv", "heuristics")),
    ("full", ("mse", "adv", "feature", "heuristics")),
)

METRICS_COLUMNS = ("run_id", "method", "suite", "tasks_trained", "eval_task", "epoch", "psnr_db",
                   "ssim", "l_mse", "l_adv", "l_feature", "wall_s", "stored_bytes")
FORGETTING_COLUMNS = ("run_id", "method", "suite", "tasks_trained", "epoch", "eval_task", "psnr_db", "ssim")
ACCOUNTING_COLUMNS = ("run_id", "method", "suite", "tasks_trained", "task_id", "model_bytes",
                      "memory_bytes", "snapshot_bytes", "replay_bytes", "stored_bytes", "train_s",
                      "mapper_s", "fisher_s")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    suite: str = "dfd_like"
    task_order: tuple[int, ...] = ()
    method: str = "assoc"
    methods: tuple[str, ...] = METHODS
    epochs: int = 30
    batch_size: int = 16
    n_train: int = 200
    n_test: int = 50
    lr: float = 5e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    reset_optim: bool = True  # fresh Adam moments at every task boundary
    lambda_adv: float = 1e-3
    lambda_prime: float = 5.0
    assoc_ratio: float = -1.0  # negative: schedule min((i-1)/i, assoc_cap)
    assoc_cap: float = 0.5
    fisher_samples: int = 256
    accumulate_fisher: bool = False
    ablation: tuple[str, ...] | None = None
    width: int = 8
    depth: int = 2
    mapper_steps: int = 300
    mapper_batch: int = 16
    mapper_lr: float = 2e-3
    replay_per_task: int = 50
    seed_data: int = 0
    seed_init: int = 0
    seed_train: int = 0
    seed_controller: int = 0
    data_dir: str = ""
    out_dir: str = "runs"
    run_id: str = ""
    record_wall_time: bool = False

    def __post_init__(self):
        validate(self)

    @property
    def order(self) -> tuple[int, ...]:
        return self.task_order or tuple(range(1, SUITE_TASKS[self.suite] + 1))

    @property
    def mask(self) -> frozenset[str]:
        return METHOD_MASKS[self.method] if self.ablation is None else frozenset(self.ablation)

    @property
    def channels(self) -> int:
        return 1 if self.suite == "dfd_like" else 3

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec(channels=self.channels, width=self.width, depth=self.depth)

    @property
    def label(self) -> str:
        return self.run_id or f"{self.method}-s{self.seed_train}"

    def feature_active(self) -> bool:
        return "feature" in self.mask and self.lambda_prime > 0

    def ratio_at(self, stage: int) -> float:
        if stage <= 1:
            return 0.0
        if self.assoc_ratio >= 0:
            return self.assoc_ratio
        return min((stage - 1) / stage, self.assoc_cap)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed_data=seed, seed_init=seed, seed_train=seed,
                                   seed_controller=seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def behavior_key(self) -> tuple:
        """Every field that can influence numbers; labels and paths excluded."""
        skip = {"run_id", "out_dir", "methods", "record_wall_time", "ablation", "method"}
        fields = tuple((f.name, getattr(self, f.name)) for f in dataclasses.fields(self) if f.name not in skip)
        kind = "jl" if self.method == "jl" else "replay" if self.method == "replay" else "seq"
        mask = self.mask if self.feature_active() else self.mask - {"feature"}
        lp = self.lambda_prime if self.feature_active() else 0.0
        return (kind, tuple(sorted(mask)), lp, self.order) + tuple(
            (k, v) for k, v in fields if k not in ("lambda_prime", "task_order"))


def validate(cfg: RunConfig) -> None:
    if cfg.suite not in SUITES:
        raise ConfigError(f"suite must be one of {SUITES}, got {cfg.suite!r}")
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg.method!r}")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}")
    n_tasks = SUITE_TASKS[cfg.suite]
    order = cfg.order
    if sorted(order) != sorted(set(order)) or not set(order) <= set(range(1, n_tasks + 1)):
        raise ConfigError(f"task_order must list distinct tasks from 1..{n_tasks}, got {order}")
    if cfg.ablation is not None:
        unknown = set(cfg.ablation) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"unknown ablation components {sorted(unknown)}")
        extra = set(cfg.ablation) - METHOD_MASKS[cfg.method]
        if extra:
            raise ConfigError(f"method {cfg.method!r} cannot enable {sorted(extra)}")
    for name in ("epochs", "batch_size", "n_train", "n_test", "fisher_samples", "mapper_steps",
                 "mapper_batch", "width", "depth"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if cfg.replay_per_task < 0 or cfg.replay_per_task > cfg.n_train:
        raise ConfigError("replay_per_task must lie in [0, n_train]")
    if cfg.assoc_ratio > 1 or not 0 <= cfg.assoc_cap <= 1:
        raise ConfigError("association ratio and cap must be at most 1")
    if cfg.lambda_adv < 0 or cfg.lambda_prime < 0:
        raise ConfigError("loss weights must be non-negative")


_TUPLE_INT = ("task_order",)
_TUPLE_STR = ("methods", "ablation")


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if name in _TUPLE_INT:
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if name in _TUPLE_STR:
        if name == "ablation" and raw.lower() in ("", "none", "default"):
            return None if raw.lower() == "default" else ()
        return tuple(v for v in raw.replace(" ", "").replace("+", ",").split(",") if v)
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    defaults = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(key, raw, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "ablation":
            v = "default" if v is None else ",".join(v) or "none"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data access with an audit trail


@dataclass
class AccessRecord:
    stage: int
    task_id: int
    split: str


class TaskSource:
    """Serves task splits, from disk when ``data_dir`` is set, and logs every read."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.log: list[AccessRecord] = []
        self.stage = 0
        self._generated: dict[int, TaskSpec] = {}

    def _task(self, task_id: int) -> TaskSpec:
        if task_id not in self._generated:
            self._generated[task_id] = gen_task(self.cfg.suite, task_id, self.cfg.n_train,
                                                self.cfg.seed_data, self.cfg.n_test)
        return self._generated[task_id]

    def read(self, task_id: int, split: str) -> tuple[np.ndarray, np.ndarray]:
        self.log.append(AccessRecord(self.stage, task_id, split))
        if self.cfg.data_dir:
            return load_split(Path(self.cfg.data_dir) / f"task{task_id}", split)
        t = self._task(task_id)
        return (t.x_train, t.y_train) if split == "train" else (t.x_test, t.y_test)


def past_task_reads(log: Iterable[AccessRecord], order: Sequence[int]) -> list[AccessRecord]:
    """Training-split reads of a task after the stage in which it was trained."""
    stage_of = {task: i for i, task in enumerate(order, 1)}
    return [r for r in log if r.split == "train" and r.stage > stage_of[r.task_id]]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    gen: object
    disc: object
    opt_g: OptimState
    opt_d: OptimState
    memory: MappingMemory = field(default_factory=MappingMemory)
    snapshot: FisherSnapshot | None = None
    replay: dict = field(default_factory=dict)  # task_id -> (x, y)
    seconds: float = 0.0
    step: int = 0


def _fresh_optim(cfg: RunConfig, params) -> OptimState:
    return OptimState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def init_state(cfg: RunConfig) -> TrainState:
    spec = cfg.arch
    gen = init_params(spec, "generator", stream_seed(cfg.seed_init, "init", 1))
    disc = init_params(spec, "discriminator", stream_seed(cfg.seed_init, "init", 2))
    return TrainState(gen, disc, _fresh_optim(cfg, gen), _fresh_optim(cfg, disc))


def _mix_replay(state: TrainState, x, y, r: float, rng: np.random.Generator):
    k = association_count(r, len(x))
    if k == 0 or not state.replay:
        return x, y
    x, y = x.copy(), y.copy()
    tasks = sorted(state.replay)
    positions = np.sort(rng.choice(len(x), size=k, replace=False))
    picks = rng.integers(len(tasks), size=k)
    for pos, pick in zip(positions, picks):
        bx, by = state.replay[tasks[pick]]
        j = rng.integers(len(bx))
        x[pos], y[pos] = bx[j], by[j]
    return x, y


def train_step(state: TrainState, x: np.ndarray, y: np.ndarray, cfg: RunConfig) -> dict[str, float]:
    """One discriminator update followed by one generator update."""
    spec, mask = cfg.arch, cfg.mask
    tape = ad.Tape()
    tracked = tape.watch_params(state.gen)
    fake = generator_forward(tracked, x, spec)
    if "adv" in mask:
        d_tape = ad.Tape()
        d_params = d_tape.watch_params(state.disc)
        logits = discriminator_logit(d_params, np.concatenate([y, fake.data]), spec)
        sign = np.concatenate([np.ones(len(y)), -np.ones(len(y))])
        d_loss = ad.mul(ad.mean(ad.softplus(ad.mul(logits, -sign))), 2.0)
        state.disc, state.opt_d = adam_update(state.disc, ad.backward(d_tape, d_loss), state.opt_d)
    terms = [t for t in ("mse", "adv", "feature") if t in mask and (t != "feature" or cfg.feature_active())]
    weights = LossWeights(cfg.lambda_adv, cfg.lambda_prime)
    snap = state.snapshot if cfg.feature_active() else None
    parts = total_loss((x, y), tracked, state.disc, snap, weights, spec, terms=terms, fake=fake)
    if not math.isfinite(parts.total.item()):
        raise FloatingPointError(f"loss is {parts.total.item()}")
    if parts.total.tape is tape:
        grads = ad.backward(tape, parts.total)
    else:
        grads = {k: np.zeros_like(v) for k, v in state.gen.items()}
    state.gen, state.opt_g = adam_update(state.gen, grads, state.opt_g)
    state.step += 1
    return {"l_mse": parts.l_mse, "l_adv": parts.l_adv, "l_feature": parts.l_feature}


def evaluate_all(gen, tests: Sequence[tuple[int, np.ndarray, np.ndarray]], spec: ArchSpec) -> list[dict]:
    """Per-task mean PSNR/SSIM on test pairs, followed by an ``AVG`` row."""
    rows = []
    for task_id, x, y in tests:
        pred = generator_forward(gen, x, spec).data
        rows.append({"eval_task": task_id,
                     "psnr_db": batch_metric("psnr", pred, y),
                     "ssim": batch_metric("ssim", pred, y)})
    if rows:
        rows.append({"eval_task": "AVG",
                     "psnr_db": float(np.mean([r["psnr_db"] for r in rows])),
                     "ssim": float(np.mean([r["ssim"] for r in rows]))})
    return rows


@dataclass
class RunResult:
    cfg: RunConfig
    metrics: list[dict]
    forgetting: list[dict]
    accounting: list[dict]
    access_log: list[AccessRecord]
    state: TrainState

    def final_avg(self, metric: str | None = None) -> float:
        metric = metric or metric_column(self.cfg.suite)
        last = max(r["tasks_trained"] for r in self.metrics)
        return next(r[metric] for r in self.metrics if r["tasks_trained"] == last and r["eval_task"] == "AVG")

    def score(self, stage: int, task_id, metric: str | None = None) -> float:
        metric = metric or metric_column(self.cfg.suite)
        return next(r[metric] for r in self.metrics if r["tasks_trained"] == stage and r["eval_task"] == task_id)

    def relabel(self, cfg: RunConfig) -> "RunResult":
        return dataclasses.replace(self, cfg=cfg)


def metric_column(suite: str) -> str:
    return "psnr_db" if SUITE_METRIC[suite] == "psnr" else "ssim"


def _replay_blob(state: TrainState) -> bytes:
    entries = []
    for task_id in sorted(state.replay):
        bx, by = state.replay[task_id]
        entries += [(f"task{task_id}/x", bx), (f"task{task_id}/y", by)]
    return encode_container(entries)


def _memory_bytes(mem: MappingMemory) -> int:
    """Size :func:`save_memory` would write: mapper containers plus the index."""
    if not len(mem):
        return 0
    index = INDEX_HEADER + "".join(f"{e.task_id}\t{e.file_name}\t{e.nbytes()}\n" for e in mem.entries)
    return mem.nbytes() + len(index.encode("utf-8"))


def state_bytes(state: TrainState) -> dict[str, int]:
    """Bytes a method carries between tasks, by category, without touching disk."""
    return {"model_bytes": len(state.gen.to_bytes()) + len(state.disc.to_bytes()),
            "memory_bytes": _memory_bytes(state.memory),
            "snapshot_bytes": len(state.snapshot.to_bytes()) if state.snapshot is not None else 0,
            "replay_bytes": len(_replay_blob(state)) if state.replay else 0}


def save_state(state: TrainState, directory: Path) -> dict[str, int]:
    """Persist everything a method keeps between tasks; returns measured byte counts."""
    directory.mkdir(parents=True, exist_ok=True)
    sizes = {"model_bytes": state.gen.save(directory / "generator.acls") +
             state.disc.save(directory / "discriminator.acls"),
             "memory_bytes": 0, "snapshot_bytes": 0, "replay_bytes": 0}
    if len(state.memory):
        sizes["memory_bytes"] = save_memory(state.memory, directory / "memory")
    if state.snapshot is not None:
        blob = state.snapshot.to_bytes()
        (directory / "fisher.acls").write_bytes(blob)
        sizes["snapshot_bytes"] = len(blob)
    if state.replay:
        blob = _replay_blob(state)
        (directory / "replay.acls").write_bytes(blob)
        sizes["replay_bytes"] = len(blob)
    return sizes


def run_method(cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Train one method over the configured task order and evaluate after every epoch."""
    spec = cfg.arch
    order = cfg.order
    source = TaskSource(cfg)
    state = init_state(cfg)
    rng_train = make_rng(cfg.seed_train, 3)
    rng_ctrl = make_rng(cfg.seed_controller, 4)
    mask = cfg.mask
    use_heur = "heuristics" in mask and cfg.method == "assoc"
    metrics, forgetting, accounting = [], [], []
    state_dir = Path(out_dir) / "state" if out_dir is not None else None
    steps_per_epoch = math.ceil(cfg.n_train / cfg.batch_size)
    tests: list[tuple[int, np.ndarray, np.ndarray]] = []

    for stage, task_id in enumerate(order, 1):
        source.stage = stage
        t0 = time.monotonic()
        if stage > 1 and cfg.reset_optim:
            # moments sized to the previous task's gradients overshoot on the first steps of a new one
            state.opt_g, state.opt_d = _fresh_optim(cfg, state.gen), _fresh_optim(cfg, state.disc)
        if cfg.method == "jl":
            parts = [source.read(t, "train") for t in order[:stage]]
            x_all = np.concatenate([p[0] for p in parts])
            y_all = np.concatenate([p[1] for p in parts])
        else:
            x_all, y_all = source.read(task_id, "train")
        tests.append((task_id, *source.read(task_id, "test")))
        r = cfg.ratio_at(stage)
        epoch_losses = {}
        for epoch in range(1, cfg.epochs + 1):
            perm = rng_train.permutation(len(x_all))[:cfg.n_train]
            sums = {"l_mse": 0.0, "l_adv": 0.0, "l_feature": 0.0}
            for b in range(steps_per_epoch):
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x, y = x_all[idx], y_all[idx]
                if use_heur and stage > 1 and r > 0:
                    mixed = synthesize_association_batch(state.memory, x, y, r, rng_ctrl, spec)
                    x, y = mixed.x, mixed.y
                elif cfg.method == "replay" and stage > 1:
                    x, y = _mix_replay(state, x, y, r, rng_ctrl)
                try:
                    losses = train_step(state, x, y, cfg)
                except FloatingPointError as exc:
                    raise TrainingError(f"{cfg.label}: non-finite value at step {state.step} "
                                        f"(task {task_id}, epoch {epoch}): {exc}") from exc
                for k, v in losses.items():
                    sums[k] += v
            epoch_losses = {k: v / steps_per_epoch for k, v in sums.items()}
            for row in evaluate_all(state.gen, tests, spec)[:-1]:
                forgetting.append({"tasks_trained": stage, "epoch": epoch, **row})
        train_s = time.monotonic() - t0

        t1 = time.monotonic()
        if use_heur:
            mapper, record = train_mapper(x_all, y_all, spec, cfg.mapper_steps,
                                          stream_seed(cfg.seed_init, "init", 100 + task_id),
                                          cfg.mapper_batch, cfg.mapper_lr)
            state.memory = store_mapping(state.memory, task_id, mapper, record)
        mapper_s = time.monotonic() - t1
        t2 = time.monotonic()
        if cfg.feature_active():
            m = min(cfg.fisher_samples, len(x_all))
            snap = estimate_diag_fisher(state.gen, list(zip(x_all, y_all)), m, spec=spec, source_task=task_id)
            if cfg.accumulate_fisher and state.snapshot is not None:
                snap = state.snapshot.merged_with(snap)
            state.snapshot = snap
        if cfg.method == "replay" and cfg.replay_per_task:
            keep = np.sort(rng_ctrl.choice(len(x_all), size=cfg.replay_per_task, replace=False))
            state.replay[task_id] = (x_all[keep].copy(), y_all[keep].copy())
        fisher_s = time.monotonic() - t2
        state.seconds += time.monotonic() - t0

        sizes = save_state(state, state_dir) if state_dir is not None else state_bytes(state)
        stored = sum(sizes.values())
        accounting.append({"tasks_trained": stage, "task_id": task_id, **sizes, "stored_bytes": stored,
                           "train_s": train_s, "mapper_s": mapper_s, "fisher_s": fisher_s})
        for row in evaluate_all(state.gen, tests, spec):
            metrics.append({"tasks_trained": stage, "epoch": cfg.epochs, **row, **epoch_losses,
                            "wall_s": state.seconds, "stored_bytes": stored})
        log.info("%s stage %d (task %d): %s=%.4f", cfg.label, stage, task_id, metric_column(cfg.suite),
                 metrics[-1][metric_column(cfg.suite)])
    return RunResult(cfg, metrics, forgetting, accounting, source.log, state)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _labelled(result: RunResult, rows: list[dict], wall: bool = True) -> list[dict]:
    cfg = result.cfg
    out = []
    for r in rows:
        row = {"run_id": cfg.label, "method": cfg.method, "suite": cfg.suite, **r}
        if wall and not cfg.record_wall_time and "wall_s" in row:
            row["wall_s"] = ""
        out.append(row)
    return out


def write_run_outputs(results: Sequence[RunResult], out_dir: Path, cfg: RunConfig | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out_dir / "config.snapshot").write_text(format_config(cfg), encoding="utf-8")
    _write_csv(out_dir / "metrics.csv", METRICS_COLUMNS,
               [row for res in results for row in _labelled(res, res.metrics)])
    _write_csv(out_dir / "forgetting.csv", FORGETTING_COLUMNS,
               [row for res in results for row in _labelled(res, res.forgetting)])
    _write_csv(out_dir / "accounting.csv", ACCOUNTING_COLUMNS,
               [row for res in results for row in _labelled(res, res.accounting, wall=False)])


# ---------------------------------------------------------------------------
# drivers


class RunCache:
    """Reuses results of runs whose numeric behaviour is identical."""

    def __init__(self):
        self._results: dict[tuple, RunResult] = {}
        self.hits = 0

    def get(self, cfg: RunConfig, out_dir: Path | None = None) -> RunResult:
        key = cfg.behavior_key()
        if key in self._results:
            self.hits += 1
            return self._results[key].relabel(cfg)
        res = run_method(cfg, out_dir)
        self._results[key] = res
        return res


def execute(cfg: RunConfig, out_dir: Path | None, cache: RunCache | None) -> RunResult:
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.snapshot").write_text(format_config(cfg), encoding="utf-8")
    res = cache.get(cfg, out_dir) if cache is not None else run_method(cfg, out_dir)
    if out_dir is not None:
        write_run_outputs([res], out_dir)
    return res


def generate_data(suite: str, out: Path, n_train: int, n_test: int, seed: int) -> list[Path]:
    dirs = []
    for task_id in range(1, SUITE_TASKS[suite] + 1):
        d = out / f"task{task_id}"
        save_task(gen_task(suite, task_id, n_train, seed, n_test), d)
        dirs.append(d)
    return dirs


def run_suite(cfg: RunConfig, out_dir: str | Path | None = None, cache: RunCache | None = None) -> Path:
    """Generate data on disk, run every configured method, write aggregate CSVs."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(format_config(cfg), encoding="utf-8")
    data_cfg = cfg
    if not cfg.data_dir:
        data_dir = out / "data"
        if not (data_dir / f"task{cfg.order[0]}" / MANIFEST_NAME).exists():
            generate_data(cfg.suite, data_dir, cfg.n_train, cfg.n_test, cfg.seed_data)
        data_cfg = cfg.replace(data_dir=str(data_dir))
    results, failures = [], []
    for method in cfg.methods:
        run_cfg = data_cfg.replace(method=method, run_id=f"{method}-s{cfg.seed_train}", ablation=None)
        try:
            results.append(execute(run_cfg, out / run_cfg.run_id, cache))
        except (TrainingError, FloatingPointError) as exc:
            log.error("run %s failed: %s", run_cfg.run_id, exc)
            failures.append((run_cfg.run_id, str(exc)))
    write_run_outputs(results, out)
    _write_csv(out / "quota.csv", ("method", "tasks_trained", "avg_psnr_db", "avg_ssim"), quota_curve(results))
    if failures:
        (out / "failures.txt").write_text("".join(f"{r}\t{m}\n" for r, m in failures), encoding="utf-8")
        raise TrainingError(f"{len(failures)} run(s) failed: {', '.join(r for r, _ in failures)}")
    return out


def quota_curve(results: Sequence[RunResult]) -> list[dict]:
    """Average metric after each stage, per method."""
    rows = []
    for res in results:
        for r in res.metrics:
            if r["eval_task"] == "AVG":
                rows.append({"method": res.cfg.method if res.cfg.ablation is None else res.cfg.label,
                             "tasks_trained": r["tasks_trained"], "avg_psnr_db": r["psnr_db"],
                             "avg_ssim": r["ssim"]})
    return rows


def ablate(cfg: RunConfig, out_dir: str | Path | None = None, cache: RunCache | None = None) -> list[dict]:
    """Run the six component masks in ladder order; one summary row each."""
    out = Path(out_dir) if out_dir is not None else None
    rows, results = [], []
    for position, (name, mask) in enumerate(ABLATION_LADDER):
        run_cfg = cfg.replace(method="assoc", ablation=mask, run_id=f"ablate-{name.lstrip('+')}-s{cfg.seed_train}")
        res = execute(run_cfg, out / run_cfg.run_id if out else None, cache)
        results.append(res)
        rows.append({"position": position, "config": name, "mask": "+".join(mask) or "none",
                     "final_avg_psnr_db": res.final_avg("psnr_db"), "final_avg_ssim": res.final_avg("ssim")})
    if out is not None:
        _write_csv(out / "ablation.csv", ("position", "config", "mask", "final_avg_psnr_db", "final_avg_ssim"), rows)
        write_run_outputs(results, out)
    return rows


def sweep(cfg: RunConfig, parameter: str, values: Sequence[float], out_dir: str | Path | None = None,
          cache: RunCache | None = None) -> list[dict]:
    """One run per value of a numeric config field, all other settings shared."""
    if parameter not in {f.name for f in dataclasses.fields(RunConfig)}:
        raise ConfigError(f"unknown sweep parameter {parameter!r}")
    out = Path(out_dir) if out_dir is not None else None
    col = metric_column(cfg.suite)
    rows, results = [], []
    for value in values:
        run_cfg = cfg.replace(**{parameter: type(getattr(cfg, parameter))(value)},
                              run_id=f"sweep-{parameter}-{value:g}-s{cfg.seed_train}")
        res = execute(run_cfg, out / run_cfg.run_id if out else None, cache)
        results.append(res)
        first = cfg.order[0]
        rows.append({"parameter": parameter, "value": value, "final_avg": res.final_avg(col),
                     "task1_after_task1": res.score(1, first, col),
                     "task1_final": res.score(len(cfg.order), first, col)})
    if out is not None:
        _write_csv(out / "sweep.csv", ("parameter", "value", "final_avg", "task1_after_task1", "task1_final"), rows)
        write_run_outputs(results, out)
    return rows


def parse_perms(spec: str, n_tasks: int) -> list[tuple[int, ...]]:
    if spec.strip() == "all":
        return list(itertools.permutations(range(1, n_tasks + 1)))
    perms = []
    for chunk in spec.replace(" ", ";").split(";"):
        if chunk:
            perms.append(tuple(int(v) for v in chunk.split(",") if v))
    return perms


def sequence_study(cfg: RunConfig, perms: Sequence[Sequence[int]], out_dir: str | Path | None = None,
                   cache: RunCache | None = None) -> list[dict]:
    """Final per-task scores for each task arrival order."""
    out = Path(out_dir) if out_dir is not None else None
    col = metric_column(cfg.suite)
    rows, results = [], []
    for perm in perms:
        tag = "".join(str(t) for t in perm)
        run_cfg = cfg.replace(task_order=tuple(perm), run_id=f"seq-{cfg.method}-{tag}-s{cfg.seed_train}")
        res = execute(run_cfg, out / run_cfg.run_id if out else None, cache)
        results.append(res)
        for position, task_id in enumerate(perm, 1):
            rows.append({"order": tag, "position": position, "task_id": task_id,
                         "final": res.score(len(perm), task_id, col)})
    if out is not None:
        _write_csv(out / "sequence.csv", ("order", "position", "task_id", "final"), rows)
        write_run_outputs(results, out)
    return rows


# ---------------------------------------------------------------------------
# reporting


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def report(in_dir: str | Path, fmt: str = "md") -> str:
    """Per-run matrix of eval task x tasks trained, as markdown or CSV."""
    rows = read_metrics(Path(in_dir) / "metrics.csv")
    if fmt not in ("md", "csv"):
        raise ValueError(f"format must be 'md' or 'csv', got {fmt!r}")
    runs: dict[str, list[dict]] = {}
    for r in rows:
        runs.setdefault(r["run_id"], []).append(r)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n") if fmt == "csv" else None
    if writer:
        writer.writerow(["run_id", "method", "metric", "eval_task", "tasks_trained", "value"])
    for run_id, rs in runs.items():
        metric = "psnr_db" if SUITE_METRIC.get(rs[0]["suite"], "psnr") == "psnr" else "ssim"
        stages = sorted({int(r["tasks_trained"]) for r in rs})
        tasks = list(dict.fromkeys(r["eval_task"] for r in rs if r["eval_task"] != "AVG")) + ["AVG"]
        cell = {(r["eval_task"], int(r["tasks_trained"])): float(r[metric]) for r in rs}
        if writer:
            for t in tasks:
                for s in stages:
                    if (t, s) in cell:
                        writer.writerow([run_id, rs[0]["method"], metric, t, s, f"{cell[(t, s)]:.4f}"])
            continue
        out.write(f"### {run_id} ({rs[0]['method']}, {metric})\n\n")
        out.write("| task | " + " | ".join(f"{s} task{'s' if s > 1 else ''}" for s in stages) + " |\n")
        out.write("|---|" + "---|" * len(stages) + "\n")
        for t in tasks:
            vals = [f"{cell[(t, s)]:.4f}" if (t, s) in cell else "" for s in stages]
            out.write(f"| {'T' + t if t != 'AVG' else 'AVG'} | " + " | ".join(vals) + " |\n")
        out.write("\n")
    return out.getvalue()
