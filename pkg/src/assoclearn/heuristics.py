"""Per-task inverse mappers and association-mixed training batches.

After a task finishes, a mapper learns ``y -> x`` for it (target image back
to that task's source domain). While later tasks train, a fraction of each
batch has its inputs replaced by ``mapper_j(y)`` for a uniformly drawn past
task ``j``, with the current ground truth ``y`` kept as the target. Only
mapper parameters are kept; past-task images are never stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import ArchSpec, init_params, mapper_forward
from .optim import OptimState, adam_update
from .params import ParamSet, container_size

INDEX_NAME = "memory.index"
INDEX_HEADER = "# task_id\tfile\tbytes\n"


@dataclass(frozen=True)
class MemoryEntry:
    task_id: int
    mapper: ParamSet
    record: dict = field(default_factory=dict, compare=False)

    @property
    def file_name(self) -> str:
        return f"mapper_task{self.task_id}.acls"

    def nbytes(self) -> int:
        return container_size(self.mapper.shapes())


@dataclass(frozen=True)
class MappingMemory:
    entries: tuple[MemoryEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def task_ids(self) -> list[int]:
        return [e.task_id for e in self.entries]

    def nbytes(self) -> int:
        """Bytes held by stored mapper containers."""
        return sum(e.nbytes() for e in self.entries)

    def __eq__(self, other) -> bool:
        return (isinstance(other, MappingMemory) and self.task_ids == other.task_ids
                and all(a.mapper == b.mapper for a, b in zip(self.entries, other.entries)))


@dataclass(frozen=True)
class AssocBatch:
    x: np.ndarray
    y: np.ndarray
    provenance: tuple[int, ...]  # 0 = current task, otherwise the associated past task id

    def __len__(self) -> int:
        return len(self.x)

    @property
    def associated_count(self) -> int:
        return sum(1 for p in self.provenance if p)


def train_mapper(x: np.ndarray, y: np.ndarray, spec: ArchSpec, steps: int = 300, seed: int = 0,
                 batch_size: int = 16, lr: float = 2e-3) -> tuple[ParamSet, dict]:
    """Fit ``mapper(y) ~ x`` by mean-squared error; deterministic given ``seed``.

    Returns the parameters and a record with the first and last batch losses.
    """
    if len(x) == 0:
        raise ValueError("cannot train a mapper on an empty task")
    if x.shape != y.shape:
        raise ValueError(f"paired data shapes differ: {x.shape} vs {y.shape}")
    rng = np.random.Generator(np.random.PCG64(seed))
    params = init_params(spec, "mapper", int(rng.integers(2**63)))
    state = OptimState.for_params(params, lr=lr, beta1=0.9)
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(x), size=min(batch_size, len(x)), replace=False)
        tape = ad.Tape()
        tracked = tape.watch_params(params)
        loss = ad.mean(ad.square(ad.sub(mapper_forward(tracked, y[idx], spec), x[idx])))
        params, state = adam_update(params, ad.backward(tape, loss), state)
        losses.append(loss.item())
    record = {"steps": steps, "first_loss": losses[0] if losses else float("nan"),
              "last_loss": losses[-1] if losses else float("nan")}
    return params, record


def store_mapping(mem: MappingMemory, task_id: int, mapper: ParamSet, record: dict | None = None) -> MappingMemory:
    if task_id in mem.task_ids:
        raise ValueError(f"task {task_id} already has a stored mapping")
    return MappingMemory(mem.entries + (MemoryEntry(task_id, mapper.copy(), dict(record or {})),))


def association_count(r: float, batch_size: int) -> int:
    """``round(r * B)`` with halves rounded up."""
    return int(np.floor(r * batch_size + 0.5))


def synthesize_association_batch(mem: MappingMemory, x: np.ndarray, y: np.ndarray, r: float,
                                 rng: np.random.Generator, spec: ArchSpec) -> AssocBatch:
    """Replace ``round(r*B)`` inputs by inverse-mapped current targets."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"association ratio must lie in [0, 1], got {r}")
    batch = len(x)
    k = association_count(r, batch)
    if k == 0:
        return AssocBatch(x.copy(), y.copy(), (0,) * batch)
    if len(mem) == 0:
        raise ValueError("association ratio > 0 requires at least one stored mapping")
    positions = np.sort(rng.choice(batch, size=k, replace=False))
    picks = rng.integers(len(mem), size=k)
    out_x = x.copy()
    provenance = [0] * batch
    for slot in np.unique(picks):
        where = positions[picks == slot]
        entry = mem.entries[slot]
        out_x[where] = mapper_forward(entry.mapper, y[where], spec).data
        for p in where:
            provenance[p] = entry.task_id
    return AssocBatch(out_x, y.copy(), tuple(provenance))


def save_memory(mem: MappingMemory, directory) -> int:
    """One ACLS container per entry plus a plain-text index. Returns bytes written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [INDEX_HEADER]
    written = 0
    for entry in mem.entries:
        size = entry.mapper.save(directory / entry.file_name)
        written += size
        lines.append(f"{entry.task_id}\t{entry.file_name}\t{size}\n")
    index = "".join(lines).encode("utf-8")
    (directory / INDEX_NAME).write_bytes(index)
    return written + len(index)


def load_memory(directory) -> MappingMemory:
    directory = Path(directory)
    entries = []
    for lineno, line in enumerate((directory / INDEX_NAME).read_text("utf-8").splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{INDEX_NAME} line {lineno}: expected 3 tab-separated fields")
        task_id, name, size = int(parts[0]), parts[1], int(parts[2])
        blob = (directory / name).read_bytes()
        if len(blob) != size:
            raise ValueError(f"{name}: index says {size} bytes, file has {len(blob)}")
        entries.append(MemoryEntry(task_id, ParamSet.from_bytes(blob)))
    return MappingMemory(tuple(entries))
