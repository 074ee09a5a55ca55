"""Synthetic task sequences with planted block-sparse structure.

Each task's labels come from a teacher that deviates from the frozen base
only on a known set of blocks.  Overlap between tasks is semantic, not just
positional: a block shared between two tasks reuses the donor task's exact
teacher sub-matrix, so consolidating it into a shared expert is genuinely
the right thing for a learner to do.  Tasks are separable at the input
level through a per-task mean shift, which is what makes content-based
routing learnable without task identifiers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import IndexSet
from .model import BaseModel, SuperposedModel
from .rng import substream


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str = "classification"          # or "regression"
    n_classes: int = 4
    support_size: int = 8                 # planted blocks when none are given
    planted_blocks: IndexSet | None = None
    overlap_with: dict = field(default_factory=dict)   # prior task_id -> fraction of this support
    n_train: int = 256
    n_eval: int = 200
    noise_std: float = 0.0
    input_shift: float = 2.0
    planted_scale: float = 0.35           # teacher delta entry scale

    def __post_init__(self) -> None:
        if self.kind not in ("classification", "regression"):
            raise DatasetError(f"unknown task kind {self.kind!r}")
        for prior, frac in self.overlap_with.items():
            if prior >= self.task_id:
                raise DatasetError(f"task {self.task_id} overlaps non-earlier task {prior}")
            if not 0.0 <= frac <= 1.0:
                raise DatasetError(f"overlap fraction {frac} outside [0, 1]")


@dataclass
class TaskData:
    spec: TaskSpec
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    planted: IndexSet
    teacher_overlay: dict    # BlockCoord -> ndarray, the planted deviation


def _choose(rng: np.random.Generator, pool: list, count: int) -> list:
    pool = sorted(pool)
    if count >= len(pool):
        return pool
    picked = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in sorted(picked)]


def _planted_support(spec: TaskSpec, prior: dict, all_blocks: list,
                     rng: np.random.Generator) -> IndexSet:
    if spec.planted_blocks is not None:
        return frozenset(spec.planted_blocks)
    chosen: set = set()
    forbidden: set = set()
    for p, frac in spec.overlap_with.items():
        if frac == 0.0:
            forbidden |= prior[p]
    for p in sorted(spec.overlap_with):
        frac = spec.overlap_with[p]
        if frac == 0.0:
            continue
        want = round(frac * spec.support_size)
        pool = sorted(prior[p] - chosen - forbidden)
        if want > len(pool):
            warnings.warn(
                f"task {spec.task_id}: overlap with task {p} infeasible "
                f"(wanted {want}, pool {len(pool)}); using {len(pool)}"
            )
            want = len(pool)
        chosen |= set(_choose(rng, pool, want))
    prior_union: set = set()
    for s in prior.values():
        prior_union |= s
    fresh_pool = [b for b in all_blocks if b not in prior_union and b not in chosen]
    need = spec.support_size - len(chosen)
    if need > len(fresh_pool):
        raise DatasetError(f"task {spec.task_id}: grid too small for {need} fresh blocks")
    chosen |= set(_choose(rng, fresh_pool, need))
    return frozenset(chosen)


def generate_sequence(base: BaseModel, specs: list, seed: int) -> list[TaskData]:
    """Materialize a task sequence of planted teachers over ``base``.

    Returns one :class:`TaskData` per spec, in task order.  Identical seed
    and specs give byte-identical datasets.
    """
    grid = base.grid()
    all_blocks = grid.all_blocks()
    engine = SuperposedModel(base)
    prior_support: dict = {}
    prior_teacher: dict = {}      # task_id -> {coord: block}
    out: list[TaskData] = []

    for spec in sorted(specs, key=lambda s: s.task_id):
        for p in spec.overlap_with:
            if p not in prior_support:
                raise DatasetError(f"task {spec.task_id} references unknown prior task {p}")
        rng_support = substream(seed, f"tasks/support/{spec.task_id}")
        planted = _planted_support(spec, prior_support, all_blocks, rng_support)

        rng_teacher = substream(seed, f"tasks/teacher/{spec.task_id}")
        overlay: dict = {}
        for coord in sorted(planted):
            donor = None
            for p in sorted(spec.overlap_with):
                if coord in prior_teacher.get(p, {}):
                    donor = prior_teacher[p][coord]
                    break
            if donor is None:
                # unlisted transitive reuse still inherits the original values
                for p in sorted(prior_teacher):
                    if coord in prior_teacher[p]:
                        donor = prior_teacher[p][coord]
                        break
            if donor is not None:
                overlay[coord] = donor.copy()
            else:
                rs, cs = grid.block_slices(coord)
                shape = (rs.stop - rs.start, cs.stop - cs.start)
                overlay[coord] = rng_teacher.normal(0.0, spec.planted_scale, size=shape)

        rng_data = substream(seed, f"tasks/data/{spec.task_id}")
        direction = rng_data.normal(size=base.dim)
        direction /= np.linalg.norm(direction)

        def make_split(n: int) -> tuple[np.ndarray, np.ndarray]:
            X = spec.input_shift * direction + rng_data.normal(size=(n, base.dim))
            teacher_out = engine.forward([(1.0, overlay)], X)
            if spec.kind == "classification":
                logits = teacher_out
                if spec.noise_std > 0:
                    logits = logits + spec.noise_std * rng_data.normal(size=logits.shape)
                y = np.argmax(logits, axis=1).astype(np.int64)
            else:
                y = teacher_out[:, 0]
                if spec.noise_std > 0:
                    y = y + spec.noise_std * rng_data.normal(size=y.shape)
            return X, y

        train_x, train_y = make_split(spec.n_train)
        eval_x, eval_y = make_split(spec.n_eval)
        prior_support[spec.task_id] = set(planted)
        prior_teacher[spec.task_id] = overlay
        out.append(TaskData(spec=spec, train_x=train_x, train_y=train_y,
                            eval_x=eval_x, eval_y=eval_y, planted=planted,
                            teacher_overlay=overlay))
    return out


def chain_specs(count: int, overlaps: list, support_size: int = 8,
                n_train: int = 256, n_eval: int = 200, noise_std: float = 0.0,
                input_shift: float = 2.0, planted_scale: float = 0.35,
                n_classes: int = 4) -> list[TaskSpec]:
    """Specs for a chain benchmark: task t shares overlaps[t-2] with task t-1."""
    if count < 1:
        raise DatasetError("need at least one task")
    if count > 1 and len(overlaps) != count - 1:
        raise DatasetError(f"need {count - 1} overlap fractions, got {len(overlaps)}")
    specs = []
    for t in range(1, count + 1):
        overlap = {} if t == 1 else {t - 1: float(overlaps[t - 2])}
        specs.append(TaskSpec(task_id=t, support_size=support_size,
                              overlap_with=overlap, n_train=n_train, n_eval=n_eval,
                              noise_std=noise_std, input_shift=input_shift,
                              planted_scale=planted_scale, n_classes=n_classes))
    return specs


def load_jsonl(path: str | Path) -> tuple[np.ndarray, np.ndarray, int | None]:
    """Load `{"x": [...], "y": ...}` records; returns (X, y, dim).

    Raises :class:`DatasetError` naming the offending line for malformed
    records or ragged dimensions; an empty file yields empty arrays, a
    None dim, and a warning.
    """
    xs: list = []
    ys: list = []
    dim: int | None = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict) or "x" not in record or "y" not in record:
                raise DatasetError(f"{path}: line {lineno}: record needs 'x' and 'y' fields")
            x = record["x"]
            if not isinstance(x, list) or not all(isinstance(v, (int, float)) for v in x):
                raise DatasetError(f"{path}: line {lineno}: 'x' must be a list of numbers")
            if dim is None:
                dim = len(x)
            elif len(x) != dim:
                raise DatasetError(f"{path}: line {lineno}: dimension {len(x)} != {dim}")
            xs.append(x)
            ys.append(record["y"])
    if not xs:
        warnings.warn(f"{path}: empty dataset")
        return np.zeros((0, 0)), np.zeros((0,)), None
    y = np.asarray(ys)
    return np.asarray(xs, dtype=np.float64), y, dim


def save_jsonl(path: str | Path, X: np.ndarray, y: np.ndarray) -> None:
    """Write samples in the same JSONL format ``load_jsonl`` reads."""
    with open(path, "w") as f:
        for xi, yi in zip(np.atleast_2d(X), np.atleast_1d(y)):
            f.write(json.dumps({"x": [float(v) for v in xi], "y": yi.item()}) + "\n")
