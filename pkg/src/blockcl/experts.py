"""Registry of unique and shared experts.

A unique expert owns blocks selected by exactly one task and is frozen once
that task finishes, turning it into immutable memory.  The single shared
expert owns blocks selected by two or more tasks; it stays plastic but every
block carries an anchor matrix and a sharing count that feed the elastic
anchoring penalty.  Ownership is disjoint: no block ever belongs to two
experts at once.

A registry can be bound to a block grid (weighted mode, used for training)
or left unbound, in which case it tracks pure index sets; the growth-curve
replay uses the unbound mode.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import BlockCoord, Grid, IndexSet

UNIQUE = "unique"
SHARED = "shared"


class RegistryStateError(RuntimeError):
    pass


class OwnershipError(RuntimeError):
    pass


@dataclass
class ExpertRecord:
    expert_id: int
    kind: str                         # UNIQUE or SHARED
    task_id: int | None               # owning task; None for the shared expert
    owned: set = field(default_factory=set)
    deltas: dict = field(default_factory=dict)      # BlockCoord -> ndarray
    frozen: bool = False
    anchors: dict = field(default_factory=dict)     # BlockCoord -> ndarray (shared only)
    share_count: dict = field(default_factory=dict)  # BlockCoord -> int n_j (shared only)

    def delta_bytes(self) -> bytes:
        """Canonical little-endian serialization of the delta weights."""
        chunks = []
        for coord in sorted(self.deltas):
            chunks.append(np.ascontiguousarray(self.deltas[coord], dtype="<f8").tobytes())
        return b"".join(chunks)

    def delta_checksum(self) -> str:
        return hashlib.sha256(self.delta_bytes()).hexdigest()

    def anchor_penalty(self) -> float:
        """Sum over owned blocks of n_j * ||delta - anchor||_F^2 (shared only)."""
        total = 0.0
        for coord in sorted(self.owned):
            diff = self.deltas[coord] - self.anchors[coord]
            total += self.share_count[coord] * float(np.sum(diff * diff))
        return total


@dataclass
class Registry:
    grid: Grid | None = None          # None = pure set-algebra mode
    experts: list = field(default_factory=list)
    task_selections: dict = field(default_factory=dict)   # task_id -> IndexSet
    next_id: int = 1

    # -- construction and lookup -------------------------------------------

    def new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def zero_block(self, coord: BlockCoord) -> np.ndarray:
        rs, cs = self.grid.block_slices(coord)
        return np.zeros((rs.stop - rs.start, cs.stop - cs.start))

    def get(self, expert_id: int) -> ExpertRecord:
        for e in self.experts:
            if e.expert_id == expert_id:
                return e
        raise KeyError(f"no expert with id {expert_id}")

    def shared(self) -> ExpertRecord | None:
        for e in self.experts:
            if e.kind == SHARED:
                return e
        return None

    def unique_for_task(self, task_id: int) -> ExpertRecord | None:
        for e in self.experts:
            if e.kind == UNIQUE and e.task_id == task_id:
                return e
        return None

    def owner_map(self) -> dict:
        """BlockCoord -> expert_id over all experts (ownership is disjoint)."""
        owners: dict = {}
        for e in self.experts:
            for coord in e.owned:
                if coord in owners:
                    raise OwnershipError(f"block {coord} owned by {owners[coord]} and {e.expert_id}")
                owners[coord] = e.expert_id
        return owners

    def all_owned(self) -> IndexSet:
        out: set = set()
        for e in self.experts:
            out |= e.owned
        return frozenset(out)

    # -- lifecycle -----------------------------------------------------------

    def init_first_task(self, p1: IndexSet) -> ExpertRecord:
        """Seed the registry with the first task's unique expert."""
        if self.experts:
            raise RegistryStateError("registry already initialized")
        expert = ExpertRecord(expert_id=self.new_id(), kind=UNIQUE, task_id=1, owned=set(p1))
        if self.grid is not None:
            expert.deltas = {c: self.zero_block(c) for c in p1}
        self.experts.append(expert)
        self.task_selections[1] = frozenset(p1)
        return expert

    def freeze_history(self, current_task: int) -> None:
        """Freeze every unique expert belonging to a task before ``current_task``."""
        for e in self.experts:
            if e.kind == UNIQUE and e.task_id is not None and e.task_id < current_task:
                e.frozen = True

    def bump_share_counts(self, shared: ExpertRecord, newly_intersected: IndexSet) -> None:
        """Count one more sharing task for each re-selected shared block."""
        for coord in newly_intersected:
            if coord not in shared.owned:
                raise OwnershipError(f"block {coord} not owned by the shared expert")
            shared.share_count[coord] = shared.share_count.get(coord, 1) + 1

    def set_anchors(self, shared: ExpertRecord) -> None:
        """Re-anchor every shared block at its current trained value."""
        for coord in shared.owned:
            shared.anchors[coord] = shared.deltas[coord].copy()

    def capacity_snapshot(self) -> tuple[int, int, dict]:
        """(total, shared_total, unique counts per task) in whole blocks."""
        shared = self.shared()
        shared_total = len(shared.owned) if shared is not None else 0
        unique: dict = {}
        for e in self.experts:
            if e.kind == UNIQUE:
                unique[e.task_id] = unique.get(e.task_id, 0) + len(e.owned)
        total = shared_total + sum(unique.values())
        return total, shared_total, unique

    def validate(self) -> None:
        """Check the structural invariants; raises on violation."""
        self.owner_map()  # disjointness
        for e in self.experts:
            if e.kind == UNIQUE:
                if e.anchors or e.share_count:
                    raise OwnershipError(f"unique expert {e.expert_id} carries shared bookkeeping")
            elif e.kind == SHARED:
                for coord in e.owned:
                    if self.grid is not None and coord not in e.anchors:
                        raise OwnershipError(f"shared block {coord} missing an anchor")
                    n = e.share_count.get(coord, 0)
                    if n < 2:
                        raise OwnershipError(f"shared block {coord} has sharing count {n} < 2")
            else:
                raise OwnershipError(f"unknown expert kind {e.kind!r}")
        if [e.expert_id for e in self.experts] != sorted(e.expert_id for e in self.experts):
            raise OwnershipError("expert ids out of registration order")


# -- serialization -----------------------------------------------------------

def save_registry(registry: Registry, directory: str | Path) -> None:
    """Manifest plus raw little-endian float64 blocks per expert."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "next_id": registry.next_id,
        "task_selections": {str(t): sorted(map(list, s)) for t, s in registry.task_selections.items()},
        "experts": [
            {
                "expert_id": e.expert_id,
                "kind": e.kind,
                "task_id": e.task_id,
                "frozen": e.frozen,
                "owned": sorted(map(list, e.owned)),
                "share_count": {",".join(map(str, c)): n for c, n in sorted(e.share_count.items())},
                "block_shapes": {",".join(map(str, c)): list(e.deltas[c].shape) for c in sorted(e.deltas)},
            }
            for e in registry.experts
        ],
    }
    (directory / "registry_manifest.json").write_text(json.dumps(manifest, indent=1))
    for e in registry.experts:
        (directory / f"expert{e.expert_id}_deltas.bin").write_bytes(e.delta_bytes())
        if e.anchors:
            chunks = [np.ascontiguousarray(e.anchors[c], dtype="<f8").tobytes() for c in sorted(e.anchors)]
            (directory / f"expert{e.expert_id}_anchors.bin").write_bytes(b"".join(chunks))


def load_registry(directory: str | Path, grid: Grid | None = None) -> Registry:
    directory = Path(directory)
    manifest = json.loads((directory / "registry_manifest.json").read_text())
    registry = Registry(grid=grid, next_id=manifest["next_id"])
    registry.task_selections = {
        int(t): frozenset(BlockCoord(*c) for c in coords)
        for t, coords in manifest["task_selections"].items()
    }
    for meta in manifest["experts"]:
        e = ExpertRecord(
            expert_id=meta["expert_id"],
            kind=meta["kind"],
            task_id=meta["task_id"],
            frozen=meta["frozen"],
            owned={BlockCoord(*c) for c in meta["owned"]},
            share_count={BlockCoord(*map(int, k.split(","))): n for k, n in meta["share_count"].items()},
        )
        shapes = {BlockCoord(*map(int, k.split(","))): tuple(v) for k, v in meta["block_shapes"].items()}
        raw = (directory / f"expert{e.expert_id}_deltas.bin").read_bytes()
        offset = 0
        for coord in sorted(shapes):
            size = shapes[coord][0] * shapes[coord][1]
            block = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shapes[coord]).copy()
            e.deltas[coord] = block
            offset += size * 8
        anchor_path = directory / f"expert{e.expert_id}_anchors.bin"
        if anchor_path.exists():
            raw = anchor_path.read_bytes()
            offset = 0
            for coord in sorted(e.owned):
                shape = e.deltas[coord].shape
                size = shape[0] * shape[1]
                e.anchors[coord] = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
                offset += size * 8
        registry.experts.append(e)
    return registry
