"""Expert evolution at task boundaries.

When a new task's selected blocks overlap blocks owned by earlier experts,
ownership is repartitioned layer by layer: the raw intersection and
remainder are computed exactly, two cardinality filters decide whether the
overlap is meaningful shared structure or noise, and the surviving
intersection migrates into the single shared expert carrying its trained
weights.  Blocks re-selected from the shared expert only bump their sharing
count; blocks never seen before form the new task's unique expert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blocks import BlockCoord, IndexSet
from .experts import SHARED, UNIQUE, ExpertRecord, Registry

PROV_NONE = "none"
PROV_REJECT = "rejected_small_overlap"     # intersection below tau_ect
PROV_ABSORB = "absorbed_tiny_remainder"    # remainder below tau_trt


class FilterInputError(ValueError):
    pass


@dataclass(frozen=True)
class SosThresholds:
    """Cardinality filters, counted per layer in whole blocks."""

    tau_ect: int = 2   # minimum intersection size that counts as shared structure
    tau_trt: int = 2   # remainders smaller than this are absorbed into shared

    def __post_init__(self) -> None:
        if self.tau_ect < 1 or self.tau_trt < 1:
            raise FilterInputError("thresholds must be >= 1")


@dataclass(frozen=True)
class SplitOutcome:
    """Per-layer result of decomposing prior ownership against a selection."""

    layer: int
    shared_gain: IndexSet      # validated intersection, migrates to shared
    stays_unique: IndexSet     # stabilized remainder, stays with its owner
    new_task: IndexSet         # selection blocks exclusive to the new task
    provenance: str


@dataclass(frozen=True)
class SplitEvent:
    """One prior expert replaced by shared-gain and/or a remainder child."""

    parent_id: int
    shared_id: int | None      # set when this event created the shared expert
    remainder_id: int | None   # set when a remainder child was formed
    task_id: int               # task of the parent expert

    def children(self) -> tuple[int, ...]:
        out = []
        if self.shared_id is not None:
            out.append(self.shared_id)
        if self.remainder_id is not None:
            out.append(self.remainder_id)
        return tuple(out)


@dataclass
class EvolutionReport:
    task_id: int
    split_events: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)          # SplitOutcome per (expert, layer)
    new_expert_id: int | None = None
    reselected_shared: IndexSet = frozenset()


def raw_decompose(prev: IndexSet, curr: IndexSet, layer: int) -> tuple[IndexSet, IndexSet, IndexSet]:
    """Exact intersection / remainder / new-side split of two one-layer sets."""
    for name, s in (("prev", prev), ("curr", curr)):
        for c in s:
            if c.layer != layer:
                raise FilterInputError(f"{name} contains {c}, not in layer {layer}")
    prev, curr = frozenset(prev), frozenset(curr)
    return prev & curr, prev - curr, curr - prev


def apply_filters(inter: IndexSet, rem: IndexSet,
                  thresholds: SosThresholds) -> tuple[IndexSet, IndexSet, str]:
    """Two-stage cardinality filter over a raw (intersection, remainder) pair.

    Stage 1 rejects an intersection smaller than ``tau_ect`` as coincidence,
    folding it back into the remainder.  Stage 2 absorbs a remainder smaller
    than ``tau_trt`` into the surviving intersection; it is suppressed when
    stage 1 emptied the intersection, since absorbing into an empty shared
    set would mint shared blocks no second task ever selected.
    """
    inter, rem = frozenset(inter), frozenset(rem)
    if inter & rem:
        raise FilterInputError("intersection and remainder overlap")
    provenance = PROV_NONE
    if len(inter) < thresholds.tau_ect:
        if inter:
            rem = rem | inter
            provenance = PROV_REJECT
        inter = frozenset()
    elif rem and len(rem) < thresholds.tau_trt:
        inter = inter | rem
        rem = frozenset()
        provenance = PROV_ABSORB
    return inter, rem, provenance


def form_experts(registry: Registry, task_id: int, selection: IndexSet,
                 thresholds: SosThresholds) -> EvolutionReport:
    """Commit one task's selection to the registry.

    Blocks re-selected from the shared expert bump their sharing count.
    Each unique expert whose blocks were re-selected is decomposed layer by
    layer; if any intersection survives the filters the expert is retired
    and replaced by (shared gain, remainder child), with delta weights
    carried over bit-exactly and fresh shared blocks anchored at their
    inherited values with a sharing count of 2.  Finally the selection's
    unseen blocks form the new task's unique expert.
    """
    selection = frozenset(selection)
    report = EvolutionReport(task_id=task_id)

    shared = registry.shared()
    if shared is not None:
        reselected = frozenset(shared.owned & selection)
        registry.bump_share_counts(shared, reselected)
        report.reselected_shared = reselected

    for expert in list(registry.experts):
        if expert.kind != UNIQUE:
            continue
        if not (expert.owned & selection):
            continue

        shared_gain: set = set()
        stays: set = set()
        layers = sorted({c.layer for c in expert.owned})
        for layer in layers:
            prev_l = frozenset(c for c in expert.owned if c.layer == layer)
            curr_l = frozenset(c for c in selection if c.layer == layer)
            inter, rem, _ = raw_decompose(prev_l, curr_l, layer)
            validated, remainder, provenance = apply_filters(inter, rem, thresholds)
            shared_gain |= validated
            stays |= remainder
            report.outcomes.append(SplitOutcome(
                layer=layer, shared_gain=validated, stays_unique=remainder,
                new_task=frozenset(), provenance=provenance,
            ))
        if not shared_gain:
            continue  # every overlap rejected; the expert keeps its blocks

        created_shared = False
        if shared is None:
            shared = ExpertRecord(expert_id=registry.new_id(), kind=SHARED, task_id=None)
            registry.experts.append(shared)
            created_shared = True
        for coord in sorted(shared_gain):
            shared.owned.add(coord)
            shared.share_count[coord] = 2
            if registry.grid is not None:
                block = expert.deltas.pop(coord)
                shared.deltas[coord] = block            # weight inheritance, bit-exact
                shared.anchors[coord] = block.copy()    # anchored at the inherited state

        remainder_child: ExpertRecord | None = None
        if stays:
            remainder_child = ExpertRecord(
                expert_id=registry.new_id(), kind=UNIQUE, task_id=expert.task_id,
                owned=set(stays), frozen=expert.frozen,
            )
            if registry.grid is not None:
                remainder_child.deltas = {c: expert.deltas.pop(c) for c in sorted(stays)}
            registry.experts.append(remainder_child)

        registry.experts.remove(expert)
        report.split_events.append(SplitEvent(
            parent_id=expert.expert_id,
            shared_id=shared.expert_id if created_shared else None,
            remainder_id=remainder_child.expert_id if remainder_child is not None else None,
            task_id=expert.task_id,
        ))

    new_blocks = selection - registry.all_owned()
    new_expert = ExpertRecord(expert_id=registry.new_id(), kind=UNIQUE,
                              task_id=task_id, owned=set(new_blocks))
    if registry.grid is not None:
        new_expert.deltas = {c: registry.zero_block(c) for c in sorted(new_blocks)}
    registry.experts.append(new_expert)
    report.new_expert_id = new_expert.expert_id
    for outcome in _layer_new_blocks(report, new_blocks):
        report.outcomes.append(outcome)

    registry.task_selections[task_id] = selection
    return report


def _layer_new_blocks(report: EvolutionReport, new_blocks: IndexSet):
    for layer in sorted({c.layer for c in new_blocks}):
        yield SplitOutcome(
            layer=layer, shared_gain=frozenset(), stays_unique=frozenset(),
            new_task=frozenset(c for c in new_blocks if c.layer == layer),
            provenance=PROV_NONE,
        )


def growth_curve(trace: dict[int, IndexSet],
                 thresholds: SosThresholds) -> list[tuple[int, int, int]]:
    """Replay a selection trace; (step, evolved total, independent total) rows.

    The independent total counts every task's selection separately, the way
    isolated per-task experts would; the evolved total counts blocks after
    sharing deduplicates overlap, so it can never exceed the independent one.
    """
    if len(trace) < 2:
        raise FilterInputError("growth curve needs at least two tasks")
    rows = []
    registry = Registry(grid=None)
    independent = 0
    for step, task_id in enumerate(sorted(trace), start=1):
        selection = frozenset(trace[task_id])
        if step == 1:
            registry.init_first_task(selection)
        else:
            form_experts(registry, step, selection, thresholds)
        independent += len(selection)
        total, _, _ = registry.capacity_snapshot()
        rows.append((step, total, independent))
    return rows


def replay_capacity(trace: dict[int, IndexSet],
                    thresholds: SosThresholds) -> list[tuple[int, int, int, dict]]:
    """Replay a trace and return (step, total, shared, unique-per-task) rows."""
    rows = []
    registry = Registry(grid=None)
    for step, task_id in enumerate(sorted(trace), start=1):
        selection = frozenset(trace[task_id])
        if step == 1:
            registry.init_first_task(selection)
        else:
            form_experts(registry, step, selection, thresholds)
        total, shared, unique = registry.capacity_snapshot()
        rows.append((step, total, shared, unique))
    return rows
