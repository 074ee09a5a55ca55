"""Unified content-based router over the expert population.

One gate row per live expert; the routing logit for expert k on input x is
the plain dot product x . row_k.  Top-k routing is deterministic (ties fall
back to registration order) and the mixture weights used for superposition
are the softmax renormalized over the active set.  When an expert splits,
each child receives a bit-exact copy of the parent's row, so every input's
pre-activation logit for the split pieces equals the parent's exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import softmax


class GateStateError(RuntimeError):
    pass


class GateRegistryError(RuntimeError):
    pass


@dataclass
class GateState:
    dim: int
    top_k: int = 2
    rows: dict = field(default_factory=dict)    # expert_id -> (dim,) float64 row
    order: list = field(default_factory=list)   # append-only registration ledger

    def live_ids(self) -> list:
        """Registered experts that still hold a row, in registration order."""
        return [i for i in self.order if i in self.rows]

    def row_matrix(self) -> np.ndarray:
        return np.stack([self.rows[i] for i in self.live_ids()])

    def register_new_expert(self, expert_id: int, init_rule: str = "zero") -> None:
        """Append a gate row for a brand-new expert (zero row = logit 0)."""
        if expert_id in self.rows or expert_id in self.order:
            raise GateRegistryError(f"expert {expert_id} already registered")
        if init_rule != "zero":
            raise GateRegistryError(f"unknown init rule {init_rule!r}")
        self.rows[expert_id] = np.zeros(self.dim)
        self.order.append(expert_id)

    def expand_on_split(self, parent: int, children: tuple) -> None:
        """Replace a split expert's row with bit-exact copies for its children.

        ``children`` holds one or two fresh ids (shared gain and/or the
        remainder expert).  No arithmetic touches the copied rows, so the
        children's logits are bitwise equal to the parent's for every input.
        """
        if parent not in self.rows:
            raise GateStateError(f"parent {parent} has no gate row")
        for child in children:
            if child in self.rows or child in self.order:
                raise GateRegistryError(f"child {child} already registered")
        parent_row = self.rows.pop(parent)
        for child in children:
            self.rows[child] = parent_row.copy()
            self.order.append(child)


@dataclass(frozen=True)
class BatchRouting:
    """Vectorized routing of a batch: one decision per input row."""

    ids: tuple                 # live expert ids, registration order
    logits: np.ndarray         # (B, N)
    weights_all: np.ndarray    # (B, N) softmax over the full population
    active_mask: np.ndarray    # (B, N) bool, top-k membership
    weights: np.ndarray        # (B, N) renormalized over active, 0 elsewhere


def route_matrix(gate: GateState, X: np.ndarray, pin: int | None = None) -> BatchRouting:
    """Deterministic top-k routing for a batch of inputs.

    ``pin`` forces one expert into every sample's active set (used by the
    trainer to keep the task under optimization from starving before its
    gate row has learned anything); the remaining slots go to the highest
    logits with ties broken by registration order.
    """
    ids = gate.live_ids()
    if not ids:
        raise GateStateError("routing with an empty expert registry")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    R = gate.row_matrix()
    logits = X @ R.T
    B, N = logits.shape
    k = min(gate.top_k, N)

    active = np.zeros((B, N), dtype=bool)
    pin_pos = ids.index(pin) if pin is not None else None
    for b in range(B):
        order = np.argsort(-logits[b], kind="stable")
        if pin_pos is None:
            chosen = order[:k]
        else:
            rest = [j for j in order if j != pin_pos]
            chosen = np.array([pin_pos] + rest[: k - 1], dtype=int)
        active[b, chosen] = True

    weights = np.zeros((B, N))
    shifted = np.where(active, logits, -np.inf)
    mx = shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted - mx)
    weights = e / e.sum(axis=1, keepdims=True)
    return BatchRouting(ids=tuple(ids), logits=logits,
                        weights_all=softmax(logits, axis=1),
                        active_mask=active, weights=weights)


@dataclass(frozen=True)
class RouteResult:
    ids: tuple                    # live expert ids, registration order
    logits: np.ndarray            # (N,) pre-activation logits
    weights_all: np.ndarray       # (N,) softmax over the full population
    active: tuple                 # top-k expert ids, best first
    active_weights: np.ndarray    # (len(active),) renormalized mixture weights


def route(gate: GateState, x: np.ndarray) -> RouteResult:
    """Deterministic top-k routing of a single input vector."""
    batch = route_matrix(gate, np.asarray(x, dtype=np.float64)[None, :])
    logits = batch.logits[0]
    mask = batch.active_mask[0]
    ranked = sorted(np.flatnonzero(mask), key=lambda j: (-logits[j], j))
    return RouteResult(
        ids=batch.ids,
        logits=logits,
        weights_all=batch.weights_all[0],
        active=tuple(batch.ids[j] for j in ranked),
        active_weights=np.array([batch.weights[0, j] for j in ranked]),
    )


def taskfree_forward(base, registry, gate: GateState, x: np.ndarray,
                     engine=None) -> np.ndarray:
    """Routed superposition output; consumes no task identity anywhere."""
    from .model import SuperposedModel  # local import avoids a cycle at import time

    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    X = np.atleast_2d(x)
    routing = route_matrix(gate, X)
    overlays = [(routing.weights[:, j], registry.get(expert_id).deltas)
                for j, expert_id in enumerate(routing.ids)]
    eng = engine if engine is not None else SuperposedModel(base)
    out = eng.forward(overlays, X)
    return out[0] if squeeze else out
