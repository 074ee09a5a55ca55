"""A minimal differentiable model family: block-partitioned linear layers
over a frozen base, with weighted delta overlays and hand-derived gradients.

All math is float64.  The architecture is a stack of square "block layers"
(the ones eligible for sparse selection) with tanh between them, followed by
an optional frozen readout head.  With a single block layer and no head the
model is purely linear, which keeps the small hand-checked examples exact.

Gradients are computed analytically from a recorded forward tape and are
restricted to an explicit active set: coordinates outside it are never
accumulated, so a frozen block's gradient is structurally zero rather than
merely unapplied.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import BlockCoord, Grid, ShapeError, partition

DeltaOverlay = dict  # BlockCoord -> (block) ndarray; absent blocks are exactly zero


class BackwardStateError(RuntimeError):
    """backward() called without a recorded forward pass."""


class NumericError(ArithmeticError):
    """A loss or probe evaluated to a non-finite value."""


@dataclass(frozen=True)
class BaseModel:
    """Frozen backbone: block-eligible square layers plus an optional head.

    The base is never mutated after construction; ``checksum`` is the
    witness used by the immutability tests.
    """

    layers: tuple[np.ndarray, ...]
    head: np.ndarray | None
    block_size: int
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.head.shape[0] if self.head is not None else self.layers[-1].shape[0]

    def grid(self) -> Grid:
        return partition([w.shape for w in self.layers], self.block_size)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.layers:
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        if self.head is not None:
            h.update(np.ascontiguousarray(self.head, dtype="<f8").tobytes())
        return h.hexdigest()

    @staticmethod
    def create(dim: int, n_layers: int, out_dim: int | None, block_size: int,
               rng: np.random.Generator, scale: float = 0.9) -> "BaseModel":
        """Random backbone with contracting layer scale (keeps tanh live)."""
        layers = tuple(rng.normal(0.0, scale / np.sqrt(dim), size=(dim, dim)) for _ in range(n_layers))
        head = None
        if out_dim is not None:
            head = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(out_dim, dim))
        return BaseModel(layers=layers, head=head, block_size=block_size, seed=0)


def materialize(overlay: DeltaOverlay, grid: Grid) -> list[np.ndarray]:
    """Dense per-layer matrices for an overlay; zeros outside owned blocks."""
    dense = [np.zeros(dims) for dims in grid.layer_dims]
    for coord, block in overlay.items():
        rs, cs = grid.block_slices(coord)
        expect = (rs.stop - rs.start, cs.stop - cs.start)
        if block.shape != expect:
            raise ShapeError(f"block at {coord} has shape {block.shape}, grid expects {expect}")
        dense[coord.layer][rs, cs] = block
    return dense


@dataclass
class Tape:
    """Recorded forward state for one batch."""

    H: list[np.ndarray]            # activations entering each layer, H[0] = X
    U: list[np.ndarray]            # pre-activations per layer
    effective: list[np.ndarray]    # W0 + sum_k w_k D_k per layer
    dense_deltas: list[list[np.ndarray]]   # per overlay, per layer
    weights: np.ndarray            # (B, N) mixture weights
    outputs: np.ndarray


@dataclass
class GradientBundle:
    """Gradients restricted to the requested active set.

    ``block_grads`` only holds entries that were accumulated; everything
    else is exactly zero, which :meth:`block_grad` makes explicit.
    """

    block_grads: dict[tuple[int, BlockCoord], np.ndarray] = field(default_factory=dict)
    weight_grads: np.ndarray | None = None   # (B, N) d loss / d mixture weight
    base_grads: list[np.ndarray] | None = None
    grid: Grid | None = None

    def block_grad(self, overlay_index: int, coord: BlockCoord) -> np.ndarray:
        g = self.block_grads.get((overlay_index, coord))
        if g is not None:
            return g
        rs, cs = self.grid.block_slices(coord)
        return np.zeros((rs.stop - rs.start, cs.stop - cs.start))


class SuperposedModel:
    """Forward/backward engine for base + weighted overlays.

    One instance is single-writer: ``forward(record=True)`` stores the tape
    consumed by the next ``backward``.  Read-only evaluation with
    ``record=False`` is side-effect free.
    """

    def __init__(self, base: BaseModel):
        self.base = base
        self.grid = base.grid()
        self._tape: Tape | None = None

    # -- forward -----------------------------------------------------------

    def forward(self, overlays: list[tuple], X: np.ndarray, record: bool = False) -> np.ndarray:
        """Superposed forward pass.

        ``overlays`` is a list of (weight, DeltaOverlay); weight may be a
        scalar or a length-B vector of per-sample mixture weights.  The
        output per layer is ``W0 h + sum_k w_k (D_k h)`` with tanh between
        block layers and a linear head (or linear last layer when no head).
        """
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[None, :]
        if X.shape[1] != self.base.dim:
            raise ShapeError(f"input dim {X.shape[1]} != model dim {self.base.dim}")
        B = X.shape[0]

        n = len(overlays)
        weights = np.ones((B, n))
        dense_all: list[list[np.ndarray]] = []
        for k, (w, overlay) in enumerate(overlays):
            w = np.asarray(w, dtype=np.float64)
            if not np.all(np.isfinite(w)):
                raise NumericError("non-finite overlay weight")
            weights[:, k] = w  # broadcasts scalars
            dense_all.append(materialize(overlay, self.grid))

        L = len(self.base.layers)
        H: list[np.ndarray] = [X]
        U: list[np.ndarray] = []
        effective: list[np.ndarray] = []
        h = X
        uniform = n == 0 or all(np.ptp(weights[:, k]) == 0.0 for k in range(n))
        for i, W0 in enumerate(self.base.layers):
            if uniform:
                M = W0.copy()
                for k in range(n):
                    wk = weights[0, k] if B else 0.0
                    if wk != 0.0:
                        M += wk * dense_all[k][i]
                effective.append(M)
                u = h @ M.T
            else:
                effective.append(W0)  # per-sample weights: no shared effective matrix
                u = h @ W0.T
                for k in range(n):
                    u += weights[:, k, None] * (h @ dense_all[k][i].T)
            U.append(u)
            last = i == L - 1
            h = u if (last and self.base.head is None) else np.tanh(u)
            H.append(h)

        out = h if self.base.head is None else h @ self.base.head.T
        if record:
            self._tape = Tape(H=H, U=U, effective=effective, dense_deltas=dense_all,
                              weights=weights, outputs=out)
        return out[0] if squeeze else out

    # -- backward ----------------------------------------------------------

    def backward(
        self,
        dL_dout: np.ndarray,
        active: dict[int, frozenset] | None = None,
        want_weight_grads: bool = False,
        want_base_grads: bool = False,
    ) -> GradientBundle:
        """Chain-rule gradients from the recorded tape.

        ``active`` maps overlay index -> set of block coords whose delta
        gradients are wanted; all other coordinates are structurally zero.
        ``want_weight_grads`` adds per-sample gradients w.r.t. each mixture
        weight (the hook the router chains through); ``want_base_grads``
        adds dense gradients w.r.t. the frozen base weights (used only for
        importance scoring, never for updates).
        """
        tape = self._tape
        if tape is None:
            raise BackwardStateError("backward called before any recorded forward")
        active = active or {}

        dL_dout = np.asarray(dL_dout, dtype=np.float64)
        if dL_dout.ndim == 1:
            dL_dout = dL_dout[None, :]
        B = tape.H[0].shape[0]
        n = tape.weights.shape[1]
        L = len(self.base.layers)

        out = GradientBundle(grid=self.grid)
        if want_weight_grads:
            out.weight_grads = np.zeros((B, n))
        if want_base_grads:
            out.base_grads = [np.zeros(dims) for dims in self.grid.layer_dims]

        # gradient w.r.t. the activation leaving the last layer
        delta_h = dL_dout if self.base.head is None else dL_dout @ self.base.head

        per_sample = np.ptp(tape.weights, axis=0).max() > 0.0 if n else False
        for i in range(L - 1, -1, -1):
            last = i == L - 1
            if last and self.base.head is None:
                gamma = delta_h
            else:
                gamma = delta_h * (1.0 - np.tanh(tape.U[i]) ** 2)

            h_in = tape.H[i]
            for k in range(n):
                coords = active.get(k)
                if coords:
                    layer_coords = [c for c in coords if c.layer == i]
                    if layer_coords:
                        scaled = gamma * tape.weights[:, k, None]
                        dense_grad = scaled.T @ h_in
                        for coord in sorted(layer_coords):
                            rs, cs = self.grid.block_slices(coord)
                            key = (k, coord)
                            piece = dense_grad[rs, cs]
                            if key in out.block_grads:
                                out.block_grads[key] = out.block_grads[key] + piece
                            else:
                                out.block_grads[key] = piece.copy()
                if out.weight_grads is not None:
                    contrib = h_in @ tape.dense_deltas[k][i].T
                    out.weight_grads[:, k] += np.sum(gamma * contrib, axis=1)

            if out.base_grads is not None:
                out.base_grads[i] += gamma.T @ h_in

            # propagate to the layer input through the full effective map
            if per_sample:
                back = gamma @ self.base.layers[i]
                for k in range(n):
                    back += tape.weights[:, k, None] * (gamma @ tape.dense_deltas[k][i])
                delta_h = back
            else:
                delta_h = gamma @ tape.effective[i]
        return out


# -- losses ---------------------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(labels)
    B = logits.shape[0]
    p = softmax(logits, axis=1)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.mean(np.log(p[np.arange(B), labels] + eps)))
    grad = p.copy()
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def squared_error(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. the outputs."""
    outputs = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    diff = outputs - targets
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / diff.size


# -- gradient verification --------------------------------------------------

def finite_diff_check(f, theta0: np.ndarray, analytic: np.ndarray,
                      step: float = 1e-5, tolerance: float = 1e-4) -> float:
    """Max relative error between ``analytic`` and central differences of f.

    ``f`` maps a flat parameter vector to a scalar loss.  Returns
    ``max_i |analytic_i - fd_i| / max(1, |analytic_i|)``; the check passes
    iff the result is <= ``tolerance`` (the caller asserts).  Raises
    :class:`NumericError` if any probe is non-finite.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta0 = np.asarray(theta0, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if theta0.shape != analytic.shape:
        raise ShapeError("analytic gradient shape differs from parameter shape")
    worst = 0.0
    for i in range(theta0.size):
        probe = theta0.copy()
        probe[i] = theta0[i] + step
        up = f(probe)
        probe[i] = theta0[i] - step
        down = f(probe)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while probing coordinate {i}")
        fd = (up - down) / (2.0 * step)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    del tolerance  # part of the contract; comparison is the caller's assert
    return worst


# -- snapshots --------------------------------------------------------------

def save_base(base: BaseModel, directory: str | Path) -> None:
    """Write a manifest plus raw little-endian float64 arrays."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "dims": [list(w.shape) for w in base.layers],
        "head_dims": list(base.head.shape) if base.head is not None else None,
        "block_size": base.block_size,
        "seed": base.seed,
    }
    (directory / "base_manifest.json").write_text(json.dumps(manifest, indent=1))
    for i, w in enumerate(base.layers):
        (directory / f"base_layer{i}.bin").write_bytes(np.ascontiguousarray(w, dtype="<f8").tobytes())
    if base.head is not None:
        (directory / "base_head.bin").write_bytes(np.ascontiguousarray(base.head, dtype="<f8").tobytes())


def load_base(directory: str | Path) -> BaseModel:
    directory = Path(directory)
    manifest = json.loads((directory / "base_manifest.json").read_text())
    layers = []
    for i, dims in enumerate(manifest["dims"]):
        raw = (directory / f"base_layer{i}.bin").read_bytes()
        layers.append(np.frombuffer(raw, dtype="<f8").reshape(dims).copy())
    head = None
    if manifest["head_dims"] is not None:
        raw = (directory / "base_head.bin").read_bytes()
        head = np.frombuffer(raw, dtype="<f8").reshape(manifest["head_dims"]).copy()
    return BaseModel(layers=tuple(layers), head=head,
                     block_size=manifest["block_size"], seed=manifest["seed"])
