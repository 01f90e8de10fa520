"""Tiny MLPs: parameter containers, init, forward (plain or node-batched)."""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tape as ops
from .tape import Tape, value_of

ACTIVATIONS = ("relu", "elu", "none")


@dataclass
class MlpParams:
    """Affine chain with per-layer activation tags in {relu, elu, none}."""

    weights: List[np.ndarray]  # each (Din, Dout)
    biases: List[np.ndarray]  # each (Dout,)
    activations: List[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer lists must have equal length")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for k in range(len(self.weights) - 1):
            if self.weights[k].shape[1] != self.weights[k + 1].shape[0]:
                raise ValueError("adjacent layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape mismatch")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named_arrays(self, prefix: str):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{k}", w
            yield f"{prefix}.b{k}", b


def _glorot(rng: np.random.Generator, din: int, dout: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (din + dout))
    return rng.uniform(-bound, bound, size=(din, dout)).astype(dtype)


def mlp_init(rng: np.random.Generator, dims: List[int], activation: str = "relu",
             final_activation: str = "none", dtype=np.float32) -> MlpParams:
    """Glorot-uniform init; hidden layers share ``activation``."""
    weights, biases, acts = [], [], []
    for k in range(len(dims) - 1):
        weights.append(_glorot(rng, dims[k], dims[k + 1], dtype))
        biases.append(np.zeros(dims[k + 1], dtype=dtype))
        acts.append(activation if k < len(dims) - 2 else final_activation)
    return MlpParams(weights, biases, acts)


def stack_mlps(mlps: List[MlpParams]) -> "StackedMlpParams":
    """Stack N same-shape MLPs into batched (N, Din, Dout) weight tensors."""
    weights = [np.stack([m.weights[k] for m in mlps])
               for k in range(len(mlps[0].weights))]
    biases = [np.stack([m.biases[k] for m in mlps])
              for k in range(len(mlps[0].biases))]
    return StackedMlpParams(weights, biases, list(mlps[0].activations))


@dataclass
class StackedMlpParams:
    """N parallel same-architecture MLPs as (N, Din, Dout) tensors."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]

    @property
    def count(self) -> int:
        return self.weights[0].shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[2]

    def named_arrays(self, prefix: str):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{k}", w
            yield f"{prefix}.b{k}", b


def _activate(tape, x, act):
    if act == "relu":
        return ops.relu(tape, x)
    if act == "elu":
        return ops.elu(tape, x)
    return x


def mlp_forward(params: MlpParams, x, tape: Optional[Tape] = None):
    """Standard affine+activation chain; x is (..., Din)."""
    if value_of(x).shape[-1] != params.in_dim:
        raise ValueError(
            f"input dim {value_of(x).shape[-1]} does not match MLP in_dim {params.in_dim}"
        )
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = ops.add(tape, ops.matmul(tape, h, w), b)
        h = _activate(tape, h, act)
    return h


def mlp_forward_nodes(params, x, tape: Optional[Tape], weight_nodes=None):
    """Forward with explicit (possibly Node-wrapped) weight list.

    ``weight_nodes``: optional list of (w, b) pairs (Nodes or arrays) standing
    in for ``params``' arrays when parameters are being optimized on a tape.
    """
    h = x
    for k, act in enumerate(params.activations):
        w, b = (weight_nodes[k] if weight_nodes is not None
                else (params.weights[k], params.biases[k]))
        h = ops.add(tape, ops.matmul(tape, h, w), b)
        h = _activate(tape, h, act)
    return h


def stacked_mlp_forward(params: StackedMlpParams, x, tape: Optional[Tape] = None,
                        weight_nodes=None):
    """Batched forward over N parallel MLPs: x (N, M, Din) -> (N, M, Dout)."""
    h = x
    for k, act in enumerate(params.activations):
        w, b = (weight_nodes[k] if weight_nodes is not None
                else (params.weights[k], params.biases[k]))
        wb = value_of(b)
        h = ops.add(tape, ops.matmul(tape, h, w), ops.reshape(tape, b, (wb.shape[0], 1, wb.shape[1])))
        h = _activate(tape, h, act)
    return h
