"""Named-parameter plumbing shared by all field modules.

Every params container exposes ``named_arrays(prefix)`` yielding
``(name, ndarray)``. A ``ParamBinding`` wraps a subset of those arrays in
tape Nodes during training; outside training it hands back the raw arrays,
so field code is identical on both paths.
"""

from typing import Callable, Dict, Optional

import numpy as np

from ..nn.tape import Node, Tape


def collect_named_arrays(*containers) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for prefix, container in containers:
        for name, arr in container.named_arrays(prefix):
            if name in out:
                raise ValueError(f"duplicate parameter name {name}")
            out[name] = arr
    return out


class ParamBinding:
    """Maps parameter names to tape Nodes (trainable) or raw arrays (frozen)."""

    def __init__(self, tape: Optional[Tape] = None,
                 trainable: Optional[Callable[[str], bool]] = None):
        self.tape = tape
        self.trainable = trainable or (lambda name: True)
        self.nodes: Dict[str, Node] = {}

    def get(self, name: str, arr: np.ndarray):
        if self.tape is None or not self.trainable(name):
            return arr
        node = self.nodes.get(name)
        if node is None:
            node = Node(arr)
            self.nodes[name] = node
        return node

    def mlp(self, prefix: str, params) -> list:
        """Weight-node list for mlp_forward_nodes / stacked_mlp_forward."""
        return [
            (self.get(f"{prefix}.w{k}", params.weights[k]),
             self.get(f"{prefix}.b{k}", params.biases[k]))
            for k in range(len(params.weights))
        ]

    def conv(self, prefix: str, params) -> list:
        return [
            (self.get(f"{prefix}.k{k}", params.kernels[k]),
             self.get(f"{prefix}.b{k}", params.biases[k]))
            for k in range(len(params.kernels))
        ]

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: node.adjoint for name, node in self.nodes.items()
                if node.adjoint is not None}
