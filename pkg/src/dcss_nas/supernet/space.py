"""Enumeration of the densely connected search space.

Nodes are ``(scale_index, layer)`` pairs: layer 0 is the stem pyramid, layers
1..L hold fusion modules. Every node at layer ``l >= 1`` receives a candidate
connection from each of the ``4 * l`` nodes in earlier layers, listed in a
canonical order (ascending layer, then ascending scale) that every ``beta``
vector follows.
"""

from __future__ import annotations

from typing import NamedTuple

from pydantic import BaseModel, ConfigDict

from dcss_nas.config import NUM_SCALES, OPERATORS


class NodeId(NamedTuple):
    scale: int
    layer: int

    @property
    def name(self) -> str:
        return f"s{self.scale}_l{self.layer}"

    @classmethod
    def parse(cls, name: str) -> NodeId:
        try:
            s, l = name.split("_")
            if not (s.startswith("s") and l.startswith("l")):
                raise ValueError
            return cls(int(s[1:]), int(l[1:]))
        except ValueError as e:
            raise ValueError(f"not a node name: {name!r}") from e


Edge = tuple[NodeId, NodeId]


class OperatorConfig(BaseModel):
    """One MBConv configuration of the operator space."""

    model_config = ConfigDict(frozen=True)

    kernel: int
    expansion: int

    @property
    def label(self) -> str:
        return f"k{self.kernel}e{self.expansion}"

    @classmethod
    def parse(cls, label: str) -> OperatorConfig:
        for op in OPERATOR_SPACE:
            if op.label == label:
                return op
        raise ValueError(f"unknown operator {label!r}")


OPERATOR_SPACE: tuple[OperatorConfig, ...] = tuple(
    OperatorConfig(kernel=k, expansion=e) for k, e in OPERATORS
)


def edge_name(src: NodeId, dst: NodeId) -> str:
    return f"{src.name}->{dst.name}"


def parse_edge(name: str) -> Edge:
    src, _, dst = name.partition("->")
    return NodeId.parse(src), NodeId.parse(dst)


def stem_nodes() -> list[NodeId]:
    return [NodeId(s, 0) for s in range(NUM_SCALES)]


def fusion_nodes(layers: int) -> list[NodeId]:
    """Mixture-layer nodes in evaluation order (layer-major, then scale)."""
    return [NodeId(s, l) for l in range(1, layers + 1) for s in range(NUM_SCALES)]


def final_nodes(layers: int) -> list[NodeId]:
    return [NodeId(s, layers) for s in range(NUM_SCALES)]


def incoming(node: NodeId) -> list[NodeId]:
    """Candidate sources of ``node`` in canonical order."""
    return [NodeId(s, l) for l in range(node.layer) for s in range(NUM_SCALES)]


def candidate_edges(layers: int) -> list[Edge]:
    return [(src, dst) for dst in fusion_nodes(layers) for src in incoming(dst)]
