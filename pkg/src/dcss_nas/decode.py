"""Discretize searched architecture parameters and build stand-alone networks.

Operators are chosen by argmax of ``alpha``. Connections are traced
backwards from the four final nodes: every incoming edge with
``beta >= 0`` is kept and its source, unless it belongs to the stem, is
visited in turn. A visited node with no non-negative incoming edge keeps
its single strongest edge instead; ``strict=True`` disables that fallback
and reproduces the bare tracing rule.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np
from loguru import logger

from dcss_nas.config import SupernetSpec
from dcss_nas.errors import ArtifactError
from dcss_nas.models import DecodedArchitecture, NodeEntry
from dcss_nas.nn import Module, ModuleDict
from dcss_nas.supernet.layers import Alignment, Head, MBConv, Stem
from dcss_nas.supernet.params import ArchParams
from dcss_nas.supernet.space import (
    OPERATOR_SPACE,
    Edge,
    NodeId,
    OperatorConfig,
    edge_name,
    final_nodes,
    fusion_nodes,
    incoming,
)
from dcss_nas.tensor import checkpoint, ops
from dcss_nas.tensor.core import Tensor

if TYPE_CHECKING:
    from numpy.typing import NDArray

ONE_HOT_MARGIN = 50.0


def select_operators(
    arch: ArchParams, nodes: Iterable[NodeId] | None = None
) -> dict[NodeId, OperatorConfig]:
    """Argmax operator per mixture layer; ties go to the lowest operator index."""
    chosen: dict[NodeId, OperatorConfig] = {}
    for node in nodes if nodes is not None else fusion_nodes(arch.layers):
        logits = arch.alpha[node].data
        best = int(np.argmax(logits))
        if int(np.count_nonzero(logits == logits[best])) > 1:
            logger.warning(
                f"{node.name}: operator logits tie at {logits[best]:.6g}; "
                f"choosing {OPERATOR_SPACE[best].label}"
            )
        chosen[node] = OPERATOR_SPACE[best]
    return chosen


def trace_connections(arch: ArchParams, *, strict: bool = False) -> tuple[set[Edge], list[NodeId]]:
    """Kept edges plus the nodes where the strongest-edge fallback fired."""
    kept: set[Edge] = set()
    fallback: list[NodeId] = []
    finals = final_nodes(arch.layers)
    queue = deque(finals)
    visited = set(finals)
    while queue:
        node = queue.popleft()
        sources = incoming(node)
        beta = arch.beta[node].data
        keep = [i for i in range(len(sources)) if beta[i] >= 0]
        if not keep and not strict:
            keep = [int(np.argmax(beta))]
            fallback.append(node)
            logger.warning(
                f"{node.name}: no incoming beta >= 0; keeping strongest edge from "
                f"{sources[keep[0]].name}"
            )
        for i in keep:
            src = sources[i]
            kept.add((src, node))
            if src.layer > 0 and src not in visited:
                visited.add(src)
                queue.append(src)
    return kept, fallback


def decode_connections(arch: ArchParams, *, strict: bool = False) -> set[Edge]:
    return trace_connections(arch, strict=strict)[0]


def _edge_order(edge: Edge) -> tuple[int, int, int, int]:
    src, dst = edge
    return (dst.layer, dst.scale, src.layer, src.scale)


def decode(
    arch: ArchParams, spec: SupernetSpec, provenance: str = "", *, strict: bool = False
) -> DecodedArchitecture:
    edges, fallback = trace_connections(arch, strict=strict)
    retained = {dst for _, dst in edges} | {src for src, _ in edges if src.layer > 0}
    ordered = sorted(retained, key=lambda n: (n.layer, n.scale))
    ops_chosen = select_operators(arch, ordered)
    edge_list = sorted(edges, key=_edge_order)
    decoded = DecodedArchitecture(
        nodes=[NodeEntry(id=n.name, op=ops_chosen[n].label) for n in ordered],
        edges=[(s.name, d.name) for s, d in edge_list],
        edge_beta=[float(arch.beta[d].data[incoming(d).index(s)]) for s, d in edge_list],
        spec=spec,
        provenance=provenance,
        strict=strict,
        fallback_nodes=[n.name for n in fallback],
    )
    if not edge_list:
        logger.warning("Decoded architecture has no edges (every traced beta is negative)")
    logger.info(f"Decoded {len(ordered)} nodes and {len(edge_list)} of {arch.edge_count()} edges")
    return decoded


def decode_checkpoint(path: Path, *, strict: bool = False) -> DecodedArchitecture:
    arch, spec, _ = ArchParams.load(path)
    return decode(arch, spec, checkpoint.file_sha256(path), strict=strict)


def implied_arch_params(decoded: DecodedArchitecture) -> ArchParams:
    """Parameters that decode back to ``decoded``.

    ``alpha`` is one-hot with margin 50 on the chosen operators; ``beta`` is
    +50 on kept edges and -50 elsewhere.
    """
    layers = decoded.spec.layers
    chosen = decoded.chosen_ops()
    alpha = {}
    for node in fusion_nodes(layers):
        logits = np.zeros(len(OPERATOR_SPACE))
        if node in chosen:
            logits[OPERATOR_SPACE.index(chosen[node])] = ONE_HOT_MARGIN
        alpha[node] = logits
    edge_beta = {edge: ONE_HOT_MARGIN for edge in decoded.kept_edges()}
    return ArchParams.from_values(layers, alpha, edge_beta, default_beta=-ONE_HOT_MARGIN)


# ---------------------------------------------------------------------------
# Stand-alone network
# ---------------------------------------------------------------------------


class StandaloneNet(Module):
    """Decoded network: one MBConv per retained node, fixed softmax blending of kept inputs."""

    def __init__(self, decoded: DecodedArchitecture, seed: int) -> None:
        super().__init__()
        decoded.validate_structure()
        spec = decoded.spec
        missing = [n.name for n in final_nodes(spec.layers) if n not in decoded.chosen_ops()]
        if missing:
            raise ValueError(f"final nodes without a retained operator: {', '.join(missing)}")
        self.spec = spec
        self.order = sorted(decoded.chosen_ops(), key=lambda n: (n.layer, n.scale))
        self.stem = Stem(spec, np.random.default_rng([seed, 0]))
        self.head = Head(spec, np.random.default_rng([seed, 1]))
        self.nodes = ModuleDict()
        self.alignments = ModuleDict()
        self.sources: dict[NodeId, list[NodeId]] = {}
        self.blend: dict[NodeId, NDArray[np.float64]] = {}
        betas = decoded.beta_of()
        for node, op in decoded.chosen_ops().items():
            self.nodes[node.name] = MBConv(
                spec.widths[node.scale],
                op,
                np.random.default_rng([seed, 3, *node]),
                zero_init=spec.zero_init_residual,
            )
            srcs = [s for s in incoming(node) if (s, node) in betas]
            self.sources[node] = srcs
            with_beta = np.array([betas[(s, node)] for s in srcs])
            e = np.exp(with_beta - with_beta.max())
            self.blend[node] = e / e.sum()
            for src in srcs:
                rng = np.random.default_rng([seed, 5, *src, *node])
                self.alignments[edge_name(src, node)] = Alignment(src, node, spec.widths, rng)

    def forward(self, image: Tensor) -> Tensor:
        outputs: dict[NodeId, Tensor] = {}
        for s, feature in enumerate(self.stem(image)):
            outputs[NodeId(s, 0)] = feature
        for node in self.order:
            aligned = [
                self.alignments[edge_name(src, node)](outputs[src]) for src in self.sources[node]
            ]
            blended = ops.weighted_sum(Tensor(self.blend[node]), aligned)
            outputs[node] = self.nodes[node.name](blended)
        return self.head([outputs[n] for n in final_nodes(self.spec.layers)])


def _inherited_state(
    net: StandaloneNet, supernet_state: Mapping[str, NDArray[np.float64]]
) -> dict[str, NDArray[np.float64]]:
    """Map stand-alone tensor names onto their supernet counterparts."""
    op_index = {
        node: OPERATOR_SPACE.index(mod.op)
        for node in net.order
        if isinstance(mod := net.nodes[node.name], MBConv)
    }
    state: dict[str, NDArray[np.float64]] = {}
    for name in net.state_dict():
        if name.startswith("nodes."):
            _, node_name, rest = name.split(".", 2)
            node = NodeId.parse(node_name)
            source = f"mixtures.{node_name}.op{op_index[node]}.{rest}"
        else:
            source = name
        if source not in supernet_state:
            raise ArtifactError(f"supernet checkpoint lacks {source} (needed for {name})")
        state[name] = supernet_state[source]
    return state


def build_standalone(
    decoded: DecodedArchitecture,
    init: Literal["fresh", "inherit"] = "fresh",
    *,
    seed: int = 0,
    supernet_state: Mapping[str, NDArray[np.float64]] | None = None,
) -> StandaloneNet:
    """Instantiate the decoded network, fresh or with weights copied from the supernet."""
    net = StandaloneNet(decoded, seed)
    if init == "inherit":
        if supernet_state is None:
            raise ValueError("inherit init needs the supernet weights")
        if decoded.spec.channel_ratio != 1.0:
            # sampled operators only see round(r * width) channels
            raise ValueError(
                f"inherit init needs channel_ratio=1, supernet used {decoded.spec.channel_ratio}"
            )
        net.load_state_dict(_inherited_state(net, supernet_state))
    logger.info(f"Stand-alone network ({init}): {net.parameter_count()} parameters")
    return net


def load_supernet_weights(path: Path) -> dict[str, NDArray[np.float64]]:
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "supernet-weights":
        raise ArtifactError(f"{path}: not a supernet weights checkpoint")
    return tensors
