"""The supernet: stem, L x 4 fusion modules and the prediction head."""

from __future__ import annotations

from collections.abc import Iterable
from typing import Literal

import numpy as np
from loguru import logger

from dcss_nas.config import SupernetSpec
from dcss_nas.errors import ShapeError
from dcss_nas.nn import Module, ModuleDict
from dcss_nas.supernet.layers import Alignment, Head, MixtureLayer, Stem, channel_mask
from dcss_nas.supernet.params import ArchParams
from dcss_nas.supernet.sampling import SamplingPlan, blend_weights, draw_plan, mixture_weights
from dcss_nas.supernet.space import (
    NodeId,
    edge_name,
    final_nodes,
    fusion_nodes,
    incoming,
    parse_edge,
)
from dcss_nas.tensor import ops
from dcss_nas.tensor.core import Tensor


class Supernet(Module):
    """Weights ``w`` of the relaxed search space; architecture parameters are passed in.

    Random streams are keyed by ``seed`` and the structural position of each
    component, so a branch created late in a run (alignment branches are
    instantiated the first time their edge is sampled) receives the same
    initialization it would have received eagerly.
    """

    def __init__(self, spec: SupernetSpec, seed: int) -> None:
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.stem = Stem(spec, np.random.default_rng([seed, 0]))
        self.head = Head(spec, np.random.default_rng([seed, 1]))
        self.mixtures = ModuleDict()
        self.masks: dict[NodeId, np.ndarray] = {}
        for node in fusion_nodes(spec.layers):
            channels = spec.widths[node.scale]
            mask = channel_mask(
                channels, spec.channel_ratio, np.random.default_rng([seed, 2, *node])
            )
            self.masks[node] = mask
            self.mixtures[node.name] = MixtureLayer(
                channels,
                mask,
                np.random.default_rng([seed, 3, *node]),
                zero_init=spec.zero_init_residual,
            )
        self.alignments = ModuleDict()

    def mixture(self, node: NodeId) -> MixtureLayer:
        layer = self.mixtures[node.name]
        assert isinstance(layer, MixtureLayer)
        return layer

    def alignment(self, src: NodeId, dst: NodeId) -> Alignment:
        key = edge_name(src, dst)
        if key not in self.alignments:
            rng = np.random.default_rng([self.seed, 5, *src, *dst])
            branch = Alignment(src, dst, self.spec.widths, rng)
            branch.train(self.training)
            self.alignments[key] = branch
            logger.debug(f"Alignment branch created: {key}")
        layer = self.alignments[key]
        assert isinstance(layer, Alignment)
        return layer

    def ensure_alignments(self, names: Iterable[str]) -> None:
        """Create the alignment branches named in a saved state before loading it."""
        for name in names:
            if name.startswith("alignments."):
                key = name.split(".")[1]
                self.alignment(*parse_edge(key))

    def fusion_module(
        self,
        node: NodeId,
        arch: ArchParams,
        outputs: dict[NodeId, Tensor],
        selected: list[int] | None,
    ) -> Tensor:
        """Blend the aligned active inputs of ``node`` and apply its mixture layer."""
        sources = incoming(node)
        active = list(range(len(sources))) if selected is None else selected
        weights = blend_weights(arch.beta[node], selected)
        aligned = []
        for i in active:
            feature = self.alignment(sources[i], node)(outputs[sources[i]])
            expected = (self.spec.widths[node.scale], *outputs[NodeId(node.scale, 0)].shape[2:])
            if feature.shape[1:] != expected:
                raise ShapeError(
                    "fusion_module", f"aligned {sources[i].name}", expected, feature.shape
                )
            aligned.append(feature)
        blended = ops.weighted_sum(weights, aligned)
        return self.mixture(node)(blended, mixture_weights(arch.alpha[node]))

    def forward(
        self, image: Tensor, arch: ArchParams, plan: SamplingPlan | None = None
    ) -> Tensor:
        """Logits at input resolution; ``plan=None`` evaluates every candidate edge."""
        if arch.layers != self.spec.layers:
            raise ShapeError("supernet", "layers", self.spec.layers, arch.layers)
        outputs: dict[NodeId, Tensor] = {}
        for s, feature in enumerate(self.stem(image)):
            outputs[NodeId(s, 0)] = feature
        for node in fusion_nodes(self.spec.layers):
            selected = None if plan is None else plan[node]
            outputs[node] = self.fusion_module(node, arch, outputs, selected)
        return self.head([outputs[n] for n in final_nodes(self.spec.layers)])

    def build_all_alignments(self) -> None:
        for dst in fusion_nodes(self.spec.layers):
            for src in incoming(dst):
                self.alignment(src, dst)


def supernet_forward(
    net: Supernet,
    image: Tensor,
    arch: ArchParams,
    mode: Literal["sampled", "full"] = "full",
    *,
    tau: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Evaluate ``net`` over every edge (``full``) or over a freshly drawn path sample."""
    if mode == "full":
        return net(image, arch)
    if rng is None:
        raise ValueError("sampled mode needs an explicit random generator")
    return net(image, arch, draw_plan(arch, tau, net.spec.paths, rng))
