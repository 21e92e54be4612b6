"""Relaxation and path sampling.

Operator weights and transmission probabilities are softmaxes over the
architecture logits. During search each fusion module activates only
``n_paths`` of its inputs, drawn without replacement from the tempered
distribution ``softmax(beta / tau)`` with the Gumbel-top-k trick; the drawn
inputs are then blended with ``softmax(beta)`` restricted to the draw.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
from loguru import logger

from dcss_nas.errors import ShapeError
from dcss_nas.supernet.space import NodeId, fusion_nodes, incoming
from dcss_nas.tensor import ops
from dcss_nas.tensor.core import Tensor

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from dcss_nas.supernet.params import ArchParams

# active input indices per fusion node
SamplingPlan = dict[NodeId, list[int]]


def mixture_weights(alpha: Tensor) -> Tensor:
    return ops.softmax(alpha)


def transmission_probs(beta: Tensor) -> Tensor:
    if beta.size == 0:
        raise ShapeError("transmission_probs", "incoming edges", ">= 1", 0)
    return ops.softmax(beta)


def gumbel_top_k(
    logits: NDArray[np.float64], k: int, rng: np.random.Generator
) -> list[int]:
    """Indices of ``k`` draws without replacement from ``softmax(logits)``, ascending."""
    gumbel = -np.log(-np.log(rng.uniform(np.finfo(np.float64).tiny, 1.0, size=logits.shape)))
    keys = logits + gumbel
    # stable sort keeps ties deterministic
    top = np.argsort(-keys, kind="stable")[:k]
    return sorted(int(i) for i in top)


def sample_indices(
    beta: NDArray[np.float64], tau: float, n_paths: int, rng: np.random.Generator
) -> list[int]:
    degree = beta.shape[0]
    if n_paths >= degree:
        return list(range(degree))
    return gumbel_top_k(beta / tau, n_paths, rng)


def sample_paths(
    node: NodeId, arch: ArchParams, tau: float, n_paths: int, rng: np.random.Generator
) -> list[NodeId]:
    """Distinct sources of ``node`` activated for one iteration."""
    sources = incoming(node)
    if n_paths > len(sources):
        logger.debug(f"{node.name}: n_paths {n_paths} clamped to in-degree {len(sources)}")
    return [sources[i] for i in sample_indices(arch.beta[node].data, tau, n_paths, rng)]


def blend_weights(beta: Tensor, selected: list[int] | None) -> Tensor:
    """``softmax(beta)`` over all inputs, or renormalized over ``selected``."""
    if selected is None or len(selected) == beta.shape[0]:
        return transmission_probs(beta)
    return ops.softmax(ops.take(beta, selected))


def draw_plan(
    arch: ArchParams, tau: float, n_paths: int, rng: np.random.Generator
) -> SamplingPlan:
    """Sample active inputs for every fusion module, in evaluation order."""
    return {
        node: sample_indices(arch.beta[node].data, tau, n_paths, rng)
        for node in fusion_nodes(arch.layers)
    }
