"""Architecture parameters: operator logits ``alpha`` and connection logits ``beta``."""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from dcss_nas.config import SupernetSpec
from dcss_nas.errors import ArtifactError
from dcss_nas.supernet.space import (
    OPERATOR_SPACE,
    Edge,
    NodeId,
    fusion_nodes,
    incoming,
)
from dcss_nas.tensor import checkpoint
from dcss_nas.tensor.core import Tensor

if TYPE_CHECKING:
    from numpy.typing import NDArray

BETA_INIT_STD = 0.01


class ArchParams:
    """``alpha[node]`` holds 6 operator logits; ``beta[node]`` the logits of its 4*l inputs.

    ``beta[node][i]`` belongs to the edge from ``incoming(node)[i]``.
    """

    def __init__(
        self, layers: int, alpha: Mapping[NodeId, Tensor], beta: Mapping[NodeId, Tensor]
    ) -> None:
        self.layers = layers
        self.alpha = dict(alpha)
        self.beta = dict(beta)
        expected = fusion_nodes(layers)
        if sorted(self.alpha) != sorted(expected) or sorted(self.beta) != sorted(expected):
            raise ValueError(f"architecture parameters do not cover the {layers}-layer space")
        for node in expected:
            if self.alpha[node].shape != (len(OPERATOR_SPACE),):
                raise ValueError(f"alpha[{node.name}] must hold {len(OPERATOR_SPACE)} logits")
            if self.beta[node].shape != (4 * node.layer,):
                raise ValueError(f"beta[{node.name}] must hold {4 * node.layer} logits")

    @classmethod
    def initialize(cls, layers: int, seed: int) -> ArchParams:
        """``alpha = 0`` (uniform operators), ``beta ~ N(0, 0.01^2)``."""
        rng = np.random.default_rng([seed, 4])
        alpha = {
            n: Tensor(np.zeros(len(OPERATOR_SPACE)), requires_grad=True, name=f"alpha/{n.name}")
            for n in fusion_nodes(layers)
        }
        beta = {
            n: Tensor(
                rng.normal(0.0, BETA_INIT_STD, size=4 * n.layer),
                requires_grad=True,
                name=f"beta/{n.name}",
            )
            for n in fusion_nodes(layers)
        }
        return cls(layers, alpha, beta)

    @classmethod
    def from_values(
        cls,
        layers: int,
        alpha: Mapping[NodeId, Any],
        edge_beta: Mapping[Edge, float],
        *,
        default_beta: float = 0.0,
    ) -> ArchParams:
        """Build parameters from plain numbers; unlisted edges get ``default_beta``."""
        alpha_t = {
            n: Tensor(np.asarray(alpha[n], dtype=np.float64), requires_grad=True)
            for n in fusion_nodes(layers)
        }
        beta_t = {
            n: Tensor(
                [edge_beta.get((src, n), default_beta) for src in incoming(n)], requires_grad=True
            )
            for n in fusion_nodes(layers)
        }
        return cls(layers, alpha_t, beta_t)

    # -- views --------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = [(f"alpha/{n.name}", t) for n, t in self.alpha.items()]
        named += [(f"beta/{n.name}", t) for n, t in self.beta.items()]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def edge_betas(self) -> dict[Edge, float]:
        return {
            (src, dst): float(self.beta[dst].data[i])
            for dst in fusion_nodes(self.layers)
            for i, src in enumerate(incoming(dst))
        }

    def edge_count(self) -> int:
        return sum(t.size for t in self.beta.values())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.parameters())

    def arrays(self) -> dict[str, NDArray[np.float64]]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_arrays(self, arrays: Mapping[str, NDArray[np.float64]]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise ArtifactError(f"architecture checkpoint lacks {name}")
            if arrays[name].shape != t.shape:
                raise ArtifactError(f"{name}: shape {arrays[name].shape} != {t.shape}")
            t.data[...] = arrays[name]

    def copy(self) -> ArchParams:
        clone = ArchParams.from_values(self.layers, {n: t.data for n, t in self.alpha.items()}, {})
        clone.load_arrays(self.arrays())
        return clone

    # -- persistence --------------------------------------------------------

    def save(self, path: Path, spec: SupernetSpec, extra: Mapping[str, Any] | None = None) -> str:
        meta = {
            "kind": "arch",
            "layers": self.layers,
            "width": spec.width,
            "scales": ["1/4", "1/8", "1/16", "1/32"],
            "operators": [op.label for op in OPERATOR_SPACE],
            "spec": spec.model_dump(mode="json"),
            **dict(extra or {}),
        }
        return checkpoint.save(path, self.arrays(), meta)

    @classmethod
    def load(cls, path: Path) -> tuple[ArchParams, SupernetSpec, dict[str, Any]]:
        meta, arrays = checkpoint.load(path)
        if meta.get("kind") != "arch":
            raise ArtifactError(f"{path}: not an architecture checkpoint")
        if meta.get("operators") != [op.label for op in OPERATOR_SPACE]:
            raise ArtifactError(f"{path}: operator order {meta.get('operators')} not supported")
        spec = SupernetSpec.model_validate(meta["spec"])
        arch = cls.initialize(spec.layers, seed=0)
        arch.load_arrays(arrays)
        if not arch.is_finite():
            raise ArtifactError(f"{path}: architecture parameters are not finite")
        return arch, spec, meta
