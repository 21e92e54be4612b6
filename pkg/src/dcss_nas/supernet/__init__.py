"""Densely connected search space, its continuous relaxation and path sampling."""

from dcss_nas.supernet.network import Supernet, supernet_forward
from dcss_nas.supernet.params import ArchParams
from dcss_nas.supernet.space import NodeId, OperatorConfig, candidate_edges

__all__ = [
    "ArchParams",
    "NodeId",
    "OperatorConfig",
    "Supernet",
    "candidate_edges",
    "supernet_forward",
]
