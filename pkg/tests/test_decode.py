"""Tests for architecture decoding and stand-alone network construction."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from dcss_nas.config import SupernetSpec
from dcss_nas.decode import (
    build_standalone,
    decode,
    decode_checkpoint,
    decode_connections,
    implied_arch_params,
    load_supernet_weights,
    select_operators,
    trace_connections,
)
from dcss_nas.errors import ArtifactError
from dcss_nas.supernet import ArchParams, NodeId, Supernet
from dcss_nas.supernet.space import OPERATOR_SPACE, Edge, final_nodes, fusion_nodes, incoming
from dcss_nas.tensor import Tensor, checkpoint
from tests.conftest import make_arch_params, make_spec


def _random_signs(rng: np.random.Generator, degree: int) -> np.ndarray:
    keep = rng.random(degree) < 0.4
    return np.where(keep, rng.uniform(0.0, 2.0, degree), -rng.uniform(0.1, 2.0, degree))


def _reachable_edges(arch: ArchParams) -> set[Edge]:
    """Edges with beta >= 0 lying on some all-non-negative path into the final layer."""
    useful = set(final_nodes(arch.layers))
    for layer in range(arch.layers - 1, 0, -1):
        for node in fusion_nodes(arch.layers):
            if node.layer != layer:
                continue
            for dst in useful.copy():
                i = incoming(dst).index(node) if node.layer < dst.layer else None
                if i is not None and arch.beta[dst].data[i] >= 0:
                    useful.add(node)
                    break
    return {
        (src, dst)
        for dst in useful
        for i, src in enumerate(incoming(dst))
        if arch.beta[dst].data[i] >= 0
    }


def _equivalence_arch(layers: int, seed: int) -> ArchParams:
    """Clear-cut parameters: one dominant operator, kept edges in [0, 2], the rest at -60."""
    rng = np.random.default_rng(seed)
    alpha = {}
    edge_beta: dict[Edge, float] = {}
    for node in fusion_nodes(layers):
        logits = np.zeros(len(OPERATOR_SPACE))
        logits[rng.integers(len(OPERATOR_SPACE))] = 50.0
        alpha[node] = logits
        sources = incoming(node)
        kept = rng.random(len(sources)) < 0.4
        kept[rng.integers(len(sources))] = True
        for src, keep in zip(sources, kept, strict=True):
            if keep:
                edge_beta[(src, node)] = float(rng.uniform(0.0, 2.0))
    return ArchParams.from_values(layers, alpha, edge_beta, default_beta=-60.0)


# ---------------------------------------------------------------------------
# Operator selection
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("chosen", range(6))
def test_select_operators_takes_argmax(chosen: int) -> None:
    arch = make_arch_params(2, chosen=chosen)
    ops = select_operators(arch)
    assert set(ops.values()) == {OPERATOR_SPACE[chosen]}


def test_select_operators_tie_goes_to_lowest_index() -> None:
    arch = make_arch_params(1)
    node = fusion_nodes(1)[0]
    arch.alpha[node].data[...] = [0.0, 2.0, 0.0, 2.0, 0.0, 2.0]
    assert select_operators(arch, [node])[node] == OPERATOR_SPACE[1]


# ---------------------------------------------------------------------------
# Connection tracing
# ---------------------------------------------------------------------------


def test_strict_tracing_matches_reachability() -> None:
    for trial in range(1000):
        arch = make_arch_params(1 + trial % 4, beta=_random_signs, seed=trial)
        kept, fallback = trace_connections(arch, strict=True)
        assert kept == _reachable_edges(arch), f"trial {trial}"
        assert fallback == []


def test_all_non_negative_keeps_every_edge() -> None:
    arch = make_arch_params(3, beta=0.0)
    assert len(decode_connections(arch, strict=True)) == 8 * 3 * 4


def test_all_negative_strict_is_empty(tiny_spec: SupernetSpec) -> None:
    arch = make_arch_params(2, beta=-1.0)
    decoded = decode(arch, tiny_spec, strict=True)
    assert decoded.edges == []
    assert decoded.nodes == []


def test_all_negative_falls_back_to_strongest_edge(tiny_spec: SupernetSpec) -> None:
    arch = make_arch_params(2, beta=-1.0)
    for node in final_nodes(2):
        arch.beta[node].data[5] = -0.5
    decoded = decode(arch, tiny_spec)
    # every final keeps its edge from s1_l1, which keeps its strongest (first) stem edge
    expected = {(NodeId(1, 1), n) for n in final_nodes(2)} | {(NodeId(0, 0), NodeId(1, 1))}
    assert decoded.kept_edges() == expected
    assert set(decoded.fallback_nodes) == {n.name for n in final_nodes(2)} | {"s1_l1"}
    decoded.validate_structure()


def test_fallback_only_where_needed(tiny_spec: SupernetSpec) -> None:
    arch = make_arch_params(2, beta=1.0)
    arch.beta[NodeId(2, 2)].data[...] = -1.0
    _, fallback = trace_connections(arch)
    assert fallback == [NodeId(2, 2)]


def test_decoded_structure_ordering(tiny_spec: SupernetSpec) -> None:
    arch = make_arch_params(2, beta=_random_signs, seed=3)
    decoded = decode(arch, tiny_spec, provenance="abc")
    assert decoded.provenance == "abc"
    parsed = [(NodeId.parse(s), NodeId.parse(d)) for s, d in decoded.edges]
    keys = [(d.layer, d.scale, s.layer, s.scale) for s, d in parsed]
    assert keys == sorted(keys)
    for (s, d), b in zip(decoded.edges, decoded.edge_beta, strict=True):
        dst = NodeId.parse(d)
        assert b == arch.beta[dst].data[incoming(dst).index(NodeId.parse(s))]
        assert b >= 0


def test_retained_nodes_are_destinations_and_sources() -> None:
    arch = make_arch_params(3, beta=_random_signs, seed=11)
    decoded = decode(arch, make_spec(layers=3))
    edges = decoded.kept_edges()
    expected = {d for _, d in edges} | {s for s, _ in edges if s.layer > 0}
    assert set(decoded.chosen_ops()) == expected


@pytest.mark.parametrize("seed", range(5))
def test_decoding_is_idempotent(seed: int) -> None:
    spec = make_spec(layers=3)
    arch = make_arch_params(3, beta=_random_signs, seed=seed, chosen=seed % 6)
    first = decode(arch, spec)
    second = decode(implied_arch_params(first), spec)
    assert second.nodes == first.nodes
    assert second.edges == first.edges


def test_decode_checkpoint_records_provenance(tmp_path: Path, tiny_spec: SupernetSpec) -> None:
    path = tmp_path / "arch.ckpt"
    digest = ArchParams.initialize(tiny_spec.layers, seed=0).save(path, tiny_spec)
    decoded = decode_checkpoint(path)
    assert decoded.provenance == digest == checkpoint.file_sha256(path)
    assert decoded.spec == tiny_spec


# ---------------------------------------------------------------------------
# Stand-alone networks
# ---------------------------------------------------------------------------


def test_fresh_standalone_forward_shape(tiny_spec: SupernetSpec) -> None:
    decoded = decode(_equivalence_arch(2, seed=0), tiny_spec)
    net = build_standalone(decoded, "fresh", seed=1)
    out = net(Tensor(np.random.default_rng(0).uniform(size=(2, 3, 32, 32))))
    assert out.shape == (2, tiny_spec.num_classes, 32, 32)


def test_standalone_is_smaller_than_supernet(tiny_spec: SupernetSpec) -> None:
    decoded = decode(_equivalence_arch(2, seed=1), tiny_spec)
    supernet = Supernet(tiny_spec, seed=0)
    supernet.build_all_alignments()
    assert build_standalone(decoded).parameter_count() < supernet.parameter_count()


def test_blend_weights_follow_kept_beta(tiny_spec: SupernetSpec) -> None:
    decoded = decode(_equivalence_arch(2, seed=2), tiny_spec)
    net = build_standalone(decoded)
    betas = decoded.beta_of()
    for node, sources in net.sources.items():
        values = np.array([betas[(s, node)] for s in sources])
        np.testing.assert_allclose(net.blend[node], np.exp(values) / np.exp(values).sum())
        assert sources == [s for s in incoming(node) if (s, node) in betas]


def test_empty_architecture_cannot_be_built(tiny_spec: SupernetSpec) -> None:
    decoded = decode(make_arch_params(2, beta=-1.0), tiny_spec, strict=True)
    with pytest.raises(ValueError, match="final nodes"):
        build_standalone(decoded)


@pytest.mark.parametrize("seed", range(3))
def test_inherited_network_matches_supernet(seed: int) -> None:
    spec = make_spec(zero_init_residual=False)
    arch = _equivalence_arch(spec.layers, seed)
    supernet = Supernet(spec, seed=seed)
    supernet.build_all_alignments()
    supernet.eval()
    image = Tensor(np.random.default_rng(seed).uniform(size=(2, 3, 32, 32)))
    expected = supernet(image, arch).data

    net = build_standalone(
        decode(arch, spec), "inherit", seed=seed, supernet_state=supernet.state_dict()
    )
    net.eval()
    np.testing.assert_allclose(net(image).data, expected, atol=1e-5)


def test_inherit_requires_full_channel_ratio() -> None:
    spec = make_spec(channel_ratio=0.5)
    decoded = decode(_equivalence_arch(2, seed=0), spec)
    supernet = Supernet(spec, seed=0)
    with pytest.raises(ValueError, match="channel_ratio"):
        build_standalone(decoded, "inherit", supernet_state=supernet.state_dict())


def test_inherit_requires_weights(tiny_spec: SupernetSpec) -> None:
    decoded = decode(_equivalence_arch(2, seed=0), tiny_spec)
    with pytest.raises(ValueError, match="supernet weights"):
        build_standalone(decoded, "inherit")


def test_inherit_reports_missing_branch(tiny_spec: SupernetSpec) -> None:
    decoded = decode(_equivalence_arch(2, seed=0), tiny_spec)
    # no alignment branch was ever created
    state = Supernet(tiny_spec, seed=0).state_dict()
    with pytest.raises(ArtifactError, match="alignments"):
        build_standalone(decoded, "inherit", supernet_state=state)


def test_load_supernet_weights_checks_kind(tmp_path: Path) -> None:
    path = tmp_path / "arch.ckpt"
    checkpoint.save(path, {"x": np.zeros(2)}, {"kind": "arch"})
    with pytest.raises(ArtifactError, match="supernet weights"):
        load_supernet_weights(path)
    good = tmp_path / "weights.ckpt"
    checkpoint.save(good, {"x": np.ones(2)}, {"kind": "supernet-weights"})
    np.testing.assert_array_equal(load_supernet_weights(good)["x"], np.ones(2))
