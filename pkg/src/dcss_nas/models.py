"""Pydantic result documents written by the pipeline stages."""

from __future__ import annotations

from pydantic import BaseModel, Field

from dcss_nas.config import DatasetSpec, SupernetSpec
from dcss_nas.supernet.space import Edge, NodeId, OperatorConfig, final_nodes

METRIC_COLUMNS = (
    "epoch",
    "trainA_ce",
    "trainB_ce",
    "L_alpha",
    "L_beta",
    "L_con",
    "tau",
    "val_miou",
)


class SplitEntry(BaseModel):
    file: str
    count: int
    sha256: str


class DatasetManifest(BaseModel):
    """``manifest.json`` of a materialized dataset directory."""

    spec: DatasetSpec
    seed: int
    splits: dict[str, SplitEntry]


class EpochMetrics(BaseModel):
    """One row of the search metrics CSV."""

    epoch: int
    train_a_ce: float
    train_b_ce: float
    l_alpha: float
    l_beta: float
    l_con: float
    tau: float
    val_miou: float

    def row(self) -> list[str]:
        values = (
            self.train_a_ce,
            self.train_b_ce,
            self.l_alpha,
            self.l_beta,
            self.l_con,
            self.tau,
            self.val_miou,
        )
        return [str(self.epoch), *(repr(float(v)) for v in values)]


class SearchResult(BaseModel):
    s_miou: float
    best_epoch: int
    checkpoint: str
    arch_sha256: str
    epochs: list[EpochMetrics] = Field(default_factory=list)


class NodeEntry(BaseModel):
    id: str
    op: str


class DecodedArchitecture(BaseModel):
    """Discrete architecture: retained nodes with their operator, kept edges with their beta."""

    nodes: list[NodeEntry]
    edges: list[tuple[str, str]]
    edge_beta: list[float]
    spec: SupernetSpec
    provenance: str
    strict: bool = False
    fallback_nodes: list[str] = Field(default_factory=list)

    def kept_edges(self) -> set[Edge]:
        return {(NodeId.parse(s), NodeId.parse(d)) for s, d in self.edges}

    def chosen_ops(self) -> dict[NodeId, OperatorConfig]:
        return {NodeId.parse(n.id): OperatorConfig.parse(n.op) for n in self.nodes}

    def beta_of(self) -> dict[Edge, float]:
        return {
            (NodeId.parse(s), NodeId.parse(d)): b
            for (s, d), b in zip(self.edges, self.edge_beta, strict=True)
        }

    def in_degrees(self) -> dict[NodeId, int]:
        degrees = {node: 0 for node in self.chosen_ops()}
        for _, dst in self.kept_edges():
            degrees[dst] = degrees.get(dst, 0) + 1
        return degrees

    def validate_structure(self) -> None:
        """Raise ``ValueError`` unless every retained node is reachable and fed."""
        if len(self.edges) != len(self.edge_beta):
            raise ValueError("edges and edge_beta differ in length")
        ops = self.chosen_ops()
        edges = self.kept_edges()
        for src, dst in edges:
            if src.layer >= dst.layer:
                raise ValueError(f"edge {src.name}->{dst.name} does not go forward in depth")
            if dst not in ops:
                raise ValueError(f"edge target {dst.name} has no chosen operator")
            if src.layer > 0 and src not in ops:
                raise ValueError(f"edge source {src.name} has no chosen operator")
        for node, degree in self.in_degrees().items():
            if degree < 1:
                raise ValueError(f"retained node {node.name} has no incoming edge")
        reached = {n for n in final_nodes(self.spec.layers) if n in ops}
        frontier = list(reached)
        while frontier:
            node = frontier.pop()
            for src, dst in edges:
                if dst == node and src.layer > 0 and src not in reached:
                    reached.add(src)
                    frontier.append(src)
        stranded = sorted(n.name for n in ops if n not in reached)
        if stranded:
            raise ValueError(f"nodes unreachable from the final layer: {', '.join(stranded)}")


class TrainEpoch(BaseModel):
    epoch: int
    train_ce: float
    val_miou: float


class TrainResult(BaseModel):
    t_miou: float
    best_epoch: int
    parameters: int
    flops: int
    epochs: list[TrainEpoch] = Field(default_factory=list)


class TrialRecord(BaseModel):
    """One searched-and-retrained architecture of the correlation study."""

    trial_id: int
    seed: int
    s_miou: float = Field(ge=0.0, le=1.0)
    t_miou: float = Field(ge=0.0, le=1.0)
    arch_path: str = ""
    parameters: int = 0
    flops: int = 0
    wall_time: float = Field(default=0.0, exclude=True)


class FailedTrial(BaseModel):
    trial_id: int
    seed: int
    error: str


class CorrelationReport(BaseModel):
    """Pearson rho and Kendall tau-a between S-mIoU and T-mIoU over completed trials."""

    n: int
    rho: float | None = None
    tau: float | None = None
    ties: int = 0
    records: list[TrialRecord] = Field(default_factory=list)
    failed_trials: list[FailedTrial] = Field(default_factory=list)
    note: str | None = None


class AblationRow(BaseModel):
    label: str
    s_miou: float
    t_miou: float
    parameters: int
    flops: int


class AblationReport(BaseModel):
    kind: str
    rows: list[AblationRow] = Field(default_factory=list)
    failed: list[str] = Field(default_factory=list)
