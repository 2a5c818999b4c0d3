import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from ingest.dataset import FlowField, frame_index_grid, stack_flows
from stages.base_stage import BaseStage
from stages.segmentation import Segment
from utils.config import PipelineConfig
from utils.errors import ShapeMismatch
from utils.parallel import parallel_map


@dataclass(frozen=True)
class Edge:
    a: int  # node id in the earlier frame
    b: int
    rho: float
    gamma: float


@dataclass(frozen=True, eq=False)
class SegmentGraph:
    nodes: Tuple[Segment, ...]
    edges: Tuple[Edge, ...] = ()
    groups: NDArray = field(default=None)  # node id -> group id

    def __post_init__(self) -> None:
        groups = np.arange(len(self.nodes)) if self.groups is None else np.asarray(self.groups, dtype=np.int64)
        if groups.shape != (len(self.nodes),):
            raise ShapeMismatch(f"Group labels {groups.shape} do not cover {len(self.nodes)} nodes")
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "groups", groups)

    @property
    def num_groups(self) -> int:
        return int(np.unique(self.groups).size)

    def node_keys(self) -> List[Tuple[int, int]]:
        """(frame, index within frame) per node."""
        keys, seen = [], {}
        for node in self.nodes:
            local = seen.get(node.frame, 0)
            keys.append((node.frame, local))
            seen[node.frame] = local + 1
        return keys

    def members(self, group: int) -> List[Segment]:
        return [self.nodes[i] for i in np.flatnonzero(self.groups == group)]


class UnionFind:
    def __init__(self, size: int):
        self.parent = np.arange(size)
        self.rank = np.zeros(size, dtype=np.int64)

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return int(root)

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True

    def labels(self) -> NDArray:
        """Component label per element, numbered by each component's smallest element."""
        roots = np.array([self.find(i) for i in range(len(self.parent))], dtype=np.int64)
        labels = np.empty_like(roots)
        order: Dict[int, int] = {}
        for i, root in enumerate(roots):
            labels[i] = order.setdefault(int(root), len(order))
        return labels


def warp_segment(seg: Segment, flow: FlowField) -> NDArray:
    """Target-frame flat pixel indices reached by the segment's covisible pixels."""
    if seg.frame != flow.source:
        raise ShapeMismatch(f"Segment of frame {seg.frame} cannot be warped by flow from frame {flow.source}")
    height, width = flow.covisibility.shape
    rows, cols = frame_index_grid(height, width)
    r, c = rows[seg.members], cols[seg.members]
    keep = flow.covisibility[r, c]
    r, c = r[keep], c[keep]
    du, dv = flow.flow[r, c, 0], flow.flow[r, c, 1]
    u = np.floor(c + du + 0.5).astype(np.int64)
    v = np.floor(r + dv + 0.5).astype(np.int64)
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    return np.unique(v[inside] * width + u[inside])


def score_pair(warped: NDArray, source: Segment, target: Segment, mode: str = "min") -> Tuple[float, float]:
    """Overlap ratio of the warped pixel set with the target segment, and normal cosine."""
    gamma = float(np.dot(source.mean_normal, target.mean_normal))
    if warped.size == 0 or target.members.size == 0:
        return 0.0, gamma
    shared = np.intersect1d(warped, target.members, assume_unique=True).size
    if mode == "iou":
        denom = warped.size + target.members.size - shared
    else:
        denom = min(warped.size, target.members.size)
    return float(shared / denom), gamma


def frame_pairs(flows: Sequence[FlowField], strides: Sequence[int]) -> List[Tuple[int, int]]:
    available = stack_flows(flows)
    return sorted(pair for pair in available if pair[1] - pair[0] in set(strides))


def build_segment_graph(
    segments_by_frame: Sequence[Sequence[Segment]],
    flows: Sequence[FlowField],
    strides: Sequence[int] = (1, 5),
    overlap_mode: str = "min",
    workers: int = 1,
) -> SegmentGraph:
    nodes: List[Segment] = []
    offsets: Dict[int, int] = {}
    for t, segments in enumerate(segments_by_frame):
        offsets[t] = len(nodes)
        nodes.extend(segments)

    by_pair = stack_flows(flows)
    pairs = [p for p in frame_pairs(flows, strides) if p[0] in offsets and p[1] in offsets]

    def score(pair: Tuple[int, int]) -> List[Edge]:
        i, j = pair
        flow = by_pair[pair]
        edges = []
        for a, seg_a in enumerate(segments_by_frame[i]):
            warped = warp_segment(seg_a, flow)
            for b, seg_b in enumerate(segments_by_frame[j]):
                rho, gamma = score_pair(warped, seg_a, seg_b, overlap_mode)
                edges.append(Edge(offsets[i] + a, offsets[j] + b, rho, gamma))
        return edges

    scored = parallel_map(score, pairs, workers)
    return SegmentGraph(tuple(nodes), tuple(edge for batch in scored for edge in batch))


def merge_groups(graph: SegmentGraph, rho_min: float, gamma_min: float) -> SegmentGraph:
    forest = UnionFind(len(graph.nodes))
    for edge in graph.edges:
        if edge.rho >= rho_min and edge.gamma >= gamma_min:
            forest.union(edge.a, edge.b)
    return replace(graph, groups=forest.labels())


def write_association_debug(directory: str, graph: SegmentGraph, rho_min: float, gamma_min: float) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    keys = graph.node_keys()
    with open(root / "groups.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame", "segment", "group"])
        for (frame, local), group in zip(keys, graph.groups):
            writer.writerow([frame, local, int(group)])
    with open(root / "edges.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame_a", "segment_a", "frame_b", "segment_b", "rho", "gamma", "accepted"])
        for edge in graph.edges:
            accepted = edge.rho >= rho_min and edge.gamma >= gamma_min
            writer.writerow([*keys[edge.a], *keys[edge.b], f"{edge.rho:.6f}", f"{edge.gamma:.6f}", int(accepted)])


class AssociationStage(BaseStage):
    def __init__(self, config: PipelineConfig):
        super().__init__(role="Association", config=config)

    def process(
        self, segments_by_frame: Sequence[Sequence[Segment]], flows: Sequence[FlowField]
    ) -> Tuple[Any, Dict[str, Any]]:
        cfg = self.config
        graph = build_segment_graph(segments_by_frame, flows, cfg.pair_strides, cfg.overlap_mode, cfg.workers)
        merged = merge_groups(graph, cfg.rho_min, cfg.gamma_min)
        accepted = sum(1 for e in graph.edges if e.rho >= cfg.rho_min and e.gamma >= cfg.gamma_min)
        stats = {
            "nodes": len(merged.nodes),
            "edges": len(merged.edges),
            "accepted_edges": accepted,
            "groups": merged.num_groups,
        }
        return merged, stats
