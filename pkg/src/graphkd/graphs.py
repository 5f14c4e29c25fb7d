"""Per-sample heterogeneous subgraph construction.

Each sample becomes a small graph: four content nodes in a fixed kind
order (question, language context, visual context, combined V-L), then the
commonsense triplets retrieved for them, ordered by ascending triplet
index. Edges carry cosine similarity between content nodes, the retrieval
similarity between a content node and its triplets, and normalized PMI of
co-retrieval between triplet pairs (statistics from the training split
only).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .datagen import Dataset, ManifestRecord
from .embeddings import EmbeddingStore, TripletStore, cosine_sim, top_k_triplets, toy_embed
from .errors import ConfigError, DataError, FormatError, NumericError
from .serialization import canonical_json

CONTENT_KINDS = ("question", "language_context", "visual_context", "vl")
COMMONSENSE_KIND = "commonsense"
EDGE_MODES = ("cosine", "pmi", "hybrid")
GRAPHS_FORMAT = "graphkd-graphs"
GRAPHS_VERSION = 1


@dataclass(frozen=True)
class Node:
    kind: str
    id: str
    embedding: np.ndarray


@dataclass
class Subgraph:
    sample_id: str
    split: str
    group: str
    label: int
    nodes: list[Node]
    adjacency: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)

    def features(self) -> np.ndarray:
        """All node embeddings stacked N x dim, in node order."""
        return np.vstack([n.embedding for n in self.nodes])

    def content_features(self) -> np.ndarray:
        """The four content-node embeddings (the raw-feature student input)."""
        return np.vstack([n.embedding for n in self.nodes[:4]])


@dataclass(frozen=True)
class RetrievalHit:
    content_kind: str
    triplet_id: str
    similarity: float


@dataclass
class CooccurrenceStats:
    """Sample-level retrieval counts over the training split: in how many
    samples was each triplet (and each unordered triplet pair) retrieved."""

    num_samples: int = 0
    counts: dict[str, int] = field(default_factory=dict)
    pair_counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def observe(self, retrieved_ids: set[str]) -> None:
        self.num_samples += 1
        for tid in retrieved_ids:
            self.counts[tid] = self.counts.get(tid, 0) + 1
        for a, b in combinations(sorted(retrieved_ids, key=_triplet_index), 2):
            self.pair_counts[(a, b)] = self.pair_counts.get((a, b), 0) + 1


def _triplet_index(triplet_id: str) -> int:
    return int(triplet_id[1:])


def build_content_nodes(record: ManifestRecord, dim: int, seed: int,
                        embedding_store: EmbeddingStore | None = None) -> list[Node]:
    """Embed one sample's four content nodes in the fixed kind order."""
    question = toy_embed(record.question, dim, seed)
    language = toy_embed(record.language_context, dim, seed)
    if record.visual_ref is not None:
        if embedding_store is None:
            raise DataError(
                f"sample '{record.sample_id}' references embedding id "
                f"'{record.visual_ref}' but no store was supplied")
        if record.visual_ref not in embedding_store:
            raise DataError(f"missing embedding id '{record.visual_ref}'")
        visual = embedding_store.vector(record.visual_ref)
        if visual.size != dim:
            raise ConfigError(
                f"embedding store dim {visual.size} does not match graph dim {dim}")
    else:
        visual = toy_embed(record.visual_text or "", dim, seed)

    mean = 0.5 * (visual + language)
    norm = np.linalg.norm(mean)
    if norm > 1e-12:
        vl = mean / norm
    else:
        vl = np.zeros(dim)
        vl[0] = 1.0
    return [
        Node("question", "question", question),
        Node("language_context", "language_context", language),
        Node("visual_context", "visual_context", visual),
        Node("vl", "vl", vl),
    ]


def attach_commonsense(content_nodes: list[Node], store: TripletStore,
                       k: int = 3) -> tuple[list[Node], list[RetrievalHit]]:
    """Retrieve top-k triplets for each content node; returns the merged,
    index-ordered commonsense nodes plus the full retrieval log."""
    log: list[RetrievalHit] = []
    retrieved: set[str] = set()
    for node in content_nodes:
        for tid, sim in top_k_triplets(node.embedding, store, k):
            log.append(RetrievalHit(node.kind, tid, sim))
            retrieved.add(tid)
    nodes = [
        Node(COMMONSENSE_KIND, tid, store.embeddings.vector(tid))
        for tid in sorted(retrieved, key=_triplet_index)
    ]
    return nodes, log


def pmi_weight(stats: CooccurrenceStats, id1: str, id2: str) -> float | None:
    """Normalized pointwise mutual information of co-retrieval, in (0, 1];
    ``None`` when the pair never co-occurs or is at/below independence."""
    for tid in (id1, id2):
        if tid not in stats.counts:
            raise DataError(f"no retrieval statistics for triplet '{tid}'")
    key = tuple(sorted((id1, id2), key=_triplet_index))
    c12 = stats.pair_counts.get(key, 0)
    if c12 == 0:
        return None
    c1 = stats.counts[id1]
    c2 = stats.counts[id2]
    pmi = math.log(c12 * stats.num_samples / (c1 * c2))
    if pmi <= 0.0:
        return None
    # min() absorbs the last-ulp rounding when the pair always co-occurs.
    return min(pmi / -math.log(c12 / stats.num_samples), 1.0)


def build_edges(nodes: list[Node], log: list[RetrievalHit], stats: CooccurrenceStats,
                mode: str = "hybrid", tau: float = 0.0) -> np.ndarray:
    """Weighted symmetric hollow adjacency over one sample's nodes.

    Content-content edges: cosine similarity when above ``tau`` (negative
    similarities never become edges, keeping weights in [0, 1]).
    Content-commonsense edges: the retrieval similarity, clamped to [0, 1].
    Commonsense-commonsense edges: normalized PMI, in modes pmi / hybrid.
    """
    if mode not in EDGE_MODES:
        raise ConfigError(f"unknown edge mode '{mode}'")
    if not -1.0 <= tau < 1.0:
        raise ConfigError(f"tau must lie in [-1, 1), got {tau}")

    n = len(nodes)
    index = {node.id: i for i, node in enumerate(nodes)}
    adjacency = np.zeros((n, n))

    content = [i for i, node in enumerate(nodes) if node.kind in CONTENT_KINDS]
    kind_to_index = {nodes[i].kind: i for i in content}
    for a, b in combinations(content, 2):
        sim = cosine_sim(nodes[a].embedding, nodes[b].embedding)
        if sim > tau and sim > 0.0:
            adjacency[a, b] = adjacency[b, a] = sim

    for hit in log:
        if hit.triplet_id not in index:
            continue
        a = kind_to_index[hit.content_kind]
        b = index[hit.triplet_id]
        adjacency[a, b] = adjacency[b, a] = min(max(hit.similarity, 0.0), 1.0)

    if mode in ("pmi", "hybrid"):
        commonsense = [i for i, node in enumerate(nodes) if node.kind == COMMONSENSE_KIND]
        for a, b in combinations(commonsense, 2):
            # Triplets never retrieved on the training split have no
            # statistics and therefore no PMI edges.
            if nodes[a].id not in stats.counts or nodes[b].id not in stats.counts:
                continue
            weight = pmi_weight(stats, nodes[a].id, nodes[b].id)
            if weight is not None:
                adjacency[a, b] = adjacency[b, a] = weight
    return adjacency


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Self-loop degree normalization: with A~ = A + I and D~ the diagonal
    of A~'s row sums, returns D~^(-1/2) A~ D~^(-1/2)."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericError(f"adjacency must be square, got shape {a.shape}")
    if not np.array_equal(a, a.T):
        raise NumericError("adjacency must be symmetric")
    if (a < 0).any():
        raise NumericError("adjacency weights must be non-negative")
    if np.diagonal(a).any():
        raise NumericError("adjacency must have a zero diagonal")
    with_loops = a + np.eye(a.shape[0])
    inv_sqrt_degree = 1.0 / np.sqrt(with_loops.sum(axis=1))
    return with_loops * inv_sqrt_degree[:, None] * inv_sqrt_degree[None, :]


# ---------------------------------------------------------------------------
# Dataset-level construction
# ---------------------------------------------------------------------------

def build_dataset_graphs(dataset: Dataset, triplet_store: TripletStore, seed: int,
                         k: int = 3, mode: str = "hybrid",
                         tau: float = 0.0) -> list[Subgraph]:
    """Two-pass construction over a validated dataset: retrieval first
    (accumulating training-split co-occurrence statistics), then edges.
    Node embeddings use the triplet store's dimension."""
    dim = triplet_store.dim
    label_index = {label: i for i, label in enumerate(dataset.label_vocab)}

    built: list[tuple[ManifestRecord, list[Node], list[RetrievalHit]]] = []
    stats = CooccurrenceStats()
    for record in dataset.records:
        content = build_content_nodes(record, dim, seed, dataset.visual_store)
        commonsense, log = attach_commonsense(content, triplet_store, k)
        built.append((record, content + commonsense, log))
        if record.split == "train":
            stats.observe({hit.triplet_id for hit in log})

    subgraphs: list[Subgraph] = []
    for record, nodes, log in built:
        adjacency = build_edges(nodes, log, stats, mode=mode, tau=tau)
        subgraphs.append(Subgraph(
            sample_id=record.sample_id,
            split=record.split,
            group=record.group,
            label=label_index[record.label],
            nodes=nodes,
            adjacency=adjacency,
        ))
    return subgraphs


# ---------------------------------------------------------------------------
# Graph file (line-delimited JSON)
# ---------------------------------------------------------------------------

def write_graphs(path, subgraphs: list[Subgraph], label_vocab: list[str],
                 config: dict) -> None:
    """One header line (format, vocabulary, config echo), then one record
    per sample with nodes (kind, id, embedding) and the row-major adjacency."""
    header = {
        "format": GRAPHS_FORMAT,
        "version": GRAPHS_VERSION,
        "label_vocab": list(label_vocab),
        "config": config,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(header) + "\n")
        for sg in subgraphs:
            record = {
                "sample_id": sg.sample_id,
                "split": sg.split,
                "group": sg.group,
                "label": sg.label,
                "nodes": [
                    {"kind": n.kind, "id": n.id, "embedding": n.embedding.tolist()}
                    for n in sg.nodes
                ],
                "adjacency": sg.adjacency.reshape(-1).tolist(),
            }
            fh.write(canonical_json(record) + "\n")


def read_graphs(path) -> tuple[list[Subgraph], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"graphs file {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"line 1: invalid graphs header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != GRAPHS_FORMAT:
        raise FormatError(f"{path} is not a graphs file")
    if header.get("version") != GRAPHS_VERSION:
        raise FormatError(f"unsupported graphs version {header.get('version')}")

    subgraphs: list[Subgraph] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: invalid graph record: {exc}") from exc
        try:
            nodes = [
                Node(n["kind"], n["id"], np.asarray(n["embedding"], dtype=np.float64))
                for n in doc["nodes"]
            ]
            n = len(nodes)
            adjacency = np.asarray(doc["adjacency"], dtype=np.float64).reshape(n, n)
            subgraphs.append(Subgraph(
                sample_id=doc["sample_id"],
                split=doc["split"],
                group=doc["group"],
                label=int(doc["label"]),
                nodes=nodes,
                adjacency=adjacency,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"line {lineno}: malformed graph record: {exc}") from exc
    if not subgraphs:
        raise FormatError(f"graphs file {path} contains no records")
    return subgraphs, header
