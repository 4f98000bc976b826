"""Downstream consumers of predictions: caption graphs and sentence-based
image / region-pair retrieval."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import Box, iou
from .model import ModelConfig, ModelParams, PairBatch, decode_step, encode_pair_batch, init_state


@dataclass
class GraphNode:
    id: int
    phrase: str
    box: Box
    confidence: float


@dataclass
class GraphEdge:
    source: int
    target: int
    phrase: str
    confidence: float


@dataclass
class CaptionGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)


def _span(prediction, tag: str):
    return [t for t, p in zip(prediction.tokens, prediction.pos) if p == tag]


def build_caption_graph(predictions, node_merge_iou: float = 0.9) -> CaptionGraph:
    """Graph over one image's predictions: subject/object phrases become
    nodes, predicate phrases become directed edges.

    Nodes whose boxes overlap at or above ``node_merge_iou`` merge, keeping
    the phrase from the highest-confidence caption; parallel edges between
    the same ordered node pair keep only the highest confidence. Predictions
    missing any POS span are skipped with a warning.
    """
    graph = CaptionGraph()

    def node_for(phrase, box, confidence):
        best = None
        for node in graph.nodes:
            overlap = iou(node.box, box)
            if overlap >= node_merge_iou and (best is None or overlap > best[0]):
                best = (overlap, node)
        if best is not None:
            return best[1].id
        node = GraphNode(id=len(graph.nodes), phrase=phrase, box=box, confidence=confidence)
        graph.nodes.append(node)
        return node.id

    seen_edges = {}
    for pred in sorted(predictions, key=lambda p: -p.confidence):
        subj = _span(pred, "SUBJ")
        verb = _span(pred, "PRED")
        obj = _span(pred, "OBJ")
        if not subj or not verb or not obj:
            warnings.warn(f"prediction {' '.join(pred.tokens)!r} lacks a full "
                          "SUBJ/PRED/OBJ segmentation; skipped")
            continue
        src = node_for(" ".join(subj), pred.subject_box, pred.confidence)
        dst = node_for(" ".join(obj), pred.object_box, pred.confidence)
        if (src, dst) not in seen_edges:
            edge = GraphEdge(source=src, target=dst, phrase=" ".join(verb),
                             confidence=pred.confidence)
            seen_edges[(src, dst)] = edge
            graph.edges.append(edge)
    return graph


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def export_graph(graph: CaptionGraph, fmt: str) -> str:
    """Serialize a caption graph as DOT or JSON text."""
    if fmt == "dot":
        lines = ["digraph caption_graph {"]
        for node in graph.nodes:
            lines.append(f'  n{node.id} [label="{_dot_escape(node.phrase)}"];')
        for edge in graph.edges:
            lines.append(f'  n{edge.source} -> n{edge.target} '
                         f'[label="{_dot_escape(edge.phrase)}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"
    if fmt == "json":
        return json.dumps({
            "nodes": [{"id": n.id, "phrase": n.phrase, "box": n.box.to_json(),
                       "confidence": n.confidence} for n in graph.nodes],
            "edges": [{"source": e.source, "target": e.target, "phrase": e.phrase,
                       "confidence": e.confidence} for e in graph.edges],
        }, sort_keys=True, indent=2) + "\n"
    raise ValueError(f"unknown graph format {fmt!r}")


def graph_from_json(text: str) -> CaptionGraph:
    obj = json.loads(text)
    nodes = [GraphNode(n["id"], n["phrase"], Box.from_json(n["box"]), n["confidence"])
             for n in obj["nodes"]]
    edges = [GraphEdge(e["source"], e["target"], e["phrase"], e["confidence"])
             for e in obj["edges"]]
    node_ids = {n.id for n in nodes}
    for edge in edges:
        if edge.source not in node_ids or edge.target not in node_ids:
            raise ValueError(f"edge {edge.source}->{edge.target} references a missing node")
    return CaptionGraph(nodes=nodes, edges=edges)


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def retrieval_score(query_ids, batch: PairBatch, params: ModelParams,
                    config: ModelConfig):
    """Probability that a query occurs for the best pair of one image.

    The query is teacher-forced through the decoder for every pair and the
    per-step probabilities of the query words are multiplied (accumulated
    as log sums); the image score is the maximum over pairs. Returns
    (score, best pair index, per-word probabilities of that pair).
    """
    query = list(query_ids)
    if not query:
        raise ValueError("retrieval needs a non-empty query")
    n = len(batch)
    if n == 0:
        raise ValueError("retrieval needs at least one candidate pair")
    codes = encode_pair_batch(batch, params, config)
    state = init_state(n, config)
    log_scores = np.zeros(n)
    probs = np.zeros((n, len(query)))
    for t, word in enumerate(query):
        prev = None if t == 0 else np.full(n, query[t - 1], dtype=np.intp)
        word_logits, _, state = decode_step(codes if t == 0 else None, prev, state,
                                            params, config)
        logits = word_logits.data
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        probs[:, t] = np.exp(logp[:, word])
        log_scores += logp[:, word]
    best = int(np.argmax(log_scores))
    return float(math.exp(log_scores[best])), best, probs[best].tolist()


@dataclass(frozen=True)
class RetrievalProtocol:
    """Scaled-down sentence-retrieval protocol.

    ``num_images`` candidate images; each round samples
    ``captions_per_image`` GT captions from ``num_query_images`` randomly
    chosen images and averages results over ``rounds`` reshuffles.
    """

    num_images: int = 100
    num_query_images: int = 5
    captions_per_image: int = 4
    ks: tuple = (1, 5, 10)
    rounds: int = 3


def retrieval_eval(scorables, gt_captions, vocab, params, config,
                   protocol: RetrievalProtocol, seed: int = 0):
    """R@K table and median rank for sentence-based image retrieval.

    ``scorables``: list of (image_id, PairBatch) candidates;
    ``gt_captions``: image_id -> list of token lists to sample queries from.
    """
    candidates = list(scorables)[:protocol.num_images]
    if len(candidates) < protocol.num_query_images:
        raise ConfigError(
            f"retrieval needs at least {protocol.num_query_images} images, "
            f"got {len(candidates)}")
    candidate_ids = [img for img, _ in candidates]

    per_round_recall = {k: [] for k in protocol.ks}
    per_round_median = []
    ranks_all = []
    for round_idx in range(protocol.rounds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, round_idx]))
        chosen = rng.choice(len(candidates), size=protocol.num_query_images, replace=False)
        queries = []
        for img_pos in chosen:
            image_id = candidate_ids[img_pos]
            captions = gt_captions[image_id]
            picks = rng.choice(len(captions),
                               size=min(protocol.captions_per_image, len(captions)),
                               replace=False)
            for p in picks:
                queries.append((image_id, captions[p]))
        ranks = []
        for source_id, tokens in queries:
            ids = [vocab.encode_token(t) for t in tokens]
            scores = []
            for image_id, batch in candidates:
                score, _, _ = retrieval_score(ids, batch, params, config)
                scores.append((image_id, score))
            order = sorted(scores, key=lambda s: (-s[1], s[0]))
            rank = 1 + next(i for i, (img, _) in enumerate(order) if img == source_id)
            ranks.append(rank)
        ranks_all.extend(ranks)
        for k in protocol.ks:
            per_round_recall[k].append(np.mean([1.0 if r <= k else 0.0 for r in ranks]))
        per_round_median.append(float(np.median(ranks)))
    return {
        "r_at_k": {k: float(np.mean(v)) for k, v in per_round_recall.items()},
        "median_rank": float(np.mean(per_round_median)),
        "num_queries": len(ranks_all),
        "rounds": protocol.rounds,
    }
