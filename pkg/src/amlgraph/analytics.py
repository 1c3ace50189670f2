"""Embedding analytics: drift reports, clustering, and export.

Embedding snapshots taken after retraining on successive periods let a
reviewer watch one customer's behavior move: pairwise cosine matrices
flag customers whose representation swung away from any earlier period.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, IngestError, NumericalError
from .graph import BipartiteGraph, full_subgraph
from .model import ModelParams, encode

DIVERGENCE_THRESHOLD = 0.8
KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ConfigError(f"vector lengths differ: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise NumericalError("cosine similarity of a zero vector is undefined")
    return float(a @ b / (na * nb))


@dataclass(frozen=True)
class CustomerDrift:
    customer_id: str
    similarity: np.ndarray      # (k, k) pairwise cosine across snapshots
    min_similarity: float       # smallest off-diagonal entry
    diverging: bool


def divergence_report(snapshots: Sequence[Mapping[str, np.ndarray]],
                      customer_ids: Sequence[str] | None = None,
                      threshold: float = DIVERGENCE_THRESHOLD
                      ) -> list[CustomerDrift]:
    """Pairwise embedding similarity per customer across snapshots.

    A customer is flagged as diverging when any snapshot pair falls
    below the threshold. Diagonals are exactly 1 and the matrix is
    mirrored, so symmetry is structural. Customers must appear in every
    snapshot; the ids default to the first snapshot's, sorted.
    """
    k = len(snapshots)
    if k < 2:
        raise ConfigError(f"need at least two snapshots, got {k}")
    if customer_ids is None:
        customer_ids = sorted(snapshots[0].keys())
    report = []
    for cid in customer_ids:
        vecs = []
        for idx, snap in enumerate(snapshots):
            if cid not in snap:
                raise IngestError(f"customer {cid!r} missing from snapshot {idx}")
            vecs.append(snap[cid])
        m = np.eye(k)
        for i in range(k):
            for j in range(i + 1, k):
                m[i, j] = m[j, i] = cosine_similarity(vecs[i], vecs[j])
        off = m[~np.eye(k, dtype=bool)]
        lowest = float(off.min())
        report.append(CustomerDrift(cid, m, lowest, lowest < threshold))
    return report


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations: int


def cluster_transactions(x: np.ndarray, k: int, seed: int = 0,
                         max_iter: int = KMEANS_MAX_ITER,
                         tol: float = KMEANS_TOL) -> KMeansResult:
    """Lloyd's k-means with distance-squared weighted seeding.

    Stops when no center moves more than `tol` or after `max_iter`
    rounds. An emptied cluster keeps its previous center.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError("expected a 2-D (n, d) embedding matrix")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("embedding matrix contains non-finite values")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for m in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)  # all points coincide with a center
        centers[m] = x[idx]
        d2 = np.minimum(d2, ((x - centers[m]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new_centers = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centers[c] = x[members].mean(axis=0)
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = dist.argmin(axis=1)
    inertia = float(dist[np.arange(n), labels].sum())
    return KMeansResult(labels, centers, inertia, iterations)


def compute_embeddings(params: ModelParams, g: BipartiteGraph,
                       layer: int | None = None):
    """Full-graph embeddings of every node at the chosen layer.

    Layers count from 0; the default is the final one. Returns
    (customer_ids, z_c, txn_ids, z_t) with rows in graph node order.
    """
    if layer is None:
        layer = params.num_layers - 1
    if not 0 <= layer < params.num_layers:
        raise ConfigError(f"layer must be in [0, {params.num_layers - 1}], "
                          f"got {layer}")
    sub = full_subgraph(g, params.num_layers)
    capture: list = []
    encode(params, sub, g.x_c, g.x_t, capture=capture)
    c_idx, z_c, t_idx, z_t = capture[layer]
    c_ids = [g.customer_ids[i] for i in c_idx]
    t_ids = [g.txn_ids[i] for i in t_idx]
    return c_ids, z_c, t_ids, z_t


def export_embeddings(params: ModelParams, g: BipartiteGraph, path: str,
                      layer: int | None = None) -> None:
    """Write one tab-delimited row per node: type, id, coordinates."""
    c_ids, z_c, t_ids, z_t = compute_embeddings(params, g, layer)
    with open(path, "w", encoding="utf-8") as fh:
        width = z_c.shape[1]
        fh.write("node_type\tnode_id\t" +
                 "\t".join(f"v{i}" for i in range(width)) + "\n")
        for ids, z, kind in ((c_ids, z_c, "customer"), (t_ids, z_t, "transaction")):
            for nid, row in zip(ids, z):
                fh.write(kind + "\t" + nid + "\t" +
                         "\t".join(repr(float(v)) for v in row) + "\n")


def read_embeddings(path: str) -> tuple[dict, dict]:
    """Inverse of export_embeddings: ({customer: vec}, {transaction: vec})."""
    customers: dict[str, np.ndarray] = {}
    txns: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["node_type", "node_id"]:
            raise IngestError(f"{path}: not an embedding export")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise IngestError(f"{path}:{lineno}: wrong column count")
            kind, nid = parts[0], parts[1]
            vec = np.array([float(v) for v in parts[2:]])
            if kind == "customer":
                customers[nid] = vec
            elif kind == "transaction":
                txns[nid] = vec
            else:
                raise IngestError(f"{path}:{lineno}: unknown node type {kind!r}")
    return customers, txns
