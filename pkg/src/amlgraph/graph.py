"""Directed bipartite customer-transaction graph: build, split, sample, sever.

Customers and transactions are the two node types. A transaction carries
at most one outgoing edge (spending customer -> transaction) and at most
one incoming edge (transaction -> receiving customer); a counterpart
outside the institution (``EXTERNAL``) simply produces no edge on that
side. Message passing uses four relations: each edge set together with
its exact transpose, so both node types can aggregate from both
directions.

Node indices are canonical: customers and transactions are each sorted
by id at build time, so the same records in any order produce a
bitwise-identical graph.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import ConfigError, IngestError, SamplingError
from .ndtensor import read_array, write_array

EXTERNAL = "EXTERNAL"

OUTGOING = "outgoing"
INCOMING = "incoming"
DIRECTIONS = (OUTGOING, INCOMING)

OUT_FWD = "out_fwd"  # customer -> transaction over the outgoing edge set
OUT_REV = "out_rev"  # transpose of OUT_FWD
IN_FWD = "in_fwd"    # transaction -> customer over the incoming edge set
IN_REV = "in_rev"    # transpose of IN_FWD

RELATIONS = (OUT_FWD, OUT_REV, IN_FWD, IN_REV)

_MAGIC = b"BPGR"
_VERSION = 1
_STD_FLOOR = 1e-12


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed or a Generator; always return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_direction(direction: str) -> None:
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


@dataclass(frozen=True)
class CustomerProfile:
    customer_id: str
    features: np.ndarray


@dataclass(frozen=True)
class RawTransaction:
    txn_id: str
    source_customer: str
    dest_customer: str
    timestamp: float
    features: np.ndarray


class BipartiteGraph:
    """Immutable store of nodes, standardized features, and adjacency.

    ``o_src[t]`` is the customer index spending into transaction t (or -1),
    ``i_dst[t]`` the customer index receiving from it (or -1). Per-customer
    adjacency is kept in CSR form with neighbor lists sorted ascending.
    """

    def __init__(self, customer_ids, txn_ids, x_c, x_t, o_src, i_dst,
                 timestamps, stats):
        self.customer_ids: tuple[str, ...] = tuple(customer_ids)
        self.txn_ids: tuple[str, ...] = tuple(txn_ids)
        self.customer_index = {cid: i for i, cid in enumerate(self.customer_ids)}
        self.txn_index = {tid: i for i, tid in enumerate(self.txn_ids)}
        self.x_c = x_c
        self.x_t = x_t
        self.o_src = o_src
        self.i_dst = i_dst
        self.timestamps = timestamps
        self.stats = stats  # raw-space feature means/stds, keys c_mean/c_std/t_mean/t_std
        self.out_indptr, self.out_indices = _csr(o_src, self.n_customers)
        self.in_indptr, self.in_indices = _csr(i_dst, self.n_customers)

    @property
    def n_customers(self) -> int:
        return len(self.customer_ids)

    @property
    def n_transactions(self) -> int:
        return len(self.txn_ids)

    @property
    def d_customer(self) -> int:
        return self.x_c.shape[1]

    @property
    def d_transaction(self) -> int:
        return self.x_t.shape[1]

    def edge_endpoints(self, direction: str) -> np.ndarray:
        check_direction(direction)
        return self.o_src if direction == OUTGOING else self.i_dst

    def edges(self, direction: str) -> np.ndarray:
        """Transaction indices that carry an edge in the given direction."""
        ends = self.edge_endpoints(direction)
        return np.flatnonzero(ends >= 0).astype(np.int64)

    def out_neighbors(self, c: int) -> np.ndarray:
        return self.out_indices[self.out_indptr[c]:self.out_indptr[c + 1]]

    def in_neighbors(self, c: int) -> np.ndarray:
        return self.in_indices[self.in_indptr[c]:self.in_indptr[c + 1]]

    def standardize_transaction_features(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.stats["t_mean"]) / self.stats["t_std"]


def _csr(endpoint: np.ndarray, n_customers: int) -> tuple[np.ndarray, np.ndarray]:
    txns = np.flatnonzero(endpoint >= 0).astype(np.int64)
    owners = endpoint[txns]
    order = np.lexsort((txns, owners))
    indices = txns[order]
    counts = np.bincount(owners, minlength=n_customers)
    indptr = np.zeros(n_customers + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, indices


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = x.mean(axis=0) if len(x) else np.zeros(x.shape[1])
    std = x.std(axis=0) if len(x) else np.ones(x.shape[1])
    std = np.where(std < _STD_FLOOR, 1.0, std)
    return (x - mean) / std, mean, std


def build_graph(transactions: Sequence[RawTransaction],
                profiles: Sequence[CustomerProfile]) -> BipartiteGraph:
    """Assemble the graph; node order is canonical (sorted by id)."""
    if not profiles:
        raise IngestError("no customer profiles given")
    profiles = sorted(profiles, key=lambda p: p.customer_id)
    ids = [p.customer_id for p in profiles]
    for a, b in zip(ids, ids[1:]):
        if a == b:
            raise IngestError(f"duplicate customer id {a!r}")
    if EXTERNAL in set(ids):
        raise IngestError(f"{EXTERNAL!r} is reserved and cannot be a customer id")
    d_c = len(profiles[0].features)
    raw_c = np.zeros((len(profiles), d_c))
    for i, p in enumerate(profiles):
        f = np.asarray(p.features, dtype=np.float64)
        if f.shape != (d_c,):
            raise IngestError(f"customer {p.customer_id!r} has {f.shape} features, expected ({d_c},)")
        if not np.all(np.isfinite(f)):
            raise IngestError(f"customer {p.customer_id!r} has non-finite features")
        raw_c[i] = f

    transactions = sorted(transactions, key=lambda t: t.txn_id)
    tids = [t.txn_id for t in transactions]
    for a, b in zip(tids, tids[1:]):
        if a == b:
            raise IngestError(f"duplicate transaction id {a!r}")
    index = {cid: i for i, cid in enumerate(ids)}
    n_t = len(transactions)
    d_t = len(transactions[0].features) if transactions else 0
    raw_t = np.zeros((n_t, d_t))
    o_src = np.full(n_t, -1, dtype=np.int64)
    i_dst = np.full(n_t, -1, dtype=np.int64)
    timestamps = np.zeros(n_t)
    for j, t in enumerate(transactions):
        f = np.asarray(t.features, dtype=np.float64)
        if f.shape != (d_t,):
            raise IngestError(f"transaction {t.txn_id!r} has {f.shape} features, expected ({d_t},)")
        if not np.all(np.isfinite(f)):
            raise IngestError(f"transaction {t.txn_id!r} has non-finite features")
        raw_t[j] = f
        timestamps[j] = float(t.timestamp)
        if t.source_customer == EXTERNAL and t.dest_customer == EXTERNAL:
            raise IngestError(f"transaction {t.txn_id!r} has no known endpoint")
        for side, cid, arr in (("source", t.source_customer, o_src),
                               ("dest", t.dest_customer, i_dst)):
            if cid == EXTERNAL:
                continue
            if cid not in index:
                raise IngestError(f"transaction {t.txn_id!r} {side} references unknown customer {cid!r}")
            arr[j] = index[cid]

    x_c, c_mean, c_std = _standardize(raw_c)
    x_t, t_mean, t_std = _standardize(raw_t)
    stats = {"c_mean": c_mean, "c_std": c_std, "t_mean": t_mean, "t_std": t_std}
    return BipartiteGraph(ids, tids, x_c, x_t, o_src, i_dst, timestamps, stats)


@dataclass(frozen=True)
class ExtendedTransaction:
    """Resolution of one appended transaction against the reference graph."""
    txn_id: str
    txn_index: int
    src_index: int | None       # None when EXTERNAL or unknown
    dst_index: int | None
    src_cold: bool              # named a customer the graph does not know
    dst_cold: bool


def extend_graph(g: BipartiteGraph, transactions: Sequence[RawTransaction]
                 ) -> tuple[BipartiteGraph, list[ExtendedTransaction]]:
    """Append transaction nodes, keeping the reference graph untouched.

    New features are standardized with the reference statistics. Unknown
    (non-EXTERNAL) customers produce no edge and a cold flag instead of a
    failure. New nodes take indices n_transactions .. in input order.
    """
    n0 = g.n_transactions
    seen = set()
    rows, infos = [], []
    o_new, i_new, ts_new, tid_new = [], [], [], []
    for k, t in enumerate(transactions):
        if t.txn_id in g.txn_index or t.txn_id in seen:
            raise IngestError(f"transaction id {t.txn_id!r} already present")
        seen.add(t.txn_id)
        f = np.asarray(t.features, dtype=np.float64)
        if f.shape != (g.d_transaction,):
            raise IngestError(f"transaction {t.txn_id!r} has {f.shape} features, "
                              f"expected ({g.d_transaction},)")
        rows.append(g.standardize_transaction_features(f))
        side = {}
        for name, cid in (("src", t.source_customer), ("dst", t.dest_customer)):
            if cid == EXTERNAL:
                side[name] = (None, False)
            elif cid in g.customer_index:
                side[name] = (g.customer_index[cid], False)
            else:
                side[name] = (None, True)
        (src_i, src_cold), (dst_i, dst_cold) = side["src"], side["dst"]
        infos.append(ExtendedTransaction(t.txn_id, n0 + k, src_i, dst_i, src_cold, dst_cold))
        o_new.append(-1 if src_i is None else src_i)
        i_new.append(-1 if dst_i is None else dst_i)
        ts_new.append(float(t.timestamp))
        tid_new.append(t.txn_id)

    x_t = np.vstack([g.x_t] + [r[None, :] for r in rows]) if rows else g.x_t
    g2 = BipartiteGraph(
        g.customer_ids, list(g.txn_ids) + tid_new, g.x_c, x_t,
        np.concatenate([g.o_src, np.asarray(o_new, dtype=np.int64)]),
        np.concatenate([g.i_dst, np.asarray(i_new, dtype=np.int64)]),
        np.concatenate([g.timestamps, np.asarray(ts_new)]),
        g.stats)
    return g2, infos


# ---------------------------------------------------------------------------
# edge splits


@dataclass(frozen=True)
class EdgeSplit:
    """Disjoint, exhaustive partition of each direction's edges.

    Values are sorted transaction-index arrays keyed by direction.
    """
    message: dict
    supervision: dict
    validation: dict

    def sets(self, direction: str):
        return (self.message[direction], self.supervision[direction],
                self.validation[direction])


def split_edges(g: BipartiteGraph, ratios: tuple[float, float, float],
                seed) -> EdgeSplit:
    """Partition edges into message/supervision/validation per direction."""
    msg, sup, val = ratios
    if min(ratios) < 0:
        raise ConfigError(f"split ratios must be non-negative, got {ratios}")
    if abs(msg + sup + val - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    rng = as_rng(seed)
    out = {"message": {}, "supervision": {}, "validation": {}}
    for direction in DIRECTIONS:
        edges = g.edges(direction)
        perm = rng.permutation(edges)
        n = len(perm)
        c1 = int(round(msg * n))
        c2 = int(round((msg + sup) * n))
        out["message"][direction] = np.sort(perm[:c1])
        out["supervision"][direction] = np.sort(perm[c1:c2])
        out["validation"][direction] = np.sort(perm[c2:])
    return EdgeSplit(out["message"], out["supervision"], out["validation"])


# ---------------------------------------------------------------------------
# negative sampling


def sample_negatives(g: BipartiteGraph, count: int, direction: str, seed
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random (customer, transaction) non-edges of one direction.

    Pairs colliding with a real edge are redrawn; exceeding 100x`count`
    total draws aborts (the graph is too dense to reject-sample).
    """
    check_direction(direction)
    if count < 1:
        raise ConfigError(f"need at least one negative, got {count}")
    rng = as_rng(seed)
    real = g.edge_endpoints(direction)
    c_out = np.empty(count, dtype=np.int64)
    t_out = np.empty(count, dtype=np.int64)
    pending = np.arange(count)
    budget = 100 * count
    drawn = 0
    while pending.size:
        k = min(pending.size, budget - drawn)
        if k <= 0:
            raise SamplingError(
                f"negative sampling failed after {budget} draws; graph too dense")
        c = rng.integers(0, g.n_customers, size=k)
        t = rng.integers(0, g.n_transactions, size=k)
        drawn += k
        ok = real[t] != c
        sel = pending[:k]
        c_out[sel[ok]] = c[ok]
        t_out[sel[ok]] = t[ok]
        pending = np.concatenate([sel[~ok], pending[k:]])
    return c_out, t_out


# ---------------------------------------------------------------------------
# layered neighborhood sampling


@dataclass(frozen=True)
class Subgraph:
    """Layered sample around seed nodes.

    ``levels_c[h]``/``levels_t[h]`` hold the sorted global node ids known
    after h expansion hops (level sets are nested; level 0 is the seeds).
    ``layers[i]`` maps each relation to localized edge arrays
    (src_local, dst_local, edge_txn) where layer i reads node level
    depth-i and writes node level depth-i-1; src_local indexes the input
    level of the source type, dst_local the output level of the
    destination type, and edge_txn is the global transaction index (the
    edge id). ``self_c[i]``/``self_t[i]`` locate each output node inside
    the input level for self/skip terms.
    """
    depth: int
    levels_c: tuple
    levels_t: tuple
    layers: tuple
    self_c: tuple
    self_t: tuple

    @property
    def seed_customers(self) -> np.ndarray:
        return self.levels_c[0]

    @property
    def seed_txns(self) -> np.ndarray:
        return self.levels_t[0]

    def seed_positions_c(self, customers) -> np.ndarray:
        return np.searchsorted(self.levels_c[0], np.asarray(customers, dtype=np.int64))

    def seed_positions_t(self, txns) -> np.ndarray:
        return np.searchsorted(self.levels_t[0], np.asarray(txns, dtype=np.int64))


def _flat_neighbors(indptr, indices, frontier):
    """All CSR rows of `frontier`, flattened, plus per-row counts."""
    counts = indptr[frontier + 1] - indptr[frontier]
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), counts
    starts = np.repeat(indptr[frontier], counts)
    offsets = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    return indices[starts + offsets], counts


def _cap(owners_frontier, nbrs, counts, fanout, rng):
    """Per-owner uniform sample without replacement when over the cap.

    The RNG is consumed only for owners whose neighbor count exceeds the
    cap, so a non-binding cap yields the same subgraph for every seed.
    """
    if not np.any(counts > fanout):
        return np.repeat(owners_frontier, counts), nbrs, counts
    chunks = []
    new_counts = np.minimum(counts, fanout)
    pos = 0
    for cnt in counts:
        chunk = nbrs[pos:pos + cnt]
        pos += cnt
        if cnt > fanout:
            chunk = np.sort(rng.choice(chunk, size=fanout, replace=False))
        chunks.append(chunk)
    flat = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return np.repeat(owners_frontier, new_counts), flat, new_counts


def _filter_removed(owners, nbrs, counts, removed):
    if removed is None:
        return nbrs, counts
    keep = ~removed[nbrs]
    if keep.all():
        return nbrs, counts
    owner_pos = np.repeat(np.arange(len(counts)), counts)
    new_counts = np.bincount(owner_pos[keep], minlength=len(counts))
    return nbrs[keep], new_counts


def sample_neighborhood_nodes(g: BipartiteGraph, seed_customers, seed_txns,
                              fanout: int, num_layers: int, seed,
                              removed_out: np.ndarray | None = None,
                              removed_in: np.ndarray | None = None) -> Subgraph:
    """Breadth-wise layered sampling from explicit seed node sets.

    Each node's neighbor sample is drawn once (at the hop the node is
    first expanded) and reused by every layer, capped at `fanout` per
    node per relation. `removed_out`/`removed_in` are boolean masks over
    transactions whose edge in that direction is treated as absent
    before sampling.
    """
    if fanout < 1:
        raise ConfigError(f"fanout must be >= 1, got {fanout}")
    if num_layers < 1:
        raise ConfigError(f"need at least one layer, got {num_layers}")
    rng = as_rng(seed)
    c_cur = np.unique(np.asarray(seed_customers, dtype=np.int64))
    t_cur = np.unique(np.asarray(seed_txns, dtype=np.int64))
    if len(c_cur) and (c_cur[0] < 0 or c_cur[-1] >= g.n_customers):
        raise ConfigError("seed customer index out of range")
    if len(t_cur) and (t_cur[0] < 0 or t_cur[-1] >= g.n_transactions):
        raise ConfigError("seed transaction index out of range")

    levels_c, levels_t = [c_cur], [t_cur]
    front_c, front_t = c_cur, t_cur
    # sampled edges discovered from the customer side, one batch per hop
    out_c_parts, out_t_parts = [], []
    in_c_parts, in_t_parts = [], []

    for _ in range(num_layers):
        new_t_parts, new_c_parts = [], []
        if front_c.size:
            for indptr, indices, removed, c_parts, t_parts in (
                    (g.out_indptr, g.out_indices, removed_out, out_c_parts, out_t_parts),
                    (g.in_indptr, g.in_indices, removed_in, in_c_parts, in_t_parts)):
                nbrs, counts = _flat_neighbors(indptr, indices, front_c)
                nbrs, counts = _filter_removed(front_c, nbrs, counts, removed)
                owners, nbrs, counts = _cap(front_c, nbrs, counts, fanout, rng)
                c_parts.append(owners)
                t_parts.append(nbrs)
                new_t_parts.append(nbrs)
        if front_t.size:
            for ends, removed in ((g.o_src, removed_out), (g.i_dst, removed_in)):
                vals = ends[front_t]
                keep = vals >= 0
                if removed is not None:
                    keep &= ~removed[front_t]
                new_c_parts.append(vals[keep])
        new_c = np.unique(np.concatenate(new_c_parts)) if new_c_parts else np.empty(0, np.int64)
        new_t = np.unique(np.concatenate(new_t_parts)) if new_t_parts else np.empty(0, np.int64)
        next_c = np.union1d(c_cur, new_c)
        next_t = np.union1d(t_cur, new_t)
        front_c = np.setdiff1d(new_c, c_cur, assume_unique=True)
        front_t = np.setdiff1d(new_t, t_cur, assume_unique=True)
        c_cur, t_cur = next_c, next_t
        levels_c.append(c_cur)
        levels_t.append(t_cur)

    out_c = np.concatenate(out_c_parts) if out_c_parts else np.empty(0, np.int64)
    out_t = np.concatenate(out_t_parts) if out_t_parts else np.empty(0, np.int64)
    in_c = np.concatenate(in_c_parts) if in_c_parts else np.empty(0, np.int64)
    in_t = np.concatenate(in_t_parts) if in_t_parts else np.empty(0, np.int64)

    layers, self_c, self_t = [], [], []
    for h in range(num_layers - 1, -1, -1):
        c_out, t_out = levels_c[h], levels_t[h]
        c_in, t_in = levels_c[h + 1], levels_t[h + 1]
        rels = {}
        for rel, e_c, e_t in ((OUT_REV, out_c, out_t), (IN_FWD, in_c, in_t)):
            m = np.isin(e_c, c_out)
            rels[rel] = (np.searchsorted(t_in, e_t[m]),
                         np.searchsorted(c_out, e_c[m]),
                         e_t[m])
        for rel, ends, removed in ((OUT_FWD, g.o_src, removed_out),
                                   (IN_REV, g.i_dst, removed_in)):
            keep = ends[t_out] >= 0
            if removed is not None:
                keep &= ~removed[t_out]
            tt = t_out[keep]
            rels[rel] = (np.searchsorted(c_in, ends[tt]),
                         np.searchsorted(t_out, tt),
                         tt)
        layers.append(rels)
        self_c.append(np.searchsorted(c_in, c_out))
        self_t.append(np.searchsorted(t_in, t_out))

    return Subgraph(num_layers, tuple(levels_c), tuple(levels_t),
                    tuple(layers), tuple(self_c), tuple(self_t))


def sample_neighborhood(g: BipartiteGraph, seed_edges, fanout: int,
                        num_layers: int, seed,
                        removed_out: np.ndarray | None = None,
                        removed_in: np.ndarray | None = None) -> Subgraph:
    """Layered sample seeded by the endpoints of (customer, txn) pairs."""
    pairs = np.asarray(seed_edges, dtype=np.int64).reshape(-1, 2)
    return sample_neighborhood_nodes(g, pairs[:, 0], pairs[:, 1], fanout,
                                     num_layers, seed, removed_out, removed_in)


def full_subgraph(g: BipartiteGraph, num_layers: int) -> Subgraph:
    """Every node at every level with every edge; no sampling, no fanout.

    Local and global indices coincide, so one relation dict serves all
    layers. Suits full-batch encoding of small and medium graphs.
    """
    if num_layers < 1:
        raise ConfigError(f"need at least one layer, got {num_layers}")
    all_c = np.arange(g.n_customers, dtype=np.int64)
    all_t = np.arange(g.n_transactions, dtype=np.int64)
    out_t = g.edges(OUTGOING)
    in_t = g.edges(INCOMING)
    rels = {
        OUT_FWD: (g.o_src[out_t], out_t, out_t),
        OUT_REV: (out_t, g.o_src[out_t], out_t),
        IN_FWD: (in_t, g.i_dst[in_t], in_t),
        IN_REV: (g.i_dst[in_t], in_t, in_t),
    }
    return Subgraph(num_layers,
                    tuple([all_c] * (num_layers + 1)),
                    tuple([all_t] * (num_layers + 1)),
                    tuple([rels] * num_layers),
                    tuple([all_c] * num_layers),
                    tuple([all_t] * num_layers))


def sever_edges(sub: Subgraph, edges, direction: str) -> Subgraph:
    """Drop the given transactions' edges of one direction from a sample.

    Both the forward and transposed forms are removed at every layer;
    the other direction is untouched. Severing an absent edge is a no-op.
    """
    check_direction(direction)
    edges = np.unique(np.asarray(edges, dtype=np.int64))
    rels = (OUT_FWD, OUT_REV) if direction == OUTGOING else (IN_FWD, IN_REV)
    layers = []
    for layer in sub.layers:
        new_layer = dict(layer)
        for rel in rels:
            src, dst, etxn = layer[rel]
            keep = ~np.isin(etxn, edges)
            new_layer[rel] = (src[keep], dst[keep], etxn[keep])
        layers.append(new_layer)
    return Subgraph(sub.depth, sub.levels_c, sub.levels_t, tuple(layers),
                    sub.self_c, sub.self_t)


# ---------------------------------------------------------------------------
# ingestion: line-delimited records


def _require(obj: dict, key: str, path: str, line_no: int):
    if key not in obj:
        raise IngestError(f"{path}:{line_no}: missing field {key!r}")
    return obj[key]


def load_profiles(path: str) -> list[CustomerProfile]:
    profiles = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}:{n}: bad record: {e}") from e
            profiles.append(CustomerProfile(
                customer_id=str(_require(obj, "customer_id", path, n)),
                features=np.asarray(_require(obj, "features", path, n), dtype=np.float64)))
    return profiles


def load_transactions(path: str) -> list[RawTransaction]:
    txns = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"{path}:{n}: bad record: {e}") from e
            txns.append(RawTransaction(
                txn_id=str(_require(obj, "txn_id", path, n)),
                source_customer=str(_require(obj, "source", path, n)),
                dest_customer=str(_require(obj, "dest", path, n)),
                timestamp=float(_require(obj, "timestamp", path, n)),
                features=np.asarray(_require(obj, "features", path, n), dtype=np.float64)))
    return txns


def write_profiles(path: str, profiles: Iterable[CustomerProfile]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps({"customer_id": p.customer_id,
                                 "features": list(map(float, p.features))}) + "\n")


def write_transactions(path: str, txns: Iterable[RawTransaction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in txns:
            fh.write(json.dumps({"txn_id": t.txn_id,
                                 "source": t.source_customer,
                                 "dest": t.dest_customer,
                                 "timestamp": float(t.timestamp),
                                 "features": list(map(float, t.features))}) + "\n")


# ---------------------------------------------------------------------------
# snapshot persistence


def _write_strings(fh: BinaryIO, items: Sequence[str]) -> None:
    fh.write(struct.pack("<I", len(items)))
    for s in items:
        b = s.encode("utf-8")
        fh.write(struct.pack("<I", len(b)))
        fh.write(b)


def _read_strings(fh: BinaryIO) -> list[str]:
    (n,) = struct.unpack("<I", fh.read(4))
    out = []
    for _ in range(n):
        (ln,) = struct.unpack("<I", fh.read(4))
        out.append(fh.read(ln).decode("utf-8"))
    return out


def _write_ints(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.int64)
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.astype("<i8").tobytes())


def _read_ints(fh: BinaryIO) -> np.ndarray:
    (n,) = struct.unpack("<Q", fh.read(8))
    return np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64)


def save_graph(g: BipartiteGraph, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        _write_strings(fh, g.customer_ids)
        _write_strings(fh, g.txn_ids)
        write_array(fh, g.x_c)
        write_array(fh, g.x_t)
        _write_ints(fh, g.o_src)
        _write_ints(fh, g.i_dst)
        write_array(fh, g.timestamps)
        for key in ("c_mean", "c_std", "t_mean", "t_std"):
            write_array(fh, g.stats[key])


def load_graph(path: str) -> BipartiteGraph:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise IngestError(f"{path}: not a graph snapshot")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise IngestError(f"{path}: unsupported snapshot version {version}")
        customer_ids = _read_strings(fh)
        txn_ids = _read_strings(fh)
        x_c = read_array(fh)
        x_t = read_array(fh)
        o_src = _read_ints(fh)
        i_dst = _read_ints(fh)
        timestamps = read_array(fh)
        stats = {key: read_array(fh) for key in ("c_mean", "c_std", "t_mean", "t_std")}
    return BipartiteGraph(customer_ids, txn_ids, x_c, x_t, o_src, i_dst,
                          timestamps, stats)
