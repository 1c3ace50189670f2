"""Synthetic customer/transaction generator with planted anomalies.

Customers belong to communities and, inside each community, to small
rings of habitual counterparties. Ring membership shapes the edge
structure but is absent from every feature, so it rewards models that
read the graph. Community membership leaks weakly into profiles,
amounts and activity hours. Anomalous transactions pair customers from
different communities and carry out-of-distribution amounts; the truth
is written to a separate labels file that the pipeline never reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IngestError
from .graph import EXTERNAL, CustomerProfile, RawTransaction

AGGREGATE_DIMS = 4   # appended to each profile from warm-up activity


@dataclass
class SyntheticConfig:
    n_customers: int = 5000
    n_transactions: int = 25000
    n_communities: int = 8
    d_customer: int = 66
    d_transaction: int = 12
    anomaly_rate: float = 0.02
    external_rate: float = 0.05
    ring_size: int = 5
    in_ring_rate: float = 0.9
    in_community_rate: float = 0.05
    activity_skew: float = 1.2
    profile_separation: float = 0.15
    amount_separation: float = 0.08
    time_span: float = 100.0
    warmup_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_communities < 1:
            raise ConfigError("need at least one community")
        if self.n_customers < 2 * self.n_communities:
            raise ConfigError("need at least two customers per community")
        if self.n_transactions < 1:
            raise ConfigError("need at least one transaction")
        if self.d_customer < AGGREGATE_DIMS + 1:
            raise ConfigError(f"d_customer must be > {AGGREGATE_DIMS}")
        if self.d_transaction < 3:
            raise ConfigError("d_transaction must be >= 3 (amount and hour)")
        for name in ("anomaly_rate", "external_rate", "in_ring_rate",
                     "in_community_rate", "warmup_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.anomaly_rate + self.external_rate > 1.0:
            raise ConfigError("anomaly_rate + external_rate must not exceed 1")
        if self.in_ring_rate + self.in_community_rate > 1.0:
            raise ConfigError("in_ring_rate + in_community_rate must not exceed 1")
        if self.anomaly_rate > 0.0 and self.n_communities < 2:
            raise ConfigError("cross-community anomalies need >= 2 communities")
        if self.ring_size < 2:
            raise ConfigError("ring_size must be >= 2")
        if self.activity_skew < 0:
            raise ConfigError("activity_skew must be >= 0")
        if self.time_span <= 0:
            raise ConfigError("time_span must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


@dataclass(frozen=True)
class TxnLabel:
    txn_id: str
    anomaly: bool
    src_community: int
    dst_community: int   # -1 when the side is EXTERNAL


def _pick_other(rng, members: np.ndarray, exclude: int,
                weights: np.ndarray) -> int:
    """Activity-proportional member of `members` that is not `exclude`."""
    pool = members[members != exclude]
    if pool.size == 0:
        return int(members[0])
    w = weights[pool]
    return int(pool[rng.choice(pool.size, p=w / w.sum())])


def assign_structure(config: SyntheticConfig
                     ) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Deterministic community and ring membership per customer index."""
    n, k = config.n_customers, config.n_communities
    community = np.arange(n, dtype=np.int64) % k
    ring_of = np.zeros(n, dtype=np.int64)
    rings: list[np.ndarray] = []
    for c in range(k):
        members = np.flatnonzero(community == c)
        for lo in range(0, members.size, config.ring_size):
            chunk = members[lo:lo + config.ring_size]
            if chunk.size == 1 and rings:
                rings[-1] = np.concatenate([rings[-1], chunk])
                ring_of[chunk] = len(rings) - 1
                continue
            ring_of[chunk] = len(rings)
            rings.append(chunk)
    return community, rings, ring_of


def generate(config: SyntheticConfig
             ) -> tuple[list[CustomerProfile], list[RawTransaction], list[TxnLabel]]:
    """Deterministically build profiles, transactions and truth labels."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11]))
    n, k = config.n_customers, config.n_communities
    community, rings, ring_of = assign_structure(config)
    by_community = [np.flatnonzero(community == c) for c in range(k)]

    d_profile = config.d_customer - AGGREGATE_DIMS
    prototypes = rng.normal(0.0, config.profile_separation, size=(k, d_profile))
    base_profiles = prototypes[community] + rng.normal(size=(n, d_profile))

    mu_amount = 2.0 + config.amount_separation * np.arange(k)
    peak_hour = (3.0 * np.arange(k)) % 24.0

    # heavy-tailed per-customer activity; skew 0 degenerates to uniform
    activity = np.exp(rng.normal(0.0, config.activity_skew, size=n))
    timestamps = rng.uniform(0.0, config.time_span, size=config.n_transactions)
    kinds = rng.uniform(size=config.n_transactions)
    src_all = rng.choice(n, size=config.n_transactions,
                         p=activity / activity.sum())

    transactions: list[RawTransaction] = []
    labels: list[TxnLabel] = []
    noise_dims = config.d_transaction - 3
    for j in range(config.n_transactions):
        src = int(src_all[j])
        com = int(community[src])
        anomalous = kinds[j] < config.anomaly_rate
        external = (not anomalous
                    and kinds[j] < config.anomaly_rate + config.external_rate)
        if anomalous:
            other_com = int((com + 1 + rng.integers(k - 1)) % k)
            dst = _pick_other(rng, by_community[other_com], src, activity)
            log_amount = rng.normal(float(mu_amount.mean()) + 3.5, 0.5)
            hour = rng.uniform(0.0, 24.0)
        else:
            u = rng.uniform()
            ring = rings[ring_of[src]]
            if u < config.in_ring_rate and ring.size > 1:
                dst = _pick_other(rng, ring, src, activity)
            elif u < config.in_ring_rate + config.in_community_rate:
                dst = _pick_other(rng, by_community[com], src, activity)
            else:
                dst = _pick_other(rng, np.arange(n), src, activity)
            log_amount = rng.normal(mu_amount[com], 0.5)
            hour = rng.normal(peak_hour[com], 2.0) % 24.0
        features = np.empty(config.d_transaction)
        features[0] = np.exp(log_amount)
        features[1] = np.sin(2.0 * np.pi * hour / 24.0)
        features[2] = np.cos(2.0 * np.pi * hour / 24.0)
        if noise_dims:
            features[3:] = rng.normal(size=noise_dims)

        src_id, dst_id = f"c{src:06d}", f"c{dst:06d}"
        src_com, dst_com = com, int(community[dst])
        if external:
            if rng.uniform() < 0.5:
                src_id, src_com = EXTERNAL, -1
            else:
                dst_id, dst_com = EXTERNAL, -1
        transactions.append(RawTransaction(f"t{j:07d}", src_id, dst_id,
                                           float(timestamps[j]), features))
        labels.append(TxnLabel(f"t{j:07d}", bool(anomalous), src_com, dst_com))

    # warm-up aggregates: early-window activity folded into the profile
    warmup_end = config.warmup_fraction * config.time_span
    agg = np.zeros((n, AGGREGATE_DIMS))
    for txn in transactions:
        if txn.timestamp >= warmup_end:
            continue
        amount = float(txn.features[0])
        if txn.source_customer != EXTERNAL:
            i = int(txn.source_customer[1:])
            agg[i, 0] += 1.0
            agg[i, 2] += amount
        if txn.dest_customer != EXTERNAL:
            i = int(txn.dest_customer[1:])
            agg[i, 1] += 1.0
            agg[i, 3] += amount
    profiles = [CustomerProfile(
        f"c{i:06d}", np.concatenate([base_profiles[i], np.log1p(agg[i])]))
        for i in range(n)]
    return profiles, transactions, labels


def holdout_split(transactions: list[RawTransaction], boundary: float
                  ) -> tuple[list[RawTransaction], list[RawTransaction]]:
    """Time split: strictly earlier than the boundary trains, the rest tests."""
    train = [t for t in transactions if t.timestamp < boundary]
    test = [t for t in transactions if t.timestamp >= boundary]
    return train, test


def write_labels(path: str, labels: list[TxnLabel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(json.dumps({
                "txn_id": lab.txn_id, "anomaly": lab.anomaly,
                "src_community": lab.src_community,
                "dst_community": lab.dst_community}) + "\n")


def load_labels(path: str) -> list[TxnLabel]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(TxnLabel(obj["txn_id"], bool(obj["anomaly"]),
                                    int(obj["src_community"]),
                                    int(obj["dst_community"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise IngestError(f"{path}:{lineno}: bad label record: {e}") from e
    return out
