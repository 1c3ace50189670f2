"""Self-supervised link-prediction training loop and production scoring.

Message passing only ever sees the message split: supervision and
validation edges are withheld from the graph the sampler walks. On top
of that, every step severs the predicted direction's real edges for all
transactions in the batch (negatives included), so a prediction can
never peek at the edge it is asked to make.

Scoring attaches each new transaction to the reference graph one at a
time: the predicted direction is severed, the transaction embedding is
computed through the sampled neighborhood, and it is decoded against
the counterpart customer's embedding from the reference graph alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ConfigError, NumericalError
from .evaluation import average_precision, roc_auc
from .graph import (DIRECTIONS, INCOMING, OUTGOING, BipartiteGraph, EdgeSplit,
                    RawTransaction, as_rng, check_direction, extend_graph,
                    sample_negatives, sample_neighborhood,
                    sample_neighborhood_nodes)
from .model import ModelParams, anomaly_score, decode, encode, init_params
from .ndtensor import Tensor, bce, gather_rows, reshape, scale, zero_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainingConfig:
    """Hyperparameters; defaults match the CLI's shipped configuration."""
    encoder: str = "gat"
    num_layers: int = 3
    hidden: int = 32
    heads: int = 4
    learning_rate: float = 0.001
    batch_size: int = 256
    negatives: int = 1          # negatives sampled per positive
    fanout: int = 32
    max_epochs: int = 40
    patience: int = 6
    dropout: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs it)")
        if self.negatives < 1:
            raise ConfigError("negatives must be >= 1")
        if self.fanout < 1:
            raise ConfigError("fanout must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


class AdamState:
    """First/second moment accumulators, one pair per parameter tensor."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0


def adam_step(state: AdamState, params: list[Tensor], lr: float) -> None:
    """Bias-corrected Adam update in place; missing gradients count as zero."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[i] = ADAM_BETA1 * state.m[i] + (1 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1 - ADAM_BETA2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + ADAM_EPS)


def link_loss(pos_preds: Tensor, neg_preds: Tensor) -> Tensor:
    """Mean over the batch of -log(y_pos) - sum_m log(1 - y_neg_m).

    neg_preds holds M columns per positive; with M=1 this is exactly
    bce(pos, 1) + bce(neg, 0).
    """
    if neg_preds.size % pos_preds.size != 0:
        raise ConfigError(f"negative count {neg_preds.size} is not a multiple "
                          f"of positive count {pos_preds.size}")
    m = neg_preds.size // pos_preds.size
    loss = bce(pos_preds, 1.0)
    neg_term = bce(neg_preds, 0.0)
    return nd.add(loss, scale(neg_term, float(m)) if m != 1 else neg_term)


def message_graph(g: BipartiteGraph, split: EdgeSplit) -> BipartiteGraph:
    """The graph whose only edges are the message split of each direction."""
    keep_out = np.zeros(g.n_transactions, dtype=bool)
    keep_out[split.message[OUTGOING]] = True
    keep_in = np.zeros(g.n_transactions, dtype=bool)
    keep_in[split.message[INCOMING]] = True
    return BipartiteGraph(
        g.customer_ids, g.txn_ids, g.x_c, g.x_t,
        np.where(keep_out, g.o_src, -1), np.where(keep_in, g.i_dst, -1),
        g.timestamps, g.stats)


def _severed_masks(n_txns: int, direction: str, txns: np.ndarray):
    removed = np.zeros(n_txns, dtype=bool)
    removed[txns] = True
    if direction == OUTGOING:
        return removed, None
    return None, removed


def _forward_pairs(params: ModelParams, msg_g: BipartiteGraph, direction: str,
                   pos_c, pos_t, neg_c, neg_t, fanout: int, sample_rng,
                   training: bool, dropout_p: float, dropout_rng=None):
    """Sever, sample, encode, decode one batch of positives and negatives."""
    all_c = np.concatenate([pos_c, neg_c])
    all_t = np.concatenate([pos_t, neg_t])
    removed_out, removed_in = _severed_masks(msg_g.n_transactions, direction,
                                             np.unique(all_t))
    sub = sample_neighborhood(msg_g, np.stack([all_c, all_t], axis=1),
                              fanout, params.num_layers, sample_rng,
                              removed_out=removed_out, removed_in=removed_in)
    z_c, z_t = encode(params, sub, msg_g.x_c, msg_g.x_t, training=training,
                      rng=dropout_rng, dropout_p=dropout_p)
    pc = gather_rows(z_c, sub.seed_positions_c(pos_c))
    pt = gather_rows(z_t, sub.seed_positions_t(pos_t))
    nc = gather_rows(z_c, sub.seed_positions_c(neg_c))
    nt = gather_rows(z_t, sub.seed_positions_t(neg_t))
    y_pos = decode(params.w_dec, pc, pt)
    y_neg = decode(params.w_dec, nc, nt)
    return y_pos, y_neg, sub


def train_step(params: ModelParams, g: BipartiteGraph, msg_g: BipartiteGraph,
               split: EdgeSplit, config: TrainingConfig, direction: str,
               adam: AdamState, rng, batch: np.ndarray | None = None) -> float:
    """One severed-link-prediction batch plus an Adam update; returns loss."""
    check_direction(direction)
    sup = split.supervision[direction]
    if sup.size == 0:
        raise ConfigError(f"no supervision edges for direction {direction!r}")
    rng = as_rng(rng)
    if batch is None:
        take = min(config.batch_size, sup.size)
        batch = rng.choice(sup, size=take, replace=False)
    pos_t = np.asarray(batch, dtype=np.int64)
    pos_c = g.edge_endpoints(direction)[pos_t]
    neg_c, neg_t = sample_negatives(g, pos_t.size * config.negatives,
                                    direction, rng)
    tensors = params.parameters()
    zero_grad(tensors)
    with nd.Tape() as tape:
        y_pos, y_neg, _ = _forward_pairs(
            params, msg_g, direction, pos_c, pos_t, neg_c, neg_t,
            config.fanout, rng, training=True, dropout_p=config.dropout,
            dropout_rng=rng)
        loss = link_loss(y_pos, reshape(y_neg, (pos_t.size, config.negatives)))
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError(f"training loss is not finite ({value})")
    tape.backward(loss)
    adam_step(adam, tensors, config.learning_rate)
    return value


def _validation_negatives(g, split, config):
    rng = as_rng(np.random.SeedSequence([config.seed, 2]))
    negs = {}
    for d in DIRECTIONS:
        n = split.validation[d].size * config.negatives
        negs[d] = sample_negatives(g, n, d, rng) if n else (np.empty(0, np.int64),) * 2
    return negs


def validation_loss(params: ModelParams, g: BipartiteGraph,
                    msg_g: BipartiteGraph, split: EdgeSplit,
                    config: TrainingConfig, val_negs: dict,
                    chunk: int = 2048) -> float:
    """Deterministic held-out loss; the sampling seed is fixed per run."""
    total, count = 0.0, 0
    for d in DIRECTIONS:
        val = split.validation[d]
        if val.size == 0:
            continue
        pos_c_all = g.edge_endpoints(d)[val]
        neg_c_all, neg_t_all = val_negs[d]
        for lo in range(0, val.size, chunk):
            hi = min(lo + chunk, val.size)
            nlo, nhi = lo * config.negatives, hi * config.negatives
            rng = as_rng(np.random.SeedSequence([config.seed, 3]))
            y_pos, y_neg, _ = _forward_pairs(
                params, msg_g, d, pos_c_all[lo:hi], val[lo:hi],
                neg_c_all[nlo:nhi], neg_t_all[nlo:nhi],
                config.fanout, rng, training=False, dropout_p=0.0)
            loss = link_loss(y_pos, reshape(y_neg, (hi - lo, config.negatives)))
            total += float(loss.data) * (hi - lo)
            count += hi - lo
    if count == 0:
        raise ConfigError("no validation edges in either direction")
    return total / count


def fit(g: BipartiteGraph, split: EdgeSplit, config: TrainingConfig
        ) -> tuple[ModelParams, list[dict]]:
    """Train with per-step direction alternation and early stopping.

    Keeps the parameters of the best validation epoch; stops once the
    validation loss has failed to improve for `patience` consecutive
    epochs (at least one). History holds one record per epoch.
    """
    config.validate()
    if all(split.supervision[d].size == 0 for d in DIRECTIONS):
        raise ConfigError("no supervision edges in either direction")
    params = init_params(config.encoder, g.d_customer, g.d_transaction,
                         config.num_layers, config.hidden, config.heads,
                         seed=config.seed)
    adam = AdamState(params.parameters())
    msg_g = message_graph(g, split)
    rng = as_rng(np.random.SeedSequence([config.seed, 1]))
    val_negs = _validation_negatives(g, split, config)

    best_val = np.inf
    best_params = params.copy()
    bad_epochs = 0
    history: list[dict] = []
    stop_after = max(config.patience, 1)
    for epoch in range(config.max_epochs):
        chunks = []
        for d in DIRECTIONS:
            sup = split.supervision[d]
            if sup.size == 0:
                chunks.append([])
                continue
            perm = rng.permutation(sup)
            chunks.append([(d, perm[lo:lo + config.batch_size])
                           for lo in range(0, sup.size, config.batch_size)])
        # alternate outgoing, incoming, ...; leftovers of the longer side last
        interleaved = []
        for pair in zip(*chunks) if all(chunks) else ():
            interleaved.extend(pair)
        longer = max(chunks, key=len)
        interleaved.extend(longer[min(len(c) for c in chunks):])

        losses = []
        for d, batch in interleaved:
            if batch.size < 2:
                continue  # batch norm cannot run on a single row
            losses.append(train_step(params, g, msg_g, split, config, d,
                                     adam, rng, batch=batch))
        val = validation_loss(params, g, msg_g, split, config, val_negs)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val})
        if val < best_val:
            best_val = val
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= stop_after:
                break
    return best_params, history


# ---------------------------------------------------------------------------
# held-out evaluation shared by all models


def build_eval_examples(g: BipartiteGraph, split: EdgeSplit, negatives_seed: int
                        ) -> list[tuple[str, int, int, int]]:
    """(direction, customer, txn, label) rows from the validation edges.

    Positives are the held-out edges; one uniform non-edge is drawn per
    positive. The same rows serve every model for a fair comparison.
    """
    rng = as_rng(np.random.SeedSequence([negatives_seed, 4]))
    rows = []
    for d in DIRECTIONS:
        val = split.validation[d]
        if val.size == 0:
            continue
        ends = g.edge_endpoints(d)
        for t in val:
            rows.append((d, int(ends[t]), int(t), 1))
        neg_c, neg_t = sample_negatives(g, val.size, d, rng)
        rows.extend((d, int(c), int(t), 0) for c, t in zip(neg_c, neg_t))
    return rows


def predict_pairs(params: ModelParams, msg_g: BipartiteGraph,
                  rows: list[tuple[str, int, int, int]], config: TrainingConfig,
                  chunk: int = 2048) -> np.ndarray:
    """Link likelihood for (direction, customer, txn) rows, batch-severed."""
    out = np.zeros(len(rows))
    order = np.arange(len(rows))
    for d in DIRECTIONS:
        sel = order[[r[0] == d for r in rows]]
        for lo in range(0, sel.size, chunk):
            part = sel[lo:lo + chunk]
            cs = np.array([rows[i][1] for i in part], dtype=np.int64)
            ts = np.array([rows[i][2] for i in part], dtype=np.int64)
            removed_out, removed_in = _severed_masks(
                msg_g.n_transactions, d, np.unique(ts))
            rng = as_rng(np.random.SeedSequence([config.seed, 5, lo]))
            sub = sample_neighborhood(msg_g, np.stack([cs, ts], axis=1),
                                      config.fanout, params.num_layers, rng,
                                      removed_out=removed_out,
                                      removed_in=removed_in)
            z_c, z_t = encode(params, sub, msg_g.x_c, msg_g.x_t)
            y = decode(params.w_dec,
                       gather_rows(z_c, sub.seed_positions_c(cs)),
                       gather_rows(z_t, sub.seed_positions_t(ts)))
            out[part] = y.data[:, 0]
    return out


def evaluate_split(params: ModelParams, g: BipartiteGraph, split: EdgeSplit,
                   config: TrainingConfig) -> dict:
    """Held-out AUC/AP on validation edges vs sampled non-edges."""
    rows = build_eval_examples(g, split, config.seed)
    msg_g = message_graph(g, split)
    scores = predict_pairs(params, msg_g, rows, config)
    labels = np.array([r[3] for r in rows])
    return {"roc_auc": roc_auc(scores, labels),
            "average_precision": average_precision(scores, labels),
            "examples": len(rows)}


# ---------------------------------------------------------------------------
# production scoring


@dataclass(frozen=True)
class AnomalyResult:
    txn_id: str
    direction: str
    customer_id: str
    y_hat: float | None
    anomaly_score: float | None
    cold_start: bool


def _reference_embeddings(params: ModelParams, g: BipartiteGraph,
                          customers: np.ndarray, seed: int, fanout: int,
                          chunk: int = 512) -> dict[int, np.ndarray]:
    """Final-layer customer embeddings over the reference graph."""
    out = {}
    for lo in range(0, customers.size, chunk):
        part = customers[lo:lo + chunk]
        rng = as_rng(np.random.SeedSequence([seed, 6, lo]))
        sub = sample_neighborhood_nodes(g, part, [], fanout,
                                        params.num_layers, rng)
        z_c, _ = encode(params, sub, g.x_c, g.x_t)
        pos = sub.seed_positions_c(part)
        for c, row in zip(part, z_c.data[pos]):
            out[int(c)] = row
    return out


def score_transactions(params: ModelParams, g: BipartiteGraph,
                       new_transactions: list[RawTransaction],
                       config: TrainingConfig) -> list[AnomalyResult]:
    """Anomaly-score each direction of each new transaction.

    Transactions are scored independently: the scored transaction is
    attached by its counterpart (non-predicted) edge only, other new
    transactions stay invisible, and the customer side of the decoder
    comes from the reference graph without any new transaction.
    """
    if not new_transactions:
        return []
    ext_g, infos = extend_graph(g, new_transactions)
    base_out = np.zeros(ext_g.n_transactions, dtype=bool)
    base_out[g.n_transactions:] = True
    base_in = base_out.copy()

    needed = sorted({i for info in infos for i in (info.src_index, info.dst_index)
                     if i is not None})
    ref = _reference_embeddings(params, g, np.asarray(needed, dtype=np.int64),
                                config.seed, config.fanout)
    results = []
    for info in infos:
        raw = new_transactions[info.txn_index - g.n_transactions]
        for direction, cust_idx, cold, cust_id in (
                (OUTGOING, info.src_index, info.src_cold, raw.source_customer),
                (INCOMING, info.dst_index, info.dst_cold, raw.dest_customer)):
            if cust_idx is None and not cold:
                continue  # EXTERNAL side: no edge to predict
            if cold:
                results.append(AnomalyResult(info.txn_id, direction, cust_id,
                                             None, None, True))
                continue
            removed_out = base_out.copy()
            removed_in = base_in.copy()
            # expose only the scored transaction's counterpart edge
            if direction == OUTGOING:
                removed_in[info.txn_index] = False
            else:
                removed_out[info.txn_index] = False
            rng = as_rng(np.random.SeedSequence(
                [config.seed, 7, info.txn_index, 0 if direction == OUTGOING else 1]))
            sub = sample_neighborhood_nodes(
                ext_g, [], [info.txn_index], config.fanout, params.num_layers,
                rng, removed_out=removed_out, removed_in=removed_in)
            _, z_t = encode(params, sub, ext_g.x_c, ext_g.x_t)
            z_txn = z_t.data[sub.seed_positions_t([info.txn_index])]
            y_hat = decode(params.w_dec, Tensor(ref[cust_idx].reshape(1, -1)),
                           Tensor(z_txn))
            y = float(y_hat.data[0, 0])
            results.append(AnomalyResult(info.txn_id, direction, cust_id,
                                         y, float(anomaly_score(y)), False))
    return results


def write_results(path: str, results: list[AnomalyResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "txn_id": r.txn_id, "direction": r.direction,
                "customer_id": r.customer_id, "y_hat": r.y_hat,
                "anomaly_score": r.anomaly_score, "cold_start": r.cold_start,
            }) + "\n")


def read_results(path: str) -> list[AnomalyResult]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out.append(AnomalyResult(obj["txn_id"], obj["direction"],
                                     obj["customer_id"], obj["y_hat"],
                                     obj["anomaly_score"], obj["cold_start"]))
    return out


def write_metrics_log(path: str, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(f"epoch={row['epoch']} train_loss={row['train_loss']:.6f} "
                     f"val_loss={row['val_loss']:.6f}\n")
