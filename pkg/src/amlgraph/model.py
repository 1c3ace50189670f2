"""Bipartite graph encoders (GAT, SAGE, GIN) and the link decoder.

Every layer computes fresh embeddings for both node types. A node type
always aggregates over the two relations pointing at it (customers from
OUT_REV and IN_FWD, transactions from OUT_FWD and IN_REV), each relation
with its own parameters, plus a destination-type self projection.

Attention (GAT) is normalized per relation: each destination node's
softmax segment holds that relation's incoming edges together with the
node's self term, so the coefficients of one segment sum to one. The
per-relation aggregations are then summed before the activation.

Hidden layers apply ReLU, then batch norm, then dropout; the final layer
returns the raw aggregation so embeddings are unconstrained reals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import ndtensor as nd
from .errors import ConfigError, DimensionError, IngestError
from .graph import IN_FWD, IN_REV, OUT_FWD, OUT_REV, RELATIONS, Subgraph
from .ndtensor import (BatchNormState, Tensor, add, batch_norm, concat,
                       dropout, gather_rows, hadamard, leaky_relu, matmul,
                       read_array, relu, segment_softmax, segment_sum,
                       sigmoid, write_array)

KINDS = ("gat", "sage", "gin")

# relations feeding each destination type; both sources are the other type
DEST_RELATIONS = {"c": (OUT_REV, IN_FWD), "t": (OUT_FWD, IN_REV)}

_CKPT_MAGIC = b"AMLC"
_CKPT_VERSION = 1


def _glorot(rng, shape) -> Tensor:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _attn_vec(rng, hidden, d_head) -> Tensor:
    bound = np.sqrt(6.0 / (2 * d_head + 1))
    return Tensor(rng.uniform(-bound, bound, size=(1, hidden)), requires_grad=True)


class ModelParams:
    """Per-layer relation weights, batch-norm sites, and the decoder row."""

    def __init__(self, kind: str, d_c: int, d_t: int, num_layers: int,
                 hidden: int, heads: int):
        self.kind = kind
        self.d_c = d_c
        self.d_t = d_t
        self.num_layers = num_layers
        self.hidden = hidden
        self.heads = heads
        self.layers: list[dict[str, Tensor]] = []
        self.bn: list[dict] = []
        self.w_dec: Tensor | None = None

    @property
    def d_head(self) -> int:
        return self.hidden // self.heads

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layer{i}.{k}", v) for k, v in layer.items())
        for i, site in enumerate(self.bn):
            for tau in ("c", "t"):
                out.append((f"bn{i}.{tau}.gamma", site[tau]["gamma"]))
                out.append((f"bn{i}.{tau}.beta", site[tau]["beta"]))
        out.append(("decoder.w", self.w_dec))
        return out

    def copy(self) -> "ModelParams":
        dup = ModelParams(self.kind, self.d_c, self.d_t, self.num_layers,
                          self.hidden, self.heads)
        for layer in self.layers:
            dup.layers.append({k: Tensor(v.data.copy(), requires_grad=True)
                               for k, v in layer.items()})
        for site in self.bn:
            dup.bn.append({tau: {"gamma": Tensor(site[tau]["gamma"].data.copy(), requires_grad=True),
                                 "beta": Tensor(site[tau]["beta"].data.copy(), requires_grad=True),
                                 "state": site[tau]["state"].copy()}
                           for tau in ("c", "t")})
        dup.w_dec = Tensor(self.w_dec.data.copy(), requires_grad=True)
        return dup


def init_params(kind: str, d_c: int, d_t: int, num_layers: int = 3,
                hidden: int = 32, heads: int = 4, seed: int = 0) -> ModelParams:
    """Build freshly initialized parameters; deterministic per seed."""
    if kind not in KINDS:
        raise ConfigError(f"unknown encoder kind {kind!r}, expected one of {KINDS}")
    if num_layers < 1 or hidden < 1:
        raise ConfigError("num_layers and hidden must be positive")
    if kind != "gat":
        heads = 1
    if hidden % heads != 0:
        raise ConfigError(f"hidden ({hidden}) must be divisible by heads ({heads})")
    rng = np.random.default_rng(seed)
    params = ModelParams(kind, d_c, d_t, num_layers, hidden, heads)
    for l in range(num_layers):
        dc_in = d_c if l == 0 else hidden
        dt_in = d_t if l == 0 else hidden
        src_dim = {OUT_FWD: dc_in, IN_REV: dc_in, OUT_REV: dt_in, IN_FWD: dt_in}
        p: dict[str, Tensor] = {}
        if kind == "gat":
            d_head = hidden // heads
            for rel in RELATIONS:
                p[f"w_{rel}"] = _glorot(rng, (src_dim[rel], hidden))
            p["w_self_c"] = _glorot(rng, (dc_in, hidden))
            p["w_self_t"] = _glorot(rng, (dt_in, hidden))
            for rel in RELATIONS:
                p[f"a_dst_{rel}"] = _attn_vec(rng, hidden, d_head)
                p[f"a_src_{rel}"] = _attn_vec(rng, hidden, d_head)
        elif kind == "sage":
            for rel in RELATIONS:
                p[f"w_nbr_{rel}"] = _glorot(rng, (src_dim[rel], hidden))
            p["w_self_c"] = _glorot(rng, (dc_in, hidden))
            p["w_self_t"] = _glorot(rng, (dt_in, hidden))
        else:
            for rel in RELATIONS:
                p[f"w_proj_{rel}"] = _glorot(rng, (src_dim[rel], hidden))
            p["w_proj_self_c"] = _glorot(rng, (dc_in, hidden))
            p["w_proj_self_t"] = _glorot(rng, (dt_in, hidden))
            for tau in ("c", "t"):
                p[f"mlp_w1_{tau}"] = _glorot(rng, (hidden, hidden))
                p[f"mlp_b1_{tau}"] = Tensor(np.zeros((1, hidden)), requires_grad=True)
                p[f"mlp_w2_{tau}"] = _glorot(rng, (hidden, hidden))
                p[f"mlp_b2_{tau}"] = Tensor(np.zeros((1, hidden)), requires_grad=True)
        params.layers.append(p)
    for _ in range(num_layers - 1):
        params.bn.append({tau: {"gamma": Tensor(np.ones(hidden), requires_grad=True),
                                "beta": Tensor(np.zeros(hidden), requires_grad=True),
                                "state": BatchNormState(hidden)}
                          for tau in ("c", "t")})
    params.w_dec = _glorot(rng, (hidden, 1))
    return params


def _head_mats(heads: int, d_head: int) -> tuple[Tensor, Tensor]:
    """Constant 0/1 block matrices: reduce (K*d, K) sums each head's block,
    expand (K, K*d) broadcasts one value per head across its block."""
    reduce = np.kron(np.eye(heads), np.ones((d_head, 1)))
    return Tensor(reduce), Tensor(reduce.T)


@dataclass
class AttentionResult:
    """Attention coefficients for one relation at one layer.

    edge_alpha[e, k]: coefficient of edge e under head k; self_alpha[i, k]:
    the destination self coefficient; edge_dst: output-local destination
    of each edge. Within a destination's segment (its edges plus its self
    entry) each head's coefficients sum to one.
    """
    edge_alpha: np.ndarray
    self_alpha: np.ndarray
    edge_dst: np.ndarray


def _gat_scores(p, rel, h_src, h_self, reduce):
    s_src = matmul(hadamard(h_src, p[f"a_src_{rel}"]), reduce)
    s_dst = matmul(hadamard(h_self, p[f"a_dst_{rel}"]), reduce)
    s_self_src = matmul(hadamard(h_self, p[f"a_src_{rel}"]), reduce)
    return s_src, s_dst, s_self_src


def _gat_alpha(p, rel, edges, self_idx, n_out, h_src, h_self, reduce):
    """Per-relation softmax over each destination's edges plus self term."""
    src, dst, _ = edges[rel]
    s_src, s_dst, s_self_src = _gat_scores(p, rel, h_src, h_self, reduce)
    edge_logits = leaky_relu(add(gather_rows(s_dst, self_idx[dst]),
                                 gather_rows(s_src, src)))
    self_logits = leaky_relu(add(gather_rows(s_dst, self_idx),
                                 gather_rows(s_self_src, self_idx)))
    logits = concat([edge_logits, self_logits], axis=0)
    segments = np.concatenate([dst, np.arange(n_out, dtype=np.int64)])
    return segment_softmax(logits, segments, n_out), segments, src, dst


def _gat_dest(p, dest: str, edges, self_idx, z_src, z_self, n_out,
              reduce, expand):
    h_self = matmul(z_self, p[f"w_self_{dest}"])
    agg = None
    for rel in DEST_RELATIONS[dest]:
        h_src = matmul(z_src, p[f"w_{rel}"])
        alpha, segments, src, _ = _gat_alpha(p, rel, edges, self_idx, n_out,
                                             h_src, h_self, reduce)
        weights = matmul(alpha, expand)
        values = concat([gather_rows(h_src, src),
                         gather_rows(h_self, self_idx)], axis=0)
        contrib = segment_sum(hadamard(values, weights), segments, n_out)
        agg = contrib if agg is None else add(agg, contrib)
    return agg


def _sage_dest(p, dest: str, edges, self_idx, z_src, z_self, n_out):
    out = gather_rows(matmul(z_self, p[f"w_self_{dest}"]), self_idx)
    for rel in DEST_RELATIONS[dest]:
        src, dst, _ = edges[rel]
        total = segment_sum(gather_rows(z_src, src), dst, n_out)
        counts = np.bincount(dst, minlength=n_out).astype(np.float64)
        inv = Tensor((1.0 / np.maximum(counts, 1.0))[:, None])
        out = add(out, matmul(hadamard(total, inv), p[f"w_nbr_{rel}"]))
    return out


def _gin_dest(p, dest: str, edges, self_idx, z_src, z_self, n_out):
    pre = gather_rows(matmul(z_self, p[f"w_proj_self_{dest}"]), self_idx)
    for rel in DEST_RELATIONS[dest]:
        src, dst, _ = edges[rel]
        pre = add(pre, segment_sum(gather_rows(matmul(z_src, p[f"w_proj_{rel}"]), src),
                                   dst, n_out))
    hidden = relu(add(matmul(pre, p[f"mlp_w1_{dest}"]), p[f"mlp_b1_{dest}"]))
    return add(matmul(hidden, p[f"mlp_w2_{dest}"]), p[f"mlp_b2_{dest}"])


_DEST_FN = {"gat": _gat_dest, "sage": _sage_dest, "gin": _gin_dest}


def encode(params: ModelParams, sub: Subgraph, x_c: np.ndarray,
           x_t: np.ndarray, training: bool = False, rng=None,
           dropout_p: float = 0.0, capture: list | None = None
           ) -> tuple[Tensor, Tensor]:
    """Run all layers over the sampled structure; returns seed embeddings.

    Inputs to the first layer are the (standardized) raw features of the
    deepest required level; outputs are final-layer embeddings for the
    level-0 nodes of each type, rows following the sorted seed arrays.
    `capture`, when a list, receives one (c_ids, z_c, t_ids, z_t) numpy
    snapshot per layer.
    """
    L = params.num_layers
    if sub.depth < L:
        raise DimensionError(f"subgraph depth {sub.depth} < model layers {L}")
    if training and rng is None:
        raise ConfigError("training mode needs an rng for dropout")
    start = L  # features enter at level L, outputs land at level 0
    z_c = Tensor(x_c[sub.levels_c[start]])
    z_t = Tensor(x_t[sub.levels_t[start]])
    reduce, expand = (_head_mats(params.heads, params.d_head)
                      if params.kind == "gat" else (None, None))
    dest_fn = _DEST_FN[params.kind]
    for i in range(L):
        j = sub.depth - L + i
        edges = sub.layers[j]
        out_level = sub.depth - 1 - j
        n_c_out = len(sub.levels_c[out_level])
        n_t_out = len(sub.levels_t[out_level])
        p = params.layers[i]
        extra = {"reduce": reduce, "expand": expand} if params.kind == "gat" else {}
        new_c = dest_fn(p, "c", edges, sub.self_c[j], z_t, z_c, n_c_out, **extra)
        new_t = dest_fn(p, "t", edges, sub.self_t[j], z_c, z_t, n_t_out, **extra)
        if i < L - 1:
            site = params.bn[i]
            new_c = relu(new_c)
            new_t = relu(new_t)
            new_c = batch_norm(new_c, site["c"]["gamma"], site["c"]["beta"],
                               site["c"]["state"], training)
            new_t = batch_norm(new_t, site["t"]["gamma"], site["t"]["beta"],
                               site["t"]["state"], training)
            if dropout_p > 0.0 and training:
                new_c = dropout(new_c, dropout_p, rng, training)
                new_t = dropout(new_t, dropout_p, rng, training)
        z_c, z_t = new_c, new_t
        if capture is not None:
            capture.append((sub.levels_c[out_level], z_c.data.copy(),
                            sub.levels_t[out_level], z_t.data.copy()))
    return z_c, z_t


def gat_attention(params: ModelParams, sub: Subgraph, z, relation: str,
                  head: int | None = None, layer_index: int = 0) -> AttentionResult:
    """Expose one relation's attention coefficients for inspection.

    `z` is a (z_c, z_t) pair aligned to the input level of the given
    layer (raw features for layer 0). `head` selects one column,
    otherwise all heads are returned.
    """
    if params.kind != "gat":
        raise ConfigError("attention coefficients exist only for the gat encoder")
    if relation not in RELATIONS:
        raise ConfigError(f"unknown relation {relation!r}")
    z_c, z_t = z
    dest = "c" if relation in DEST_RELATIONS["c"] else "t"
    z_src, z_self = (z_t, z_c) if dest == "c" else (z_c, z_t)
    j = sub.depth - params.num_layers + layer_index
    self_idx = sub.self_c[j] if dest == "c" else sub.self_t[j]
    out_level = sub.depth - 1 - j
    n_out = len(sub.levels_c[out_level] if dest == "c" else sub.levels_t[out_level])
    p = params.layers[layer_index]
    reduce, _ = _head_mats(params.heads, params.d_head)
    h_src = matmul(z_src, p[f"w_{relation}"])
    h_self = matmul(z_self, p[f"w_self_{dest}"])
    alpha, _, _, dst = _gat_alpha(p, relation, sub.layers[j], self_idx, n_out,
                                  h_src, h_self, reduce)
    n_edges = len(dst)
    edge_alpha, self_alpha = alpha.data[:n_edges], alpha.data[n_edges:]
    if head is not None:
        edge_alpha, self_alpha = edge_alpha[:, [head]], self_alpha[:, [head]]
    return AttentionResult(edge_alpha, self_alpha, dst)


def decode(w_dec: Tensor, z_c: Tensor, z_t: Tensor) -> Tensor:
    """Link likelihood: sigmoid of the weighted Hadamard product, no bias."""
    if z_c.shape != z_t.shape:
        raise DimensionError(f"embedding shapes differ: {z_c.shape} vs {z_t.shape}")
    if z_c.shape[1] != w_dec.shape[0]:
        raise DimensionError(f"decoder expects dim {w_dec.shape[0]}, got {z_c.shape[1]}")
    return sigmoid(matmul(hadamard(z_c, z_t), w_dec))


def anomaly_score(y_hat):
    """Complement of the link likelihood."""
    return 1.0 - y_hat


# ---------------------------------------------------------------------------
# checkpoints


def _write_str(fh: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_model(params: ModelParams, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        _write_str(fh, params.kind)
        fh.write(struct.pack("<5I", params.d_c, params.d_t, params.num_layers,
                             params.hidden, params.heads))
        for _, tensor in params.named_parameters():
            write_array(fh, tensor.data)
        for site in params.bn:
            for tau in ("c", "t"):
                write_array(fh, site[tau]["state"].running_mean)
                write_array(fh, site[tau]["state"].running_var)


def load_model(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise IngestError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise IngestError(f"{path}: unsupported checkpoint version {version}")
        kind = _read_str(fh)
        d_c, d_t, num_layers, hidden, heads = struct.unpack("<5I", fh.read(20))
        params = init_params(kind, d_c, d_t, num_layers, hidden, heads, seed=0)
        for name, tensor in params.named_parameters():
            arr = read_array(fh)
            if arr.shape != tensor.shape:
                raise IngestError(f"{path}: shape mismatch for {name}")
            tensor.data = arr
        for site in params.bn:
            for tau in ("c", "t"):
                site[tau]["state"].running_mean = read_array(fh)
                site[tau]["state"].running_var = read_array(fh)
    return params
