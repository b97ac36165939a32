"""Graph neural network that scores a query against a labeled support set.

Support features and the query feature are projected to d_k, labels are
appended (one-hot for support, uniform fill for the query, which sits at
the last vertex), and the resulting (N_s'+1)-vertex signal runs through
`depth` rounds of: learned adjacency from an MLP on absolute feature
differences, row-softmax normalization over the off-diagonal, then a
graph convolution with a separate learned self-connection. A linear head
on the query vertex emits per-class scores.

Edge logits are exactly symmetric: each unordered pair is evaluated once
and written to both (i, j) and (j, i). Large support sets are first
shrunk by `average_support_pairs`, which merges consecutive same-class
pairs (the merge is a constant row-averaging matrix, so gradients flow
through it).

All internals run batched over queries: node signals are [Q, V, D] and
every query sees the same support block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import ContractError, DimensionError
from .tensor import (
    Tensor,
    absolute,
    broadcast_to,
    concat,
    constant,
    matmul,
    pair_differences,
    relu,
    reshape,
    softmax,
    symmetric_from_pairs,
)

_NEG_INF = -1e9

# per vertex count: (idx_i, idx_j, scatter_t, diag_mask)
_PAIR_CACHE: dict = {}


def _pair_geometry(v: int):
    cached = _PAIR_CACHE.get(v)
    if cached is None:
        idx_i, idx_j = np.triu_indices(v, k=1)
        p = idx_i.shape[0]
        scatter_t = np.zeros((v, p), dtype=np.float32)
        scatter_t[idx_i, np.arange(p)] = 1.0
        scatter_t[idx_j, np.arange(p)] -= 1.0
        mask = np.zeros((v, v), dtype=np.float32)
        np.fill_diagonal(mask, _NEG_INF)
        cached = (idx_i, idx_j, scatter_t, mask)
        _PAIR_CACHE[v] = cached
    return cached


@dataclass(frozen=True)
class GnnConfig:
    feature_dim: int
    n_way: int = 5
    d_k: int = 64
    depth: int = 2
    average_from: int = 50

    @property
    def node_dims(self):
        """Node feature widths entering each GC layer, plus the output width."""
        return [self.d_k + self.n_way] + [self.d_k] * self.depth


@dataclass
class GraphSignal:
    """One episode graph: support vertices then the query vertex, last."""

    nodes: Tensor  # [V, d_k + n_way]
    support_count: int
    n_way: int

    def __post_init__(self):
        if self.nodes.ndim != 2 or self.nodes.shape[0] != self.support_count + 1:
            raise ContractError(
                f"signal nodes {self.nodes.shape} do not match {self.support_count} supports + 1 query"
            )


def average_support_pairs(features: Tensor, labels: np.ndarray):
    """Merge consecutive same-class feature pairs by averaging.

    Returns (merged features, merged labels). Classes are grouped in order
    of first appearance; an odd class member count leaves the last sample
    unmerged. Merging only ever combines samples of one class.
    """
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"features {features.shape} and labels {labels.shape} do not align"
        )
    rows = []
    out_labels = []
    seen = []
    for c in labels:
        if c not in seen:
            seen.append(c)
    for c in seen:
        idx = np.flatnonzero(labels == c)
        for a in range(0, len(idx) - 1, 2):
            rows.append(((idx[a], 0.5), (idx[a + 1], 0.5)))
            out_labels.append(c)
        if len(idx) % 2:
            rows.append(((idx[-1], 1.0),))
            out_labels.append(c)
    mat = np.zeros((len(rows), labels.shape[0]), dtype=np.float32)
    for r, terms in enumerate(rows):
        for col, weight in terms:
            mat[r, col] = weight
    merged = matmul(constant(mat), features)
    return merged, np.asarray(out_labels, dtype=np.int64)


class GnnMetric:
    def __init__(self, config: GnnConfig, params: dict):
        self.config = config
        expected = self._param_names(config)
        if list(params.keys()) != expected:
            raise ContractError(f"gnn params must be exactly {expected}")
        self.params = dict(params)

    @staticmethod
    def _param_names(config: GnnConfig):
        names = ["proj.w", "proj.b"]
        for layer in range(config.depth):
            names += [f"edge{layer}.{leaf}" for leaf in ("w0", "b0", "w1", "b1", "w2", "b2")]
            names += [f"gc{layer}.{leaf}" for leaf in ("wn", "ws", "b")]
        names += ["head.w", "head.b"]
        return names

    @classmethod
    def create(cls, config: GnnConfig, seed: int) -> "GnnMetric":
        gen = _rng.stream("init", seed, "gnn")
        d_k, dims = config.d_k, config.node_dims
        params = {}

        def add_linear(wname, bname, d_in, d_out):
            params[wname] = Tensor(_rng.xavier_uniform(gen, (d_in, d_out), d_in, d_out),
                                   requires_grad=True)
            params[bname] = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

        add_linear("proj.w", "proj.b", config.feature_dim, d_k)
        for layer in range(config.depth):
            d_in = dims[layer]
            add_linear(f"edge{layer}.w0", f"edge{layer}.b0", d_in, d_k)
            add_linear(f"edge{layer}.w1", f"edge{layer}.b1", d_k, d_k)
            add_linear(f"edge{layer}.w2", f"edge{layer}.b2", d_k, 1)
            for leaf, shape in (("wn", (d_in, dims[layer + 1])),
                                ("ws", (d_in, dims[layer + 1])),
                                ("b", (dims[layer + 1],))):
                if leaf == "b":
                    params[f"gc{layer}.{leaf}"] = Tensor(np.zeros(shape, dtype=np.float32),
                                                         requires_grad=True)
                else:
                    params[f"gc{layer}.{leaf}"] = Tensor(
                        _rng.xavier_uniform(gen, shape, shape[0], shape[1]), requires_grad=True)
        add_linear("head.w", "head.b", dims[-1], config.n_way)
        ordered = {name: params[name] for name in cls._param_names(config)}
        return cls(config, ordered)

    def param_list(self):
        return list(self.params.values())

    def named_params(self):
        return dict(self.params)

    # -- pipeline pieces -----------------------------------------------------

    def project(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.config.feature_dim:
            raise DimensionError(
                f"expected feature dim {self.config.feature_dim}, got {features.shape}"
            )
        single = features.ndim == 1
        x = reshape(features, (1, -1)) if single else features
        out = matmul(x, self.params["proj.w"]) + self.params["proj.b"]
        return reshape(out, (self.config.d_k,)) if single else out

    def build_node_signal(self, support: Tensor, labels: np.ndarray, query: Tensor) -> GraphSignal:
        """Assemble one episode graph from projected features.

        support: [N_s', d_k]; labels: [N_s'] ints in 0..n_way-1; query: [d_k].
        The query vertex carries a uniform 1/n_way label fill and sits last.
        """
        n_way, d_k = self.config.n_way, self.config.d_k
        labels = np.asarray(labels)
        if support.ndim != 2 or support.shape[1] != d_k:
            raise DimensionError(f"support features must be [N, {d_k}], got {support.shape}")
        if query.shape != (d_k,):
            raise DimensionError(f"query feature must be [{d_k}], got {query.shape}")
        if labels.shape != (support.shape[0],):
            raise DimensionError(f"labels {labels.shape} do not match support {support.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= n_way):
            raise IndexError(f"support label outside 0..{n_way - 1}")
        batched = self._batched_nodes(support, labels, reshape(query, (1, d_k)))
        nodes = reshape(batched, (support.shape[0] + 1, d_k + n_way))
        return GraphSignal(nodes=nodes, support_count=support.shape[0], n_way=n_way)

    def _batched_nodes(self, support: Tensor, labels: np.ndarray, queries: Tensor) -> Tensor:
        """[Q, V, D] node signal sharing one support block across queries."""
        n_way = self.config.n_way
        m = support.shape[0]
        q = queries.shape[0]
        onehot = np.zeros((m, n_way), dtype=np.float32)
        onehot[np.arange(m), np.asarray(labels)] = 1.0
        sup_block = concat([support, constant(onehot)], axis=1)
        fill = np.full((q, n_way), 1.0 / n_way, dtype=np.float32)
        qry_block = concat([queries, constant(fill)], axis=1)
        d = sup_block.shape[1]
        sup = broadcast_to(reshape(sup_block, (1, m, d)), (q, m, d))
        return concat([sup, reshape(qry_block, (q, 1, d))], axis=1)

    def edge_logits(self, nodes: Tensor, layer: int) -> Tensor:
        """Symmetric pre-softmax edge scores, zero diagonal. nodes: [..,V,D]."""
        v = nodes.shape[-2]
        idx_i, idx_j, scatter_t, _ = _pair_geometry(v)
        diffs = absolute(pair_differences(nodes, idx_i, idx_j, scatter_t))
        p = self.params
        h = relu(matmul(diffs, p[f"edge{layer}.w0"]) + p[f"edge{layer}.b0"])
        h = relu(matmul(h, p[f"edge{layer}.w1"]) + p[f"edge{layer}.b1"])
        e = matmul(h, p[f"edge{layer}.w2"]) + p[f"edge{layer}.b2"]
        e = reshape(e, e.shape[:-1])
        return symmetric_from_pairs(e, v, idx_i, idx_j)

    def edge_weights(self, nodes: Tensor, layer: int) -> Tensor:
        """Adjacency: row softmax of edge logits over j != i (diagonal masked)."""
        v = nodes.shape[-2]
        _, _, _, mask = _pair_geometry(v)
        logits = self.edge_logits(nodes, layer)
        return softmax(logits + constant(mask), axis=-1)

    def graph_convolution(self, nodes: Tensor, adjacency: Tensor, layer: int,
                          activate: bool) -> Tensor:
        p = self.params
        mixed = matmul(adjacency, nodes)
        out = matmul(mixed, p[f"gc{layer}.wn"]) + matmul(nodes, p[f"gc{layer}.ws"]) + p[f"gc{layer}.b"]
        return relu(out) if activate else out

    def _run_layers(self, nodes: Tensor) -> Tensor:
        for layer in range(self.config.depth):
            adj = self.edge_weights(nodes, layer)
            nodes = self.graph_convolution(nodes, adj, layer, activate=layer < self.config.depth - 1)
        return nodes

    def forward(self, signal: GraphSignal) -> Tensor:
        """Class scores [n_way] for the signal's query vertex."""
        nodes = reshape(signal.nodes, (1,) + signal.nodes.shape)
        nodes = self._run_layers(nodes)
        out = matmul(nodes[:, -1, :], self.params["head.w"]) + self.params["head.b"]
        return reshape(out, (self.config.n_way,))

    def query_scores(self, support_features: Tensor, support_labels: np.ndarray,
                     query_features: Tensor) -> Tensor:
        """Scores [Q, n_way] for raw (unprojected) backbone features.

        Applies pair averaging first whenever the support count reaches
        config.average_from.
        """
        labels = np.asarray(support_labels)
        if support_features.ndim != 2 or query_features.ndim != 2:
            raise DimensionError("query_scores expects 2-d feature matrices")
        if labels.size and (labels.min() < 0 or labels.max() >= self.config.n_way):
            raise IndexError(f"support label outside 0..{self.config.n_way - 1}")
        if support_features.shape[0] >= self.config.average_from:
            support_features, labels = average_support_pairs(support_features, labels)
        sup = self.project(support_features)
        qry = self.project(query_features)
        nodes = self._batched_nodes(sup, labels, qry)
        nodes = self._run_layers(nodes)
        return matmul(nodes[:, -1, :], self.params["head.w"]) + self.params["head.b"]
