"""Graph parsing network: link function, SageConv, message passing, GRU, readout.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, which
is what the optimizer and the checkpoint writer consume. Matrices follow the
row-vector convention ``y = x @ W + b``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .graph import FEATURE_DIM, NUM_INTERACTIONS, FeatureRecord, ParseGraphState, upper_pairs
from .tensor import Tensor

Params = dict[str, Tensor]

CONV_WIDTH = 3


@dataclass(frozen=True)
class GpnnConfig:
    feature_dim: int = FEATURE_DIM
    hidden_dim: int = 128
    readout_dim: int = 128
    propagation_steps: int = 3
    sage_neighborhood_depth: int = 1
    adjacency_threshold: float = 0.5
    use_attention: bool = True
    use_sageconv: bool = True

    def __post_init__(self):
        if self.propagation_steps < 1:
            raise ConfigError("propagation_steps must be >= 1")
        if min(self.feature_dim, self.hidden_dim, self.readout_dim) < 1:
            raise ConfigError("feature_dim, hidden_dim and readout_dim must be >= 1")
        if self.sage_neighborhood_depth < 1:
            raise ConfigError("sage_neighborhood_depth must be >= 1")
        if not 0.0 < self.adjacency_threshold < 1.0:
            raise ConfigError("adjacency_threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GpnnConfig":
        return cls(**d)


def param_shapes(cfg: GpnnConfig) -> dict[str, tuple[int, ...]]:
    d, h, r = cfg.feature_dim, cfg.hidden_dim, cfg.readout_dim
    pair = 3 * d
    return {
        "link.kernel": (CONV_WIDTH,),
        "link.conv_bias": (1,),
        "attention.weight": (pair, pair),
        "attention.bias": (pair,),
        "link.out_weight": (pair, 1),
        "link.out_bias": (1,),
        "sage.w_self": (d, d),
        "sage.w_neigh": (d, d),
        "init.weight": (d, h),
        "init.bias": (h,),
        "message.weight": (h + d, h),
        "message.bias": (h,),
        "gru.w_z": (h, h),
        "gru.u_z": (h, h),
        "gru.b_z": (h,),
        "gru.w_r": (h, h),
        "gru.u_r": (h, h),
        "gru.b_r": (h,),
        "gru.w_h": (h, h),
        "gru.u_h": (h, h),
        "gru.b_h": (h,),
        "readout.w1": (h, r),
        "readout.b1": (r,),
        "readout.w2": (r, NUM_INTERACTIONS),
        "readout.b2": (NUM_INTERACTIONS,),
    }


def init_params(cfg: GpnnConfig, seed: int = 0, zero: bool = False) -> Params:
    """Glorot-uniform matrices, zero biases. ``zero=True`` gives an all-zero model."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if zero or len(shape) == 1 and name != "link.kernel":
            arr = np.zeros(shape)
        elif name == "link.kernel":
            arr = rng.uniform(-1.0, 1.0, shape) / np.sqrt(CONV_WIDTH)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


@lru_cache(maxsize=64)
def _scatter_symmetric(n: int) -> np.ndarray:
    """(n*n, P) matrix placing pair value k at (a, b) and (b, a)."""
    a, b = upper_pairs(n)
    m = np.zeros((n * n, a.size))
    k = np.arange(a.size)
    m[a * n + b, k] = 1.0
    m[b * n + a, k] = 1.0
    m.flags.writeable = False
    return m


def _check_features(F_v: Tensor, F_e: Tensor, d: int) -> int:
    if F_v.ndim != 2 or F_v.shape[1] != d:
        raise DimensionError(f"node features {F_v.shape} do not have width {d}")
    n = F_v.shape[0]
    if F_e.shape != (n, n, d):
        raise DimensionError(f"edge features {F_e.shape} do not match ({n}, {n}, {d})")
    return n


def link_scores(F_v: Tensor, F_e: Tensor, params: Params, cfg: GpnnConfig) -> Tensor:
    """Symmetrized pre-sigmoid link score for each unordered pair ``a < b``."""
    d = cfg.feature_dim
    n = _check_features(F_v, F_e, d)
    a, b = upper_pairs(n)
    if a.size == 0:
        return Tensor(np.zeros(0))
    # both orientations of every pair; their scores are averaged
    first = np.concatenate([a, b])
    second = np.concatenate([b, a])
    edge_rows = T.take_rows(T.reshape(F_e, (n * n, d)), first * n + second)
    x = T.concat([T.take_rows(F_v, first), T.take_rows(F_v, second), edge_rows], axis=1)
    hidden = T.relu(T.conv1d(x, params["link.kernel"], params["link.conv_bias"]))
    if cfg.use_attention:
        gate = T.sigmoid(T.linear(hidden, params["attention.weight"], params["attention.bias"]))
        hidden = T.mul(hidden, gate)
    s = T.reshape(T.linear(hidden, params["link.out_weight"], params["link.out_bias"]), (2, a.size))
    return T.reduce_mean(s, axis=0)


def link_function(F_v: Tensor, F_e: Tensor, params: Params, cfg: GpnnConfig) -> Tensor:
    """Adjacency probabilities (n, n): symmetric, zero diagonal."""
    n = F_v.shape[0]
    s = link_scores(F_v, F_e, params, cfg)
    if s.size == 0:
        return Tensor(np.zeros((n, n)))
    probs = T.reshape(T.sigmoid(s), (s.size, 1))
    flat = T.matmul(Tensor._wrap(_scatter_symmetric(n)), probs)
    return T.reshape(flat, (n, n))


def neighborhood_mean_matrix(adjacency: np.ndarray, threshold: float) -> np.ndarray:
    """Row-normalized hard neighborhood: row v averages nodes with adjacency >= threshold."""
    mask = (adjacency >= threshold).astype(np.float64)
    np.fill_diagonal(mask, 0.0)
    counts = mask.sum(axis=1, keepdims=True)
    return np.divide(mask, counts, out=np.zeros_like(mask), where=counts > 0)


def sage_conv(F_v: Tensor, adjacency: Tensor, params: Params, cfg: GpnnConfig) -> Tensor:
    """Mean-aggregator SageConv applied ``sage_neighborhood_depth`` times.

    The neighborhood is a hard threshold of the adjacency, so no gradient
    flows from here back into the link function.
    """
    agg_matrix = Tensor(neighborhood_mean_matrix(adjacency.data, cfg.adjacency_threshold))
    out = F_v
    for _ in range(cfg.sage_neighborhood_depth):
        agg = T.matmul(agg_matrix, out)
        out = T.relu(
            T.add(T.matmul(out, params["sage.w_self"]), T.matmul(agg, params["sage.w_neigh"]))
        )
    return out


def message_function(hidden: Tensor, F_e: Tensor, adjacency: Tensor, params: Params) -> Tensor:
    """m_v = sum_w A[v, w] * (concat(h_w, F_e[v, w]) @ W + b)."""
    n, h = hidden.shape
    if adjacency.shape != (n, n):
        raise DimensionError(f"adjacency {adjacency.shape} does not match {n} nodes")
    d = F_e.shape[-1]
    if F_e.shape != (n, n, d):
        raise DimensionError(f"edge features {F_e.shape} do not match {n} nodes")
    v_idx, w_idx = np.divmod(np.arange(n * n), n)
    x = T.concat([T.take_rows(hidden, w_idx), T.reshape(F_e, (n * n, d))], axis=1)
    y = T.linear(x, params["message.weight"], params["message.bias"])
    y = T.scale_rows(y, T.reshape(adjacency, (n * n,)))
    return T.reduce_sum(T.reshape(y, (n, n, y.shape[1])), axis=1)


def gru_update(hidden: Tensor, messages: Tensor, params: Params) -> Tensor:
    if hidden.shape != messages.shape:
        raise DimensionError(f"hidden {hidden.shape} and messages {messages.shape} differ")

    def gate(w, u, b, h_in):
        return T.add_bias(T.add(T.matmul(messages, params[w]), T.matmul(h_in, params[u])), params[b])

    z = T.sigmoid(gate("gru.w_z", "gru.u_z", "gru.b_z", hidden))
    r = T.sigmoid(gate("gru.w_r", "gru.u_r", "gru.b_r", hidden))
    candidate = T.tanh(gate("gru.w_h", "gru.u_h", "gru.b_h", T.mul(r, hidden)))
    keep = T.mul(T.sub(Tensor(np.ones(z.shape)), z), hidden)
    return T.add(keep, T.mul(z, candidate))


def readout_scores(hidden: Tensor, params: Params) -> Tensor:
    """Pre-sigmoid interaction scores (n, 12)."""
    if hidden.ndim != 2 or hidden.shape[1] != params["readout.w1"].shape[0]:
        raise DimensionError(f"hidden {hidden.shape} does not fit readout")
    mid = T.relu(T.linear(hidden, params["readout.w1"], params["readout.b1"]))
    return T.linear(mid, params["readout.w2"], params["readout.b2"])


def readout(hidden: Tensor, params: Params) -> Tensor:
    return T.sigmoid(readout_scores(hidden, params))


def forward(F_v: Tensor, F_e: Tensor, params: Params, cfg: GpnnConfig) -> dict[str, Tensor]:
    """Full differentiable pipeline; returns adjacency, hidden and scores."""
    n = _check_features(F_v, F_e, cfg.feature_dim)
    if n < 2:
        raise DataError("parse graph needs tissue and at least one instrument")
    adjacency = link_function(F_v, F_e, params, cfg)
    nodes = sage_conv(F_v, adjacency, params, cfg) if cfg.use_sageconv else F_v
    hidden = T.linear(nodes, params["init.weight"], params["init.bias"])
    for _ in range(cfg.propagation_steps):
        messages = message_function(hidden, F_e, adjacency, params)
        hidden = gru_update(hidden, messages, params)
    return {"adjacency": adjacency, "hidden": hidden, "scores": readout_scores(hidden, params)}


def infer(record: FeatureRecord, params: Params, cfg: GpnnConfig) -> ParseGraphState:
    """Run the parse-graph network on one scene without recording gradients."""
    with T.no_grad():
        out = forward(Tensor(record.node_features), Tensor(record.edge_features), params, cfg)
    scores = out["scores"].data
    return ParseGraphState(
        adjacency=out["adjacency"].data,
        hidden=out["hidden"].data,
        node_probs=T.sigmoid(Tensor._wrap(scores)).data,
        node_scores=scores,
    )
