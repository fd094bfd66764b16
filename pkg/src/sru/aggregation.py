"""Fusion of per-shard hidden states into one prediction.

Per shard: an affine projection into a common space (applied to both the
session state and the shard centroid), then an attention weight computed
from the elementwise product of the projected pair, a convex fusion of
the projected states, and a two-layer ReLU output network over the item
set. Sub-models are frozen throughout; only these fusion parameters
train.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import GruModel, encode_batch, padded_items, prefix_states
from .corpus import SessionDataset
from .errors import ContractError, DimensionError
from .numerics import (
    AdamState,
    ParamStore,
    RngStream,
    adam_step,
    cross_entropy_rows,
    softmax,
    xavier_uniform,
)

CENTROID_SOURCES = ("submodel", "reference")


@dataclass(frozen=True)
class AggregationConfig:
    f: int = 64                 # attention width
    d_ff: int | None = None     # output hidden width; None means d
    lr: float = 5e-3
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    centroid_source: str = "submodel"

    def __post_init__(self):
        if self.centroid_source not in CENTROID_SOURCES:
            raise ContractError(
                f"centroid_source must be one of {CENTROID_SOURCES}, "
                f"got {self.centroid_source!r}"
            )

    def as_dict(self) -> dict:
        return {
            "f": self.f, "d_ff": self.d_ff, "lr": self.lr, "epochs": self.epochs,
            "batch_size": self.batch_size, "seed": self.seed,
            "centroid_source": self.centroid_source,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AggregationConfig":
        return cls(**data)


@dataclass
class ShardCentroids:
    """Mean hidden state of each shard's sessions.

    With source "submodel" (the default) centroid k lives in sub-model
    k's own hidden space; with "reference" all centroids come from the
    partition step in the reference model's space.
    """

    c: np.ndarray          # (k, d)
    source: str = "submodel"


@dataclass
class AggregationModel:
    store: ParamStore
    k: int
    d: int
    f: int
    d_ff: int
    num_items: int
    config: AggregationConfig | None = None
    loss_history: list = field(default_factory=list)

    def params_bytes(self) -> bytes:
        return self.store.tobytes()


def compute_centroid(sub_model: GruModel, shard: SessionDataset) -> np.ndarray:
    """Mean encoding of a shard's full sessions under its own sub-model."""
    if len(shard) == 0:
        raise ContractError("cannot compute the centroid of an empty shard")
    states = encode_batch(sub_model, [s.items for s in shard.sessions])
    return states.mean(axis=0)


def compute_centroids(sub_models, shards, source: str = "submodel",
                      reference_centroids: np.ndarray | None = None) -> ShardCentroids:
    if source == "submodel":
        c = np.stack([compute_centroid(m, s) for m, s in zip(sub_models, shards)])
    elif source == "reference":
        if reference_centroids is None:
            raise ContractError("reference centroids requested but none provided")
        c = np.asarray(reference_centroids, dtype=sub_models[0].embeddings.dtype).copy()
    else:
        raise ContractError(f"unknown centroid source {source!r}")
    return ShardCentroids(c=c, source=source)


# -- single-example operations -------------------------------------------------


def project(h_k: np.ndarray, c_k: np.ndarray, W_k: np.ndarray, b_k: np.ndarray):
    """Apply one shard's affine map to its state and centroid alike."""
    h_k = np.asarray(h_k)
    c_k = np.asarray(c_k)
    if W_k.shape != (h_k.shape[0], h_k.shape[0]) or b_k.shape != h_k.shape or c_k.shape != h_k.shape:
        raise DimensionError(
            f"projection shapes do not conform: h {h_k.shape}, c {c_k.shape}, "
            f"W {W_k.shape}, b {b_k.shape}"
        )
    return h_k @ W_k + b_k, c_k @ W_k + b_k


def attention_scores(h_proj, c_proj, W_attn: np.ndarray, b_attn: np.ndarray,
                     g: np.ndarray) -> np.ndarray:
    """Attention weights over shards from projected (state, centroid) pairs.

    score_k = g . relu((h'_k * c'_k) W_attn + b_attn); the weights are the
    softmax over scores, hence a probability vector of length K.
    """
    h_proj = np.asarray(h_proj)
    c_proj = np.asarray(c_proj)
    if h_proj.shape != c_proj.shape or h_proj.ndim != 2:
        raise DimensionError(
            f"need matching (k, d) arrays, got {h_proj.shape} and {c_proj.shape}"
        )
    if W_attn.shape[0] != h_proj.shape[1] or b_attn.shape != (W_attn.shape[1],) \
            or g.shape != (W_attn.shape[1],):
        raise DimensionError(
            f"attention parameter shapes do not conform: W {W_attn.shape}, "
            f"b {b_attn.shape}, g {g.shape}"
        )
    u = h_proj * c_proj
    t = np.maximum(u @ W_attn + b_attn, 0.0)
    return softmax(t @ g)


def fuse(a: np.ndarray, h_proj) -> np.ndarray:
    """Convex combination of projected states with attention weights."""
    a = np.asarray(a)
    h_proj = np.asarray(h_proj)
    if a.ndim != 1 or h_proj.shape[0] != a.shape[0]:
        raise DimensionError(f"weights {a.shape} do not match states {h_proj.shape}")
    if abs(float(a.sum()) - 1.0) > 1e-5:
        raise ContractError("attention weights must sum to 1")
    return a @ h_proj


def predict_output(h_fused: np.ndarray, W1, b1, W2, b2) -> np.ndarray:
    """Two-layer ReLU network mapping a fused state to item logits
    (compact, index v - 1 for item v)."""
    h_fused = np.asarray(h_fused)
    if W1.shape[0] != h_fused.shape[0] or W2.shape[0] != W1.shape[1]:
        raise DimensionError(
            f"output network shapes do not conform: h {h_fused.shape}, "
            f"W1 {W1.shape}, W2 {W2.shape}"
        )
    return np.maximum(h_fused @ W1 + b1, 0.0) @ W2 + b2


# -- batched forward/backward ---------------------------------------------------


def _forward(params, H, C, with_cache=False):
    """Batched fusion forward pass.

    H is (B, K, d) per-shard states, C is (K, d) centroids. Returns
    (logits, cache) where logits is (B, |V|). Contractions are phrased
    as stacked matmuls; the per-shard axis K rides along as the batch
    dimension of the BLAS calls.
    """
    Wp, bp = params["W_proj"], params["b_proj"]
    B, K, d = H.shape
    f = params["b_attn"].shape[0]
    Hp = np.matmul(H.transpose(1, 0, 2), Wp).transpose(1, 0, 2) + bp
    Cp = np.matmul(C[:, None, :], Wp)[:, 0, :] + bp
    U = Hp * Cp[None, :, :]
    T_pre = (U.reshape(B * K, d) @ params["W_attn"]).reshape(B, K, f) + params["b_attn"]
    T = np.maximum(T_pre, 0.0)
    S = T.reshape(B * K, f) @ params["g_attn"]
    S = S.reshape(B, K)
    S_shift = S - S.max(axis=1, keepdims=True)
    expS = np.exp(S_shift)
    A = expS / expS.sum(axis=1, keepdims=True)
    h_fused = np.matmul(A[:, None, :], Hp)[:, 0, :]
    pre1 = h_fused @ params["W1"] + params["b1"]
    hidden = np.maximum(pre1, 0.0)
    logits = hidden @ params["W2"] + params["b2"]
    if not with_cache:
        return logits, None
    return logits, (H, C, Hp, Cp, U, T_pre, T, A, h_fused, pre1, hidden)


def _backward(params, grads, cache, dlogits):
    """Accumulate gradients for all fusion parameters; inputs are frozen."""
    H, C, Hp, Cp, U, T_pre, T, A, h_fused, pre1, hidden = cache
    B, K, d = H.shape
    f = params["b_attn"].shape[0]
    grads["W2"] += hidden.T @ dlogits
    grads["b2"] += dlogits.sum(axis=0)
    dhidden = dlogits @ params["W2"].T
    dpre1 = dhidden * (pre1 > 0)
    grads["W1"] += h_fused.T @ dpre1
    grads["b1"] += dpre1.sum(axis=0)
    dh_fused = dpre1 @ params["W1"].T

    dA = np.matmul(Hp, dh_fused[:, :, None])[:, :, 0]
    dHp = A[:, :, None] * dh_fused[:, None, :]
    dS = A * (dA - (A * dA).sum(axis=1, keepdims=True))
    dT = dS[:, :, None] * params["g_attn"][None, None, :]
    grads["g_attn"] += T.reshape(B * K, f).T @ dS.reshape(B * K)
    dT_pre = dT * (T_pre > 0)
    grads["W_attn"] += U.reshape(B * K, d).T @ dT_pre.reshape(B * K, f)
    grads["b_attn"] += dT_pre.sum(axis=(0, 1))
    dU = (dT_pre.reshape(B * K, f) @ params["W_attn"].T).reshape(B, K, d)

    dHp += dU * Cp[None, :, :]
    dCp = (dU * Hp).sum(axis=0)
    grads["W_proj"] += np.matmul(H.transpose(1, 2, 0), dHp.transpose(1, 0, 2))
    grads["W_proj"] += C[:, :, None] * dCp[:, None, :]
    grads["b_proj"] += dHp.sum(axis=0) + dCp


def init_aggregation_model(k: int, d: int, num_items: int,
                           config: AggregationConfig) -> AggregationModel:
    """Fresh fusion parameters from the config's named stream.

    Projections start at identity plus small noise so that the initial
    fused state stays in the sub-models' own scale.
    """
    d_ff = config.d_ff if config.d_ff else d
    dtype = np.float32
    stream = RngStream(config.seed, "aggregation/init")
    store = ParamStore()
    eye = np.broadcast_to(np.eye(d, dtype=dtype), (k, d, d))
    store.add("W_proj", eye + stream.uniform(-0.01, 0.01, (k, d, d)).astype(dtype))
    store.add("b_proj", np.zeros((k, d), dtype=dtype))
    store.add("W_attn", xavier_uniform(stream, d, config.f, (d, config.f), dtype))
    store.add("b_attn", np.zeros(config.f, dtype=dtype))
    store.add("g_attn", xavier_uniform(stream, config.f, 1, (config.f,), dtype))
    store.add("W1", xavier_uniform(stream, d, d_ff, (d, d_ff), dtype))
    store.add("b1", np.zeros(d_ff, dtype=dtype))
    store.add("W2", xavier_uniform(stream, d_ff, num_items, (d_ff, num_items), dtype))
    store.add("b2", np.zeros(num_items, dtype=dtype))
    return AggregationModel(store=store, k=k, d=d, f=config.f, d_ff=d_ff,
                            num_items=num_items, config=config)


def shard_feature_table(sub_models, dataset: SessionDataset):
    """Per-position hidden states of every sub-model over one dataset.

    Returns (features, targets) with features (P, K, d) and targets (P,)
    where P runs over all (prefix, next-item) training points in session
    index order. Sub-models are only read, never written.
    """
    max_len = sub_models[0].max_len
    ids = padded_items(dataset, max_len)
    tgt = ids[:, 1:]
    valid = tgt != 0
    targets = tgt[valid].astype(np.int64)
    per_model = []
    for m in sub_models:
        states = prefix_states(m, ids)
        per_model.append(states[:, :-1][valid])
    features = np.stack(per_model, axis=1)
    return features, targets


@dataclass
class FeatureCache:
    """Precomputed per-shard state table, reusable across unlearn calls.

    Rows follow the training corpus session order; row_slices maps each
    session id to its (start, count) block. After a deletion only the
    retrained shard's column and the rewritten sessions' rows need
    recomputation, which is what keeps selective unlearning cheap
    relative to full retraining.
    """

    features: np.ndarray                      # (P, K, d)
    targets: np.ndarray                       # (P,)
    row_slices: dict[str, tuple[int, int]]


def _row_layout(sessions, max_len: int):
    slices: dict[str, tuple[int, int]] = {}
    total = 0
    for s in sessions:
        n = max(0, min(len(s), max_len) - 1)
        slices[s.session_id] = (total, n)
        total += n
    return slices, total


def _pair_states(model, sessions) -> np.ndarray:
    """Stacked prefix states at every training position of the given
    sessions (their last max_len items), session-major order."""
    tails = [s.items[-model.max_len:] for s in sessions]
    L = max(len(t) for t in tails)
    ids = np.zeros((len(tails), L), dtype=np.int64)
    for i, t in enumerate(tails):
        ids[i, : len(t)] = t
    states = prefix_states(model, ids)
    valid = ids[:, 1:] != 0
    return states[:, :-1][valid]


def build_feature_cache(sub_models, dataset: SessionDataset) -> FeatureCache:
    features, targets = shard_feature_table(sub_models, dataset)
    slices, total = _row_layout(dataset.sessions, sub_models[0].max_len)
    if total != features.shape[0]:
        raise ContractError("feature table does not match the session layout")
    return FeatureCache(features=features, targets=targets, row_slices=slices)


def updated_feature_cache(cache: FeatureCache, sub_models, dataset: SessionDataset,
                          dirty_shards, changed_session_ids) -> FeatureCache:
    """Rebuild a cache after deletions, copying every row that cannot
    have changed.

    dirty_shards lists sub-models that were retrained (their whole
    column is recomputed); changed_session_ids lists sessions whose item
    sequence was rewritten (their rows are recomputed under every clean
    sub-model too).
    """
    k = len(sub_models)
    d = sub_models[0].d
    max_len = sub_models[0].max_len
    dirty = set(dirty_shards)
    changed = set(changed_session_ids)
    slices, total = _row_layout(dataset.sessions, max_len)

    features = np.empty((total, k, d), dtype=cache.features.dtype)
    targets = np.empty(total, dtype=np.int64)
    for s in dataset.sessions:
        start, n = slices[s.session_id]
        tail = s.items[-max_len:]
        targets[start : start + n] = tail[1 : 1 + n]

    clean_cols = [c for c in range(k) if c not in dirty]
    reusable = [
        s for s in dataset.sessions
        if s.session_id not in changed and s.session_id in cache.row_slices
    ]
    if clean_cols and reusable:
        old_idx = np.concatenate([
            np.arange(*_span(cache.row_slices[s.session_id])) for s in reusable
        ])
        new_idx = np.concatenate([
            np.arange(*_span(slices[s.session_id])) for s in reusable
        ])
        features[np.ix_(new_idx, clean_cols)] = cache.features[np.ix_(old_idx, clean_cols)]

    fresh = [s for s in dataset.sessions
             if s.session_id in changed or s.session_id not in cache.row_slices]
    if clean_cols and fresh:
        rows = np.concatenate([np.arange(*_span(slices[s.session_id])) for s in fresh])
        for c in clean_cols:
            features[rows, c] = _pair_states(sub_models[c], fresh)
    for c in dirty:
        features[:, c] = _pair_states(sub_models[c], dataset.sessions)
    return FeatureCache(features=features, targets=targets, row_slices=slices)


def _span(slice_pair):
    start, n = slice_pair
    return start, start + n


def train_aggregation(sub_models, centroids: ShardCentroids,
                      train_data: SessionDataset,
                      config: AggregationConfig,
                      precomputed=None) -> AggregationModel:
    """Train the fusion parameters on every training point of the corpus.

    Sub-model states are precomputed once (the sub-models are frozen, so
    they never change during these epochs) and the fusion stack is
    optimized with Adam under the config's seed. ``precomputed`` may
    carry a (features, targets) pair from a FeatureCache to skip the
    state computation.
    """
    k = len(sub_models)
    if k == 0:
        raise ContractError("need at least one sub-model")
    if centroids.c.shape[0] != k:
        raise ContractError(f"{k} sub-models but {centroids.c.shape[0]} centroids")
    d = sub_models[0].d
    num_items = train_data.num_items()

    if precomputed is not None:
        features, targets = precomputed
    else:
        features, targets = shard_feature_table(sub_models, train_data)
    C = centroids.c.astype(features.dtype)
    model = init_aggregation_model(k, d, num_items, config)
    store = model.store
    adam = AdamState.for_store(store)
    shuffle = RngStream(config.seed, "aggregation/shuffle")

    P = features.shape[0]
    for _ in range(config.epochs):
        perm = shuffle.permutation(P)
        # One gather per epoch; contiguous batch slices are much cheaper
        # than 60+ scattered gathers.
        feats_epoch = features[perm]
        targets_epoch = targets[perm]
        loss_sum = 0.0
        for start in range(0, P, config.batch_size):
            Hb = feats_epoch[start : start + config.batch_size]
            tb = targets_epoch[start : start + config.batch_size] - 1
            logits, cache = _forward(store.params, Hb, C, with_cache=True)
            losses, dlogits = cross_entropy_rows(logits.astype(np.float64), tb)
            loss_sum += float(losses.sum())
            dlogits = (dlogits / len(tb)).astype(logits.dtype)
            store.zero_grads()
            _backward(store.params, store.grads, cache, dlogits)
            adam_step(store, adam, config.lr)
        model.loss_history.append(loss_sum / P)
    return model


@dataclass
class SruModel:
    """Frozen sub-models plus trained fusion; the full predictor."""

    sub_models: tuple
    centroids: ShardCentroids
    aggregation: AggregationModel
    max_len: int

    @property
    def num_items(self) -> int:
        return self.aggregation.num_items

    def predict(self, prefix) -> np.ndarray:
        return self.predict_batch([prefix])[0]

    __call__ = predict

    def predict_batch(self, prefixes) -> np.ndarray:
        """Id-indexed logits rows; index 0 is the pad slot at -inf."""
        H = np.stack([encode_batch(m, prefixes) for m in self.sub_models], axis=1)
        C = self.centroids.c.astype(H.dtype)
        logits, _ = _forward(self.aggregation.store.params, H, C)
        out = np.full((len(prefixes), self.num_items + 1), -np.inf, dtype=logits.dtype)
        out[:, 1:] = logits
        return out
