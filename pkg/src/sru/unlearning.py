"""Item-level unlearning: extra-deletion selection, session rewriting,
and retraining of exactly the affected sub-models plus the fusion layer.

Exactness comes from determinism rather than parameter surgery: a
retrained sub-model is the output of the ordinary training function on
the post-deletion shard with the original config and seed, so it is
bitwise identical to a model that never saw the deleted items. The
pretrained reference encoder is NOT retrained here; it only serves
partitioning and the collaborative-deletion distances. Its hidden states
did see the deleted interactions, which is a deliberate, documented
privacy caveat of this design.
"""

from __future__ import annotations

import csv
import io
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .aggregation import (
    AggregationConfig,
    AggregationModel,
    FeatureCache,
    ShardCentroids,
    SruModel,
    build_feature_cache,
    compute_centroids,
    train_aggregation,
    updated_feature_cache,
)
from .backbone import BackboneConfig, GruModel, train_backbone, train_many
from .corpus import Session, SessionDataset
from .errors import ContractError, ParseError
from .numerics import RngStream, derive_seed
from .partition import ShardAssignment
from .reports import TimingReport

STRATEGIES = ("CED", "NED", "RED")


@dataclass(frozen=True)
class UnlearnRequest:
    session_id: str
    target_position: int       # 0-based index into the stored session
    strategy: str              # CED, NED, or RED
    n_extra: int               # extra deletions beyond the target

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.n_extra < 0:
            raise ContractError(f"n_extra must be >= 0, got {self.n_extra}")
        if self.target_position < 0:
            raise IndexError(f"target_position must be >= 0, got {self.target_position}")


@dataclass
class DeletionResult:
    """Outcome of one applied request, self-contained for the audit."""

    session_id: str
    strategy: str
    n_extra: int
    target_position: int
    target_item: int
    deleted_positions: tuple[int, ...]   # includes the target position
    original_length: int
    modified_session: Session | None     # None when nothing survived
    dropped: bool                        # survivors < 2, session removed
    context_prefix: tuple[int, ...]      # survivors before the target position
    context_full: tuple[int, ...]        # all survivors


def _check_target(session: Session, target_position: int) -> None:
    if not 0 <= target_position < len(session):
        raise IndexError(
            f"target position {target_position} outside session "
            f"{session.session_id!r} of length {len(session)}"
        )


def ced_select(session: Session, target_position: int, n_extra: int,
               reference_model: GruModel) -> tuple[int, ...]:
    """Collaborative extra deletion: also drop the n_extra items whose
    reference embeddings are closest to the target item's embedding.

    Distances use the pretrained reference encoder's item embeddings;
    ties break toward earlier positions.
    """
    _check_target(session, target_position)
    emb = reference_model.embeddings
    target_vec = emb[session.items[target_position]]
    candidates = [p for p in range(len(session)) if p != target_position]
    distances = {
        p: float(np.linalg.norm(emb[session.items[p]] - target_vec)) for p in candidates
    }
    candidates.sort(key=lambda p: (distances[p], p))
    chosen = candidates[: min(n_extra, len(candidates))]
    return tuple(sorted([target_position, *chosen]))


def ned_select(session: Session, target_position: int, n_extra: int) -> tuple[int, ...]:
    """Neighbor extra deletion: also drop the items immediately before
    the target."""
    _check_target(session, target_position)
    take = min(n_extra, target_position)
    return tuple(range(target_position - take, target_position + 1))


def red_select(session: Session, target_position: int, n_extra: int,
               stream: RngStream) -> tuple[int, ...]:
    """Random extra deletion: also drop n_extra other positions sampled
    uniformly without replacement from the named stream."""
    _check_target(session, target_position)
    candidates = [p for p in range(len(session)) if p != target_position]
    take = min(n_extra, len(candidates))
    chosen = [candidates[int(i)] for i in stream.choice(len(candidates), size=take)] if take else []
    return tuple(sorted([target_position, *chosen]))


def select_positions(session: Session, request: UnlearnRequest,
                     reference_model: GruModel | None = None,
                     stream: RngStream | None = None) -> tuple[int, ...]:
    if request.strategy == "CED":
        if reference_model is None:
            raise ContractError("CED needs the pretrained reference model")
        return ced_select(session, request.target_position, request.n_extra, reference_model)
    if request.strategy == "NED":
        return ned_select(session, request.target_position, request.n_extra)
    if stream is None:
        raise ContractError("RED needs a random stream")
    return red_select(session, request.target_position, request.n_extra, stream)


def _rewrite(session: Session, positions) -> Session | None:
    survivors = [p for p in range(len(session)) if p not in positions]
    if not survivors:
        return None
    times = None
    if session.times is not None:
        times = tuple(session.times[p] for p in survivors)
    return Session(
        session_id=session.session_id,
        items=tuple(session.items[p] for p in survivors),
        times=times,
        cluster=session.cluster,
    )


def _result_for(session: Session, request: UnlearnRequest, own_positions,
                union_positions=None) -> DeletionResult:
    """Record one request; contexts reflect the union of all deletions
    applied to the session (== own_positions for a lone request)."""
    union = set(union_positions if union_positions is not None else own_positions)
    survivors = [p for p in range(len(session)) if p not in union]
    modified = _rewrite(session, union)
    return DeletionResult(
        session_id=session.session_id,
        strategy=request.strategy,
        n_extra=request.n_extra,
        target_position=request.target_position,
        target_item=session.items[request.target_position],
        deleted_positions=tuple(sorted(set(own_positions))),
        original_length=len(session),
        modified_session=modified,
        dropped=modified is None or len(modified) < 2,
        context_prefix=tuple(session.items[p] for p in survivors if p < request.target_position),
        context_full=tuple(session.items[p] for p in survivors),
    )


def apply_deletion(shard: SessionDataset, request: UnlearnRequest,
                   positions) -> tuple[SessionDataset, DeletionResult]:
    """Rewrite one session of a shard without the given positions.

    Sessions left with fewer than 2 items are dropped from the shard and
    flagged; every other session is carried over untouched.
    """
    by_id = {s.session_id: i for i, s in enumerate(shard.sessions)}
    if request.session_id not in by_id:
        raise KeyError(f"session {request.session_id!r} not found in shard")
    idx = by_id[request.session_id]
    session = shard.sessions[idx]
    for p in positions:
        if not 0 <= p < len(session):
            raise IndexError(f"deletion position {p} outside session of length {len(session)}")
    if request.target_position not in set(positions):
        raise ContractError("the target position must be among the deletions")

    result = _result_for(session, request, positions)
    sessions = list(shard.sessions)
    if result.dropped:
        del sessions[idx]
    else:
        sessions[idx] = result.modified_session
    return shard.with_sessions(sessions), result


# -- framework state -------------------------------------------------------------


@dataclass
class SruState:
    """Everything the unlearning flow needs to retrain selectively."""

    reference_model: GruModel
    assignment: ShardAssignment
    shards: list[SessionDataset]
    shard_configs: list[BackboneConfig]
    sub_models: list[GruModel]
    centroids: ShardCentroids
    agg_config: AggregationConfig
    aggregation: AggregationModel
    seed: int = 0
    feature_cache: FeatureCache | None = None

    def locate(self, session_id: str) -> tuple[int, int]:
        """(shard id, index within shard) of a session id."""
        for k, shard in enumerate(self.shards):
            for i, s in enumerate(shard.sessions):
                if s.session_id == session_id:
                    return k, i
        raise KeyError(f"session {session_id!r} not found in any shard")

    def current_train_dataset(self) -> SessionDataset:
        """The full training corpus as currently stored, in original
        partition order (shards interleaved by original session index)."""
        tagged = []
        for k, shard in enumerate(self.shards):
            for original_index, s in zip(self.assignment.members[k], shard.sessions):
                tagged.append((original_index, s))
        tagged.sort(key=lambda pair: pair[0])
        return self.shards[0].with_sessions(s for _, s in tagged)

    def sru_model(self) -> SruModel:
        return SruModel(
            sub_models=tuple(self.sub_models),
            centroids=self.centroids,
            aggregation=self.aggregation,
            max_len=self.sub_models[0].max_len,
        )


@dataclass
class UnlearnOutcome:
    state: SruState
    timing: TimingReport
    deletions: list[DeletionResult]


def execute_unlearn(state: SruState, requests, parallel: bool = False) -> UnlearnOutcome:
    """Apply a batch of unlearning requests and retrain what they touch.

    All target positions refer to sessions as stored when the call
    starts; per session, deletions from multiple requests are unioned and
    applied once, and a request whose target position was already deleted
    by an earlier request in the batch is skipped with a warning.
    Affected sub-models are retrained from scratch on their modified
    shards with their original configs and seeds; untouched sub-models
    are returned as-is, bit for bit. The fusion layer is retrained from
    scratch on the modified full corpus (skipped when no request
    survives).
    """
    requests = list(requests)
    started = time.perf_counter()
    if not requests:
        return UnlearnOutcome(state=state, timing=TimingReport(), deletions=[])

    # Resolve every request against the call-start sessions.
    deletions_by_session: dict[str, set[int]] = {}
    session_home: dict[str, tuple[int, int]] = {}
    resolved: list[tuple[UnlearnRequest, tuple[int, ...]]] = []
    for request in requests:
        if request.session_id not in session_home:
            session_home[request.session_id] = state.locate(request.session_id)
        k, i = session_home[request.session_id]
        session = state.shards[k].sessions[i]
        already = deletions_by_session.setdefault(request.session_id, set())
        if request.target_position in already:
            warnings.warn(
                f"position {request.target_position} of session "
                f"{request.session_id!r} was already deleted in this batch; skipping",
                stacklevel=2,
            )
            continue
        _check_target(session, request.target_position)
        surviving = [p for p in range(len(session)) if p not in already]
        view = Session(
            session_id=session.session_id,
            items=tuple(session.items[p] for p in surviving),
            cluster=session.cluster,
        )
        view_target = surviving.index(request.target_position)
        stream = None
        if request.strategy == "RED":
            stream = RngStream(
                derive_seed(state.seed, f"unlearn/red/{request.session_id}"),
                f"red/{request.target_position}",
            )
        view_positions = select_positions(
            view,
            replace(request, target_position=view_target),
            reference_model=state.reference_model,
            stream=stream,
        )
        positions = tuple(surviving[p] for p in view_positions)
        already.update(positions)
        resolved.append((request, positions))

    if not resolved:
        return UnlearnOutcome(state=state, timing=TimingReport(), deletions=[])

    # Rewrite the touched sessions once, per shard.
    results: list[DeletionResult] = []
    new_shards = list(state.shards)
    affected = sorted({session_home[r.session_id][0] for r, _ in resolved})
    for k in affected:
        sessions = list(new_shards[k].sessions)
        drop: list[int] = []
        for request, own_positions in resolved:
            if session_home[request.session_id][0] != k:
                continue
            i = session_home[request.session_id][1]
            original = state.shards[k].sessions[i]
            result = _result_for(original, request, own_positions,
                                 union_positions=deletions_by_session[request.session_id])
            results.append(result)
            if result.dropped:
                if i not in drop:
                    drop.append(i)
            else:
                sessions[i] = result.modified_session
        for i in sorted(drop, reverse=True):
            del sessions[i]
        new_shards[k] = state.shards[k].with_sessions(sessions)

    # Retrain exactly the affected sub-models, from scratch.
    shard_started = time.perf_counter()
    new_models = list(state.sub_models)
    per_shard_ms: dict[int, float] = {}
    if parallel and len(affected) > 1:
        retrained = train_many([new_shards[k] for k in affected],
                               [state.shard_configs[k] for k in affected])
        for k, m in zip(affected, retrained):
            new_models[k] = m
    else:
        for k in affected:
            t0 = time.perf_counter()
            new_models[k] = train_backbone(new_shards[k], state.shard_configs[k])
            per_shard_ms[k] = (time.perf_counter() - t0) * 1e3
    shard_ms = (time.perf_counter() - shard_started) * 1e3

    # Refresh centroids of the affected shards, retrain the fusion layer.
    agg_started = time.perf_counter()
    centroids = compute_centroids(
        new_models, new_shards,
        source=state.centroids.source,
        reference_centroids=state.assignment.centroids,
    )
    new_state = replace(
        state,
        shards=new_shards,
        sub_models=new_models,
        centroids=centroids,
        assignment=_prune_assignment(state.assignment, state.shards, new_shards),
    )
    new_train = new_state.current_train_dataset()
    if state.feature_cache is not None:
        cache = updated_feature_cache(state.feature_cache, new_models, new_train,
                                      dirty_shards=affected,
                                      changed_session_ids=set(deletions_by_session))
    else:
        cache = build_feature_cache(new_models, new_train)
    new_state.feature_cache = cache
    new_state.aggregation = train_aggregation(
        new_models, centroids, new_train, state.agg_config,
        precomputed=(cache.features, cache.targets),
    )
    agg_ms = (time.perf_counter() - agg_started) * 1e3

    timing = TimingReport(
        sub_model_retrain_ms=shard_ms,
        aggregation_retrain_ms=agg_ms,
        total_ms=(time.perf_counter() - started) * 1e3,
        per_shard_ms=per_shard_ms,
    )
    return UnlearnOutcome(state=new_state, timing=timing, deletions=results)


def _prune_assignment(assignment: ShardAssignment, old_shards, new_shards) -> ShardAssignment:
    """Drop the original indices of sessions that were removed entirely."""
    members = []
    for k, member in enumerate(assignment.members):
        kept_ids = {s.session_id for s in new_shards[k].sessions}
        members.append(tuple(
            idx for idx, s in zip(member, old_shards[k].sessions) if s.session_id in kept_ids
        ))
    # The pruned map stays keyed by ORIGINAL indices; dropped sessions
    # leave -1 holes, so the full-partition validity check does not apply.
    size = max((i for m in members for i in m), default=-1) + 1
    shard_of = np.full(size, -1, dtype=np.int64)
    for k, member in enumerate(members):
        for i in member:
            shard_of[i] = k
    return ShardAssignment(
        shard_of=shard_of,
        members=tuple(members),
        centroids=assignment.centroids,
        iterations_run=assignment.iterations_run,
        delta=assignment.delta,
        reseeds=assignment.reseeds,
    )


# -- request file format -----------------------------------------------------------

REQUEST_HEADER = ("session_id", "target_position", "strategy", "N")


def save_requests(requests, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(REQUEST_HEADER)
        for r in requests:
            writer.writerow([r.session_id, r.target_position, r.strategy, r.n_extra])


def load_requests(source) -> list[UnlearnRequest]:
    """Parse the request CSV ``session_id,target_position,strategy,N``."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as handle:
            text = handle.read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REQUEST_HEADER:
        raise ParseError(f"request file must start with header {','.join(REQUEST_HEADER)}", 1)
    requests = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
        sid, pos_text, strategy, n_text = row
        try:
            position = int(pos_text)
            n_extra = int(n_text)
        except ValueError:
            raise ParseError("target_position and N must be integers", lineno) from None
        try:
            requests.append(UnlearnRequest(sid, position, strategy.strip().upper(), n_extra))
        except (ContractError, IndexError) as exc:
            raise ParseError(str(exc), lineno) from None
    return requests


def sample_requests(dataset: SessionDataset, count: int, strategy: str, n_extra: int,
                    seed: int, min_target_position: int = 1) -> list[UnlearnRequest]:
    """Draw requests over distinct sessions with deep-enough targets.

    Sessions are sampled without replacement; the target position is
    uniform in [min_target_position, len - 1]. Sessions shorter than
    min_target_position + 1 are not eligible.
    """
    stream = RngStream(seed, "unlearn/sample")
    eligible = [i for i, s in enumerate(dataset.sessions) if len(s) > min_target_position]
    if count > len(eligible):
        raise ContractError(
            f"cannot sample {count} requests from {len(eligible)} eligible sessions"
        )
    picks = stream.choice(len(eligible), size=count)
    requests = []
    for pick in picks:
        session = dataset.sessions[eligible[int(pick)]]
        position = int(stream.integers(min_target_position, len(session)))
        requests.append(UnlearnRequest(session.session_id, position, strategy, n_extra))
    return requests
