"""Acceptance criteria, one test per criterion, run at the stated
tolerances on desk-scale synthetic workloads.

The shared corpus is 2,000 sessions over 200 items with 8 planted
clusters and K = 8 shards. Training budgets vary per criterion (the
bitwise criteria need no model quality; the quality criteria do).
"""

import time

import numpy as np
import pytest

from sru.aggregation import _backward, _forward
from sru.backbone import (
    GATE_NAMES,
    BackboneConfig,
    gru_cell_backward,
    gru_cell_forward,
    train_backbone,
)
from sru.checkpoint import load_checkpoint, save_checkpoint
from sru.config import ExperimentConfig
from sru.corpus import generate_synthetic, split
from sru.errors import CheckpointError
from sru.evaluation import (
    benchmark_unlearn,
    evaluate,
    hit_effectiveness,
    metrics_at_k,
    rank_from_logits,
    sisa_baseline,
)
from sru.numerics import ParamStore, RngStream, cross_entropy_rows, finite_difference_check
from sru.partition import PartitionConfig, balanced_kmeans, cluster_purity, embed_all
from sru.pipeline import fit_state
from sru.unlearning import UnlearnRequest, execute_unlearn, sample_requests

CORPUS = dict(num_sessions=2000, vocab_size=200, num_clusters=8,
              min_len=8, max_len=14)


def corpus_and_splits(seed, noise):
    data = generate_synthetic(noise_rate=noise, seed=seed, **CORPUS)
    return split(data, seed=seed)


def experiment(seed, backbone_epochs, agg_epochs, noise):
    return ExperimentConfig.defaults(**{
        "seed": seed,
        "synthetic.noise": noise,
        "backbone.d": 24,
        "backbone.epochs": backbone_epochs,
        "agg.epochs": agg_epochs,
        "agg.f": 32,
        "partition.k": 8,
    })


# -- criterion 1: exact unlearning ------------------------------------------------


def test_c1_exact_unlearning_equivalence():
    started = time.perf_counter()
    seed = 101
    train, val, _ = corpus_and_splits(seed, noise=0.1)
    config = experiment(seed, backbone_epochs=5, agg_epochs=2, noise=0.1)
    state = fit_state(train, val, config)

    stream = RngStream(seed, "acceptance/c1")
    strategies = ("CED", "NED", "RED")
    sessions = train.sessions
    for batch_id in range(20):
        count = int(stream.integers(1, 9))
        picks = stream.choice(len(sessions), size=count)
        requests = []
        for j, pick in enumerate(picks):
            session = sessions[int(pick)]
            position = int(stream.integers(1, len(session)))
            requests.append(UnlearnRequest(
                session.session_id, position,
                strategies[int(stream.integers(3))], int(stream.integers(0, 6)),
            ))
        outcome = execute_unlearn(state, requests)

        affected = {k for k in range(8)
                    if outcome.state.sub_models[k] is not state.sub_models[k]}
        assert affected, f"batch {batch_id} retrained nothing"
        for k in range(8):
            if k in affected:
                fresh = train_backbone(outcome.state.shards[k], state.shard_configs[k])
                assert (fresh.params_bytes()
                        == outcome.state.sub_models[k].params_bytes()), \
                    f"batch {batch_id}: shard {k} differs from fresh retraining"
            else:
                assert (outcome.state.sub_models[k].params_bytes()
                        == state.sub_models[k].params_bytes()), \
                    f"batch {batch_id}: untouched shard {k} changed"
        # no deleted occurrence survives in any retrained shard's data
        for result in outcome.deletions:
            for k in affected:
                for s in outcome.state.shards[k].sessions:
                    if s.session_id == result.session_id:
                        assert len(s) == (result.original_length
                                          - len(set().union(*[
                                              set(r.deleted_positions)
                                              for r in outcome.deletions
                                              if r.session_id == result.session_id
                                          ])))
    elapsed = time.perf_counter() - started
    assert elapsed < 600, f"criterion 1 exceeded its 10 minute budget ({elapsed:.0f}s)"


# -- criterion 2: gradient fidelity ------------------------------------------------


def fd_error_for_subset(loss_fn, full_store, names, epsilon=1e-5):
    """Finite differences over a subset of parameters, the rest fixed."""
    sub = ParamStore()
    for name in names:
        sub.params[name] = full_store.params[name]   # shared storage
        sub.grads[name] = full_store.grads[name]
    return finite_difference_check(loss_fn, sub, epsilon=epsilon)


def test_c2_gradient_fidelity():
    worst = 0.0
    for trial in range(10):
        rng = np.random.default_rng(trial)

        # GRU cell at d = 8
        d = 8
        params = {
            name: rng.normal(scale=0.4, size=(d,) if name.startswith("b") else (d, d))
            for name in GATE_NAMES
        }
        x = rng.normal(size=(1, d))
        h_prev = rng.normal(size=(1, d))
        probe = rng.normal(size=(1, d))
        store = ParamStore()
        for name in GATE_NAMES:
            store.params[name] = params[name]
            store.grads[name] = np.zeros_like(params[name])
        _, cache = gru_cell_forward(params, x, h_prev)
        _, _, grads = gru_cell_backward(params, cache, probe)
        for name in GATE_NAMES:
            store.grads[name][...] = grads[name]

        def cell_loss(s):
            h_new, _ = gru_cell_forward(s.params, x, h_prev)
            return float((h_new * probe).sum())

        worst = max(worst, finite_difference_check(cell_loss, store, epsilon=1e-5))

        # fusion stack at k <= 3, d <= 8 (projection, attention as
        # interpreted, fusion, output network); configurations whose ReLU
        # pre-activations sit within the finite-difference step of the
        # kink are redrawn, since the loss is not differentiable there
        k = 2 + trial % 2
        d = 5 + trial % 3
        f, d_ff, v, batch = 4, 6, 7, 3
        for attempt in range(50):
            full = ParamStore()
            full.add("W_proj", rng.normal(scale=0.5, size=(k, d, d)))
            full.add("b_proj", rng.normal(scale=0.2, size=(k, d)))
            full.add("W_attn", rng.normal(scale=0.5, size=(d, f)))
            full.add("b_attn", rng.normal(scale=0.2, size=f))
            full.add("g_attn", rng.normal(scale=0.5, size=f))
            full.add("W1", rng.normal(scale=0.5, size=(d, d_ff)))
            full.add("b1", rng.normal(scale=0.2, size=d_ff))
            full.add("W2", rng.normal(scale=0.5, size=(d_ff, v)))
            full.add("b2", rng.normal(scale=0.2, size=v))
            H = rng.normal(size=(batch, k, d))
            C = rng.normal(size=(k, d))
            targets = rng.integers(0, v, size=batch)
            logits0, probe_cache = _forward(full.params, H, C, with_cache=True)
            t_pre, pre1, weights = probe_cache[5], probe_cache[9], probe_cache[7]
            if (min(np.abs(t_pre).min(), np.abs(pre1).min()) <= 1e-3
                    or weights.min() <= 1e-4):
                continue  # a ReLU kink within the step, or saturated softmax
            # attention-score gradients can cancel to ~0 through the softmax
            # (e.g. a unit active at every example-shard pair shifts all
            # scores uniformly); central differences only see float noise
            # there, so such configurations are redrawn
            _, dl0 = cross_entropy_rows(logits0, targets)
            full.zero_grads()
            _backward(full.params, full.grads, probe_cache, dl0 / batch)
            attn_min = min(np.abs(full.grads[n]).min()
                           for n in ("W_attn", "b_attn", "g_attn"))
            if attn_min > 1e-7:
                break
        else:
            raise AssertionError("could not draw a well-conditioned configuration")

        def fusion_loss(_s):
            logits, _ = _forward(full.params, H, C)
            losses, _ = cross_entropy_rows(logits, targets)
            return float(losses.mean())

        logits, cache = _forward(full.params, H, C, with_cache=True)
        _, dlogits = cross_entropy_rows(logits, targets)
        full.zero_grads()
        _backward(full.params, full.grads, cache, dlogits / batch)

        for names in (("W_proj", "b_proj"),
                      ("W_attn", "b_attn", "g_attn"),
                      ("W1", "b1", "W2", "b2"),
                      tuple(full.names())):
            worst = max(worst, fd_error_for_subset(fusion_loss, full, names))
    assert worst < 1e-4, f"max relative gradient error {worst:.2e}"


# -- criterion 3: partition invariants ---------------------------------------------


def test_c3_partition_invariants():
    for trial in range(100):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(5, 90))
        d = int(rng.integers(1, 7))
        k = int(rng.integers(1, min(n, 8) + 1))
        H = rng.normal(size=(n, d))
        config = PartitionConfig(k=k, seed=trial)
        out = balanced_kmeans(H, config)
        out.validate()  # disjoint, covering, capacity <= delta
        again = balanced_kmeans(H, config)
        assert out.members == again.members, f"trial {trial} not deterministic"

    data = generate_synthetic(400, 60, 2, noise_rate=0.0, seed=21,
                              min_len=8, max_len=14)
    reference = train_backbone(
        data, BackboneConfig(d=32, max_len=14, epochs=20, lr=3e-3, seed=5))
    assignment = balanced_kmeans(embed_all(reference, data),
                                 PartitionConfig(k=2, seed=7))
    purity = cluster_purity(assignment, [s.cluster for s in data.sessions])
    assert purity >= 0.9, f"noise-free 2-cluster purity {purity:.3f}"


# -- criterion 4: partition benefit -------------------------------------------------


def test_c4_partition_benefit_over_random_sharding():
    started = time.perf_counter()
    noise = 0.25
    sru_scores = []
    sisa_scores = []
    for seed in (11, 12, 13):
        train, val, test = corpus_and_splits(seed, noise=noise)
        config = experiment(seed, backbone_epochs=25, agg_epochs=5, noise=noise)
        state = fit_state(train, val, config)
        sru_scores.append(evaluate(state.sru_model(), test, ks=(20,)).recall[20])
        sisa = sisa_baseline(train, 8, config.backbone_config("sisa"), seed=seed + 100)
        sisa_scores.append(evaluate(sisa, test, ks=(20,)).recall[20])
    assert np.mean(sru_scores) > np.mean(sisa_scores), \
        f"SRU {np.mean(sru_scores):.4f} vs random+mean {np.mean(sisa_scores):.4f}"
    elapsed = time.perf_counter() - started
    assert elapsed < 1800, f"criterion 4 exceeded its 30 minute budget ({elapsed:.0f}s)"


# -- criterion 5: deletion monotonicity ---------------------------------------------


def test_c5_deletion_monotonicity():
    hit_at_10 = {("CED", 0): [], ("CED", 5): [], ("NED", 0): [], ("NED", 5): []}
    audited = 0
    for seed in (31, 32, 33):
        train, val, _ = corpus_and_splits(seed, noise=0.1)
        config = experiment(seed, backbone_epochs=15, agg_epochs=4, noise=0.1)
        state = fit_state(train, val, config)
        base = sample_requests(state.current_train_dataset(), 250, "CED", 0,
                               seed=seed, min_target_position=6)
        for strategy in ("CED", "NED"):
            for n_extra in (0, 5):
                requests = [
                    UnlearnRequest(r.session_id, r.target_position, strategy, n_extra)
                    for r in base
                ]
                outcome = execute_unlearn(state, requests)
                report = hit_effectiveness(outcome.state.sru_model(),
                                           outcome.deletions, ks=(1, 5, 10, 20))
                hits = [report.hit[k] for k in (1, 5, 10, 20)]
                assert hits == sorted(hits), "hit@K must be non-decreasing in K"
                assert report.audited_requests >= 200
                audited = max(audited, report.audited_requests)
                hit_at_10[(strategy, n_extra)].append(report.hit[10])
    for strategy in ("CED", "NED"):
        heavy = np.mean(hit_at_10[(strategy, 5)])
        light = np.mean(hit_at_10[(strategy, 0)])
        assert heavy <= light, (
            f"{strategy}: HIT@10 rose from {light:.4f} (N=0) to {heavy:.4f} (N=5)"
        )


# -- criterion 6: efficiency ratio --------------------------------------------------


def test_c6_efficiency_ratio():
    seed = 61
    train, val, _ = corpus_and_splits(seed, noise=0.1)
    config = experiment(seed, backbone_epochs=40, agg_epochs=3, noise=0.1)
    state = fit_state(train, val, config)
    requests = sample_requests(state.shards[0], 10, "CED", 2, seed=seed,
                               min_target_position=2)
    speedups = sorted(benchmark_unlearn(state, requests).speedup for _ in range(3))
    median = speedups[1]
    assert median >= 2.0, f"median retrain/unlearn ratio {median:.2f} (runs: {speedups})"


# -- criterion 7: metric oracle equivalence ------------------------------------------


def sort_rank_oracle(logits, target):
    items = np.sort(np.asarray(logits)[1:])
    return int(1 + items.size - np.searchsorted(items, logits[target], side="right"))


def test_c7_metric_oracle_equivalence():
    rng = np.random.default_rng(71)

    for _ in range(1000):
        v = int(rng.integers(3, 80))
        logits = np.concatenate([[-np.inf], rng.normal(size=v)])
        if rng.random() < 0.2:  # exercise ties
            logits[1:] = np.round(logits[1:], 1)
        target = int(rng.integers(1, v + 1))
        assert rank_from_logits(logits, target) == sort_rank_oracle(logits, target)

    for _ in range(1000):
        rank = int(rng.integers(1, 200))
        k = int(rng.integers(1, 60))
        recall, ndcg = metrics_at_k(rank, k)
        assert recall == (1.0 if rank <= k else 0.0)
        expected_ndcg = 1.0 / np.log2(1.0 + rank) if rank <= k else 0.0
        assert abs(ndcg - expected_ndcg) < 1e-9

    class Result:
        def __init__(self, prefix, target):
            self.context_prefix = prefix
            self.context_full = prefix
            self.target_item = target

    checked = 0
    while checked < 1000:
        v = int(rng.integers(4, 30))
        table = np.concatenate([[-np.inf], rng.normal(size=v)])
        batch = int(rng.integers(5, 40))
        results = [Result((int(rng.integers(1, v + 1)),), int(rng.integers(1, v + 1)))
                   for _ in range(batch)]
        predictor = lambda prefix: table
        ks = (1, 3, 10)
        report = hit_effectiveness(predictor, results, ks=ks)
        for k in ks:
            expected = np.mean([
                sort_rank_oracle(table, r.target_item) <= k for r in results
            ])
            assert abs(report.hit[k] - expected) < 1e-9
        checked += batch


# -- criterion 8: persistence ---------------------------------------------------------


def test_c8_checkpoint_persistence(tmp_path):
    from sru.aggregation import AggregationConfig, init_aggregation_model
    from sru.backbone import init_gru_model

    rng = np.random.default_rng(81)
    saved = []
    for i in range(50):
        if i % 2 == 0:
            model = init_gru_model(
                int(rng.integers(5, 60)),
                BackboneConfig(d=int(rng.integers(2, 16)), max_len=10, seed=i),
            )
        else:
            model = init_aggregation_model(
                k=int(rng.integers(1, 6)), d=int(rng.integers(2, 12)),
                num_items=int(rng.integers(5, 40)),
                config=AggregationConfig(f=int(rng.integers(2, 10)), seed=i),
            )
        path = tmp_path / f"model_{i:02d}.sru"
        save_checkpoint(model, path, {"config_hash": f"h{i}"})
        loaded = load_checkpoint(path)
        assert loaded.params_bytes() == model.params_bytes(), f"model {i} round trip"
        saved.append(path)

    for i, path in enumerate(saved[:10]):
        blob = bytearray(path.read_bytes())
        corrupt = tmp_path / f"corrupt_{i}.sru"
        if i % 2 == 0:
            corrupt.write_bytes(bytes(blob[: int(rng.integers(1, len(blob)))]))
        else:
            blob[int(rng.integers(4, len(blob)))] ^= 0x5A
            corrupt.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(corrupt)
