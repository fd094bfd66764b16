import json

import numpy as np
import pytest

from sru.aggregation import AggregationConfig, init_aggregation_model
from sru.backbone import BackboneConfig, init_gru_model
from sru.checkpoint import (
    load_assignment,
    load_checkpoint,
    load_container,
    load_datasets,
    save_assignment,
    save_checkpoint,
    save_container,
    save_datasets,
)
from sru.corpus import generate_synthetic, split
from sru.errors import ContractError, IntegrityError, StaleArtifactError, VersionError
from sru.partition import PartitionConfig, balanced_kmeans
from sru.reports import EffectivenessReport, RankingReport, TimingReport, emit_report


def models_equal(a, b):
    return a.params_bytes() == b.params_bytes()


class TestModelRoundTrip:
    def test_gru_round_trip_bitwise(self, tmp_path):
        model = init_gru_model(20, BackboneConfig(d=8, max_len=10, seed=3))
        path = tmp_path / "m.sru"
        save_checkpoint(model, path, {"config_hash": "abc"})
        loaded = load_checkpoint(path)
        assert models_equal(model, loaded)
        assert loaded.config == model.config
        assert loaded.num_items == 20

    def test_aggregation_round_trip_bitwise(self, tmp_path):
        model = init_aggregation_model(4, 8, 30, AggregationConfig(f=6, seed=5))
        path = tmp_path / "a.sru"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert models_equal(model, loaded)
        assert (loaded.k, loaded.d, loaded.f) == (4, 8, 6)

    def test_save_is_deterministic(self, tmp_path):
        model = init_gru_model(10, BackboneConfig(d=4, max_len=10, seed=1))
        p1, p2 = tmp_path / "one.sru", tmp_path / "two.sru"
        save_checkpoint(model, p1, {"config_hash": "x"})
        save_checkpoint(model, p2, {"config_hash": "x"})
        assert p1.read_bytes() == p2.read_bytes()


class TestCorruption:
    def saved(self, tmp_path):
        model = init_gru_model(12, BackboneConfig(d=6, max_len=10, seed=2))
        path = tmp_path / "m.sru"
        save_checkpoint(model, path)
        return path

    def test_truncated_file_rejected(self, tmp_path):
        path = self.saved(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_flipped_byte_rejected(self, tmp_path):
        path = self.saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            load_checkpoint(path)

    def test_foreign_magic_is_version_error(self, tmp_path):
        path = self.saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = self.saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99  # version field, little-endian u32
        # fix the checksum so only the version is wrong
        import struct
        import zlib
        body = bytes(blob[:-4])
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = self.saved(tmp_path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(IntegrityError):
            load_checkpoint(path)


class TestConfigHashGate:
    def test_mismatch_rejected_unless_forced(self, tmp_path):
        model = init_gru_model(10, BackboneConfig(d=4, max_len=10, seed=1))
        path = tmp_path / "m.sru"
        save_checkpoint(model, path, {"config_hash": "old"})
        with pytest.raises(StaleArtifactError):
            load_checkpoint(path, expected_config_hash="new")
        loaded = load_checkpoint(path, expected_config_hash="new", force=True)
        assert models_equal(model, loaded)


class TestDatasetRoundTrip:
    def test_splits_round_trip(self, tmp_path):
        data = generate_synthetic(30, 30, 3, noise_rate=0.2, seed=4)
        train, val, test = split(data, seed=1)
        path = tmp_path / "d.sru"
        save_datasets(path, {"train": train, "validation": val, "test": test})
        loaded = load_datasets(path)
        for tag, original in (("train", train), ("validation", val), ("test", test)):
            assert loaded[tag] == original

    def test_cluster_labels_survive(self, tmp_path):
        data = generate_synthetic(8, 30, 2, seed=5)
        path = tmp_path / "d.sru"
        save_datasets(path, {"train": data})
        loaded = load_datasets(path)["train"]
        assert [s.cluster for s in loaded.sessions] == [s.cluster for s in data.sessions]


class TestAssignmentRoundTrip:
    def test_round_trip(self, tmp_path):
        H = np.random.default_rng(3).normal(size=(20, 4))
        assignment = balanced_kmeans(H, PartitionConfig(k=3, seed=2))
        csv_path, bin_path = tmp_path / "p.csv", tmp_path / "c.sru"
        save_assignment(csv_path, bin_path, assignment)
        loaded = load_assignment(csv_path, bin_path)
        assert loaded.members == assignment.members
        np.testing.assert_array_equal(loaded.shard_of, assignment.shard_of)
        np.testing.assert_array_equal(loaded.centroids, assignment.centroids)
        assert loaded.delta == assignment.delta

    def test_csv_is_sorted_with_header(self, tmp_path):
        H = np.random.default_rng(4).normal(size=(6, 2))
        assignment = balanced_kmeans(H, PartitionConfig(k=2, seed=0))
        csv_path, bin_path = tmp_path / "p.csv", tmp_path / "c.sru"
        save_assignment(csv_path, bin_path, assignment)
        lines = csv_path.read_text().strip().split("\n")
        assert lines[0] == "session_index,shard_id"
        indices = [int(line.split(",")[0]) for line in lines[1:]]
        assert indices == sorted(indices) == list(range(6))


class TestContainerValidation:
    def test_bad_dtype_rejected_on_save(self, tmp_path):
        with pytest.raises(ContractError):
            save_container(tmp_path / "x.sru", {"t": np.zeros(3, dtype=np.int16)}, {})

    def test_shape_product_checked(self, tmp_path):
        path = tmp_path / "x.sru"
        save_container(path, {"t": np.zeros((2, 3), dtype=np.float32)}, {"kind": "raw"})
        tensors, meta = load_container(path)
        assert tensors["t"].shape == (2, 3)
        assert meta["kind"] == "raw"


class TestReports:
    def test_empty_metric_map_header_only_csv(self, tmp_path):
        path = tmp_path / "r.csv"
        emit_report({}, "csv", path)
        assert path.read_text() == "metric,k,value\n"

    def test_same_report_same_bytes(self, tmp_path):
        report = RankingReport(recall={10: 0.5, 20: 0.625}, ndcg={10: 0.25, 20: 0.3},
                               evaluation_points=16)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        emit_report(report, "json", a)
        emit_report(report, "json", b)
        assert a.read_bytes() == b.read_bytes()

    def test_json_round_trip_within_precision(self, tmp_path):
        report = EffectivenessReport(hit={1: 1 / 3, 5: 2 / 3, 10: 0.70000049},
                                     audited_requests=3, skipped_empty_prefix=1)
        path = tmp_path / "r.json"
        emit_report(report, "json", path)
        parsed = json.loads(path.read_text())
        for k, v in report.hit.items():
            assert parsed["hit"][str(k)] == pytest.approx(v, rel=1e-5)
        assert parsed["audited_requests"] == 3

    def test_csv_one_row_per_metric_k(self, tmp_path):
        report = RankingReport(recall={10: 0.5, 20: 0.75}, ndcg={10: 0.5, 20: 0.5},
                               evaluation_points=4)
        path = tmp_path / "r.csv"
        emit_report(report, "csv", path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "metric,k,value"
        assert "recall,10,0.5" in lines and "recall,20,0.75" in lines
        assert "evaluation_points,,4" in lines

    def test_six_significant_digits(self, tmp_path):
        report = RankingReport(recall={10: 0.123456789}, ndcg={10: 0.123456789},
                               evaluation_points=1)
        path = tmp_path / "r.csv"
        emit_report(report, "csv", path)
        assert "recall,10,0.123457" in path.read_text()

    def test_timing_report_invariant(self):
        with pytest.raises(ContractError):
            TimingReport(sub_model_retrain_ms=5.0, aggregation_retrain_ms=0.0,
                         total_ms=1.0)

    def test_speedup_property(self):
        report = TimingReport(sub_model_retrain_ms=1.0, aggregation_retrain_ms=1.0,
                              total_ms=2.5, full_retrain_reference_ms=10.0)
        assert report.speedup == 4.0

    def test_report_validation(self):
        with pytest.raises(ContractError):
            RankingReport(recall={10: 0.2}, ndcg={10: 0.5}, evaluation_points=1)
        with pytest.raises(ContractError):
            EffectivenessReport(hit={1: 0.5, 5: 0.1}, audited_requests=2,
                                skipped_empty_prefix=0)
