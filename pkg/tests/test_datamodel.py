import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aucis.datamodel import AUSample, Dataset, ModelConfig, load_dataset, save_dataset
from aucis.errors import DataValidationError
from aucis import scm


def make_dataset(n=5, num_subjects=3, num_aus=4, obs_dim=6, seed=0, provenance="test"):
    rng = np.random.default_rng(seed)
    return Dataset(
        sample_ids=np.arange(n),
        subject_ids=rng.integers(0, num_subjects, n) if n else [],
        labels=rng.integers(0, 2, (n, num_aus)),
        observations=rng.normal(size=(n, obs_dim)),
        num_subjects=num_subjects,
        num_aus=num_aus,
        obs_dim=obs_dim,
        provenance=provenance,
    )


class TestRoundTrip:
    def test_empty_dataset_header_only(self, tmp_path):
        ds = Dataset(
            sample_ids=[], subject_ids=[], labels=np.zeros((0, 6)), observations=np.zeros((0, 9)),
            num_subjects=0, num_aus=6, obs_dim=9, provenance="empty",
        )
        path = tmp_path / "empty.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1
        assert load_dataset(path) == ds

    def test_round_trip_equality(self, tmp_path):
        ds = make_dataset(n=20)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_generated_dataset_line_count(self, tmp_path):
        spec = scm.demo_spec()
        ds = scm.sample_dataset(spec, 1000, seed=3)
        path = tmp_path / "gen.jsonl"
        save_dataset(ds, path)
        # one header plus one record per sample
        assert len(path.read_text().splitlines()) == 1001
        assert load_dataset(path) == ds

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(0, 12),
        num_subjects=st.integers(1, 5),
        num_aus=st.integers(1, 5),
        obs_dim=st.integers(1, 5),
        seed=st.integers(0, 10_000),
    )
    def test_round_trip_property(self, tmp_path_factory, n, num_subjects, num_aus, obs_dim, seed):
        ds = make_dataset(n, num_subjects, num_aus, obs_dim, seed)
        path = tmp_path_factory.mktemp("rt") / "d.jsonl"
        save_dataset(ds, path)
        assert load_dataset(path) == ds


class TestValidation:
    def test_wrong_label_length_names_line(self, tmp_path):
        ds = make_dataset(n=4, num_aus=3)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        rec = json.loads(lines[2])
        rec["labels"] = rec["labels"] + [0]
        lines[2] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataValidationError, match="line 3"):
            load_dataset(path)

    def test_subject_out_of_declared_range(self, tmp_path):
        ds = make_dataset(n=4, num_subjects=4)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        rec = json.loads(lines[1])
        rec["subject_id"] = 7
        lines[1] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataValidationError, match="subject_id 7"):
            load_dataset(path)
        assert header["num_subjects"] == 4

    def test_malformed_json_line(self, tmp_path):
        ds = make_dataset(n=2)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(DataValidationError, match="line 4"):
            load_dataset(path)

    def test_non_binary_labels_rejected_in_memory(self):
        with pytest.raises(DataValidationError):
            Dataset(
                sample_ids=[0], subject_ids=[0], labels=[[0, 2]], observations=[[0.0]],
                num_subjects=1, num_aus=2, obs_dim=1,
            )

    def test_duplicate_sample_ids_rejected(self):
        with pytest.raises(DataValidationError, match="unique"):
            Dataset(
                sample_ids=[1, 1], subject_ids=[0, 0], labels=[[0], [1]],
                observations=[[0.0], [1.0]], num_subjects=1, num_aus=1, obs_dim=1,
            )

    def test_version_mismatch(self, tmp_path):
        ds = make_dataset(n=1)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["version"] = 99
        lines[0] = json.dumps(header)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataValidationError, match="version"):
            load_dataset(path)

    def test_valid_inputs_accepted(self):
        # boundary: labels exactly 0/1, subject ids at both ends of range
        ds = Dataset(
            sample_ids=[0, 1], subject_ids=[0, 2], labels=[[0, 1], [1, 0]],
            observations=[[0.5, -1.0], [2.0, 3.0]], num_subjects=3, num_aus=2, obs_dim=2,
        )
        assert len(ds) == 2
        assert ds[1].subject_id == 2


class TestSamplesView:
    def test_indexing_yields_samples(self):
        ds = make_dataset(n=3)
        s = ds[0]
        assert isinstance(s, AUSample)
        assert s.sample_id == 0
        assert list(ds)[2] == ds[2]

    def test_restrict_to_subjects_reindexes(self):
        ds = make_dataset(n=50, num_subjects=5, seed=2)
        kept = [1, 3]
        sub = ds.restrict_to_subjects(kept, reindex=True)
        assert sub.num_subjects == 2
        assert set(sub.subject_ids.tolist()) <= {0, 1}
        orig = ds.restrict_to_subjects(kept, reindex=False)
        assert orig.num_subjects == ds.num_subjects
        assert set(orig.subject_ids.tolist()) <= set(kept)
        assert len(sub) == len(orig)

    def test_immutability(self):
        ds = make_dataset(n=3)
        with pytest.raises(ValueError):
            ds.labels[0, 0] = 1


class TestModelConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.tau == 0.5
        assert cfg.head == "concat"

    def test_tau_bounds(self):
        with pytest.raises(DataValidationError):
            ModelConfig(tau=0.0)
        with pytest.raises(DataValidationError):
            ModelConfig(tau=1.0)

    def test_bad_enum(self):
        with pytest.raises(DataValidationError):
            ModelConfig(backbone_kind="resnet")
        with pytest.raises(DataValidationError):
            ModelConfig(head="product")

    def test_dict_round_trip(self):
        cfg = ModelConfig(d_in=32, backbone_shape=(64, 32), alpha_mode="uniform")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(DataValidationError, match="unknown"):
            ModelConfig.from_dict({"d_inn": 4})
