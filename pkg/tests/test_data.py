import numpy as np
import numpy.testing as npt
import pytest

from dialectam.data import (
    Batch,
    Dataset,
    DatasetFormatError,
    DialectProfile,
    DialectSpec,
    Utterance,
    batch_iterator,
    build_manifest,
    default_spec,
    generate_bundle,
    load_dataset,
    save_dataset,
    synth_generate,
)
from dialectam.numerics import Rng


def file_of(tmp_path, dataset, name="data.txt"):
    path = tmp_path / name
    save_dataset(dataset, path)
    return path


class TestSpec:
    def test_default_spec_layout(self):
        spec = default_spec()
        spec.validate()
        names = [p.name for p in spec.profiles]
        assert names[0] == "native" and spec.held_out == "accent_x"
        assert len(spec.train_dialects()) == 7  # native + six accents
        assert "accent_x" not in spec.train_dialects()
        native = spec.profiles[0]
        accents = spec.profiles[1:-1]
        assert all(native.num_train == 4 * p.num_train for p in accents)

    def test_transforms_well_conditioned(self):
        spec = default_spec()
        for p in spec.profiles:
            assert np.linalg.cond(p.transform) < 100

    def test_transition_rows_sum_to_one(self):
        spec = default_spec()
        npt.assert_allclose(spec.transitions.sum(axis=1), np.ones(spec.num_classes), atol=1e-12)

    def test_bad_transitions_rejected(self):
        spec = default_spec()
        spec.transitions = spec.transitions * 2.0
        with pytest.raises(ValueError, match="sum to 1"):
            spec.validate()

    def test_ill_conditioned_transform_rejected(self):
        spec = default_spec()
        spec.profiles[1].transform = np.diag([1e6] + [1.0] * (spec.feature_dim - 1))
        with pytest.raises(ValueError, match="ill-conditioned"):
            spec.validate()


class TestSynthGenerate:
    def test_deterministic(self, tmp_path):
        spec = default_spec()
        a = file_of(tmp_path, synth_generate(spec, seed=3, split="test"), "a.txt")
        b = file_of(tmp_path, synth_generate(spec, seed=3, split="test"), "b.txt")
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_data(self):
        spec = default_spec()
        a = synth_generate(spec, seed=1, split="test")
        b = synth_generate(spec, seed=2, split="test")
        assert not np.array_equal(a[0].frames, b[0].frames)

    def test_noiseless_identity_dialect_emits_class_means(self):
        rng = Rng(0)
        feat, classes = 3, 2
        means = rng.normal(0, 1, (classes, feat))
        transitions = np.full((classes, classes), 0.5)
        spec = DialectSpec(
            feature_dim=feat, num_classes=classes, class_means=means,
            transitions=transitions,
            profiles=[DialectProfile(name="pure", transform=np.eye(feat),
                                     shift=np.zeros(feat), noise_scale=0.0,
                                     num_train=5, num_dev=1, num_test=1,
                                     min_len=4, max_len=6)])
        dataset = synth_generate(spec, seed=4, split="train")
        for utt in dataset:
            npt.assert_array_equal(utt.frames, means[utt.labels])

    def test_train_split_excludes_held_out(self):
        spec = default_spec()
        bundle = generate_bundle(spec, seed=5)
        assert "accent_x" not in bundle["train"].dialects()
        assert "accent_x" not in bundle["dev"].dialects()
        assert "accent_x" in bundle["test"].dialects()

    def test_manifest_reflects_imbalance(self):
        spec = default_spec()
        train = synth_generate(spec, seed=6, split="train")
        manifest = build_manifest(train)
        per = manifest.per_dialect
        assert per["native"]["utterances"] == 480
        for name in per:
            if name != "native":
                assert per[name]["utterances"] == 120
        assert per["native"]["utterances"] == 4 * per["accent_a"]["utterances"]
        assert manifest.num_utterances == 480 + 6 * 120

    def test_class_conditional_means_separate_across_dialects(self):
        # The conditioning signal is real: per class, the farthest pair of
        # dialect means sits further apart than the noise scale.
        spec = default_spec()
        test = synth_generate(spec, seed=7, split="test")
        by_dialect = {}
        for utt in test:
            store = by_dialect.setdefault(utt.dialect, {})
            for cls in range(spec.num_classes):
                rows = utt.frames[utt.labels == cls]
                if len(rows):
                    store.setdefault(cls, []).append(rows)
        for cls in range(spec.num_classes):
            means = [np.concatenate(chunks).mean(axis=0)
                     for chunks in (by_dialect[d].get(cls) for d in by_dialect)
                     if chunks]
            gaps = [np.linalg.norm(a - b) for i, a in enumerate(means) for b in means[i + 1:]]
            assert max(gaps) > spec.profiles[0].noise_scale

    def test_labels_follow_transitions(self):
        spec = default_spec()
        train = synth_generate(spec, seed=8, split="train")
        stay = moved = 0
        for utt in train:
            stay += int((utt.labels[1:] == utt.labels[:-1]).sum())
            moved += int((utt.labels[1:] != utt.labels[:-1]).sum())
        fraction = stay / (stay + moved)
        assert 0.7 < fraction < 0.8  # self-transition probability is 0.75


class TestRoundTrip:
    def test_round_trip_equality(self, tmp_path):
        spec = default_spec()
        dataset = synth_generate(spec, seed=9, split="test")
        loaded = load_dataset(file_of(tmp_path, dataset))
        assert len(loaded) == len(dataset)
        assert loaded.feature_dim == dataset.feature_dim
        assert loaded.num_classes == dataset.num_classes
        for a, b in zip(dataset, loaded):
            assert a.utt_id == b.utt_id and a.dialect == b.dialect
            npt.assert_array_equal(a.frames, b.frames)
            npt.assert_array_equal(a.labels, b.labels)

    def test_round_trip_bytes_stable(self, tmp_path):
        spec = default_spec()
        dataset = synth_generate(spec, seed=10, split="test")
        first = file_of(tmp_path, dataset, "first.txt")
        second = file_of(tmp_path, load_dataset(first), "second.txt")
        assert first.read_bytes() == second.read_bytes()

    def test_hand_written_fixture(self):
        loaded = load_dataset("tests/fixtures/tiny_dataset.txt")
        assert len(loaded) == 2
        assert loaded[0].utt_id == "native-0000" and loaded[0].dialect == "native"
        npt.assert_array_equal(loaded[0].frames, np.array([[0.5, -1.25], [2.0, 0.0]]))
        npt.assert_array_equal(loaded[0].labels, np.array([0, 1]))
        assert loaded[1].num_frames == 3

    def test_truncated_record_reports_line(self, tmp_path):
        spec = default_spec()
        path = file_of(tmp_path, synth_generate(spec, seed=11, split="test"))
        text = path.read_text().splitlines()
        # Chop the middle of line 3 so its JSON no longer parses.
        text[2] = text[2][:len(text[2]) // 2]
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(DatasetFormatError, match="line 3"):
            load_dataset(path)

    def test_missing_lines_detected_via_count(self, tmp_path):
        spec = default_spec()
        path = file_of(tmp_path, synth_generate(spec, seed=12, split="test"))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(DatasetFormatError, match="promises"):
            load_dataset(path)

    def test_non_finite_feature_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(
            '{"count": 1, "feature_dim": 2, "format": "dialectam-utterances-v1", "num_classes": 2}\n'
            '{"dialect": "native", "frames": [[1.0, NaN]], "id": "u0", "labels": [0]}\n')
        with pytest.raises(DatasetFormatError, match="line 2.*non-finite"):
            load_dataset(path)

    def test_label_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(
            '{"count": 1, "feature_dim": 2, "format": "dialectam-utterances-v1", "num_classes": 2}\n'
            '{"dialect": "native", "frames": [[1.0, 2.0]], "id": "u0", "labels": [5]}\n')
        with pytest.raises(DatasetFormatError, match="line 2.*label out of range"):
            load_dataset(path)

    def test_wrong_format_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text('{"format": "something-else"}\n')
        with pytest.raises(DatasetFormatError, match="line 1"):
            load_dataset(path)


class TestBatchIterator:
    def tiny_dataset(self):
        utts = [Utterance(utt_id=f"u{i}", dialect="native",
                          frames=np.full((t, 2), float(i)), labels=np.zeros(t, dtype=np.int64))
                for i, t in enumerate([3, 5, 2, 4, 4, 1, 2, 3, 5, 2])]
        return Dataset(utts, feature_dim=2, num_classes=1)

    def test_padding_contract(self):
        utts = [Utterance(utt_id="a", dialect="x", frames=np.ones((3, 2)),
                          labels=np.zeros(3, dtype=np.int64)),
                Utterance(utt_id="b", dialect="y", frames=np.ones((5, 2)),
                          labels=np.zeros(5, dtype=np.int64))]
        dataset = Dataset(utts, feature_dim=2, num_classes=1)
        batch = next(batch_iterator(dataset, 2))
        assert batch.frames.shape == (2, 5, 2)
        npt.assert_array_equal(batch.mask[0], [1, 1, 1, 0, 0])
        npt.assert_array_equal(batch.frames[0, 3:], np.zeros((2, 2)))
        npt.assert_array_equal(batch.labels[0, 3:], [-1, -1])
        assert batch.dialects == ["x", "y"]

    def test_batch_sizes(self):
        sizes = [b.size for b in batch_iterator(self.tiny_dataset(), 4)]
        assert sizes == [4, 4, 2]

    def test_no_shuffle_keeps_order(self):
        ids = [i for b in batch_iterator(self.tiny_dataset(), 3) for i in b.indices]
        assert ids == list(range(10))

    def test_shuffle_is_seeded(self):
        a = [i for b in batch_iterator(self.tiny_dataset(), 3, seed=5, shuffle=True)
             for i in b.indices]
        b = [i for b2 in batch_iterator(self.tiny_dataset(), 3, seed=5, shuffle=True)
             for i in b2.indices]
        c = [i for b3 in batch_iterator(self.tiny_dataset(), 3, seed=6, shuffle=True)
             for i in b3.indices]
        assert a == b and a != c and sorted(a) == list(range(10))

    def test_dialect_overrides(self):
        overrides = [f"d{i}" for i in range(10)]
        batch = next(batch_iterator(self.tiny_dataset(), 3, dialect_overrides=overrides))
        assert batch.dialects == ["d0", "d1", "d2"]

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            next(batch_iterator(self.tiny_dataset(), 0))
