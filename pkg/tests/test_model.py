import numpy as np
import numpy.testing as npt
import pytest

from dialectam.conditioning import DialectVocabulary
from dialectam.data import Batch
from dialectam.diagnostics import toy_batch, toy_model, toy_vocabulary
from dialectam.model import (
    ConfigError,
    ModelConfig,
    ModelFormatError,
    build_model,
    count_params,
    forward,
    load_model,
    loss_and_grads,
    model_bytes,
    save_model,
    softmax_cross_entropy,
    variant_config,
)
from dialectam.numerics import Rng

VOCAB = DialectVocabulary.of(["alpha", "bravo", "charlie"])


def small_config(variant="M1", vocab=VOCAB, **overrides):
    kwargs = dict(input_dim=3, num_classes=3, hidden=4, num_layers=2,
                  lookahead_tau=1, repr_units=6, combiner_units=5)
    kwargs.update(overrides)
    return variant_config(variant, vocab, **kwargs)


def small_batch(seed=0, batch=2, t_max=5, feat=3, classes=3, dialects=("alpha", "bravo")):
    rng = Rng(seed)
    frames = np.zeros((batch, t_max, feat))
    mask = np.ones((batch, t_max))
    labels = rng.integers(0, classes, (batch, t_max))
    frames[...] = rng.normal(0, 1, (batch, t_max, feat))
    mask[-1, t_max - 1:] = 0.0
    labels = np.where(mask > 0, labels, -1)
    frames *= mask[:, :, None]
    return Batch(frames=frames, mask=mask, labels=labels,
                 dialects=list(dialects)[:batch], indices=list(range(batch)))


class TestModelConfig:
    def test_source_position_must_match(self):
        cfg = ModelConfig(num_layers=1, hidden=2, input_dim=2, num_classes=2,
                          vocabulary=VOCAB, cond_source="external", cond_position="none")
        with pytest.raises(ConfigError, match="together"):
            cfg.validate()

    def test_unknown_prob_needs_unknown_entry(self):
        cfg = ModelConfig(num_layers=1, hidden=2, input_dim=2, num_classes=2,
                          vocabulary=VOCAB, unknown_prob=0.1)
        with pytest.raises(ConfigError, match="unknown"):
            cfg.validate()

    def test_variant_table(self):
        expectations = {
            "M1": ("none", "none", False),
            "M3": ("none", "none", True),
            "M4": ("external", "input", False),
            "M5": ("internal", "input", False),
            "M6": ("both", "input", False),
            "M7": ("external", "output", False),
            "M8": ("internal", "output", False),
            "M9": ("both", "output", False),
        }
        for variant, (src, pos, aware) in expectations.items():
            cfg = small_config(variant)
            assert (cfg.cond_source, cfg.cond_position, cfg.dialect_aware_input) == (src, pos, aware)
            assert cfg.unknown_prob == 0.0
        m10 = small_config("M10", vocab=toy_vocabulary(include_unknown=True))
        assert (m10.cond_source, m10.cond_position) == ("both", "output")
        assert m10.unknown_prob == 0.1

    def test_m10_requires_unknown_vocab(self):
        with pytest.raises(ConfigError, match="unknown"):
            small_config("M10")

    def test_unknown_variant_name(self):
        with pytest.raises(ConfigError, match="M11"):
            small_config("M11")

    def test_aware_input_width(self):
        vocab = DialectVocabulary.of([f"d{i}" for i in range(7)])
        cfg = variant_config("M3", vocab, input_dim=80, num_classes=10, hidden=8, num_layers=2)
        assert cfg.layer_input_width(1) == 87
        assert cfg.layer_input_width(2) == 8


class TestBuildModel:
    def test_deterministic(self):
        cfg = small_config("M9")
        a = build_model(cfg, seed=3)
        b = build_model(cfg, seed=3)
        assert model_bytes(a) == model_bytes(b)

    def test_seed_changes_weights(self):
        cfg = small_config("M1")
        a = build_model(cfg, seed=1)
        b = build_model(cfg, seed=2)
        assert model_bytes(a) != model_bytes(b)

    def test_forget_gate_bias(self):
        model = build_model(small_config("M1"), seed=0)
        b = model.params.value("layer1.b")
        hidden = model.config.hidden
        npt.assert_array_equal(b[hidden:2 * hidden], np.ones(hidden))
        npt.assert_array_equal(b[:hidden], np.zeros(hidden))

    def test_film_widths_at_paper_scale(self):
        vocab = DialectVocabulary.of([f"d{i}" for i in range(7)])
        out_pos = variant_config("M9", vocab, input_dim=80, num_classes=100,
                                 hidden=640, num_layers=4)
        in_pos = variant_config("M6", vocab, input_dim=80, num_classes=100,
                                hidden=640, num_layers=4)
        assert out_pos.film_width == 640
        assert in_pos.film_width == 2560


class TestCountParams:
    def test_hand_counted_baseline(self):
        # 1 layer, F=2, H=3, tau=1, C=2: LSTM 24+36+12, BN 24, lookahead 6,
        # softmax 8 -> 110 total.
        vocab = DialectVocabulary.of(["a", "b"])
        cfg = variant_config("M1", vocab, input_dim=2, num_classes=2, hidden=3,
                             num_layers=1, lookahead_tau=1)
        assert count_params(cfg) == 110

    def test_matches_built_store(self):
        for variant in ("M1", "M3", "M4", "M5", "M6", "M7", "M8", "M9"):
            cfg = small_config(variant)
            model = build_model(cfg, seed=0)
            assert model.params.num_values() == count_params(cfg)

    def test_input_head_is_four_times_output_head(self):
        for in_variant, out_variant in (("M4", "M7"), ("M5", "M8"), ("M6", "M9")):
            cfg_in = small_config(in_variant)
            cfg_out = small_config(out_variant)
            assert cfg_in.film_width == 4 * cfg_out.film_width
            # The count difference is exactly the head-size difference:
            # two heads (gamma, beta), each (M + 1) * 3 * H per layer.
            expected = 2 * 3 * cfg_in.hidden * cfg_in.num_layers * (cfg_in.combiner_units + 1)
            assert count_params(cfg_in) - count_params(cfg_out) == expected

    def test_paper_scale_size_ordering(self):
        vocab = DialectVocabulary.of([f"d{i}" for i in range(7)])
        kwargs = dict(input_dim=80, num_classes=5000, hidden=640, num_layers=4)
        m1 = count_params(variant_config("M1", vocab, **kwargs))
        m4 = count_params(variant_config("M4", vocab, **kwargs))
        m7 = count_params(variant_config("M7", vocab, **kwargs))
        assert m4 > m7 > m1


class TestForward:
    def test_softmax_rows_sum_to_one(self):
        model = toy_model("M9", seed=1)
        batch = toy_batch(seed=1)
        result = forward(model, batch, mode="infer")
        probs = np.exp(result.logits - result.logits.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        npt.assert_allclose(probs.sum(axis=-1), np.ones(batch.mask.shape), atol=1e-12)

    def test_identity_override_matches_unconditioned(self):
        # Same layer weights, generated modulation forced to gamma=1, beta=0.
        batch = toy_batch(seed=2)
        for variant in ("M4", "M5", "M6", "M7", "M8", "M9"):
            conditioned = toy_model(variant, seed=2)
            baseline = build_model(small_config("M1"), seed=2)
            for name in baseline.params.names():
                baseline.params.value(name)[...] = conditioned.params.value(name)
            got = forward(conditioned, batch, mode="infer", film_override="identity").logits
            want = forward(baseline, batch, mode="infer").logits
            npt.assert_allclose(got, want, rtol=0, atol=1e-12), variant

    def test_internal_and_combined_identity_at_init(self):
        # Fresh init has gamma = 1 exactly (zero head weights, unit bias).
        batch = toy_batch(seed=3)
        for variant in ("M5", "M6", "M8", "M9"):
            conditioned = build_model(small_config(variant), seed=3)
            baseline = build_model(small_config("M1"), seed=3)
            for name in baseline.params.names():
                baseline.params.value(name)[...] = conditioned.params.value(name)
            got = forward(conditioned, batch, mode="infer").logits
            want = forward(baseline, batch, mode="infer").logits
            npt.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_external_near_identity_at_init(self):
        batch = toy_batch(seed=4)
        for variant in ("M4", "M7"):
            conditioned = build_model(small_config(variant), seed=4)
            baseline = build_model(small_config("M1"), seed=4)
            for name in baseline.params.names():
                baseline.params.value(name)[...] = conditioned.params.value(name)
            got = forward(conditioned, batch, mode="infer").logits
            want = forward(baseline, batch, mode="infer").logits
            assert np.abs(got - want).max() < 0.3

    def test_external_logits_independent_of_batch_members(self):
        model = toy_model("M7", seed=5)
        rng = Rng(5)
        frames = rng.normal(0, 1, (1, 4, 3))
        solo = Batch(frames=frames, mask=np.ones((1, 4)),
                     labels=np.zeros((1, 4), dtype=np.int64),
                     dialects=["bravo"], indices=[0])
        other = rng.normal(0, 1, (1, 6, 3))
        joint_frames = np.zeros((2, 6, 3))
        joint_frames[0, :4] = frames[0]
        joint_frames[1] = other[0]
        mask = np.zeros((2, 6))
        mask[0, :4] = 1.0
        mask[1] = 1.0
        joint = Batch(frames=joint_frames, mask=mask,
                      labels=np.zeros((2, 6), dtype=np.int64),
                      dialects=["bravo", "alpha"], indices=[0, 1])
        solo_logits = forward(model, solo, mode="infer").logits
        joint_logits = forward(model, joint, mode="infer").logits
        npt.assert_allclose(joint_logits[0, :4], solo_logits[0], rtol=0, atol=1e-12)

    def test_two_pass_causality(self):
        # gamma of layer l depends only on layers below l.
        model = toy_model("M9", seed=6)
        batch = toy_batch(seed=6)
        base_film = forward(model, batch, mode="infer").film
        for name in ("layer2.w_x", "layer2.w_h", "layer2.b", "cond2.gamma_w"):
            model.params.value(name)[...] += 0.5
        bumped_film = forward(model, batch, mode="infer").film
        npt.assert_array_equal(bumped_film[0][0], base_film[0][0])
        npt.assert_array_equal(bumped_film[0][1], base_film[0][1])

    def test_missing_dialect_labels_rejected(self):
        model = toy_model("M9", seed=7)
        batch = toy_batch(seed=7)
        batch.dialects = None
        with pytest.raises(ConfigError, match="dialect label"):
            forward(model, batch)

    def test_unknown_dialect_name_rejected(self):
        model = toy_model("M9", seed=8)
        batch = toy_batch(seed=8)
        batch.dialects = ["alpha", "martian"]
        with pytest.raises(KeyError, match="martian"):
            forward(model, batch)

    def test_padding_invariance_infer_mode(self):
        # Appending masked frames leaves all unpadded outputs unchanged.
        for variant in ("M1", "M3", "M9"):
            model = toy_model(variant, seed=9)
            batch = toy_batch(seed=9)
            base = forward(model, batch, mode="infer").logits
            pad = 3
            frames = np.concatenate(
                [batch.frames, np.zeros((batch.size, pad, batch.frames.shape[2]))], axis=1)
            mask = np.concatenate([batch.mask, np.zeros((batch.size, pad))], axis=1)
            labels = np.concatenate(
                [batch.labels, np.full((batch.size, pad), -1, dtype=np.int64)], axis=1)
            padded = Batch(frames=frames, mask=mask, labels=labels,
                           dialects=batch.dialects, indices=batch.indices)
            out = forward(model, padded, mode="infer").logits
            t = batch.mask.shape[1]
            npt.assert_allclose(out[:, :t][batch.mask > 0], base[batch.mask > 0],
                                rtol=0, atol=1e-10)

    def test_tiny_unconditioned_forward_matches_straight_line_oracle(self):
        # 2-frame, 2-class, 1-layer model evaluated scalar by scalar.
        vocab = DialectVocabulary.of(["a"])
        cfg = variant_config("M1", vocab, input_dim=2, num_classes=2, hidden=2,
                             num_layers=1, lookahead_tau=1)
        model = build_model(cfg, seed=10)
        rng = Rng(10)
        for name in model.params.names():
            model.params.value(name)[...] += rng.uniform(-0.3, 0.3, model.params.value(name).shape)
        state = model.bn_states[0]
        state.running_mean[...] = rng.normal(0, 0.2, 8)
        state.running_var[...] = rng.uniform(0.5, 1.5, 8)
        frames = rng.normal(0, 1, (1, 2, 2))
        batch = Batch(frames=frames, mask=np.ones((1, 2)),
                      labels=np.zeros((1, 2), dtype=np.int64), dialects=["a"], indices=[0])
        logits = forward(model, batch, mode="infer").logits[0]

        p = model.params
        w_x, w_h, b = p.value("layer1.w_x"), p.value("layer1.w_h"), p.value("layer1.b")
        bn_g, bn_b = p.value("layer1.bn_gamma"), p.value("layer1.bn_beta")
        la = p.value("layer1.lookahead")
        sm_w, sm_b = p.value("softmax.w"), p.value("softmax.b")

        def bn(val, k):
            return bn_g[k] * (val - state.running_mean[k]) / np.sqrt(
                state.running_var[k] + state.epsilon) + bn_b[k]

        h_prev = np.zeros(2)
        c_prev = np.zeros(2)
        hiddens = np.zeros((2, 2))
        for t in range(2):
            z = np.zeros(8)
            for k in range(8):
                acc = 0.0
                for i in range(2):
                    acc += frames[0, t, i] * w_x[i, k]
                z[k] = bn(acc, k) + b[k]
                for j in range(2):
                    z[k] += h_prev[j] * w_h[j, k]
            h_new = np.zeros(2)
            c_new = np.zeros(2)
            for j in range(2):
                i_g = 1.0 / (1.0 + np.exp(-z[j]))
                f_g = 1.0 / (1.0 + np.exp(-z[2 + j]))
                g_g = np.tanh(z[4 + j])
                o_g = 1.0 / (1.0 + np.exp(-z[6 + j]))
                c_new[j] = f_g * c_prev[j] + i_g * g_g
                h_new[j] = o_g * np.tanh(c_new[j])
            hiddens[t] = h_new
            h_prev, c_prev = h_new, c_new
        looked = np.zeros((2, 2))
        for t in range(2):
            for k in range(2):
                for j in range(2):
                    if t + j < 2:
                        looked[t, k] += la[j, k] * hiddens[t + j, k]
        expected = np.zeros((2, 2))
        for t in range(2):
            for c in range(2):
                acc = sm_b[c]
                for k in range(2):
                    acc += looked[t, k] * sm_w[k, c]
                expected[t, c] = acc
        npt.assert_allclose(logits, expected, rtol=0, atol=1e-12)


class TestLoss:
    def test_uniform_logits_give_log_c(self):
        logits = np.zeros((1, 3, 4))
        labels = np.array([[0, 1, 2]])
        mask = np.ones((1, 3))
        loss, _ = softmax_cross_entropy(logits, labels, mask)
        npt.assert_allclose(loss, np.log(4.0), rtol=0, atol=1e-12)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        logits = np.full((1, 2, 3), -50.0)
        logits[0, 0, 1] = 50.0
        logits[0, 1, 2] = 50.0
        labels = np.array([[1, 2]])
        loss, _ = softmax_cross_entropy(logits, labels, np.ones((1, 2)))
        assert loss < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            softmax_cross_entropy(np.zeros((1, 1, 2)), np.array([[5]]), np.ones((1, 1)))

    def test_padded_labels_ignored(self):
        logits = Rng(11).normal(0, 1, (1, 3, 2))
        labels = np.array([[1, -1, -1]])
        mask = np.array([[1.0, 0.0, 0.0]])
        loss, dlogits = softmax_cross_entropy(logits, labels, mask)
        assert np.isfinite(loss)
        npt.assert_array_equal(dlogits[0, 1:], np.zeros((2, 2)))

    def test_gradient_sums_to_zero_per_frame(self):
        logits = Rng(12).normal(0, 1, (2, 3, 4))
        labels = np.zeros((2, 3), dtype=np.int64)
        mask = np.ones((2, 3))
        _, dlogits = softmax_cross_entropy(logits, labels, mask)
        npt.assert_allclose(dlogits.sum(axis=-1), np.zeros((2, 3)), atol=1e-15)


class TestSerialization:
    def test_round_trip_bytes_and_forward(self, tmp_path):
        model = toy_model("M9", seed=13)
        batch = toy_batch(seed=13)
        # Nudge the running stats away from the fresh values first.
        loss_and_grads(model, batch)
        before = forward(model, batch, mode="infer").logits
        path = tmp_path / "model.bin"
        save_model(model, path)
        loaded = load_model(path)
        save_model(loaded, tmp_path / "again.bin")
        assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()
        after = forward(loaded, batch, mode="infer").logits
        npt.assert_array_equal(before, after)
        assert loaded.config.to_dict() == model.config.to_dict()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTAMODELATALL")
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = toy_model("M1", seed=14)
        path = tmp_path / "model.bin"
        save_model(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(ModelFormatError, match="truncated"):
            load_model(path)

    def test_non_finite_tensor_rejected(self, tmp_path):
        model = toy_model("M1", seed=15)
        model.params.value("softmax.b")[0] = np.nan
        path = tmp_path / "model.bin"
        save_model(model, path)
        with pytest.raises(ModelFormatError, match="non-finite"):
            load_model(path)

    def test_negative_running_var_rejected(self, tmp_path):
        model = toy_model("M1", seed=16)
        model.bn_states[0].running_var[0] = -0.5
        path = tmp_path / "model.bin"
        save_model(model, path)
        with pytest.raises(ModelFormatError, match="negative running variance"):
            load_model(path)
