import numpy as np
import pytest

from leona import crf
from leona.annotators import FallbackProvider
from leona.corpus import SlotType, TrainingExample, Utterance
from leona.network import (
    ForwardResult,
    ModelConfig,
    ModelParams,
    attend,
    build_features,
    contextualize,
    embed,
    encode,
    forward_loss,
    forward_pass,
    load_checkpoint,
    predict_emissions,
    prepare_inputs,
    save_checkpoint,
    similarity_matrix,
    step_two_emissions,
)
from leona.tensor import Tape, Tensor

from conftest import max_rel_err

BOOKING_TOKENS = tuple(
    "I would like to book a table at 8 Immortals Restaurant in San Francisco".split()
)
BOOKING_LABELS = tuple(
    "O O O O O O O O B-restaurant_name I-restaurant_name I-restaurant_name O B-city I-city".split()
)


def tiny_config(**overrides):
    base = dict(
        pos_dim=6,
        ner_dim=6,
        ctx_dim=10,
        fused_dim=8,
        lstm_hidden=4,
        iob_feed_dim=5,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def toy():
    config = tiny_config()
    params = ModelParams(config, seed=7)
    provider = FallbackProvider(ctx_dim=config.ctx_dim, seed=3)
    utt = Utterance(
        id="t1",
        domain="dining",
        intent="book",
        tokens=("book", "eatery", "Golden", "Fork"),
        labels=("O", "O", "B-eatery_name", "I-eatery_name"),
    )
    slot = SlotType("eatery_name", ("eatery", "name"), frozenset({"dining"}))
    inputs = prepare_inputs(utt, slot, provider, config)
    example = TrainingExample(
        utterance_id="t1",
        slot_type=slot,
        y_indep=("O", "O", "B", "I"),
        y_slot=("O", "O", "B", "I"),
        polarity="positive",
    )
    return config, params, provider, utt, slot, inputs, example


class TestEmbed:
    def test_full_scale_output_shape(self):
        config = ModelConfig()
        params = ModelParams(config, seed=0)
        provider = FallbackProvider(ctx_dim=config.ctx_dim)
        pos, ner, vectors = provider.annotate_tokens(list(BOOKING_TOKENS))
        feats = build_features(BOOKING_TOKENS, pos, ner, vectors, config)
        out = embed(feats, params, config)
        assert out.shape == (400, 14)

    def test_closed_gates_carry_projection_input(self, toy):
        config, params, provider, utt, slot, inputs, _ = toy
        for i in (1, 2):
            params[f"hw{i}_gate_w"].data[:] = 0.0
            params[f"hw{i}_gate_b"].data[:] = -20.0
        out = embed(inputs.utt, params, config)
        pos_e = params["pos_table"].data @ inputs.utt.pos
        ner_e = params["ner_table"].data @ inputs.utt.ner
        stack = np.concatenate([pos_e, ner_e, inputs.utt.ctx], axis=0)
        projected = params["fuse_w"].data @ stack + params["fuse_b"].data
        assert np.abs(out.data - projected).max() < 1e-6

    def test_hash_feature_fallback_mode(self):
        config = tiny_config(use_pretrained_features=False)
        params = ModelParams(config, seed=1)
        provider = FallbackProvider(ctx_dim=config.ctx_dim)
        utt = Utterance(id="u", domain="d", intent="i", tokens=("play", "Nova"), labels=("O", "B-x"))
        inputs = prepare_inputs(utt, SlotType("x", ("x",), frozenset()), provider, config)
        assert not inputs.utt.onehot
        assert inputs.utt.pos.shape == (config.pos_dim, 2)
        out = embed(inputs.utt, params, config)
        assert out.shape == (config.fused_dim, 2)

    def test_unknown_tags_map_to_unk_not_error(self, toy):
        config, params, _, utt, _, _, _ = toy
        vectors = np.zeros((2, config.ctx_dim))
        feats = build_features(("a", "b"), ("NOT_A_TAG", "VERB"), ("O", "O"), vectors, config)
        assert feats.pos[0, 0] == 1.0  # UNK row
        out = embed(feats, params, config)
        assert out.shape == (config.fused_dim, 2)

    def test_length_mismatch_rejected(self, toy):
        config = toy[0]
        with pytest.raises(ValueError, match="misaligned"):
            build_features(("a", "b"), ("VERB",), ("O", "O"), np.zeros((2, config.ctx_dim)), config)


class TestEncode:
    def test_output_shape(self, toy):
        config, params, _, _, _, inputs, _ = toy
        h = encode(embed(inputs.utt, params, config), params, config)
        assert h.shape == (2 * config.lstm_hidden, 4)

    def test_single_position_boundary(self, toy):
        config, params = toy[0], toy[1]
        x = Tensor(np.random.default_rng(0).normal(size=(config.fused_dim, 1)))
        h = encode(x, params, config)
        assert h.shape == (2 * config.lstm_hidden, 1)

    def test_reversal_swaps_directional_halves_with_tied_weights(self, toy):
        config, params = toy[0], toy[1]
        lam = config.lstm_hidden
        params["enc_b_w"].data = params["enc_f_w"].data.copy()
        params["enc_b_b"].data = params["enc_f_b"].data.copy()
        x = np.random.default_rng(1).normal(size=(config.fused_dim, 5))
        h = encode(Tensor(x), params, config).data
        h_rev = encode(Tensor(x[:, ::-1].copy()), params, config).data
        np.testing.assert_allclose(h_rev[:lam], h[lam:, ::-1], atol=1e-12)
        np.testing.assert_allclose(h_rev[lam:], h[:lam, ::-1], atol=1e-12)

    def test_unshared_description_encoder(self):
        config = tiny_config(share_encoders=False)
        params = ModelParams(config, seed=2)
        x = Tensor(np.random.default_rng(0).normal(size=(config.fused_dim, 3)))
        h_utt = encode(x, params, config, side="utterance")
        h_desc = encode(x, params, config, side="description")
        assert not np.allclose(h_utt.data, h_desc.data)


class TestStepTwoHead:
    def test_shape(self, toy):
        config, params, _, _, _, inputs, _ = toy
        h = encode(embed(inputs.utt, params, config), params, config)
        assert step_two_emissions(h, params).shape == (4, 3)

    def test_zero_weights_give_uniform_emissions(self, toy):
        config, params, _, _, _, inputs, _ = toy
        params["step2_w"].data[:] = 0.0
        params["step2_b"].data[:] = 0.0
        h = encode(embed(inputs.utt, params, config), params, config)
        em = step_two_emissions(h, params)
        np.testing.assert_array_equal(em.data, np.zeros((4, 3)))
        # uniform scores decode under the documented lower-index tie rule
        path, _ = crf.viterbi(em.data, params.step2_crf)
        assert path == [crf.TAG_TO_ID["B"]] * 4


class TestSimilarity:
    def test_zero_weight_gives_zero_matrix(self, toy):
        config, params = toy[0], toy[1]
        lam = config.lstm_hidden
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(2 * lam, 5)))
        u = Tensor(rng.normal(size=(2 * lam, 3)))
        a = similarity_matrix(h, u, Tensor(np.zeros((6 * lam, 1))))
        np.testing.assert_array_equal(a.data, np.zeros((5, 3)))

    def test_hand_computed_value(self):
        h = Tensor(np.array([[1.0], [2.0]]))
        u = Tensor(np.array([[3.0], [4.0]]))
        w = Tensor(np.ones((6, 1)))
        a = similarity_matrix(h, u, w)
        assert a.shape == (1, 1)
        assert abs(a.item() - 21.0) < 1e-12

    def test_shape_for_14_token_utterance(self):
        lam = 300
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(2 * lam, 14)))
        u = Tensor(rng.normal(size=(2 * lam, 2)))
        a = similarity_matrix(h, u, Tensor(rng.normal(size=(6 * lam, 1))))
        assert a.shape == (14, 2)

    def test_matches_direct_evaluation(self, toy):
        config = toy[0]
        lam = config.lstm_hidden
        rng = np.random.default_rng(5)
        h0 = rng.normal(size=(2 * lam, 4))
        u0 = rng.normal(size=(2 * lam, 3))
        w0 = rng.normal(size=(6 * lam, 1))
        a = similarity_matrix(Tensor(h0), Tensor(u0), Tensor(w0)).data
        for j in range(4):
            for k in range(3):
                feats = np.concatenate([h0[:, j], u0[:, k], h0[:, j] * u0[:, k]])
                assert abs(a[j, k] - w0[:, 0] @ feats) < 1e-10

    def test_dimension_mismatch(self, toy):
        config = toy[0]
        lam = config.lstm_hidden
        with pytest.raises(ValueError, match="dims disagree"):
            similarity_matrix(
                Tensor(np.zeros((2 * lam, 3))),
                Tensor(np.zeros((2 * lam + 1, 2))),
                Tensor(np.zeros((6 * lam, 1))),
            )


class TestAttend:
    def test_single_description_word_degenerate(self):
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(8, 5)))
        u = Tensor(rng.normal(size=(8, 1)))
        a = Tensor(rng.normal(size=(5, 1)))
        g = attend(a, h, u).data
        for j in range(5):
            np.testing.assert_allclose(g[:8, j], u.data[:, 0])

    def test_tiled_half_has_identical_columns(self):
        rng = np.random.default_rng(1)
        g = attend(
            Tensor(rng.normal(size=(4, 3))),
            Tensor(rng.normal(size=(6, 4))),
            Tensor(rng.normal(size=(6, 3))),
        ).data
        tiled = g[6:]
        for j in range(1, 4):
            np.testing.assert_array_equal(tiled[:, j], tiled[:, 0])

    def test_full_scale_output_shape(self):
        lam = 300
        rng = np.random.default_rng(2)
        g = attend(
            Tensor(rng.normal(size=(9, 2))),
            Tensor(rng.normal(size=(2 * lam, 9))),
            Tensor(rng.normal(size=(2 * lam, 2))),
        )
        assert g.shape == (4 * lam, 9)

    def test_permutation_covariant_in_description_positions(self):
        rng = np.random.default_rng(3)
        a0 = rng.normal(size=(5, 4))
        u0 = rng.normal(size=(6, 4))
        h0 = rng.normal(size=(6, 5))
        perm = [2, 0, 3, 1]
        g = attend(Tensor(a0), Tensor(h0), Tensor(u0)).data
        g_perm = attend(Tensor(a0[:, perm]), Tensor(h0), Tensor(u0[:, perm])).data
        np.testing.assert_allclose(g, g_perm, atol=1e-12)


class TestContextualize:
    def test_output_shape(self, toy):
        config, params = toy[0], toy[1]
        lam = config.lstm_hidden
        rng = np.random.default_rng(0)
        c = contextualize(
            Tensor(rng.normal(size=(2 * lam, 6))),
            Tensor(rng.normal(size=(4 * lam, 6))),
            [2, 2, 0, 1, 2, 2],
            params,
            config,
        )
        assert c.shape == (2 * lam, 6)

    def test_disabled_iob_feed_ignores_tags(self, toy):
        config = tiny_config(use_iob_feed=False)
        params = ModelParams(config, seed=4)
        lam = config.lstm_hidden
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(2 * lam, 4)))
        g = Tensor(rng.normal(size=(4 * lam, 4)))
        c1 = contextualize(h, g, [2, 2, 2, 2], params, config)
        c2 = contextualize(h, g, [0, 1, 0, 1], params, config)
        np.testing.assert_array_equal(c1.data, c2.data)

    def test_tag_change_propagates_to_all_positions(self, toy):
        config, params = toy[0], toy[1]
        lam = config.lstm_hidden
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(2 * lam, 5)))
        g = Tensor(rng.normal(size=(4 * lam, 5)))
        c1 = contextualize(h, g, [2, 2, 2, 2, 2], params, config).data
        c2 = contextualize(h, g, [2, 2, 0, 2, 2], params, config).data
        for j in range(5):
            assert np.abs(c1[:, j] - c2[:, j]).max() > 0

    def test_tag_count_mismatch(self, toy):
        config, params = toy[0], toy[1]
        lam = config.lstm_hidden
        with pytest.raises(ValueError, match="IOB tags"):
            contextualize(
                Tensor(np.zeros((2 * lam, 3))),
                Tensor(np.zeros((4 * lam, 3))),
                [2, 2],
                params,
                config,
            )


class TestPredictionHead:
    def test_shape(self, toy):
        config, params = toy[0], toy[1]
        c = Tensor(np.random.default_rng(0).normal(size=(2 * config.lstm_hidden, 7)))
        assert predict_emissions(c, params).shape == (7, 3)

    def test_zero_weights_give_constant_emissions(self, toy):
        config, params = toy[0], toy[1]
        for name in ("pred1_w", "pred1_b", "pred2_w", "pred2_b", "pred3_w"):
            params[name].data[:] = 0.0
        params["pred3_b"].data[:] = np.array([[0.3], [0.1], [0.5]])
        c = Tensor(np.random.default_rng(0).normal(size=(2 * config.lstm_hidden, 4)))
        em = predict_emissions(c, params).data
        np.testing.assert_allclose(em, np.tile([0.3, 0.1, 0.5], (4, 1)))


class TestForward:
    def test_loss_positive_at_random_init(self, toy):
        config, params, _, _, _, inputs, example = toy
        loss = forward_loss(example, inputs, params, config)
        assert loss.item() > 0

    def test_inference_mode_uses_decoded_tags(self, toy):
        config, params, _, _, _, inputs, _ = toy
        result = forward_pass(inputs, params, config, training=False)
        assert isinstance(result, ForwardResult)
        assert len(result.iob_feed) == 4
        decoded, _ = crf.viterbi(result.step2_emissions.data, params.step2_crf)
        assert result.iob_feed == decoded

    def test_training_requires_teacher_tags(self, toy):
        config, params, _, _, _, inputs, _ = toy
        with pytest.raises(ValueError, match="gold"):
            forward_pass(inputs, params, config, training=True, rng=np.random.default_rng(0))

    def test_dropout_changes_training_forward_only(self, toy):
        config0, params, _, utt, slot, _, example = toy
        config = tiny_config(dropout=0.4)
        provider = FallbackProvider(ctx_dim=config.ctx_dim, seed=3)
        inputs = prepare_inputs(utt, slot, provider, config)
        gold = [2, 2, 0, 1]
        r1 = forward_pass(inputs, params, config, training=True,
                          rng=np.random.default_rng(1), teacher_iob=gold)
        r2 = forward_pass(inputs, params, config, training=True,
                          rng=np.random.default_rng(2), teacher_iob=gold)
        assert not np.allclose(r1.pred_emissions.data, r2.pred_emissions.data)
        e1 = forward_pass(inputs, params, config, training=False)
        e2 = forward_pass(inputs, params, config, training=False)
        np.testing.assert_array_equal(e1.pred_emissions.data, e2.pred_emissions.data)

    def test_ablated_configuration_still_trains(self):
        config = tiny_config(use_pretrained_features=False, use_iob_feed=False)
        params = ModelParams(config, seed=9)
        provider = FallbackProvider(ctx_dim=config.ctx_dim)
        utt = Utterance(
            id="u", domain="d", intent="i",
            tokens=("find", "museum", "Grand", "Hall"),
            labels=("O", "O", "B-museum_name", "I-museum_name"),
        )
        slot = SlotType("museum_name", ("museum", "name"), frozenset())
        inputs = prepare_inputs(utt, slot, provider, config)
        example = TrainingExample("u", slot, ("O", "O", "B", "I"), ("O", "O", "B", "I"), "positive")
        with Tape() as tape:
            loss = forward_loss(example, inputs, params, config)
        grads = tape.backward(loss)
        w_a_grad = grads[params["w_a"]]
        assert np.abs(w_a_grad).max() > 0

    def test_w_a_gradient_matches_finite_differences(self, toy):
        config, params, _, _, _, inputs, example = toy

        def loss_value():
            return forward_loss(example, inputs, params, config).item()

        with Tape() as tape:
            loss = forward_loss(example, inputs, params, config)
        g = tape.backward(loss)[params["w_a"]]

        fd = np.zeros_like(params["w_a"].data)
        h = 1e-5
        for idx in np.ndindex(fd.shape):
            orig = params["w_a"].data[idx]
            params["w_a"].data[idx] = orig + h
            hi = loss_value()
            params["w_a"].data[idx] = orig - h
            lo = loss_value()
            params["w_a"].data[idx] = orig
            fd[idx] = (hi - lo) / (2 * h)
        assert max_rel_err(g, fd, floor=1e-4) < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, toy):
        config, params = toy[0], toy[1]
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, seeds={"train": 11})
        loaded, loaded_config, seeds = load_checkpoint(path)
        assert loaded_config == config
        assert seeds == {"train": 11}
        for name, t in params.named().items():
            assert np.array_equal(loaded[name].data, t.data), name

    def test_shape_mismatch_detected(self, tmp_path, toy):
        import json

        config, params = toy[0], toy[1]
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        payload = json.loads(path.read_text())
        payload["params"]["w_a"]["shape"] = [1, 1]
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="w_a"):
            load_checkpoint(path)

    def test_missing_parameter_detected(self, tmp_path, toy):
        import json

        config, params = toy[0], toy[1]
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        payload = json.loads(path.read_text())
        del payload["params"]["w_a"]
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="missing"):
            load_checkpoint(path)
