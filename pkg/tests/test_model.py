import json

import numpy as np
import pytest

from errors import CheckpointError, ConfigError, ContractError
from models.chat_template import DEFAULT_TEMPLATE, ChatTemplate, apply_chat_template
from models.reward_model import RewardModel
from models.tinylm import ModelConfig, TinyLM, generate
from models.tokenizer import BOS_ID, EOS_ID, PAD_ID, UNK_ID, detokenize, detokenize_bytes, tokenize
from numerics import Tape, grad_check
from numerics import ops


def test_tokenize_offsets_bytes():
    assert tokenize("") == []
    assert tokenize("A") == [69]
    assert detokenize(tokenize("héllo")) == "héllo"


def test_invalid_utf8_round_trips_through_bytes_only():
    raw = b"ok\xff\xfe"
    ids = tokenize(raw)
    assert detokenize_bytes(ids) == raw
    assert detokenize(ids) == "ok\ufffd\ufffd"
    assert detokenize_bytes([BOS_ID, *ids, EOS_ID, PAD_ID]) == raw


def test_tokenize_maps_out_of_vocab_bytes_to_unk():
    assert tokenize("A", vocab_size=60) == [UNK_ID]


def test_template_render_and_span():
    template = ChatTemplate(DEFAULT_TEMPLATE)
    text, (start, end) = apply_chat_template(template, "sys", "hi", "yo")
    assert text == "S:sys\nU:hi\nA:yo"
    assert text.encode()[start:end] == b"yo"


def test_template_without_response_ends_at_marker():
    text, (start, end) = ChatTemplate(DEFAULT_TEMPLATE).render("sys", "hi")
    assert text.endswith("A:")
    assert start == end == len(text.encode())


def test_template_rejects_unknown_or_missing_slots():
    with pytest.raises(ConfigError, match="unknown placeholder"):
        ChatTemplate("{user}{assistant}{tool}")
    with pytest.raises(ConfigError, match="assistant"):
        ChatTemplate("U:{user}")


def test_same_seed_same_parameters_and_different_seed_differs(tiny_config):
    a = TinyLM.init_params(tiny_config)
    b = TinyLM.init_params(tiny_config)
    c = TinyLM.init_params(ModelConfig(**{**tiny_config.to_dict(), "seed": 2}))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_parameter_count_matches_closed_form():
    V, d, L, ff, S = 256, 64, 2, 256, 128
    model = TinyLM.init_params(ModelConfig(vocab_size=V, d_model=d, n_layers=L, n_heads=4, d_ff=ff, max_seq_len=S))
    per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d)
    assert model.num_parameters() == V * d + S * d + L * per_layer + 2 * d + d * V


def test_invalid_dimensions_are_rejected():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(d_model=10, n_heads=4).validate()


def test_forward_shapes(tiny_config):
    model = TinyLM.init_params(tiny_config)
    assert model.forward([5]).shape == (1, tiny_config.vocab_size)
    assert model.forward(np.ones((3, 7), dtype=np.int64)).shape == (3, 7, tiny_config.vocab_size)


def test_forward_rejects_oversize_and_empty(tiny_config):
    model = TinyLM.init_params(tiny_config)
    with pytest.raises(ContractError):
        model.forward(list(range(5, 5 + tiny_config.max_seq_len + 1)))
    with pytest.raises(ContractError):
        model.forward([])


def test_forward_is_causal(tiny_config):
    model = TinyLM.init_params(tiny_config)
    seq = np.array([10, 20, 30, 40, 50, 60])
    changed = seq.copy()
    changed[4:] = [99, 98]
    a = model.forward(seq).data
    b = model.forward(changed).data
    np.testing.assert_array_equal(a[:4], b[:4])
    assert not np.allclose(a[4], b[4])


def test_forward_is_reproducible_across_constructions(tiny_config):
    tokens = [1, 72, 105, 33]
    a = TinyLM.init_params(tiny_config).forward(tokens).data
    b = TinyLM.init_params(tiny_config).forward(tokens).data
    np.testing.assert_array_equal(a, b)


def test_model_gradients_pass_grad_check():
    config = ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, max_seq_len=8, vocab_size=12, seed=3)
    model = TinyLM.init_params(config)
    tokens = np.array([1, 5, 7, 2])
    targets = np.array([5, 7, 2, 9])
    name = "layers.0.attn.w_qkv"
    original = model.parameters[name]

    def loss_of(w):
        model.parameters[name] = w
        return ops.neg(ops.mean(ops.gather(ops.log_softmax(model.forward(tokens)), targets)))

    try:
        assert grad_check(loss_of, original) < 1e-4
    finally:
        model.parameters[name] = original


def test_generate_greedy_and_seeded_sampling_are_reproducible(tiny_config):
    model = TinyLM.init_params(tiny_config)
    prompt = [1, 72, 105]
    assert generate(model, prompt, 0.0, 6) == generate(model, prompt, 0.0, 6)
    assert generate(model, prompt, 0.8, 6, seed=11) == generate(model, prompt, 0.8, 6, seed=11)
    out = generate(model, prompt, 0.8, 6, seed=11)
    assert 1 <= len(out) <= 6
    assert EOS_ID not in out[:-1]


def test_generate_rejects_empty_prompt(tiny_config):
    with pytest.raises(ContractError):
        generate(TinyLM.init_params(tiny_config), [], 0.0, 4)


def test_checkpoint_round_trip_is_bit_exact(tiny_config, tmp_path):
    model = TinyLM.init_params(tiny_config)
    model.save(tmp_path / "ckpt")
    loaded = TinyLM.load(tmp_path / "ckpt")
    assert loaded.config == model.config
    assert loaded.fingerprint() == model.fingerprint()
    config = json.loads((tmp_path / "ckpt" / "config.json").read_text())
    assert config["d_model"] == tiny_config.d_model


def test_corrupt_checkpoint_is_reported(tiny_config, tmp_path):
    TinyLM.init_params(tiny_config).save(tmp_path / "ckpt")
    (tmp_path / "ckpt" / "unembed.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError, match="unembed"):
        TinyLM.load(tmp_path / "ckpt")
    with pytest.raises(CheckpointError):
        TinyLM.load(tmp_path / "missing")


def test_reward_model_scores_one_scalar_per_sequence(tiny_config, tmp_path):
    rm = RewardModel.from_backbone(TinyLM.init_params(tiny_config), seed=1)
    ids = np.array([[1, 70, 71, 0], [1, 80, 81, 82]])
    mask = (ids != 0).astype(float)
    scores = rm.score(ids, mask)
    assert scores.shape == (2,)
    rm.save(tmp_path / "rm")
    np.testing.assert_array_equal(RewardModel.load(tmp_path / "rm").score(ids, mask).data, scores.data)
    TinyLM.init_params(tiny_config).save(tmp_path / "plain")
    with pytest.raises(CheckpointError):
        RewardModel.load(tmp_path / "plain")


def test_reward_model_head_receives_gradients(tiny_config):
    rm = RewardModel.from_backbone(TinyLM.init_params(tiny_config))
    ids = np.array([[1, 70, 71]])
    with Tape() as tape:
        loss = ops.sum(rm.score(ids, np.ones((1, 3))))
        (gw,) = tape.gradients(loss, [rm.head_w])
    assert np.any(gw != 0)


def test_forward_permutes_with_the_batch(tiny_config):
    model = TinyLM.init_params(tiny_config)
    ids = np.random.default_rng(4).integers(4, tiny_config.vocab_size, size=(4, 9))
    order = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(model.forward(ids[order]).data, model.forward(ids).data[order], atol=1e-12)
