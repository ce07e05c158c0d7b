import math

import numpy as np
import pytest
import torch

from conftest import narrow_config, tone
from speech_audio import MelSpectrogram, N_FRAMES, N_MELS, log_mel_spectrogram
from speech_model import (
    ConfigError, ContextOverflowError, DecodeCache, ModelConfig, ModelWeights, ShapeError, SpeechModel,
    WeightLoadError, load_weights, random_weights, save_weights, sinusoids,
)

PUBLISHED_VOCAB = 51865


@pytest.fixture(scope="module")
def tiny_states(tiny_model):
    return tiny_model.encode_audio(log_mel_spectrogram(tone(30.0)).window(0))


def test_encoder_emits_fifteen_hundred_positions(tiny_model, tiny_states):
    assert tiny_states.shape == (1500, 384)
    assert torch.isfinite(tiny_states).all()


def test_encoder_rejects_wrong_window(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.encode_audio(MelSpectrogram(np.zeros((2999, N_MELS), dtype=np.float32)))
    with pytest.raises(ShapeError):
        tiny_model.encode_audio(MelSpectrogram(np.zeros((N_FRAMES, 40), dtype=np.float32)))


def test_decoder_is_causal(tiny_model, tiny_states, vocab):
    prefix = [vocab.specials.sot, vocab.specials.languages["en"], vocab.specials.transcribe, 10, 20, 30]
    first = tiny_model.logits(prefix + [40], tiny_states)
    second = tiny_model.logits(prefix + [50], tiny_states)
    assert torch.equal(first[:-1], second[:-1])
    assert not torch.equal(first[-1], second[-1])


@pytest.mark.slow
def test_cached_decoding_matches_full_recompute(tiny_model, tiny_states, vocab):
    generator = torch.Generator().manual_seed(11)
    tokens = torch.randint(0, vocab.n_vocab, (50,), generator=generator).tolist()
    cache = tiny_model.new_cache()
    for k, token in enumerate(tokens):
        step_logits, cache = tiny_model.decode_step([token], cache, tiny_states)
        full = tiny_model.logits(tokens[:k + 1], tiny_states)[-1]
        assert torch.max(torch.abs(step_logits[0] - full)) < 1e-4
    assert cache.length == 50


def test_multi_token_prompt_then_steps(narrow_model, vocab):
    states = torch.randn(1500, 64, generator=torch.Generator().manual_seed(2))
    prompt = [vocab.specials.sot, vocab.specials.languages["de"], vocab.specials.transcribe]
    cache = narrow_model.new_cache()
    logits = narrow_model.decode_tokens(torch.tensor([prompt]), cache, states)
    assert logits.shape == (1, 3, vocab.n_vocab)
    step, cache = narrow_model.decode_step([[7]], cache, states)
    full = narrow_model.logits(prompt + [7], states)
    assert torch.max(torch.abs(step[0] - full[-1])) < 1e-4


def test_softmax_rows_sum_to_one(tiny_model, tiny_states, vocab):
    logits = tiny_model.logits([vocab.specials.sot, 5, 6, 7], tiny_states)
    sums = torch.softmax(logits.double(), dim=-1).sum(dim=-1)
    assert torch.max(torch.abs(sums - 1.0)) < 1e-5


def test_language_distribution(tiny_model, tiny_states, vocab):
    probs = tiny_model.detect_language(tiny_states, vocab.specials)
    assert len(probs) == 99 and "en" in probs
    assert sum(probs.values()) == pytest.approx(1.0, abs=1e-5)
    assert all(p >= 0 for p in probs.values())


def test_no_speech_probability(tiny_model, tiny_states, vocab):
    prompt = [vocab.specials.sot, vocab.specials.languages["en"], vocab.specials.transcribe]
    p = tiny_model.no_speech_probability(tiny_states, prompt, vocab.specials)
    assert 0.0 <= p <= 1.0
    full = torch.softmax(tiny_model.logits(prompt[:1], tiny_states)[-1].double(), dim=-1)
    assert p == pytest.approx(float(full[vocab.specials.no_speech]))


def test_context_overflow(vocab):
    config = narrow_config(vocab.n_vocab, n_text_ctx=8)
    model = SpeechModel.from_weights(config, random_weights(config, seed=1))
    states = torch.zeros(1500, 64)
    cache = model.new_cache()
    model.decode_tokens(torch.tensor([[1] * 8]), cache, states)
    with pytest.raises(ContextOverflowError):
        model.decode_step([2], cache, states)
    with pytest.raises(ContextOverflowError):
        model.logits([1] * 9, states)


def test_out_of_range_tokens(narrow_model):
    with pytest.raises(ShapeError):
        narrow_model.logits([narrow_model.n_vocab], torch.zeros(1500, 64))


@pytest.mark.parametrize("name", ["tiny", "base", "small", "medium", "large"])
def test_parameter_counts_match_published_sizes(name):
    config = ModelConfig.preset(name, vocab_size=PUBLISHED_VOCAB)
    published = ModelConfig.PUBLISHED_PARAMETERS[name]
    assert abs(config.parameter_count() - published) / published < 0.05


def test_presets_follow_standard_geometry():
    config = ModelConfig.preset("tiny", vocab_size=PUBLISHED_VOCAB)
    assert (config.n_layers, config.width, config.heads, config.head_dim) == (4, 384, 6, 64)
    with pytest.raises(ConfigError):
        ModelConfig.preset("huge", vocab_size=10)


def test_random_weights_are_seeded(vocab):
    config = narrow_config(vocab.n_vocab)
    first, second = random_weights(config, seed=3), random_weights(config, seed=3)
    assert all(torch.equal(first[name], second[name]) for name in config.tensor_shapes())
    assert not torch.equal(first["encoder.conv1.weight"], random_weights(config, seed=4)["encoder.conv1.weight"])
    assert torch.equal(first["decoder.ln.weight"], torch.ones(64))


def test_weights_round_trip(tmp_path, vocab):
    config = narrow_config(vocab.n_vocab)
    weights = random_weights(config, seed=5)
    path = str(tmp_path / "narrow.bin")
    save_weights(path, weights, config)
    loaded = load_weights(path, config)
    assert all(torch.equal(weights[name], loaded[name]) for name in config.tensor_shapes())


def test_truncated_weights_name_the_first_missing_tensor(tmp_path, vocab):
    config = narrow_config(vocab.n_vocab)
    path = tmp_path / "narrow.bin"
    save_weights(str(path), random_weights(config), config)
    payload = path.read_bytes()
    (tmp_path / "cut.bin").write_bytes(payload[:len(payload) // 2])
    with pytest.raises(WeightLoadError, match="missing tensor"):
        load_weights(str(tmp_path / "cut.bin"), config)


def test_weight_load_errors(tmp_path, vocab):
    config = narrow_config(vocab.n_vocab)
    bad_magic = tmp_path / "bad.bin"
    bad_magic.write_bytes(b"NOTWEIGHTS")
    with pytest.raises(WeightLoadError):
        load_weights(str(bad_magic), config)
    with pytest.raises(WeightLoadError):
        load_weights(str(tmp_path / "missing.bin"), config)

    path = str(tmp_path / "narrow.bin")
    save_weights(path, random_weights(config), config)
    wider = ModelConfig(name="wider", n_layers=2, width=128, heads=4, vocab_size=vocab.n_vocab)
    with pytest.raises(WeightLoadError, match="shape"):
        load_weights(path, wider)


def test_weight_validation(vocab):
    config = narrow_config(vocab.n_vocab)
    tensors = dict(random_weights(config).tensors)
    tensors["decoder.ln.bias"] = torch.full((64,), float("nan"))
    with pytest.raises(WeightLoadError, match="non-finite"):
        ModelWeights(tensors).validate(config)
    tensors = dict(random_weights(config).tensors)
    tensors["extra.weight"] = torch.zeros(1)
    with pytest.raises(WeightLoadError, match="unexpected"):
        ModelWeights(tensors).validate(config)


def test_config_file_round_trip(tmp_path):
    config = ModelConfig(name="custom", n_layers=3, width=96, heads=3, vocab_size=1000, n_text_ctx=64)
    path = str(tmp_path / "model.env")
    config.save(path)
    assert ModelConfig.from_file(path) == config


def test_config_file_preset_and_errors(tmp_path):
    preset = tmp_path / "preset.env"
    preset.write_text("PRESET=base\nVOCAB_SIZE=500\n")
    config = ModelConfig.from_file(str(preset))
    assert (config.name, config.n_layers, config.width, config.heads) == ("base", 6, 512, 8)

    unknown = tmp_path / "unknown.env"
    unknown.write_text("PRESET=tiny\nVOCAB_SIZE=500\nDROPOUT=0.1\n")
    with pytest.raises(ConfigError):
        ModelConfig.from_file(str(unknown))

    with pytest.raises(ConfigError):
        ModelConfig(name="bad", n_layers=1, width=100, heads=3, vocab_size=10)


def test_sinusoids_and_cache_reorder():
    table = sinusoids(1500, 64)
    assert table.shape == (1500, 64)
    assert torch.equal(table[0, :32], torch.zeros(32))
    assert torch.equal(table[0, 32:], torch.ones(32))

    cache = DecodeCache(n_layers=1, max_length=8)
    cache.keys[0] = torch.arange(6.0).view(2, 3, 1)
    cache.values[0] = torch.arange(6.0).view(2, 3, 1)
    cache.reorder([1, 1, 0])
    assert cache.batch_size == 3
    assert cache.keys[0][:, 0, 0].tolist() == [3.0, 3.0, 0.0]
    assert math.isclose(float(cache.values[0].sum()), 3 + 4 + 5 + 3 + 4 + 5 + 0 + 1 + 2)


def perturbed_model(config, seed, name, edit):
    tensors = {key: value.clone() for key, value in random_weights(config, seed=seed).tensors.items()}
    edit(tensors[name])
    return SpeechModel.from_weights(config, ModelWeights(tensors))


def test_output_projection_is_tied_to_token_embedding(vocab):
    config = narrow_config(vocab.n_vocab)
    base = SpeechModel.from_weights(config, random_weights(config, seed=6))
    row = 100

    def bump(table):
        table[row] += 0.5

    tied = perturbed_model(config, 6, "decoder.token_embedding.weight", bump)
    states = torch.randn(1500, 64, generator=torch.Generator().manual_seed(6))
    prompt = [vocab.specials.sot, 5, 6]

    before, after = base.logits(prompt, states), tied.logits(prompt, states)
    others = [column for column in range(vocab.n_vocab) if column != row]
    assert not torch.allclose(before[:, row], after[:, row])
    torch.testing.assert_close(before[:, others], after[:, others], rtol=0, atol=1e-5)

    before, after = base.logits(prompt + [row], states), tied.logits(prompt + [row], states)
    assert not torch.allclose(before[-1, others], after[-1, others])


def test_learned_positions_change_the_logits(vocab):
    config = narrow_config(vocab.n_vocab)
    base = SpeechModel.from_weights(config, random_weights(config, seed=8))

    def shift(table):
        table.copy_(torch.roll(table, -1, dims=0))

    shifted = perturbed_model(config, 8, "decoder.positional_embedding", shift)
    states = torch.randn(1500, 64, generator=torch.Generator().manual_seed(8))
    prompt = [vocab.specials.sot, vocab.specials.languages["en"], vocab.specials.transcribe]
    assert not torch.allclose(base.logits(prompt, states), shifted.logits(prompt, states))
    assert not torch.allclose(base.logits(prompt, states)[-1], base.logits([prompt[0]] + prompt, states)[-1])


def test_language_detection_is_near_uniform_on_random_weights(vocab):
    config = narrow_config(vocab.n_vocab)
    totals = None
    for seed in range(10):
        model = SpeechModel.from_weights(config, random_weights(config, seed=seed))
        states = torch.randn(1500, 64, generator=torch.Generator().manual_seed(100 + seed))
        probs = model.detect_language(states, vocab.specials)
        values = np.array([probs[code] for code in sorted(probs)])
        totals = values if totals is None else totals + values
    mean = totals / 10
    assert np.all(np.abs(mean - 1 / 99) <= 0.05)


@pytest.mark.slow
def test_base_forward_pass_is_finite(vocab):
    config = ModelConfig.preset("base", vocab_size=vocab.n_vocab)
    model = SpeechModel.from_weights(config, random_weights(config, seed=0))
    states = model.encode_audio(log_mel_spectrogram(tone(30.0)).window(0))
    assert states.shape == (1500, 512)
    logits = model.logits([vocab.specials.sot, vocab.specials.languages["en"], vocab.specials.transcribe], states)
    assert logits.shape == (3, vocab.n_vocab)
    assert torch.isfinite(logits).all()
