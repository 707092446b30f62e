import json
import math

import numpy as np
import pytest

import oracles
from clapaug.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from clapaug.contrastive import loss_and_backward
from clapaug.encoders import DualEncoder, ModelConfig
from clapaug.errors import CheckpointError, ShapeError, TokenizeError
from clapaug.nn import Adam
from clapaug.tokenizer import bucket, content_words, tokenize, words
from conftest import DATA


class TestTokenizer:
    def test_split_rule(self):
        assert words("The organ's deep tones") == ["the", "organ", "s", "deep", "tones"]
        assert len(tokenize("The organ's deep tones")) == 5

    def test_organ_golden_bucket(self):
        # frozen from the reference FNV-1a implementation in tests/oracles.py
        assert bucket("organ", 32768) == 23282

    def test_golden_fixture(self):
        rows = json.loads((DATA / "tokenizer_golden.json").read_text(encoding="utf-8"))
        assert len(rows) == 20
        for row in rows:
            assert list(tokenize(row["caption"], row["vocab"])) == row["ids"], row["caption"]

    def test_pure(self):
        assert tokenize("a dog barks") == tokenize("a dog barks")

    @pytest.mark.parametrize("text", ["!!!", "", "  ", "___"])
    def test_empty(self, text):
        with pytest.raises(TokenizeError):
            tokenize(text)

    def test_content_words_drop_stopwords(self):
        assert content_words("The dog is in the yard") == {"dog", "yard"}

    def test_matches_reference_tokenizer(self):
        for text in ["Ünïcode wörds 42", "mixed-case HELLO", "tabs\tand\nnewlines"]:
            assert list(tokenize(text, 1000)) == oracles.tokenize(text, 1000)


class TestEncoders:
    def test_shapes_and_unit_norm(self, small_model):
        x = np.random.default_rng(0).normal(size=(5, 6))
        a = small_model.encode_audio(x)
        t = small_model.encode_text(["dog barks", "rain", "a b c", "bell", "x y"])
        assert a.shape == (5, 4) and t.shape == (5, 4)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1, atol=1e-9)

    def test_identical_rows(self, small_model):
        x = np.tile(np.random.default_rng(1).normal(size=(1, 6)), (3, 1))
        a = small_model.encode_audio(x)
        assert a[0].tobytes() == a[1].tobytes() == a[2].tobytes()
        t = small_model.encode_text(["dog barks", "dog barks"])
        assert t[0].tobytes() == t[1].tobytes()

    def test_token_order_invariance(self, small_model):
        t = small_model.encode_text(["dog barks loudly", "loudly barks dog"])
        np.testing.assert_allclose(t[0], t[1], atol=1e-15)

    def test_bad_input(self, small_model):
        with pytest.raises(TokenizeError):
            small_model.encode_text(["!!!"])
        with pytest.raises(ShapeError):
            small_model.encode_audio(np.ones((2, 5)))

    def test_temperature_init_and_clamp(self, small_config):
        m = DualEncoder(small_config)
        assert m.temperature == pytest.approx(1 / 0.07, rel=1e-12)
        m.log_temperature[0, 0] = math.log(500.0)
        m.clamp_temperature()
        assert m.temperature == pytest.approx(100.0, rel=1e-12)

    def test_seeded_init(self, small_config):
        a, b = DualEncoder(small_config), DualEncoder(small_config)
        for (n1, p1, _), (n2, p2, _) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2 and p1.tobytes() == p2.tobytes()

    def test_init_distribution(self):
        m = DualEncoder(ModelConfig(feature_dim=40, vocab_buckets=2000, token_embed_dim=30, hidden_dim=50,
                                    embed_dim=20, seed=4))
        w = m.audio.layers[0].weight
        assert np.abs(w).max() <= math.sqrt(6 / 90)
        assert np.all(m.audio.layers[0].bias == 0)
        assert m.embedding.weight.std() == pytest.approx(0.02, rel=0.05)


class TestCheckpoint:
    def _trained(self, small_model, records):
        adam = Adam(lr=1e-2)
        for _ in range(2):
            feats = np.stack([r.features for r in records]).astype(np.float64)
            loss_and_backward(small_model, feats, [r.caption for r in records])
            adam.step(small_model.params(), small_model.grads())
        return small_model, adam

    def test_round_trip_bitwise_f32(self, tmp_path, small_model, records):
        model, adam = self._trained(small_model, records)
        save_checkpoint(model, adam, tmp_path / "m.ckpt")
        loaded, ladam, cfg = load_checkpoint(tmp_path / "m.ckpt")
        assert cfg == model.config
        for (n, p, _), (n2, q, _) in zip(model.named_parameters(), loaded.named_parameters()):
            assert n == n2
            assert p.astype(np.float32).tobytes() == q.astype(np.float32).tobytes()
        assert ladam.step_count == adam.step_count == 2
        for name in adam.m:
            assert adam.m[name].astype(np.float32).tobytes() == ladam.m[name].astype(np.float32).tobytes()

    def test_encode_after_round_trip(self, tmp_path, small_model, records):
        model, adam = self._trained(small_model, records)
        for _, p, _ in model.named_parameters():
            p[...] = p.astype(np.float32)
        save_checkpoint(model, adam, tmp_path / "m.ckpt")
        loaded, _, _ = load_checkpoint(tmp_path / "m.ckpt")
        x = np.stack([r.features for r in records]).astype(np.float64)
        assert model.encode_audio(x).tobytes() == loaded.encode_audio(x).tobytes()
        caps = [r.caption for r in records]
        assert model.encode_text(caps).tobytes() == loaded.encode_text(caps).tobytes()

    def test_save_is_deterministic(self, tmp_path, small_model):
        save_checkpoint(small_model, None, tmp_path / "a.ckpt")
        save_checkpoint(small_model, None, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path, small_model):
        save_checkpoint(small_model, None, tmp_path / "m.ckpt")
        data = bytearray((tmp_path / "m.ckpt").read_bytes())
        data[:4] = b"XXXX"
        (tmp_path / "bad.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_truncated_names_tensor(self, tmp_path, small_model):
        save_checkpoint(small_model, None, tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(data[:-10])
        with pytest.raises(CheckpointError, match="log_temperature|text"):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_wrong_version_and_trailing(self, tmp_path, small_model):
        save_checkpoint(small_model, None, tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "v.ckpt").write_bytes(MAGIC + bytes([9]) + data[5:])
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(tmp_path / "v.ckpt")
        (tmp_path / "x.ckpt").write_bytes(data + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")
