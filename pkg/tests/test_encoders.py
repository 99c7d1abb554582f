"""Feature cache format, the feature store, and the toy encoders."""

import hashlib
import json

import numpy as np
import pytest
import torch

from concaps.encoders import (
    EncoderConfig,
    FeatureBundle,
    FeatureStore,
    ToyPatchEncoder,
    ToyTextEncoder,
    load_cached_features,
    read_feature_file,
    write_feature_file,
)
from concaps.errors import FormatError, ValidationError

from helpers import finite_difference_grads, max_relative_error


def four_arrays(rng, shapes=((5, 8), (4, 6), (1, 3), (2, 6))):
    return tuple(rng.standard_normal(s).astype(np.float32) for s in shapes)


class TestFeatureFile:
    def test_round_trip_bit_identical(self, tmp_path):
        arrays = four_arrays(np.random.default_rng(0))
        path = tmp_path / "x.ccf"
        write_feature_file(path, arrays)
        loaded = read_feature_file(path)
        for orig, back in zip(arrays, loaded):
            assert orig.dtype == back.dtype == np.float32
            assert (orig == back).all()

    def test_zero_row_arrays_survive(self, tmp_path):
        arrays = (
            np.zeros((0, 0), dtype=np.float32),
            np.ones((2, 2), dtype=np.float32),
            np.zeros((0, 4), dtype=np.float32),
            np.ones((1, 1), dtype=np.float32),
        )
        path = tmp_path / "x.ccf"
        write_feature_file(path, arrays)
        loaded = read_feature_file(path)
        assert [a.shape for a in loaded] == [(0, 0), (2, 2), (0, 4), (1, 1)]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ccf"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            read_feature_file(path)

    def test_truncated_payload(self, tmp_path):
        arrays = four_arrays(np.random.default_rng(0))
        path = tmp_path / "x.ccf"
        write_feature_file(path, arrays)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError, match="truncated"):
            read_feature_file(path)

    def test_trailing_bytes(self, tmp_path):
        arrays = four_arrays(np.random.default_rng(0))
        path = tmp_path / "x.ccf"
        write_feature_file(path, arrays)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            read_feature_file(path)

    def test_wrong_array_count(self, tmp_path):
        with pytest.raises(FormatError, match="4 arrays"):
            write_feature_file(tmp_path / "x.ccf", four_arrays(np.random.default_rng(0))[:3])


class TestFeatureStore:
    def test_write_read_round_trip(self, tmp_path):
        store = FeatureStore.create(tmp_path / "fs")
        arrays = four_arrays(np.random.default_rng(1))
        store.write("doc/img0", arrays)
        store.save_manifest()
        again = FeatureStore(tmp_path / "fs")
        for orig, back in zip(arrays, again.read("doc/img0")):
            assert (orig == back).all()

    def test_missing_key(self, tmp_path):
        store = FeatureStore.create(tmp_path / "fs")
        with pytest.raises(KeyError, match="nope"):
            store.read("nope")

    def test_manifest_checksums_match_independent_hash(self, tmp_path):
        # Oracle: re-hash every stored file with hashlib directly and compare
        # to the manifest the writer produced.
        store = FeatureStore.create(tmp_path / "fs")
        rng = np.random.default_rng(2)
        for k in range(3):
            store.write(f"bundle{k}", four_arrays(rng))
        store.save_manifest()
        manifest = json.loads((tmp_path / "fs" / "manifest.json").read_text())
        assert manifest["format"] == "CCF1"
        assert len(manifest["entries"]) == 3
        for entry in manifest["entries"].values():
            digest = hashlib.sha256((tmp_path / "fs" / entry["file"]).read_bytes()).hexdigest()
            assert digest == entry["sha256"]

    def test_checksum_verification_catches_corruption(self, tmp_path):
        store = FeatureStore.create(tmp_path / "fs")
        store.write("k", four_arrays(np.random.default_rng(3)))
        store.save_manifest()
        name = json.loads((tmp_path / "fs" / "manifest.json").read_text())["entries"]["k"]["file"]
        path = tmp_path / "fs" / name
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        fresh = FeatureStore(tmp_path / "fs")
        with pytest.raises(FormatError, match="checksum"):
            fresh.read("k", verify_checksum=True)


class TestCachedFeatures:
    def reference_arrays(self):
        rng = np.random.default_rng(4)
        return (
            rng.standard_normal((10, 2048)).astype(np.float32),
            rng.standard_normal((49, 2048)).astype(np.float32),
            rng.standard_normal((3, 512)).astype(np.float32),
            rng.standard_normal((5, 2048)).astype(np.float32),
        )

    def test_reference_dims_accepted(self, tmp_path):
        store = FeatureStore.create(tmp_path / "fs")
        arrays = self.reference_arrays()
        store.write("ok", arrays)
        bundle = load_cached_features("ok", store)
        assert bundle.x_i.shape == (49, 2048)
        assert torch.equal(bundle.x_f, torch.from_numpy(arrays[2]))

    def test_wrong_face_width_rejected(self, tmp_path):
        store = FeatureStore.create(tmp_path / "fs")
        arrays = list(self.reference_arrays())
        arrays[2] = np.zeros((3, 511), dtype=np.float32)
        store.write("bad", arrays)
        with pytest.raises(FormatError, match="face"):
            load_cached_features("bad", store)

    def test_wrong_patch_count_rejected(self, tmp_path):
        store = FeatureStore.create(tmp_path / "fs")
        arrays = list(self.reference_arrays())
        arrays[1] = np.zeros((48, 2048), dtype=np.float32)
        store.write("bad", arrays)
        with pytest.raises(FormatError, match="image"):
            load_cached_features("bad", store)


class TestToyTextEncoder:
    def encoder(self, n_layers=3, dtype=torch.float64):
        torch.manual_seed(0)
        cfg = EncoderConfig(d_t=6, n_text_layers=n_layers, n_text_heads=1, max_text_len=64)
        return ToyTextEncoder(vocab_size=11, pad_id=3, config=cfg).to(dtype)

    def test_row_count_matches_tokens(self):
        enc = self.encoder()
        out = enc(torch.tensor([4, 5, 6, 7]))
        assert out.shape == (4, 6)

    def test_empty_input_gives_single_pad_row(self):
        enc = self.encoder()
        out = enc(torch.tensor([], dtype=torch.long))
        assert out.shape == (1, 6)

    def test_over_length_rejected(self):
        enc = self.encoder()
        with pytest.raises(ValidationError, match="max_text_len"):
            enc(torch.arange(65) % 11)

    def test_uniform_mix_equals_mean_of_layers(self):
        enc = self.encoder(n_layers=3)
        with torch.no_grad():
            enc.mix_logits.fill_(2.5)  # any constant vector softmaxes to uniform
        ids = torch.tensor([4, 5, 6])
        layers = enc.layer_outputs(ids)
        expected = torch.stack(layers).mean(dim=0)
        assert torch.allclose(enc(ids), expected, atol=1e-12)

    def test_mix_gradient_matches_finite_differences(self):
        # 4-token case; central differences at h=1e-5 in float64.
        enc = self.encoder(n_layers=3)
        ids = torch.tensor([4, 5, 6, 7])
        torch.manual_seed(1)
        probe = torch.randn(6, dtype=torch.float64)

        def loss_fn():
            return (enc(ids) @ probe).sum()

        loss = loss_fn()
        (analytic,) = torch.autograd.grad(loss, enc.mix_logits)
        (numeric,) = finite_difference_grads([enc.mix_logits], loss_fn)
        assert max_relative_error([analytic], [numeric]) < 1e-4


class TestToyPatchEncoder:
    def test_zero_input_zero_bias_gives_zero(self):
        enc = ToyPatchEncoder(4, 6)
        with torch.no_grad():
            enc.proj.bias.zero_()
        out = enc(torch.zeros(3, 4))
        assert torch.equal(out, torch.zeros(3, 6))

    def test_identity_projection_passes_through(self):
        enc = ToyPatchEncoder(5, 5)
        with torch.no_grad():
            enc.proj.weight.copy_(torch.eye(5))
            enc.proj.bias.zero_()
        x = torch.randn(7, 5)
        assert torch.allclose(enc(x), x)

    def test_zero_rows_pass_through(self):
        enc = ToyPatchEncoder(4, 6)
        assert enc(torch.zeros(0, 4)).shape == (0, 6)

    def test_non_finite_rejected(self):
        enc = ToyPatchEncoder(4, 6)
        bad = torch.zeros(2, 4)
        bad[1, 2] = float("nan")
        with pytest.raises(ValidationError, match="non-finite"):
            enc(bad)


class TestBundleAndConfig:
    def test_non_finite_stream_rejected(self):
        good = torch.zeros(2, 3)
        bad = torch.tensor([[float("inf"), 0.0, 0.0]])
        with pytest.raises(ValidationError, match="non-finite"):
            FeatureBundle(x_t=good, x_i=bad, x_f=torch.zeros(0, 4), x_o=good)

    def test_non_2d_stream_rejected(self):
        with pytest.raises(ValidationError, match="2-D"):
            FeatureBundle(
                x_t=torch.zeros(3), x_i=torch.zeros(2, 2),
                x_f=torch.zeros(0, 2), x_o=torch.zeros(1, 2),
            )

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValidationError, match="mode"):
            EncoderConfig(mode="giant")

    def test_cached_profile_uses_reference_dims(self):
        cfg = EncoderConfig.cached()
        assert (cfg.d_t, cfg.d_i, cfg.d_f, cfg.d_o) == (2048, 2048, 512, 2048)
