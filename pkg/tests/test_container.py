"""Container serialization: roundtrips, pruning, corruption handling."""

import struct

import numpy as np
import pytest

from efld.container import CONTAINER_VERSION, MAGIC, load, save
from efld.errors import ContainerError, CorruptionError, UsageError
from efld.model import Model, build_model, default_config, model_forward
from efld.quantize import QuantizedModel, calibrate, quantize_model, quantized_forward
from efld.synthetic import generate_synthetic
from efld.tensor import Tensor

from conftest import reduced_config


@pytest.fixture(scope="module")
def three_head_model():
    return build_model(reduced_config(("p51", "p68", "p98")), seed=4)


@pytest.fixture(scope="module")
def quantized(three_head_model):
    dataset = generate_synthetic(8, 32, seed=40, formats=["p51"])
    activations = calibrate(three_head_model, dataset)
    return quantize_model(three_head_model, activations), dataset


class TestFloatRoundtrip:
    def test_save_load_forward_bit_exact(self, three_head_model, tmp_path):
        path = tmp_path / "m.efld"
        save(three_head_model, path)
        loaded = load(path)
        assert isinstance(loaded, Model)
        assert loaded.dtype == three_head_model.dtype
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 32, 32, 3)).astype("float32"))
        a = model_forward(three_head_model, x)
        b = model_forward(loaded, x)
        for fmt in a:
            np.testing.assert_array_equal(a[fmt].data, b[fmt].data)

    def test_save_twice_byte_identical(self, three_head_model, tmp_path):
        p1, p2 = tmp_path / "a.efld", tmp_path / "b.efld"
        save(three_head_model, p1)
        save(three_head_model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_save_load_save_byte_idempotent(self, three_head_model, tmp_path):
        p1, p2 = tmp_path / "a.efld", tmp_path / "b.efld"
        save(three_head_model, p1)
        save(load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_float64_roundtrip(self, tmp_path):
        model = build_model(reduced_config(("p51",)), seed=1, dtype="float64")
        path = tmp_path / "m64.efld"
        save(model, path)
        loaded = load(path)
        assert loaded.dtype == "float64"
        for name in model.params:
            np.testing.assert_array_equal(model.params[name].data, loaded.params[name].data)


class TestPruning:
    def test_default_model_prunes_to_exact_counts(self, tmp_path):
        model = build_model(default_config(("p51", "p68", "p98")), seed=5)
        assert model.parameter_count() == 303622
        path = tmp_path / "p51.efld"
        save(model, path, keep_heads=["p51"])
        pruned = load(path)
        assert pruned.parameter_count() == 130938
        assert pruned.head_formats() == ("p51",)

    def test_pruning_commutes_with_inference(self, three_head_model, tmp_path):
        path = tmp_path / "pruned.efld"
        save(three_head_model, path, keep_heads=["p51"])
        pruned = load(path)
        x = Tensor(np.random.default_rng(1).uniform(size=(2, 32, 32, 3)).astype("float32"))
        full = model_forward(three_head_model, x, formats={"p51"})["p51"]
        after = model_forward(pruned, x)["p51"]
        np.testing.assert_array_equal(full.data, after.data)

    def test_keep_two_heads(self, three_head_model, tmp_path):
        path = tmp_path / "two.efld"
        save(three_head_model, path, keep_heads=["p51", "p98"])
        pruned = load(path)
        assert pruned.head_formats() == ("p51", "p98")

    def test_unknown_head_is_usage_error(self, three_head_model, tmp_path):
        with pytest.raises(UsageError, match="p40"):
            save(three_head_model, tmp_path / "x.efld", keep_heads=["p40"])

    def test_empty_heads_rejected(self, three_head_model, tmp_path):
        with pytest.raises(UsageError, match="nonempty"):
            save(three_head_model, tmp_path / "x.efld", keep_heads=[])


class TestQuantizedRoundtrip:
    def test_roundtrip_outputs_bit_exact(self, quantized, tmp_path):
        qmodel, dataset = quantized
        path = tmp_path / "q.efld"
        save(qmodel, path)
        loaded = load(path)
        assert isinstance(loaded, QuantizedModel)
        images = np.stack([s.image for s in dataset.samples[:2]])
        a = quantized_forward(qmodel, images)
        b = quantized_forward(loaded, images)
        for fmt in a:
            np.testing.assert_array_equal(a[fmt], b[fmt])

    def test_byte_idempotent(self, quantized, tmp_path):
        qmodel, _ = quantized
        p1, p2 = tmp_path / "a.efld", tmp_path / "b.efld"
        save(qmodel, p1)
        save(load(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_quantized_pruning_preserves_predictions(self, quantized, tmp_path):
        qmodel, dataset = quantized
        path = tmp_path / "q51.efld"
        save(qmodel, path, keep_heads=["p51"])
        pruned = load(path)
        images = np.stack([s.image for s in dataset.samples[:2]])
        np.testing.assert_array_equal(
            quantized_forward(qmodel, images)["p51"], quantized_forward(pruned, images)["p51"]
        )


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.efld"
        path.write_bytes(b"XXXX" + bytes(64))
        with pytest.raises(ContainerError, match="magic"):
            load(path)

    def test_bad_version(self, three_head_model, tmp_path):
        path = tmp_path / "v.efld"
        save(three_head_model, path)
        raw = bytearray(path.read_bytes())
        raw[4:6] = struct.pack("<H", CONTAINER_VERSION + 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(ContainerError, match="version"):
            load(path)

    def test_truncated_payload_names_tensor(self, three_head_model, tmp_path):
        path = tmp_path / "t.efld"
        save(three_head_model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-200])
        with pytest.raises(CorruptionError, match=r"head\.p98\.out"):
            load(path)

    def test_not_a_container_at_all(self, tmp_path):
        path = tmp_path / "tiny.efld"
        path.write_bytes(b"EF")
        with pytest.raises(CorruptionError):
            load(path)

    def test_magic_survives(self, three_head_model, tmp_path):
        path = tmp_path / "ok.efld"
        save(three_head_model, path)
        assert path.read_bytes()[:4] == MAGIC
