import numpy as np
import pytest

from ssmiqa import checkpoint as ckpt
from ssmiqa.blocks import IqaModel, ModelConfig


def _model(seed=0, **kw):
    base = dict(depths=(1, 1), embed_dims=(4, 8), windows=(2, 2), n_state=2,
                head_hidden=4, chunk=4)
    base.update(kw)
    return IqaModel(ModelConfig(**base), seed=seed)


def test_round_trip_restores_tensors_bit_exact_at_f32(tmp_path):
    m = _model(seed=1)
    path = str(tmp_path / "m.ckpt")
    ckpt.save_model(path, m, {"seed": 1}, kind="full")

    m2 = _model(seed=2)
    meta = ckpt.load_into_model(path, m2)
    assert meta["run"] == {"seed": 1}
    for (n1, t1), (n2, t2) in zip(m.named_params(), m2.named_params()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data.astype(np.float32), t2.data.astype(np.float32))


def test_save_load_save_byte_identical(tmp_path):
    m = _model(seed=3)
    p1 = str(tmp_path / "a.ckpt")
    p2 = str(tmp_path / "b.ckpt")
    ckpt.save_model(p1, m, {"seed": 3})
    m2 = _model(seed=4)
    ckpt.load_into_model(p1, m2)
    ckpt.save_model(p2, m2, {"seed": 3})
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_magic_and_checksum_guards(tmp_path):
    m = _model(seed=5)
    path = str(tmp_path / "m.ckpt")
    ckpt.save_model(path, m, {})
    blob = open(path, "rb").read()

    with pytest.raises(ckpt.CheckpointError):
        ckpt.read_meta(b"NOPE" + blob[4:])

    corrupted = bytearray(blob)
    corrupted[100] ^= 0xFF
    with pytest.raises(ckpt.CheckpointError):
        ckpt.read_meta(bytes(corrupted))

    with pytest.raises(ckpt.CheckpointError):
        ckpt.read_meta(blob[:20])


def test_config_mismatch_errors_before_tensor_parse(tmp_path):
    m = _model(seed=6)
    path = str(tmp_path / "m.ckpt")
    ckpt.save_model(path, m, {})
    other = _model(seed=6, embed_dims=(8, 8))
    with pytest.raises(ckpt.CheckpointError) as e:
        ckpt.load_into_model(path, other)
    assert "config" in str(e.value)


def test_kind_mismatch(tmp_path):
    m = _model(seed=7)
    path = str(tmp_path / "m.ckpt")
    ckpt.save_model(path, m, {}, kind="adapters")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_into_model(path, _model(seed=7), expect_kind="full")


def test_backbone_hash_ignores_head_and_adapters():
    m = _model(seed=8)
    h0 = ckpt.backbone_hash(m)
    m.head.fc1.w.data += 1.0
    assert ckpt.backbone_hash(m) == h0
    m.stem.proj.w.data += 1.0
    assert ckpt.backbone_hash(m) != h0


def test_payloads_are_f32_little_endian(tmp_path):
    m = _model(seed=9)
    path = str(tmp_path / "m.ckpt")
    ckpt.save_model(path, m, {})
    meta, tensors = ckpt.load(path)
    name, t = next(iter(m.named_params()))
    # stored at f32: values round-trip through <f4 exactly
    np.testing.assert_array_equal(tensors[name], t.data.astype("<f4").astype(np.float64))
