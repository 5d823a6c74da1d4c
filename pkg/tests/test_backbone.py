import struct

import numpy as np
import pytest

from mahafsl import autodiff as ad
from mahafsl.backbone import (
    BackboneConfig,
    ConvBackbone,
    PrecomputedBackbone,
    PrecomputedEmbeddingStore,
    make_backbone,
    read_fsle,
    write_fsle,
)
from mahafsl.errors import ConfigError, DataError, DimensionError, EmbeddingLookupError

TINY = BackboneConfig(kind="conv-small", embed_dim=5, input_size=12, channels_per_block=[4, 4])


def test_fsle_round_trip(tmp_path, rng):
    ids = ["a", "b/ü", "c"]
    vecs = rng.standard_normal((3, 4)).astype(np.float32).astype(np.float64)
    write_fsle(tmp_path / "e.fsle", ids, vecs)
    store = read_fsle(tmp_path / "e.fsle")
    assert store.ids == ids
    np.testing.assert_array_equal(store.vectors, vecs)


def test_fsle_layout(tmp_path):
    write_fsle(tmp_path / "e.fsle", ["xy"], np.array([[1.0, -2.0]]))
    raw = (tmp_path / "e.fsle").read_bytes()
    assert raw[:4] == b"FSLE"
    assert struct.unpack_from("<IIQ", raw, 4) == (1, 2, 1)
    assert struct.unpack_from("<H", raw, 20) == (2,)
    assert raw[22:24] == b"xy"
    assert struct.unpack_from("<2f", raw, 24) == (1.0, -2.0)
    assert len(raw) == 32


def test_fsle_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError):
        read_fsle(tmp_path / "bad")
    write_fsle(tmp_path / "ok", ["a"], np.ones((1, 2)))
    (tmp_path / "trunc").write_bytes((tmp_path / "ok").read_bytes()[:-3])
    with pytest.raises(DataError):
        read_fsle(tmp_path / "trunc")


def test_precomputed_lookup_identity():
    v = np.array([[0.5, 1.5, -2.0]])
    bb = PrecomputedBackbone(BackboneConfig(embed_dim=3), PrecomputedEmbeddingStore(["id"], v))
    np.testing.assert_array_equal(bb.embed(["id"]).value, v)
    assert not bb.embed(["id"]).requires_grad


def test_precomputed_missing_id():
    store = PrecomputedEmbeddingStore(["a"], np.zeros((1, 2)))
    bb = PrecomputedBackbone(BackboneConfig(embed_dim=2), store)
    with pytest.raises(EmbeddingLookupError):
        bb.embed(["zzz"])
    with pytest.raises(EmbeddingLookupError):
        store.require(["a", "b"])


def test_precomputed_dim_mismatch():
    with pytest.raises(DimensionError):
        PrecomputedBackbone(BackboneConfig(embed_dim=3), PrecomputedEmbeddingStore(["a"], np.zeros((1, 2))))


def test_conv_zero_weights_give_zero_embeddings(rng):
    bb = ConvBackbone(TINY)
    params = {k: np.zeros_like(v) for k, v in bb.init_params(rng).items()}
    tp = {k: ad.Tensor(v) for k, v in params.items()}
    out = bb.embed(rng.standard_normal((3, 3, 12, 12)), tp)
    np.testing.assert_array_equal(out.value, np.zeros((3, 5)))


def test_conv_duplicate_rows_and_batch_independence(rng):
    bb = ConvBackbone(TINY)
    tp = {k: ad.Tensor(v) for k, v in bb.init_params(rng).items()}
    imgs = rng.standard_normal((3, 3, 12, 12))
    batch = np.stack([imgs[0], imgs[1], imgs[0], imgs[2]])
    out = bb.embed(batch, tp).value
    np.testing.assert_array_equal(out[0], out[2])
    alone = bb.embed(imgs[1:2], tp).value
    np.testing.assert_allclose(alone[0], out[1], rtol=1e-12, atol=1e-12)  # BLAS blocking may differ by batch size
    np.testing.assert_array_equal(bb.embed(batch, tp).value, out)
    assert np.all(np.isfinite(out))


def test_default_conv_shapes(rng):
    cfg = BackboneConfig(kind="conv-small")
    bb = ConvBackbone(cfg)
    params = bb.init_params(rng)
    assert params["backbone.conv0.weight"].shape == (32, 3, 3, 3)
    assert params["backbone.fc.weight"].shape == (32, 64)
    tp = {k: ad.Tensor(v) for k, v in params.items()}
    assert bb.embed(rng.standard_normal((1, 3, 84, 84)), tp).shape == (1, 64)


def test_conv_wrong_shape(rng):
    bb = ConvBackbone(TINY)
    tp = {k: ad.Tensor(v) for k, v in bb.init_params(rng).items()}
    with pytest.raises(DimensionError):
        bb.embed(rng.standard_normal((2, 3, 10, 10)), tp)
    with pytest.raises(DimensionError):
        bb.embed(np.zeros((0, 3, 12, 12)), tp)


@pytest.mark.parametrize(
    "cfg",
    [
        BackboneConfig(kind="resnet"),
        BackboneConfig(embed_dim=1),
        BackboneConfig(kind="conv-small", input_size=8, channels_per_block=[4, 4, 4, 4]),
        BackboneConfig(kind="conv-small", channels_per_block=[]),
    ],
)
def test_config_validation(cfg):
    with pytest.raises(ConfigError):
        cfg.validate()


def test_make_backbone_requires_store():
    with pytest.raises(ConfigError):
        make_backbone(BackboneConfig())
