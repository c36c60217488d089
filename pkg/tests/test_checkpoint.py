import numpy as np
import pytest

from fastpoint import checkpoint as ckpt_io
from fastpoint.checkpoint import CheckpointError
from fastpoint.models import Classifier, ClassifierConfig, Segmenter, SegmenterConfig
from fastpoint.training import AdamState

CFG = ClassifierConfig(input_points=32, samples=(16, 8), ks=(8, 4), edge_channels=((8,), (8,)), mlp=(16,),
                       fc=(16,), num_classes=3)


def test_round_trip(tmp_path):
    model = Classifier(CFG, seed=3)
    rng = np.random.default_rng(0)
    for bn in model.batch_norms():
        bn.state.mean = rng.normal(size=bn.state.mean.shape).astype(np.float32)
    adam = AdamState(step=5)
    for p in model.parameters():
        adam.m[p.name] = rng.normal(size=p.shape).astype(np.float32)
        adam.v[p.name] = rng.random(p.shape).astype(np.float32)
    ckpt_io.save(ckpt_io.capture(model, 7, adam, {"note": "x"}), tmp_path / "c")
    ck = ckpt_io.load(tmp_path / "c")
    assert ck.epoch == 7 and ck.meta["note"] == "x" and ck.config == CFG
    adam2 = AdamState()
    back = ckpt_io.restore(ck, adam=adam2)
    for a, b in zip(model.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    for a, b in zip(model.batch_norms(), back.batch_norms()):
        np.testing.assert_array_equal(a.state.mean, b.state.mean)
        np.testing.assert_array_equal(a.state.var, b.state.var)
    assert adam2.step == 5
    for k in adam.m:
        np.testing.assert_array_equal(adam.m[k], adam2.m[k])
        np.testing.assert_array_equal(adam.v[k], adam2.v[k])
    assert ckpt_io.to_bytes(ckpt_io.capture(back, 7, adam2, {"note": "x"})) == (tmp_path / "c").read_bytes()


def test_segmenter_round_trip():
    cfg = SegmenterConfig.desk(4, 64)
    model = Segmenter(cfg, seed=1)
    back = ckpt_io.restore(ckpt_io.from_bytes(ckpt_io.to_bytes(ckpt_io.capture(model))))
    cloud = np.random.default_rng(0).normal(size=(1, 64, 3)) * 0.3
    np.testing.assert_array_equal(model(cloud).data, back(cloud).data)


def test_blob_layout_little_endian():
    raw = ckpt_io.to_bytes(ckpt_io.Checkpoint({"k": 1}, {"a": np.array([[1.0, 2.0]], dtype=np.float32)}))
    assert raw[:12] == b"FPNN-CKPT-1\x00"
    tail = raw[-(2 + 1 + 4 + 8 + 8):]
    assert tail[:3] == b"\x01\x00a"
    assert np.frombuffer(tail[-8:], "<f4").tolist() == [1.0, 2.0]


def test_bad_magic():
    raw = ckpt_io.to_bytes(ckpt_io.capture(Classifier(CFG)))
    with pytest.raises(CheckpointError, match="magic"):
        ckpt_io.from_bytes(b"X" + raw[1:])


def test_truncated_and_trailing():
    raw = ckpt_io.to_bytes(ckpt_io.capture(Classifier(CFG)))
    with pytest.raises(CheckpointError):
        ckpt_io.from_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        ckpt_io.from_bytes(raw + b"\0")


def test_restore_config_mismatch():
    ck = ckpt_io.capture(Classifier(CFG))
    other = ClassifierConfig(input_points=32, samples=(16, 8), ks=(8, 4), edge_channels=((8,), (8,)), mlp=(16,),
                             fc=(16,), num_classes=4)
    with pytest.raises(CheckpointError, match="config"):
        ckpt_io.restore(ck, Classifier(other))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "none")


def test_save_is_atomic(tmp_path):
    ckpt_io.save(ckpt_io.capture(Classifier(CFG)), tmp_path / "c")
    assert [p.name for p in tmp_path.iterdir()] == ["c"]
