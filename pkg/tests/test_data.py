import gzip

import numpy as np
import pytest

from prunetree import checkpoint
from prunetree.config import RunConfig, parse_config
from prunetree.data import Dataset, load_idx, read_idx, synthetic_blobs, write_idx, IDX_IMAGES
from prunetree.errors import CheckpointError, IngestionError, ValidationError
from prunetree.nn import init_model, resnet_spec
from prunetree.similarity import RbfCKA


# -- IDX -----------------------------------------------------------------------


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(6, 5, 4), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0, 2], dtype=np.uint8)
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lbl.idx", labels)
    data = load_idx(tmp_path / "img.idx", tmp_path / "lbl.idx")
    assert data.images.shape == (6, 1, 5, 4)
    assert np.allclose(data.images[:, 0] * 255, images)
    assert data.labels.tolist() == labels.tolist()
    assert data.num_classes == 3


def test_idx_gzip(tmp_path):
    images = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    write_idx(tmp_path / "img.idx", images)
    (tmp_path / "img.idx.gz").write_bytes(gzip.compress((tmp_path / "img.idx").read_bytes()))
    assert np.array_equal(read_idx(tmp_path / "img.idx.gz", IDX_IMAGES), images)


def test_idx_bad_magic_names_file(tmp_path):
    path = tmp_path / "bogus.idx"
    path.write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 16)
    with pytest.raises(IngestionError, match="bogus.idx"):
        read_idx(path, IDX_IMAGES)


def test_idx_truncated_payload(tmp_path):
    write_idx(tmp_path / "img.idx", np.zeros((2, 3, 3), np.uint8))
    raw = (tmp_path / "img.idx").read_bytes()
    (tmp_path / "img.idx").write_bytes(raw[:-4])
    with pytest.raises(IngestionError):
        read_idx(tmp_path / "img.idx", IDX_IMAGES)


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "img.idx", np.zeros((3, 2, 2), np.uint8))
    write_idx(tmp_path / "lbl.idx", np.zeros(2, np.uint8))
    with pytest.raises(IngestionError):
        load_idx(tmp_path / "img.idx", tmp_path / "lbl.idx")


def test_missing_file_is_ingestion_error(tmp_path):
    with pytest.raises(IngestionError):
        read_idx(tmp_path / "nope.idx", IDX_IMAGES)


# -- synthetic data -------------------------------------------------------------------


def test_synthetic_is_seeded():
    a, b = synthetic_blobs(4, samples=64), synthetic_blobs(4, samples=64)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synthetic_blobs(5, samples=64).images)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_dataset_validation():
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 3]), 3)
    with pytest.raises(ValidationError):
        Dataset(np.zeros((2, 2, 2)), np.array([0, 1]), 2)


def test_probe_is_fixed_by_seed(tiny_data):
    assert np.array_equal(tiny_data.sample_probe(16, 9), tiny_data.sample_probe(16, 9))
    assert len(tiny_data.sample_probe(10_000, 1)) == len(tiny_data)


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    model = tiny_model.copy(epoch_counter=7)
    checkpoint.save(model, tmp_path / "m.prnet")
    back = checkpoint.load(tmp_path / "m.prnet")
    assert back.equal(model)
    assert back.epoch_counter == 7 and back.rng_seed == model.rng_seed
    assert checkpoint.dumps(back) == checkpoint.dumps(model)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.prnet").write_bytes(b"NOTPRNET" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="x.prnet"):
        checkpoint.load(tmp_path / "x.prnet")


def test_checkpoint_checksum_mismatch(tmp_path, tiny_model):
    raw = bytearray(checkpoint.dumps(tiny_model))
    raw[-20] ^= 0xFF
    (tmp_path / "x.prnet").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.load(tmp_path / "x.prnet")


# -- config -----------------------------------------------------------------------------


def test_parse_config_sections():
    cfg = parse_config(
        """
        # comment
        dataset.samples=128
        arch.widths=4,8
        arch.blocks=2,2
        train.lr_schedule=5:0.1,8:0.5
        engine.K=3
        engine.epsilon=0.05
        engine.metric=rbf:0.5
        engine.stop_on_negative_delta=true
        engine.finetune.batch_size=16
        out_dir=runs/x
        """
    )
    assert cfg.dataset.samples == 128
    assert cfg.arch.widths == (4, 8)
    assert cfg.train.lr_schedule == ((5, 0.1), (8, 0.5))
    assert cfg.engine.K == 3 and cfg.engine.epsilon == 0.05
    assert cfg.engine.metric == RbfCKA(0.5)
    assert cfg.engine.stop_on_negative_delta is True
    assert cfg.engine.finetune.batch_size == 16
    assert cfg.out_dir == "runs/x"


@pytest.mark.parametrize("text", ["engine.bogus=1", "engine.K=abc", "nonsense", "model.x=1"])
def test_parse_config_rejects(text):
    with pytest.raises(ValidationError):
        parse_config(text)


def test_default_config_builds_reference_net():
    cfg = RunConfig()
    cfg.validate()
    train, test = cfg.load_data()
    assert len(train) == 2048 and len(test) == 1024
    assert cfg.network_spec(train) == resnet_spec(num_classes=4)


def test_idx_config_requires_files(tmp_path):
    cfg = parse_config(f"dataset.kind=idx\ndataset.train_images={tmp_path}/none\n")
    with pytest.raises(ValidationError):
        cfg.validate()
