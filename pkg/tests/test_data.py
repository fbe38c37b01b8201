import gzip
import json
import struct

import numpy as np
import pytest

from gbnlab.data import (CheckpointVersionError, Dataset, IdxConsistencyError, IdxFormatError,
                         IdxLengthError, TopologyError, batches, decode_checkpoint, dump_record, epoch_permutation,
                         encode_checkpoint, encode_idx, load_checkpoint, metric_record, parse_idx,
                         read_idx, read_metrics, save_checkpoint, synth_blobs, write_metrics)
from gbnlab.layers import LayerMode
from gbnlab.models import LeNet, ModelConfig
from gbnlab.train import EvalReport


def two_image_fixture(tmp_path):
    # hand-built: 16-byte header + 2 * 784 pixel bytes; 8-byte label header + 2 labels
    pixels = bytearray(2 * 784)
    pixels[0] = 255
    pixels[783] = 128
    pixels[784 + 10] = 1
    images = struct.pack(">IIII", 2051, 2, 28, 28) + bytes(pixels)
    labels = struct.pack(">II", 2049, 2) + bytes([7, 3])
    assert len(images) == 16 + 2 * 784
    img_path, lbl_path = tmp_path / "img", tmp_path / "lbl"
    img_path.write_bytes(images)
    lbl_path.write_bytes(labels)
    return img_path, lbl_path


def test_idx_fixture_round_trip(tmp_path):
    ds = read_idx(*two_image_fixture(tmp_path))
    assert ds.images.shape == (2, 1, 28, 28)
    assert ds.images[0, 0, 0, 0] == 1.0
    assert ds.images[0, 0, 27, 27] == 128 / 255
    assert ds.images[1, 0, 0, 10] == 1 / 255
    assert ds.images[1].sum() == 1 / 255
    np.testing.assert_array_equal(ds.labels, [7, 3])


def test_idx_gzip_and_encoder(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 28, 28), dtype=np.uint8)
    (tmp_path / "i.gz").write_bytes(gzip.compress(encode_idx(img)))
    (tmp_path / "l.gz").write_bytes(gzip.compress(encode_idx(np.array([1, 2, 3], dtype=np.uint8))))
    ds = read_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    np.testing.assert_array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), img)


def test_idx_errors(tmp_path):
    img, lbl = two_image_fixture(tmp_path)
    with pytest.raises(IdxFormatError, match="2049"):
        read_idx(lbl, lbl)
    short = tmp_path / "short"
    short.write_bytes(img.read_bytes()[:-5])
    with pytest.raises(IdxLengthError):
        read_idx(short, lbl)
    three = tmp_path / "three"
    three.write_bytes(struct.pack(">II", 2049, 3) + bytes([1, 2, 3]))
    with pytest.raises(IdxConsistencyError):
        read_idx(img, three)


def test_magic_fuzz_rejects_every_other_value():
    body = struct.pack(">I", 1) + bytes(1)
    rng = np.random.default_rng(0)
    magics = set(int(m) for m in rng.integers(0, 2**32, 20_000, dtype=np.uint64))
    for byte in range(4):  # every single-byte mutation of both legal values
        for legal in (2049, 2051):
            for v in range(256):
                raw = bytearray(struct.pack(">I", legal))
                raw[byte] = v
                magics.add(struct.unpack(">I", bytes(raw))[0])
    for magic in magics:
        raw = struct.pack(">I", magic) + body
        for expected in (2049, 2051):
            if magic == expected:
                continue
            with pytest.raises(IdxFormatError):
                parse_idx(raw, expected)


def test_synth_blobs():
    a = synth_blobs(3, 50, 5, 10.0, seed=1)
    b = synth_blobs(3, 50, 5, 10.0, seed=1)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(np.bincount(a.labels), [50, 50, 50])
    assert a.images.min() >= 0 and a.images.max() <= 1
    # least-squares linear classifier separates the blobs
    X = np.hstack([a.images, np.ones((len(a), 1))])
    W = np.linalg.lstsq(X, np.eye(3)[a.labels], rcond=None)[0]
    assert ((X @ W).argmax(axis=1) == a.labels).mean() == 1.0
    with pytest.raises(ValueError):
        synth_blobs(3, 10, 5, 0.0, seed=0)


def test_batches_sizes_and_coverage():
    ds = Dataset(np.zeros((10, 2)), np.arange(10))
    assert [len(y) for _, y in batches(ds, 4, 0, 0)] == [4, 4, 2]
    ds9 = Dataset(np.zeros((9, 2)), np.arange(9))
    assert [len(y) for _, y in batches(ds9, 4, 0, 0)] == [4, 4]
    seen = np.concatenate([y for _, y in batches(ds, 3, 5, 1)])
    order = epoch_permutation(10, 5, 1)
    np.testing.assert_array_equal(seen, order[:9])  # every sample once, minus the dropped singleton
    first = [y.tolist() for _, y in batches(ds, 4, 0, 0)]
    assert first == [y.tolist() for _, y in batches(ds, 4, 0, 0)]
    assert first != [y.tolist() for _, y in batches(ds, 4, 0, 1)]


def trained_gbn(seed=0):
    model = LeNet(ModelConfig(norm="gbn", seed=seed))
    rng = np.random.default_rng(seed)
    for k in range(4):
        model(rng.random((4, 1, 28, 28)), LayerMode.TRAIN, domain=k)
    return model


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = trained_gbn()
    path = tmp_path / "a.ckpt"
    save_checkpoint(model, path, rng_state={"seed": 0})
    fresh = LeNet(ModelConfig(norm="gbn", seed=99))
    assert load_checkpoint(fresh, path) == {"seed": 0}
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), fresh.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    for b1, b2 in zip(model.gated_blocks, fresh.gated_blocks):
        for r1, r2 in zip(b1.branches, b2.branches):
            assert r1.running_mean.tobytes() == r2.running_mean.tobytes()
            assert r1.running_var.tobytes() == r2.running_var.tobytes()
            assert r1.num_batches_seen == r2.num_batches_seen == 1
    save_checkpoint(fresh, tmp_path / "b.ckpt", rng_state={"seed": 0})
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    model = trained_gbn()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    with pytest.raises(TopologyError, match="num_branches"):
        load_checkpoint(LeNet(ModelConfig(norm="gbn", num_branches=3)), path)
    raw = bytearray(path.read_bytes())
    raw[8] = 9
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(model, tmp_path / "v.ckpt")
    descriptor, arrays = decode_checkpoint(path.read_bytes())
    assert "norm1.branches.3.running_var" in arrays
    assert arrays["norm2.branches.0.num_batches_seen"].dtype == np.int64
    assert descriptor["topology"]["norm"] == "gbn"


def test_checkpoint_descriptor_is_deterministic():
    assert encode_checkpoint(trained_gbn(1)) == encode_checkpoint(trained_gbn(1))


def sample_report():
    return EvalReport(0.987, {"pgd_l1": 0.73, "pgd_l2": 0.932, "pgd_linf": 0.691},
                      {"pgd_l1": "L1", "pgd_l2": "L2", "pgd_linf": "Linf"},
                      {"L1": 0.73, "L2": 0.932, "Linf": 0.691}, 0.689)


def test_metrics_schema_and_round_trip(tmp_path):
    path = tmp_path / "m.jsonl"
    records = sample_report().to_records("run0")
    write_metrics(records, path)
    lines = path.read_text().splitlines()
    assert len(lines) >= 5
    parsed = read_metrics(path)
    for rec in parsed:
        assert {"run_id", "epoch", "metric", "value"} <= set(rec)
        assert set(rec) <= {"run_id", "epoch", "metric", "value", "attack", "domain", "layer"}
    assert [dump_record(r) for r in parsed] == lines
    assert any(r["metric"] == "all_attacks_accuracy" and r["value"] == 0.689 for r in parsed)


def test_metric_values_round_trip_exactly():
    for value in (0.689, 1 / 3, 2.0 ** -40, 0.1 + 0.2):
        rec = json.loads(dump_record(metric_record("r", 1, "m", value)))
        assert rec["value"] == value


def test_write_metrics_reports_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        write_metrics([], tmp_path / "missing" / "m.jsonl")
