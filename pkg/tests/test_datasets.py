import numpy as np
import pytest
import torch
from PIL import Image

from sepmark.datasets import (DatasetError, ImageFolderDataset, SplitManifest,
                              denormalize_to_u8, ingest, iter_batches, load_batch,
                              load_image, normalize_u8, save_image, split)


def test_normalize_endpoints():
    assert normalize_u8(np.array([255])).item() == pytest.approx(1.0)
    assert normalize_u8(np.array([0])).item() == pytest.approx(-1.0)


def test_normalization_invertible_for_all_levels():
    levels = np.arange(256, dtype=np.uint8)
    assert (denormalize_to_u8(normalize_u8(levels)) == levels).all()


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arr = rng.integers(0, 256, size=(20, 20, 3), dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "a.png")
    tensor = load_image(tmp_path / "a.png")
    assert tensor.shape == (3, 20, 20)
    save_image(tensor, tmp_path / "b.png")
    assert (np.asarray(Image.open(tmp_path / "b.png")) == arr).all()


def test_ingest_counts_and_resizes(face_dir):
    ds = ingest(face_dir, 16)
    assert len(ds) == 48
    img, ident = ds[0]
    assert img.shape == (3, 16, 16)
    assert ident.endswith(".png")


def test_ingest_skips_unreadable(tmp_path, caplog):
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "ok.png")
    (tmp_path / "broken.png").write_bytes(b"not a png at all")
    (tmp_path / "notes.txt").write_text("ignored")
    ds = ingest(tmp_path, None)
    assert ds.identifiers == ["ok.png"]


def test_ingest_empty_is_fatal(tmp_path):
    with pytest.raises(DatasetError):
        ingest(tmp_path, 32)
    with pytest.raises(DatasetError):
        ingest(tmp_path / "missing", 32)


def test_split_deterministic():
    ids = [f"img_{i}.png" for i in range(300)]
    a = split(ids, seed=4)
    b = split(ids, seed=4)
    assert a == b
    c = split(ids, seed=5)
    assert c != a


def test_split_partition_properties():
    ids = [f"img_{i}.png" for i in range(1000)]
    m = split(ids, ratios=(0.8, 0.1, 0.1), seed=0)
    union = set(m.train) | set(m.val) | set(m.test)
    assert union == set(ids)
    assert len(m.train) + len(m.val) + len(m.test) == 1000
    # hash-uniformity: sizes within +-2% of corpus size around the targets
    assert abs(len(m.train) - 800) <= 20
    assert abs(len(m.val) - 100) <= 20
    assert abs(len(m.test) - 100) <= 20


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split(["a"], ratios=(0.5, 0.2, 0.2))


def test_manifest_round_trip(tmp_path):
    m = SplitManifest(train=["a.png", "b.png"], val=["c.png"], test=["d.png"], seed=9)
    m.save(tmp_path / "manifest.tsv")
    loaded = SplitManifest.load(tmp_path / "manifest.tsv")
    assert loaded == m


def test_subset_and_batch_order(face_dir):
    ds = ingest(face_dir, 16)
    chosen = ds.identifiers[5:9]
    sub = ds.subset(chosen)
    batch, idents = load_batch(sub, [0, 1, 2, 3])
    assert idents == chosen
    assert batch.shape == (4, 3, 16, 16)
    # identity ordering is preserved through batching
    single, ident = sub[2]
    assert ident == chosen[2]
    assert torch.equal(batch[2], single)


def test_subset_unknown_id(face_dir):
    ds = ingest(face_dir, 16)
    with pytest.raises(DatasetError):
        ds.subset(["nope.png"])


def test_iter_batches_deterministic(face_dir):
    ds = ingest(face_dir, 16)
    run1 = [ids for _imgs, ids in iter_batches(ds, 8, seed=3)]
    run2 = [ids for _imgs, ids in iter_batches(ds, 8, seed=3)]
    assert run1 == run2
    run3 = [ids for _imgs, ids in iter_batches(ds, 8, seed=4)]
    assert run3 != run1


def test_iter_batches_drop_last(face_dir):
    ds = ingest(face_dir, 16)  # 48 images
    batches = list(iter_batches(ds, 20, drop_last=True))
    assert len(batches) == 2
    assert all(b.shape[0] == 20 for b, _ in batches)
