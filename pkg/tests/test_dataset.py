import numpy as np
import pytest
from PIL import Image

from dualcond.config import DataConfig
from dualcond.dataset import (
    ID_CLASSES, OOD_CLASSES, Corpus, audit_training_view, ManifestError, export_manifest, generate_toy, load_manifest, render,
    sample_rng,
)

SMALL = DataConfig(id_train=6, id_val=2, id_test=3, ood_test=3)


@pytest.fixture(scope="module")
def small():
    return generate_toy(SMALL)


def test_counts_and_labels(small):
    assert len(small) == 5 * (6 + 2 + 3) + 3 * 3
    for k in range(5):
        for split, n in (("train", 6), ("val", 2), ("test", 3)):
            assert ((small.labels == k) & (small.splits == split)).sum() == n
    for k in range(5, 8):
        m = small.labels == k
        assert m.sum() == 3 and (small.splits[m] == "test").all() and (small.ood[m] == 1).all()
    assert set(small.labels[small.ood == 0]) == set(range(5))
    assert len(ID_CLASSES) == 5 and len(OOD_CLASSES) == 3


def test_default_config_arithmetic():
    d = DataConfig()
    assert 5 * (d.id_train + d.id_val + d.id_test) == 6500
    assert 3 * d.ood_test == 600


def test_ids_unique_and_splits_disjoint(small):
    assert len(set(small.ids)) == len(small)
    by_split = {s: set(small.ids[small.splits == s]) for s in ("train", "val", "test")}
    assert not (by_split["train"] & by_split["val"]) and not (by_split["train"] & by_split["test"])
    assert not (by_split["val"] & by_split["test"])


def test_range_shape_and_quantization(small):
    assert small.images.shape[1:] == (1, 32, 32)
    assert small.images.dtype == np.float32
    assert small.images.min() >= -1 and small.images.max() <= 1
    levels = (small.images + 1) * 127.5
    assert np.allclose(levels, np.round(levels), atol=1e-3)


def test_deterministic(small):
    again = generate_toy(SMALL)
    assert np.array_equal(again.images, small.images) and again.hash == small.hash
    other = generate_toy(SMALL, seed=1)
    assert other.hash != small.hash


def test_samples_independent_of_counts():
    big = generate_toy(DataConfig(id_train=8, id_val=2, id_test=3, ood_test=4))
    small = generate_toy(SMALL)
    i = list(big.ids).index("train_c2_00004")
    j = list(small.ids).index("train_c2_00004")
    assert np.array_equal(big.images[i], small.images[j])


def test_intra_class_variation():
    a = render(0, sample_rng(0, 0, "train", 0))
    b = render(0, sample_rng(0, 0, "train", 1))
    assert np.abs(a - b).mean() > 0.01


def test_training_view_excludes_ood(small):
    for split in ("train", "val", "test"):
        v = small.training_view(split)
        assert not v.ood.any()
    everything_train = Corpus(small.ids, small.images, small.labels, np.array(["train"] * len(small)), small.ood)
    assert len(everything_train.training_view("train")) == (small.ood == 0).sum()
    with pytest.raises(ValueError):
        audit_training_view(everything_train)


def test_bad_counts():
    with pytest.raises(ValueError):
        generate_toy(DataConfig(id_train=0))
    with pytest.raises(ValueError):
        generate_toy(DataConfig(ood_test=-1))


def test_manifest_roundtrip(tmp_path, small):
    path = export_manifest(small, tmp_path)
    loaded = load_manifest(path)
    assert loaded.hash == small.hash
    assert load_manifest(tmp_path).hash == small.hash
    order = np.argsort(small.ids)
    assert np.array_equal(loaded.images, small.images[order])
    header = path.read_text().splitlines()[0]
    assert header == "relative_path,label,split,dist_flag"


def _write(tmp_path, rows, size=8):
    (tmp_path / "images").mkdir(exist_ok=True)
    lines = ["relative_path,label,split,dist_flag"]
    for i, (label, split, flag) in enumerate(rows):
        Image.fromarray(np.full((size, size), 10 * i, np.uint8), mode="L").save(tmp_path / f"images/s{i}.png")
        lines.append(f"images/s{i}.png,{label},{split},{flag}")
    (tmp_path / "manifest.csv").write_text("\n".join(lines) + "\n")
    return tmp_path / "manifest.csv"


def test_valid_ten_row_manifest(tmp_path):
    p = _write(tmp_path, [(i % 5, "train", "ID") for i in range(10)])
    c = load_manifest(p)
    assert len(c) == 10 and c.images.shape == (10, 1, 8, 8)
    assert c.images[0].min() == -1.0
    assert load_manifest(p).hash == c.hash


def test_missing_file_names_row(tmp_path):
    p = _write(tmp_path, [(0, "train", "ID"), (1, "train", "ID")])
    (tmp_path / "images/s1.png").unlink()
    with pytest.raises(ManifestError, match="row 3"):
        load_manifest(p)


def test_malformed_rows_all_reported(tmp_path):
    p = _write(tmp_path, [(0, "train", "ID")])
    with open(p, "a") as f:
        f.write("images/s0.png,x,train,ID\n")
        f.write("images/s0.png,1,holdout,ID\n")
        f.write("images/s0.png,1,test,maybe\n")
        f.write("images/s0.png,1\n")
    with pytest.raises(ManifestError) as e:
        load_manifest(p)
    for row in (3, 4, 5, 6):
        assert f"row {row}" in str(e.value)


def test_inconsistent_shapes(tmp_path):
    p = _write(tmp_path, [(0, "train", "ID"), (1, "train", "ID")])
    Image.fromarray(np.zeros((9, 9), np.uint8), mode="L").save(tmp_path / "images/s1.png")
    with pytest.raises(ManifestError, match="row 3"):
        load_manifest(p)
    with pytest.raises(ManifestError, match="row 2"):
        load_manifest(p, image_size=9)


def test_non_grayscale_rejected(tmp_path):
    p = _write(tmp_path, [(0, "train", "ID")])
    Image.fromarray(np.zeros((8, 8, 3), np.uint8), mode="RGB").save(tmp_path / "images/s0.png")
    with pytest.raises(ManifestError, match="grayscale"):
        load_manifest(p)


def test_bad_header_and_missing_manifest(tmp_path):
    (tmp_path / "manifest.csv").write_text("path,label\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "manifest.csv")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nowhere.csv")
