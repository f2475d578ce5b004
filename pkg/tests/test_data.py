import json

import numpy as np
import pytest
from scipy import stats

from crossfuse.data import (CORE_GAP, DENT, HOLE, DatasetError, GenConfig, class_pixel_counts, gen_dataset,
                            gen_sample, load_arrays, load_dataset, read_manifest)
from crossfuse.tensorfile import TensorFileError, decode_tensor, encode_tensor, read_tensor, write_tensor


def core_contrast(image: np.ndarray, blob) -> float:
    """Extra darkness of a blob's centre relative to its mid-radius ring."""
    n = image.shape[-1]
    yy, xx = np.mgrid[0:n, 0:n]
    t = np.hypot(yy - blob.cy, xx - blob.cx) / blob.radius
    img = image[0]
    return float(img[(t >= 0.5) & (t < 0.7)].mean() - img[t < 0.3].mean())


def test_radii_are_log_uniform_ks():
    cfg = GenConfig(samples=400, seed=1)
    radii = []
    for i in range(cfg.samples):
        radii += [b.radius for b in gen_sample(cfg, 1000 + i).blobs]
    lo, hi = np.log(cfg.scale_range)
    res = stats.kstest(np.log(radii), stats.uniform(loc=lo, scale=hi - lo).cdf)
    assert res.pvalue > 0.01, res


def test_every_sample_has_blobs_of_mixed_scale():
    cfg = GenConfig(samples=200)
    radii = np.array([b.radius for i in range(200) for b in gen_sample(cfg, i).blobs])
    assert radii.min() < 4 and radii.max() > 14
    counts = [len(gen_sample(cfg, i).blobs) for i in range(200)]
    assert min(counts) >= 1 and max(counts) <= 5


def test_mask_matches_blob_discs_and_blobs_do_not_overlap():
    cfg = GenConfig()
    for seed in range(30):
        s = gen_sample(cfg, seed)
        n = cfg.image_size
        yy, xx = np.mgrid[0:n, 0:n]
        want = np.zeros((n, n), dtype=np.int64)
        for b in s.blobs:
            want[np.hypot(yy - b.cy, xx - b.cx) < b.radius] = b.label
        assert np.array_equal(s.mask, want)
        for i, a in enumerate(s.blobs):
            for b in s.blobs[i + 1:]:
                assert np.hypot(a.cy - b.cy, a.cx - b.cx) >= a.radius + b.radius


def test_generation_is_deterministic():
    cfg = GenConfig()
    a, b = gen_sample(cfg, 7), gen_sample(cfg, 7)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    assert a.image.dtype == np.float32 and a.image.shape == (1, 64, 64)
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0


def test_oracle_with_blob_geometry_separates_classes_perfectly():
    # a rule with access to blob centres and radii: holes have a darker core
    cfg = GenConfig(noise_sigma=0.01, scale_range=(4.0, 20.0))
    threshold = CORE_GAP * (1 - cfg.class_similarity) / 2
    n_right = n_total = 0
    for seed in range(150):
        s = gen_sample(cfg, seed)
        for b in s.blobs:
            pred = HOLE if core_contrast(s.image, b) > threshold else DENT
            n_right += pred == b.label
            n_total += 1
    assert n_total > 200
    assert n_right == n_total


def test_similarity_dial_monotone():
    gaps = []
    for sim in (0.0, 0.4, 0.8, 1.0):
        cfg = GenConfig(class_similarity=sim, noise_sigma=0.01, scale_range=(5.0, 20.0))
        hole, dent = [], []
        for seed in range(60):
            s = gen_sample(cfg, seed)
            for b in s.blobs:
                (hole if b.label == HOLE else dent).append(core_contrast(s.image, b))
        gaps.append(np.mean(hole) - np.mean(dent))
    assert all(a > b for a, b in zip(gaps, gaps[1:])), gaps
    assert abs(gaps[-1]) < 0.01


@pytest.mark.parametrize("kwargs", [{"scale_range": (0.5, 4)}, {"scale_range": (8, 4)}, {"scale_range": (2, 40)},
                                    {"class_similarity": 1.5}, {"noise_sigma": -1}, {"blob_count": (3, 2)}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GenConfig(**kwargs)


def test_dataset_roundtrip_and_manifest_counts(tmp_path):
    cfg = GenConfig(samples=12, seed=4)
    m = gen_dataset(cfg, tmp_path)
    images, masks = load_arrays(tmp_path)
    assert images.shape == (12, 1, 64, 64) and masks.shape == (12, 64, 64)
    for i, seed in enumerate(e["seed"] for e in m["samples"]):
        s = gen_sample(cfg, seed)
        assert np.array_equal(images[i], s.image) and np.array_equal(masks[i], s.mask)
    assert class_pixel_counts(masks) == m["class_pixels"]
    assert sum(m["class_pixels"]) == 12 * 64 * 64
    assert read_manifest(tmp_path)["config"] == cfg.to_dict()


def test_regeneration_is_byte_identical(tmp_path):
    cfg = GenConfig(samples=3, seed=9)
    gen_dataset(cfg, tmp_path / "a")
    gen_dataset(cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_empty_dataset(tmp_path):
    gen_dataset(GenConfig(samples=0), tmp_path)
    images, masks = load_arrays(tmp_path)
    assert images.shape == (0, 1, 64, 64) and masks.shape == (0, 64, 64)


def test_corrupted_file_is_named(tmp_path):
    gen_dataset(GenConfig(samples=3), tmp_path)
    write_tensor(tmp_path / "0001_img.cft", np.zeros((1, 32, 32), np.float32))
    with pytest.raises(DatasetError, match="0001_img.cft"):
        list(load_dataset(tmp_path))
    (tmp_path / "0001_img.cft").unlink()
    with pytest.raises(DatasetError, match="0001_img.cft"):
        list(load_dataset(tmp_path))


def test_mask_disagreeing_with_manifest_is_named(tmp_path):
    gen_dataset(GenConfig(samples=3), tmp_path)
    mask = read_tensor(tmp_path / "0002_mask.cft")
    mask[0, 0] = 2 if mask[0, 0] != 2 else 1
    write_tensor(tmp_path / "0002_mask.cft", mask)
    with pytest.raises(DatasetError, match="0002_mask.cft"):
        list(load_dataset(tmp_path))


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_arrays(tmp_path)


def test_tensorfile_roundtrip_and_layout():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = encode_tensor(x)
    assert blob[:4] == b"CFT1" and blob[4] == 2
    assert blob[5:13] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(blob) == 13 + 6 * 4
    assert np.array_equal(decode_tensor(blob), x)
    with pytest.raises(TensorFileError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(TensorFileError):
        decode_tensor(blob[:-1])
    assert json.dumps(decode_tensor(encode_tensor(np.float32(3.5))).tolist()) == "3.5"
