import json

import numpy as np
import pytest
import torch
from PIL import Image
from scipy import ndimage, stats

from regmamba import convert
from regmamba.data import (DanglingPathError, DuplicatePairIdError, ImagePair, MalformedRecordError, ManifestError,
                           ManifestRecord, SynthConfig, add_gaussian_noise, crop_template, iterate_batches,
                           load_image, load_manifest, load_pairs, pseudo_sar, render_optical, save_image, speckle,
                           synth_dataset, synth_pair, write_manifest, write_synth)
from regmamba.matcher import l2_error, locate_peak, zncc_map


def write_lines(path, objs):
    path.write_text("".join((o if isinstance(o, str) else json.dumps(o)) + "\n" for o in objs))
    return path


@pytest.fixture
def images(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(3):
        save_image(tmp_path / f"o{i}.png", rng.uniform(size=(20, 20)))
        save_image(tmp_path / f"s{i}.png", rng.uniform(size=(8, 8)))
    return tmp_path


# manifest

def test_empty_manifest(tmp_path):
    m = load_manifest(write_lines(tmp_path / "m.jsonl", []))
    assert len(m) == 0 and m.root == tmp_path


def test_three_record_fixture_in_order(images):
    recs = [{"pair_id": f"p{i}", "optical_path": f"o{i}.png", "sar_path": f"s{i}.png", "gt_row": i, "gt_col": 2 * i}
            for i in (2, 0, 1)]
    pairs = load_pairs(load_manifest(write_lines(images / "m.jsonl", recs)))
    assert [p.pair_id for p in pairs] == ["p2", "p0", "p1"]
    assert pairs[0].gt_offset == (2, 4) and pairs[0].optical.shape == (20, 20)


def test_manifest_roundtrip(images):
    recs = [ManifestRecord(images / "o0.png", images / "s0.png", "a", 1, 2),
            ManifestRecord(images / "o1.png", images / "s1.png", "b")]
    write_manifest(images / "m.jsonl", recs)
    m = load_manifest(images / "m.jsonl")
    assert [r.gt_offset for r in m.records] == [(1, 2), None]


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nope.jsonl")


def test_duplicate_pair_id_named(images):
    rec = {"pair_id": "dup", "optical_path": "o0.png", "sar_path": "s0.png"}
    with pytest.raises(DuplicatePairIdError, match="dup"):
        load_manifest(write_lines(images / "m.jsonl", [rec, rec]))


def test_dangling_path_named(images):
    rec = {"pair_id": "ghost", "optical_path": "missing.png", "sar_path": "s0.png"}
    with pytest.raises(DanglingPathError, match="ghost"):
        load_manifest(write_lines(images / "m.jsonl", [rec]))


@pytest.mark.parametrize("line", [
    "{not json",
    "[1, 2]",
    json.dumps({"pair_id": "x", "optical_path": "o0.png"}),
    json.dumps({"pair_id": "x", "optical_path": "o0.png", "sar_path": "s0.png", "gt_row": 1}),
    json.dumps({"pair_id": "x", "optical_path": "o0.png", "sar_path": "s0.png", "gt_row": -1, "gt_col": 0}),
])
def test_malformed_records(images, line):
    with pytest.raises(MalformedRecordError):
        load_manifest(write_lines(images / "m.jsonl", [line]))


def test_error_types_are_distinct():
    kinds = {MalformedRecordError, DuplicatePairIdError, DanglingPathError}
    assert len(kinds) == 3 and all(issubclass(k, ManifestError) for k in kinds)


def test_gt_out_of_range_rejected(images):
    rec = {"pair_id": "far", "optical_path": "o0.png", "sar_path": "s0.png", "gt_row": 13, "gt_col": 0}
    with pytest.raises(ValueError, match="far"):
        load_pairs(load_manifest(write_lines(images / "m.jsonl", [rec])))


# images

def test_image_io(tmp_path):
    a = np.random.default_rng(0).uniform(size=(5, 7))
    save_image(tmp_path / "a.png", a)
    back = load_image(tmp_path / "a.png")
    assert back.shape == (5, 7) and np.abs(back - a).max() <= 0.5 / 65535 + 1e-12
    Image.fromarray(np.full((3, 3), 255, np.uint8)).save(tmp_path / "b.png")
    assert (load_image(tmp_path / "b.png") == 1.0).all()
    Image.fromarray(np.full((3, 3, 3), 51, np.uint8)).save(tmp_path / "c.png")
    assert np.allclose(load_image(tmp_path / "c.png"), 0.2)
    Image.fromarray(np.full((2, 2), 0.25, np.float32)).save(tmp_path / "d.tif")
    assert np.allclose(load_image(tmp_path / "d.tif"), 0.25)


# cropping

def test_crop_full_size():
    img = np.arange(16.0).reshape(4, 4)
    tpl, gt = crop_template(img, 4, np.random.default_rng(0))
    assert gt == (0, 0) and np.array_equal(tpl, img)


def test_crop_replay_and_content():
    img = np.random.default_rng(1).uniform(size=(30, 30))
    a = crop_template(img, 12, np.random.default_rng(5))
    b = crop_template(img, 12, np.random.default_rng(5))
    assert a[1] == b[1] and np.array_equal(a[0], b[0])
    r, c = a[1]
    assert np.array_equal(a[0], img[r:r + 12, c:c + 12])


def test_crop_too_large():
    with pytest.raises(ValueError):
        crop_template(np.zeros((5, 8)), 6, np.random.default_rng(0))


def test_crop_offsets_uniform():
    rng = np.random.default_rng(0)
    img = np.zeros((256, 256))
    offs = np.array([crop_template(img, 192, rng)[1] for _ in range(10_000)])
    assert offs.min() == 0 and offs.max() == 64
    edges = np.linspace(0, 65, 9)
    counts, _, _ = np.histogram2d(offs[:, 0], offs[:, 1], bins=[edges, edges])
    per_bin = np.histogram(np.arange(65), bins=edges)[0] / 65
    expected = np.outer(per_bin, per_bin) * len(offs)
    assert stats.chisquare(counts.ravel(), expected.ravel()).pvalue > 1e-3


# synthesis

def test_synth_deterministic():
    cfg = SynthConfig()
    a = synth_pair(cfg, np.random.default_rng([0, 3]))
    b = synth_pair(cfg, np.random.default_rng([0, 3]))
    assert np.array_equal(a.optical, b.optical) and np.array_equal(a.sar, b.sar) and a.gt_offset == b.gt_offset
    assert synth_dataset(cfg, 2, offset=3)[0].sar.tobytes() == synth_dataset(cfg, 4)[3].sar.tobytes()


def test_synth_bounds_and_shapes():
    for p in synth_dataset(SynthConfig(), 20):
        assert p.optical.shape == (64, 64) and p.sar.shape == (48, 48)
        assert 0 <= p.optical.min() and p.optical.max() <= 1 and 0 <= p.sar.min() and p.sar.max() <= 1
        assert 0 <= p.gt_offset[0] <= 16 and 0 <= p.gt_offset[1] <= 16


def test_speckle_large_looks_converges():
    opt = render_optical(SynthConfig(), np.random.default_rng(0))
    clean = pseudo_sar(opt, 2.0)
    noisy = speckle(clean, 10 ** 6, np.random.default_rng(1))
    mask = clean > 1e-3
    assert (np.abs(noisy - clean)[mask] / clean[mask]).max() <= 0.01


def test_speckle_statistics():
    looks = 4
    s = speckle(np.full((500, 500), 0.2), looks, np.random.default_rng(0)) / 0.2
    assert abs(s.mean() - 1) < 0.01 and abs(s.var() - 1 / looks) < 0.01


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(template_size=64)
    with pytest.raises(ValueError):
        SynthConfig(speckle_looks=0)


def test_modality_gap_with_shared_structure():
    corr, agree = [], []
    for p in synth_dataset(SynthConfig(), 100):
        r, c = p.gt_offset
        o = p.optical[r:r + 48, c:c + 48]
        corr.append(abs(np.corrcoef(o.ravel(), p.sar.ravel())[0, 1]))
        gy, gx = ndimage.sobel(o, 0), ndimage.sobel(o, 1)
        s = ndimage.gaussian_filter(p.sar, 1.0)
        hy, hx = ndimage.sobel(s, 0), ndimage.sobel(s, 1)
        mo, ms = np.hypot(gx, gy), np.hypot(hx, hy)
        edges = mo > np.percentile(mo, 80)
        # orientation agreement modulo sign; independent orientations give 2/pi
        agree.append((np.abs(gx * hx + gy * hy) / (mo * ms + 1e-12))[edges].mean())
    assert float(np.mean(corr)) < 0.9 and max(corr) < 0.9
    assert float(np.mean(agree)) > 2 / np.pi + 0.05


def test_raw_ncc_success_band():
    pairs = synth_dataset(SynthConfig(), 100)
    ok = 0
    for p in pairs:
        res = locate_peak(zncc_map(torch.from_numpy(p.sar), torch.from_numpy(p.optical)))
        ok += l2_error(res.predicted, p.gt_offset) <= 2
    assert 0.60 <= ok / len(pairs) <= 0.95


def test_write_synth_roundtrip(tmp_path):
    pairs = synth_dataset(SynthConfig(), 3)
    path = write_synth(tmp_path / "corpus", pairs)
    back = load_pairs(load_manifest(path))
    assert [p.pair_id for p in back] == [p.pair_id for p in pairs]
    for a, b in zip(pairs, back):
        assert a.gt_offset == b.gt_offset and np.abs(a.optical - b.optical).max() < 1e-4


def test_image_pair_invariant():
    with pytest.raises(ValueError):
        ImagePair(np.zeros((10, 10)), np.zeros((4, 4)), (7, 0), "bad")
    ImagePair(np.zeros((10, 10)), np.zeros((4, 4)), (6, 6), "ok")


# noise

def test_noise_zero_is_identity():
    img = np.random.default_rng(0).uniform(size=(8, 8))
    assert np.array_equal(add_gaussian_noise(img, 0, np.random.default_rng(1)), img)


def test_noise_statistics_30pct():
    img = np.full((1000, 1000), 0.5)
    noisy = add_gaussian_noise(img, 30, np.random.default_rng(0))
    assert abs(noisy.mean() - 0.5) <= 0.01 and noisy.min() >= 0 and noisy.max() <= 1
    # unclipped fraction matches a N(0, 0.3) field
    inside = np.mean((noisy > 0) & (noisy < 1))
    assert abs(inside - (2 * stats.norm.cdf(0.5 / np.sqrt(0.3)) - 1)) < 0.005


def test_noise_small_variance_std():
    noisy = add_gaussian_noise(np.full((1000, 1000), 0.5), 0.5, np.random.default_rng(0))
    assert abs(noisy.std() - np.sqrt(0.005)) < 1e-3


def test_noise_reproducible_and_validated():
    img = np.full((16, 16), 0.3)
    a = add_gaussian_noise(img, 5, np.random.default_rng(9))
    assert np.array_equal(a, add_gaussian_noise(img, 5, np.random.default_rng(9)))
    with pytest.raises(ValueError):
        add_gaussian_noise(img, -1, np.random.default_rng(0))


# batching

def test_batches_pure_and_complete():
    a = [b.tolist() for b in iterate_batches(10, 4, seed=3, epoch=1)]
    assert a == [b.tolist() for b in iterate_batches(10, 4, seed=3, epoch=1)]
    assert sorted(sum(a, [])) == list(range(10)) and [len(b) for b in a] == [4, 4, 2]
    assert a != [b.tolist() for b in iterate_batches(10, 4, seed=3, epoch=2)]


# dataset converter

def test_convert_paired_dirs(tmp_path):
    for sub in ("opt", "sar"):
        (tmp_path / sub).mkdir()
    for name in ("a.png", "b.png"):
        save_image(tmp_path / "opt" / name, np.zeros((4, 4)))
    save_image(tmp_path / "sar" / "a.png", np.zeros((4, 4)))
    recs = convert.paired_dirs(tmp_path)
    assert [r.pair_id for r in recs] == ["a"]


def test_convert_sen12(tmp_path):
    scene = tmp_path / "ROIs1158_spring"
    for sub in ("s1_1", "s2_1"):
        (scene / sub).mkdir(parents=True)
    save_image(scene / "s1_1" / "ROIs1158_spring_s1_1_p30.png", np.zeros((8, 8)))
    save_image(scene / "s2_1" / "ROIs1158_spring_s2_1_p30.png", np.zeros((8, 8)))
    save_image(scene / "s1_1" / "ROIs1158_spring_s1_1_p31.png", np.zeros((8, 8)))
    assert convert.main(["sen12", str(tmp_path), str(tmp_path / "m.jsonl")]) == 0
    m = load_manifest(tmp_path / "m.jsonl")
    assert [r.pair_id for r in m.records] == ["ROIs1158_spring_1_p30"]
    assert m.records[0].optical_path.parent.name == "s2_1"
