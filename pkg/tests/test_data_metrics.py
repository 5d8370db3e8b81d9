import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from assoclearn.data import (SIZE, blur, gen_dfd_like, gen_gld_like, gen_task, make_face, make_landscape, make_rng,
                             style)
from assoclearn.imageio import (ImageFormatError, Manifest, decode_image, encode_image, load_image,
                                load_manifest, load_task, save_image, save_manifest, save_task)
from assoclearn.metrics import PSNR_CAP, psnr, ssim


# --- brute-force metric oracles ----------------------------------------------


def psnr_loops(a, b):
    total, n = 0.0, 0
    for v, w in zip(a.reshape(-1), b.reshape(-1)):
        total += (v - w) ** 2
        n += 1
    mse = total / n
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def ssim_loops(a, b, win=7):
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - win + 1):
            for j in range(a.shape[2] - win + 1):
                pa = [a[ch, i + u, j + v] for u in range(win) for v in range(win)]
                pb = [b[ch, i + u, j + v] for u in range(win) for v in range(win)]
                n = len(pa)
                ma, mb = sum(pa) / n, sum(pb) / n
                va = sum((p - ma) ** 2 for p in pa) / n
                vb = sum((p - mb) ** 2 for p in pb) / n
                cov = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / n
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def test_metrics_match_brute_force_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        assert abs(psnr(a, b) - psnr_loops(a, b)) < 1e-9
        assert abs(ssim(a, b) - ssim_loops(a, b)) < 1e-9


def test_metric_closed_forms():
    a = np.random.default_rng(1).uniform(0.2, 0.8, size=(16, 16))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    b = a + 0.1
    c = a + 0.1 / math.sqrt(2)  # half the MSE
    assert psnr(a, c) - psnr(a, b) == pytest.approx(10 * math.log10(2), abs=1e-9)
    assert ssim(a, a) == 1.0
    expected = (2 * 0.16 + 1e-4) * 9e-4 / ((0.04 + 0.64 + 1e-4) * 9e-4)
    got = ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.8))
    assert got == pytest.approx(expected, abs=1e-12) and round(got, 4) == 0.4707


def test_ssim_matches_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        ref = metrics.structural_similarity(a, b, win_size=7, data_range=1.0, use_sample_covariance=False)
        # scikit-image averages over the interior after cropping (win-1)/2 pixels of the filtered map
        assert abs(ssim(a, b) - ref) < 1e-9


def test_metric_errors():
    with pytest.raises(ValueError, match="shapes"):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError, match="smaller"):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3]))
@settings(max_examples=40, deadline=None)
def test_metric_properties(seed, channels):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(channels, 16, 16)), rng.uniform(size=(channels, 16, 16))
    s = ssim(a, b)
    assert -1 <= s <= 1
    assert s == pytest.approx(ssim(b, a), abs=1e-15)
    assert ssim(a, b) == pytest.approx(ssim(a.transpose(0, 2, 1), b.transpose(0, 2, 1)), abs=1e-12)
    assert psnr(a, b) == pytest.approx(psnr(a.transpose(0, 2, 1), b.transpose(0, 2, 1)), abs=1e-12)
    assert psnr(a, b) >= 0
    closer = a + 0.5 * (b - a)
    assert psnr(a, closer) > psnr(a, b)
    assert ssim(a, b) < 1.0


# --- generators ------------------------------------------------------------------


def test_occlusion_task_has_one_zero_block():
    t = gen_dfd_like(2, 100, seed=3, n_test=0)
    for x, y in zip(t.x_train, t.y_train):
        diff = x[0] != y[0]
        zeros = np.argwhere(x[0] == 0)
        top, left = zeros.min(axis=0)
        block = np.zeros_like(diff)
        block[top:top + 6, left:left + 6] = True
        assert np.all(x[0][block] == 0)
        assert not np.any(diff & ~block)
    assert np.all(t.y_train > 0)  # the face background keeps a positive floor


def test_strong_blur_distorts_more_than_mild_blur():
    rng = make_rng(9)
    worse = 0
    for _ in range(1000):
        y = make_face(rng)
        worse += np.mean((blur(y, 2.0) - y) ** 2) > np.mean((blur(y, 1.0) - y) ** 2)
    assert worse >= 950


def test_landscape_chain_and_range():
    t1 = gen_gld_like(1, 20, seed=4, n_test=5)
    rng = make_rng(4, 22, 1, 1)
    base = np.stack([make_landscape(rng) for _ in range(20)])
    np.testing.assert_array_equal(t1.x_train, base)
    np.testing.assert_array_equal(t1.y_train, np.stack([style(1, b) for b in base]))
    t2 = gen_gld_like(2, 20, seed=4, n_test=5)
    rng = make_rng(4, 22, 2, 1)
    base2 = [make_landscape(rng) for _ in range(20)]
    np.testing.assert_array_equal(t2.x_train, np.stack([style(1, b) for b in base2]))
    np.testing.assert_array_equal(t2.y_train, np.stack([style(2, b) for b in base2]))
    for t in (t1, t2, gen_gld_like(3, 20, seed=4, n_test=5)):
        for arr in (t.x_train, t.y_train, t.x_test, t.y_test):
            assert arr.min() >= 0 and arr.max() <= 1


def test_second_style_is_not_an_involution():
    rng = make_rng(5)
    differs = 0
    for _ in range(100):
        b = make_landscape(rng)
        differs += not np.allclose(style(2, style(2, b)), style(2, b))
    assert differs == 100


@pytest.mark.parametrize("suite,tasks", [("dfd_like", 4), ("gld_like", 3)])
def test_generators_are_deterministic_and_split_disjoint(suite, tasks):
    for task in range(1, tasks + 1):
        a, b = gen_task(suite, task, 10, 7, 5), gen_task(suite, task, 10, 7, 5)
        np.testing.assert_array_equal(a.x_train, b.x_train)
        np.testing.assert_array_equal(a.y_test, b.y_test)
        assert not any(np.array_equal(p, q) for p in a.y_train for q in a.y_test)
        assert a.image_shape == ((1 if suite == "dfd_like" else 3), SIZE, SIZE)
    with pytest.raises(ValueError):
        gen_task(suite, tasks + 1, 1, 0)


def test_prng_test_vector():
    # PCG64 seeded through SeedSequence([0, 1]); documented in the README
    assert make_rng(0, 1).integers(2**32, size=3).tolist() == [2242647589, 3821399010, 4264680396]


# --- image files -----------------------------------------------------------------


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3]))
@settings(max_examples=30, deadline=None)
def test_image_round_trip(seed, channels):
    img = np.random.default_rng(seed).uniform(size=(channels, 5, 7))
    back = decode_image(encode_image(img))
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 65535


def test_image_files_and_format_errors(tmp_path):
    img = np.linspace(0, 1, 48).reshape(3, 4, 4)
    save_image(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
    np.testing.assert_allclose(load_image(tmp_path / "a.ppm"), img, atol=1 / 65535)
    blob = encode_image(img[:1])
    with pytest.raises(ImageFormatError, match="magic.*offset 0"):
        decode_image(b"P2" + blob[2:])
    with pytest.raises(ImageFormatError, match="truncated.*offset"):
        decode_image(blob[:-1])
    with pytest.raises(ImageFormatError, match="maxval"):
        decode_image(blob.replace(b"65535", b"00255", 1))


def test_manifest_and_task_round_trip(tmp_path):
    m = Manifest("dfd_like", 2, 11, 1, 1, [("train", 0, "x.pgm", "y.pgm"), ("test", 0, "u.pgm", "v.pgm")])
    save_manifest(tmp_path / "m.tsv", m)
    assert load_manifest(tmp_path / "m.tsv") == m
    task = gen_task("gld_like", 2, 4, 1, 3)
    save_task(task, tmp_path / "t")
    back = load_task(tmp_path / "t")
    assert (back.suite, back.task_id, back.seed) == ("gld_like", 2, 1)
    assert np.max(np.abs(back.x_train - task.x_train)) <= 1 / 65535
    assert np.max(np.abs(back.y_test - task.y_test)) <= 1 / 65535
