import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import rel_err
from oracles import dft2_direct, lowpass_direct
from scenenet.arch import ArchSpec, build
from scenenet.data import Dataset
from scenenet.freq import (
    FilterSpec,
    apply_filter,
    fft2d,
    ifft2d,
    make_mask,
    save_mask_image,
    sweep,
    write_sweep_csv,
)
from scenenet.tensor import DimensionError, ValidationError
from scenenet.train import evaluate

SIDES = [8, 32, 224]


def test_impulse_has_flat_spectrum():
    x = np.zeros((16, 16))
    x[0, 0] = 1
    mag = np.abs(fft2d(x))
    assert np.allclose(mag, mag[0, 0]) and mag[0, 0] == pytest.approx(1 / 16)


def test_spectrum_matches_direct_dft(rng):
    x = rng.standard_normal((8, 8))
    expected = np.fft.fftshift(dft2_direct(x))
    assert np.abs(fft2d(x) - expected).max() < 1e-12


@pytest.mark.parametrize("n", SIDES)
def test_roundtrip_and_parseval(rng, n):
    x = rng.standard_normal((2, n, n))
    assert rel_err(ifft2d(fft2d(x), check_real=True), x) <= 1e-10
    energy = np.sum(x ** 2)
    assert abs(np.sum(np.abs(fft2d(x)) ** 2) - energy) <= 1e-8 * energy


def test_non_square_rejected():
    with pytest.raises(DimensionError):
        fft2d(np.zeros((4, 6)))
    with pytest.raises(DimensionError):
        apply_filter(np.zeros((1, 1, 4, 6)), FilterSpec("low", 2))


def test_invalid_specs():
    with pytest.raises(ValidationError):
        FilterSpec("band", 3)
    with pytest.raises(ValidationError):
        FilterSpec("low", -1)
    with pytest.raises(ValidationError):
        make_mask(FilterSpec("low", 9), 8)


@pytest.mark.parametrize("n", [7, 8, 32])
def test_mask_endpoints(n):
    assert (make_mask(FilterSpec("low", n), n) == 1).all()
    assert (make_mask(FilterSpec("high", n), n) == 1).all()
    assert (make_mask(FilterSpec("high", 0), n) == 0).all()
    assert (make_mask(FilterSpec("low", 0), n) == 0).all()


@pytest.mark.parametrize("n", [7, 8, 32])
def test_masks_complement(n):
    for s in range(n + 1):
        total = make_mask(FilterSpec("low", s), n) + make_mask(FilterSpec("high", n - s), n)
        assert (total == 1).all()


def test_low_mask_geometry():
    m = make_mask(FilterSpec("low", 4), 8)
    # indices 3, 4, 5 lie within Chebyshev distance 1 of the centre (4, 4)
    expected = np.zeros((8, 8))
    expected[3:6, 3:6] = 1
    assert np.array_equal(m, expected)
    assert make_mask(FilterSpec("low", 1), 8).sum() == 1


def test_low_pass_keeps_constant(rng):
    x = np.full((1, 3, 16, 16), 0.37)
    for s in (1, 5, 16):
        assert rel_err(apply_filter(x, FilterSpec("low", s)), x) < 1e-12


def test_low_pass_matches_direct_summation(rng):
    x = rng.uniform(0, 1, (8, 8))
    out = apply_filter(x[None, None], FilterSpec("low", 4))[0, 0]
    assert rel_err(out, lowpass_direct(x, 4)) < 1e-10
    for s in (0, 3, 7, 8):
        out = apply_filter(x[None, None], FilterSpec("low", s))[0, 0]
        assert np.abs(out - lowpass_direct(x, s)).max() < 1e-10


@pytest.mark.parametrize("n", SIDES)
def test_complement_reconstruction(rng, n):
    x = rng.uniform(0, 1, (1, 3, n, n))
    for s in (0, n // 4, n // 2, 3 * n // 4, n):
        total = apply_filter(x, FilterSpec("low", s)) + apply_filter(x, FilterSpec("high", n - s))
        assert rel_err(total, x) <= 1e-8
    assert rel_err(apply_filter(x, FilterSpec("low", n)), x) <= 1e-8
    assert rel_err(apply_filter(x, FilterSpec("high", n)), x) <= 1e-8


def test_filtered_output_is_real(rng):
    # Odd n has a symmetric centred mask; the discarded imaginary part must vanish.
    x = rng.uniform(0, 1, (9, 9))
    for s in range(10):
        ifft2d(fft2d(x) * make_mask(FilterSpec("low", s), 9), check_real=True)


images = st.integers(0, 2**32 - 1).map(lambda seed: np.random.default_rng(seed).standard_normal((2, 3, 12, 12)))
specs = st.builds(FilterSpec, st.sampled_from(["low", "high"]), st.integers(0, 12))


@settings(max_examples=40, deadline=None)
@given(images, images, st.floats(-3, 3), st.floats(-3, 3), specs)
def test_filter_is_linear(x, y, a, b, spec):
    lhs = apply_filter(a * x + b * y, spec)
    rhs = a * apply_filter(x, spec) + b * apply_filter(y, spec)
    assert np.abs(lhs - rhs).max() <= 1e-8 * max(1.0, np.abs(rhs).max())


@settings(max_examples=40, deadline=None)
@given(images, specs)
def test_filter_is_idempotent(x, spec):
    once = apply_filter(x, spec)
    assert np.abs(apply_filter(once, spec) - once).max() <= 1e-8 * max(1.0, np.abs(once).max())


@settings(max_examples=20, deadline=None)
@given(images, st.integers(0, 12))
def test_complement_property(x, s):
    total = apply_filter(x, FilterSpec("low", s)) + apply_filter(x, FilterSpec("high", 12 - s))
    assert rel_err(total, x) <= 1e-8


def test_mask_image(tmp_path):
    save_mask_image(FilterSpec("low", 8), 32, tmp_path / "m.png")
    arr = np.asarray(Image.open(tmp_path / "m.png"))
    assert arr.shape == (32, 32)
    assert np.array_equal(arr == 255, make_mask(FilterSpec("low", 8), 32) == 1)


@pytest.fixture(scope="module")
def tiny():
    net = build(ArchSpec(18, 0.25, 4, input_size=(16, 16), stem="small"), seed=0)
    rng = np.random.default_rng(3)
    ds = Dataset(rng.uniform(0, 1, (12, 3, 16, 16)).astype(np.float32), np.arange(12) % 4)
    return net, ds


def test_sweep_full_size_equals_unfiltered(tiny):
    net, ds = tiny
    base = evaluate(net, ds)
    for kind in ("low", "high"):
        (row,) = sweep(net, ds, kind, [16])
        assert row == (kind, 16, base.top1, base.top5, 12)


def test_sweep_zero_low_pass_is_constant_input(tiny):
    net, ds = tiny
    (row,) = sweep(net, ds, "low", [0])
    logits = net.forward(np.zeros((1, 3, 16, 16), dtype=np.float32))
    pred = int(np.argmax(logits[0]))
    assert row[2] == np.mean(ds.labels == pred)


def test_sweep_rows_and_csv(tiny):
    net, ds = tiny
    rows = sweep(net, ds, "high", [8, 2, 16])
    assert [r[1] for r in rows] == [8, 2, 16]
    buf = io.StringIO()
    write_sweep_csv(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "kind,size,top1,top5,n"
    assert len(lines) == 4 and lines[1].startswith("high,8,")


def test_sweep_rejects_mismatched_dataset(tiny):
    net, _ = tiny
    ds = Dataset(np.zeros((2, 3, 8, 8), np.float32), np.array([0, 1]))
    with pytest.raises(ValidationError):
        sweep(net, ds, "low", [4])
