"""Fourier-domain low/high-pass filtering of square images.

Spectra are unitary (``norm="ortho"``) 2-D DFTs with the zero frequency
shifted to index ``(N // 2, N // 2)``.  Masks are centred squares:

* ``low(s)`` keeps frequencies with ``max(|i - N//2|, |j - N//2|) < s / 2``;
  ``s == N`` keeps everything (this also admits the Nyquist line of an
  even-sized grid, which sits at distance exactly ``N / 2``).
* ``high(s)`` removes the centred square of side ``N - s``, i.e. it is the
  exact complement of ``low(N - s)``.

Both kinds pass the whole spectrum at ``s == N``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import DimensionError, ValidationError, check4

KINDS = ("low", "high")
SWEEP_HEADER = ("kind", "size", "top1", "top5", "n")


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"filter kind must be one of {KINDS}, got {self.kind!r}")
        if int(self.size) != self.size or self.size < 0:
            raise ValidationError(f"filter size must be a non-negative integer, got {self.size}")

    def validate(self, n: int) -> None:
        if self.size > n:
            raise ValidationError(f"filter size {self.size} exceeds image side {n}")


def _check_square(x: np.ndarray) -> int:
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"frequency filtering needs square images, got shape {x.shape}")
    return x.shape[-1]


def fft2d(x: np.ndarray) -> np.ndarray:
    """Centred unitary spectrum of the last two (square) axes."""
    _check_square(x)
    return np.fft.fftshift(np.fft.fft2(x, norm="ortho"), axes=(-2, -1))


def ifft2d(spectrum: np.ndarray, check_real: bool = False) -> np.ndarray:
    """Inverse of :func:`fft2d`; returns the real part.

    With ``check_real`` a ``ValueError`` is raised when the discarded
    imaginary part exceeds 1e-8 of the result's magnitude.
    """
    _check_square(spectrum)
    out = np.fft.ifft2(np.fft.ifftshift(spectrum, axes=(-2, -1)), norm="ortho")
    if check_real:
        scale = max(float(np.abs(out.real).max(initial=0.0)), 1.0)
        if float(np.abs(out.imag).max(initial=0.0)) > 1e-8 * scale:
            raise ValueError("inverse transform has a significant imaginary part")
    return out.real


def make_mask(spec: FilterSpec, n: int) -> np.ndarray:
    """Binary ``(n, n)`` float mask for ``spec`` on an ``n x n`` centred spectrum."""
    spec.validate(n)
    if spec.kind == "high":
        return 1.0 - make_mask(FilterSpec("low", n - spec.size), n)
    if spec.size == n:
        return np.ones((n, n))
    d = np.abs(np.arange(n) - n // 2)
    cheb = np.maximum(d[:, None], d[None, :])
    return (cheb < spec.size / 2).astype(np.float64)


def apply_filter(images: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Filter every channel of ``(n, c, N, N)`` images; linear, no clamping."""
    check4(images, "images")
    n = _check_square(images)
    mask = make_mask(spec, n)
    out = ifft2d(fft2d(images.astype(np.float64, copy=False)) * mask)
    return out.astype(images.dtype, copy=False)


def save_mask_image(spec: FilterSpec, n: int, path) -> None:
    """Write the mask as an 8-bit grayscale image (kept = white, removed = black)."""
    from PIL import Image

    img = (make_mask(spec, n) * 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def sweep(net, dataset, kind: str, sizes: Iterable[int], batch_size: int = 256) -> list[tuple]:
    """Evaluate ``net`` on ``dataset`` filtered at each size.

    Returns rows ``(kind, size, top1, top5, n)`` in the order of ``sizes``.
    """
    from .train import evaluate

    rows = []
    for size in sizes:
        metrics = evaluate(net, dataset, FilterSpec(kind, int(size)), batch_size=batch_size)
        rows.append((kind, int(size), metrics.top1, metrics.top5, metrics.n))
    return rows


def write_sweep_csv(rows: Sequence[tuple], path_or_file) -> None:
    def _write(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for kind, size, top1, top5, n in rows:
            writer.writerow([kind, size, f"{top1:.6f}", f"{top5:.6f}", n])

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(Path(path_or_file), "w", newline="") as fh:
            _write(fh)
