"""Image quality metrics: PSNR and windowed SSIM (with analytic gradient).

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
dynamic range 1.0; maps are cropped by the window radius before averaging,
matching the common reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 99.0

_WIN = 11
_PAD = _WIN // 2
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_C1 = (_K1 * 1.0) ** 2
_C2 = (_K2 * 1.0) ** 2

_offsets = np.arange(_WIN) - _PAD
_KERNEL = np.exp(-0.5 * (_offsets / _SIGMA) ** 2)
_KERNEL = _KERNEL / _KERNEL.sum()


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) in dB, capped at PSNR_CAP_DB (identical images hit the cap)."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _filter2(x: np.ndarray) -> np.ndarray:
    """Separable window filter; only the interior (cropped) values are used."""
    y = correlate1d(x, _KERNEL, axis=0, mode="constant")
    y = correlate1d(y, _KERNEL, axis=1, mode="constant")
    return y[_PAD:-_PAD, _PAD:-_PAD]


def _filter2_adjoint(y: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _filter2 (zero-embed, then correlate with the symmetric window)."""
    full = np.zeros(shape)
    full[_PAD:-_PAD, _PAD:-_PAD] = y
    full = correlate1d(full, _KERNEL, axis=0, mode="constant")
    full = correlate1d(full, _KERNEL, axis=1, mode="constant")
    return full


def _ssim_channel(a: np.ndarray, b: np.ndarray, want_grad: bool):
    mu_a = _filter2(a)
    mu_b = _filter2(b)
    var_a = _filter2(a * a) - mu_a * mu_a
    var_b = _filter2(b * b) - mu_b * mu_b
    cov = _filter2(a * b) - mu_a * mu_b

    a1 = 2.0 * mu_a * mu_b + _C1
    a2 = 2.0 * cov + _C2
    b1 = mu_a * mu_a + mu_b * mu_b + _C1
    b2 = var_a + var_b + _C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(np.mean(smap))
    if not want_grad:
        return value, None

    # d mean(S) / d a, pushed back through the window filters
    npix = smap.size
    u = 1.0 / npix
    ds_dmu_a = (a2 / b2) * (2.0 * mu_b * b1 - 2.0 * mu_a * a1) / (b1 * b1)
    ds_dvar_a = -(a1 * a2) / (b1 * b2 * b2)
    ds_dcov = 2.0 * a1 / (b1 * b2)

    grad = _filter2_adjoint(u * ds_dmu_a, a.shape)
    grad += 2.0 * a * _filter2_adjoint(u * ds_dvar_a, a.shape)
    grad -= 2.0 * _filter2_adjoint(u * ds_dvar_a * mu_a, a.shape)
    grad += b * _filter2_adjoint(u * ds_dcov, a.shape)
    grad -= _filter2_adjoint(u * ds_dcov * mu_b, a.shape)
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over window positions and channels."""
    value, _ = ssim_with_grad(a, b, want_grad=False)
    return value


def ssim_with_grad(a: np.ndarray, b: np.ndarray, want_grad: bool = True):
    """(ssim, d ssim / d a); gradient is None when want_grad is False."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a = a[:, :, np.newaxis]
        b = b[:, :, np.newaxis]
    if a.ndim != 3:
        raise ValueError("images must be HxW or HxWxC")
    if min(a.shape[0], a.shape[1]) < _WIN:
        raise ValueError(f"image min side {min(a.shape[:2])} smaller than the {_WIN}px window")
    channels = a.shape[2]
    values = []
    grad = np.zeros_like(a) if want_grad else None
    for ch in range(channels):
        v, g = _ssim_channel(a[:, :, ch], b[:, :, ch], want_grad)
        values.append(v)
        if want_grad:
            grad[:, :, ch] = g / channels
    return float(np.mean(values)), grad


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM plus means."""

    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)
    names: list = field(default_factory=list)

    def add(self, name: str, a: np.ndarray, b: np.ndarray) -> None:
        self.names.append(name)
        self.psnr_values.append(psnr(a, b))
        self.ssim_values.append(ssim(a, b))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values)) if self.psnr_values else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values)) if self.ssim_values else float("nan")

    def to_dict(self) -> dict:
        return {
            "images": [
                {"name": n, "psnr_db": p, "ssim": s}
                for n, p, s in zip(self.names, self.psnr_values, self.ssim_values)
            ],
            "mean_psnr_db": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
        }
