"""PSNR and SSIM for images with values in [0, 1]."""
import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0


def _pair(ref, img):
    ref = np.asarray(ref, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    if ref.shape != img.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {img.shape}")
    return ref, img


def mse_to_psnr(mse):
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def psnr(ref, img):
    """10 log10(1 / MSE) over all pixels and channels; identical images give ``PSNR_CAP``."""
    ref, img = _pair(ref, img)
    return float(mse_to_psnr(float(np.mean((ref - img) ** 2))))


def _gauss(x, sigma, truncate):
    # separable Gaussian filter, valid region only (no padding)
    g = ndimage.gaussian_filter1d
    y = g(x, sigma, axis=0, mode="constant", truncate=truncate)
    return g(y, sigma, axis=1, mode="constant", truncate=truncate)


def ssim(ref, img, win=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM with a Gaussian window, computed per channel and averaged.

    Only window positions fully inside the image contribute.
    """
    ref, img = _pair(ref, img)
    if ref.ndim == 2:
        ref, img = ref[..., None], img[..., None]
    h, w = ref.shape[:2]
    if h < win or w < win:
        raise ValueError(f"image {h}x{w} smaller than the {win}x{win} SSIM window")
    half = win // 2
    truncate = half / sigma
    crop = (slice(half, h - half), slice(half, w - half))
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(ref.shape[2]):
        x, y = ref[..., ch], img[..., ch]
        mx, my = _gauss(x, sigma, truncate)[crop], _gauss(y, sigma, truncate)[crop]
        sxx = _gauss(x * x, sigma, truncate)[crop] - mx * mx
        syy = _gauss(y * y, sigma, truncate)[crop] - my * my
        sxy = _gauss(x * y, sigma, truncate)[crop] - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
