import numpy as np
import pytest

from recapdet.corpus import PATCH_SIZE, Patch


def make_patch(
    source_id="img-0",
    origin=(0, 0),
    fill=None,
    pixels=None,
    template_id="T00",
    label="genuine",
    channel="capture",
    device_class="synthetic",
    resolution_group="high",
):
    if pixels is None:
        pixels = np.full((PATCH_SIZE, PATCH_SIZE, 3), 128 if fill is None else fill, dtype=np.uint8)
    return Patch(
        source_id=source_id,
        origin=origin,
        pixels=pixels,
        template_id=template_id,
        label=label,
        channel=channel,
        device_class=device_class,
        resolution_group=resolution_group,
    )


@pytest.fixture
def patch_factory():
    return make_patch


def high_freq_fraction(pixels, cutoff=0.25):
    """Fraction of spectral energy above `cutoff` x Nyquist (radially), DC excluded."""
    gray = np.asarray(pixels, dtype=np.float64).mean(axis=2)
    spectrum = np.abs(np.fft.fftshift(np.fft.fft2(gray))) ** 2
    h, w = gray.shape
    cy, cx = h // 2, w // 2
    yy, xx = np.mgrid[0:h, 0:w]
    radius = np.hypot((yy - cy) / (h / 2), (xx - cx) / (w / 2))
    spectrum[cy, cx] = 0.0
    total = spectrum.sum()
    return float(spectrum[radius > cutoff].sum() / total) if total > 0 else 0.0


@pytest.fixture
def hf_fraction():
    return high_freq_fraction
