"""Synthetic document generation and acquisition-channel simulation.

Provides an ID-card-like template generator plus three imaging channels:
plain capture, print-and-scan recapture (halftone texture, heavier noise) and
display-and-capture recapture (pixel-grid modulation, color shift).  Every
channel is deterministic given its parameters, so corpora regenerate
byte-identically from a manifest's seeds.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .corpus import DocumentImage, Manifest, ManifestRow, write_manifest

_MASK64 = 0xFFFFFFFFFFFFFFFF

HALFTONE_MODES = ("none", "ordered_dither", "error_diffusion")

# Display-channel validation: the color matrix must deviate from identity by
# at least this much, and the pixel-grid modulation uses this amplitude.
COLOR_DEVIATION_MIN = 0.02
GRID_AMPLITUDE = 25.0


class ChannelConfigError(ValueError):
    """Channel parameters violate that channel's physical constraints."""


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, *indices: int) -> int:
    """SplitMix-style mixing so parallel per-image streams never collide."""
    s = master & _MASK64
    for i in indices:
        s = _splitmix64((s ^ (i & _MASK64)) & _MASK64)
    return s


def _string_seed(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


@dataclass(frozen=True)
class ChannelParams:
    halftone: str = "none"
    halftone_cell: int = 4
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    color_matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    gamma: float = 1.0
    grid_period: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.halftone not in HALFTONE_MODES:
            raise ChannelConfigError(f"unknown halftone mode {self.halftone!r}")
        if self.halftone == "ordered_dither" and (
            self.halftone_cell < 2 or self.halftone_cell & (self.halftone_cell - 1)
        ):
            raise ChannelConfigError(f"halftone_cell must be a power of two >= 2, got {self.halftone_cell}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ChannelConfigError("blur_sigma and noise_sigma must be >= 0")
        matrix = np.asarray(self.color_matrix, dtype=np.float64)
        if matrix.shape != (3, 3):
            raise ChannelConfigError(f"color_matrix must be 3x3, got {matrix.shape}")
        sums = matrix.sum(axis=1)
        if np.any(sums < 0.5) or np.any(sums > 1.5):
            raise ChannelConfigError(f"color_matrix row sums {sums.tolist()} outside [0.5, 1.5]")
        if self.halftone != "none" and self.grid_period is not None:
            raise ChannelConfigError("grid_period only applies to display channels (halftone must be 'none')")
        if self.grid_period is not None and self.grid_period < 2:
            raise ChannelConfigError(f"grid_period must be >= 2, got {self.grid_period}")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.color_matrix, dtype=np.float64)

    def color_deviation(self) -> float:
        return float(np.abs(self.matrix - np.eye(3)).max())


def default_capture_params(seed: int = 0) -> ChannelParams:
    return ChannelParams(blur_sigma=0.3, noise_sigma=1.0, seed=seed)


def default_print_scan_params(seed: int = 0) -> ChannelParams:
    return ChannelParams(
        halftone="ordered_dither",
        halftone_cell=4,
        blur_sigma=1.0,
        noise_sigma=4.0,
        gamma=1.1,
        color_matrix=((0.90, 0.05, 0.05), (0.05, 0.90, 0.05), (0.05, 0.05, 0.90)),
        seed=seed,
    )


def default_display_params(seed: int = 0) -> ChannelParams:
    # blur and noise sit between capture and print; the pixel grid and the
    # blue-leaning matrix carry the display-specific structure
    return ChannelParams(
        blur_sigma=0.55,
        noise_sigma=2.0,
        grid_period=3,
        color_matrix=((0.97, 0.03, 0.00), (0.00, 0.97, 0.03), (0.03, 0.05, 1.02)),
        seed=seed,
    )


@dataclass(frozen=True)
class SynthSpec:
    n_templates: int = 6
    n_genuine_per_template: int = 4
    n_recaptured_per_template: int = 8
    channel_mix: tuple[float, float] = (0.5, 0.5)  # (print_scan, display_capture)
    image_size: tuple[int, int] = (224, 224)
    master_seed: int = 0

    def __post_init__(self):
        if min(self.n_templates, self.n_genuine_per_template, self.n_recaptured_per_template) < 1:
            raise ValueError("all synthesis counts must be >= 1")
        if abs(sum(self.channel_mix) - 1.0) > 1e-9:
            raise ValueError(f"channel_mix {self.channel_mix} does not sum to 1")
        if min(self.channel_mix) < 0:
            raise ValueError("channel_mix proportions must be non-negative")


@dataclass(frozen=True)
class ChannelBank:
    """The per-channel parameter sets a corpus is generated with.

    ``jitter`` emulates device variety on the recapture channels only: each
    recaptured image's blur/noise are scaled by U(1-j, 1+j), gamma is
    perturbed by U(-j/4, +j/4), and print images draw their dither cell from
    {2, 4, 8}, all from the image's own seed.  Captures stay exact so the
    genuine cluster remains tight.
    """

    capture: ChannelParams = field(default_factory=default_capture_params)
    print_scan: ChannelParams = field(default_factory=default_print_scan_params)
    display_capture: ChannelParams = field(default_factory=default_display_params)
    jitter: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.jitter < 1.0:
            raise ChannelConfigError(f"jitter must be in [0, 1), got {self.jitter}")


def _jitter_params(params: ChannelParams, jitter: float, seed: int, vary_cell: bool) -> ChannelParams:
    if jitter <= 0.0:
        return params
    rng = np.random.default_rng(derive_seed(seed, 9))
    updates = {
        "blur_sigma": params.blur_sigma * rng.uniform(1 - jitter, 1 + jitter),
        "noise_sigma": params.noise_sigma * rng.uniform(1 - jitter, 1 + jitter),
        "gamma": params.gamma + rng.uniform(-jitter / 4, jitter / 4),
    }
    if vary_cell and params.halftone == "ordered_dither":
        updates["halftone_cell"] = int(rng.choice([2, 4, 8]))
    return replace(params, **updates)


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def make_template(template_id: str, size: tuple[int, int], seed: int) -> DocumentImage:
    """Render a deterministic ID-card-like document: header band, glyph
    blocks standing in for text lines, and a textured photo region.
    """
    h, w = size
    if h < 224 or w < 224:
        raise ValueError(f"template size {size} below minimum 224x224")
    rng = np.random.default_rng(derive_seed(seed, _string_seed(template_id)))

    base = rng.uniform(170, 240, size=3)
    header = rng.uniform(60, 160, size=3)
    ink = rng.uniform(10, 70, size=3)
    canvas = np.ones((h, w, 3), dtype=np.float64) * base

    header_h = max(24, h // 7)
    canvas[:header_h] = header
    # logo block in the header
    logo_w = max(20, w // 8)
    canvas[4 : header_h - 4, 8 : 8 + logo_w] = rng.uniform(120, 250, size=3)

    # photo region on the right: low-pass noise around a portrait-ish tone
    photo_side = min(h, w) // 3
    pr, pc = header_h + 8, w - photo_side - 10
    texture = gaussian_filter(rng.normal(0.0, 1.0, (photo_side, photo_side, 3)), sigma=(5, 5, 0))
    texture = texture / (np.abs(texture).max() + 1e-12)
    photo_base = rng.uniform(90, 200, size=3)
    canvas[pr : pr + photo_side, pc : pc + photo_side] = photo_base + 60.0 * texture
    canvas[pr : pr + photo_side, pc : pc + 2] = ink
    canvas[pr : pr + photo_side, pc + photo_side - 2 : pc + photo_side] = ink
    canvas[pr : pr + 2, pc : pc + photo_side] = ink
    canvas[pr + photo_side - 2 : pr + photo_side, pc : pc + photo_side] = ink

    # pseudo-text: rows of dark glyph blocks of varying width
    line_h = 9
    y = header_h + 12
    text_right = pc - 12
    while y + line_h < h - 8:
        x = 12
        while x < text_right - 10:
            glyph_w = int(rng.integers(6, 26))
            gap = int(rng.integers(3, 9))
            if rng.random() < 0.82:
                canvas[y : y + line_h - 2, x : min(x + glyph_w, text_right)] = ink
            x += glyph_w + gap
        y += line_h + int(rng.integers(4, 9))

    return DocumentImage(
        id=f"{template_id}-master",
        pixels=_to_uint8(canvas),
        template_id=template_id,
        label="genuine",
        channel="capture",
    )


def _bayer_matrix(n: int) -> np.ndarray:
    if n == 2:
        return np.array([[0, 2], [3, 1]], dtype=np.float64)
    sub = _bayer_matrix(n // 2)
    return np.block([[4 * sub, 4 * sub + 2], [4 * sub + 3, 4 * sub + 1]])


def _ordered_dither(pixels: np.ndarray, cell: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    bayer = _bayer_matrix(cell)
    thresholds = (bayer + 0.5) / (cell * cell) * 255.0
    reps = (math.ceil(h / cell), math.ceil(w / cell))
    tiled = np.tile(thresholds, reps)[:h, :w]
    return np.where(pixels > tiled[..., None], 255.0, 0.0)


def _error_diffusion(pixels: np.ndarray) -> np.ndarray:
    # Floyd-Steinberg weights, raster order, all channels at once
    work = pixels.astype(np.float64).copy()
    h, w = work.shape[:2]
    out = np.zeros_like(work)
    for y in range(h):
        for x in range(w):
            old = work[y, x]
            new = np.where(old >= 128.0, 255.0, 0.0)
            out[y, x] = new
            err = old - new
            if x + 1 < w:
                work[y, x + 1] += err * (7 / 16)
            if y + 1 < h:
                if x > 0:
                    work[y + 1, x - 1] += err * (3 / 16)
                work[y + 1, x] += err * (5 / 16)
                if x + 1 < w:
                    work[y + 1, x + 1] += err * (1 / 16)
    return out


def _halftone(pixels: np.ndarray, params: ChannelParams) -> np.ndarray:
    if params.halftone == "ordered_dither":
        return _ordered_dither(pixels, params.halftone_cell)
    return _error_diffusion(pixels)


def _capture_chain(pixels: np.ndarray, params: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """Second-imaging chain: additive noise, optics blur, gamma, color mixing."""
    out = pixels.astype(np.float64)
    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, out.shape)
    if params.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(params.blur_sigma, params.blur_sigma, 0))
    if params.gamma != 1.0:
        out = np.power(np.clip(out, 0.0, 255.0) / 255.0, params.gamma) * 255.0
    out = out @ params.matrix.T
    return out


def _derived(image: DocumentImage, pixels: np.ndarray, label: str, channel: str, id_suffix: str = "") -> DocumentImage:
    return DocumentImage(
        id=image.id + id_suffix,
        pixels=_to_uint8(pixels),
        template_id=image.template_id,
        label=label,
        channel=channel,
        device_class=image.device_class,
        resolution_group=image.resolution_group,
        dataset_id=image.dataset_id,
    )


def simulate_capture(image: DocumentImage, params: ChannelParams) -> DocumentImage:
    """First imaging of a physical document: yields a genuine capture."""
    if params.halftone != "none":
        raise ChannelConfigError("capture channel does not halftone; set halftone='none'")
    rng = np.random.default_rng(derive_seed(params.seed, 1))
    out = _capture_chain(image.pixels, params, rng)
    return _derived(image, out, label="genuine", channel="capture")


def simulate_print_scan_recapture(image: DocumentImage, params: ChannelParams) -> DocumentImage:
    """Print-and-reacquire attack: halftone rendition, then a second capture."""
    if params.halftone == "none":
        raise ChannelConfigError("print channel requires a halftone mode")
    print_rng = np.random.default_rng(derive_seed(params.seed, 2))
    capture_rng = np.random.default_rng(derive_seed(params.seed, 3))
    printed = _halftone(image.pixels.astype(np.float64), params)
    if params.blur_sigma > 0:
        printed = gaussian_filter(printed, sigma=(params.blur_sigma, params.blur_sigma, 0))
    if params.noise_sigma > 0:
        printed = printed + print_rng.normal(0.0, params.noise_sigma, printed.shape)
    out = _capture_chain(np.clip(printed, 0.0, 255.0), params, capture_rng)
    return _derived(image, out, label="recaptured", channel="print_scan", id_suffix="+ps")


def simulate_display_capture_recapture(image: DocumentImage, params: ChannelParams) -> DocumentImage:
    """Display-and-reacquire attack: pixel-grid modulation, color shift, second capture."""
    if params.halftone != "none":
        raise ChannelConfigError("display channel does not halftone; set halftone='none'")
    if params.grid_period is None:
        raise ChannelConfigError("display channel requires grid_period")
    if params.color_deviation() < COLOR_DEVIATION_MIN:
        raise ChannelConfigError(
            f"display channel requires a color matrix deviating from identity by >= {COLOR_DEVIATION_MIN}"
        )
    rng = np.random.default_rng(derive_seed(params.seed, 4))
    h, w = image.pixels.shape[:2]
    rows = np.cos(2 * np.pi * np.arange(h) / params.grid_period)
    cols = np.cos(2 * np.pi * np.arange(w) / params.grid_period)
    grid = (rows[:, None] + cols[None, :]) / 2.0
    displayed = image.pixels.astype(np.float64) + GRID_AMPLITUDE * grid[..., None]
    out = _capture_chain(displayed, params, rng)
    return _derived(image, out, label="recaptured", channel="display_capture", id_suffix="+dc")


def generate_corpus(
    spec: SynthSpec,
    out_dir,
    channels: ChannelBank = ChannelBank(),
    dataset_id: str = "synth",
    template_prefix: str = "T",
    template_seed_master: int | None = None,
) -> Manifest:
    """Write a synthetic corpus (PNG images + manifest.jsonl) under ``out_dir``.

    Per-image seeds derive from ``(master_seed, template_index, image_index)``
    so generation order never affects content.  ``template_seed_master`` lets
    two corpora share document templates while drawing fresh channel noise.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    tmaster = spec.master_seed if template_seed_master is None else template_seed_master
    n_ps = int(spec.channel_mix[0] * spec.n_recaptured_per_template + 0.5)

    rows = []
    for t in range(spec.n_templates):
        template_id = f"{template_prefix}{t:02d}"
        template = make_template(template_id, spec.image_size, seed=derive_seed(tmaster, t, 0))
        outputs = []
        for j in range(spec.n_genuine_per_template):
            seed = derive_seed(spec.master_seed, t, 1 + j)
            img = simulate_capture(template, replace(channels.capture, seed=seed))
            outputs.append((f"{template_id}-g{j:02d}", img))
        for j in range(spec.n_recaptured_per_template):
            seed = derive_seed(spec.master_seed, t, 1 + spec.n_genuine_per_template + j)
            if j < n_ps:
                params = _jitter_params(replace(channels.print_scan, seed=seed), channels.jitter, seed, vary_cell=True)
                img = simulate_print_scan_recapture(template, params)
                suffix = "ps"
            else:
                params = _jitter_params(replace(channels.display_capture, seed=seed), channels.jitter, seed, vary_cell=False)
                img = simulate_display_capture_recapture(template, params)
                suffix = "dc"
            outputs.append((f"{template_id}-r{j:02d}-{suffix}", img))
        for image_id, img in outputs:
            rel = f"images/{image_id}.png"
            Image.fromarray(img.pixels).save(out_dir / rel, format="PNG")
            rows.append(
                ManifestRow(
                    path=rel,
                    id=image_id,
                    template_id=template_id,
                    label=img.label,
                    channel=img.channel,
                    device_class="synthetic",
                    resolution_group="high",
                    dataset_id=dataset_id,
                )
            )
    manifest = Manifest(rows=rows, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
