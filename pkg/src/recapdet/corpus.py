"""Document-image corpus handling: manifests, deterministic splits, patches.

A corpus on disk is a JSON-lines manifest next to its image files.  Each
manifest row carries provenance (template, label, acquisition channel, device
class, resolution group) that flows through patches into triplet construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PATCH_SIZE = 224

LABELS = ("genuine", "recaptured")
CHANNELS = ("capture", "print_scan", "display_capture")
DEVICE_CLASSES = ("scanner", "phone", "synthetic")
RESOLUTION_GROUPS = ("low", "high")

# Acquisition-device grouping: scanners produce high-resolution corpora,
# phones low; synthetic rows declare their group in the manifest.
DEVICE_GROUP = {"scanner": "high", "phone": "low"}

MANIFEST_FIELDS = (
    "path",
    "id",
    "template_id",
    "label",
    "channel",
    "device_class",
    "resolution_group",
    "dataset_id",
)


class ManifestError(ValueError):
    """A manifest row violates the schema or a corpus invariant."""


@dataclass(frozen=True)
class ManifestRow:
    path: str
    id: str
    template_id: str
    label: str
    channel: str
    device_class: str
    resolution_group: str
    dataset_id: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path

    def __len__(self) -> int:
        return len(self.rows)

    def ids(self) -> list[str]:
        return [r.id for r in self.rows]

    def resolve(self, row: ManifestRow) -> Path:
        return self.root / row.path


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    stratify_by: tuple[str, ...] = ("template_id", "label")

    def __post_init__(self):
        if any(r < 0 for r in self.ratios):
            raise ValueError(f"negative ratio in {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios {self.ratios} do not sum to 1")


@dataclass(frozen=True)
class DocumentImage:
    id: str
    pixels: np.ndarray  # HxWx3 uint8
    template_id: str
    label: str
    channel: str
    device_class: str = "synthetic"
    resolution_group: str = "high"
    dataset_id: str = "synthetic"

    def __post_init__(self):
        h, w = self.pixels.shape[:2]
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"image {self.id}: expected HxWx3 pixels, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"image {self.id}: expected uint8 pixels, got {self.pixels.dtype}")
        if h < PATCH_SIZE or w < PATCH_SIZE:
            raise ValueError(f"image {self.id}: size {h}x{w} below minimum {PATCH_SIZE}")
        if self.label == "genuine" and self.channel != "capture":
            raise ValueError(f"image {self.id}: genuine label requires capture channel")


@dataclass(frozen=True)
class Patch:
    source_id: str
    origin: tuple[int, int]  # (row, col)
    pixels: np.ndarray  # 224x224x3 uint8
    template_id: str
    label: str
    channel: str
    device_class: str
    resolution_group: str

    @property
    def key(self) -> str:
        return f"{self.source_id}@{self.origin[0]},{self.origin[1]}"


@dataclass(frozen=True)
class PatchFilterConfig:
    """Thresholds separating content-bearing patches from flat background."""

    std_threshold: float = 8.0
    edge_fraction: float = 0.02
    gradient_threshold: float = 16.0


def load_manifest(path) -> Manifest:
    """Parse and validate a JSON-lines manifest.

    Every row must carry exactly the manifest fields, ids must be unique,
    referenced image files must exist, and label/channel and device/group
    consistency rules must hold.  Errors name the offending row number
    (1-based).
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    rows: list[ManifestRow] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"row {lineno}: invalid JSON ({exc})") from exc
            missing = set(MANIFEST_FIELDS) - set(record)
            extra = set(record) - set(MANIFEST_FIELDS)
            if missing:
                raise ManifestError(f"row {lineno}: missing fields {sorted(missing)}")
            if extra:
                raise ManifestError(f"row {lineno}: unknown fields {sorted(extra)}")
            row = ManifestRow(**{k: str(record[k]) for k in MANIFEST_FIELDS})
            _validate_row(row, lineno, root)
            if row.id in seen:
                raise ManifestError(
                    f"row {lineno}: duplicate id {row.id!r} (first seen at row {seen[row.id]})"
                )
            seen[row.id] = lineno
            rows.append(row)
    return Manifest(rows=rows, root=root)


def _validate_row(row: ManifestRow, lineno: int, root: Path):
    if row.label not in LABELS:
        raise ManifestError(f"row {lineno}: unknown label {row.label!r}")
    if row.channel not in CHANNELS:
        raise ManifestError(f"row {lineno}: unknown channel {row.channel!r}")
    if row.device_class not in DEVICE_CLASSES:
        raise ManifestError(f"row {lineno}: unknown device_class {row.device_class!r}")
    if row.resolution_group not in RESOLUTION_GROUPS:
        raise ManifestError(f"row {lineno}: unknown resolution_group {row.resolution_group!r}")
    if row.label == "genuine" and row.channel != "capture":
        raise ManifestError(f"row {lineno}: genuine label requires capture channel")
    expected_group = DEVICE_GROUP.get(row.device_class)
    if expected_group is not None and row.resolution_group != expected_group:
        raise ManifestError(
            f"row {lineno}: device_class {row.device_class!r} implies "
            f"resolution_group {expected_group!r}, got {row.resolution_group!r}"
        )
    if not (root / row.path).exists():
        raise ManifestError(f"row {lineno}: image file not found: {row.path}")


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for row in manifest.rows:
            fh.write(json.dumps({k: getattr(row, k) for k in MANIFEST_FIELDS}) + "\n")
    return path


def load_image(manifest: Manifest, row: ManifestRow) -> DocumentImage:
    """Decode a manifest row's raster into a DocumentImage."""
    with Image.open(manifest.resolve(row)) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return DocumentImage(
        id=row.id,
        pixels=pixels,
        template_id=row.template_id,
        label=row.label,
        channel=row.channel,
        device_class=row.device_class,
        resolution_group=row.resolution_group,
        dataset_id=row.dataset_id,
    )


def _allocate(count: int, ratios: tuple[float, float, float]) -> list[int]:
    """Largest-remainder allocation of ``count`` rows to the three splits.

    Remainder ties go to the later split so that tiny strata still populate
    the test set before the validation set.
    """
    quotas = [count * r for r in ratios]
    sizes = [int(q) for q in quotas]
    leftover = count - sum(sizes)
    order = sorted(range(3), key=lambda i: (quotas[i] - sizes[i], i), reverse=True)
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_corpus(manifest: Manifest, spec: SplitSpec) -> tuple[Manifest, Manifest, Manifest]:
    """Deterministic stratified partition into (train, val, test) manifests."""
    if not manifest.rows:
        raise ManifestError("cannot split an empty manifest")
    strata: dict[tuple, list[ManifestRow]] = {}
    for row in manifest.rows:
        key = tuple(getattr(row, f) for f in spec.stratify_by)
        strata.setdefault(key, []).append(row)
    parts: tuple[list[ManifestRow], ...] = ([], [], [])
    rng = np.random.default_rng(spec.seed & 0xFFFFFFFFFFFFFFFF)
    for key in sorted(strata):
        rows = sorted(strata[key], key=lambda r: r.id)
        perm = rng.permutation(len(rows))
        shuffled = [rows[i] for i in perm]
        sizes = _allocate(len(rows), spec.ratios)
        offset = 0
        for part, size in zip(parts, sizes):
            part.extend(shuffled[offset : offset + size])
            offset += size
    return tuple(Manifest(rows=part, root=manifest.root) for part in parts)


def patch_origins(height: int, width: int, stride: int) -> list[tuple[int, int]]:
    """Row-major sliding-window origins with the last window clamped inside."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")

    def axis(extent: int) -> list[int]:
        span = extent - PATCH_SIZE
        n = int(np.ceil(span / stride)) + 1
        return [min(i * stride, span) for i in range(n)]

    return [(r, c) for r in axis(height) for c in axis(width)]


def extract_patches(image: DocumentImage, stride: int) -> list[Patch]:
    """Cut the image into 224x224 patches at the given stride."""
    h, w = image.pixels.shape[:2]
    patches = []
    for r, c in patch_origins(h, w, stride):
        patches.append(
            Patch(
                source_id=image.id,
                origin=(r, c),
                pixels=image.pixels[r : r + PATCH_SIZE, c : c + PATCH_SIZE],
                template_id=image.template_id,
                label=image.label,
                channel=image.channel,
                device_class=image.device_class,
                resolution_group=image.resolution_group,
            )
        )
    return patches


def _grayscale(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def is_discriminative(patch: Patch, config: PatchFilterConfig = PatchFilterConfig()) -> bool:
    """True for patches with enough contrast and edge content to train on.

    Grayscale standard deviation must reach ``std_threshold`` and the
    fraction of pixels whose forward-difference gradient magnitude exceeds
    ``gradient_threshold`` must reach ``edge_fraction``.
    """
    gray = _grayscale(patch.pixels)
    if gray.std() < config.std_threshold:
        return False
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :-1] = np.diff(gray, axis=1)
    gy[:-1, :] = np.diff(gray, axis=0)
    magnitude = np.hypot(gx, gy)
    return float(np.mean(magnitude > config.gradient_threshold)) >= config.edge_fraction


@dataclass
class PatchStore:
    """Discriminative patches per image id, plus ids skipped entirely."""

    patches: dict[str, list[Patch]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @classmethod
    def from_manifest(
        cls,
        manifest: Manifest,
        stride: int = 112,
        filter_config: PatchFilterConfig = PatchFilterConfig(),
    ) -> "PatchStore":
        store = cls()
        for row in manifest.rows:
            image = load_image(manifest, row)
            kept = [p for p in extract_patches(image, stride) if is_discriminative(p, filter_config)]
            if kept:
                store.patches[row.id] = kept
            else:
                store.skipped.append(row.id)
        return store

    def for_rows(self, rows) -> dict[str, list[Patch]]:
        return {r.id: self.patches[r.id] for r in rows if r.id in self.patches}

    def all_patches(self) -> list[Patch]:
        return [p for plist in self.patches.values() for p in plist]


def subset_by_ids(manifest: Manifest, ids) -> Manifest:
    wanted = set(ids)
    return Manifest(rows=[r for r in manifest.rows if r.id in wanted], root=manifest.root)
