"""Feature datasets: binary format, reference pools, masks, synthetic data.

The on-disk format is little-endian throughout:

    magic   4 bytes ASCII "RSFD"
    version u32 = 1
    H0, W0, L  u32 each, then L triples (H_l, W_l, C_l) as u32
    n_images   u32
    per image: class_id u32; label u8; mask H0*W0 bytes (0/1, row-major);
               then for each layer H_l*W_l*C_l float32, row-major with
               channel fastest.

Any trailing bytes after the last image are rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, IoError, ValidationError

MAGIC = b"RSFD"
VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    h: int
    w: int
    c: int

    @property
    def positions(self) -> int:
        return self.h * self.w


@dataclass
class ImageRecord:
    class_id: int
    label: int
    mask: np.ndarray              # (H0, W0) uint8 in {0, 1}
    features: list[np.ndarray]    # per layer, (H_l, W_l, C_l) float32


@dataclass
class FeatureDataset:
    h0: int
    w0: int
    layer_specs: list[LayerSpec]
    images: list[ImageRecord] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.layer_specs)

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ValidationError("dataset must declare at least one layer")
        for idx, img in enumerate(self.images):
            if img.mask.shape != (self.h0, self.w0):
                raise ValidationError(f"image {idx}: mask shape {img.mask.shape} "
                                      f"!= ({self.h0}, {self.w0})")
            if not np.isin(img.mask, (0, 1)).all():
                raise ValidationError(f"image {idx}: mask values outside {{0,1}}")
            has_anomaly = bool(img.mask.any())
            if img.label not in (0, 1):
                raise ValidationError(f"image {idx}: label {img.label} not in {{0,1}}")
            if img.label == 1 and not has_anomaly:
                raise ValidationError(f"image {idx}: label 1 but mask is empty")
            if img.label == 0 and has_anomaly:
                raise ValidationError(f"image {idx}: label 0 but mask is non-zero")
            if len(img.features) != self.n_layers:
                raise ValidationError(f"image {idx}: {len(img.features)} feature "
                                      f"maps, expected {self.n_layers}")
            for l, (fm, spec) in enumerate(zip(img.features, self.layer_specs)):
                if fm.shape != (spec.h, spec.w, spec.c):
                    raise ValidationError(
                        f"image {idx}: layer {l} shape {fm.shape} != "
                        f"({spec.h}, {spec.w}, {spec.c})")
                if not np.isfinite(fm).all():
                    raise ValidationError(f"image {idx}: layer {l} has non-finite "
                                          "values")


@dataclass
class ReferencePool:
    """Per-layer flat matrices of normal reference feature vectors."""

    layers: list[np.ndarray]      # layer l: (n_refs * H_l * W_l, C_l) float32
    n_refs: int
    image_indices: tuple[int, ...]


def write_dataset(dataset: FeatureDataset, path) -> None:
    dataset.validate()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack("<III", dataset.h0, dataset.w0, dataset.n_layers))
    for spec in dataset.layer_specs:
        parts.append(struct.pack("<III", spec.h, spec.w, spec.c))
    parts.append(struct.pack("<I", len(dataset.images)))
    for img in dataset.images:
        parts.append(struct.pack("<IB", img.class_id, img.label))
        parts.append(np.ascontiguousarray(img.mask, dtype=np.uint8).tobytes())
        for fm in img.features:
            parts.append(np.ascontiguousarray(fm, dtype="<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise IoError(f"truncated payload: need {n} bytes at offset "
                          f"{self.offset}, have {len(self.payload) - self.offset}")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_dataset(path) -> FeatureDataset:
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rd = _Reader(payload)
    if rd.take(4) != MAGIC:
        raise FormatError(f"bad magic in {path}")
    version = rd.u32()
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    h0, w0, n_layers = rd.u32(), rd.u32(), rd.u32()
    specs = [LayerSpec(rd.u32(), rd.u32(), rd.u32()) for _ in range(n_layers)]
    n_images = rd.u32()
    images = []
    for _ in range(n_images):
        class_id = rd.u32()
        label = rd.u8()
        mask = np.frombuffer(rd.take(h0 * w0), dtype=np.uint8).reshape(h0, w0)
        features = []
        for spec in specs:
            count = spec.h * spec.w * spec.c
            fm = np.frombuffer(rd.take(count * 4), dtype="<f4")
            features.append(fm.reshape(spec.h, spec.w, spec.c).copy())
        images.append(ImageRecord(class_id, label, mask.copy(), features))
    if rd.offset != len(payload):
        raise FormatError(f"{len(payload) - rd.offset} trailing bytes")
    dataset = FeatureDataset(h0, w0, specs, images)
    dataset.validate()
    return dataset


def build_reference_pool(dataset: FeatureDataset, image_indices) -> ReferencePool:
    """Stack every per-position vector of the referenced normal images.

    Rows appear in (image, row, column) order per layer.
    """
    indices = list(image_indices)
    if not indices:
        raise ContractError("reference index list is empty")
    if len(set(indices)) != len(indices):
        raise ContractError("reference indices must be distinct")
    for i in indices:
        if i < 0 or i >= len(dataset.images):
            raise ContractError(f"reference index {i} out of range")
        if dataset.images[i].label != 0:
            raise ContractError(f"image {i} is abnormal and cannot be a reference")
    layers = []
    for l, spec in enumerate(dataset.layer_specs):
        rows = [dataset.images[i].features[l].reshape(-1, spec.c) for i in indices]
        layers.append(np.concatenate(rows, axis=0).astype(np.float32))
    return ReferencePool(layers, len(indices), tuple(indices))


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Max-pool a binary mask over the uniform block partition of its grid."""
    h0, w0 = mask.shape
    ht, wt = target
    if ht > h0 or wt > w0:
        raise ContractError(f"target {target} larger than source {mask.shape}")
    row_starts = (np.arange(ht) * h0) // ht
    col_starts = (np.arange(wt) * w0) // wt
    pooled = np.maximum.reduceat(mask, row_starts, axis=0)
    pooled = np.maximum.reduceat(pooled, col_starts, axis=1)
    return pooled.astype(np.uint8)


@dataclass
class SynthSpec:
    n_classes: int
    images_per_class: int
    anomaly_fraction: float
    layer_specs: list[LayerSpec]
    class_separation: float
    anomaly_magnitude: float
    seed: int


def synth_dataset(spec: SynthSpec) -> FeatureDataset:
    """Generate a multi-class dataset with planted anomalies.

    Each class draws position features as mu_k + sigma_k * eps with a
    class mean of norm ``class_separation`` and class-specific per-channel
    scales, so both content and scale vary by class. Abnormal images copy
    a normal image and add perturbations of norm ``anomaly_magnitude`` on
    the feature positions covered by a contiguous pixel block; the mask
    marks exactly that block.
    """
    if spec.n_classes <= 0 or spec.images_per_class <= 0:
        raise ContractError("counts must be positive")
    if not (0.0 <= spec.anomaly_fraction < 1.0):
        raise ContractError("anomaly_fraction must lie in [0, 1)")
    if not spec.layer_specs:
        raise ContractError("need at least one layer spec")

    rng = np.random.default_rng(spec.seed)
    h0 = 4 * max(s.h for s in spec.layer_specs)
    w0 = 4 * max(s.w for s in spec.layer_specs)
    coarse = min(spec.layer_specs, key=lambda s: s.positions)
    n_abn = int(round(spec.images_per_class * spec.anomaly_fraction))
    n_norm = spec.images_per_class - n_abn

    # anomalies perturb along a small set of shared "defect" directions,
    # mirroring the structured nature of real defects
    defect_dirs = []
    for ls in spec.layer_specs:
        dirs = rng.standard_normal((4, ls.c))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        defect_dirs.append(dirs)

    images: list[ImageRecord] = []
    for k in range(spec.n_classes):
        mus, sigmas = [], []
        class_scale = rng.uniform(1.15, 1.45)
        for ls in spec.layer_specs:
            direction = rng.standard_normal(ls.c)
            direction /= np.linalg.norm(direction)
            mus.append((spec.class_separation * direction).astype(np.float32))
            sigmas.append((class_scale * rng.uniform(0.9, 1.1, size=ls.c))
                          .astype(np.float32))

        def draw_normal() -> list[np.ndarray]:
            # noise = concentrated radius times a uniform direction, so
            # residual norms cluster tightly per class while the class
            # factor in sigma plants scale correlation across classes
            maps = []
            for mu, sigma, ls in zip(mus, sigmas, spec.layer_specs):
                eps = rng.standard_normal((ls.h, ls.w, ls.c))
                eps /= np.linalg.norm(eps, axis=2, keepdims=True)
                radius = 1.0 + 0.03 * rng.standard_normal((ls.h, ls.w, 1))
                maps.append((mu + sigma * (radius * eps)).astype(np.float32))
            return maps

        normals = [draw_normal() for _ in range(n_norm)]
        for maps in normals:
            images.append(ImageRecord(k, 0, np.zeros((h0, w0), np.uint8), maps))

        for _ in range(n_abn):
            source = normals[rng.integers(n_norm)]
            maps = [fm.copy() for fm in source]
            # anomalous block aligned to the coarsest layer's partition so
            # every pixel under a perturbed cell is masked at full
            # resolution (and vice versa for nested layer grids)
            rh_c = int(rng.integers(1, max(2, coarse.h // 2 + 1)))
            rw_c = int(rng.integers(1, max(2, coarse.w // 2 + 1)))
            r0_c = int(rng.integers(0, coarse.h - rh_c + 1))
            c0_c = int(rng.integers(0, coarse.w - rw_c + 1))
            r0, rh = (r0_c * h0) // coarse.h, \
                ((r0_c + rh_c) * h0) // coarse.h - (r0_c * h0) // coarse.h
            c0, cw = (c0_c * w0) // coarse.w, \
                ((c0_c + rw_c) * w0) // coarse.w - (c0_c * w0) // coarse.w
            mask = np.zeros((h0, w0), np.uint8)
            mask[r0:r0 + rh, c0:c0 + cw] = 1
            for fm, ls, dirs in zip(maps, spec.layer_specs, defect_dirs):
                rows = _cells_hit(ls.h, h0, r0, r0 + rh)
                cols = _cells_hit(ls.w, w0, c0, c0 + cw)
                for r in rows:
                    for c in cols:
                        base = dirs[rng.integers(len(dirs))]
                        bump = base + 0.3 * rng.standard_normal(ls.c) \
                            / np.sqrt(ls.c)
                        bump *= spec.anomaly_magnitude / np.linalg.norm(bump)
                        fm[r, c, :] += bump.astype(np.float32)
            images.append(ImageRecord(k, 1, mask, maps))

    dataset = FeatureDataset(h0, w0, list(spec.layer_specs), images)
    dataset.validate()
    return dataset


def _cells_hit(cells: int, pixels: int, lo: int, hi: int) -> list[int]:
    """Cells of the uniform partition that intersect pixel range [lo, hi)."""
    hit = []
    for i in range(cells):
        start = (i * pixels) // cells
        end = ((i + 1) * pixels) // cells
        if start < hi and end > lo:
            hit.append(i)
    return hit
