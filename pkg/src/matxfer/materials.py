"""Material library: CIELAB conversion, the pairwise perceptual distance
matrix, synthetic toy-material generation, and dataset diversity statistics.

A material is a named Lab reference patch belonging to one of five fixed
categories. Perceptual distance between materials is the root-mean-square
Euclidean distance between their Lab patches, which keeps distances
comparable across patch resolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import SamplingError, ValidationError

CATEGORIES = ("leathers", "fabrics", "woods", "metals", "plastics")

# D65 2-degree reference white, XYZ scaled to Y=100.
_WHITE = (95.047, 100.0, 108.883)

# sRGB -> XYZ (D65) matrix, IEC 61966-2-1.
_RGB_TO_XYZ = np.array([
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
])


@dataclass
class Material:
    id: int
    label: str
    category: str
    patch: np.ndarray  # H x W x 3 float64, Lab

    def validate(self):
        if self.category not in CATEGORIES:
            raise ValidationError(f"unknown category {self.category!r}")
        p = np.asarray(self.patch, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValidationError("patch must be HxWx3")
        L, a, b = p[..., 0], p[..., 1], p[..., 2]
        if L.min() < 0 or L.max() > 100 or min(a.min(), b.min()) < -128 or max(a.max(), b.max()) > 127:
            raise ValidationError("patch outside Lab channel ranges")


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] -> CIELAB (D65), vectorized over leading dimensions."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValidationError("rgb last dimension must be 3")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValidationError("rgb values must lie in [0, 1]")
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = linear @ _RGB_TO_XYZ.T * 100.0
    ratios = xyz / np.array(_WHITE)
    f = np.where(ratios > 0.008856, np.cbrt(ratios), 7.787 * ratios + 16.0 / 116.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_lab, clipped to [0,1]. Used for gallery export only."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    ratios = np.where(f ** 3 > 0.008856, f ** 3, (f - 16.0 / 116.0) / 7.787)
    xyz = ratios * np.array(_WHITE) / 100.0
    linear = xyz @ np.linalg.inv(_RGB_TO_XYZ).T
    rgb = np.where(linear > 0.0031308, 1.055 * np.clip(linear, 0, None) ** (1 / 2.4) - 0.055, 12.92 * linear)
    return np.clip(rgb, 0.0, 1.0)


def normalize_lab(lab: np.ndarray) -> np.ndarray:
    """Scale Lab channels to roughly [-1, 1] for network inputs."""
    lab = np.asarray(lab, dtype=np.float64)
    out = np.empty_like(lab)
    out[..., 0] = lab[..., 0] / 50.0 - 1.0
    out[..., 1] = lab[..., 1] / 110.0
    out[..., 2] = lab[..., 2] / 110.0
    return out


def denormalize_lab(norm: np.ndarray) -> np.ndarray:
    norm = np.asarray(norm, dtype=np.float64)
    out = np.empty_like(norm)
    out[..., 0] = (norm[..., 0] + 1.0) * 50.0
    out[..., 1] = norm[..., 1] * 110.0
    out[..., 2] = norm[..., 2] * 110.0
    return out


def lab_distance(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    """Root-mean-square Lab distance: ||a - b||_2 / sqrt(pixel count)."""
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"patch shapes differ: {a.shape} vs {b.shape}")
    n_pixels = a.size // 3 if a.ndim >= 1 else 1
    return float(np.linalg.norm((a - b).ravel()) / math.sqrt(max(1, n_pixels)))


@dataclass
class DistanceMatrix:
    n: int
    D: np.ndarray

    def validate(self, atol: float = 1e-9):
        if self.D.shape != (self.n, self.n):
            raise ValidationError("distance matrix shape mismatch")
        if np.abs(np.diag(self.D)).max() > atol:
            raise ValidationError("nonzero diagonal")
        if np.abs(self.D - self.D.T).max() > atol:
            raise ValidationError("asymmetric distance matrix")
        if self.D.min() < -atol:
            raise ValidationError("negative distance")


def build_distance_matrix(materials: list[Material]) -> DistanceMatrix:
    """Pairwise RMS Lab distances over the library's reference patches."""
    if len(materials) < 2:
        raise ValidationError("need at least 2 materials")
    shapes = {m.patch.shape for m in materials}
    if len(shapes) != 1:
        raise ValidationError(f"non-uniform patch shapes: {sorted(shapes)}")
    X = np.stack([np.asarray(m.patch, dtype=np.float64).ravel() for m in materials])
    n_pixels = materials[0].patch.size // 3
    D = cdist(X, X) / math.sqrt(n_pixels)
    np.fill_diagonal(D, 0.0)
    D = (D + D.T) / 2.0
    return DistanceMatrix(n=len(materials), D=D)


@dataclass
class DiversityReport:
    intra: dict[str, float | None]  # None when a category has < 2 members
    inter: float | None             # None when there are no cross-category pairs


def diversity_stats(materials: list[Material], dm: DistanceMatrix) -> DiversityReport:
    """Mean pairwise distance within each category and across categories."""
    dm.validate()
    if dm.n != len(materials):
        raise ValidationError("distance matrix size does not match library")
    cats = [m.category for m in materials]
    intra: dict[str, float | None] = {}
    for cat in sorted(set(cats)):
        idx = [i for i, c in enumerate(cats) if c == cat]
        if len(idx) < 2:
            intra[cat] = None
            continue
        vals = [dm.D[i, j] for ki, i in enumerate(idx) for j in idx[ki + 1:]]
        intra[cat] = float(np.mean(vals))
    cross = [
        dm.D[i, j]
        for i in range(dm.n)
        for j in range(i + 1, dm.n)
        if cats[i] != cats[j]
    ]
    inter = float(np.mean(cross)) if cross else None
    return DiversityReport(intra=intra, inter=inter)


# ---------------------------------------------------------------------------
# Synthetic library generation.
#
# Each toy material is a base Lab color plus seeded low-amplitude texture
# noise. Categories occupy angular sectors of the (a, b) plane around fixed
# lightness anchors; `spread` controls how far members stray from the anchor
# and hence how confusable materials of one category are.
# ---------------------------------------------------------------------------

_CATEGORY_L = {"leathers": 35.0, "fabrics": 60.0, "woods": 45.0, "metals": 70.0, "plastics": 52.0}


@dataclass
class LibrarySpec:
    counts: dict[str, int]          # materials per category
    patch_size: int = 8
    seed: int = 0
    radius: float = 45.0            # distance of category anchors from the neutral axis
    spread: float = 14.0            # within-category scatter of base colors
    noise_amplitude: float = 1.0    # per-pixel texture noise, Lab units
    min_pair_distance: float = 0.0  # ambiguity filter: resample pairs closer than this
    max_tries: int = 2000

    def total(self) -> int:
        return sum(self.counts.values())


def generate_library(spec: LibrarySpec) -> list[Material]:
    """Deterministically synthesize a material library from `spec`.

    Pairs closer than `min_pair_distance` (in RMS Lab distance) are resampled;
    this replaces manual curation of ambiguous materials.
    """
    for cat in spec.counts:
        if cat not in CATEGORIES:
            raise ValidationError(f"unknown category {cat!r}")
    rng = np.random.default_rng(spec.seed)
    ps = spec.patch_size
    bases: list[np.ndarray] = []
    cats: list[str] = []
    order = [c for c in CATEGORIES if spec.counts.get(c, 0) > 0]
    for cat in order:
        angle = 2.0 * math.pi * CATEGORIES.index(cat) / len(CATEGORIES)
        anchor = np.array([
            _CATEGORY_L[cat],
            spec.radius * math.cos(angle),
            spec.radius * math.sin(angle),
        ])
        for _ in range(spec.counts[cat]):
            for attempt in range(spec.max_tries):
                base = anchor + rng.uniform(-spec.spread, spec.spread, size=3)
                base[0] = np.clip(base[0], 15.0, 85.0)
                base[1:] = np.clip(base[1:], -90.0, 90.0)
                if spec.min_pair_distance <= 0.0:
                    break
                # Base-color distance bounds the patch distance up to noise.
                dists = [float(np.linalg.norm(base - other)) for other in bases]
                if not dists or min(dists) >= spec.min_pair_distance + 2.0 * spec.noise_amplitude:
                    break
            else:
                raise SamplingError(
                    f"could not place material {len(bases)} with min_pair_distance={spec.min_pair_distance}"
                )
            bases.append(base)
            cats.append(cat)
    materials = []
    for i, (base, cat) in enumerate(zip(bases, cats)):
        noise = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, size=(ps, ps, 3))
        patch = base[None, None, :] + noise
        patch[..., 0] = np.clip(patch[..., 0], 0.0, 100.0)
        patch[..., 1:] = np.clip(patch[..., 1:], -128.0, 127.0)
        m = Material(id=i, label=f"{cat}_{i:03d}", category=cat, patch=patch)
        m.validate()
        materials.append(m)
    if len(materials) >= 2 and spec.min_pair_distance > 0.0:
        dm = build_distance_matrix(materials)
        off = dm.D + np.eye(dm.n) * 1e9
        if off.min() < spec.min_pair_distance:
            raise SamplingError("generated library violates min_pair_distance")
    return materials


# ---------------------------------------------------------------------------
# Library and distance-matrix file formats.
# ---------------------------------------------------------------------------

def save_library(directory, materials: list[Material]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for m in materials:
        rel = f"patch_{m.id:04d}.npy"
        np.save(directory / rel, np.asarray(m.patch, dtype=np.float64))
        lines.append(f"{m.id}\t{m.label}\t{m.category}\t{rel}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_library(directory) -> list[Material]:
    directory = Path(directory)
    materials = []
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        sid, label, category, rel = line.split("\t")
        patch = np.load(directory / rel)
        materials.append(Material(id=int(sid), label=label, category=category, patch=patch))
    ids = [m.id for m in materials]
    if ids != list(range(len(materials))):
        raise ValidationError("material ids must be dense and ordered")
    return materials


def save_distance_matrix(path, dm: DistanceMatrix) -> None:
    with open(path, "w") as fh:
        fh.write(f"{dm.n}\n")
        for row in dm.D:
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def load_distance_matrix(path) -> DistanceMatrix:
    with open(path) as fh:
        n = int(fh.readline())
        D = np.array([[float(v) for v in fh.readline().split()] for _ in range(n)])
    return DistanceMatrix(n=n, D=D)
