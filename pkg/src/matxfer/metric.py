"""Perception-aware material embedding.

Implements the constrained triplet machinery and metric-learning losses over
a small convolutional encoder that maps a (color, part mask) pair to a 128-D
feature vector. Reference triplets (r, a, b) are constrained by the
perceptual distance matrix: a shares r's category, b is the strictly closest
out-of-category material to r, and a must be perceptually closer to r than b.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import SamplingError, ValidationError
from .learning import DEFAULT_DTYPE, init_module
from .materials import DistanceMatrix, Material
from .synth import RenderRecord

EMBED_DIM = 128


@dataclass(frozen=True)
class MaterialTriplet:
    r: int
    a: int
    b: int


@dataclass
class MetricWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    margin: float = 0.3


def _closest_other_category(D: np.ndarray, categories: list[str], r: int) -> int | None:
    """Index of the strictly closest material to r of a different category.

    Returns None when no other category exists or the minimum is tied.
    """
    others = [x for x in range(len(categories)) if categories[x] != categories[r]]
    if not others:
        return None
    dists = [D[r, x] for x in others]
    lowest = min(dists)
    hits = [x for x, d in zip(others, dists) if d == lowest]
    if len(hits) != 1:
        return None
    return hits[0]


def admissible_pairs_for_reference(dm: DistanceMatrix, categories: list[str], r: int):
    """(b, positives) for reference r, or (None, []) when r admits no triplet.

    The positive must be a different material of r's category that is
    perceptually closer to r than the negative.
    """
    b = _closest_other_category(dm.D, categories, r)
    if b is None:
        return None, []
    positives = [
        a for a in range(dm.n)
        if a != r and categories[a] == categories[r] and dm.D[r, b] > dm.D[r, a]
    ]
    return b, positives


def sample_reference_triplets(
    dm: DistanceMatrix,
    categories: list[str],
    count: int,
    seed: int,
) -> list[MaterialTriplet]:
    """Sample up to `count` distinct constraint-satisfying triplets.

    References with no admissible (a, b) are skipped. Raises SamplingError
    when the library has a single category.
    """
    dm.validate()
    if len(categories) != dm.n:
        raise ValidationError("categories length must match distance matrix")
    if len(set(categories)) < 2:
        raise SamplingError("triplet sampling requires at least 2 categories")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x791)))
    pairs = [admissible_pairs_for_reference(dm, categories, r) for r in range(dm.n)]
    usable = [r for r in range(dm.n) if pairs[r][1]]
    if not usable:
        return []
    total = sum(len(pairs[r][1]) for r in usable)
    if count >= total:
        return sorted(
            (MaterialTriplet(r=r, a=a, b=pairs[r][0]) for r in usable for a in pairs[r][1]),
            key=lambda t: (t.r, t.a, t.b),
        )
    out: set[MaterialTriplet] = set()
    max_trials = 50 * count + 200
    for _ in range(max_trials):
        if len(out) >= count:
            break
        r = usable[int(rng.integers(0, len(usable)))]
        b, positives = pairs[r]
        a = positives[int(rng.integers(0, len(positives)))]
        out.add(MaterialTriplet(r=r, a=a, b=b))
    return sorted(out, key=lambda t: (t.r, t.a, t.b))


def save_triplets(path, triplets: list[MaterialTriplet]) -> None:
    with open(path, "w") as fh:
        for t in triplets:
            fh.write(f"{t.r} {t.a} {t.b}\n")


def load_triplets(path) -> list[MaterialTriplet]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r, a, b = (int(v) for v in line.split())
                out.append(MaterialTriplet(r, a, b))
    return out


def filter_batch_triplets(
    batch_labels: list[int], triplets: list[MaterialTriplet] | set[MaterialTriplet]
) -> list[tuple[int, int, int]]:
    """All ordered index triples of distinct batch items realizing some triplet."""
    by_label: dict[int, list[int]] = {}
    for i, label in enumerate(batch_labels):
        by_label.setdefault(label, []).append(i)
    realized = []
    for t in triplets:
        for i in by_label.get(t.r, ()):
            for j in by_label.get(t.a, ()):
                if j == i:
                    continue
                for k in by_label.get(t.b, ()):
                    if k == i or k == j:
                        continue
                    realized.append((i, j, k))
    return sorted(realized)


# ---------------------------------------------------------------------------
# Encoder.
# ---------------------------------------------------------------------------

class PartEncoder(torch.nn.Module):
    """Conv pyramid + FC head embedding a masked part into 128-D.

    Input is 4 channels: Lab color zeroed outside the mask, plus the mask
    itself, so pixels outside the mask cannot influence the embedding.
    Features are pooled with mask-derived weights so small parts are not
    diluted by the empty canvas around them.
    """

    def __init__(self, channels: tuple[int, ...] = (16, 32, 64), dtype=DEFAULT_DTYPE):
        super().__init__()
        layers = []
        c_in = 4
        self.stride = 1
        for c_out in channels:
            layers.append(torch.nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, dtype=dtype))
            layers.append(torch.nn.ReLU())
            c_in = c_out
            self.stride *= 2
        self.features = torch.nn.Sequential(*layers)
        self.head = torch.nn.Linear(c_in, EMBED_DIM, dtype=dtype)
        self.dtype_ = dtype

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        mask = x[:, 3:4]
        weights = torch.nn.functional.interpolate(mask, size=h.shape[-2:], mode="area")
        weights = weights / weights.sum(dim=(2, 3), keepdim=True).clamp_min(1e-12)
        pooled = (h * weights).sum(dim=(2, 3))
        return self.head(pooled)


def make_encoder(seed: int, channels: tuple[int, ...] = (16, 32, 64), dtype=DEFAULT_DTYPE) -> PartEncoder:
    return init_module(PartEncoder(channels=channels, dtype=dtype), seed)


def part_input(color: np.ndarray, mask: np.ndarray, dtype=DEFAULT_DTYPE) -> torch.Tensor:
    """(1, 4, H, W) tensor: masked normalized Lab + mask channel."""
    from .materials import normalize_lab

    mask = np.asarray(mask)
    if mask.sum() == 0:
        raise ValidationError("empty part mask")
    if color.shape[:2] != mask.shape:
        raise ValidationError("color raster and mask sizes differ")
    norm = normalize_lab(np.asarray(color, dtype=np.float64)) * mask[..., None]
    stacked = np.concatenate([norm, mask[..., None].astype(np.float64)], axis=-1)
    return torch.from_numpy(stacked.transpose(2, 0, 1)[None]).to(dtype)


def embed_batch(encoder: PartEncoder, inputs: torch.Tensor) -> torch.Tensor:
    return encoder(inputs)


def embed(encoder: PartEncoder, color: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """128-D embedding of one (color, part mask) pair."""
    x = part_input(color, mask, dtype=encoder.dtype_)
    with torch.no_grad():
        f = encoder(x)
    return f[0].numpy()


# ---------------------------------------------------------------------------
# Losses.
# ---------------------------------------------------------------------------

def _empty_loss(name: str, dtype) -> torch.Tensor:
    warnings.warn(f"{name}: empty triplet set, loss defined as 0", stacklevel=3)
    return torch.zeros((), dtype=dtype)


def triplet_loss(f_r: torch.Tensor, f_a: torch.Tensor, f_b: torch.Tensor, margin: float) -> torch.Tensor:
    """mean over triples of max(0, ||f_r-f_a||^2 - ||f_r-f_b||^2 + margin)."""
    if f_r.numel() == 0:
        return _empty_loss("triplet_loss", f_r.dtype if f_r.is_floating_point() else DEFAULT_DTYPE)
    d_pos = ((f_r - f_a) ** 2).sum(dim=-1)
    d_neg = ((f_r - f_b) ** 2).sum(dim=-1)
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


def similarity_loss(f_r: torch.Tensor, f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """-mean log(s_ra / (s_ra + s_rb)) with s_xy = 1/(1 + ||f_x - f_y||^2)."""
    if f_r.numel() == 0:
        return _empty_loss("similarity_loss", f_r.dtype if f_r.is_floating_point() else DEFAULT_DTYPE)
    s_ra = 1.0 / (1.0 + ((f_r - f_a) ** 2).sum(dim=-1))
    s_rb = 1.0 / (1.0 + ((f_r - f_b) ** 2).sum(dim=-1))
    return -(torch.log(s_ra / (s_ra + s_rb))).mean()


def metric_loss(features: torch.Tensor, realized: list[tuple[int, int, int]], weights: MetricWeights) -> torch.Tensor:
    """alpha1 * triplet + alpha2 * similarity over realized batch triples."""
    if not realized:
        return _empty_loss("metric_loss", features.dtype)
    idx = torch.tensor(realized, dtype=torch.long)
    f_r, f_a, f_b = features[idx[:, 0]], features[idx[:, 1]], features[idx[:, 2]]
    return weights.alpha1 * triplet_loss(f_r, f_a, f_b, weights.margin) + \
        weights.alpha2 * similarity_loss(f_r, f_a, f_b)


# ---------------------------------------------------------------------------
# Training-stage data plumbing.
# ---------------------------------------------------------------------------

@dataclass
class PartSample:
    color: np.ndarray
    mask: np.ndarray
    material_id: int
    category_index: int
    shape_id: int = -1
    label: int = -1


def extract_part_samples(records: list[RenderRecord], materials: list[Material]) -> list[PartSample]:
    """One sample per (rendered image, part)."""
    from .materials import CATEGORIES

    samples = []
    for rec in records:
        for label in sorted(rec.assignment.entries):
            mask = rec.image.labels == label
            if not mask.any():
                continue
            mid = rec.assignment.entries[label].material_id
            samples.append(PartSample(
                color=rec.image.color, mask=mask, material_id=mid,
                category_index=CATEGORIES.index(materials[mid].category),
                shape_id=rec.shape_id, label=label,
            ))
    return samples


def stack_part_inputs(samples: list[PartSample], dtype=DEFAULT_DTYPE) -> torch.Tensor:
    return torch.cat([part_input(s.color, s.mask, dtype=dtype) for s in samples], dim=0)


class TripletBatcher:
    """Deterministic batch source: realizes sampled triplets with images.

    Each batch draws `triplets_per_batch` triplets from the pre-sampled set
    and one distinct image per role, so the realized triple set is nonempty
    whenever the pool allows it.
    """

    def __init__(self, samples: list[PartSample], triplets: list[MaterialTriplet],
                 triplets_per_batch: int, seed: int):
        if not triplets:
            raise SamplingError("no reference triplets available")
        self.samples = samples
        self.triplets = triplets
        self.per_batch = max(1, triplets_per_batch)
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA7C)))
        self.by_material: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            self.by_material.setdefault(s.material_id, []).append(i)

    def __iter__(self):
        return self

    def __next__(self) -> list[int]:
        chosen: list[int] = []
        seen: set[int] = set()
        for _ in range(self.per_batch * 4):
            if len(chosen) >= self.per_batch * 3:
                break
            t = self.triplets[int(self.rng.integers(0, len(self.triplets)))]
            picks = []
            ok = True
            used: set[int] = set()
            for mid in (t.r, t.a, t.b):
                pool = [i for i in self.by_material.get(mid, ()) if i not in used]
                if not pool:
                    ok = False
                    break
                pick = pool[int(self.rng.integers(0, len(pool)))]
                picks.append(pick)
                used.add(pick)
            if not ok:
                continue
            for p in picks:
                if p not in seen:
                    chosen.append(p)
                    seen.add(p)
        if not chosen:
            raise SamplingError("could not realize any triplet from the sample pool")
        return chosen


def train_metric_stage(
    encoder: PartEncoder,
    samples: list[PartSample],
    triplets: list[MaterialTriplet],
    weights: MetricWeights,
    optimizer_cfg,
    steps: int,
    seed: int,
) -> list[float]:
    """Train the encoder on realized triplets; returns the loss trace."""
    from .learning import train_steps

    batcher = TripletBatcher(samples, triplets, triplets_per_batch=max(1, optimizer_cfg.batch_size // 3), seed=seed)

    def loss_fn(model, batch_indices):
        batch = [samples[i] for i in batch_indices]
        inputs = stack_part_inputs(batch, dtype=model.dtype_)
        feats = model(inputs)
        realized = filter_batch_triplets([s.material_id for s in batch], triplets)
        return metric_loss(feats, realized, weights)

    return train_steps(encoder, iter(batcher), loss_fn, optimizer_cfg, steps, seed)


def embedding_separation(encoder: PartEncoder, samples: list[PartSample]) -> tuple[float, float]:
    """(mean intra-category, mean inter-category) embedding distance."""
    with torch.no_grad():
        feats = encoder(stack_part_inputs(samples, dtype=encoder.dtype_)).numpy()
    cats = [s.category_index for s in samples]
    intra, inter = [], []
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            d = float(np.linalg.norm(feats[i] - feats[j]))
            (intra if cats[i] == cats[j] else inter).append(d)
    return float(np.mean(intra)), float(np.mean(inter))
