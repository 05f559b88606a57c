"""Procedural toy dataset: segmented shapes, material grouping prior, voting
assignment, (color, segmentation) rendering, and train/test splits.

Shapes are flat 2D stand-ins for segmented 3D models: each shape owns a small
set of parts with unique semantic labels, and each view places those parts as
disjoint axis-aligned regions (rectangles or inscribed ellipses) produced by a
seeded guillotine partition of the canvas. Rendering fills each part with its
assigned material patch plus a bounded smooth shading field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SamplingError, ValidationError
from .materials import Material

BACKGROUND = 0
BACKGROUND_LAB = np.array([95.0, 0.0, 0.0])


@dataclass
class SegmentedImage:
    """Aligned (color, part-label) raster pair. Label 0 is background."""

    color: np.ndarray   # H x W x 3 float64 Lab
    labels: np.ndarray  # H x W int

    def validate(self, vocabulary: set[int] | None = None):
        if self.color.shape[:2] != self.labels.shape:
            raise ValidationError("color/labels raster sizes differ")
        if vocabulary is not None:
            present = set(np.unique(self.labels).tolist()) - {BACKGROUND}
            if not present <= vocabulary:
                raise ValidationError(f"labels outside vocabulary: {sorted(present - vocabulary)}")

    def foreground(self) -> np.ndarray:
        return self.labels != BACKGROUND


@dataclass
class ToyShape:
    id: int
    labels: list[int]                       # semantic label per part, unique within the shape
    kinds: list[str]                        # "rect" | "ellipse" per part
    layouts: dict[int, list[tuple[int, int, int, int]]]  # view -> per-part (y0, x0, y1, x1)
    image_size: int
    views: list[int]

    def part_mask(self, part_index: int, view: int) -> np.ndarray:
        if view not in self.layouts:
            raise ValidationError(f"shape {self.id} has no view {view}")
        y0, x0, y1, x1 = self.layouts[view][part_index]
        H = W = self.image_size
        mask = np.zeros((H, W), dtype=bool)
        if self.kinds[part_index] == "rect":
            mask[y0:y1, x0:x1] = True
        else:
            cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
            ry, rx = max((y1 - y0) / 2.0, 0.5), max((x1 - x0) / 2.0, 0.5)
            yy, xx = np.mgrid[0:H, 0:W]
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            box = np.zeros((H, W), dtype=bool)
            box[y0:y1, x0:x1] = True
            mask &= box
        return mask

    def labels_raster(self, view: int) -> np.ndarray:
        H = W = self.image_size
        out = np.full((H, W), BACKGROUND, dtype=np.int64)
        for idx, label in enumerate(self.labels):
            out[self.part_mask(idx, view)] = label
        return out


@dataclass
class ShapeSpec:
    n_shapes: int
    part_range: tuple[int, int] = (2, 5)
    vocabulary_size: int = 8
    n_views: int = 3
    image_size: int = 64
    margin: int = 4


def _guillotine(rng: np.random.Generator, rect, k: int, min_side: int = 6):
    """Split `rect` into k disjoint rects by repeatedly cutting the largest."""
    rects = [rect]
    while len(rects) < k:
        areas = [(r[2] - r[0]) * (r[3] - r[1]) for r in rects]
        i = int(np.argmax(areas))
        y0, x0, y1, x1 = rects.pop(i)
        h, w = y1 - y0, x1 - x0
        horizontal = h >= w
        span = h if horizontal else w
        if span < 2 * min_side:
            # Too small to split cleanly; cut in half anyway.
            cut = span // 2
        else:
            lo, hi = min_side, span - min_side
            cut = int(rng.integers(lo, hi + 1))
        if horizontal:
            rects.insert(i, (y0, x0, y0 + cut, x1))
            rects.insert(i + 1, (y0 + cut, x0, y1, x1))
        else:
            rects.insert(i, (y0, x0, y1, x0 + cut))
            rects.insert(i + 1, (y0, x0 + cut, y1, x1))
    return rects


def generate_shapes(spec: ShapeSpec, seed: int) -> list[ToyShape]:
    """Deterministically generate toy shapes; every vocabulary label is used."""
    lo, hi = spec.part_range
    if lo < 1 or hi < lo:
        raise ValidationError("invalid part_range")
    if hi > spec.vocabulary_size:
        raise ValidationError("part count may exceed vocabulary size")
    if spec.n_shapes == 0:
        return []
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA11CE)))
    part_counts = [int(rng.integers(lo, hi + 1)) for _ in range(spec.n_shapes)]
    if sum(part_counts) < spec.vocabulary_size:
        raise ValidationError("too few parts to cover the semantic vocabulary")

    # Assign labels so each vocabulary label appears in >= 1 shape.
    vocab = list(range(1, spec.vocabulary_size + 1))
    shape_labels: list[list[int]] = [[] for _ in range(spec.n_shapes)]
    slots = [(s, j) for s in range(spec.n_shapes) for j in range(part_counts[s])]
    perm = rng.permutation(len(slots))
    pending = list(vocab)
    for pos in perm:
        if not pending:
            break
        s, _ = slots[pos]
        if pending[0] not in shape_labels[s] and len(shape_labels[s]) < part_counts[s]:
            shape_labels[s].append(pending.pop(0))
    # Any label still pending goes to the first shape with spare capacity
    # (such a shape cannot already contain it).
    for v in pending:
        for s in range(spec.n_shapes):
            if len(shape_labels[s]) < part_counts[s] and v not in shape_labels[s]:
                shape_labels[s].append(v)
                break
        else:
            raise ValidationError("could not cover the vocabulary with the drawn part counts")
    for s in range(spec.n_shapes):
        while len(shape_labels[s]) < part_counts[s]:
            remaining = [v for v in vocab if v not in shape_labels[s]]
            shape_labels[s].append(int(rng.choice(remaining)))
        order = rng.permutation(len(shape_labels[s]))
        shape_labels[s] = [shape_labels[s][i] for i in order]

    shapes = []
    for s in range(spec.n_shapes):
        k = part_counts[s]
        srng = np.random.default_rng(np.random.SeedSequence((seed, s, 0x51A9E)))
        kinds = ["rect" if srng.random() < 0.7 else "ellipse" for _ in range(k)]
        m = spec.margin
        base = (m, m, spec.image_size - m, spec.image_size - m)
        layouts = {}
        for v in range(spec.n_views):
            vrng = np.random.default_rng(np.random.SeedSequence((seed, s, v, 0x7137)))
            rects = _guillotine(vrng, base, k)
            # Shrink each rect by one pixel so parts are separated by background.
            rects = [(y0 + 1, x0 + 1, max(y0 + 2, y1 - 1), max(x0 + 2, x1 - 1)) for y0, x0, y1, x1 in rects]
            order = vrng.permutation(k)
            layouts[v] = [rects[i] for i in order]
        shapes.append(ToyShape(
            id=s, labels=shape_labels[s], kinds=kinds, layouts=layouts,
            image_size=spec.image_size, views=list(range(spec.n_views)),
        ))
    return shapes


# ---------------------------------------------------------------------------
# Material grouping prior (stand-in for coarse material segmentation priors).
# ---------------------------------------------------------------------------

@dataclass
class GroupingPrior:
    groups: list[frozenset[int]]                     # partition of the vocabulary
    support: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)  # pair -> (merged, co-present)

    def validate_partition(self, vocabulary: set[int]):
        seen: set[int] = set()
        for g in self.groups:
            if g & seen:
                raise ValidationError("groups overlap")
            seen |= g
        if seen != vocabulary:
            raise ValidationError("groups do not cover the vocabulary")

    def group_of(self, label: int) -> frozenset[int]:
        for g in self.groups:
            if label in g:
                return g
        raise ValidationError(f"label {label} not covered by prior")


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def derive_grouping_prior(
    semantic_segs: list[np.ndarray],
    material_segs: list[np.ndarray],
    min_support: float,
    vocabulary: set[int],
) -> GroupingPrior:
    """Merge semantic labels that repeatedly share one material region.

    Two labels merge iff, among observations where both are present, the
    fraction in which they have the same (nonzero) dominant material region is
    >= `min_support`. The merge relation is closed transitively.
    """
    if len(semantic_segs) != len(material_segs):
        raise ValidationError("observation lists differ in length")
    co_present: dict[tuple[int, int], int] = {}
    co_merged: dict[tuple[int, int], int] = {}
    for sem, mat in zip(semantic_segs, material_segs):
        sem = np.asarray(sem)
        mat = np.asarray(mat)
        if sem.shape != mat.shape:
            raise ValidationError("misaligned semantic/material rasters")
        dominant: dict[int, int] = {}
        for label in np.unique(sem):
            if label == BACKGROUND:
                continue
            regions = mat[sem == label]
            regions = regions[regions != 0]
            if regions.size == 0:
                continue
            counts = np.bincount(regions)
            dominant[int(label)] = int(np.argmax(counts))
        present = sorted(dominant)
        for i, l1 in enumerate(present):
            for l2 in present[i + 1:]:
                key = (l1, l2)
                co_present[key] = co_present.get(key, 0) + 1
                if dominant[l1] == dominant[l2]:
                    co_merged[key] = co_merged.get(key, 0) + 1
    uf = _UnionFind(sorted(vocabulary))
    for key, n_present in co_present.items():
        merged = co_merged.get(key, 0)
        if n_present > 0 and merged / n_present >= min_support:
            uf.union(*key)
    by_root: dict[int, set[int]] = {}
    for label in vocabulary:
        by_root.setdefault(uf.find(label), set()).add(label)
    groups = [frozenset(g) for _, g in sorted(by_root.items())]
    support = {k: (co_merged.get(k, 0), v) for k, v in sorted(co_present.items())}
    prior = GroupingPrior(groups=groups, support=support)
    prior.validate_partition(set(vocabulary))
    return prior


def singleton_prior(vocabulary: set[int]) -> GroupingPrior:
    return GroupingPrior(groups=[frozenset({v}) for v in sorted(vocabulary)])


def simulate_material_segs(
    shapes: list[ToyShape], prior: GroupingPrior, views: list[int] | None = None
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Render (semantic, material-region) observation pairs implied by `prior`.

    Used to exercise derive_grouping_prior; region ids are group indices + 1.
    """
    group_index = {}
    for gi, g in enumerate(prior.groups):
        for label in g:
            group_index[label] = gi + 1
    sems, mats = [], []
    for shape in shapes:
        for v in (views if views is not None else shape.views):
            sem = shape.labels_raster(v)
            mat = np.zeros_like(sem)
            for label in shape.labels:
                mat[sem == label] = group_index[label]
            sems.append(sem)
            mats.append(mat)
    return sems, mats


# ---------------------------------------------------------------------------
# Material assignment with group voting.
# ---------------------------------------------------------------------------

@dataclass
class AssignmentEntry:
    category: str
    material_id: int
    probs: np.ndarray | None = None  # optional probability vector over materials


@dataclass
class PartMaterialAssignment:
    entries: dict[int, AssignmentEntry]  # semantic label -> entry

    def material_of(self, label: int) -> int:
        return self.entries[label].material_id

    def validate_covers(self, shape: ToyShape, materials: list[Material]):
        for label in shape.labels:
            if label not in self.entries:
                raise ValidationError(f"part {label} has no material")
        for label, e in self.entries.items():
            if materials[e.material_id].category != e.category:
                raise ValidationError(f"entry for part {label} has inconsistent category")

    def material_raster(self, shape: ToyShape, view: int) -> np.ndarray:
        """Per-pixel material ids; -1 on background."""
        sem = shape.labels_raster(view)
        out = np.full_like(sem, -1)
        for label, e in self.entries.items():
            out[sem == label] = e.material_id
        return out


def plurality_vote(votes: list[int]) -> int:
    """Most frequent value; ties resolve to the lowest id."""
    counts: dict[int, int] = {}
    for v in votes:
        counts[v] = counts.get(v, 0) + 1
    return min(counts, key=lambda v: (-counts[v], v))


def assign_materials(
    shape: ToyShape,
    prior: GroupingPrior,
    materials: list[Material],
    seed: int,
    label_category: dict[int, str] | None = None,
) -> PartMaterialAssignment:
    """Sample one material per part, then vote within each merge group.

    Per part, a category is drawn (uniformly over categories present in the
    library unless `label_category` pins one) and a material is sampled
    uniformly within it. All parts in a merge group then take the group's
    plurality material; ties go to the lowest material id.
    """
    for label in shape.labels:
        prior.group_of(label)
    by_cat: dict[str, list[int]] = {}
    for m in materials:
        by_cat.setdefault(m.category, []).append(m.id)
    rng = np.random.default_rng(np.random.SeedSequence((seed, shape.id, 0xA551)))
    raw: dict[int, int] = {}
    for label in sorted(shape.labels):
        if label_category is not None and label in label_category:
            cat = label_category[label]
            if cat not in by_cat or not by_cat[cat]:
                raise SamplingError(f"category {cat!r} has no materials")
        else:
            cat = sorted(by_cat)[int(rng.integers(0, len(by_cat)))]
        raw[label] = int(rng.choice(by_cat[cat]))
    # Voting: plurality within each merge group, lowest-id tie break.
    final: dict[int, int] = {}
    labels_set = set(shape.labels)
    for group in prior.groups:
        members = sorted(group & labels_set)
        if not members:
            continue
        best = plurality_vote([raw[label] for label in members])
        for label in members:
            final[label] = best
    entries = {
        label: AssignmentEntry(category=materials[mid].category, material_id=mid)
        for label, mid in final.items()
    }
    return PartMaterialAssignment(entries=entries)


# ---------------------------------------------------------------------------
# Rendering.
# ---------------------------------------------------------------------------

def render_pair(
    shape: ToyShape,
    assignment: PartMaterialAssignment,
    view: int,
    materials: list[Material],
    seed: int,
    shading_amplitude: float = 2.0,
) -> SegmentedImage:
    """Fill each part with its tiled material patch plus bounded L shading."""
    if view not in shape.layouts:
        raise ValidationError(f"shape {shape.id} has no view {view}")
    for label in shape.labels:
        if label not in assignment.entries:
            raise ValidationError(f"assignment misses part {label}")
    H = W = shape.image_size
    labels = shape.labels_raster(view)
    color = np.tile(BACKGROUND_LAB, (H, W, 1)).astype(np.float64)
    yy, xx = np.mgrid[0:H, 0:W]
    for label in shape.labels:
        mask = labels == label
        patch = materials[assignment.entries[label].material_id].patch
        ph, pw = patch.shape[:2]
        tiled = patch[yy % ph, xx % pw]
        color[mask] = tiled[mask]
    if shading_amplitude > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence((seed, shape.id, view, 0x5AAD)))
        fx, fy = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        px, py = rng.random(), rng.random()
        shade = shading_amplitude * np.sin(2 * np.pi * (fx * xx / W + px)) * np.sin(2 * np.pi * (fy * yy / H + py))
        fg = labels != BACKGROUND
        color[..., 0] = np.where(fg, np.clip(color[..., 0] + shade, 0.0, 100.0), color[..., 0])
    return SegmentedImage(color=color, labels=labels)


# ---------------------------------------------------------------------------
# Dataset assembly and splitting.
# ---------------------------------------------------------------------------

@dataclass
class RenderRecord:
    shape_id: int
    assignment_id: int
    view: int
    image: SegmentedImage
    assignment: PartMaterialAssignment


@dataclass
class ToyDataset:
    shapes: list[ToyShape]
    records: list[RenderRecord]
    vocabulary_size: int

    def by_shape(self) -> dict[int, list[RenderRecord]]:
        out: dict[int, list[RenderRecord]] = {}
        for r in self.records:
            out.setdefault(r.shape_id, []).append(r)
        return out


def build_dataset(
    shapes: list[ToyShape],
    materials: list[Material],
    prior: GroupingPrior,
    seed: int,
    assignments_per_shape: int = 2,
    shading_amplitude: float = 2.0,
    vocabulary_size: int | None = None,
) -> ToyDataset:
    records = []
    for shape in shapes:
        for aid in range(assignments_per_shape):
            assignment = assign_materials(shape, prior, materials, seed=seed * 1000 + aid)
            for v in shape.views:
                img = render_pair(shape, assignment, v, materials, seed=seed * 1000 + aid,
                                  shading_amplitude=shading_amplitude)
                records.append(RenderRecord(shape.id, aid, v, img, assignment))
    vocab = vocabulary_size or max(max(s.labels) for s in shapes)
    return ToyDataset(shapes=shapes, records=records, vocabulary_size=vocab)


def split_dataset(records: list, seed: int, shape_id=lambda r: r.shape_id) -> tuple[list, list]:
    """Split at shape granularity, roughly 10:1 train:test."""
    ids = sorted({shape_id(r) for r in records})
    if len(ids) < 11:
        raise ValidationError("need at least 11 shapes to split 10:1")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5917)))
    perm = rng.permutation(len(ids))
    n_test = max(1, round(len(ids) / 11))
    test_ids = {ids[i] for i in perm[:n_test]}
    train = [r for r in records if shape_id(r) not in test_ids]
    test = [r for r in records if shape_id(r) in test_ids]
    return train, test


# ---------------------------------------------------------------------------
# On-disk layout.
# ---------------------------------------------------------------------------

def save_dataset(directory, dataset: ToyDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    written_assignments = set()
    for r in dataset.records:
        stem = f"s{r.shape_id:04d}_a{r.assignment_id}_v{r.view}"
        color_rel = f"{stem}_color.npy"
        label_rel = f"{stem}_labels.npy"
        assign_rel = f"s{r.shape_id:04d}_a{r.assignment_id}_assign.txt"
        np.save(directory / color_rel, r.image.color)
        np.save(directory / label_rel, r.image.labels)
        if assign_rel not in written_assignments:
            save_assignment(directory / assign_rel, r.assignment)
            written_assignments.add(assign_rel)
        lines.append(f"{r.shape_id} {r.assignment_id} {r.view} {color_rel} {label_rel} {assign_rel}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    meta = f"vocabulary_size {dataset.vocabulary_size}\nn_shapes {len(dataset.shapes)}\n"
    (directory / "meta.txt").write_text(meta)
    save_shapes(directory / "shapes.json", dataset.shapes)


def save_shapes(path, shapes: list[ToyShape]) -> None:
    import json

    payload = []
    for s in shapes:
        payload.append({
            "id": s.id,
            "labels": s.labels,
            "kinds": s.kinds,
            "layouts": {str(v): [list(r) for r in rects] for v, rects in s.layouts.items()},
            "image_size": s.image_size,
            "views": s.views,
        })
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_shapes(path) -> list[ToyShape]:
    import json

    payload = json.loads(Path(path).read_text())
    shapes = []
    for d in payload:
        layouts = {int(v): [tuple(r) for r in rects] for v, rects in d["layouts"].items()}
        shapes.append(ToyShape(
            id=d["id"], labels=d["labels"], kinds=d["kinds"], layouts=layouts,
            image_size=d["image_size"], views=d["views"],
        ))
    return shapes


def load_dataset(directory, materials: list[Material]) -> ToyDataset:
    directory = Path(directory)
    shapes = load_shapes(directory / "shapes.json")
    meta = dict(line.split() for line in (directory / "meta.txt").read_text().splitlines() if line.strip())
    records = []
    assignments: dict[str, PartMaterialAssignment] = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        sid, aid, view, color_rel, label_rel, assign_rel = line.split()
        if assign_rel not in assignments:
            assignments[assign_rel] = load_assignment(directory / assign_rel, materials)
        img = SegmentedImage(color=np.load(directory / color_rel), labels=np.load(directory / label_rel))
        records.append(RenderRecord(int(sid), int(aid), int(view), img, assignments[assign_rel]))
    return ToyDataset(shapes=shapes, records=records, vocabulary_size=int(meta["vocabulary_size"]))


def save_assignment(path, assignment: PartMaterialAssignment) -> None:
    with open(path, "w") as fh:
        for label in sorted(assignment.entries):
            fh.write(f"{label} {assignment.entries[label].material_id}\n")


def load_assignment(path, materials: list[Material]) -> PartMaterialAssignment:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        label, mid = line.split()
        mid = int(mid)
        entries[int(label)] = AssignmentEntry(category=materials[mid].category, material_id=mid)
    return PartMaterialAssignment(entries=entries)
