"""End-to-end material transfer.

Couples the translation and prediction networks: constructs fine-tuning
ground truth for both translated (color, segmentation) pairs, fine-tunes two
predictor variants tied together by an area-weighted consistency loss, and
produces the final per-part material assignment (exemplar-pair predictions
for matched parts, projection-pair predictions for the rest).
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.cluster.vq import kmeans2

from .errors import ValidationError
from .learning import OptimizerConfig, make_optimizer
from .materials import DistanceMatrix, Material
from .metric import PartEncoder, PartSample, part_input, stack_part_inputs
from .predictor import (
    ClassWeights,
    MaterialPrediction,
    PredictionHead,
    batch_classification_loss,
    predict,
    predict_probs,
)
from .pose import select_pose, semantic_projection
from .synth import AssignmentEntry, PartMaterialAssignment, RenderRecord, SegmentedImage, ToyShape
from .translation import TranslationNets, translate


# ---------------------------------------------------------------------------
# Ground truth for the translated-color pair (O_c_hat, O_s).
# ---------------------------------------------------------------------------

@dataclass
class PartGroundTruth:
    material_id: int
    matched: bool


def build_gt_translated_color(
    o_s_labels: list[int],
    exemplar_assignment: PartMaterialAssignment,
    predictions: dict[int, int],
    dm: DistanceMatrix,
) -> dict[int, PartGroundTruth]:
    """Per-part GT for the projection pair.

    Parts whose semantic label exists in the exemplar copy its material and
    are flagged matched; the rest take the exemplar material closest (in
    perceptual distance) to the predicted material. Only matched parts feed
    the fine-tuning loss.
    """
    if not exemplar_assignment.entries:
        raise ValidationError("exemplar assignment is empty")
    exemplar_materials = sorted({e.material_id for e in exemplar_assignment.entries.values()})
    out: dict[int, PartGroundTruth] = {}
    for label in o_s_labels:
        if label in exemplar_assignment.entries:
            out[label] = PartGroundTruth(exemplar_assignment.entries[label].material_id, matched=True)
        else:
            if label not in predictions:
                raise ValidationError(f"unmatched part {label} has no prediction")
            pred = predictions[label]
            best = min(exemplar_materials, key=lambda mid: (dm.D[mid, pred], mid))
            out[label] = PartGroundTruth(best, matched=False)
    return out


# ---------------------------------------------------------------------------
# Over-segmentation of the exemplar.
# ---------------------------------------------------------------------------

def oversegment(
    color: np.ndarray,
    foreground: np.ndarray,
    granularity: int,
    seed: int,
    position_weight: float = 4.0,
    merge_tol: float = 1.0,
) -> np.ndarray:
    """Partition the foreground into connected, color-coherent segments.

    Seeded k-means over (Lab, scaled position); clusters whose centroid
    colors are closer than `merge_tol` collapse so that color-uniform input
    yields one segment per connected component. Returns int ids, 0 outside.
    """
    foreground = np.asarray(foreground, dtype=bool)
    if not foreground.any():
        raise ValidationError("empty foreground")
    H, W = foreground.shape
    ys, xs = np.nonzero(foreground)
    n = len(ys)
    out = np.zeros((H, W), dtype=np.int64)
    if n < max(2, granularity):
        out[foreground] = 1
        return out
    feats = np.column_stack([
        color[ys, xs, 0], color[ys, xs, 1], color[ys, xs, 2],
        position_weight * ys / H, position_weight * xs / W,
    ]).astype(np.float64)
    k = min(granularity, n)
    if np.allclose(feats[:, :3], feats[0, :3], atol=1e-12):
        assign = np.zeros(n, dtype=np.int64)
        centroids = feats[:1]
    else:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x05E9)))
        centroids, assign = kmeans2(feats, k, minit="++", seed=rng)
    # Merge clusters with near-identical colors.
    used = sorted(set(assign.tolist()))
    canon: dict[int, int] = {}
    kept: list[int] = []
    for c in used:
        target = c
        for other in kept:
            if np.linalg.norm(centroids[c][:3] - centroids[other][:3]) < merge_tol:
                target = canon[other]
                break
        canon[c] = target if target != c else c
        if canon[c] == c:
            kept.append(c)
    merged = np.array([canon[a] for a in assign])
    # Split each cluster into connected components.
    next_id = 1
    for c in sorted(set(merged.tolist())):
        mask = np.zeros((H, W), dtype=bool)
        mask[ys[merged == c], xs[merged == c]] = True
        comps, n_comps = ndimage.label(mask)
        for comp in range(1, n_comps + 1):
            out[comps == comp] = next_id
            next_id += 1
    return out


@dataclass
class SubRegion:
    part_label: int
    mask: np.ndarray
    area: int
    weight: float


@dataclass
class SubRegionSet:
    regions: dict[int, list[SubRegion]]  # part label -> sub-regions

    def validate(self):
        for label, regs in self.regions.items():
            total = sum(r.weight for r in regs)
            if abs(total - 1.0) > 1e-9:
                raise ValidationError(f"weights of part {label} sum to {total}")
            stack = np.zeros_like(regs[0].mask, dtype=np.int64)
            for r in regs:
                stack += r.mask.astype(np.int64)
            if stack.max() > 1:
                raise ValidationError(f"overlapping sub-regions in part {label}")


def intersect_subregions(overseg: np.ndarray, p_s_hat: np.ndarray) -> SubRegionSet:
    """Nonempty intersections of over-segments with translated parts.

    Weights are proportional to pixel area, normalized within each part.
    Parts with no foreground intersection are dropped with a warning.
    """
    if overseg.shape != p_s_hat.shape:
        raise ValidationError("rasters are not aligned")
    regions: dict[int, list[SubRegion]] = {}
    for label in sorted(np.unique(p_s_hat).tolist()):
        if label == 0:
            continue
        part_mask = p_s_hat == label
        subs = []
        for seg_id in sorted(np.unique(overseg[part_mask]).tolist()):
            if seg_id == 0:
                continue
            mask = part_mask & (overseg == seg_id)
            area = int(mask.sum())
            if area:
                subs.append(SubRegion(part_label=label, mask=mask, area=area, weight=0.0))
        if not subs:
            warnings.warn(f"part {label} has no overlap with the over-segmentation", stacklevel=2)
            continue
        total = sum(r.area for r in subs)
        for r in subs:
            r.weight = r.area / total
        regions[label] = subs
    out = SubRegionSet(regions=regions)
    out.validate()
    return out


def dominant_material(sub_mask: np.ndarray, material_raster: np.ndarray) -> int:
    """Plurality material id under the mask; ties go to the lowest id."""
    if not sub_mask.any():
        raise ValidationError("empty sub-region mask")
    vals = material_raster[sub_mask]
    vals = vals[vals >= 0]
    if vals.size == 0:
        raise ValidationError("sub-region covers no assigned material")
    counts = np.bincount(vals)
    return int(np.argmax(counts))


# ---------------------------------------------------------------------------
# Consistency loss.
# ---------------------------------------------------------------------------

def consistency_loss(
    pred_o: dict[int, torch.Tensor],
    pred_p: dict[int, list[tuple[float, torch.Tensor]]],
    matched_labels: list[int],
    dm: DistanceMatrix,
) -> torch.Tensor:
    """Area-weighted perceptual distance between paired predictions.

    For each matched label, sums omega_t * m_O^T D m_P(t) over the exemplar
    pair's sub-regions; reduces to the one-hot distance loss when either side
    is a one-hot vector.
    """
    if not matched_labels:
        return torch.zeros((), dtype=torch.float64)
    some = pred_o.get(matched_labels[0])
    dtype = some.dtype if some is not None else torch.float64
    D_t = torch.as_tensor(dm.D, dtype=dtype)
    total = torch.zeros((), dtype=dtype)
    for label in matched_labels:
        if label not in pred_o or label not in pred_p:
            raise ValidationError(f"matched part {label} lacks a prediction")
        m_o = pred_o[label]
        for weight, m_p in pred_p[label]:
            total = total + weight * (m_o @ D_t @ m_p)
    return total


# ---------------------------------------------------------------------------
# Translated-pair sample construction.
# ---------------------------------------------------------------------------

@dataclass
class TranslatedPair:
    """One (projection, exemplar) translation with fine-tune samples."""

    o_s: np.ndarray                    # projection labels
    o_c_hat: np.ndarray                # translated color
    p_c: np.ndarray                    # exemplar color
    p_s_hat: np.ndarray                # translated segmentation
    subregions: SubRegionSet
    exemplar_samples: list[PartSample]     # (P_c, sub-mask) with dominant-material GT
    projection_samples: list[PartSample]   # (O_c_hat, part mask) with constructed GT
    projection_matched: list[bool]
    matched_labels: list[int]
    exemplar_label_of_sample: list[int] = field(default_factory=list)
    exemplar_weight_of_sample: list[float] = field(default_factory=list)


def build_translated_pair(
    nets: TranslationNets,
    o_record: RenderRecord,
    p_record: RenderRecord,
    encoder: PartEncoder,
    head: PredictionHead,
    materials: list[Material],
    dm: DistanceMatrix,
    seed: int,
    granularity: int = 12,
    shapes: dict[int, ToyShape] | None = None,
) -> TranslatedPair:
    """Translate (O_s from o_record, P_c from p_record) and build GT samples."""
    from .materials import CATEGORIES

    o_s = o_record.image.labels
    p_c = p_record.image.color
    tr = translate(nets, o_s, p_c)

    # Exemplar pair: over-segment P_c, intersect with translated segmentation.
    overseg = oversegment(p_c, p_record.image.labels != 0, granularity, seed)
    subs = intersect_subregions(overseg, tr.p_s_hat)
    material_raster = _material_raster(p_record)
    exemplar_samples: list[PartSample] = []
    ex_labels: list[int] = []
    ex_weights: list[float] = []
    for label in sorted(subs.regions):
        for region in subs.regions[label]:
            gt = dominant_material(region.mask, material_raster)
            exemplar_samples.append(PartSample(
                color=p_c, mask=region.mask, material_id=gt,
                category_index=CATEGORIES.index(materials[gt].category),
                shape_id=p_record.shape_id, label=label,
            ))
            ex_labels.append(label)
            ex_weights.append(region.weight)

    # Projection pair: matched parts copy the exemplar material, the rest take
    # the exemplar material closest to the predictor's current guess.
    o_labels = sorted(set(np.unique(o_s).tolist()) - {0})
    predictions: dict[int, int] = {}
    for label in o_labels:
        if label not in p_record.assignment.entries:
            predictions[label] = predict(encoder, head, tr.o_c_hat, o_s == label).top_material
    gt_map = build_gt_translated_color(o_labels, p_record.assignment, predictions, dm)
    projection_samples: list[PartSample] = []
    projection_matched: list[bool] = []
    for label in o_labels:
        gt = gt_map[label]
        projection_samples.append(PartSample(
            color=tr.o_c_hat, mask=o_s == label, material_id=gt.material_id,
            category_index=CATEGORIES.index(materials[gt.material_id].category),
            shape_id=o_record.shape_id, label=label,
        ))
        projection_matched.append(gt.matched)

    matched_labels = sorted(set(subs.regions) & set(o_labels))
    return TranslatedPair(
        o_s=o_s, o_c_hat=tr.o_c_hat, p_c=p_c, p_s_hat=tr.p_s_hat,
        subregions=subs,
        exemplar_samples=exemplar_samples,
        projection_samples=projection_samples,
        projection_matched=projection_matched,
        matched_labels=matched_labels,
        exemplar_label_of_sample=ex_labels,
        exemplar_weight_of_sample=ex_weights,
    )


def _material_raster(record: RenderRecord) -> np.ndarray:
    out = np.full_like(record.image.labels, -1)
    for label, entry in record.assignment.entries.items():
        out[record.image.labels == label] = entry.material_id
    return out


def build_finetune_pairs(
    nets: TranslationNets,
    records: list[RenderRecord],
    encoder: PartEncoder,
    head: PredictionHead,
    materials: list[Material],
    dm: DistanceMatrix,
    seed: int,
    count: int,
    granularity: int = 12,
) -> list[TranslatedPair]:
    """Cross-shape (projection, exemplar) pairs sampled from `records`."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF17E)))
    pairs = []
    for i in range(count):
        oi = int(rng.integers(0, len(records)))
        pi = int(rng.integers(0, len(records)))
        if records[pi].shape_id == records[oi].shape_id and len({r.shape_id for r in records}) > 1:
            pi = (pi + 1) % len(records)
        pairs.append(build_translated_pair(
            nets, records[oi], records[pi], encoder, head, materials, dm,
            seed=seed * 10000 + i, granularity=granularity,
        ))
    return pairs


# ---------------------------------------------------------------------------
# Dual fine-tuning with the consistency loss.
# ---------------------------------------------------------------------------

@dataclass
class PredictorVariant:
    encoder: PartEncoder
    head: PredictionHead


@dataclass
class FineTuneResult:
    variant_p: PredictorVariant
    variant_o: PredictorVariant
    trace: list[float] = field(default_factory=list)


def clone_predictor(encoder: PartEncoder, head: PredictionHead) -> PredictorVariant:
    return PredictorVariant(encoder=copy.deepcopy(encoder), head=copy.deepcopy(head))


def fine_tune(
    encoder: PartEncoder,
    head: PredictionHead,
    pairs: list[TranslatedPair],
    dm: DistanceMatrix,
    class_weights: ClassWeights,
    consistency_weight: float,
    optimizer_cfg: OptimizerConfig,
    steps: int,
    seed: int,
    encoder_lr_scale: float = 0.1,
) -> FineTuneResult:
    """Fine-tune two predictor variants on the two translated-pair types.

    Variant-P trains on (P_c, sub-region) samples, variant-O on matched
    (O_c_hat, part) samples; a positive consistency weight couples them via
    the area-weighted perceptual distance between their predictions on
    matched parts. Metric-learning terms are disabled during fine-tuning.
    """
    var_p = clone_predictor(encoder, head)
    var_o = clone_predictor(encoder, head)
    p_samples = [s for pair in pairs for s in pair.exemplar_samples]
    o_samples = [
        s for pair in pairs
        for s, m in zip(pair.projection_samples, pair.projection_matched) if m
    ]
    if not p_samples or not o_samples:
        raise ValidationError("fine-tuning requires samples for both pairs")
    D_t = torch.as_tensor(dm.D, dtype=encoder.dtype_)

    def variant_params(v: PredictorVariant):
        params = list(v.encoder.parameters()) + list(v.head.parameters())
        scales = [encoder_lr_scale] * len(list(v.encoder.parameters())) + [1.0] * len(list(v.head.parameters()))
        return params, scales

    params_p, scales_p = variant_params(var_p)
    params_o, scales_o = variant_params(var_o)
    opt_p = make_optimizer(params_p, optimizer_cfg, scales_p)
    opt_o = make_optimizer(params_o, optimizer_cfg, scales_o)
    rng_p = np.random.default_rng(np.random.SeedSequence((seed, 0xF00D)))
    rng_o = np.random.default_rng(np.random.SeedSequence((seed, 0xBEEF)))
    rng_c = np.random.default_rng(np.random.SeedSequence((seed, 0xCAFE)))
    bs = optimizer_cfg.batch_size
    trace = []

    def batch_loss(variant: PredictorVariant, samples: list[PartSample], idx) -> torch.Tensor:
        batch = [samples[int(i)] for i in idx]
        inputs = stack_part_inputs(batch, dtype=encoder.dtype_)
        cat_p, mat_p = predict_probs(variant.encoder, variant.head, inputs)
        gt_c = torch.tensor([s.category_index for s in batch], dtype=torch.long)
        gt_m = torch.tensor([s.material_id for s in batch], dtype=torch.long)
        return batch_classification_loss(cat_p, mat_p, gt_c, gt_m, D_t, class_weights)

    for step in range(steps):
        loss_p = batch_loss(var_p, p_samples, rng_p.choice(len(p_samples), size=min(bs, len(p_samples)), replace=False))
        loss_o = batch_loss(var_o, o_samples, rng_o.choice(len(o_samples), size=min(bs, len(o_samples)), replace=False))
        total = loss_p + loss_o
        if consistency_weight > 0.0:
            pair = pairs[int(rng_c.integers(0, len(pairs)))]
            l_c = _pair_consistency(var_p, var_o, pair, dm)
            total = total + consistency_weight * l_c
        value = float(total.detach())
        if not math.isfinite(value):
            from .errors import TrainingDivergedError

            raise TrainingDivergedError(step)
        for p in params_p + params_o:
            p.grad = None
        total.backward()
        opt_p.step()
        opt_o.step()
        trace.append(value)
    return FineTuneResult(variant_p=var_p, variant_o=var_o, trace=trace)


def _pair_consistency(var_p: PredictorVariant, var_o: PredictorVariant,
                      pair: TranslatedPair, dm: DistanceMatrix) -> torch.Tensor:
    if not pair.matched_labels:
        return torch.zeros((), dtype=var_p.encoder.dtype_)
    pred_o: dict[int, torch.Tensor] = {}
    for s in pair.projection_samples:
        if s.label in pair.matched_labels:
            x = part_input(s.color, s.mask, dtype=var_o.encoder.dtype_)
            _, mat_p = predict_probs(var_o.encoder, var_o.head, x)
            pred_o[s.label] = mat_p[0]
    pred_p: dict[int, list[tuple[float, torch.Tensor]]] = {}
    for s, label, weight in zip(pair.exemplar_samples, pair.exemplar_label_of_sample,
                                pair.exemplar_weight_of_sample):
        if label in pair.matched_labels:
            x = part_input(s.color, s.mask, dtype=var_p.encoder.dtype_)
            _, mat_p = predict_probs(var_p.encoder, var_p.head, x)
            pred_p.setdefault(label, []).append((weight, mat_p[0]))
    labels = [l for l in pair.matched_labels if l in pred_o and l in pred_p]
    return consistency_loss(pred_o, pred_p, labels, dm)


# ---------------------------------------------------------------------------
# Final assignment and the transfer entry point.
# ---------------------------------------------------------------------------

def final_assignment(
    pred_p: dict[int, list[tuple[float, MaterialPrediction]]],
    pred_o: dict[int, MaterialPrediction],
    o_labels: list[int],
    materials: list[Material],
) -> PartMaterialAssignment:
    """Matched parts take the weighted sub-region vote; others use pred_o."""
    entries: dict[int, AssignmentEntry] = {}
    n = len(materials)
    for label in o_labels:
        if label in pred_p and pred_p[label]:
            votes = np.zeros(n)
            probs = np.zeros(n)
            for weight, pred in pred_p[label]:
                votes[pred.top_material] += weight
                probs += weight * pred.material_probs
            best = int(np.flatnonzero(votes == votes.max())[0])
            probs = probs / probs.sum()
        elif label in pred_o:
            best = pred_o[label].top_material
            probs = pred_o[label].material_probs
        else:
            raise ValidationError(f"part {label} has no prediction from either pair")
        entries[label] = AssignmentEntry(
            category=materials[best].category, material_id=best, probs=probs,
        )
    return PartMaterialAssignment(entries=entries)


@dataclass
class AuditBundle:
    view: int
    shape_id: int
    o_s: np.ndarray
    p_c: np.ndarray
    o_c_hat: np.ndarray
    p_s_hat: np.ndarray
    overseg: np.ndarray
    subregions: SubRegionSet
    pred_p: dict[int, list[tuple[float, MaterialPrediction]]]
    pred_o: dict[int, MaterialPrediction]
    assignment: PartMaterialAssignment


def transfer(
    shape: ToyShape,
    exemplar: SegmentedImage,
    nets: TranslationNets,
    variant_p: PredictorVariant,
    variant_o: PredictorVariant,
    materials: list[Material],
    dm: DistanceMatrix,
    seed: int = 0,
    granularity: int = 12,
) -> tuple[PartMaterialAssignment, AuditBundle]:
    """Full transfer: pose, projection, translation, prediction, assignment.

    The exemplar's label raster is used only as a foreground mask.
    Errors are re-raised with the failing stage named.
    """
    stage = "select_pose"
    try:
        view = select_pose(exemplar, shape, shape.views)
        stage = "semantic_projection"
        o_s = semantic_projection(shape, view)
        stage = "translate"
        tr = translate(nets, o_s, exemplar.color)
        stage = "oversegment"
        overseg = oversegment(exemplar.color, exemplar.foreground(), granularity, seed)
        subs = intersect_subregions(overseg, tr.p_s_hat)
        stage = "predict"
        pred_p: dict[int, list[tuple[float, MaterialPrediction]]] = {}
        for label, regions in subs.regions.items():
            pred_p[label] = [
                (r.weight, predict(variant_p.encoder, variant_p.head, exemplar.color, r.mask))
                for r in regions
            ]
        o_labels = sorted(set(np.unique(o_s).tolist()) - {0})
        pred_o = {
            label: predict(variant_o.encoder, variant_o.head, tr.o_c_hat, o_s == label)
            for label in o_labels
        }
        stage = "final_assignment"
        assignment = final_assignment(pred_p, pred_o, o_labels, materials)
    except Exception as exc:
        raise RuntimeError(f"transfer failed at stage {stage}: {exc}") from exc
    bundle = AuditBundle(
        view=view, shape_id=shape.id, o_s=o_s, p_c=exemplar.color, o_c_hat=tr.o_c_hat,
        p_s_hat=tr.p_s_hat, overseg=overseg, subregions=subs, pred_p=pred_p, pred_o=pred_o,
        assignment=assignment,
    )
    return assignment, bundle


def save_audit_bundle(directory, bundle: AuditBundle, materials: list[Material]) -> None:
    from .predictor import dump_predictions
    from .synth import save_assignment

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "o_s.npy", bundle.o_s)
    np.save(directory / "p_c.npy", bundle.p_c)
    np.save(directory / "o_c_hat.npy", bundle.o_c_hat)
    np.save(directory / "p_s_hat.npy", bundle.p_s_hat)
    np.save(directory / "overseg.npy", bundle.overseg)
    masks = []
    index_lines = []
    for label in sorted(bundle.subregions.regions):
        for i, r in enumerate(bundle.subregions.regions[label]):
            index_lines.append(f"{label} {i} {r.area} {r.weight:.9g}")
            masks.append(r.mask)
    if masks:
        np.save(directory / "subregion_masks.npy", np.stack(masks))
    (directory / "subregions.txt").write_text("\n".join(index_lines) + ("\n" if index_lines else ""))
    dump_predictions(directory / "pred_o.txt", bundle.pred_o, materials)
    flat_p = {
        label: _merge_weighted(preds)
        for label, preds in bundle.pred_p.items()
    }
    dump_predictions(directory / "pred_p.txt", flat_p, materials)
    save_assignment(directory / "assignment.txt", bundle.assignment)
    (directory / "meta.txt").write_text(f"view {bundle.view}\nshape_id {bundle.shape_id}\n")


def _merge_weighted(preds: list[tuple[float, MaterialPrediction]]) -> MaterialPrediction:
    cat = sum(w * p.category_probs for w, p in preds)
    mat = sum(w * p.material_probs for w, p in preds)
    return MaterialPrediction(category_probs=cat / cat.sum(), material_probs=mat / mat.sum())
