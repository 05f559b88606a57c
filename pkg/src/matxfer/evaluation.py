"""Evaluation metrics and the two ablation runners.

Mat-acc and Cat-acc are exact correct/total fractions over parts; Mat-dis is
the mean perceptual distance between predicted and true materials. The
ablation runners reproduce the orderings of the loss-term study (three
classifier settings) and the fine-tuning study (before/after fine-tuning on
both translated pair types, with and without the consistency loss).
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field

import numpy as np

from .config import MatxferConfig
from .errors import ValidationError
from .learning import OptimizerConfig
from .materials import CATEGORIES, DistanceMatrix, Material, LibrarySpec, build_distance_matrix, generate_library
from .metric import (
    MetricWeights,
    PartSample,
    extract_part_samples,
    make_encoder,
    sample_reference_triplets,
    train_metric_stage,
)
from .predictor import ClassWeights, evaluate_samples, make_head, train_classifier_stage
from .synth import PartMaterialAssignment, ShapeSpec, build_dataset, generate_shapes, singleton_prior, split_dataset
from .transfer import PredictorVariant, build_finetune_pairs, fine_tune
from .translation import build_quadruples, make_translation_nets, train_translator, TranslationWeights


@dataclass
class MetricsReport:
    mat_correct: int
    cat_correct: int
    n_parts: int
    mat_dis: float
    config_fingerprint: str = ""
    seed: int = 0
    external_scores: dict = field(default_factory=dict)  # reserved (e.g. FID)

    @property
    def mat_acc(self) -> float:
        return self.mat_correct / self.n_parts

    @property
    def cat_acc(self) -> float:
        return self.cat_correct / self.n_parts

    def to_text(self) -> str:
        lines = [
            f"cat_acc: {self.cat_correct}/{self.n_parts} = {self.cat_acc:.6f}",
            f"config_fingerprint: {self.config_fingerprint}",
            f"mat_acc: {self.mat_correct}/{self.n_parts} = {self.mat_acc:.6f}",
            f"mat_dis: {self.mat_dis:.6f}",
            f"n_parts: {self.n_parts}",
            f"seed: {self.seed}",
        ]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "mat_acc": self.mat_acc, "cat_acc": self.cat_acc, "mat_dis": self.mat_dis,
            "mat_correct": self.mat_correct, "cat_correct": self.cat_correct,
            "n_parts": self.n_parts, "config_fingerprint": self.config_fingerprint,
            "seed": self.seed, "external_scores": self.external_scores,
        }
        return json.dumps(payload, sort_keys=True)


def compute_metrics(
    predicted: PartMaterialAssignment,
    truth: PartMaterialAssignment,
    dm: DistanceMatrix,
    config_fingerprint: str = "",
    seed: int = 0,
) -> MetricsReport:
    """Compare two assignments over identical part sets."""
    pred_parts = set(predicted.entries)
    true_parts = set(truth.entries)
    if not true_parts:
        raise ValidationError("empty ground-truth assignment")
    if pred_parts != true_parts:
        raise ValidationError(f"part sets differ: {sorted(pred_parts ^ true_parts)}")
    mat_correct = cat_correct = 0
    dis = 0.0
    for label in sorted(true_parts):
        p, t = predicted.entries[label], truth.entries[label]
        mat_correct += int(p.material_id == t.material_id)
        cat_correct += int(p.category == t.category)
        dis += float(dm.D[p.material_id, t.material_id])
    n = len(true_parts)
    return MetricsReport(
        mat_correct=mat_correct, cat_correct=cat_correct, n_parts=n, mat_dis=dis / n,
        config_fingerprint=config_fingerprint, seed=seed,
    )


def report_from_samples(acc: tuple[float, float, float], n: int, fingerprint: str, seed: int) -> MetricsReport:
    mat_acc, cat_acc, mat_dis = acc
    return MetricsReport(
        mat_correct=round(mat_acc * n), cat_correct=round(cat_acc * n), n_parts=n,
        mat_dis=mat_dis, config_fingerprint=fingerprint, seed=seed,
    )


# ---------------------------------------------------------------------------
# Shared experiment assembly.
# ---------------------------------------------------------------------------

@dataclass
class ExperimentData:
    materials: list[Material]
    dm: DistanceMatrix
    dataset: object
    train_records: list
    test_records: list
    train_samples: list[PartSample]
    test_samples: list[PartSample]
    vocabulary_size: int


def build_experiment_data(cfg: MatxferConfig, seed: int) -> ExperimentData:
    """Library, dataset, split, and per-part samples for one experiment seed."""
    lib_spec = LibrarySpec(
        counts={c: cfg.library.n_per_category for c in CATEGORIES},
        patch_size=cfg.library.patch_size,
        seed=seed,
        radius=cfg.library.radius,
        spread=cfg.library.spread,
        noise_amplitude=cfg.library.noise_amplitude,
        min_pair_distance=cfg.library.min_pair_distance,
    )
    materials = generate_library(lib_spec)
    dm = build_distance_matrix(materials)
    shapes = generate_shapes(ShapeSpec(
        n_shapes=cfg.synth.n_shapes,
        part_range=(cfg.synth.part_min, cfg.synth.part_max),
        vocabulary_size=cfg.synth.vocabulary_size,
        n_views=cfg.synth.n_views,
        image_size=cfg.synth.image_size,
    ), seed=seed)
    prior = singleton_prior(set(range(1, cfg.synth.vocabulary_size + 1)))
    dataset = build_dataset(
        shapes, materials, prior, seed=seed,
        assignments_per_shape=cfg.synth.assignments_per_shape,
        shading_amplitude=cfg.synth.shading_amplitude,
        vocabulary_size=cfg.synth.vocabulary_size,
    )
    train_records, test_records = split_dataset(dataset.records, seed=seed)
    return ExperimentData(
        materials=materials, dm=dm, dataset=dataset,
        train_records=train_records, test_records=test_records,
        train_samples=extract_part_samples(train_records, materials),
        test_samples=extract_part_samples(test_records, materials),
        vocabulary_size=cfg.synth.vocabulary_size,
    )


def train_predictor_full(cfg: MatxferConfig, data: ExperimentData, seed: int,
                         with_metric: bool = True, alpha5: float | None = None):
    """(encoder, head) trained per the configured stages."""
    dtype = cfg.torch_dtype()
    encoder = make_encoder(seed, dtype=dtype)
    if with_metric:
        triplets = sample_reference_triplets(
            data.dm, [m.category for m in data.materials], cfg.metric.triplet_count, seed=seed)
        weights = MetricWeights(cfg.metric.alpha1, cfg.metric.alpha2, cfg.metric.margin)
        opt = OptimizerConfig(cfg.metric.optimizer, cfg.metric.learning_rate,
                              momentum=cfg.metric.momentum, batch_size=cfg.metric.batch_size)
        train_metric_stage(encoder, data.train_samples, triplets, weights, opt, cfg.metric.steps, seed)
    head = make_head(len(data.materials), seed + 1, dtype=dtype)
    cw = ClassWeights(cfg.classifier.alpha3, cfg.classifier.alpha4,
                      cfg.classifier.alpha5 if alpha5 is None else alpha5)
    opt = OptimizerConfig(cfg.classifier.optimizer, cfg.classifier.learning_rate,
                          batch_size=cfg.classifier.batch_size)
    train_classifier_stage(
        encoder, head, data.train_samples, data.dm, cw, opt, cfg.classifier.steps, seed,
        encoder_lr_scale=cfg.classifier.encoder_lr_scale,
    )
    return encoder, head


# ---------------------------------------------------------------------------
# Ablation: classifier loss terms.
# ---------------------------------------------------------------------------

TABLE1_SETTINGS = ("cat+mat", "cat+mat+dis", "full")


@dataclass
class Table1Result:
    per_setting: dict[str, list[MetricsReport]]
    medians: dict[str, tuple[float, float, float]]  # (mat_acc, cat_acc, mat_dis)
    ordering_mat_dis: bool
    ordering_mat_acc: bool
    note: str = ""


def run_ablation_table1(cfg: MatxferConfig, seeds: list[int]) -> Table1Result:
    """Three classifier settings per seed; medians and ordering flags."""
    per_setting: dict[str, list[MetricsReport]] = {s: [] for s in TABLE1_SETTINGS}
    fingerprint = cfg.fingerprint()
    for seed in seeds:
        data = build_experiment_data(cfg, seed=cfg.run.seed)
        for setting in TABLE1_SETTINGS:
            with_metric = setting == "full"
            alpha5 = 0.0 if setting == "cat+mat" else None
            encoder, head = train_predictor_full(cfg, data, seed=seed, with_metric=with_metric, alpha5=alpha5)
            acc = evaluate_samples(encoder, head, data.test_samples, data.dm)
            per_setting[setting].append(
                report_from_samples(acc, len(data.test_samples), fingerprint, seed))
    medians = {
        s: (
            statistics.median(r.mat_acc for r in reports),
            statistics.median(r.cat_acc for r in reports),
            statistics.median(r.mat_dis for r in reports),
        )
        for s, reports in per_setting.items()
    }
    full, dis, catmat = medians["full"], medians["cat+mat+dis"], medians["cat+mat"]
    degenerate = full == dis == catmat
    ordering_dis = full[2] < dis[2] < catmat[2]
    ordering_acc = full[0] > dis[0] > catmat[0]
    return Table1Result(
        per_setting=per_setting,
        medians=medians,
        ordering_mat_dis=False if degenerate else ordering_dis,
        ordering_mat_acc=False if degenerate else ordering_acc,
        note="degenerate: identical metrics across settings" if degenerate else "",
    )


# ---------------------------------------------------------------------------
# Ablation: fine-tuning and consistency loss.
# ---------------------------------------------------------------------------

TABLE2_ROWS = ("no-finetune", "finetune", "finetune+Lc")


@dataclass
class Table2Result:
    exemplar_pair: dict[str, tuple[float, float, float]]    # medians per row
    projection_pair: dict[str, tuple[float, float, float]]
    per_seed: dict[str, dict[str, list[tuple[float, float, float]]]]
    finetune_improves_exemplar: bool
    finetune_improves_projection: bool
    consistency_improves_projection: bool


def evaluate_translated_pairs(variant_p: PredictorVariant, variant_o: PredictorVariant,
                              pairs, dm: DistanceMatrix):
    """((mat,cat,dis) on exemplar pairs, same on matched projection parts)."""
    p_samples = [s for pair in pairs for s in pair.exemplar_samples]
    o_samples = [
        s for pair in pairs
        for s, m in zip(pair.projection_samples, pair.projection_matched) if m
    ]
    if not p_samples or not o_samples:
        raise ValidationError("evaluation pairs produced no samples")
    acc_p = evaluate_samples(variant_p.encoder, variant_p.head, p_samples, dm)
    acc_o = evaluate_samples(variant_o.encoder, variant_o.head, o_samples, dm)
    return acc_p, acc_o


def run_ablation_table2(cfg: MatxferConfig, seeds: list[int]) -> Table2Result:
    """Fine-tuning study: six metric triples (2 pair types x 3 rows)."""
    base_seed = cfg.run.seed
    data = build_experiment_data(cfg, seed=base_seed)
    encoder, head = train_predictor_full(cfg, data, seed=base_seed)
    dtype = cfg.torch_dtype()
    nets = make_translation_nets(data.vocabulary_size, resolution=cfg.synth.image_size,
                                 seed=base_seed, temperature=cfg.translation.temperature, dtype=dtype)
    weights = TranslationWeights(cfg.translation.psi1, cfg.translation.psi2, cfg.translation.psi3,
                                 cfg.translation.psi4, cfg.translation.psi5, cfg.translation.psi6,
                                 cfg.translation.psi7, cfg.translation.psi8)
    quads = build_quadruples(data.train_records, seed=base_seed, count=cfg.translation.quadruple_count)
    g_cfg = OptimizerConfig(cfg.translation.optimizer, cfg.translation.learning_rate,
                            batch_size=cfg.translation.batch_size)
    d_cfg = OptimizerConfig(cfg.translation.optimizer, cfg.translation.d_learning_rate,
                            batch_size=cfg.translation.batch_size)
    train_translator(nets, quads, weights, g_cfg, d_cfg, cfg.translation.steps, seed=base_seed)

    ft_cfg = OptimizerConfig("adam", cfg.finetune.learning_rate, batch_size=cfg.finetune.batch_size)
    class_weights = ClassWeights(cfg.classifier.alpha3, cfg.classifier.alpha4, cfg.classifier.alpha5)
    per_seed: dict[str, dict[str, list[tuple[float, float, float]]]] = {
        "exemplar": {row: [] for row in TABLE2_ROWS},
        "projection": {row: [] for row in TABLE2_ROWS},
    }
    for seed in seeds:
        train_pairs = build_finetune_pairs(nets, data.train_records, encoder, head,
                                           data.materials, data.dm, seed=seed,
                                           count=cfg.finetune.n_pairs, granularity=cfg.finetune.granularity)
        eval_pairs = build_finetune_pairs(nets, data.test_records, encoder, head,
                                          data.materials, data.dm, seed=seed + 7777,
                                          count=cfg.eval.n_eval_pairs, granularity=cfg.finetune.granularity)
        base = PredictorVariant(encoder=encoder, head=head)
        acc_p0, acc_o0 = evaluate_translated_pairs(base, base, eval_pairs, data.dm)
        ft = fine_tune(encoder, head, train_pairs, data.dm, class_weights, 0.0,
                       ft_cfg, cfg.finetune.steps, seed, encoder_lr_scale=cfg.finetune.encoder_lr_scale)
        acc_p1, acc_o1 = evaluate_translated_pairs(ft.variant_p, ft.variant_o, eval_pairs, data.dm)
        ftc = fine_tune(encoder, head, train_pairs, data.dm, class_weights,
                        cfg.finetune.consistency_weight, ft_cfg, cfg.finetune.steps, seed,
                        encoder_lr_scale=cfg.finetune.encoder_lr_scale)
        acc_p2, acc_o2 = evaluate_translated_pairs(ftc.variant_p, ftc.variant_o, eval_pairs, data.dm)
        for row, (ap, ao) in zip(TABLE2_ROWS, ((acc_p0, acc_o0), (acc_p1, acc_o1), (acc_p2, acc_o2))):
            per_seed["exemplar"][row].append(ap)
            per_seed["projection"][row].append(ao)

    def med(triples):
        return (
            statistics.median(t[0] for t in triples),
            statistics.median(t[1] for t in triples),
            statistics.median(t[2] for t in triples),
        )

    ex = {row: med(per_seed["exemplar"][row]) for row in TABLE2_ROWS}
    pr = {row: med(per_seed["projection"][row]) for row in TABLE2_ROWS}

    def improves(after, before):
        return after[0] > before[0] and after[1] > before[1] and after[2] < before[2]

    return Table2Result(
        exemplar_pair=ex,
        projection_pair=pr,
        per_seed=per_seed,
        finetune_improves_exemplar=improves(ex["finetune"], ex["no-finetune"]),
        finetune_improves_projection=improves(pr["finetune"], pr["no-finetune"]),
        consistency_improves_projection=improves(pr["finetune+Lc"], pr["finetune"]),
    )
