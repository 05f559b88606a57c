"""Command-line surface tying the pipeline stages together.

Artifacts live in a workspace directory: the synthesized library and dataset,
stage checkpoints, reports (textual plus JSON sidecar), audit bundles, and an
optional gallery of rendered results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, metric, predictor, synth, transfer as transfer_mod, translation
from .config import MatxferConfig, load_config
from .errors import ValidationError
from .learning import Checkpoint, OptimizerConfig, load_checkpoint, load_into_module, save_checkpoint
from .materials import (
    build_distance_matrix,
    lab_to_rgb,
    load_distance_matrix,
    load_library,
    save_distance_matrix,
    save_library,
)


def _ws(args) -> Path:
    ws = Path(args.workspace)
    ws.mkdir(parents=True, exist_ok=True)
    return ws


def _config(args) -> MatxferConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    return cfg


def _write_report(ws: Path, name: str, text: str, payload: dict) -> None:
    (ws / f"{name}.txt").write_text(text)
    (ws / f"{name}.json").write_text(json.dumps(payload, sort_keys=True) + "\n")


def _load_experiment(ws: Path, cfg: MatxferConfig):
    materials = load_library(ws / "library")
    dm = load_distance_matrix(ws / "distance.txt")
    dataset = synth.load_dataset(ws / "data", materials)
    split = json.loads((ws / "split.json").read_text())
    train = [r for r in dataset.records if r.shape_id in set(split["train"])]
    test = [r for r in dataset.records if r.shape_id in set(split["test"])]
    return materials, dm, dataset, train, test


def _save_predictor(path, encoder, head, cfg: MatxferConfig, seed: int, n_materials: int):
    tensors = {}
    for name, p in encoder.named_parameters():
        tensors[f"encoder.{name}"] = p
    for name, p in head.named_parameters():
        tensors[f"head.{name}"] = p
    save_checkpoint(path, tensors, seed=seed,
                    extra={"n_materials": n_materials, "fingerprint": cfg.fingerprint()})


def _load_predictor(path, cfg: MatxferConfig):
    ckpt = load_checkpoint(path)
    dtype = cfg.torch_dtype()
    encoder = metric.make_encoder(0, dtype=dtype)
    head = predictor.make_head(ckpt.extra["n_materials"], 0, dtype=dtype)
    enc_t = {k[len("encoder."):]: v for k, v in ckpt.tensors.items() if k.startswith("encoder.")}
    head_t = {k[len("head."):]: v for k, v in ckpt.tensors.items() if k.startswith("head.")}
    load_into_module(encoder, Checkpoint(enc_t, ckpt.seed, None))
    load_into_module(head, Checkpoint(head_t, ckpt.seed, None))
    return encoder, head


def _save_translator(path, nets: translation.TranslationNets, cfg: MatxferConfig, seed: int):
    save_checkpoint(path, nets.named_tensors(), seed=seed, extra={
        "vocab_size": nets.vocab_size, "resolution": nets.resolution,
        "temperature": nets.temperature, "fingerprint": cfg.fingerprint(),
    })


def _load_translator(path, cfg: MatxferConfig) -> translation.TranslationNets:
    ckpt = load_checkpoint(path)
    nets = translation.make_translation_nets(
        ckpt.extra["vocab_size"], resolution=ckpt.extra["resolution"], seed=0,
        temperature=ckpt.extra["temperature"], dtype=cfg.torch_dtype(),
    )
    named = nets.named_tensors()
    import torch

    with torch.no_grad():
        for name, p in named.items():
            p.copy_(ckpt.tensors[name].to(p.dtype))
    return nets


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    data = evaluation.build_experiment_data(cfg, seed=cfg.run.seed)
    save_library(ws / "library", data.materials)
    save_distance_matrix(ws / "distance.txt", data.dm)
    synth.save_dataset(ws / "data", data.dataset)
    split = {
        "train": sorted({r.shape_id for r in data.train_records}),
        "test": sorted({r.shape_id for r in data.test_records}),
    }
    (ws / "split.json").write_text(json.dumps(split, sort_keys=True) + "\n")
    (ws / "config_dump.txt").write_text(cfg.dump())
    print(f"synthesized {len(data.materials)} materials, {len(data.dataset.records)} renders "
          f"({len(data.train_records)} train / {len(data.test_records)} test)")
    return 0


def cmd_train_metric(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    materials, dm, dataset, train, _ = _load_experiment(ws, cfg)
    samples = metric.extract_part_samples(train, materials)
    encoder = metric.make_encoder(cfg.run.seed, dtype=cfg.torch_dtype())
    triplets = metric.sample_reference_triplets(
        dm, [m.category for m in materials], cfg.metric.triplet_count, seed=cfg.run.seed)
    metric.save_triplets(ws / "triplets.txt", triplets)
    weights = metric.MetricWeights(cfg.metric.alpha1, cfg.metric.alpha2, cfg.metric.margin)
    opt = OptimizerConfig(cfg.metric.optimizer, cfg.metric.learning_rate,
                          momentum=cfg.metric.momentum, batch_size=cfg.metric.batch_size)
    trace = metric.train_metric_stage(encoder, samples, triplets, weights, opt,
                                      cfg.metric.steps, cfg.run.seed)
    head = predictor.make_head(len(materials), cfg.run.seed + 1, dtype=cfg.torch_dtype())
    _save_predictor(ws / "metric.ckpt", encoder, head, cfg, cfg.run.seed, len(materials))
    (ws / "metric_trace.txt").write_text("\n".join(f"{v:.9g}" for v in trace) + "\n")
    print(f"metric stage: {len(trace)} steps, loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return 0


def cmd_train_classifier(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    materials, dm, dataset, train, test = _load_experiment(ws, cfg)
    train_samples = metric.extract_part_samples(train, materials)
    test_samples = metric.extract_part_samples(test, materials)
    if (ws / "metric.ckpt").exists() and not args.from_scratch:
        encoder, head = _load_predictor(ws / "metric.ckpt", cfg)
    else:
        encoder = metric.make_encoder(cfg.run.seed, dtype=cfg.torch_dtype())
        head = predictor.make_head(len(materials), cfg.run.seed + 1, dtype=cfg.torch_dtype())
    weights = predictor.ClassWeights(cfg.classifier.alpha3, cfg.classifier.alpha4, cfg.classifier.alpha5)
    opt = OptimizerConfig(cfg.classifier.optimizer, cfg.classifier.learning_rate,
                          batch_size=cfg.classifier.batch_size)
    result = predictor.train_classifier_stage(
        encoder, head, train_samples, dm, weights, opt, cfg.classifier.steps, cfg.run.seed,
        encoder_lr_scale=cfg.classifier.encoder_lr_scale,
        val_samples=test_samples, eval_every=max(1, cfg.classifier.steps // 4),
    )
    _save_predictor(ws / "classifier.ckpt", encoder, head, cfg, cfg.run.seed, len(materials))
    (ws / "classifier_trace.txt").write_text("\n".join(f"{v:.9g}" for v in result.trace) + "\n")
    last = result.eval_points[-1] if result.eval_points else None
    if last:
        print(f"classifier: mat_acc {last.mat_acc:.3f} cat_acc {last.cat_acc:.3f} mat_dis {last.mat_dis:.3f}")
    return 0


def cmd_train_translator(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    materials, dm, dataset, train, _ = _load_experiment(ws, cfg)
    nets = translation.make_translation_nets(
        dataset.vocabulary_size, resolution=cfg.synth.image_size, seed=cfg.run.seed,
        temperature=cfg.translation.temperature, dtype=cfg.torch_dtype())
    weights = translation.TranslationWeights(
        cfg.translation.psi1, cfg.translation.psi2, cfg.translation.psi3, cfg.translation.psi4,
        cfg.translation.psi5, cfg.translation.psi6, cfg.translation.psi7, cfg.translation.psi8)
    quads = translation.build_quadruples(train, seed=cfg.run.seed, count=cfg.translation.quadruple_count)
    g_cfg = OptimizerConfig(cfg.translation.optimizer, cfg.translation.learning_rate,
                            batch_size=cfg.translation.batch_size)
    d_cfg = OptimizerConfig(cfg.translation.optimizer, cfg.translation.d_learning_rate,
                            batch_size=cfg.translation.batch_size)
    result = translation.train_translator(nets, quads, weights, g_cfg, d_cfg,
                                          cfg.translation.steps, seed=cfg.run.seed)
    _save_translator(ws / "translator.ckpt", nets, cfg, cfg.run.seed)
    (ws / "translator_trace.txt").write_text(
        "\n".join(f"{g:.9g} {d:.9g}" for g, d in zip(result.g_trace, result.d_trace)) + "\n")
    print(f"translator: {len(result.g_trace)} steps, G loss {result.g_trace[0]:.3f} -> {result.g_trace[-1]:.3f}")
    return 0


def cmd_fine_tune(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    materials, dm, dataset, train, _ = _load_experiment(ws, cfg)
    encoder, head = _load_predictor(ws / "classifier.ckpt", cfg)
    nets = _load_translator(ws / "translator.ckpt", cfg)
    pairs = transfer_mod.build_finetune_pairs(
        nets, train, encoder, head, materials, dm, seed=cfg.run.seed,
        count=cfg.finetune.n_pairs, granularity=cfg.finetune.granularity)
    ft_cfg = OptimizerConfig("adam", cfg.finetune.learning_rate, batch_size=cfg.finetune.batch_size)
    cw = predictor.ClassWeights(cfg.classifier.alpha3, cfg.classifier.alpha4, cfg.classifier.alpha5)
    result = transfer_mod.fine_tune(encoder, head, pairs, dm, cw,
                                    cfg.finetune.consistency_weight, ft_cfg,
                                    cfg.finetune.steps, cfg.run.seed,
                                    encoder_lr_scale=cfg.finetune.encoder_lr_scale)
    _save_predictor(ws / "finetuned_p.ckpt", result.variant_p.encoder, result.variant_p.head,
                    cfg, cfg.run.seed, len(materials))
    _save_predictor(ws / "finetuned_o.ckpt", result.variant_o.encoder, result.variant_o.head,
                    cfg, cfg.run.seed, len(materials))
    print(f"fine-tuned both variants over {len(result.trace)} steps")
    return 0


def _variants(ws: Path, cfg: MatxferConfig):
    if (ws / "finetuned_p.ckpt").exists():
        vp = transfer_mod.PredictorVariant(*_load_predictor(ws / "finetuned_p.ckpt", cfg))
        vo = transfer_mod.PredictorVariant(*_load_predictor(ws / "finetuned_o.ckpt", cfg))
    else:
        encoder, head = _load_predictor(ws / "classifier.ckpt", cfg)
        vp = transfer_mod.PredictorVariant(encoder, head)
        vo = transfer_mod.PredictorVariant(encoder, head)
    return vp, vo


def cmd_transfer(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    materials, dm, dataset, train, test = _load_experiment(ws, cfg)
    nets = _load_translator(ws / "translator.ckpt", cfg)
    vp, vo = _variants(ws, cfg)
    shapes = {s.id: s for s in dataset.shapes}
    if args.shape not in shapes:
        raise ValidationError(f"unknown shape id {args.shape}")
    shape = shapes[args.shape]
    if args.exemplar is not None:
        sid, aid, view = (int(v) for v in args.exemplar.split(":"))
        rec = next((r for r in dataset.records
                    if r.shape_id == sid and r.assignment_id == aid and r.view == view), None)
        if rec is None:
            raise ValidationError(f"no dataset record {args.exemplar}")
        exemplar = rec.image
    else:
        color = np.load(args.exemplar_color)
        mask = np.load(args.exemplar_mask) if args.exemplar_mask else np.ones(color.shape[:2], dtype=np.int64)
        exemplar = synth.SegmentedImage(color=color, labels=mask.astype(np.int64))
    assignment, bundle = transfer_mod.transfer(
        shape, exemplar, nets, vp, vo, materials, dm,
        seed=cfg.run.seed, granularity=cfg.finetune.granularity)
    out = Path(args.out)
    transfer_mod.save_audit_bundle(out, bundle, materials)
    print(f"transfer complete: {len(assignment.entries)} parts -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    materials, dm, dataset, train, test = _load_experiment(ws, cfg)
    source = ws / ("classifier.ckpt" if (ws / "classifier.ckpt").exists() else "metric.ckpt")
    encoder, head = _load_predictor(source, cfg)
    samples = metric.extract_part_samples(test, materials)
    acc = predictor.evaluate_samples(encoder, head, samples, dm)
    report = evaluation.report_from_samples(acc, len(samples), cfg.fingerprint(), cfg.run.seed)
    _write_report(ws, "evaluate", report.to_text(), json.loads(report.to_json()))
    print(report.to_text(), end="")
    return 0


def cmd_ablate_table1(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = evaluation.run_ablation_table1(cfg, seeds)
    lines = []
    payload = {"seeds": seeds, "medians": {}, "ordering_mat_dis": result.ordering_mat_dis,
               "ordering_mat_acc": result.ordering_mat_acc, "note": result.note,
               "config_fingerprint": cfg.fingerprint()}
    for setting in evaluation.TABLE1_SETTINGS:
        acc, cat, dis = result.medians[setting]
        lines.append(f"{setting}: mat_acc {acc:.4f} cat_acc {cat:.4f} mat_dis {dis:.4f}")
        payload["medians"][setting] = {"mat_acc": acc, "cat_acc": cat, "mat_dis": dis}
    lines.append(f"ordering_mat_dis: {result.ordering_mat_dis}")
    lines.append(f"ordering_mat_acc: {result.ordering_mat_acc}")
    if result.note:
        lines.append(f"note: {result.note}")
    text = "\n".join(lines) + "\n"
    _write_report(ws, "table1", text, payload)
    print(text, end="")
    return 0


def cmd_ablate_table2(args) -> int:
    cfg = _config(args)
    ws = _ws(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = evaluation.run_ablation_table2(cfg, seeds)
    lines = []
    payload = {"seeds": seeds, "exemplar": {}, "projection": {},
               "finetune_improves_exemplar": result.finetune_improves_exemplar,
               "finetune_improves_projection": result.finetune_improves_projection,
               "consistency_improves_projection": result.consistency_improves_projection,
               "config_fingerprint": cfg.fingerprint()}
    for pair_name, table in (("exemplar", result.exemplar_pair), ("projection", result.projection_pair)):
        for row in evaluation.TABLE2_ROWS:
            acc, cat, dis = table[row]
            lines.append(f"{pair_name}/{row}: mat_acc {acc:.4f} cat_acc {cat:.4f} mat_dis {dis:.4f}")
            payload[pair_name][row] = {"mat_acc": acc, "cat_acc": cat, "mat_dis": dis}
    lines.append(f"finetune_improves_exemplar: {result.finetune_improves_exemplar}")
    lines.append(f"finetune_improves_projection: {result.finetune_improves_projection}")
    lines.append(f"consistency_improves_projection: {result.consistency_improves_projection}")
    text = "\n".join(lines) + "\n"
    _write_report(ws, "table2", text, payload)
    print(text, end="")
    return 0


def cmd_gallery(args) -> int:
    from PIL import Image

    cfg = _config(args)
    ws = _ws(args)
    materials, dm, dataset, _, _ = _load_experiment(ws, cfg)
    shapes = {s.id: s for s in dataset.shapes}
    out = ws / "gallery"
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for bundle_dir in sorted(Path(args.transfers).iterdir()):
        if not (bundle_dir / "assignment.txt").exists():
            continue
        assignment = synth.load_assignment(bundle_dir / "assignment.txt", materials)
        meta = dict(line.split() for line in (bundle_dir / "meta.txt").read_text().splitlines())
        view = int(meta["view"])
        p_c = np.load(bundle_dir / "p_c.npy")
        shape = shapes.get(int(meta["shape_id"]))
        if shape is None:
            continue
        render = synth.render_pair(shape, assignment, view, materials, seed=0, shading_amplitude=0.0)
        left = (lab_to_rgb(p_c) * 255).astype(np.uint8)
        right = (lab_to_rgb(render.color) * 255).astype(np.uint8)
        gap = np.full((left.shape[0], 4, 3), 255, dtype=np.uint8)
        strip = np.concatenate([left, gap, right], axis=1)
        Image.fromarray(strip).save(out / f"{bundle_dir.name}.png")
        count += 1
    print(f"gallery: wrote {count} panels to {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point.
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matxfer", description=__doc__)
    parser.add_argument("--dump-config", action="store_true", help="print default config and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--workspace", default="workspace", help="artifact directory")
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    common(sub.add_parser("synth", help="generate library and dataset"))
    common(sub.add_parser("train-metric", help="metric-learning stage"))
    p = sub.add_parser("train-classifier", help="classification stage")
    common(p)
    p.add_argument("--from-scratch", action="store_true")
    common(sub.add_parser("train-translator", help="image translation stage"))
    common(sub.add_parser("fine-tune", help="dual fine-tuning with consistency loss"))
    p = sub.add_parser("transfer", help="run one transfer")
    common(p)
    p.add_argument("--shape", type=int, required=True)
    p.add_argument("--exemplar", default=None, help="dataset record SID:AID:VIEW")
    p.add_argument("--exemplar-color", default=None, help="npy Lab raster")
    p.add_argument("--exemplar-mask", default=None, help="npy foreground mask")
    p.add_argument("--out", required=True)
    common(sub.add_parser("evaluate", help="metrics on the test split"))
    p = sub.add_parser("ablate-table1", help="classifier loss ablation")
    common(p)
    p.add_argument("--seeds", default="0,1,2")
    p = sub.add_parser("ablate-table2", help="fine-tuning ablation")
    common(p)
    p.add_argument("--seeds", default="0,1,2")
    p = sub.add_parser("gallery", help="render result panels")
    common(p)
    p.add_argument("--transfers", required=True, help="directory of audit bundles")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train-metric": cmd_train_metric,
    "train-classifier": cmd_train_classifier,
    "train-translator": cmd_train_translator,
    "fine-tune": cmd_fine_tune,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "ablate-table1": cmd_ablate_table1,
    "ablate-table2": cmd_ablate_table2,
    "gallery": cmd_gallery,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    if args.dump_config:
        print(MatxferConfig().dump(), end="")
        return 0
    if args.command is None:
        parser.print_usage()
        return 1
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
