"""Material prediction: category/material heads over the perceptual embedding
and the distance-aware classification loss.

The classification loss combines cross entropy on the category and material
heads with a perceptual distance term that charges a prediction by how far
its probability mass sits from the ground-truth material.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ValidationError
from .learning import DEFAULT_DTYPE, init_module, train_steps
from .materials import CATEGORIES, DistanceMatrix
from .metric import EMBED_DIM, PartEncoder, PartSample, part_input, stack_part_inputs

LOG_EPS = 1e-12


@dataclass
class ClassWeights:
    alpha3: float = 0.5   # category cross entropy
    alpha4: float = 1.0   # material cross entropy
    alpha5: float = 10.0  # perceptual distance term


class PredictionHead(torch.nn.Module):
    """Two linear heads: 128 -> 5 categories and 128 -> n materials."""

    def __init__(self, n_materials: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.category = torch.nn.Linear(EMBED_DIM, len(CATEGORIES), dtype=dtype)
        self.material = torch.nn.Linear(EMBED_DIM, n_materials, dtype=dtype)
        self.n_materials = n_materials

    def forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.category(feats), self.material(feats)


def make_head(n_materials: int, seed: int, dtype=DEFAULT_DTYPE) -> PredictionHead:
    return init_module(PredictionHead(n_materials, dtype=dtype), seed)


@dataclass
class MaterialPrediction:
    category_probs: np.ndarray  # (5,)
    material_probs: np.ndarray  # (n,)

    @property
    def top_category(self) -> int:
        return int(np.argmax(self.category_probs))

    @property
    def top_material(self) -> int:
        return int(np.argmax(self.material_probs))

    def validate(self):
        for v in (self.category_probs, self.material_probs):
            if v.min() < 0 or abs(v.sum() - 1.0) > 1e-9:
                raise ValidationError("prediction is not a probability vector")


def predict_probs(encoder: PartEncoder, head: PredictionHead, inputs: torch.Tensor):
    """(category_probs, material_probs) tensors for a batch of part inputs."""
    feats = encoder(inputs)
    cat_logits, mat_logits = head(feats)
    return torch.softmax(cat_logits, dim=-1), torch.softmax(mat_logits, dim=-1)


def predict(encoder: PartEncoder, head: PredictionHead, color: np.ndarray, mask: np.ndarray) -> MaterialPrediction:
    """Material prediction for one (color, part mask) pair."""
    x = part_input(color, mask, dtype=encoder.dtype_)
    with torch.no_grad():
        cat_p, mat_p = predict_probs(encoder, head, x)
    pred = MaterialPrediction(category_probs=cat_p[0].numpy(), material_probs=mat_p[0].numpy())
    pred.validate()
    return pred


def cross_entropy(probs: torch.Tensor, truth_index: int | torch.Tensor) -> torch.Tensor:
    """-log probs[truth]; probabilities below LOG_EPS are clamped and flagged."""
    p = probs.index_select(-1, torch.as_tensor(truth_index).reshape(-1)).squeeze(-1) \
        if probs.dim() > 1 else probs[int(truth_index)]
    if float(p.detach().min()) < LOG_EPS:
        warnings.warn("cross_entropy: probability clamped at epsilon", stacklevel=2)
        p = torch.clamp(p, min=LOG_EPS)
    return -torch.log(p) if p.dim() == 0 else -torch.log(p).mean()


def distance_loss(material_probs: torch.Tensor, gt_index: int, D: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Expected perceptual distance to the ground truth: m_p . D[:, idx(gt)]."""
    D_t = torch.as_tensor(np.asarray(D), dtype=material_probs.dtype)
    n = D_t.shape[0]
    if material_probs.shape[-1] != n:
        raise ValidationError("probability vector length != library size")
    if not 0 <= int(gt_index) < n:
        raise ValidationError("material index out of range")
    return material_probs @ D_t[:, int(gt_index)]


def classification_loss(
    cat_probs: torch.Tensor,
    mat_probs: torch.Tensor,
    gt_category: int,
    gt_material: int,
    dm: DistanceMatrix,
    weights: ClassWeights,
) -> torch.Tensor:
    """alpha3 * L_cat + alpha4 * L_mat + alpha5 * L_dis for one prediction."""
    return (
        weights.alpha3 * cross_entropy(cat_probs, gt_category)
        + weights.alpha4 * cross_entropy(mat_probs, gt_material)
        + weights.alpha5 * distance_loss(mat_probs, gt_material, dm.D)
    )


def batch_classification_loss(
    cat_probs: torch.Tensor,
    mat_probs: torch.Tensor,
    gt_categories: torch.Tensor,
    gt_materials: torch.Tensor,
    D_t: torch.Tensor,
    weights: ClassWeights,
) -> torch.Tensor:
    """Mean classification loss over a batch (vectorized)."""
    pc = torch.clamp(cat_probs.gather(1, gt_categories[:, None]).squeeze(1), min=LOG_EPS)
    pm = torch.clamp(mat_probs.gather(1, gt_materials[:, None]).squeeze(1), min=LOG_EPS)
    l_dis = (mat_probs * D_t[:, gt_materials].T).sum(dim=1)
    return (weights.alpha3 * (-torch.log(pc)) + weights.alpha4 * (-torch.log(pm)) + weights.alpha5 * l_dis).mean()


# ---------------------------------------------------------------------------
# Training and evaluation.
# ---------------------------------------------------------------------------

class _ClassifierModel(torch.nn.Module):
    """Encoder + head wrapper so one optimizer drives both."""

    def __init__(self, encoder: PartEncoder, head: PredictionHead):
        super().__init__()
        self.encoder = encoder
        self.head = head


@dataclass
class EvalPoint:
    step: int
    mat_acc: float
    cat_acc: float
    mat_dis: float


@dataclass
class ClassifierTrainResult:
    trace: list[float] = field(default_factory=list)
    eval_points: list[EvalPoint] = field(default_factory=list)


class _SampleBatcher:
    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC1A55)))

    def __iter__(self):
        return self

    def __next__(self):
        return self.rng.choice(self.n, size=self.batch_size, replace=False).tolist()


def train_classifier_stage(
    encoder: PartEncoder,
    head: PredictionHead,
    train_samples: list[PartSample],
    dm: DistanceMatrix,
    weights: ClassWeights,
    optimizer_cfg,
    steps: int,
    seed: int,
    encoder_lr_scale: float = 0.1,
    val_samples: list[PartSample] | None = None,
    eval_every: int = 0,
) -> ClassifierTrainResult:
    """Train heads (and, at reduced rate, the encoder) with the class loss."""
    model = _ClassifierModel(encoder, head)
    D_t = torch.as_tensor(dm.D, dtype=encoder.dtype_)
    batcher = _SampleBatcher(len(train_samples), optimizer_cfg.batch_size, seed)
    result = ClassifierTrainResult()

    lr_scale = []
    for name, p in model.named_parameters():
        lr_scale.append(encoder_lr_scale if name.startswith("encoder.") else 1.0)

    def loss_fn(m, batch_indices):
        batch = [train_samples[i] for i in batch_indices]
        inputs = stack_part_inputs(batch, dtype=encoder.dtype_)
        cat_p, mat_p = predict_probs(m.encoder, m.head, inputs)
        gt_c = torch.tensor([s.category_index for s in batch], dtype=torch.long)
        gt_m = torch.tensor([s.material_id for s in batch], dtype=torch.long)
        return batch_classification_loss(cat_p, mat_p, gt_c, gt_m, D_t, weights)

    eval_every = eval_every or 0
    done = 0
    while done < steps:
        chunk = steps - done if eval_every == 0 else min(eval_every, steps - done)
        result.trace.extend(train_steps(model, iter(batcher), loss_fn, optimizer_cfg, chunk, seed, lr_scale=lr_scale))
        done += chunk
        if val_samples and eval_every:
            acc = evaluate_samples(encoder, head, val_samples, dm)
            result.eval_points.append(EvalPoint(step=done, mat_acc=acc[0], cat_acc=acc[1], mat_dis=acc[2]))
    return result


def evaluate_samples(
    encoder: PartEncoder, head: PredictionHead, samples: list[PartSample], dm: DistanceMatrix,
    chunk: int = 256,
) -> tuple[float, float, float]:
    """(mat_acc, cat_acc, mat_dis) of top-1 predictions over `samples`."""
    if not samples:
        raise ValidationError("empty evaluation set")
    correct_m = correct_c = 0
    dis_sum = 0.0
    with torch.no_grad():
        for start in range(0, len(samples), chunk):
            part = samples[start:start + chunk]
            cat_p, mat_p = predict_probs(encoder, head, stack_part_inputs(part, dtype=encoder.dtype_))
            top_c = cat_p.argmax(dim=1).numpy()
            top_m = mat_p.argmax(dim=1).numpy()
            for s, tc, tm in zip(part, top_c, top_m):
                correct_c += int(tc == s.category_index)
                correct_m += int(tm == s.material_id)
                dis_sum += float(dm.D[tm, s.material_id])
    n = len(samples)
    return correct_m / n, correct_c / n, dis_sum / n


def dump_predictions(path, predictions: dict[int, MaterialPrediction], materials) -> None:
    """Textual dump: part id, top-1 category, top-1 material, probabilities."""
    with open(path, "w") as fh:
        for part_id in sorted(predictions):
            p = predictions[part_id]
            probs = " ".join(f"{v:.6f}" for v in p.material_probs)
            fh.write(f"{part_id} {CATEGORIES[p.top_category]} {materials[p.top_material].label} {probs}\n")
