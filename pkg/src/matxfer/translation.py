"""Miniature exemplar-based image translation.

Two domain encoders embed a semantic label raster and a color image into a
shared feature space; a correspondence layer turns per-position cosine
similarities into a row-stochastic correlation matrix; the correlation warps
color one way (exemplar -> projection layout) and segmentation the other
way; and a small U-shaped generator synthesizes the final translated color.
Training combines contextual, perceptual, feature-matching, adversarial,
segmentation, and regularization terms under fixed weights.

The feature taps used by the contextual/perceptual losses come from frozen,
seeded convolutional pyramids (stand-ins for pretrained backbone taps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TrainingDivergedError, ValidationError
from .learning import DEFAULT_DTYPE, OptimizerConfig, init_module, make_optimizer
from .materials import denormalize_lab, normalize_lab
from .synth import BACKGROUND_LAB, RenderRecord, SegmentedImage

CONTEXT_BANDWIDTH = 0.5


@dataclass
class TranslationWeights:
    psi1: float = 1.0    # contextual (color)
    psi2: float = 0.01   # perceptual
    psi3: float = 10.0   # feature matching
    psi4: float = 10.0   # adversarial (generator)
    psi5: float = 100.0  # segmentation NLL
    psi6: float = 2.0    # contextual (segmentation)
    psi7: float = 1.0    # domain alignment
    psi8: float = 1.0    # cycle


# ---------------------------------------------------------------------------
# Networks.
# ---------------------------------------------------------------------------

class DomainEncoder(torch.nn.Module):
    """3-level pyramid mapping one domain into the shared space.

    Output is a (C, H/4, W/4) feature map with unit-norm feature vectors at
    every spatial position.
    """

    def __init__(self, in_channels: int, width: int = 24, out_channels: int = 32, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.c1 = torch.nn.Conv2d(in_channels, width, 3, stride=1, padding=1, dtype=dtype)
        self.c2 = torch.nn.Conv2d(width, width * 2, 3, stride=2, padding=1, dtype=dtype)
        self.c3 = torch.nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1, dtype=dtype)
        self.proj = torch.nn.Conv2d(width * 2, out_channels, 1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.c1(x))
        h = F.relu(self.c2(h))
        h = F.relu(self.c3(h))
        h = self.proj(h)
        return F.normalize(h, dim=-3, eps=1e-8)


class FeatureExtractor(torch.nn.Module):
    """Frozen seeded pyramid; taps after each level feed the feature losses."""

    def __init__(self, in_channels: int, widths: tuple[int, ...] = (8, 16, 32), dtype=DEFAULT_DTYPE):
        super().__init__()
        convs = []
        c_in = in_channels
        for i, w in enumerate(widths):
            convs.append(torch.nn.Conv2d(c_in, w, 3, stride=1 if i == 0 else 2, padding=1, dtype=dtype))
            c_in = w
        self.convs = torch.nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            taps.append(h)
        return taps


class SynthesisGenerator(torch.nn.Module):
    """U-shaped refiner: (warped color, semantic one-hot) -> translated color.

    The output passes through a scaled tanh so synthesized colors stay within
    the representable normalized Lab range during adversarial training.
    """

    OUT_SCALE = 1.2

    def __init__(self, seg_channels: int, width: int = 20, dtype=DEFAULT_DTYPE):
        super().__init__()
        in_ch = 3 + seg_channels
        self.enc1 = torch.nn.Conv2d(in_ch, width, 3, stride=1, padding=1, dtype=dtype)
        self.enc2 = torch.nn.Conv2d(width, width * 2, 3, stride=2, padding=1, dtype=dtype)
        self.bott = torch.nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1, dtype=dtype)
        self.dec2 = torch.nn.Conv2d(width * 4, width, 3, stride=1, padding=1, dtype=dtype)
        self.dec1 = torch.nn.Conv2d(width * 2, width, 3, stride=1, padding=1, dtype=dtype)
        self.out = torch.nn.Conv2d(width, 3, 1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = F.relu(self.enc1(x))
        e2 = F.relu(self.enc2(e1))
        b = F.relu(self.bott(e2))
        u2 = F.interpolate(b, scale_factor=2, mode="bilinear", align_corners=False)
        d2 = F.relu(self.dec2(torch.cat([u2, e2], dim=-3)))
        u1 = F.interpolate(d2, scale_factor=2, mode="bilinear", align_corners=False)
        d1 = F.relu(self.dec1(torch.cat([u1, e1], dim=-3)))
        return self.OUT_SCALE * torch.tanh(self.out(d1))


class SNConv2d(torch.nn.Conv2d):
    """Conv whose weight is divided by its exact spectral norm each forward.

    Stateless (no power-iteration buffers), so repeated forwards are
    bit-identical and checkpoints keep plain parameter names.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.weight
        sigma = torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), ord=2)
        return self._conv_forward(x, w / sigma.clamp_min(1e-12), self.bias)


class Discriminator(torch.nn.Module):
    """Spectrally normalized conv stack scoring a color raster."""

    def __init__(self, width: int = 16, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.c1 = SNConv2d(3, width, 3, stride=2, padding=1, dtype=dtype)
        self.c2 = SNConv2d(width, width * 2, 3, stride=2, padding=1, dtype=dtype)
        self.c3 = SNConv2d(width * 2, 1, 3, stride=1, padding=1, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.c1(x), 0.2)
        h = F.leaky_relu(self.c2(h), 0.2)
        return self.c3(h).mean(dim=(-1, -2, -3))


@dataclass
class TranslationNets:
    seg_encoder: DomainEncoder
    col_encoder: DomainEncoder
    generator: SynthesisGenerator
    discriminator: Discriminator
    color_extractor: FeatureExtractor
    seg_extractor: FeatureExtractor
    vocab_size: int          # number of semantic labels (background excluded)
    resolution: int
    temperature: float = 0.1
    dtype: torch.dtype = DEFAULT_DTYPE

    def generator_parameters(self):
        for m in (self.seg_encoder, self.col_encoder, self.generator):
            yield from m.parameters()

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, mod in (("seg_encoder", self.seg_encoder), ("col_encoder", self.col_encoder),
                            ("generator", self.generator), ("discriminator", self.discriminator),
                            ("color_extractor", self.color_extractor), ("seg_extractor", self.seg_extractor)):
            for name, p in sorted(mod.named_parameters(), key=lambda kv: kv[0]):
                out[f"{prefix}.{name}"] = p
        return out


def make_translation_nets(
    vocab_size: int,
    resolution: int = 64,
    seed: int = 0,
    temperature: float = 0.1,
    dtype=DEFAULT_DTYPE,
) -> TranslationNets:
    if resolution % 4 != 0:
        raise ValidationError("resolution must be divisible by 4")
    seg_ch = vocab_size + 1
    nets = TranslationNets(
        seg_encoder=init_module(DomainEncoder(seg_ch, dtype=dtype), seed + 1),
        col_encoder=init_module(DomainEncoder(3, dtype=dtype), seed + 2),
        generator=init_module(SynthesisGenerator(seg_ch, dtype=dtype), seed + 3),
        discriminator=init_module(Discriminator(dtype=dtype), seed + 4),
        color_extractor=init_module(FeatureExtractor(3, dtype=dtype), seed + 5),
        seg_extractor=init_module(FeatureExtractor(seg_ch, dtype=dtype), seed + 6),
        vocab_size=vocab_size,
        resolution=resolution,
        temperature=temperature,
        dtype=dtype,
    )
    return nets


# ---------------------------------------------------------------------------
# Raster <-> tensor helpers.
# ---------------------------------------------------------------------------

def color_tensor(color: np.ndarray, dtype=DEFAULT_DTYPE) -> torch.Tensor:
    """(3, H, W) normalized Lab tensor."""
    return torch.from_numpy(normalize_lab(color).transpose(2, 0, 1)).to(dtype)


def onehot_tensor(labels: np.ndarray, vocab_size: int, dtype=DEFAULT_DTYPE) -> torch.Tensor:
    """(vocab+1, H, W) one-hot planes; channel 0 is background."""
    labels = np.asarray(labels)
    if labels.max(initial=0) > vocab_size:
        raise ValidationError("label raster exceeds vocabulary")
    planes = np.zeros((vocab_size + 1,) + labels.shape, dtype=np.float64)
    for c in range(vocab_size + 1):
        planes[c] = labels == c
    return torch.from_numpy(planes).to(dtype)


def embed_shared(nets: TranslationNets, image, domain: str) -> torch.Tensor:
    """Shared-domain feature map for a raster; per-position unit norm."""
    if domain == "seg":
        x = image if isinstance(image, torch.Tensor) else onehot_tensor(image, nets.vocab_size, nets.dtype)
        enc = nets.seg_encoder
    elif domain == "color":
        x = image if isinstance(image, torch.Tensor) else color_tensor(image, nets.dtype)
        enc = nets.col_encoder
    else:
        raise ValidationError(f"unknown domain {domain!r}")
    if x.shape[-1] != nets.resolution or x.shape[-2] != nets.resolution:
        raise ValidationError(f"input resolution {tuple(x.shape[-2:])} != configured {nets.resolution}")
    return enc(x[None] if x.dim() == 3 else x).squeeze(0)


# ---------------------------------------------------------------------------
# Correspondence and warping.
# ---------------------------------------------------------------------------

def correspondence(emb_a: torch.Tensor, emb_b: torch.Tensor, temperature: float) -> torch.Tensor:
    """Row-stochastic correlation: row i is softmax_j of cos(f_a[i], f_b[j])/T."""
    if emb_a.shape != emb_b.shape:
        raise ValidationError("embedding shapes differ")
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    c = emb_a.shape[0]
    fa = emb_a.reshape(c, -1).T
    fb = emb_b.reshape(c, -1).T
    fa = F.normalize(fa, dim=1, eps=1e-12)
    fb = F.normalize(fb, dim=1, eps=1e-12)
    sim = fa @ fb.T / temperature
    return torch.softmax(sim, dim=1)


def warp(source: torch.Tensor, corr: torch.Tensor, direction: str = "forward") -> torch.Tensor:
    """Warp (N, C) source values through the correlation matrix.

    forward: out[i] = sum_j corr[i, j] * source[j]  (source indexed by columns)
    backward: out[j] = sum_i corr[i, j] * source[i], normalized by column mass.
    """
    if source.dim() == 1:
        source = source[:, None]
    if direction == "forward":
        if corr.shape[1] != source.shape[0]:
            raise ValidationError("source rows must match corr columns")
        return corr @ source
    if direction == "backward":
        if corr.shape[0] != source.shape[0]:
            raise ValidationError("source rows must match corr rows")
        mass = corr.sum(dim=0)[:, None]
        return (corr.T @ source) / mass
    raise ValidationError(f"unknown direction {direction!r}")


def raster_to_positions(t: torch.Tensor) -> torch.Tensor:
    """(C, h, w) -> (h*w, C)."""
    return t.reshape(t.shape[0], -1).T


def positions_to_raster(p: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return p.T.reshape(-1, h, w)


def downsample(t: torch.Tensor, factor: int) -> torch.Tensor:
    return F.avg_pool2d(t[None], factor).squeeze(0)


def upsample(t: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(t[None], size=(size, size), mode="bilinear", align_corners=False).squeeze(0)


# ---------------------------------------------------------------------------
# Loss terms.
# ---------------------------------------------------------------------------

def contextual_affinity(feat_a: torch.Tensor, feat_b: torch.Tensor, bandwidth: float = CONTEXT_BANDWIDTH) -> torch.Tensor:
    """Affinity A[i, j] = exp((cos(a_i, b_j) - 1) / bandwidth) in (0, 1].

    Attains exactly 1 when b contains a feature collinear with a_i, which
    makes the contextual loss of identical feature sets exactly zero.
    """
    fa = F.normalize(raster_to_positions(feat_a) if feat_a.dim() == 3 else feat_a, dim=1, eps=1e-12)
    fb = F.normalize(raster_to_positions(feat_b) if feat_b.dim() == 3 else feat_b, dim=1, eps=1e-12)
    cos = fa @ fb.T
    return torch.exp((cos - 1.0) / bandwidth)


def contextual_loss(
    feats_a: list[torch.Tensor],
    feats_b: list[torch.Tensor],
    layer_weights: list[float] | None = None,
    bandwidth: float = CONTEXT_BANDWIDTH,
) -> torch.Tensor:
    """Per layer: -log(mean_i max_j A(a_i, b_j)), weighted across layers."""
    if len(feats_a) != len(feats_b) or not feats_a:
        raise ValidationError("contextual loss needs matching nonempty layer lists")
    if layer_weights is None:
        layer_weights = [1.0 / len(feats_a)] * len(feats_a)
    total = None
    for w, fa, fb in zip(layer_weights, feats_a, feats_b):
        if fa.numel() == 0 or fb.numel() == 0:
            raise ValidationError("empty feature layer")
        A = contextual_affinity(fa, fb, bandwidth)
        term = -torch.log(A.max(dim=1).values.mean())
        total = term * w if total is None else total + term * w
    return total


def perceptual_loss(img_a: torch.Tensor, img_b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """L1 distance between the deepest extractor features."""
    if img_a.shape != img_b.shape:
        raise ValidationError("image shapes differ")
    fa = extractor(img_a[None])[-1]
    fb = extractor(img_b[None])[-1]
    return (fa - fb).abs().sum()


def distort_exemplar(color_norm: torch.Tensor, seed: int, max_shift: int = 3) -> torch.Tensor:
    """Random flip + small translate; the documented distortion family."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD157)))
    out = color_norm
    if rng.random() < 0.5:
        out = torch.flip(out, dims=[-1])
    dy, dx = int(rng.integers(-max_shift, max_shift + 1)), int(rng.integers(-max_shift, max_shift + 1))
    if dy or dx:
        H, W = out.shape[-2:]
        bg = torch.from_numpy(normalize_lab(BACKGROUND_LAB)).to(out.dtype)
        shifted = torch.empty_like(out)
        shifted[:] = bg[:, None, None]
        src_y = slice(max(0, -dy), H - max(0, dy))
        dst_y = slice(max(0, dy), H - max(0, -dy))
        src_x = slice(max(0, -dx), W - max(0, dx))
        dst_x = slice(max(0, dx), W - max(0, -dx))
        shifted[..., dst_y, dst_x] = out[..., src_y, src_x]
        out = shifted
    return out


def feature_matching_loss(
    o_s_onehot: torch.Tensor,
    o_c_norm: torch.Tensor,
    distortion_seed: int,
    translate_fn,
    extractor: FeatureExtractor,
    layer_weights: list[float] | None = None,
) -> torch.Tensor:
    """Pseudo-exemplar reconstruction: features of G(O_s, distort(O_c)) vs O_c."""
    distorted = distort_exemplar(o_c_norm, distortion_seed)
    out = translate_fn(o_s_onehot, distorted)
    taps_out = extractor(out[None])
    taps_gt = extractor(o_c_norm[None])
    if layer_weights is None:
        layer_weights = [1.0 / len(taps_out)] * len(taps_out)
    total = None
    for w, fo, fg in zip(layer_weights, taps_out, taps_gt):
        term = (fo - fg).abs().sum() * w
        total = term if total is None else total + term
    return total


def adversarial_losses(disc, real: torch.Tensor, fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Hinge GAN objectives.

    d_loss = E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))]
    g_loss = -E[D(fake)]
    """
    if real.dim() == 3:
        real = real[None]
    if fake.dim() == 3:
        fake = fake[None]
    d_real = disc(real)
    d_fake = disc(fake)
    d_loss = F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()
    g_loss = -d_fake.mean()
    return d_loss, g_loss


def segmentation_nll(p_hat_probs: torch.Tensor, p_s_labels: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Pixel-mean negative log likelihood of the true labels."""
    labels = torch.as_tensor(np.asarray(p_s_labels), dtype=torch.long)
    if p_hat_probs.shape[-2:] != labels.shape:
        raise ValidationError("distribution/label raster sizes differ")
    probs = p_hat_probs.clamp_min(1e-12)
    picked = probs.gather(0, labels[None]).squeeze(0)
    return -torch.log(picked).mean()


def segmentation_context(
    p_hat_probs: torch.Tensor,
    p_s_onehot: torch.Tensor,
    extractor: FeatureExtractor,
    n_layers: int = 2,
) -> torch.Tensor:
    """RMS feature distance over the shallow taps of the segmentation pyramid."""
    taps_hat = extractor(p_hat_probs[None])[:n_layers]
    taps_gt = extractor(p_s_onehot[None])[:n_layers]
    total = None
    for fh, fg in zip(taps_hat, taps_gt):
        term = torch.linalg.vector_norm(fh - fg)
        total = term if total is None else total + term
    return total


def segmentation_losses(
    p_hat_probs: torch.Tensor,
    p_s_labels,
    p_s_onehot: torch.Tensor,
    extractor: FeatureExtractor,
    weights: TranslationWeights,
) -> torch.Tensor:
    return weights.psi5 * segmentation_nll(p_hat_probs, p_s_labels) + \
        weights.psi6 * segmentation_context(p_hat_probs, p_s_onehot, extractor)


def alignment_loss(emb_o_s: torch.Tensor, emb_o_c: torch.Tensor) -> torch.Tensor:
    """L1 distance between the two shared-domain embeddings."""
    if emb_o_s.shape != emb_o_c.shape:
        raise ValidationError("embedding shapes differ")
    return (emb_o_s - emb_o_c).abs().sum()


def cycle_loss(p_c_positions: torch.Tensor, corr_o2p: torch.Tensor, corr_p2o: torch.Tensor) -> torch.Tensor:
    """L1 between P_c and its forward-backward warp through both correlations."""
    to_o = warp(p_c_positions, corr_o2p, "forward")
    back = warp(to_o, corr_p2o, "forward")
    return (back - p_c_positions).abs().sum()


def regularization_losses(
    emb_o_s: torch.Tensor,
    emb_o_c: torch.Tensor,
    p_c_positions: torch.Tensor,
    corr_o2p: torch.Tensor,
    corr_p2o: torch.Tensor,
    weights: TranslationWeights,
) -> torch.Tensor:
    return weights.psi7 * alignment_loss(emb_o_s, emb_o_c) + \
        weights.psi8 * cycle_loss(p_c_positions, corr_o2p, corr_p2o)


@dataclass
class LossComponents:
    context_col: torch.Tensor
    perc: torch.Tensor
    feat: torch.Tensor
    adv_g: torch.Tensor
    pred: torch.Tensor
    context_seg: torch.Tensor
    align: torch.Tensor
    cycle: torch.Tensor


def translation_total_loss(c: LossComponents, w: TranslationWeights) -> torch.Tensor:
    """Color + segmentation + regularization groups, each psi-weighted."""
    col = w.psi1 * c.context_col + w.psi2 * c.perc + w.psi3 * c.feat + w.psi4 * c.adv_g
    seg = w.psi5 * c.pred + w.psi6 * c.context_seg
    reg = w.psi7 * c.align + w.psi8 * c.cycle
    return col + seg + reg


# ---------------------------------------------------------------------------
# Forward translation.
# ---------------------------------------------------------------------------

@dataclass
class TranslationOutput:
    o_c_hat: np.ndarray          # H x W x 3 Lab
    p_s_hat: np.ndarray          # H x W int labels
    p_s_hat_probs: np.ndarray    # (vocab+1) x H x W
    corr_o2p: np.ndarray | None = None
    corr_p2o: np.ndarray | None = None


def _translate_tensors(nets: TranslationNets, o_s_onehot: torch.Tensor, p_c_norm: torch.Tensor):
    """Differentiable core of translate(); returns tensors for loss assembly."""
    S = nets.resolution
    s = S // 4
    emb_o = nets.seg_encoder(o_s_onehot[None]).squeeze(0)
    emb_p = nets.col_encoder(p_c_norm[None]).squeeze(0)
    corr_o2p = correspondence(emb_o, emb_p, nets.temperature)
    corr_p2o = correspondence(emb_p, emb_o, nets.temperature)

    p_c_low = raster_to_positions(downsample(p_c_norm, 4))
    warped_color_low = warp(p_c_low, corr_o2p, "forward")
    warped_color = upsample(positions_to_raster(warped_color_low, s, s), S)
    o_c_hat = nets.generator(torch.cat([warped_color, o_s_onehot], dim=0)[None]).squeeze(0)

    o_s_low = raster_to_positions(downsample(o_s_onehot, 4))
    p_s_low = warp(o_s_low, corr_p2o, "forward")
    p_s_probs = upsample(positions_to_raster(p_s_low, s, s), S)
    p_s_probs = p_s_probs.clamp_min(0.0)
    p_s_probs = p_s_probs / p_s_probs.sum(dim=0, keepdim=True).clamp_min(1e-12)
    return {
        "emb_o": emb_o, "emb_p": emb_p,
        "corr_o2p": corr_o2p, "corr_p2o": corr_p2o,
        "p_c_low": p_c_low, "warped_color": warped_color,
        "o_c_hat": o_c_hat, "p_s_probs": p_s_probs,
    }


def translate(nets: TranslationNets, o_s_labels: np.ndarray, p_c_color: np.ndarray,
              export_corr: bool = False) -> TranslationOutput:
    """Inference: project exemplar color onto O's layout and O's labels onto P."""
    o_s_onehot = onehot_tensor(o_s_labels, nets.vocab_size, nets.dtype)
    p_c_norm = color_tensor(p_c_color, nets.dtype)
    with torch.no_grad():
        t = _translate_tensors(nets, o_s_onehot, p_c_norm)
    o_c_hat = denormalize_lab(t["o_c_hat"].numpy().transpose(1, 2, 0))
    probs = t["p_s_probs"].numpy()
    p_s_hat = probs.argmax(axis=0).astype(np.int64)
    return TranslationOutput(
        o_c_hat=o_c_hat,
        p_s_hat=p_s_hat,
        p_s_hat_probs=probs,
        corr_o2p=t["corr_o2p"].numpy() if export_corr else None,
        corr_p2o=t["corr_p2o"].numpy() if export_corr else None,
    )


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

@dataclass
class Quadruple:
    """(O_c, O_s, P_c, P_s): two (color, segmentation) pairs of one shape."""

    o: SegmentedImage
    p: SegmentedImage
    shape_id: int = -1


def build_quadruples(records: list[RenderRecord], seed: int, count: int,
                     allow_self: bool = False) -> list[Quadruple]:
    """Pair renders of the same shape under different assignments."""
    by_shape: dict[int, list[RenderRecord]] = {}
    for r in records:
        by_shape.setdefault(r.shape_id, []).append(r)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9AAD)))
    sids = sorted(by_shape)
    quads = []
    for _ in range(count * 8):
        if len(quads) >= count:
            break
        sid = sids[int(rng.integers(0, len(sids)))]
        pool = by_shape[sid]
        o = pool[int(rng.integers(0, len(pool)))]
        if allow_self:
            p = o
        else:
            others = [r for r in pool if r.assignment_id != o.assignment_id]
            if not others:
                continue
            p = others[int(rng.integers(0, len(others)))]
        quads.append(Quadruple(o=o.image, p=p.image, shape_id=sid))
    return quads


@dataclass
class TranslatorTrainResult:
    g_trace: list[float] = field(default_factory=list)
    d_trace: list[float] = field(default_factory=list)


def quadruple_loss(nets: TranslationNets, quad: Quadruple, weights: TranslationWeights,
                   feat_seed: int) -> tuple[torch.Tensor, LossComponents, torch.Tensor]:
    """Generator-side total loss for one quadruple; also returns O_c_hat."""
    o_s_onehot = onehot_tensor(quad.o.labels, nets.vocab_size, nets.dtype)
    p_s_onehot = onehot_tensor(quad.p.labels, nets.vocab_size, nets.dtype)
    o_c_norm = color_tensor(quad.o.color, nets.dtype)
    p_c_norm = color_tensor(quad.p.color, nets.dtype)
    t = _translate_tensors(nets, o_s_onehot, p_c_norm)

    taps_hat = nets.color_extractor(t["o_c_hat"][None])
    taps_p = nets.color_extractor(p_c_norm[None])
    context_col = contextual_loss(
        [tap.squeeze(0) for tap in taps_hat[1:]],
        [tap.squeeze(0) for tap in taps_p[1:]],
    )
    perc = perceptual_loss(t["o_c_hat"], o_c_norm, nets.color_extractor)

    def translate_fn(seg_onehot, exemplar_norm):
        return _translate_tensors(nets, seg_onehot, exemplar_norm)["o_c_hat"]

    feat = feature_matching_loss(o_s_onehot, o_c_norm, feat_seed, translate_fn, nets.color_extractor)
    _, adv_g = adversarial_losses(nets.discriminator, p_c_norm, t["o_c_hat"])
    pred = segmentation_nll(t["p_s_probs"], quad.p.labels)
    context_seg = segmentation_context(t["p_s_probs"], p_s_onehot, nets.seg_extractor)
    emb_o_c = nets.col_encoder(o_c_norm[None]).squeeze(0)
    align = alignment_loss(t["emb_o"], emb_o_c)
    cyc = cycle_loss(t["p_c_low"], t["corr_o2p"], t["corr_p2o"])

    comps = LossComponents(
        context_col=context_col, perc=perc, feat=feat, adv_g=adv_g,
        pred=pred, context_seg=context_seg, align=align, cycle=cyc,
    )
    return translation_total_loss(comps, weights), comps, t["o_c_hat"]


def train_translator(
    nets: TranslationNets,
    quads: list[Quadruple],
    weights: TranslationWeights,
    g_cfg: OptimizerConfig,
    d_cfg: OptimizerConfig | None,
    steps: int,
    seed: int,
) -> TranslatorTrainResult:
    """Alternating generator/discriminator updates (1:1), deterministic."""
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    d_cfg = d_cfg or g_cfg
    g_params = [p for p in nets.generator_parameters() if p.requires_grad]
    d_params = [p for p in nets.discriminator.parameters() if p.requires_grad]
    g_opt = make_optimizer(g_params, g_cfg)
    d_opt = make_optimizer(d_params, d_cfg)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x79A1)))
    result = TranslatorTrainResult()
    for step in range(steps):
        idx = rng.integers(0, len(quads), size=g_cfg.batch_size)
        batch = [quads[int(i)] for i in idx]

        g_total = None
        fakes = []
        for qi, quad in enumerate(batch):
            loss, _, o_c_hat = quadruple_loss(nets, quad, weights, feat_seed=seed * 100000 + step * 100 + qi)
            fakes.append(o_c_hat.detach())
            g_total = loss if g_total is None else g_total + loss
        g_total = g_total / len(batch)
        g_value = float(g_total.detach())
        if not math.isfinite(g_value):
            raise TrainingDivergedError(step)
        for p in g_params + d_params:
            p.grad = None
        g_total.backward()
        g_opt.step()

        reals = torch.stack([color_tensor(q.p.color, nets.dtype) for q in batch])
        d_loss, _ = adversarial_losses(nets.discriminator, reals, torch.stack(fakes))
        d_value = float(d_loss.detach())
        if not math.isfinite(d_value):
            raise TrainingDivergedError(step)
        for p in d_params:
            p.grad = None
        d_loss.backward()
        d_opt.step()

        result.g_trace.append(g_value)
        result.d_trace.append(d_value)
    return result
