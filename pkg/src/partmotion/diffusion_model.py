"""Transformer denoiser, cosine noise schedule, x0-prediction training and DDPM sampling.

The denoiser reads ``T + 2`` tokens (sequence text, diffusion step, and one
fused token per frame) and predicts the clean feature matrix directly. The
training objective is the unweighted mean squared error between that
prediction and ``x_0``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .annotation_schema import HierarchicalAnnotation
from .conditioning import (
    ConditionFusion, ConditionGrid, LabelEmbedder, MaskingConfig, PCAProjector, build_condition_grid,
    make_encoder, mask_batch, stack_grids,
)
from .errors import DiffusionError
from .motion_repr import (
    FeatureNormalizer, MotionSequence, PoseFeatureMatrix, Skeleton, decode_features,
)

CHECKPOINT_FORMAT = "partmotion-denoiser"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------- schedule


def cosine_alpha_bar(sigma, steps: int = 100, s: float = 0.008):
    """Cumulative signal fraction at step ``sigma``; exactly 1 at ``sigma = 0``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    f = np.cos(((sigma / steps + s) / (1 + s)) * np.pi / 2) ** 2
    return f / math.cos((s / (1 + s)) * math.pi / 2) ** 2


class NoiseSchedule:
    """Per-step constants of the forward process and its Gaussian posterior.

    Arrays are indexed by ``sigma`` in ``0..S``; entries at ``sigma = 0`` are
    placeholders for the (unused) step before the data.
    """

    def __init__(self, steps: int = 100, s: float = 0.008):
        self.steps, self.s = steps, s
        ab = cosine_alpha_bar(np.arange(steps + 1), steps, s)
        ab[0] = 1.0
        self.alpha_bar = ab
        self.alpha = np.ones(steps + 1)
        self.alpha[1:] = ab[1:] / ab[:-1]
        self.beta = 1.0 - self.alpha
        prev = np.concatenate([[1.0], ab[:-1]])
        denom = np.where(np.arange(steps + 1) > 0, 1.0 - ab, 1.0)
        self.posterior_variance = self.beta * (1.0 - prev) / denom
        self.posterior_coef_x0 = np.sqrt(prev) * self.beta / denom
        self.posterior_coef_xt = np.sqrt(self.alpha) * (1.0 - prev) / denom

    def __len__(self) -> int:
        return self.steps

    def posterior(self, x_t, x0_hat, sigma: int):
        """Mean and variance of ``q(x_{sigma-1} | x_sigma, x0_hat)``."""
        mean = self.posterior_coef_x0[sigma] * x0_hat + self.posterior_coef_xt[sigma] * x_t
        return mean, float(self.posterior_variance[sigma])


def q_sample(schedule: NoiseSchedule, x0, sigma, eps):
    """``sqrt(abar) x0 + sqrt(1 - abar) eps``; ``sigma`` is an int or a per-sample vector."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise DiffusionError("SHAPE_MISMATCH", f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if isinstance(x0, torch.Tensor):
        ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[torch.as_tensor(sigma)]
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    ab = np.asarray(schedule.alpha_bar[np.asarray(sigma)])
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(x0) - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps


# --------------------------------------------------------------------------- denoiser


@dataclass
class DenoiserConfig:
    motion_dim: int = 121
    text_dim: int = 256
    pca_dim: int = 50
    num_parts: int = 7
    width: int = 256
    depth: int = 4
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    max_frames: int = 200

    def __post_init__(self):
        if self.width % self.heads:
            raise DiffusionError("BAD_CONFIG", f"width {self.width} not divisible by {self.heads} heads")


class Denoiser(nn.Module):
    """Pre-norm transformer encoder over ``[sequence, step, frame_1..frame_T]`` tokens."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.fusion = ConditionFusion(cfg.motion_dim, cfg.text_dim, cfg.width, cfg.pca_dim, cfg.num_parts)
        self.pos = nn.Parameter(torch.randn(cfg.max_frames + 2, cfg.width) * 0.02)
        layer = nn.TransformerEncoderLayer(cfg.width, cfg.heads, cfg.ff_mult * cfg.width, cfg.dropout,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.width)
        self.out = nn.Linear(cfg.width, cfg.motion_dim)

    def forward(self, x, sigma, cond: dict, frame_mask=None):
        """Predict ``x_0`` from ``x`` (B, T, d) at steps ``sigma`` (B,).

        ``frame_mask`` (B, T) is True on real frames; padded frames are
        excluded from attention.
        """
        B, T, _ = x.shape
        if T > self.cfg.max_frames:
            raise DiffusionError("TOO_LONG", f"{T} frames > max_frames={self.cfg.max_frames}")
        h = self.fusion(cond["part"], cond["action"], x, cond["sequence"], sigma)
        h = h + self.pos[:T + 2]
        pad = None
        if frame_mask is not None:
            pad = torch.cat([torch.zeros(B, 2, dtype=torch.bool), ~frame_mask.bool()], dim=1)
        h = self.encoder(h, src_key_padding_mask=pad)
        return self.out(self.norm(h[:, 2:]))


# --------------------------------------------------------------------------- batches and loss


@dataclass
class Batch:
    x0: torch.Tensor  # (B, T, d)
    x_t: torch.Tensor
    sigma: torch.Tensor  # (B,)
    cond: dict
    mask: torch.Tensor  # (B, T) bool
    ids: list = field(default_factory=list)
    mask_rate: float = 0.0


def pad_features(feats: Sequence[np.ndarray], length: int | None = None):
    T = length or max(len(f) for f in feats)
    x = np.zeros((len(feats), T, feats[0].shape[1]), np.float32)
    m = np.zeros((len(feats), T), bool)
    for i, f in enumerate(feats):
        x[i, :len(f)] = f
        m[i, :len(f)] = True
    return torch.from_numpy(x), torch.from_numpy(m)


def make_batch(feats: Sequence[np.ndarray], grids: Sequence[ConditionGrid], schedule: NoiseSchedule,
               masking: MaskingConfig | None, rng: np.random.Generator, ids=()) -> Batch:
    """Noise a batch of normalized features; mask the conditions with one shared ``p``."""
    p = 0.0
    if masking is not None:
        grids, p = mask_batch(grids, masking, rng)
    x0, mask = pad_features(feats)
    cond = stack_grids(grids, x0.shape[1])
    sigma = torch.from_numpy(rng.integers(1, schedule.steps + 1, size=len(feats)))
    eps = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
    x_t = q_sample(schedule, x0, sigma, eps)
    return Batch(x0, x_t, sigma, cond, mask, list(ids), p)


def denoising_loss(model: nn.Module, batch: Batch, per_sample: bool = False):
    """Mean squared error of the ``x_0`` prediction over real frames and all columns."""
    pred = model(batch.x_t, batch.sigma, batch.cond, batch.mask)
    m = batch.mask[..., None].to(pred.dtype)
    se = (pred - batch.x0) ** 2 * m
    if per_sample:
        return se.sum(dim=(1, 2)) / (m.sum(dim=(1, 2)) * pred.shape[-1])
    return se.sum() / (m.sum() * pred.shape[-1])


def training_loss(model: nn.Module, batch: Batch) -> torch.Tensor:
    loss = denoising_loss(model, batch)
    if not torch.isfinite(loss):
        with torch.no_grad():
            per = denoising_loss(model, batch, per_sample=True)
        bad = [batch.ids[i] if i < len(batch.ids) else i for i in torch.nonzero(~torch.isfinite(per)).flatten().tolist()]
        raise DiffusionError("NONFINITE_LOSS", f"non-finite loss for {bad[:5]}", {"ids": bad})
    return loss


# --------------------------------------------------------------------------- generator bundle


@dataclass
class MotionGenerator:
    """A denoiser together with everything needed to turn annotations into motion."""

    model: Denoiser
    normalizer: FeatureNormalizer
    embedder: LabelEmbedder
    skeleton: Skeleton
    schedule: NoiseSchedule
    encoder_name: str
    meta: dict = field(default_factory=dict)

    def grid(self, ann: HierarchicalAnnotation) -> ConditionGrid:
        return build_condition_grid(ann, self.embedder)

    def save(self, path: str | Path) -> None:
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.model.cfg),
            "state_dict": self.model.state_dict(),
            "normalizer": self.normalizer.to_dict(),
            "projector": self.embedder.projector.to_dict(),
            "encoder": self.encoder_name,
            "skeleton": self.skeleton.to_dict(),
            "schedule": {"steps": self.schedule.steps, "s": self.schedule.s},
            "meta": self.meta,
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "MotionGenerator":
        ck = torch.load(path, map_location="cpu", weights_only=True)
        if ck.get("format") != CHECKPOINT_FORMAT or ck.get("version") != CHECKPOINT_VERSION:
            raise DiffusionError("BAD_CHECKPOINT", f"{path} is not a version {CHECKPOINT_VERSION} checkpoint")
        model = Denoiser(DenoiserConfig(**ck["config"]))
        model.load_state_dict(ck["state_dict"])
        model.eval()
        encoder = make_encoder(ck["encoder"])
        projector = PCAProjector.from_dict(ck["projector"])
        if projector.encoder_fingerprint and projector.encoder_fingerprint != encoder.fingerprint:
            raise DiffusionError("BAD_CHECKPOINT", "projector was fitted with a different encoder")
        return cls(model, FeatureNormalizer.from_dict(ck["normalizer"]), LabelEmbedder(encoder, projector),
                   Skeleton.from_dict(ck["skeleton"]), NoiseSchedule(**ck["schedule"]), ck["encoder"],
                   ck.get("meta", {}))


# --------------------------------------------------------------------------- sampling


@torch.no_grad()
def ddpm_sample(model: Callable, schedule: NoiseSchedule, grids: Sequence[ConditionGrid], seed: int,
                lengths: Sequence[int] | None = None, motion_dim: int | None = None,
                progress: Callable[[int], None] | None = None) -> list[np.ndarray]:
    """Ancestral sampling with ``x_0`` prediction for a batch of condition grids.

    Sample ``i`` draws its noise from its own generator seeded ``(seed, i)``,
    so outputs are reproducible for a fixed seed and batch.
    """
    lengths = list(lengths or [g.num_frames for g in grids])
    d = motion_dim or model.cfg.motion_dim
    B, T = len(grids), max(lengths)
    gens = [torch.Generator().manual_seed(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
            for i in range(B)]

    def noise():
        return torch.stack([torch.randn(T, d, generator=g) for g in gens])

    cond = stack_grids(grids, T)
    mask = torch.zeros(B, T, dtype=torch.bool)
    for i, n in enumerate(lengths):
        mask[i, :n] = True
    x = noise()
    for sigma in range(schedule.steps, 0, -1):
        x0_hat = model(x, torch.full((B,), sigma, dtype=torch.long), cond, mask)
        mean, var = schedule.posterior(x, x0_hat, sigma)
        x = mean + math.sqrt(var) * noise() if sigma > 1 else mean
        if progress:
            progress(sigma)
    if not torch.isfinite(x).all():
        raise DiffusionError("NONFINITE_SAMPLE", "sampler produced non-finite values")
    x = x.double().numpy()
    return [x[i, :n] for i, n in enumerate(lengths)]


def generate_motions(gen: MotionGenerator, annotations: Sequence[HierarchicalAnnotation], seed: int,
                     batch_size: int = 64) -> list[MotionSequence]:
    """Sample, denormalize and decode motions for ``annotations``."""
    gen.model.eval()
    out = []
    for b in range(0, len(annotations), batch_size):
        chunk = annotations[b:b + batch_size]
        feats = ddpm_sample(gen.model, gen.schedule, [gen.grid(a) for a in chunk], seed + b)
        for ann, x in zip(chunk, feats):
            m = decode_features(PoseFeatureMatrix(gen.normalizer.invert(x), ann.fps), gen.skeleton)
            m.annotation = ann
            out.append(m)
    return out


def generate_motion(gen: MotionGenerator, ann: HierarchicalAnnotation, seed: int) -> MotionSequence:
    return generate_motions(gen, [ann], seed)[0]


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    masking: MaskingConfig = field(default_factory=MaskingConfig)


def train_denoiser(gen: MotionGenerator, feats: Sequence[np.ndarray], annotations: Sequence[HierarchicalAnnotation],
                   cfg: TrainConfig, log_path: str | Path | None = None,
                   callback: Callable[[int, float], None] | None = None) -> list[float]:
    """Optimize ``gen.model`` on normalized features; returns the per-step losses.

    Progress (step, loss, lr, wall time) is appended to ``log_path`` as
    newline-delimited JSON every ``cfg.log_every`` steps.
    """
    if len(feats) != len(annotations) or not feats:
        raise DiffusionError("BAD_DATA", "features and annotations must be non-empty and aligned")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = gen.model
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    grids = [gen.grid(a) for a in annotations]
    ids = [a.id for a in annotations]
    order, cursor = rng.permutation(len(feats)), 0
    losses, t0 = [], time.time()
    log = open(log_path, "a") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            if cursor + cfg.batch_size > len(order):
                order, cursor = rng.permutation(len(feats)), 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            batch = make_batch([feats[i] for i in idx], [grids[i] for i in idx], gen.schedule, cfg.masking,
                               rng, [ids[i] for i in idx])
            loss = training_loss(model, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
            if log and (step % cfg.log_every == 0 or step == cfg.steps):
                log.write(json.dumps({"step": step, "loss": float(np.mean(losses[-cfg.log_every:])),
                                      "lr": cfg.lr, "wall_time": round(time.time() - t0, 3)}) + "\n")
                log.flush()
            if callback:
                callback(step, losses[-1])
    finally:
        if log:
            log.close()
    model.eval()
    return losses


def smoothed(losses: Sequence[float], center: int, window: int = 50) -> float:
    """Mean loss over a window of ``window`` steps centred on 1-based ``center``."""
    lo = max(0, center - 1 - window // 2)
    return float(np.mean(losses[lo:lo + window]))


# --------------------------------------------------------------------------- gradient check


def finite_difference_check(model: nn.Module, loss_fn: Callable[[], torch.Tensor], n_params: int = 50,
                            h: float = 1e-4, seed: int = 0) -> np.ndarray:
    """Relative errors between autograd and central differences on random scalar parameters.

    Intended for float64 models; ``loss_fn`` must be deterministic.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    errs = []
    for _ in range(n_params):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = params[k].data.view(-1)
        j = int(rng.integers(flat.numel()))
        analytic = float(params[k].grad.view(-1)[j])
        orig = float(flat[j])
        with torch.no_grad():
            flat[j] = orig + h
            up = float(loss_fn())
            flat[j] = orig - h
            down = float(loss_fn())
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    return np.array(errs)


# --------------------------------------------------------------------------- setup


def prepare_generator(samples: Sequence[tuple[MotionSequence, HierarchicalAnnotation]], skeleton: Skeleton,
                      cfg: DenoiserConfig, encoder_name: str = "toy-hash:256",
                      seed: int = 0) -> tuple[MotionGenerator, list[np.ndarray]]:
    """Fit the normalizer and label PCA on ``samples`` and build an untrained generator.

    Returns the generator and the normalized float32 training features.
    """
    from .conditioning import fit_label_pca, training_labels
    from .motion_repr import encode_features, fit_normalizer

    raw = [encode_features(m, skeleton).values for m, _ in samples]
    normalizer = fit_normalizer(raw)
    encoder = make_encoder(encoder_name)
    projector = fit_label_pca(training_labels(a for _, a in samples), encoder, cfg.pca_dim)
    if encoder.dim != cfg.text_dim:
        cfg = DenoiserConfig(**{**asdict(cfg), "text_dim": encoder.dim})
    torch.manual_seed(seed)
    gen = MotionGenerator(Denoiser(cfg), normalizer, LabelEmbedder(encoder, projector), skeleton,
                          NoiseSchedule(), encoder_name)
    return gen, [normalizer.apply(x).astype(np.float32) for x in raw]
