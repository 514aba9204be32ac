"""Hierarchical text conditioning: label embeddings -> per-frame condition grid -> tokens.

Part and action labels are embedded, reduced with a label PCA to ``D``
dimensions and rasterized per frame; UNKNOWN labels give exact zero blocks.
During training whole labeled part segments are zeroed with a probability
``p ~ Beta(5r, 5(1-r))`` drawn once per step. :class:`ConditionFusion` maps
``[part | action | noisy motion]`` per frame, the sequence text and the
diffusion step to ``T + 2`` tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .annotation_schema import (
    NUM_PARTS, UNKNOWN, HierarchicalAnnotation, PartId, require_valid, tokenize,
)
from .errors import ConditioningError

PCA_DIM = 50


# --------------------------------------------------------------------------- text encoders


class TextEncoder(Protocol):
    dim: int
    fingerprint: str

    def encode(self, text: str) -> np.ndarray: ...


class ToyHashEncoder:
    """Deterministic bag-of-tokens encoder.

    Each lowercased token maps to a fixed Gaussian vector seeded by its hash;
    a text is the normalized sum of its token vectors, so texts sharing words
    are similar and identical texts are identical.
    """

    def __init__(self, dim: int = 256, salt: str = ""):
        self.dim = dim
        self.salt = salt
        self.fingerprint = f"toy-hash:{dim}" + (f":{salt}" if salt else "")

    @lru_cache(maxsize=None)
    def _token(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.salt}\x00{token}".encode()).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little")).standard_normal(self.dim)

    @lru_cache(maxsize=4096)
    def _encode(self, text: str) -> np.ndarray:
        tokens = tokenize(text) or [""]
        v = np.sum([self._token(t) for t in tokens], axis=0)
        v = v / np.linalg.norm(v)
        v.setflags(write=False)
        return v

    def encode(self, text: str) -> np.ndarray:
        return self._encode(text)


class PretrainedEncoder:
    """Wrapper around a sentence-transformers model (optional dependency)."""

    def __init__(self, identifier: str):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(identifier)
        self.dim = int(self.model.get_sentence_embedding_dimension())
        self.fingerprint = f"pretrained:{identifier}"
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, text: str) -> np.ndarray:
        if text not in self._cache:
            self._cache[text] = np.asarray(self.model.encode(text, normalize_embeddings=True), dtype=np.float64)
        return self._cache[text]


def make_encoder(name: str) -> TextEncoder:
    kind, _, arg = name.partition(":")
    if kind == "toy-hash":
        return ToyHashEncoder(int(arg) if arg else 256)
    if kind == "pretrained" and arg:
        return PretrainedEncoder(arg)
    raise ConditioningError("BAD_ENCODER", f"unknown encoder {name!r}")


# --------------------------------------------------------------------------- PCA


@dataclass
class PCAProjector:
    mean: np.ndarray  # (E,)
    components: np.ndarray  # (E, D), orthonormal columns
    explained_variance: np.ndarray  # (D,)
    encoder_fingerprint: str = ""

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.components

    def to_dict(self) -> dict:
        return {"D": self.dim, "mean": self.mean.tolist(), "matrix": self.components.tolist(),
                "explained_variance": self.explained_variance.tolist(),
                "encoder": self.encoder_fingerprint}

    @classmethod
    def from_dict(cls, obj: dict) -> "PCAProjector":
        return cls(np.asarray(obj["mean"]), np.asarray(obj["matrix"]).reshape(len(obj["mean"]), obj["D"]),
                   np.asarray(obj["explained_variance"]), obj.get("encoder", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "PCAProjector":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_label_pca(labels: Iterable, encoder: TextEncoder, dim: int = PCA_DIM) -> PCAProjector:
    """Top principal directions of the (centered) embeddings of distinct labels."""
    unique = sorted({l for l in labels if l is not UNKNOWN})
    if len(unique) < dim:
        raise ConditioningError("INSUFFICIENT_LABELS", f"{len(unique)} distinct labels for D={dim}")
    X = np.stack([encoder.encode(l) for l in unique]).astype(np.float64)
    return fit_pca(X, dim, getattr(encoder, "fingerprint", ""))


def fit_pca(X: np.ndarray, dim: int, fingerprint: str = "") -> PCAProjector:
    """PCA of the rows of ``X`` with the largest-magnitude entry of each component positive."""
    n, E = X.shape
    if n < dim or E < dim:
        raise ConditioningError("INSUFFICIENT_LABELS", f"{n} rows of width {E} for D={dim}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=True)
    comps = vt[:dim].T.copy()
    pivot = np.argmax(np.abs(comps), axis=0)
    comps *= np.sign(comps[pivot, np.arange(dim)])
    s = np.concatenate([s, np.zeros(max(0, dim - len(s)))])
    var = (s[:dim] ** 2) / max(n - 1, 1)
    return PCAProjector(mean, comps, var, fingerprint)


def training_labels(annotations: Iterable[HierarchicalAnnotation]) -> set[str]:
    """Distinct known part and action labels (the PCA fitting corpus)."""
    out = set()
    for ann in annotations:
        out |= {s.label for s in ann.actions if s.known}
        for p in PartId:
            out |= {s.label for s in ann.parts[p] if s.known}
    return out


# --------------------------------------------------------------------------- condition grid


@dataclass(frozen=True)
class ConditionGrid:
    part: np.ndarray  # (T, K*D)
    action: np.ndarray  # (T, D)
    known: np.ndarray  # (T, K+1) bool; column K is the action
    sequence: np.ndarray  # (E,)
    sequence_known: bool
    segments: tuple = ()  # (column, start, end) of every known segment

    @property
    def num_frames(self) -> int:
        return self.part.shape[0]

    @property
    def pca_dim(self) -> int:
        return self.action.shape[1]

    def part_block(self, part: PartId) -> np.ndarray:
        D = self.pca_dim
        return self.part[:, int(part) * D:(int(part) + 1) * D]


class LabelEmbedder:
    """Encoder + projector with a per-label cache."""

    def __init__(self, encoder: TextEncoder, projector: PCAProjector):
        self.encoder = encoder
        self.projector = projector
        self._cache: dict[str, np.ndarray] = {}

    def label(self, text: str) -> np.ndarray:
        if text not in self._cache:
            self._cache[text] = self.projector.project(self.encoder.encode(text)).astype(np.float32)
        return self._cache[text]

    def sentence(self, text) -> np.ndarray:
        if text is UNKNOWN:
            return np.zeros(self.encoder.dim, dtype=np.float32)
        return np.asarray(self.encoder.encode(text), dtype=np.float32)


def build_condition_grid(ann: HierarchicalAnnotation, encoder: TextEncoder | LabelEmbedder,
                         projector: PCAProjector | None = None) -> ConditionGrid:
    require_valid(ann)
    emb = encoder if isinstance(encoder, LabelEmbedder) else LabelEmbedder(encoder, projector)
    T, D, K = ann.num_frames, emb.projector.dim, NUM_PARTS
    part = np.zeros((T, K * D), dtype=np.float32)
    action = np.zeros((T, D), dtype=np.float32)
    known = np.zeros((T, K + 1), dtype=bool)
    segments = []
    for p in PartId:
        k = int(p)
        for seg in ann.parts[p]:
            if seg.known:
                part[seg.start:seg.end, k * D:(k + 1) * D] = emb.label(seg.label)
                known[seg.start:seg.end, k] = True
                segments.append((k, seg.start, seg.end))
    for seg in ann.actions:
        if seg.known:
            action[seg.start:seg.end] = emb.label(seg.label)
            known[seg.start:seg.end, K] = True
            segments.append((K, seg.start, seg.end))
    seq_label = ann.sequence_label
    return ConditionGrid(part, action, known, emb.sentence(seq_label), seq_label is not UNKNOWN,
                         tuple(segments))


# --------------------------------------------------------------------------- masking


@dataclass(frozen=True)
class MaskingConfig:
    rate: float = 0.25
    action_drop: float = 0.1
    sequence_drop: float = 0.1
    granularity: str = "segment"

    def __post_init__(self):
        object.__setattr__(self, "rate", float(min(max(self.rate, 0.02), 0.98)))
        if self.granularity != "segment":
            raise ConditioningError("BAD_MASKING", "only segment granularity is supported")

    @property
    def alpha(self) -> float:
        return 5 * self.rate

    @property
    def beta(self) -> float:
        return 5 * (1 - self.rate)


def draw_mask_probability(cfg: MaskingConfig, rng: np.random.Generator) -> float:
    return float(rng.beta(cfg.alpha, cfg.beta))


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def mask_with_probability(grid: ConditionGrid, p: float, cfg: MaskingConfig,
                          rng: np.random.Generator) -> ConditionGrid:
    """Zero each labeled part segment w.p. ``p``, each action window / the sequence
    w.p. their fixed drop rates."""
    part, action, known = grid.part.copy(), grid.action.copy(), grid.known.copy()
    D, K = grid.pca_dim, NUM_PARTS
    draws = rng.random(len(grid.segments))
    kept = []
    for (col, s, e), u in zip(grid.segments, draws):
        if u < (p if col < K else cfg.action_drop):
            known[s:e, col] = False
            if col < K:
                part[s:e, col * D:(col + 1) * D] = 0.0
            else:
                action[s:e] = 0.0
        else:
            kept.append((col, s, e))
    seq_known = grid.sequence_known and rng.random() >= cfg.sequence_drop
    seq = grid.sequence if seq_known else np.zeros_like(grid.sequence)
    return ConditionGrid(part, action, known, seq, seq_known, tuple(kept))


def apply_stochastic_masking(grid: ConditionGrid, cfg: MaskingConfig, seed) -> ConditionGrid:
    rng = _rng(seed)
    return mask_with_probability(grid, draw_mask_probability(cfg, rng), cfg, rng)


def mask_batch(grids: Sequence[ConditionGrid], cfg: MaskingConfig,
               rng: np.random.Generator) -> tuple[list[ConditionGrid], float]:
    """One training step: a single ``p`` shared by every sample of the batch."""
    p = draw_mask_probability(cfg, rng)
    return [mask_with_probability(g, p, cfg, rng) for g in grids], p


# --------------------------------------------------------------------------- fusion


def timestep_embedding(sigma: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer diffusion steps, ``(B,) -> (B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = sigma.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _mlp(n_in: int, width: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, width), nn.GELU(), nn.Linear(width, width))


class ConditionFusion(nn.Module):
    """``[F_p | F_a | x_sigma]`` per frame, sequence text and step -> ``(B, T+2, W)``.

    Token order: sequence token, timestep token, then the T frame tokens.
    """

    def __init__(self, motion_dim: int, text_dim: int, width: int = 256,
                 pca_dim: int = PCA_DIM, num_parts: int = NUM_PARTS):
        super().__init__()
        self.motion_dim, self.text_dim, self.width = motion_dim, text_dim, width
        self.cond_dim = (num_parts + 1) * pca_dim
        self.frame = _mlp(self.cond_dim + motion_dim, width)
        self.sequence = _mlp(text_dim, width)
        self.timestep = _mlp(width, width)

    def forward(self, part, action, x_noisy, seq, sigma) -> torch.Tensor:
        B, T, _ = x_noisy.shape
        if (part.shape[:2] != (B, T) or action.shape[:2] != (B, T)
                or part.shape[-1] + action.shape[-1] != self.cond_dim
                or x_noisy.shape[-1] != self.motion_dim or seq.shape != (B, self.text_dim)
                or sigma.shape != (B,)):
            raise ConditioningError("SHAPE_MISMATCH", f"part {tuple(part.shape)}, action {tuple(action.shape)}, "
                                    f"x {tuple(x_noisy.shape)}, seq {tuple(seq.shape)}, sigma {tuple(sigma.shape)}")
        frames = self.frame(torch.cat([part, action, x_noisy], dim=-1))
        seq_tok = self.sequence(seq)
        t_tok = self.timestep(timestep_embedding(sigma, self.width).to(x_noisy.dtype))
        return torch.cat([seq_tok[:, None], t_tok[:, None], frames], dim=1)


@dataclass
class ModelInput:
    frames: torch.Tensor  # (T, W)
    sequence: torch.Tensor  # (W,)
    timestep: torch.Tensor  # (W,)

    @property
    def tokens(self) -> torch.Tensor:
        return torch.cat([self.sequence[None], self.timestep[None], self.frames], dim=0)


def assemble_model_input(grid: ConditionGrid, x_noisy, sigma: int, fusion: ConditionFusion) -> ModelInput:
    x = torch.as_tensor(np.asarray(x_noisy), dtype=torch.float32)
    if x.ndim != 2 or x.shape[0] != grid.num_frames:
        raise ConditioningError("SHAPE_MISMATCH", f"motion has {x.shape[0]} frames, grid {grid.num_frames}")
    tok = fusion(torch.from_numpy(grid.part)[None], torch.from_numpy(grid.action)[None], x[None],
                 torch.from_numpy(np.asarray(grid.sequence, dtype=np.float32))[None],
                 torch.tensor([sigma]))[0]
    return ModelInput(tok[2:], tok[0], tok[1])


def stack_grids(grids: Sequence[ConditionGrid], length: int | None = None) -> dict[str, torch.Tensor]:
    """Pad grids to a common length and stack them into batch tensors."""
    T = length or max(g.num_frames for g in grids)
    B = len(grids)
    KD, D, E = grids[0].part.shape[1], grids[0].pca_dim, grids[0].sequence.shape[0]
    part = np.zeros((B, T, KD), np.float32)
    action = np.zeros((B, T, D), np.float32)
    seq = np.zeros((B, E), np.float32)
    for i, g in enumerate(grids):
        part[i, :g.num_frames] = g.part
        action[i, :g.num_frames] = g.action
        seq[i] = g.sequence
    return {"part": torch.from_numpy(part), "action": torch.from_numpy(action), "sequence": torch.from_numpy(seq)}
