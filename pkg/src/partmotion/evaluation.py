"""Retrieval-based evaluation: contrastive motion/text models and the metric suite.

Nine retrieval models are trained, one per body part plus one for action
windows and one for whole sequences. Each pairs a convolutional encoder of
full-body feature crops with an MLP over label embeddings; both map to a
unit sphere and are trained with symmetric InfoNCE.

Metrics per level: R@1 and R@3 in batches of 32 (a retrieved text also
counts as correct when the filter oracle declares it a paraphrase of the
paired one), M2T (mean paired cosine similarity), FID between generated and
reference motion embeddings, and Diversity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .annotation_schema import UNKNOWN, HierarchicalAnnotation, PartId
from .conditioning import TextEncoder, make_encoder
from .errors import EvaluationError
from .motion_repr import FeatureNormalizer, MotionSequence, Skeleton, encode_features, fit_normalizer

PART_LEVELS = tuple(p.key for p in PartId)
LEVELS = PART_LEVELS + ("action", "sequence")
SUITE_FORMAT = "partmotion-retrieval"


# --------------------------------------------------------------------------- crops


@dataclass
class Crop:
    features: np.ndarray  # (L, d) normalized
    label: str
    source: str = ""
    start: int = 0
    end: int = 0


def level_segments(ann: HierarchicalAnnotation, level: str):
    if level == "sequence":
        return ann.sequence
    if level == "action":
        return ann.actions
    return ann.parts[PartId.from_key(level)]


def extract_crops(motions: Sequence[MotionSequence], skeleton: Skeleton, normalizer: FeatureNormalizer,
                  levels: Iterable[str] = LEVELS, min_frames: int = 2) -> dict[str, list[Crop]]:
    """Full-body feature crops of every known segment, keyed by level."""
    levels = tuple(levels)
    out: dict[str, list[Crop]] = {lv: [] for lv in levels}
    for m in motions:
        ann = m.annotation
        if ann is None:
            raise EvaluationError("MISSING_ANNOTATION", "motions must carry their annotation")
        x = normalizer.apply(encode_features(m, skeleton).values).astype(np.float32)
        for lv in levels:
            for seg in level_segments(ann, lv):
                if seg.known and seg.duration >= min_frames:
                    out[lv].append(Crop(x[seg.start:seg.end], seg.label, ann.id, seg.start, seg.end))
    return out


# --------------------------------------------------------------------------- model


@dataclass
class RetrievalConfig:
    embed_dim: int = 64
    hidden: int = 128
    temperature: float = 0.07
    steps: int = 600
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    min_pairs: int = 200
    max_frames: int = 160


class RetrievalModel(nn.Module):
    """Motion branch (1-D convolutions, masked mean pool) and text branch (MLP)."""

    def __init__(self, motion_dim: int, text_dim: int, level: str, cfg: RetrievalConfig = RetrievalConfig()):
        super().__init__()
        self.level, self.cfg = level, cfg
        self.motion_dim, self.text_dim = motion_dim, text_dim
        h, e = cfg.hidden, cfg.embed_dim
        self.conv = nn.Sequential(
            nn.Conv1d(motion_dim, h, 5, padding=2), nn.GELU(),
            nn.Conv1d(h, h, 5, padding=2), nn.GELU(),
            nn.Conv1d(h, h, 5, padding=2), nn.GELU(),
        )
        self.motion_head = nn.Linear(2 * h, e)
        self.text_mlp = nn.Sequential(nn.Linear(text_dim, h), nn.GELU(), nn.Linear(h, e))

    def encode_motion(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.conv(x.transpose(1, 2)).transpose(1, 2)
        m = mask[..., None].to(h.dtype)
        mean = (h * m).sum(1) / m.sum(1).clamp(min=1)
        peak = h.masked_fill(~mask[..., None], -1e4).amax(1)
        return F.normalize(self.motion_head(torch.cat([mean, peak], -1)), dim=-1)

    def encode_text(self, t: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.text_mlp(t), dim=-1)


def _pad(crops: Sequence[np.ndarray], max_frames: int):
    T = min(max(len(c) for c in crops), max_frames)
    x = np.zeros((len(crops), T, crops[0].shape[1]), np.float32)
    m = np.zeros((len(crops), T), bool)
    for i, c in enumerate(crops):
        c = c[:T]
        x[i, :len(c)] = c
        m[i, :len(c)] = True
    return torch.from_numpy(x), torch.from_numpy(m)


class _TextCache:
    def __init__(self, encoder: TextEncoder):
        self.encoder = encoder
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, labels: Sequence[str]) -> torch.Tensor:
        for l in labels:
            if l not in self._cache:
                self._cache[l] = np.asarray(self.encoder.encode(l), np.float32)
        return torch.from_numpy(np.stack([self._cache[l] for l in labels]))


def info_nce(m: torch.Tensor, t: torch.Tensor, labels: Sequence[str], temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE; off-diagonal pairs sharing the exact label are not negatives."""
    logits = m @ t.T / temperature
    codes = {l: i for i, l in enumerate(dict.fromkeys(labels))}
    ids = torch.tensor([codes[l] for l in labels])
    same = (ids[:, None] == ids[None]) & ~torch.eye(len(labels), dtype=torch.bool)
    logits = logits.masked_fill(same, float("-inf"))
    target = torch.arange(len(labels))
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def train_retrieval_model(crops: Sequence[Crop], encoder: TextEncoder, level: str,
                          cfg: RetrievalConfig = RetrievalConfig(), seed: int = 0) -> RetrievalModel:
    crops = [c for c in crops if c.label is not UNKNOWN]
    if len(crops) < cfg.min_pairs:
        raise EvaluationError("INSUFFICIENT_DATA", f"{level}: {len(crops)} pairs < {cfg.min_pairs}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    text = _TextCache(encoder)
    model = RetrievalModel(crops[0].features.shape[1], encoder.dim, level, cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    bs = min(cfg.batch_size, len(crops))
    model.train()
    for _ in range(cfg.steps):
        idx = rng.choice(len(crops), bs, replace=False)
        x, mask = _pad([crops[i].features for i in idx], cfg.max_frames)
        labels = [crops[i].label for i in idx]
        loss = info_nce(model.encode_motion(x, mask), model.encode_text(text(labels)), labels, cfg.temperature)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    return model.eval()


@torch.no_grad()
def embed_motions(model: RetrievalModel, crops: Sequence[Crop], batch_size: int = 128) -> np.ndarray:
    out = []
    for b in range(0, len(crops), batch_size):
        x, mask = _pad([c.features for c in crops[b:b + batch_size]], model.cfg.max_frames)
        out.append(model.encode_motion(x, mask).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.embed_dim))


@torch.no_grad()
def embed_texts(model: RetrievalModel, encoder: TextEncoder, labels: Sequence[str]) -> np.ndarray:
    return model.encode_text(_TextCache(encoder)(labels)).double().numpy()


# --------------------------------------------------------------------------- retrieval metrics


@dataclass
class FilterOracle:
    """Declares two labels paraphrases when their sentence embeddings have cosine >= tau."""

    encoder: TextEncoder
    tau: float = 0.9

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise EvaluationError("BAD_FILTER", "tau must lie in (0, 1)")

    def paraphrase_matrix(self, labels: Sequence[str]) -> np.ndarray:
        E = np.stack([np.asarray(self.encoder.encode(l), np.float64) for l in labels])
        E /= np.linalg.norm(E, axis=1, keepdims=True)
        return E @ E.T >= self.tau


def retrieval_hits(motion_emb: np.ndarray, text_emb: np.ndarray, ks: Sequence[int] = (1, 3),
                   paraphrase: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Per-motion hit indicators at each k for one batch (ties broken by index)."""
    B = len(motion_emb)
    sim = motion_emb @ text_emb.T
    order = np.argsort(-sim, axis=1, kind="stable")
    correct = np.eye(B, dtype=bool)
    if paraphrase is not None:
        correct |= paraphrase
    ranked = np.take_along_axis(correct, order, axis=1)
    return {k: ranked[:, :k].any(axis=1) for k in ks}


def retrieval_from_embeddings(motion_emb: np.ndarray, text_emb: np.ndarray, labels: Sequence[str],
                              rng: np.random.Generator, ks: Sequence[int] = (1, 3), batch_size: int = 32,
                              oracle: FilterOracle | None = None) -> dict[str, float]:
    """R@k (percent) over shuffled batches, plus M2T over all pairs."""
    n = len(motion_emb)
    if n == 0:
        raise EvaluationError("EMPTY", "no pairs to evaluate")
    para_all = oracle.paraphrase_matrix(labels) if oracle is not None else None
    perm = rng.permutation(n)
    bs = min(batch_size, n)
    hits = {k: [] for k in ks}
    for b in range(0, n - bs + 1, bs):
        idx = perm[b:b + bs]
        para = para_all[np.ix_(idx, idx)] if para_all is not None else None
        for k, h in retrieval_hits(motion_emb[idx], text_emb[idx], ks, para).items():
            hits[k].append(h)
    out = {f"R@{k}": 100.0 * float(np.concatenate(hits[k]).mean()) for k in ks}
    out["M2T"] = float(np.mean(np.sum(motion_emb * text_emb, axis=1)))
    return out


def retrieval_metrics(model: RetrievalModel, encoder: TextEncoder, crops: Sequence[Crop],
                      rng: np.random.Generator, ks: Sequence[int] = (1, 3), batch_size: int = 32,
                      oracle: FilterOracle | None = None) -> dict[str, float]:
    labels = [c.label for c in crops]
    return retrieval_from_embeddings(embed_motions(model, crops), embed_texts(model, encoder, labels), labels,
                                     rng, ks, batch_size, oracle)


# --------------------------------------------------------------------------- realism metrics


def _psd_sqrt(S: np.ndarray, tol: float) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise EvaluationError("NONPSD_COVARIANCE", f"eigenvalue {w.min():.3g} below -{tol}")
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def fid_from_stats(mu_a, cov_a, mu_b, cov_b, tol: float = 1e-6) -> float:
    """Frechet distance between two Gaussians.

    The trace of ``(Sa Sb)^(1/2)`` is taken from the eigenvalues of the
    symmetric matrix ``Sa^(1/2) Sb Sa^(1/2)``, which has the same spectrum.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, np.float64)), np.atleast_1d(np.asarray(mu_b, np.float64))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, np.float64)), np.atleast_2d(np.asarray(cov_b, np.float64))
    ra = _psd_sqrt(cov_a, tol)
    M = ra @ cov_b @ ra
    w = np.linalg.eigvalsh((M + M.T) / 2)
    if w.min() < -tol * max(1.0, abs(w).max()):
        raise EvaluationError("NONPSD_COVARIANCE", f"eigenvalue {w.min():.3g} below -{tol}")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(d, 0.0)


def embedding_stats(X: np.ndarray, shrinkage: float | None = None):
    """Mean and covariance; shrinks toward a scaled identity when ``n <= e``."""
    X = np.asarray(X, np.float64)
    n, e = X.shape
    if n < 2:
        raise EvaluationError("INSUFFICIENT_DATA", "need at least two embeddings")
    cov = np.cov(X, rowvar=False).reshape(e, e)
    lam = shrinkage if shrinkage is not None else (0.1 if n <= e else 0.0)
    if lam:
        cov = (1 - lam) * cov + lam * np.trace(cov) / e * np.eye(e)
    return X.mean(axis=0), cov


def fid(A: np.ndarray, B: np.ndarray, shrinkage: float | None = None) -> float:
    n_min = min(len(A), len(B))
    lam = shrinkage if shrinkage is not None else (0.1 if n_min <= np.shape(A)[1] else 0.0)
    return fid_from_stats(*embedding_stats(A, lam), *embedding_stats(B, lam))


def diversity(X: np.ndarray, pairs: int, rng: np.random.Generator) -> float:
    """Mean Euclidean distance over ``pairs`` random pairs of distinct rows."""
    X = np.asarray(X, np.float64)
    n = len(X)
    if n < 2 or pairs < 1:
        raise EvaluationError("INSUFFICIENT_DATA", "diversity needs n >= 2 and pairs >= 1")
    i = rng.integers(n, size=pairs)
    j = rng.integers(n - 1, size=pairs)
    j = j + (j >= i)
    return float(np.linalg.norm(X[i] - X[j], axis=1).mean())


# --------------------------------------------------------------------------- suite


@dataclass
class RetrievalSuite:
    models: dict  # level -> RetrievalModel
    normalizer: FeatureNormalizer
    skeleton: Skeleton
    encoder_name: str = "toy-hash:256"
    tau: float = 0.9

    @property
    def encoder(self) -> TextEncoder:
        if not hasattr(self, "_encoder"):
            self._encoder = make_encoder(self.encoder_name)
        return self._encoder

    @property
    def oracle(self) -> FilterOracle:
        return FilterOracle(self.encoder, self.tau)

    def save(self, path: str | Path) -> None:
        torch.save({
            "format": SUITE_FORMAT, "version": 1,
            "encoder": self.encoder_name, "tau": self.tau,
            "normalizer": self.normalizer.to_dict(), "skeleton": self.skeleton.to_dict(),
            "models": {lv: {"config": asdict(m.cfg), "motion_dim": m.motion_dim, "text_dim": m.text_dim,
                            "state_dict": m.state_dict()} for lv, m in self.models.items()},
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalSuite":
        ck = torch.load(path, map_location="cpu", weights_only=True)
        if ck.get("format") != SUITE_FORMAT:
            raise EvaluationError("BAD_CHECKPOINT", f"{path} is not a retrieval suite")
        models = {}
        for lv, m in ck["models"].items():
            model = RetrievalModel(m["motion_dim"], m["text_dim"], lv, RetrievalConfig(**m["config"]))
            model.load_state_dict(m["state_dict"])
            models[lv] = model.eval()
        return cls(models, FeatureNormalizer.from_dict(ck["normalizer"]), Skeleton.from_dict(ck["skeleton"]),
                   ck["encoder"], ck["tau"])


def train_retrieval_suite(motions: Sequence[MotionSequence], skeleton: Skeleton, encoder_name: str = "toy-hash:256",
                          cfg: RetrievalConfig = RetrievalConfig(), seed: int = 0, levels: Sequence[str] = LEVELS,
                          tau: float = 0.9, log=None) -> RetrievalSuite:
    """Train one retrieval model per level on annotated training motions."""
    normalizer = fit_normalizer([encode_features(m, skeleton).values for m in motions])
    crops = extract_crops(motions, skeleton, normalizer, levels)
    encoder = make_encoder(encoder_name)
    models = {}
    for i, lv in enumerate(levels):
        models[lv] = train_retrieval_model(crops[lv], encoder, lv, cfg, seed=seed + i)
        if log:
            log(f"trained {lv} retrieval model on {len(crops[lv])} pairs")
    return RetrievalSuite(models, normalizer, skeleton, encoder_name, tau)


@dataclass
class MetricReport:
    level: str
    n_items: int
    repeats: int
    values: dict  # metric -> mean over repeats
    half_width: dict  # metric -> 1.96 sd / sqrt(repeats)

    def to_dict(self) -> dict:
        return {"level": self.level, "n_items": self.n_items, "repeats": self.repeats,
                "values": {k: round(v, 6) for k, v in self.values.items()},
                "ci95": {k: round(v, 6) for k, v in self.half_width.items()}}


METRICS = ("R@1", "R@3", "M2T", "FID", "Diversity")


def _summarize(level: str, n: int, rows: list[dict]) -> MetricReport:
    R = len(rows)
    vals, hw = {}, {}
    for k in rows[0]:
        v = np.array([r[k] for r in rows], np.float64)
        vals[k] = float(v.mean())
        hw[k] = float(1.96 * v.std(ddof=1) / np.sqrt(R)) if R > 1 else 0.0
    return MetricReport(level, n, R, vals, hw)


@dataclass
class EvaluationResult:
    reports: dict  # name -> MetricReport
    seed: int
    repeats: int
    generator: str = ""

    def to_dict(self) -> dict:
        return {"generator": self.generator, "seed": self.seed, "repeats": self.repeats,
                "reports": {k: r.to_dict() for k, r in self.reports.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'level':<12}" + "".join(f"{m:>18}" for m in METRICS)
        lines = [head, "-" * len(head)]
        for name, r in self.reports.items():
            cells = "".join(f"{r.values[m]:>10.3f}±{r.half_width[m]:<7.3f}" for m in METRICS)
            lines.append(f"{name:<12}{cells}")
        return "\n".join(lines)


def evaluate_motions(generated: Sequence[MotionSequence], reference: Sequence[MotionSequence],
                     suite: RetrievalSuite, repeats: int = 20, seed: int = 0, diversity_pairs: int = 300,
                     batch_size: int = 32, generator_name: str = "") -> EvaluationResult:
    """Score generated motions (carrying their conditioning annotations) against references.

    Each repeat draws its own batch shuffle and diversity pairs from the
    substream ``(seed, repeat)``.
    """
    levels = tuple(suite.models)
    gen_crops = extract_crops(generated, suite.skeleton, suite.normalizer, levels)
    ref_crops = extract_crops(reference, suite.skeleton, suite.normalizer, levels)
    per_level = {}
    for lv in levels:
        model, crops = suite.models[lv], gen_crops[lv]
        if len(crops) < 2 or len(ref_crops[lv]) < 2:
            continue
        labels = [c.label for c in crops]
        m_emb = embed_motions(model, crops)
        t_emb = embed_texts(model, suite.encoder, labels)
        fid_value = fid(m_emb, embed_motions(model, ref_crops[lv]))
        rows = []
        for r in range(repeats):
            rng = np.random.default_rng([seed, r])
            row = retrieval_from_embeddings(m_emb, t_emb, labels, rng, (1, 3), batch_size, suite.oracle)
            row["FID"] = fid_value
            row["Diversity"] = diversity(m_emb, diversity_pairs, rng)
            rows.append(row)
        per_level[lv] = (len(crops), rows)
    reports = {}
    parts = [lv for lv in PART_LEVELS if lv in per_level]
    if parts:
        avg_rows = [{k: float(np.mean([per_level[lv][1][r][k] for lv in parts])) for k in METRICS}
                    for r in range(repeats)]
        reports["avg-part"] = _summarize("avg-part", sum(per_level[lv][0] for lv in parts), avg_rows)
    for lv in ("action", "sequence") + PART_LEVELS:
        if lv in per_level:
            name = {"action": "per-action", "sequence": "per-seq"}.get(lv, lv)
            reports[name] = _summarize(lv, *per_level[lv])
    return EvaluationResult(reports, seed, repeats, generator_name)


def evaluate_suite(generator, test_samples: Sequence[tuple[MotionSequence, HierarchicalAnnotation]],
                   suite: RetrievalSuite, repeats: int = 20, seed: int = 0, **kw) -> EvaluationResult:
    """Generate one motion per test annotation (``generator=None`` uses the ground truth) and score it."""
    from .diffusion_model import generate_motions

    reference = [m for m, _ in test_samples]
    for m, a in test_samples:
        m.annotation = a
    if generator is None:
        generated, name = reference, "ground-truth"
    else:
        generated, name = generate_motions(generator, [a for _, a in test_samples], seed), "checkpoint"
    return evaluate_motions(generated, reference, suite, repeats, seed, generator_name=name, **kw)
