"""Evaluation statistics: AUC, paired DeLong test, features, exact t-SNE."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .corpus import Corpus, ManifestRecord
from .errors import DegenerateVarianceError, UndefinedAUCError, ValidationError
from .training import _cached_patch

logger = logging.getLogger(__name__)


@dataclass
class ScoredExample:
    id: str
    label: int
    score: float

    def validate(self) -> None:
        if self.label not in (0, 1):
            raise ValidationError("label must be 0 or 1")
        if not math.isfinite(self.score):
            raise ValidationError("score must be finite")


@dataclass
class EmbeddingPoint:
    id: str
    class_tag: str
    feature: np.ndarray
    coords2d: tuple[float, float] | None = None


# ---------------------------------------------------------------------------
# AUC


def compute_auc_from_pairs(labels, scores) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    m = int((labels == 1).sum())
    n = int((labels == 0).sum())
    if m == 0 or n == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative")
    ranks = stats.rankdata(scores)  # midranks handle ties exactly
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - m * (m + 1) / 2) / (m * n))


def compute_auc(examples: list[ScoredExample]) -> float:
    for example in examples:
        example.validate()
    return compute_auc_from_pairs(
        [e.label for e in examples], [e.score for e in examples]
    )


# ---------------------------------------------------------------------------
# DeLong


def _placements(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Placement values V10 (per positive) and V01 (per negative)."""
    gt = (pos[:, None] > neg[None, :]).astype(np.float64)
    eq = (pos[:, None] == neg[None, :]).astype(np.float64)
    mat = gt + 0.5 * eq
    return mat.mean(axis=1), mat.mean(axis=0)


def delong_p_value(
    scores_a, scores_b, labels
) -> tuple[float, float, float]:
    """Two-sided DeLong test of the paired AUC difference.

    Zero variance with equal AUCs reports p = 1; with unequal AUCs it is a
    degenerate-variance error.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = np.asarray(labels)
    if a.shape != b.shape or a.shape != y.shape:
        raise ValidationError("scores_a, scores_b, labels must be paired (same length)")
    pos_mask = y == 1
    neg_mask = y == 0
    m = int(pos_mask.sum())
    n = int(neg_mask.sum())
    if m == 0 or n == 0:
        raise UndefinedAUCError("DeLong needs both classes present")

    v10 = np.empty((2, m))
    v01 = np.empty((2, n))
    for k, scores in enumerate((a, b)):
        v10[k], v01[k] = _placements(scores[pos_mask], scores[neg_mask])
    auc_a, auc_b = float(v10[0].mean()), float(v10[1].mean())

    s10 = np.cov(v10) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(v01) if n > 1 else np.zeros((2, 2))
    s = s10 / m + s01 / n
    var = float(s[0, 0] + s[1, 1] - 2 * s[0, 1])
    diff = auc_a - auc_b
    if var <= 1e-16:
        if abs(diff) <= 1e-12:
            return auc_a, auc_b, 1.0
        raise DegenerateVarianceError(
            f"zero DeLong variance with AUC difference {diff:.6f}"
        )
    z = diff / math.sqrt(var)
    p = float(min(1.0, 2.0 * stats.norm.sf(abs(z))))
    return auc_a, auc_b, p


# ---------------------------------------------------------------------------
# features


def class_tag(record: ManifestRecord) -> str:
    prefix = "synthetic" if record.provenance == "synthetic" else "real"
    return f"{prefix}-{record.label_class}"


def extract_features(
    model: torch.nn.Module, corpus: Corpus, records: list[ManifestRecord] | None = None
) -> list[EmbeddingPoint]:
    """Penultimate-layer feature vector per patch, deterministic in eval mode."""
    model.eval()
    records = corpus.records if records is None else records
    points: list[EmbeddingPoint] = []
    for start in range(0, len(records), 32):
        chunk = records[start : start + 32]
        arrays = [_cached_patch(str(corpus.image_path(r))) for r in chunk]
        x = torch.from_numpy(np.stack(arrays)[:, None, :, :])
        with torch.no_grad():
            feats = model.features(x).numpy()
        for record, feat in zip(chunk, feats):
            points.append(EmbeddingPoint(record.id, class_tag(record), feat.astype(np.float64)))
    return points


# ---------------------------------------------------------------------------
# exact t-SNE


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _conditional_probabilities(
    dists: np.ndarray, perplexity: float, tol: float = 1e-6, max_iter: int = 200
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point Gaussian bandwidth search matching log-perplexity; returns (P, |H - target|)."""
    n = dists.shape[0]
    target = math.log(perplexity)
    p = np.zeros((n, n))
    errors = np.zeros(n)
    for i in range(n):
        d = np.delete(dists[i], i)
        beta, beta_min, beta_max = 1.0, -np.inf, np.inf
        for _ in range(max_iter):
            expd = np.exp(-d * beta)
            total = expd.sum()
            if total <= 0:
                h = 0.0
                row = np.zeros_like(expd)
            else:
                row = expd / total
                h = math.log(total) + beta * float((d * expd).sum()) / total
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        errors[i] = abs(h - target)
        p[i, np.arange(n) != i] = row
    return p, errors


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float((p * np.log(p / q)).sum())


@dataclass
class TsneResult:
    coords: np.ndarray
    initial_kl: float
    final_kl: float
    max_entropy_error: float


def tsne_embed(
    features: np.ndarray,
    perplexity: float = 30.0,
    iterations: int = 500,
    seed: int = 0,
    learning_rate: float = 100.0,
    early_exaggeration: float = 4.0,
    exaggeration_iterations: int = 100,
    initial_momentum: float = 0.5,
    final_momentum: float = 0.8,
    momentum_switch: int = 250,
    return_diagnostics: bool = False,
):
    """Exact t-SNE by gradient descent with momentum and early exaggeration."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 5:
        raise ValidationError("t-SNE requires at least 5 points")
    if perplexity >= n / 3 or perplexity < 1:
        raise ValidationError("perplexity must satisfy 1 <= perplexity < n/3")

    cond, errors = _conditional_probabilities(_pairwise_sq_dists(x), perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    off_diag = ~np.eye(n, dtype=bool)

    def q_matrix(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        num = 1.0 / (1.0 + _pairwise_sq_dists(coords))
        np.fill_diagonal(num, 0.0)
        q = num / num.sum()
        return np.maximum(q, 1e-12), num

    q0, _ = q_matrix(y)
    initial_kl = _kl_divergence(p[off_diag], q0[off_diag])

    for it in range(iterations):
        p_eff = p * early_exaggeration if it < exaggeration_iterations else p
        q, num = q_matrix(y)
        pq = (p_eff - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        momentum = initial_momentum if it < momentum_switch else final_momentum
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)

    qf, _ = q_matrix(y)
    final_kl = _kl_divergence(p[off_diag], qf[off_diag])
    result = TsneResult(coords=y, initial_kl=initial_kl, final_kl=final_kl,
                        max_entropy_error=float(errors.max()))
    if return_diagnostics:
        return result
    return y


# ---------------------------------------------------------------------------
# report


def embedding_report(
    points: list[EmbeddingPoint],
    baseline_scores: dict[str, float],
    augmented_scores: dict[str, float],
    out_dir: Path,
    flagged_ids: list[str] | None = None,
) -> dict:
    """CSV of per-point coordinates and score deltas plus a scatter rendering."""
    flagged_ids = flagged_ids or []
    missing = [
        pid for pid in flagged_ids
        if pid not in baseline_scores or pid not in augmented_scores
    ]
    if missing:
        raise ValidationError(f"flagged ids missing from score sets: {missing}")
    for point in points:
        if point.coords2d is None:
            raise ValidationError(f"point {point.id} has no 2D coordinates")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "embedding.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class", "x", "y", "baseline_score", "augmented_score", "delta"])
        for point in points:
            base = baseline_scores.get(point.id)
            aug = augmented_scores.get(point.id)
            delta = aug - base if base is not None and aug is not None else None
            writer.writerow([
                point.id, point.class_tag,
                f"{point.coords2d[0]:.6f}", f"{point.coords2d[1]:.6f}",
                "" if base is None else f"{base:.6f}",
                "" if aug is None else f"{aug:.6f}",
                "" if delta is None else f"{delta:.6f}",
            ])

    deltas = [augmented_scores[p] - baseline_scores[p] for p in flagged_ids]
    mean_delta = float(np.mean(deltas)) if deltas else float("nan")

    png_path = out_dir / "embedding.png"
    _render_scatter(points, set(flagged_ids), png_path)
    logger.info("mean flagged score delta: %s", mean_delta)
    return {"csv": csv_path, "png": png_path, "mean_delta": mean_delta}


def _render_scatter(points: list[EmbeddingPoint], flagged: set[str], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tags = sorted({p.class_tag for p in points})
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(8, 8))
    for i, tag in enumerate(tags):
        xs = [p.coords2d[0] for p in points if p.class_tag == tag]
        ys = [p.coords2d[1] for p in points if p.class_tag == tag]
        ax.scatter(xs, ys, s=12, color=cmap(i % 10), label=tag, alpha=0.7)
    if flagged:
        fx = [p.coords2d[0] for p in points if p.id in flagged]
        fy = [p.coords2d[1] for p in points if p.id in flagged]
        ax.scatter(fx, fy, s=80, facecolors="none", edgecolors="black", linewidths=1.5,
                   label="flagged")
    ax.legend(loc="best", fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
