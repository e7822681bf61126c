"""Verification losses and metrics: BCE, hard/soft DCF, minDCF, actDCF, EER.

Label convention: 1 marks a target trial, 0 a non-target trial. With a
decision threshold ``theta``, a trial is accepted when its score is >= theta,
so P_miss is the fraction of targets scoring below theta and P_FA the
fraction of non-targets scoring at or above it. The detection cost is
``P_miss(theta) + beta * P_FA(theta)`` with the application weight
``beta = c_fa * (1 - p_target) / (c_miss * p_target)``; actDCF evaluates it
at theta = log(beta), and minDCF is its minimum over all thresholds.

All operations are pure and safe for concurrent evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import NONTARGET, TARGET, Trial


@dataclass(frozen=True)
class ScoreSet:
    """Finite scores with binary labels (1 = target, 0 = nontarget)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise ValueError("scores and labels must be aligned 1-D arrays")
        if not np.isfinite(scores).all():
            raise ValueError("scores must be finite")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))

    @classmethod
    def from_trials(cls, trials: list[Trial], scores: np.ndarray) -> "ScoreSet":
        """Build from labeled trials; rejects unlabeled entries."""
        labels = []
        for t in trials:
            if t.label == TARGET:
                labels.append(1)
            elif t.label == NONTARGET:
                labels.append(0)
            else:
                raise ValueError(f"trial ({t.enroll_id}, {t.test_id}) is unlabeled")
        return cls(np.asarray(scores, dtype=np.float64), np.asarray(labels))

    def counts(self) -> tuple[int, int]:
        n_target = int(self.labels.sum())
        return n_target, int(self.labels.size - n_target)


@dataclass(frozen=True)
class CostParams:
    """Miss/false-alarm costs and target prior defining the operating point."""

    c_miss: float = 1.0
    c_fa: float = 1.0
    p_target: float = 0.01

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must lie in (0, 1)")

    @property
    def beta(self) -> float:
        return self.c_fa * (1.0 - self.p_target) / (self.c_miss * self.p_target)

    @classmethod
    def from_beta(cls, beta: float) -> "CostParams":
        if beta <= 0:
            raise ValueError("beta must be positive")
        return cls(1.0, 1.0, 1.0 / (1.0 + beta))


def _require_both_classes(ss: ScoreSet) -> tuple[int, int]:
    n_target, n_nontarget = ss.counts()
    if n_target == 0 or n_nontarget == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return n_target, n_nontarget


def p_miss_p_fa(ss: ScoreSet, theta: float) -> tuple[float, float]:
    """Miss and false-alarm rates at a threshold (score == theta accepts)."""
    n_target, n_nontarget = _require_both_classes(ss)
    is_target = ss.labels == 1
    p_miss = float((ss.scores[is_target] < theta).sum()) / n_target
    p_fa = float((ss.scores[~is_target] >= theta).sum()) / n_nontarget
    return p_miss, p_fa


def dcf(ss: ScoreSet, cp: CostParams, theta: float) -> float:
    p_miss, p_fa = p_miss_p_fa(ss, theta)
    return p_miss + cp.beta * p_fa


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    expx = np.exp(x[~pos])
    out[~pos] = expx / (1.0 + expx)
    return out


def soft_dcf(ss: ScoreSet, cp: CostParams, theta: float, alpha: float) -> float:
    """Detection cost with the step indicator relaxed to sigmoid(alpha * (s - theta))."""
    value, _, _ = soft_dcf_grad(ss.scores, ss.labels, cp, theta, alpha)
    return value


def soft_dcf_grad(
    scores: np.ndarray,
    labels: np.ndarray,
    cp: CostParams,
    theta: float,
    alpha: float,
) -> tuple[float, np.ndarray, float]:
    """Soft detection cost with its gradients.

    Returns (value, d value / d scores, d value / d theta). Differentiable in
    every score and in the threshold, which is what makes it usable as a
    training objective.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    is_target = np.asarray(labels) == 1
    n_target = int(is_target.sum())
    n_nontarget = int(scores.size - n_target)
    if n_target == 0 or n_nontarget == 0:
        raise ValueError("need at least one target and one nontarget trial")
    sig = _sigmoid(alpha * (scores - theta))
    p_miss = float((1.0 - sig[is_target]).sum()) / n_target
    p_fa = float(sig[~is_target].sum()) / n_nontarget
    value = p_miss + cp.beta * p_fa

    dsig = alpha * sig * (1.0 - sig)
    grad_scores = np.where(
        is_target, -dsig / n_target, cp.beta * dsig / n_nontarget
    )
    grad_theta = float(dsig[is_target].sum()) / n_target - cp.beta * float(
        dsig[~is_target].sum()
    ) / n_nontarget
    return value, grad_scores, grad_theta


def _sweep(ss: ScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate thresholds (midpoints between distinct scores plus +-inf)
    with the miss/false-alarm rates at each, in ascending threshold order."""
    n_target, n_nontarget = _require_both_classes(ss)
    distinct = np.unique(ss.scores)
    thresholds = np.concatenate(
        ([-np.inf], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf])
    )
    target_sorted = np.sort(ss.scores[ss.labels == 1])
    nontarget_sorted = np.sort(ss.scores[ss.labels == 0])
    p_miss = np.searchsorted(target_sorted, thresholds, side="left") / n_target
    p_fa = (
        n_nontarget - np.searchsorted(nontarget_sorted, thresholds, side="left")
    ) / n_nontarget
    return thresholds, p_miss, p_fa


def min_dcf(ss: ScoreSet, cp: CostParams) -> tuple[float, float]:
    """Exhaustive-sweep minimum of the DCF and its threshold.

    Ties are broken toward the smallest threshold.
    """
    thresholds, p_miss, p_fa = _sweep(ss)
    costs = p_miss + cp.beta * p_fa
    best = int(np.argmin(costs))
    return float(costs[best]), float(thresholds[best])


def act_dcf(ss: ScoreSet, cp: CostParams) -> float:
    """DCF at the fixed log-beta threshold (no calibration credit)."""
    return dcf(ss, cp, math.log(cp.beta))


def eer(ss: ScoreSet) -> float:
    """Equal error rate: where P_miss meets P_FA along the threshold sweep,
    linearly interpolated between the two operating points bracketing the
    sign change of (P_miss - P_FA)."""
    _, p_miss, p_fa = _sweep(ss)
    diff = p_miss - p_fa
    idx = int(np.argmax(diff >= 0.0))  # first crossing; diff[0] = -1
    if diff[idx] == 0.0:
        return float(p_miss[idx])
    pm1, pf1 = p_miss[idx - 1], p_fa[idx - 1]
    pm2, pf2 = p_miss[idx], p_fa[idx]
    t = (pf1 - pm1) / ((pm2 - pm1) - (pf2 - pf1))
    return float(pm1 + t * (pm2 - pm1))


def bce_loss(ss: ScoreSet) -> float:
    """Mean binary cross-entropy of sigmoid(score) against the labels."""
    value, _ = bce_grad(ss.scores, ss.labels)
    return value


def bce_grad(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    # log sigma(s) = -softplus(-s), log(1 - sigma(s)) = -softplus(s)
    losses = t * np.logaddexp(0.0, -scores) + (1.0 - t) * np.logaddexp(0.0, scores)
    value = float(losses.mean())
    grad = (_sigmoid(scores) - t) / scores.size
    return value, grad


def bce_regularized(ss: ScoreSet, plda_scores: np.ndarray, lam: float) -> float:
    """BCE plus (lam / N) * sum (s_i - l_i)^2, regressing toward reference scores."""
    value, _ = bce_regularized_grad(ss.scores, ss.labels, plda_scores, lam)
    return value


def bce_regularized_grad(
    scores: np.ndarray,
    labels: np.ndarray,
    plda_scores: np.ndarray,
    lam: float,
) -> tuple[float, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    plda_scores = np.asarray(plda_scores, dtype=np.float64)
    if plda_scores.shape != scores.shape:
        raise ValueError("reference scores must align with the trial scores")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    value, grad = bce_grad(scores, labels)
    resid = scores - plda_scores
    value += lam * float(resid @ resid) / scores.size
    grad = grad + 2.0 * lam * resid / scores.size
    return value, grad


def metric_report(ss: ScoreSet, cp: CostParams) -> str:
    """Key-value text block with eer (percent), min_dcf, act_dcf, threshold."""
    min_cost, threshold = min_dcf(ss, cp)
    lines = [
        f"beta {cp.beta:.4f}",
        f"eer {100.0 * eer(ss):.4f}",
        f"min_dcf {min_cost:.4f}",
        f"act_dcf {act_dcf(ss, cp):.4f}",
        f"threshold {threshold:.4f}",
    ]
    return "\n".join(lines)
