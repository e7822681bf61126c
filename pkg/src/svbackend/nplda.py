"""Neural PLDA: the preprocessing + scoring chain as a trainable network.

Each input embedding passes through an affine layer (LDA-initialized), a
unit-length-normalization activation, a second affine layer and finally a
quadratic scoring layer:

    f(x) = A2 @ length_normalize(A1 @ x + b1) + b2
    s(x_e, x_t) = f(x_e)' Q f(x_e) + f(x_t)' Q f(x_t) + f(x_e)' P f(x_t)

P and Q are kept symmetric (re-symmetrized after every optimizer step), so
the score is symmetric in its two inputs. Decision thresholds, one per
operating point, are ordinary learnable parameters. Gradients are closed
form; the length-norm Jacobian is (I - u u') / ||v|| with u = v / ||v||.

Forward scoring is pure and safe to run concurrently over trials; backward
accumulates per-trial contributions in a fixed batch order, so results are
run-to-run identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .gplda import GPLDAModel, ScoreMatrices
from .preprocess import PreprocessPipeline

PARAM_BLOCKS = ("a1", "b1", "a2", "b2", "p", "q", "thresholds")
LENGTH_NORM_GUARD = 1e-12
DEFAULT_ALPHA = 20.0


@dataclass(frozen=True)
class NPLDAParams:
    """Two affine transforms, symmetric score matrices and learnable
    thresholds; ``alpha`` is the fixed sigmoid warp of the soft-DCF loss."""

    a1: np.ndarray          # (k, d)
    b1: np.ndarray          # (k,)
    a2: np.ndarray          # (k, k)
    b2: np.ndarray          # (k,)
    p: np.ndarray           # (k, k) symmetric
    q: np.ndarray           # (k, k) symmetric
    thresholds: np.ndarray  # (m,), one per operating point
    alpha: float = DEFAULT_ALPHA

    payload_kind = "nplda_params"

    @property
    def input_dim(self) -> int:
        return self.a1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.a1.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_BLOCKS}

    def with_blocks(self, blocks: dict[str, np.ndarray]) -> "NPLDAParams":
        return replace(self, **blocks)

    def score_batch(self, x_e: np.ndarray, x_t: np.ndarray) -> np.ndarray:
        return forward_batch(self, x_e, x_t)

    def to_payload(self) -> dict[str, np.ndarray]:
        payload = self.blocks()
        payload["alpha"] = np.float64(self.alpha)
        return payload

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "NPLDAParams":
        return cls(
            payload["a1"], payload["b1"], payload["a2"], payload["b2"],
            payload["p"], payload["q"], payload["thresholds"],
            float(payload["alpha"]),
        )


@dataclass(frozen=True)
class BatchGradients:
    """Per-block loss gradients, shaped like the corresponding parameters."""

    a1: np.ndarray
    b1: np.ndarray
    a2: np.ndarray
    b2: np.ndarray
    p: np.ndarray
    q: np.ndarray
    thresholds: np.ndarray

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_BLOCKS}


def init_from_gplda(
    pipeline: PreprocessPipeline,
    model: GPLDAModel,
    sm: ScoreMatrices,
    betas: Sequence[float] = (99.0,),
    alpha: float = DEFAULT_ALPHA,
) -> NPLDAParams:
    """Initialize the network so it reproduces the generative backend exactly.

    The first affine folds the centering, LDA and post-LDA centering of the
    pipeline (b1 = -A1 @ mean - post_mean), so the length-norm activation
    sees exactly the pipeline's pre-normalization vector; the second affine
    starts at identity, P and Q are copied, and each threshold starts at
    log(beta) for its operating point.
    """
    k = pipeline.output_dim
    if model.dim != k or sm.p.shape[0] != k:
        raise ValueError("pipeline, model and score matrices disagree in dimension")
    if any(b <= 0 for b in betas):
        raise ValueError("operating-point betas must be positive")
    a1 = pipeline.lda_matrix.copy()
    b1 = -a1 @ pipeline.mean - pipeline.post_mean
    return NPLDAParams(
        a1=a1,
        b1=b1,
        a2=np.eye(k),
        b2=np.zeros(k),
        p=(sm.p + sm.p.T) / 2.0,
        q=(sm.q + sm.q.T) / 2.0,
        thresholds=np.array([math.log(b) for b in betas], dtype=np.float64),
        alpha=alpha,
    )


def _embed(params: NPLDAParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First affine + length norm + second affine; returns (f, u, norms)."""
    h = x @ params.a1.T + params.b1
    norms = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(norms < LENGTH_NORM_GUARD):
        raise ValueError("zero vector reached the length-norm activation")
    u = h / norms
    f = u @ params.a2.T + params.b2
    return f, u, norms


def forward_batch(params: NPLDAParams, x_e: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    """Scores for aligned (n, d) batches of enrollment/test embeddings."""
    x_e = np.atleast_2d(np.asarray(x_e, dtype=np.float64))
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if x_e.shape != x_t.shape or x_e.shape[1] != params.input_dim:
        raise ValueError(
            f"expected aligned (n, {params.input_dim}) batches, got {x_e.shape} and {x_t.shape}"
        )
    p_sym = (params.p + params.p.T) / 2.0
    q_sym = (params.q + params.q.T) / 2.0
    f_e, _, _ = _embed(params, x_e)
    f_t, _, _ = _embed(params, x_t)
    return (
        np.einsum("ij,jk,ik->i", f_e, q_sym, f_e)
        + np.einsum("ij,jk,ik->i", f_t, q_sym, f_t)
        + np.einsum("ij,jk,ik->i", f_e, p_sym, f_t)
    )


def forward(params: NPLDAParams, x_e: np.ndarray, x_t: np.ndarray) -> float:
    """Score a single (enrollment, test) pair."""
    return float(forward_batch(params, np.atleast_2d(x_e), np.atleast_2d(x_t))[0])


def backward(
    params: NPLDAParams,
    x_e: np.ndarray,
    x_t: np.ndarray,
    grad_scores: np.ndarray,
    grad_thresholds: np.ndarray | None = None,
) -> BatchGradients:
    """Closed-form batch gradients given d(loss)/d(score) per trial.

    ``grad_thresholds`` carries the loss's direct threshold gradient (the
    scores do not depend on the thresholds); it defaults to zeros.
    """
    x_e = np.atleast_2d(np.asarray(x_e, dtype=np.float64))
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    g = np.asarray(grad_scores, dtype=np.float64)
    if g.shape != (x_e.shape[0],):
        raise ValueError("grad_scores must hold one value per trial")
    p_sym = (params.p + params.p.T) / 2.0
    q_sym = (params.q + params.q.T) / 2.0
    f_e, u_e, n_e = _embed(params, x_e)
    f_t, u_t, n_t = _embed(params, x_t)

    # Quadratic layer: ds/df_e = 2 Q f_e + P f_t (and symmetrically for f_t).
    df_e = g[:, None] * (2.0 * (f_e @ q_sym) + f_t @ p_sym)
    df_t = g[:, None] * (2.0 * (f_t @ q_sym) + f_e @ p_sym)
    grad_q = f_e.T @ (g[:, None] * f_e) + f_t.T @ (g[:, None] * f_t)
    cross = f_e.T @ (g[:, None] * f_t)
    grad_p = (cross + cross.T) / 2.0

    # Second affine.
    grad_a2 = df_e.T @ u_e + df_t.T @ u_t
    grad_b2 = df_e.sum(axis=0) + df_t.sum(axis=0)

    # Length norm: dL/dh = (dL/du - u (u . dL/du)) / ||h||.
    du_e = df_e @ params.a2
    du_t = df_t @ params.a2
    dh_e = (du_e - u_e * np.sum(u_e * du_e, axis=1, keepdims=True)) / n_e
    dh_t = (du_t - u_t * np.sum(u_t * du_t, axis=1, keepdims=True)) / n_t

    # First affine.
    grad_a1 = dh_e.T @ x_e + dh_t.T @ x_t
    grad_b1 = dh_e.sum(axis=0) + dh_t.sum(axis=0)

    if grad_thresholds is None:
        grad_thresholds = np.zeros_like(params.thresholds)
    else:
        grad_thresholds = np.asarray(grad_thresholds, dtype=np.float64)
        if grad_thresholds.shape != params.thresholds.shape:
            raise ValueError("grad_thresholds must match the thresholds shape")

    grads = BatchGradients(
        a1=grad_a1, b1=grad_b1, a2=grad_a2, b2=grad_b2,
        p=grad_p, q=(grad_q + grad_q.T) / 2.0, thresholds=grad_thresholds,
    )
    for name, block in grads.blocks().items():
        if not np.isfinite(block).all():
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    return grads


def symmetrized(params: NPLDAParams) -> NPLDAParams:
    """Re-impose the symmetry invariant on P and Q."""
    return replace(params, p=(params.p + params.p.T) / 2.0, q=(params.q + params.q.T) / 2.0)
