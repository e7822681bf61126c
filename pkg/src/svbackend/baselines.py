"""Comparison backends: pairwise Gaussian scoring and discriminative PLDA.

The Gaussian backend models the stacked pair eta = [eta_e' eta_t']' with one
Gaussian per class and scores a trial as the quadratic-form difference

    L = (eta - mu_nt)' Sigma_nt^-1 (eta - mu_nt)
      - (eta - mu_t)'  Sigma_t^-1  (eta - mu_t)

(no log-determinant terms, so this is not a full Gaussian log-likelihood
ratio when the two covariances differ).

Discriminative PLDA rewrites the pair score as a dot product w' phi(e, t)
with the quadratic expansion

    phi(e, t) = [vec(e t' + t e'); vec(e e' + t t'); (e + t); 1]

(row-major vec). A weight vector assembled from symmetric score matrices as
[vec(P)/2; vec(Q); 0; 0] reproduces the generative pair score exactly, which
is what makes the expansion the natural discriminative parameterization. The
weights are trained with binary cross-entropy plus an L2 pull toward that
generative starting point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import preprocess, trainer
from .dataio import EmbeddingArchive, Trial
from .gplda import ScoreMatrices
from .metrics import bce_grad
from .trainer import TrainConfig

GB_RIDGE = 1e-4


@dataclass(frozen=True)
class GaussianBackendModel:
    """Class-conditional mean/covariance of stacked target and non-target pairs."""

    mu_t: np.ndarray
    sigma_t: np.ndarray
    mu_nt: np.ndarray
    sigma_nt: np.ndarray

    payload_kind = "gb_model"

    def to_payload(self) -> dict[str, np.ndarray]:
        return {
            "mu_t": self.mu_t, "sigma_t": self.sigma_t,
            "mu_nt": self.mu_nt, "sigma_nt": self.sigma_nt,
        }

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "GaussianBackendModel":
        return cls(payload["mu_t"], payload["sigma_t"], payload["mu_nt"], payload["sigma_nt"])


@dataclass(frozen=True)
class DPLDAModel:
    """Weight vector over the quadratic trial expansion (length 2k^2 + k + 1)."""

    w: np.ndarray

    payload_kind = "dplda_model"

    def to_payload(self) -> dict[str, np.ndarray]:
        return {"w": self.w}

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "DPLDAModel":
        return cls(payload["w"])


def _stack_pairs(
    trials: list[Trial], archive: EmbeddingArchive
) -> tuple[np.ndarray, np.ndarray]:
    """(target pairs, nontarget pairs) as (n, 2k) matrices in trial order."""
    tensors = trainer.TrialTensors.from_trials(trials, archive)
    pairs = np.hstack(
        [archive.vectors[tensors.enroll_rows], archive.vectors[tensors.test_rows]]
    )
    return pairs[tensors.labels == 1], pairs[tensors.labels == 0]


def _mean_and_ridged_cov(pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = pairs.mean(axis=0)
    centered = pairs - mu
    cov = centered.T @ centered / pairs.shape[0]
    dim = cov.shape[0]
    scale = np.trace(cov) / dim
    ridge = GB_RIDGE * (scale if scale > 0.0 else 1.0)
    return mu, cov + ridge * np.eye(dim)


def fit_gaussian_backend(trials: list[Trial], archive: EmbeddingArchive) -> GaussianBackendModel:
    """Sample mean/covariance per class, with a ridge keeping both covariances PD."""
    pairs_t, pairs_nt = _stack_pairs(trials, archive)
    if len(pairs_t) == 0 or len(pairs_nt) == 0:
        raise ValueError("need at least one trial of each class")
    mu_t, sigma_t = _mean_and_ridged_cov(pairs_t)
    mu_nt, sigma_nt = _mean_and_ridged_cov(pairs_nt)
    return GaussianBackendModel(mu_t, sigma_t, mu_nt, sigma_nt)


def gb_llr(model: GaussianBackendModel, eta_e: np.ndarray, eta_t: np.ndarray):
    """Quadratic-form difference score of the stacked pair; batched on 2-D input."""
    eta_e = np.asarray(eta_e, dtype=np.float64)
    eta_t = np.asarray(eta_t, dtype=np.float64)
    single = eta_e.ndim == 1
    eta = np.hstack([np.atleast_2d(eta_e), np.atleast_2d(eta_t)])
    if eta.shape[1] != model.mu_t.shape[0]:
        raise ValueError(
            f"stacked pair has dimension {eta.shape[1]}, model expects {model.mu_t.shape[0]}"
        )
    d_nt = eta - model.mu_nt
    d_t = eta - model.mu_t
    q_nt = np.sum(d_nt * np.linalg.solve(model.sigma_nt, d_nt.T).T, axis=1)
    q_t = np.sum(d_t * np.linalg.solve(model.sigma_t, d_t.T).T, axis=1)
    out = q_nt - q_t
    return float(out[0]) if single else out


def expand_quadratic(eta_e: np.ndarray, eta_t: np.ndarray) -> np.ndarray:
    """Quadratic trial expansion; symmetric in its arguments. Batched on 2-D input."""
    eta_e = np.asarray(eta_e, dtype=np.float64)
    eta_t = np.asarray(eta_t, dtype=np.float64)
    if eta_e.shape != eta_t.shape:
        raise ValueError(f"mismatched pair shapes {eta_e.shape} and {eta_t.shape}")
    single = eta_e.ndim == 1
    e = np.atleast_2d(eta_e)
    t = np.atleast_2d(eta_t)
    n, k = e.shape
    cross = np.einsum("ni,nj->nij", e, t)
    cross = cross + np.swapaxes(cross, 1, 2)
    selfs = np.einsum("ni,nj->nij", e, e) + np.einsum("ni,nj->nij", t, t)
    out = np.concatenate(
        [cross.reshape(n, k * k), selfs.reshape(n, k * k), e + t, np.ones((n, 1))],
        axis=1,
    )
    return out[0] if single else out


def expansion_dim(k: int) -> int:
    return 2 * k * k + k + 1


def weights_from_score_matrices(sm: ScoreMatrices) -> DPLDAModel:
    """Embed symmetric (P, Q) into the expansion weight space; reproduces the
    generative pair score exactly."""
    k = sm.p.shape[0]
    w = np.concatenate([sm.p.reshape(-1) / 2.0, sm.q.reshape(-1), np.zeros(k + 1)])
    return DPLDAModel(w)


def dplda_score(model: DPLDAModel, eta_e: np.ndarray, eta_t: np.ndarray):
    """Dot product of the weights with the quadratic expansion."""
    phi = expand_quadratic(eta_e, eta_t)
    if phi.shape[-1] != model.w.shape[0]:
        raise ValueError(
            f"expansion dimension {phi.shape[-1]} does not match weights {model.w.shape[0]}"
        )
    out = phi @ model.w
    return float(out) if out.ndim == 0 else out


def train_dplda(
    trials: list[Trial],
    archive: EmbeddingArchive,
    config: TrainConfig,
    w0: np.ndarray,
) -> tuple[DPLDAModel, list[float]]:
    """Train the expansion weights from labeled, preprocessed trials.

    Minimizes mean BCE over the trial expansions plus lam * ||w - w0||^2,
    starting from the generative weights w0; Adam with stratified batches.
    Returns the model and the per-epoch full-set loss trace (epoch 0 first).
    Aborts if the loss exceeds 10x its initial value.
    """
    tensors = trainer.TrialTensors.from_trials(trials, archive)
    vectors = archive.vectors
    w = np.asarray(w0, dtype=np.float64).copy()
    if w.shape != (expansion_dim(archive.dimension),):
        raise ValueError("w0 does not match the expansion dimension of the archive")

    def full_loss(w_now: np.ndarray) -> float:
        # Chunked so the expansion never materializes for the whole set.
        total = 0.0
        n = len(tensors.labels)
        for start in range(0, n, 8192):
            sl = slice(start, min(start + 8192, n))
            phi = expand_quadratic(vectors[tensors.enroll_rows[sl]], vectors[tensors.test_rows[sl]])
            value, _ = bce_grad(phi @ w_now, tensors.labels[sl])
            total += value * (sl.stop - sl.start)
        diff = w_now - w0
        return total / n + config.lam * float(diff @ diff)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = trainer.AdamState.for_blocks({"w": w})
    target_idx = np.flatnonzero(tensors.labels == 1)
    nontarget_idx = np.flatnonzero(tensors.labels == 0)
    history = [full_loss(w)]
    for _ in range(config.max_epochs):
        for batch in trainer.stratified_batches(
            target_idx, nontarget_idx, config.batch_size, rng
        ):
            phi = expand_quadratic(
                vectors[tensors.enroll_rows[batch]], vectors[tensors.test_rows[batch]]
            )
            _, grad_scores = bce_grad(phi @ w, tensors.labels[batch])
            grad_w = phi.T @ grad_scores + 2.0 * config.lam * (w - w0)
            blocks, state = trainer.adam_step(state, {"w": w}, {"w": grad_w}, config.lr)
            w = blocks["w"]
        loss = full_loss(w)
        history.append(loss)
        if not np.isfinite(loss) or loss > 10.0 * max(history[0], 1e-12):
            raise FloatingPointError(
                f"DPLDA training diverged at epoch {len(history) - 1}: "
                f"loss {loss:.6g} vs initial {history[0]:.6g}"
            )
    return DPLDAModel(w), history


@dataclass(frozen=True)
class GaussianBackend:
    """Pipeline + pair Gaussians, scoring raw embeddings end to end."""

    pipeline: preprocess.PreprocessPipeline
    model: GaussianBackendModel

    payload_kind = "gb_backend"

    def score_batch(self, x_e: np.ndarray, x_t: np.ndarray) -> np.ndarray:
        eta_e = preprocess.apply(self.pipeline, x_e)
        eta_t = preprocess.apply(self.pipeline, x_t)
        return np.atleast_1d(gb_llr(self.model, eta_e, eta_t))

    def to_payload(self) -> dict[str, np.ndarray]:
        payload = {f"pipeline.{k}": v for k, v in self.pipeline.to_payload().items()}
        payload.update({f"model.{k}": v for k, v in self.model.to_payload().items()})
        return payload

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "GaussianBackend":
        def sub(prefix: str) -> dict[str, np.ndarray]:
            return {k[len(prefix):]: v for k, v in payload.items() if k.startswith(prefix)}

        return cls(
            preprocess.PreprocessPipeline.from_payload(sub("pipeline.")),
            GaussianBackendModel.from_payload(sub("model.")),
        )


@dataclass(frozen=True)
class DPLDABackend:
    """Pipeline + expansion weights, scoring raw embeddings end to end."""

    pipeline: preprocess.PreprocessPipeline
    model: DPLDAModel

    payload_kind = "dplda_backend"

    def score_batch(self, x_e: np.ndarray, x_t: np.ndarray) -> np.ndarray:
        eta_e = preprocess.apply(self.pipeline, x_e)
        eta_t = preprocess.apply(self.pipeline, x_t)
        return np.atleast_1d(dplda_score(self.model, eta_e, eta_t))

    def to_payload(self) -> dict[str, np.ndarray]:
        payload = {f"pipeline.{k}": v for k, v in self.pipeline.to_payload().items()}
        payload["model.w"] = self.model.w
        return payload

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "DPLDABackend":
        pipeline_payload = {
            k[len("pipeline."):]: v for k, v in payload.items() if k.startswith("pipeline.")
        }
        return cls(
            preprocess.PreprocessPipeline.from_payload(pipeline_payload),
            DPLDAModel(payload["model.w"]),
        )
