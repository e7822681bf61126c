"""Generative Gaussian PLDA: EM training and log-likelihood-ratio scoring.

The model for a processed embedding is ``eta = mu + phi @ w + eps`` with a
standard-normal latent speaker factor ``w`` and residual ``eps ~ N(0, sigma)``.
Trials are scored with the quadratic form

    s(eta_e, eta_t) = eta_e' Q eta_e + eta_t' Q eta_t + eta_e' P eta_t

where, writing Sigma_tot = phi phi' + sigma and Sigma_ac = phi phi',

    Q = Sigma_tot^-1 - (Sigma_tot - Sigma_ac Sigma_tot^-1 Sigma_ac)^-1
    P = Sigma_tot^-1 Sigma_ac (Sigma_tot - Sigma_ac Sigma_tot^-1 Sigma_ac)^-1.

Constant and linear terms of the full two-Gaussian log-likelihood ratio are
dropped, so trials are scored on the raw pipeline output without subtracting
the model mean. EM is single-threaded and deterministic given input order;
scoring is pure and safe to run concurrently over trials.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from . import preprocess
from .dataio import EmbeddingArchive

SIGMA_EIGENVALUE_FLOOR = 1e-8
DEFAULT_EM_ITERATIONS = 10


@dataclass(frozen=True)
class GPLDAModel:
    """Speaker subspace ``phi`` (k, r), residual covariance ``sigma`` (k, k)
    and model-space mean ``mu`` (k,). ``loglik_history`` holds the marginal
    log-likelihood before training and after each EM iteration."""

    phi: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    loglik_history: tuple[float, ...] = ()
    warnings: tuple[str, ...] = ()

    payload_kind = "gplda_model"

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def sigma_tot(self) -> np.ndarray:
        return self.phi @ self.phi.T + self.sigma

    def sigma_ac(self) -> np.ndarray:
        return self.phi @ self.phi.T

    def to_payload(self) -> dict[str, np.ndarray]:
        return {"phi": self.phi, "sigma": self.sigma, "mu": self.mu}

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "GPLDAModel":
        return cls(payload["phi"], payload["sigma"], payload["mu"])


@dataclass(frozen=True)
class ScoreMatrices:
    """Symmetric quadratic-form matrices of the pair score."""

    p: np.ndarray
    q: np.ndarray

    payload_kind = "score_matrices"

    def to_payload(self) -> dict[str, np.ndarray]:
        return {"p": self.p, "q": self.q}

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "ScoreMatrices":
        return cls(payload["p"], payload["q"])


def group_by_speaker(archive: EmbeddingArchive) -> dict[str, np.ndarray]:
    """Collect archive vectors into one (n_i, k) matrix per speaker."""
    rows: dict[str, list[int]] = {}
    for i, spk in enumerate(archive.speaker_ids):
        if spk is None:
            raise ValueError(f"record {archive.segment_ids[i]!r} has no speaker label")
        rows.setdefault(spk, []).append(i)
    return {spk: archive.vectors[idx] for spk, idx in sorted(rows.items())}


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def _floor_eigenvalues(sigma: np.ndarray) -> tuple[np.ndarray, int]:
    """Clip eigenvalues below SIGMA_EIGENVALUE_FLOOR * max eigenvalue."""
    eigvals, eigvecs = np.linalg.eigh(_symmetrize(sigma))
    floor = SIGMA_EIGENVALUE_FLOOR * eigvals[-1]
    n_floored = int((eigvals < floor).sum())
    if n_floored:
        eigvals = np.maximum(eigvals, floor)
        sigma = (eigvecs * eigvals) @ eigvecs.T
    return _symmetrize(sigma), n_floored


def _marginal_loglik(
    phi: np.ndarray,
    sigma: np.ndarray,
    stats: list[tuple[int, np.ndarray]],
    second_moment: np.ndarray,
    n_total: int,
) -> float:
    """Marginal log-likelihood of centered data under (phi, sigma).

    ``stats`` holds (n_i, sum of centered vectors) per speaker and
    ``second_moment`` the pooled sum of outer products.
    """
    k = sigma.shape[0]
    r = phi.shape[1]
    chol = scipy.linalg.cho_factor(sigma, lower=True)
    logdet_sigma = 2.0 * np.log(np.diag(chol[0])).sum()
    sigma_inv_phi = scipy.linalg.cho_solve(chol, phi)
    gram = phi.T @ sigma_inv_phi  # phi' sigma^-1 phi
    trace_term = float(np.trace(scipy.linalg.cho_solve(chol, second_moment)))

    ll = -0.5 * (n_total * k * np.log(2.0 * np.pi) + n_total * logdet_sigma + trace_term)
    lam_cache: dict[int, tuple] = {}
    for n_i, f_i in stats:
        if n_i not in lam_cache:
            lam = np.eye(r) + n_i * gram
            lam_chol = scipy.linalg.cho_factor(lam, lower=True)
            lam_cache[n_i] = (lam_chol, 2.0 * np.log(np.diag(lam_chol[0])).sum())
        lam_chol, logdet_lam = lam_cache[n_i]
        m_i = sigma_inv_phi.T @ f_i
        ll += -0.5 * logdet_lam + 0.5 * float(m_i @ scipy.linalg.cho_solve(lam_chol, m_i))
    return float(ll)


def fit_gplda_em(
    groups: Mapping[str, np.ndarray] | Sequence[np.ndarray],
    rank: int | None = None,
    iterations: int = DEFAULT_EM_ITERATIONS,
    init: GPLDAModel | None = None,
    average_per_speaker: bool = False,
    floor_warn_fraction: float = 0.25,
) -> GPLDAModel:
    """Fit (phi, sigma, mu) by EM on per-speaker groups of processed vectors.

    Each speaker's utterances share one latent factor, whose posterior has
    precision I + n_i phi' sigma^-1 phi. With ``average_per_speaker`` the
    groups are collapsed to their means before fitting, matching backends
    that model one average vector per training speaker. The marginal
    log-likelihood is recorded before training and after every iteration;
    EM makes it non-decreasing. ``sigma`` is symmetrized and its spectrum
    floored after each M-step; a warning is attached when the floor engages
    on more than ``floor_warn_fraction`` of the dimensions.
    """
    mats = list(groups.values()) if isinstance(groups, Mapping) else list(groups)
    mats = [np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in mats]
    if len(mats) < 2:
        raise ValueError("EM needs at least 2 speakers")
    k = mats[0].shape[1]
    if any(m.shape[1] != k for m in mats):
        raise ValueError("all speaker groups must share one vector dimension")
    if rank is None:
        rank = k
    if not 1 <= rank <= k:
        raise ValueError(f"rank must be in [1, {k}], got {rank}")
    if average_per_speaker:
        mats = [m.mean(axis=0, keepdims=True) for m in mats]

    n_total = sum(m.shape[0] for m in mats)
    mu = sum(m.sum(axis=0) for m in mats) / n_total
    centered = [m - mu for m in mats]
    stats = [(m.shape[0], m.sum(axis=0)) for m in centered]
    second_moment = sum(m.T @ m for m in centered)

    if init is not None:
        if init.phi.shape != (k, rank) or init.sigma.shape != (k, k):
            raise ValueError("init model shapes do not match the data and rank")
        phi, sigma = init.phi.copy(), init.sigma.copy()
    else:
        # Deterministic start: split the total covariance spectrum between
        # the speaker subspace and the residual.
        total_cov = _symmetrize(second_moment / n_total)
        eigvals, eigvecs = np.linalg.eigh(total_cov)
        top = eigvals[::-1][:rank]
        phi = eigvecs[:, ::-1][:, :rank] * np.sqrt(np.maximum(top, 1e-12) / 2.0)
        sigma = _symmetrize(total_cov - phi @ phi.T)
        sigma, _ = _floor_eigenvalues(sigma)

    warnings: list[str] = []
    loglik = [_marginal_loglik(phi, sigma, stats, second_moment, n_total)]
    for it in range(iterations):
        chol = scipy.linalg.cho_factor(sigma, lower=True)
        sigma_inv_phi = scipy.linalg.cho_solve(chol, phi)
        gram = phi.T @ sigma_inv_phi
        lam_inv_cache: dict[int, np.ndarray] = {}
        t1 = np.zeros((k, rank))
        t2 = np.zeros((rank, rank))
        for n_i, f_i in stats:
            if n_i not in lam_inv_cache:
                lam_inv_cache[n_i] = np.linalg.inv(np.eye(rank) + n_i * gram)
            lam_inv = lam_inv_cache[n_i]
            w_mean = lam_inv @ (sigma_inv_phi.T @ f_i)
            t1 += np.outer(f_i, w_mean)
            t2 += n_i * (lam_inv + np.outer(w_mean, w_mean))
        phi = scipy.linalg.solve(t2, t1.T, assume_a="pos").T
        sigma = _symmetrize((second_moment - phi @ t1.T) / n_total)
        sigma, n_floored = _floor_eigenvalues(sigma)
        if n_floored > floor_warn_fraction * k:
            warnings.append(
                f"iteration {it + 1}: covariance floor engaged on {n_floored}/{k} eigenvalues"
            )
        loglik.append(_marginal_loglik(phi, sigma, stats, second_moment, n_total))

    return GPLDAModel(phi, sigma, mu, tuple(loglik), tuple(warnings))


def derive_score_matrices(model: GPLDAModel) -> ScoreMatrices:
    """Build the symmetric (P, Q) pair from the model covariances."""
    sigma_tot = _symmetrize(model.sigma_tot())
    sigma_ac = _symmetrize(model.sigma_ac())
    try:
        tot_inv = np.linalg.inv(sigma_tot)
        schur = sigma_tot - sigma_ac @ tot_inv @ sigma_ac
        schur_inv = np.linalg.inv(schur)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"total covariance or its Schur complement is singular: {exc}"
        ) from None
    q = _symmetrize(tot_inv - schur_inv)
    p = _symmetrize(tot_inv @ sigma_ac @ schur_inv)
    return ScoreMatrices(p, q)


def gplda_score(sm: ScoreMatrices, eta_e: np.ndarray, eta_t: np.ndarray):
    """Pair score eta_e' Q eta_e + eta_t' Q eta_t + eta_e' P eta_t.

    Accepts single vectors or aligned (n, k) batches; symmetric in its two
    arguments because P is symmetric.
    """
    eta_e = np.asarray(eta_e, dtype=np.float64)
    eta_t = np.asarray(eta_t, dtype=np.float64)
    k = sm.p.shape[0]
    if eta_e.shape != eta_t.shape or eta_e.shape[-1] != k:
        raise ValueError(
            f"expected aligned vectors of dimension {k}, got {eta_e.shape} and {eta_t.shape}"
        )
    if eta_e.ndim == 1:
        return float(eta_e @ sm.q @ eta_e + eta_t @ sm.q @ eta_t + eta_e @ sm.p @ eta_t)
    return (
        np.einsum("ij,jk,ik->i", eta_e, sm.q, eta_e)
        + np.einsum("ij,jk,ik->i", eta_t, sm.q, eta_t)
        + np.einsum("ij,jk,ik->i", eta_e, sm.p, eta_t)
    )


@dataclass(frozen=True)
class GPLDABackend:
    """Self-contained scorer: preprocessing pipeline + model + score matrices."""

    pipeline: preprocess.PreprocessPipeline
    model: GPLDAModel
    sm: ScoreMatrices

    payload_kind = "gplda_backend"

    def score_batch(self, x_e: np.ndarray, x_t: np.ndarray) -> np.ndarray:
        eta_e = preprocess.apply(self.pipeline, x_e)
        eta_t = preprocess.apply(self.pipeline, x_t)
        return np.atleast_1d(gplda_score(self.sm, eta_e, eta_t))

    def to_payload(self) -> dict[str, np.ndarray]:
        payload = {f"pipeline.{k}": v for k, v in self.pipeline.to_payload().items()}
        payload.update({f"model.{k}": v for k, v in self.model.to_payload().items()})
        payload.update({f"sm.{k}": v for k, v in self.sm.to_payload().items()})
        return payload

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "GPLDABackend":
        def sub(prefix: str) -> dict[str, np.ndarray]:
            return {k[len(prefix):]: v for k, v in payload.items() if k.startswith(prefix)}

        return cls(
            preprocess.PreprocessPipeline.from_payload(sub("pipeline.")),
            GPLDAModel.from_payload(sub("model.")),
            ScoreMatrices.from_payload(sub("sm.")),
        )


def fit_gplda_backend(
    archive: EmbeddingArchive,
    target_dim: int | None = None,
    rank: int | None = None,
    iterations: int = DEFAULT_EM_ITERATIONS,
    average_per_speaker: bool = False,
    pipeline: preprocess.PreprocessPipeline | None = None,
) -> GPLDABackend:
    """Fit pipeline (unless given), EM model and score matrices in one call."""
    if pipeline is None:
        pipeline = preprocess.fit_pipeline(archive, target_dim)
    processed = preprocess.apply_archive(pipeline, archive)
    model = fit_gplda_em(
        group_by_speaker(processed),
        rank=rank,
        iterations=iterations,
        average_per_speaker=average_per_speaker,
    )
    return GPLDABackend(pipeline, model, derive_score_matrices(model))
