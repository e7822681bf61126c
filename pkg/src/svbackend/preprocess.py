"""Embedding pre-processing: centering, LDA projection, length normalization.

The fitted chain maps a raw embedding ``v`` to
``length_normalize(lda_matrix @ (v - mean) - post_mean)``, i.e. global
centering, supervised projection, re-centering in the projected space and
unit-length normalization, in that order. Fitting is deterministic; fitted
pipelines are immutable, and ``apply`` is pure and safe to run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dataio import EmbeddingArchive, build_archive

LDA_RIDGE = 1e-6
DEFAULT_LDA_DIM = 170


@dataclass(frozen=True)
class PreprocessPipeline:
    """Fitted centering + LDA + post-projection centering parameters."""

    mean: np.ndarray        # (d,) global centering mean
    lda_matrix: np.ndarray  # (k, d) projection, full row rank
    post_mean: np.ndarray   # (k,) mean in projected space

    payload_kind = "pipeline"

    @property
    def input_dim(self) -> int:
        return self.lda_matrix.shape[1]

    @property
    def output_dim(self) -> int:
        return self.lda_matrix.shape[0]

    def to_payload(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "lda_matrix": self.lda_matrix, "post_mean": self.post_mean}

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "PreprocessPipeline":
        return cls(payload["mean"], payload["lda_matrix"], payload["post_mean"])

    @classmethod
    def identity(cls, dim: int) -> "PreprocessPipeline":
        return cls(np.zeros(dim), np.eye(dim), np.zeros(dim))


def fit_centering(archive: EmbeddingArchive) -> np.ndarray:
    """Arithmetic mean over all records."""
    if len(archive) == 0:
        raise ValueError("cannot fit centering on an empty archive")
    return archive.vectors.mean(axis=0)


def _scatter_matrices(vectors: np.ndarray, speakers: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Within- and between-class scatter (S_w, S_b) of speaker-labeled vectors."""
    d = vectors.shape[1]
    global_mean = vectors.mean(axis=0)
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for spk in sorted(set(speakers)):
        rows = vectors[[i for i, s in enumerate(speakers) if s == spk]]
        mu = rows.mean(axis=0)
        centered = rows - mu
        s_w += centered.T @ centered
        diff = mu - global_mean
        s_b += len(rows) * np.outer(diff, diff)
    return s_w, s_b


def _fix_row_signs(rows: np.ndarray) -> np.ndarray:
    """Flip each row so its first non-negligible component is positive."""
    out = rows.copy()
    for i, row in enumerate(out):
        scale = np.abs(row).max()
        nz = np.flatnonzero(np.abs(row) > 1e-12 * max(scale, 1.0))
        if nz.size and row[nz[0]] < 0:
            out[i] = -row
    return out


def fit_lda(archive: EmbeddingArchive, target_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Fit an LDA projection from speaker-labeled embeddings.

    Solves the generalized symmetric eigenproblem S_b r = lam S_w r with a
    small ridge on S_w (LDA_RIDGE * trace(S_w)/d added to the diagonal) and
    returns the ``target_dim`` unit-length eigenvector rows for the largest
    eigenvalues, together with those eigenvalues in descending order. Row
    signs are fixed so the first nonzero component is positive.
    """
    speakers = [s for s in archive.speaker_ids]
    if any(s is None for s in speakers):
        raise ValueError("LDA requires a speaker label on every record")
    n_speakers = len(set(speakers))
    d = archive.dimension
    if not 1 <= target_dim <= d:
        raise ValueError(f"target_dim must be in [1, {d}], got {target_dim}")
    if n_speakers < target_dim + 1:
        raise ValueError(
            f"need at least {target_dim + 1} distinct speakers for {target_dim} "
            f"LDA dimensions, found {n_speakers}"
        )
    s_w, s_b = _scatter_matrices(archive.vectors, speakers)
    s_w = s_w + (LDA_RIDGE * np.trace(s_w) / d) * np.eye(d)
    try:
        eigvals, eigvecs = scipy.linalg.eigh(s_b, s_w)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"within-class scatter singular after regularization: {exc}") from None
    order = np.argsort(eigvals)[::-1][:target_dim]
    rows = eigvecs[:, order].T
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    return _fix_row_signs(rows), eigvals[order]


def length_normalize(v: np.ndarray) -> np.ndarray:
    """Project onto the unit sphere; rejects zero or non-finite input."""
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("cannot length-normalize a non-finite vector")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("cannot length-normalize a zero vector")
    return v / norms


def apply(pipeline: PreprocessPipeline, v: np.ndarray) -> np.ndarray:
    """Run the full chain on one vector or on a (n, d) batch of rows."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != pipeline.input_dim:
        raise ValueError(
            f"expected vectors of dimension {pipeline.input_dim}, got {v.shape[-1]}"
        )
    projected = (v - pipeline.mean) @ pipeline.lda_matrix.T - pipeline.post_mean
    return length_normalize(projected)


def apply_archive(pipeline: PreprocessPipeline, archive: EmbeddingArchive) -> EmbeddingArchive:
    """Apply the pipeline to every record, keeping ids and metadata."""
    return build_archive(
        archive.segment_ids,
        archive.speaker_ids,
        archive.genders,
        apply(pipeline, archive.vectors),
    )


def fit_pipeline(archive: EmbeddingArchive, target_dim: int | None = None) -> PreprocessPipeline:
    """Fit the centering + LDA + post-centering chain on labeled embeddings.

    ``target_dim`` defaults to min(170, d, n_speakers - 1).
    """
    mean = fit_centering(archive)
    n_speakers = len({s for s in archive.speaker_ids if s is not None})
    if target_dim is None:
        target_dim = min(DEFAULT_LDA_DIM, archive.dimension, max(n_speakers - 1, 1))
    centered = build_archive(
        archive.segment_ids, archive.speaker_ids, archive.genders, archive.vectors - mean
    )
    lda_matrix, _ = fit_lda(centered, target_dim)
    projected = (archive.vectors - mean) @ lda_matrix.T
    post_mean = projected.mean(axis=0)
    return PreprocessPipeline(mean, lda_matrix, post_mean)
