"""Synthetic embedding generation from the two-covariance speaker model.

Each speaker draws one latent factor w ~ N(0, I_r); each of their segments
is phi @ w + eps with a fresh residual eps ~ N(0, sigma). Genders alternate
per speaker. Sampling uses numpy's PCG64 generator with a serial stream, so
a given spec regenerates the identical archive on any platform.

A spec can be given programmatically or as a key-value text file:

    dimension 32
    rank 16                  # defaults to dimension
    n_speakers 200
    segments_per_speaker 20
    seed 7
    phi random               # entries N(0,1), columns scaled by the spectrum
    phi_spectrum 2.0,1.0     # defaults to all ones; broadcast if scalar
    sigma_scale 0.5          # sigma = sigma_scale * identity, default 1.0
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import EmbeddingArchive, build_archive


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters; ``phi`` may be an explicit matrix or None for
    a seeded random subspace with the given column spectrum."""

    dimension: int
    n_speakers: int
    segments_per_speaker: int
    rank: int | None = None
    phi: np.ndarray | None = None
    phi_spectrum: np.ndarray | None = None
    sigma: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.dimension < 1 or self.n_speakers < 1 or self.segments_per_speaker < 1:
            raise ValueError("dimension and counts must be positive")
        r = self.rank if self.rank is not None else self.dimension
        if not 1 <= r <= self.dimension:
            raise ValueError(f"rank must be in [1, {self.dimension}]")
        if self.phi is not None and self.phi.shape != (self.dimension, r):
            raise ValueError(f"phi must have shape ({self.dimension}, {r})")
        if self.sigma is not None:
            sigma = np.asarray(self.sigma, dtype=np.float64)
            if sigma.shape != (self.dimension, self.dimension):
                raise ValueError("sigma must be a (dimension, dimension) matrix")
            if not np.allclose(sigma, sigma.T, atol=1e-10):
                raise ValueError("sigma must be symmetric")
            if np.linalg.eigvalsh(sigma)[0] <= 0:
                raise ValueError("sigma must be positive definite")


def _resolve(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Materialize (phi, cholesky of sigma) for a spec, drawing phi first so
    the remaining stream is independent of how phi was specified."""
    r = spec.rank if spec.rank is not None else spec.dimension
    if spec.phi is not None:
        phi = np.asarray(spec.phi, dtype=np.float64)
    else:
        spectrum = (
            np.ones(r)
            if spec.phi_spectrum is None
            else np.broadcast_to(
                np.asarray(spec.phi_spectrum, dtype=np.float64), (r,)
            ).copy()
        )
        phi = rng.standard_normal((spec.dimension, r)) * spectrum
    sigma = np.eye(spec.dimension) if spec.sigma is None else np.asarray(spec.sigma)
    return phi, np.linalg.cholesky(sigma)


def generate(spec: SynthSpec) -> EmbeddingArchive:
    """Draw the archive described by the spec; deterministic under its seed."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    phi, chol = _resolve(spec, rng)
    r = phi.shape[1]
    ids, speakers, genders = [], [], []
    rows = np.empty((spec.n_speakers * spec.segments_per_speaker, spec.dimension))
    pos = 0
    for s in range(spec.n_speakers):
        speaker_id = f"s{s:05d}"
        gender = "male" if s % 2 == 0 else "female"
        w = rng.standard_normal(r)
        base = phi @ w
        for u in range(spec.segments_per_speaker):
            eps = chol @ rng.standard_normal(spec.dimension)
            rows[pos] = base + eps
            ids.append(f"{speaker_id}-u{u:04d}")
            speakers.append(speaker_id)
            genders.append(gender)
            pos += 1
    return build_archive(tuple(ids), tuple(speakers), tuple(genders), rows)


def load_spec(path: str | Path) -> SynthSpec:
    """Parse a key-value spec file (``key value`` lines, ``#`` comments)."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'key value'")
        raw[parts[0]] = parts[1].strip()

    def take_int(key: str, default: int | None = None) -> int | None:
        if key not in raw:
            if default is None and key in ("dimension", "n_speakers", "segments_per_speaker"):
                raise ValueError(f"spec is missing required key {key!r}")
            return default
        try:
            return int(raw.pop(key))
        except ValueError:
            raise ValueError(f"invalid integer for {key!r}") from None

    dimension = take_int("dimension")
    n_speakers = take_int("n_speakers")
    segments = take_int("segments_per_speaker")
    rank = take_int("rank", None)
    seed = take_int("seed", 0)
    phi_mode = raw.pop("phi", "random")
    if phi_mode != "random":
        raise ValueError("text specs support only 'phi random'")
    spectrum = None
    if "phi_spectrum" in raw:
        spectrum = np.array([float(x) for x in raw.pop("phi_spectrum").split(",")])
    sigma = None
    if "sigma_scale" in raw:
        sigma = float(raw.pop("sigma_scale")) * np.eye(dimension)
    if raw:
        raise ValueError(f"unknown spec keys: {sorted(raw)}")
    return SynthSpec(
        dimension=dimension,
        n_speakers=n_speakers,
        segments_per_speaker=segments,
        rank=rank,
        phi_spectrum=spectrum,
        sigma=sigma,
        seed=seed,
    )
