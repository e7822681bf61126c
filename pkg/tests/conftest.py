import numpy as np
import pytest

from svbackend.dataio import EmbeddingArchive, build_archive


def make_archive(vectors, speakers=None, genders=None, prefix="seg") -> EmbeddingArchive:
    """Archive from a (n, d) matrix with generated ids and default metadata."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    ids = tuple(f"{prefix}{i:05d}" for i in range(n))
    if speakers is None:
        speakers = tuple(f"spk{i:05d}" for i in range(n))
    if genders is None:
        genders = tuple("unknown" for _ in range(n))
    return build_archive(ids, tuple(speakers), tuple(genders), vectors)


def clustered_archive(
    rng: np.random.Generator,
    n_speakers: int,
    segments: int,
    dim: int,
    spread: float = 1.0,
    within: float = 0.3,
) -> EmbeddingArchive:
    """Gaussian speaker clusters with alternating genders."""
    ids, speakers, genders, rows = [], [], [], []
    for s in range(n_speakers):
        center = spread * rng.standard_normal(dim)
        for u in range(segments):
            ids.append(f"s{s:04d}-u{u:03d}")
            speakers.append(f"s{s:04d}")
            genders.append("male" if s % 2 == 0 else "female")
            rows.append(center + within * rng.standard_normal(dim))
    return build_archive(tuple(ids), tuple(speakers), tuple(genders), np.asarray(rows))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
