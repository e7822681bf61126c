"""On-disk formats for embeddings, trial lists, scores and trained models.

Formats
-------
Binary embedding archive: an ``XVARCHIV`` magic string, u32 format version,
u32 dimension and u64 record count, followed by one entry per record:
u16 segment-id length + utf-8 bytes, u16 speaker-id length + utf-8 bytes
(zero length = unknown speaker), one gender byte (0 male, 1 female,
2 unknown) and ``dimension`` float64 little-endian values.

Text embedding archive: one record per line, ``segment_id speaker_id gender
v1 .. vd`` with ``-`` standing for a missing speaker. Detected by the
absence of the binary magic; meant for hand-written fixtures.

Trial list: whitespace-separated ``enroll_id test_id label`` lines, label
one of ``target``, ``nontarget``, ``unlabeled``.

Score file: ``enroll_id test_id score`` with the score printed at 6 decimal
places; a fourth label column is appended when the scored trials carried
labels, so score files can be evaluated on their own.

Model file: an ``SVBMODEL`` magic string, u32 format version, a kind tag
naming the model type and a flat list of named float64 arrays. All loaded
structures are immutable after construction and safe to share across
concurrent readers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

ARCHIVE_MAGIC = b"XVARCHIV"
ARCHIVE_VERSION = 1
MODEL_MAGIC = b"SVBMODEL"
MODEL_VERSION = 1

GENDERS = ("male", "female", "unknown")
_GENDER_ALIASES = {"m": "male", "f": "female", "u": "unknown"}
_GENDER_TO_BYTE = {"male": 0, "female": 1, "unknown": 2}
_BYTE_TO_GENDER = {v: k for k, v in _GENDER_TO_BYTE.items()}

TARGET = "target"
NONTARGET = "nontarget"
UNLABELED = "unlabeled"
TRIAL_LABELS = (TARGET, NONTARGET, UNLABELED)


class FormatError(ValueError):
    """Malformed file content (bad magic, bad header, unparseable record)."""


class VersionError(FormatError):
    """File carries an unsupported format version."""


class TruncatedError(FormatError):
    """File ends before the declared payload is complete."""


class DimensionMismatchError(FormatError):
    """A record's vector length disagrees with the archive dimension."""


class DuplicateIdError(FormatError):
    """A segment id occurs more than once in an archive."""


class NonFiniteError(FormatError):
    """A vector contains NaN or infinite values."""


class UnknownIdError(FormatError):
    """A trial references a segment id absent from the archive."""


class LabelError(FormatError):
    """A trial or score line carries an unparseable label token."""


@dataclass(frozen=True)
class Embedding:
    """One fixed-dimension vector with segment/speaker/gender metadata."""

    segment_id: str
    speaker_id: str | None
    gender: str
    vector: np.ndarray


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str = UNLABELED


@dataclass(frozen=True)
class ScoreRecord:
    enroll_id: str
    test_id: str
    score: float
    label: str | None = None


@dataclass(frozen=True)
class EmbeddingArchive:
    """An ordered, immutable collection of same-dimension embeddings.

    Vectors are stored as one (n, dimension) float64 matrix; per-record
    views are exposed through :meth:`records` and :meth:`vector`.
    """

    dimension: int
    segment_ids: tuple[str, ...]
    speaker_ids: tuple[str | None, ...]
    genders: tuple[str, ...]
    vectors: np.ndarray
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "_index", {sid: i for i, sid in enumerate(self.segment_ids)}
        )

    def __len__(self) -> int:
        return len(self.segment_ids)

    def row(self, segment_id: str) -> int:
        try:
            return self._index[segment_id]
        except KeyError:
            raise UnknownIdError(f"unknown segment id {segment_id!r}") from None

    def vector(self, segment_id: str) -> np.ndarray:
        return self.vectors[self.row(segment_id)]

    def __contains__(self, segment_id: str) -> bool:
        return segment_id in self._index

    def records(self) -> Iterator[Embedding]:
        for i, sid in enumerate(self.segment_ids):
            yield Embedding(sid, self.speaker_ids[i], self.genders[i], self.vectors[i])

    @classmethod
    def from_records(cls, records: list[Embedding]) -> "EmbeddingArchive":
        if not records:
            raise FormatError("archive must contain at least one record")
        vectors = np.asarray([r.vector for r in records], dtype=np.float64)
        return build_archive(
            tuple(r.segment_id for r in records),
            tuple(r.speaker_id for r in records),
            tuple(r.gender for r in records),
            vectors,
        )


def build_archive(
    segment_ids: tuple[str, ...],
    speaker_ids: tuple[str | None, ...],
    genders: tuple[str, ...],
    vectors: np.ndarray,
) -> EmbeddingArchive:
    """Assemble an archive and validate every invariant."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] < 1:
        raise FormatError(f"vectors must be a (n, d) matrix with d > 0, got {vectors.shape}")
    n, dim = vectors.shape
    if not (len(segment_ids) == len(speaker_ids) == len(genders) == n):
        raise FormatError("metadata columns and vector rows disagree in length")
    seen: set[str] = set()
    for i, sid in enumerate(segment_ids):
        if sid in seen:
            raise DuplicateIdError(f"duplicate segment id {sid!r} at record {i + 1}")
        seen.add(sid)
    for g in genders:
        if g not in GENDERS:
            raise FormatError(f"invalid gender {g!r}")
    bad = ~np.isfinite(vectors).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(
            f"non-finite value in record {i + 1} (id {segment_ids[i]!r})"
        )
    return EmbeddingArchive(dim, tuple(segment_ids), tuple(speaker_ids), tuple(genders), vectors)


def _parse_gender(token: str) -> str:
    g = _GENDER_ALIASES.get(token.lower(), token.lower())
    if g not in GENDERS:
        raise FormatError(f"unparseable gender token {token!r}")
    return g


# -- embedding archives -------------------------------------------------


def write_archive(archive: EmbeddingArchive, path: str | Path, text: bool = False) -> None:
    """Write an archive; binary by default, plain text when ``text`` is set."""
    path = Path(path)
    if text:
        lines = []
        for rec in archive.records():
            values = " ".join("%.17g" % v for v in rec.vector)
            speaker = rec.speaker_id if rec.speaker_id is not None else "-"
            lines.append(f"{rec.segment_id} {speaker} {rec.gender} {values}")
        path.write_text("\n".join(lines) + "\n")
        return
    parts = [
        ARCHIVE_MAGIC,
        struct.pack("<IIQ", ARCHIVE_VERSION, archive.dimension, len(archive)),
    ]
    for rec in archive.records():
        sid = rec.segment_id.encode("utf-8")
        spk = (rec.speaker_id or "").encode("utf-8")
        parts.append(struct.pack("<H", len(sid)))
        parts.append(sid)
        parts.append(struct.pack("<H", len(spk)))
        parts.append(spk)
        parts.append(struct.pack("<B", _GENDER_TO_BYTE[rec.gender]))
        parts.append(np.ascontiguousarray(rec.vector, dtype="<f8").tobytes())
    path.write_bytes(b"".join(parts))


class _Cursor:
    """Sequential reader that raises TruncatedError on short reads."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def _load_binary_archive(data: bytes) -> EmbeddingArchive:
    cur = _Cursor(data, "archive")
    cur.read(len(ARCHIVE_MAGIC))
    version, dim, count = cur.unpack("<IIQ")
    if version != ARCHIVE_VERSION:
        raise VersionError(f"unsupported archive version {version}")
    if dim < 1:
        raise FormatError(f"invalid archive dimension {dim}")
    ids, speakers, genders = [], [], []
    vectors = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        (id_len,) = cur.unpack("<H")
        ids.append(cur.read(id_len).decode("utf-8"))
        (spk_len,) = cur.unpack("<H")
        spk = cur.read(spk_len).decode("utf-8")
        speakers.append(spk if spk else None)
        (g,) = cur.unpack("<B")
        if g not in _BYTE_TO_GENDER:
            raise FormatError(f"invalid gender byte {g} in record {i + 1}")
        genders.append(_BYTE_TO_GENDER[g])
        vectors[i] = np.frombuffer(cur.read(8 * dim), dtype="<f8")
    if not cur.at_end():
        raise FormatError("trailing bytes after the last declared record")
    return build_archive(tuple(ids), tuple(speakers), tuple(genders), vectors)


def _load_text_archive(data: bytes) -> EmbeddingArchive:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("malformed header: neither archive magic nor utf-8 text") from exc
    ids, speakers, genders, rows = [], [], [], []
    dim: int | None = None
    record_no = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        record_no += 1
        if len(tokens) < 4:
            raise FormatError(f"line {lineno}: expected 'id speaker gender values...'")
        sid, spk, gender_tok = tokens[0], tokens[1], tokens[2]
        try:
            values = [float(t) for t in tokens[3:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: unparseable value ({exc})") from None
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise DimensionMismatchError(
                f"record {record_no} (id {sid!r}) has {len(values)} values, expected {dim}"
            )
        ids.append(sid)
        speakers.append(None if spk == "-" else spk)
        genders.append(_parse_gender(gender_tok))
        rows.append(values)
    if dim is None:
        raise FormatError("archive contains no records")
    return build_archive(
        tuple(ids), tuple(speakers), tuple(genders), np.asarray(rows, dtype=np.float64)
    )


def load_archive(path: str | Path) -> EmbeddingArchive:
    """Load a binary or text embedding archive, validating all invariants."""
    data = Path(path).read_bytes()
    if data[: len(ARCHIVE_MAGIC)] == ARCHIVE_MAGIC:
        return _load_binary_archive(data)
    return _load_text_archive(data)


# -- trial lists ---------------------------------------------------------


def load_trials(path: str | Path, archive: EmbeddingArchive | None = None) -> list[Trial]:
    """Load trials in file order; ids are checked against ``archive`` if given."""
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 3:
            raise FormatError(f"line {lineno}: expected 'enroll_id test_id label'")
        enroll, test, label = tokens
        if label not in TRIAL_LABELS:
            raise LabelError(f"line {lineno}: unparseable label token {label!r}")
        if archive is not None:
            for sid in (enroll, test):
                if sid not in archive:
                    raise UnknownIdError(f"line {lineno}: unknown segment id {sid!r}")
        trials.append(Trial(enroll, test, label))
    return trials


def write_trials(trials: list[Trial], path: str | Path) -> None:
    lines = [f"{t.enroll_id} {t.test_id} {t.label}" for t in trials]
    Path(path).write_text("\n".join(lines) + "\n" if lines else "")


# -- score files ---------------------------------------------------------


def write_scores(records: list[ScoreRecord], path: str | Path) -> None:
    """Write one score line per record; labels are emitted iff any are present."""
    with_labels = any(r.label is not None for r in records)
    lines = []
    for r in records:
        if not math.isfinite(r.score):
            raise NonFiniteError(f"non-finite score for trial ({r.enroll_id}, {r.test_id})")
        line = f"{r.enroll_id} {r.test_id} {r.score:.6f}"
        if with_labels:
            line += f" {r.label if r.label is not None else UNLABELED}"
        lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n" if lines else "")


def load_scores(path: str | Path) -> list[ScoreRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) not in (3, 4):
            raise FormatError(f"line {lineno}: expected 'enroll_id test_id score [label]'")
        try:
            score = float(tokens[2])
        except ValueError:
            raise FormatError(f"line {lineno}: unparseable score {tokens[2]!r}") from None
        if not math.isfinite(score):
            raise NonFiniteError(f"line {lineno}: non-finite score")
        label: str | None = None
        if len(tokens) == 4:
            if tokens[3] not in TRIAL_LABELS:
                raise LabelError(f"line {lineno}: unparseable label token {tokens[3]!r}")
            label = tokens[3]
        records.append(ScoreRecord(tokens[0], tokens[1], score, label))
    return records


# -- model serialization --------------------------------------------------


def _serializable_types() -> dict[str, type]:
    # Imported lazily so dataio stays free of model-module dependencies.
    from . import baselines, gplda, nplda, preprocess

    types = (
        preprocess.PreprocessPipeline,
        gplda.GPLDAModel,
        gplda.ScoreMatrices,
        gplda.GPLDABackend,
        baselines.GaussianBackendModel,
        baselines.GaussianBackend,
        baselines.DPLDAModel,
        baselines.DPLDABackend,
        nplda.NPLDAParams,
    )
    return {t.payload_kind: t for t in types}


def save_model(model, path: str | Path) -> None:
    """Serialize any registered model type; the payload round-trips bit-exactly."""
    kind = getattr(model, "payload_kind", None)
    if kind is None:
        raise TypeError(f"{type(model).__name__} is not a serializable model type")
    payload: Mapping[str, np.ndarray] = model.to_payload()
    kind_bytes = kind.encode("utf-8")
    parts = [
        MODEL_MAGIC,
        struct.pack("<IH", MODEL_VERSION, len(kind_bytes)),
        kind_bytes,
        struct.pack("<I", len(payload)),
    ]
    for name, arr in payload.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path):
    """Load a model saved with :func:`save_model`, dispatching on its kind tag."""
    data = Path(path).read_bytes()
    cur = _Cursor(data, "model file")
    if cur.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise FormatError("wrong magic bytes: not a model file")
    version, kind_len = cur.unpack("<IH")
    if version != MODEL_VERSION:
        raise VersionError(f"unsupported model version {version}")
    kind = cur.read(kind_len).decode("utf-8")
    types = _serializable_types()
    if kind not in types:
        raise FormatError(f"unknown model kind {kind!r}")
    (n_fields,) = cur.unpack("<I")
    payload: dict[str, np.ndarray] = {}
    for _ in range(n_fields):
        (name_len,) = cur.unpack("<H")
        name = cur.read(name_len).decode("utf-8")
        (ndim,) = cur.unpack("<B")
        shape = cur.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(cur.read(8 * count), dtype="<f8").reshape(shape).copy()
        payload[name] = arr
    if not cur.at_end():
        raise FormatError("trailing bytes after the declared payload")
    return types[kind].from_payload(payload)
