"""On-disk corpus of per-video frame embeddings and labels.

A corpus file is the boundary between pretrained frame/caption encoders
and the detector: each record carries one video's binary label plus two
T x d float32 matrices (one visual embedding row and one caption
embedding row per frame), optionally the raw captions for audit.

Binary layout (all integers little-endian):

    header:  magic  ``ATSS`` (4 bytes) | version u16 = 1 | reserved u16 = 0
    record:  id_len u16 | video_id utf-8 | label u8 | T u16 | d u32
             | visual  T*d f32 row-major
             | textual T*d f32 row-major
             | caption_count u16 (0 or T) | {cap_len u16, caption utf-8} ...

Records repeat until EOF. A header-only file is an empty corpus.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"ATSS"
VERSION = 1

_HEADER = struct.Struct("<4sHH")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


class CorpusError(Exception):
    """Base class for every corpus read/write failure."""


class CorpusFormatError(CorpusError):
    """Structural problem in the byte stream."""


class BadMagicError(CorpusFormatError):
    pass


class UnsupportedVersionError(CorpusFormatError):
    pass


class TruncatedRecordError(CorpusFormatError):
    pass


class CorpusDataError(CorpusError):
    """Well-formed bytes describing an invalid corpus."""


class InvalidEmbeddingError(CorpusDataError):
    """Non-finite entries or an all-zero embedding row."""


class DuplicateVideoIdError(CorpusDataError):
    pass


class InvalidRecordError(CorpusDataError):
    """Bad label, caption count, dimensions, or inter-record mismatch."""


@dataclass
class FrameEmbeddingRecord:
    """One video: label plus per-frame visual and textual embeddings.

    ``visual`` and ``textual`` are T x d float32, one row per frame,
    row t holding the frame embedding and the caption embedding of
    frame t respectively. ``captions`` is kept for audit only; the
    detector never reads it.
    """

    video_id: str
    label: int
    visual: np.ndarray
    textual: np.ndarray
    captions: list[str] | None = None

    def __post_init__(self):
        self.visual = np.ascontiguousarray(self.visual, dtype=np.float32)
        self.textual = np.ascontiguousarray(self.textual, dtype=np.float32)

    @property
    def T(self) -> int:
        return self.visual.shape[0]

    @property
    def d(self) -> int:
        return self.visual.shape[1]

    def validate(self):
        if self.label not in (0, 1):
            raise InvalidRecordError(
                f"record {self.video_id!r}: label must be 0 or 1, got {self.label}"
            )
        if self.visual.ndim != 2 or self.textual.ndim != 2:
            raise InvalidRecordError(
                f"record {self.video_id!r}: embeddings must be 2-D matrices"
            )
        if self.visual.shape != self.textual.shape:
            raise InvalidRecordError(
                f"record {self.video_id!r}: visual shape {self.visual.shape} != "
                f"textual shape {self.textual.shape}"
            )
        if self.T < 1 or self.d < 1:
            raise InvalidRecordError(
                f"record {self.video_id!r}: T and d must be positive, "
                f"got T={self.T}, d={self.d}"
            )
        for name, mat in (("visual", self.visual), ("textual", self.textual)):
            if not np.isfinite(mat).all():
                raise InvalidEmbeddingError(
                    f"record {self.video_id!r}: non-finite entry in {name} embeddings"
                )
            norms = np.linalg.norm(mat.astype(np.float64), axis=1)
            zero = np.nonzero(norms == 0.0)[0]
            if zero.size:
                raise InvalidEmbeddingError(
                    f"record {self.video_id!r}: all-zero {name} row for frame {zero[0]}"
                )
        if self.captions is not None and len(self.captions) != self.T:
            raise InvalidRecordError(
                f"record {self.video_id!r}: {len(self.captions)} captions for "
                f"{self.T} frames"
            )

    def __eq__(self, other):
        if not isinstance(other, FrameEmbeddingRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.label == other.label
            and self.visual.shape == other.visual.shape
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.textual, other.textual)
            and self.captions == other.captions
        )


@dataclass
class Corpus:
    """Ordered records sharing one T and d, with unique video ids."""

    records: list[FrameEmbeddingRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def T(self) -> int:
        if not self.records:
            raise InvalidRecordError("empty corpus has no frame count")
        return self.records[0].T

    @property
    def d(self) -> int:
        if not self.records:
            raise InvalidRecordError("empty corpus has no embedding dimension")
        return self.records[0].d

    def validate(self):
        seen: set[str] = set()
        for rec in self.records:
            rec.validate()
            if rec.video_id in seen:
                raise DuplicateVideoIdError(f"duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)
            if (rec.T, rec.d) != (self.records[0].T, self.records[0].d):
                raise InvalidRecordError(
                    f"record {rec.video_id!r}: shape ({rec.T}, {rec.d}) differs "
                    f"from corpus shape ({self.records[0].T}, {self.records[0].d})"
                )

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.records == other.records


def _encode_record(rec: FrameEmbeddingRecord) -> bytes:
    vid = rec.video_id.encode("utf-8")
    if len(vid) > 0xFFFF:
        raise InvalidRecordError(f"video_id longer than {0xFFFF} utf-8 bytes")
    parts = [
        _U16.pack(len(vid)),
        vid,
        _U8.pack(rec.label),
        _U16.pack(rec.T),
        _U32.pack(rec.d),
        rec.visual.astype("<f4", copy=False).tobytes(),
        rec.textual.astype("<f4", copy=False).tobytes(),
    ]
    caps = rec.captions
    parts.append(_U16.pack(0 if caps is None else len(caps)))
    if caps is not None:
        for cap in caps:
            raw = cap.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise InvalidRecordError("caption longer than 65535 utf-8 bytes")
            parts.append(_U16.pack(len(raw)))
            parts.append(raw)
    return b"".join(parts)


def write_corpus(corpus: Corpus, path: str | os.PathLike):
    """Serialize a corpus, validating before any byte is written.

    The file is written to a temporary sibling and renamed into place,
    so a failure never leaves a partial corpus at ``path``.
    """
    corpus.validate()
    payload = bytearray(_HEADER.pack(MAGIC, VERSION, 0))
    for rec in corpus.records:
        payload += _encode_record(rec)
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".corpus-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Cursor over the raw bytes with truncation-aware reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedRecordError(
                f"needed {n} bytes at offset {self.pos}, file ends at {len(self.data)}"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self.take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def utf8(self, n: int) -> str:
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidRecordError(f"invalid utf-8 at offset {self.pos}: {exc}") from exc

    def f32_matrix(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(rows * cols * 4)
        mat = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).astype(np.float32)
        mat.flags.writeable = False
        return mat

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def read_corpus(path: str | os.PathLike) -> Corpus:
    """Parse and validate a corpus file.

    Raises the error subclass naming the malformation: ``BadMagicError``,
    ``UnsupportedVersionError``, ``TruncatedRecordError``,
    ``InvalidEmbeddingError``, ``DuplicateVideoIdError`` or
    ``InvalidRecordError``. Never returns a silently wrong corpus.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise TruncatedRecordError(f"file is {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, _reserved = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}, expected {VERSION}")

    reader = _Reader(data)
    reader.pos = _HEADER.size
    records: list[FrameEmbeddingRecord] = []
    while not reader.exhausted:
        vid = reader.utf8(reader.u16())
        label = reader.u8()
        T = reader.u16()
        d = reader.u32()
        if T < 1 or d < 1:
            raise InvalidRecordError(f"record {vid!r}: nonpositive T={T} or d={d}")
        visual = reader.f32_matrix(T, d)
        textual = reader.f32_matrix(T, d)
        caption_count = reader.u16()
        captions: list[str] | None = None
        if caption_count:
            if caption_count != T:
                raise InvalidRecordError(
                    f"record {vid!r}: caption_count {caption_count} is neither 0 nor T={T}"
                )
            captions = [reader.utf8(reader.u16()) for _ in range(caption_count)]
        records.append(
            FrameEmbeddingRecord(
                video_id=vid, label=label, visual=visual, textual=textual, captions=captions
            )
        )
    corpus = Corpus(records)
    corpus.validate()
    return corpus


def split_train_val(corpus: Corpus, val_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Deterministic disjoint (train, validation) partition.

    Validation size is round(val_fraction * N). Record order within each
    side preserves the input order.
    """
    n = len(corpus)
    if n == 0:
        raise InvalidRecordError("cannot split an empty corpus")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n_val = int(round(val_fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(
            f"val_fraction {val_fraction} leaves an empty side for {n} records"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = Corpus([rec for i, rec in enumerate(corpus.records) if i not in val_idx])
    val = Corpus([rec for i, rec in enumerate(corpus.records) if i in val_idx])
    return train, val


def write_corpus_jsonl(corpus: Corpus, path: str | os.PathLike):
    """Debug mirror of the binary format: one JSON object per record."""
    corpus.validate()
    lines = []
    for rec in corpus.records:
        lines.append(
            json.dumps(
                {
                    "video_id": rec.video_id,
                    "label": rec.label,
                    "visual": [[float(x) for x in row] for row in rec.visual],
                    "textual": [[float(x) for x in row] for row in rec.textual],
                    "captions": rec.captions,
                },
                ensure_ascii=False,
            )
        )
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".corpus-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_corpus_jsonl(path: str | os.PathLike) -> Corpus:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                FrameEmbeddingRecord(
                    video_id=obj["video_id"],
                    label=obj["label"],
                    visual=np.asarray(obj["visual"], dtype=np.float32),
                    textual=np.asarray(obj["textual"], dtype=np.float32),
                    captions=obj.get("captions"),
                )
            )
    corpus = Corpus(records)
    corpus.validate()
    return corpus
