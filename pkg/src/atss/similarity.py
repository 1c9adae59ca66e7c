"""Triple temporal self-similarity matrices for one video.

From a record's per-frame embeddings, three T x T cosine-similarity
matrices are built: visual (frame i vs frame j), textual (caption i vs
caption j) and cross-modal (frame i vs caption j, rows indexing the
visual side). AI-generated videos tend to show denser, higher-magnitude
entries in all three; the detector learns on exactly these matrices.

All matrices are computed and held in float64 even though the stored
embeddings are float32, which keeps downstream gradient checks clean.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .embstore import FrameEmbeddingRecord


class ZeroNormError(ValueError):
    """Cosine similarity is undefined for an all-zero vector."""

    def __init__(self, message: str, frame_index: int | None = None, modality: str | None = None):
        super().__init__(message)
        self.frame_index = frame_index
        self.modality = modality


@dataclass
class SimilarityTriplet:
    """The three T x T similarity matrices of one video, float64.

    ``s_visual`` and ``s_textual`` are symmetric with unit diagonal;
    ``s_cross`` is generally neither (row i is the visual frame, column
    j the caption frame).
    """

    s_visual: np.ndarray
    s_textual: np.ndarray
    s_cross: np.ndarray

    @property
    def T(self) -> int:
        return self.s_visual.shape[0]

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.s_visual, self.s_textual, self.s_cross


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, in [-1, 1] up to rounding.

    No epsilon in the denominator: a zero-norm input raises
    ``ZeroNormError`` instead of silently returning 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("cosine inputs must be finite")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("zero-norm vector in cosine similarity")
    return float(np.dot(a, b) / (na * nb))


def _normalized_rows(mat: np.ndarray, modality: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        idx = int(zero[0])
        raise ZeroNormError(
            f"zero-norm {modality} embedding at frame {idx}",
            frame_index=idx,
            modality=modality,
        )
    return mat / norms[:, None]


def build_triplet(record: FrameEmbeddingRecord) -> SimilarityTriplet:
    """Pairwise cosine matrices over a record's frames.

    ``s_visual[i][j]`` compares visual rows i and j, ``s_textual``
    the caption rows, and ``s_cross[i][j]`` visual row i against
    caption row j.
    """
    v = _normalized_rows(record.visual, "visual")
    e = _normalized_rows(record.textual, "textual")
    return SimilarityTriplet(
        s_visual=v @ v.T,
        s_textual=e @ e.T,
        s_cross=v @ e.T,
    )


_BLOCKS = ("S_VISUAL", "S_TEXTUAL", "S_CROSS")


def format_triplet_csv(triplet: SimilarityTriplet) -> str:
    """Three labelled CSV blocks at full double precision."""
    lines = []
    for name, mat in zip(_BLOCKS, triplet.as_tuple()):
        lines.append(name)
        for row in mat:
            lines.append(",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def export_triplet_csv(triplet: SimilarityTriplet, path: str | os.PathLike):
    text = format_triplet_csv(triplet)
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".simmat-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_triplet_csv(text: str) -> SimilarityTriplet:
    """Inverse of :func:`format_triplet_csv` (used by tooling and tests)."""
    blocks: dict[str, list[list[float]]] = {}
    current: list[list[float]] | None = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line in _BLOCKS:
            current = blocks.setdefault(line, [])
        elif current is None:
            raise ValueError(f"unexpected line before any block header: {line!r}")
        else:
            current.append([float(tok) for tok in line.split(",")])
    missing = [name for name in _BLOCKS if name not in blocks]
    if missing:
        raise ValueError(f"missing blocks: {missing}")
    return SimilarityTriplet(
        s_visual=np.asarray(blocks["S_VISUAL"], dtype=np.float64),
        s_textual=np.asarray(blocks["S_TEXTUAL"], dtype=np.float64),
        s_cross=np.asarray(blocks["S_CROSS"], dtype=np.float64),
    )
