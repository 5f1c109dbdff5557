"""Frame selection, embedding extraction, stacking, and the EMB1 store.

Embeddings are computed in 64-bit and stored in 32-bit. The real extractor
is an external service speaking the same wire style as synthesis (image in,
vector out, declared id and dimension); the in-repo toy extractor reduces an
image to per-channel histograms and moments, which is all the fixture domains
need to carry their concept latent.
"""

from __future__ import annotations

import base64
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests
from PIL import Image

TOY_EXTRACTOR_ID = "toy-hist-v1"
_MAGIC = b"EMB1"


class FeatureError(ValueError):
    """Raised for undecodable images, backend faults, or malformed stores."""


def select_frames(frame_count: int) -> tuple[int, int, int]:
    """(first, middle, last) frame indices; middle is the lower middle for
    even counts."""
    if frame_count < 1:
        raise FeatureError(f"frame_count must be >= 1, got {frame_count}")
    return 0, (frame_count - 1) // 2, frame_count - 1


def middle_frame(frame_count: int) -> int:
    return select_frames(frame_count)[1]


def decode_image(data: bytes) -> np.ndarray:
    """Decode to an HxWx3 float64 array in [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            rgb = img.convert("RGB")
            pixels = np.asarray(rgb, dtype=np.float64)
    except Exception as exc:
        raise FeatureError(f"undecodable image: {exc}") from exc
    return pixels / 255.0


class Extractor(Protocol):
    extractor_id: str
    dim: int

    def extract(self, image_bytes: bytes) -> np.ndarray: ...


@dataclass(frozen=True)
class ToyExtractor:
    """Per-channel 16-bin normalized histogram, then per-channel mean and
    standard deviation: d = 3*16 + 3 + 3 = 54."""

    extractor_id: str = TOY_EXTRACTOR_ID
    dim: int = 54

    def extract(self, image_bytes: bytes) -> np.ndarray:
        pixels = decode_image(image_bytes)
        blocks: list[np.ndarray] = []
        for c in range(3):
            v = pixels[:, :, c].ravel()
            bins = np.minimum((v * 16).astype(np.intp), 15)
            blocks.append(np.bincount(bins, minlength=16).astype(np.float64) / v.size)
        means = pixels.reshape(-1, 3).mean(axis=0)
        stds = pixels.reshape(-1, 3).std(axis=0)
        return np.concatenate([*blocks, means, stds])


@dataclass(frozen=True)
class HttpExtractor:
    """Client for the embedding wire protocol.

    POST {image_base64} to the endpoint; the reply is {vector} or {error}.
    The declared dimension is enforced on every response.
    """

    url: str
    extractor_id: str
    dim: int
    timeout: float = 60.0

    def extract(self, image_bytes: bytes) -> np.ndarray:
        try:
            resp = requests.post(
                self.url, json={"image_base64": base64.b64encode(image_bytes).decode("ascii")},
                timeout=self.timeout,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise FeatureError(f"embedding backend unreachable at {self.url}: {exc}") from exc
        try:
            body = resp.json()
        except ValueError as exc:
            raise FeatureError(
                f"embedding backend returned non-structured response (status {resp.status_code})"
            ) from exc
        if "error" in body:
            raise FeatureError(f"embedding backend rejected request: {body['error']}")
        if resp.status_code != 200 or "vector" not in body:
            raise FeatureError(f"embedding backend returned status {resp.status_code} without a vector")
        vec = np.asarray(body["vector"], dtype=np.float64)
        return _check_vector(vec, self.dim, self.extractor_id)


def _check_vector(vec: np.ndarray, dim: int, extractor_id: str) -> np.ndarray:
    if vec.ndim != 1 or vec.shape[0] != dim:
        raise FeatureError(
            f"extractor {extractor_id!r} declared d={dim}, got shape {vec.shape}"
        )
    if not np.all(np.isfinite(vec)):
        raise FeatureError(f"extractor {extractor_id!r} produced non-finite values")
    return vec


def extract(image_bytes: bytes, extractor: Extractor) -> np.ndarray:
    """Extract one embedding, enforcing the backend's declared dimension."""
    return _check_vector(extractor.extract(image_bytes), extractor.dim, extractor.extractor_id)


def stack(v1: np.ndarray, v2: np.ndarray, v3: np.ndarray) -> np.ndarray:
    """Concatenate (first, middle, last) frame embeddings."""
    if not (v1.shape == v2.shape == v3.shape) or v1.ndim != 1:
        raise FeatureError(f"stack needs three equal-length vectors, got {v1.shape}, {v2.shape}, {v3.shape}")
    return np.concatenate([v1, v2, v3])


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    ids: tuple[str, ...]
    data: np.ndarray
    extractor_id: str
    stacked_from: int

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise FeatureError(f"data must be 2-D, got shape {self.data.shape}")
        n, d = self.data.shape
        if n != len(self.ids):
            raise FeatureError(f"row count {n} != id count {len(self.ids)}")
        if d <= 0:
            raise FeatureError("embedding dimension must be positive")
        if self.stacked_from not in (1, 3):
            raise FeatureError(f"stacked_from must be 1 or 3, got {self.stacked_from}")
        if self.stacked_from == 3 and d % 3 != 0:
            raise FeatureError(f"stacked matrix dimension {d} not divisible by 3")
        if not np.all(np.isfinite(self.data)):
            raise FeatureError("embedding matrix contains non-finite values")


def extract_many(
    items: Sequence[tuple[str, Sequence[bytes]]],
    extractor: Extractor,
    *,
    max_workers: int = 1,
) -> EmbeddingMatrix:
    """Extract embeddings for many items, each given as (id, frame images).

    Every item must carry the same number of images: one, or three in
    (first, middle, last) order, which are stacked. Output row order is
    input order regardless of worker scheduling.
    """
    if not items:
        raise FeatureError("nothing to extract: empty item list")
    per_item = len(items[0][1])
    if per_item not in (1, 3) or any(len(frames) != per_item for _, frames in items):
        raise FeatureError("every item must have exactly 1 or 3 images, uniformly")

    def row(item: tuple[str, Sequence[bytes]]) -> np.ndarray:
        frames = item[1]
        vecs = [extract(b, extractor) for b in frames]
        return vecs[0] if per_item == 1 else stack(*vecs)

    if max_workers <= 1:
        rows = [row(item) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(row, items))
    return EmbeddingMatrix(
        ids=tuple(vid for vid, _ in items),
        data=np.stack(rows).astype(np.float64),
        extractor_id=extractor.extractor_id,
        stacked_from=per_item,
    )


# --- EMB1 store -------------------------------------------------------------
#
# magic "EMB1" | u32 n | u32 d | u8 stacked_from | len-prefixed extractor_id
# | n len-prefixed ids | n*d little-endian float32. Length prefixes are u32.

def save_matrix(matrix: EmbeddingMatrix, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    n, d = matrix.data.shape
    parts = [_MAGIC, struct.pack("<IIB", n, d, matrix.stacked_from)]
    parts.append(_pack_str(matrix.extractor_id))
    for vid in matrix.ids:
        parts.append(_pack_str(vid))
    parts.append(matrix.data.astype("<f4").tobytes())
    p.write_bytes(b"".join(parts))


def load_matrix(path: str | Path) -> EmbeddingMatrix:
    p = Path(path)
    data = p.read_bytes()
    if data[:4] != _MAGIC:
        raise FeatureError(f"{p}: bad magic {data[:4]!r}, expected {_MAGIC!r}")
    off = 4
    try:
        n, d, stacked_from = struct.unpack_from("<IIB", data, off)
        off += 9
        extractor_id, off = _unpack_str(data, off)
        ids = []
        for _ in range(n):
            vid, off = _unpack_str(data, off)
            ids.append(vid)
    except struct.error as exc:
        raise FeatureError(f"{p}: truncated header: {exc}") from exc
    need = n * d * 4
    payload = data[off:]
    if len(payload) < need:
        raise FeatureError(f"{p}: truncated payload: {len(payload)} < {need} bytes")
    if len(payload) > need:
        raise FeatureError(f"{p}: trailing data after payload: {len(payload) - need} bytes")
    mat = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    return EmbeddingMatrix(ids=tuple(ids), data=mat, extractor_id=extractor_id, stacked_from=stacked_from)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(data: bytes, off: int) -> tuple[str, int]:
    (length,) = struct.unpack_from("<I", data, off)
    off += 4
    raw = data[off:off + length]
    if len(raw) != length:
        raise struct.error(f"string field runs past end of file (need {length} bytes)")
    return raw.decode("utf-8"), off + length
