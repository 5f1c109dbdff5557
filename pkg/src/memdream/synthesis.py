"""Text-to-image backend contract, deterministic stub backend, and batching.

Real diffusion inference lives behind an HTTP wire protocol; the repo ships
only a stub that fills a low-frequency value-noise field per channel from a
counter-based generator keyed on hash(prompt, seed). Channel means are an
affine function of that hash, which is what makes desk-scale feature
extraction meaningful: the toy extractor can recover the hash-derived
"concept level" from pixel statistics alone.
"""

from __future__ import annotations

import base64
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import requests

from .prompt_forge import PromptEntry
from .util import sha256_hex, stable_hash64

STUB_MODEL_ID = "stub-value-noise-v1"

# Fine-tune recipe the job spec validates against.
EXPECTED_STYLE_IMAGES = 20
EXPECTED_REGULARIZATION_IMAGES = 1500
EXPECTED_TRAIN_STEPS = 2200
DEFAULT_BASE_CHECKPOINT = "stable-diffusion-v1-5"


class SynthesisError(Exception):
    """Base class for synthesis failures."""


class BackendTimeoutError(SynthesisError):
    """Backend unreachable or too slow; the request may be retried."""


class BackendRejectionError(SynthesisError):
    """Backend refused the request; retrying is pointless."""


@dataclass(frozen=True)
class SynthesisRequest:
    prompt: str
    seed: int
    steps: int = 50
    guidance_scale: float = 7.5
    width: int = 512
    height: int = 512

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("empty prompt")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.guidance_scale <= 0:
            raise ValueError(f"guidance_scale must be positive, got {self.guidance_scale}")
        for name, v in (("width", self.width), ("height", self.height)):
            if v <= 0 or v % 8 != 0:
                raise ValueError(f"{name} must be a positive multiple of 8, got {v}")

    def to_wire(self) -> dict:
        return {
            "prompt": self.prompt,
            "seed": self.seed,
            "steps": self.steps,
            "guidance_scale": self.guidance_scale,
            "width": self.width,
            "height": self.height,
        }


@dataclass(frozen=True)
class BackendResponse:
    image_bytes: bytes
    model_id: str


class Backend(Protocol):
    def generate(self, request: SynthesisRequest) -> BackendResponse: ...


@dataclass(frozen=True)
class ImageRecord:
    video_id: str
    image_bytes_digest: str
    storage_path: str
    request: SynthesisRequest
    backend_id: str


# --- portable pixmap (P6) codec -------------------------------------------
#
# Lossless and canonical: one header layout, raw bytes, no compression, so
# image digests are stable across platforms and library versions.

def encode_ppm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected HxWx3 uint8 pixels, got {pixels.shape} {pixels.dtype}")
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a P6 pixmap: bad header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"unsupported pixmap max value {maxval}, expected 255")
    payload = data[m.end():]
    expected = w * h * 3
    if len(payload) < expected:
        raise ValueError(f"truncated pixmap payload: {len(payload)} < {expected} bytes")
    if len(payload) > expected:
        raise ValueError(f"trailing data after pixmap payload: {len(payload) - expected} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


# --- deterministic stub images ---------------------------------------------

def _concept_state(prompt: str, seed: int) -> int:
    return stable_hash64("stub-image", prompt, str(seed))


def stub_concept_level(prompt: str, seed: int) -> float:
    """The hidden latent in [0, 1) a stub image encodes, as a pure function
    of (prompt, seed). Fixture memorability scores are derived from this."""
    return _concept_state(prompt, seed) / 2.0**64


def _channel_means(level: float) -> tuple[float, float, float]:
    # Distinct slopes per channel so quantization ties in one channel do not
    # collapse the whole feature vector.
    return 0.20 + 0.60 * level, 0.25 + 0.50 * level, 0.30 + 0.40 * level


def _value_noise_field(rng: np.random.Generator, grid: int, height: int, width: int, amp: float) -> np.ndarray:
    lattice = rng.uniform(-amp, amp, size=(grid + 1, grid + 1))
    ys = np.linspace(0.0, grid, num=height, endpoint=True)
    xs = np.linspace(0.0, grid, num=width, endpoint=True)
    i0 = np.minimum(ys.astype(np.intp), grid - 1)
    j0 = np.minimum(xs.astype(np.intp), grid - 1)
    ty = (ys - i0)[:, None]
    tx = (xs - j0)[None, :]
    a = lattice[np.ix_(i0, j0)]
    b = lattice[np.ix_(i0 + 1, j0)]
    c = lattice[np.ix_(i0, j0 + 1)]
    d = lattice[np.ix_(i0 + 1, j0 + 1)]
    return a * (1 - ty) * (1 - tx) + b * ty * (1 - tx) + c * (1 - ty) * tx + d * ty * tx


def _render_channels(key: int, level: float, width: int, height: int, grid: int, noise: float) -> bytes:
    rng = np.random.Generator(np.random.Philox(key=key))
    channels = []
    for mu in _channel_means(level):
        fld = _value_noise_field(rng, grid, height, width, noise)
        fld -= fld.mean()  # realized channel mean must encode `level` exactly
        channels.append(np.clip(mu + fld, 0.0, 1.0))
    pixels = np.round(np.stack(channels, axis=-1) * 255.0).astype(np.uint8)
    return encode_ppm(pixels)


def stub_generate(prompt: str, seed: int, width: int = 512, height: int = 512, *, noise: float = 0.05) -> bytes:
    """Pure function of its arguments: hash (prompt, seed) to a 64-bit state,
    key a counter-based generator with it, and fill a low-frequency value-noise
    field per channel around hash-derived channel means."""
    if width <= 0 or height <= 0:
        raise ValueError(f"dimensions must be positive, got {width}x{height}")
    state = _concept_state(prompt, seed)
    return _render_channels(state, state / 2.0**64, width, height, grid=8, noise=noise)


def render_genesis_frame(
    video_id: str,
    frame_index: int,
    concept_level: float,
    width: int = 512,
    height: int = 512,
    *,
    noise: float = 0.05,
) -> bytes:
    """Fixture stand-in for a real video frame: same channel-mean encoding of
    the concept latent as stub images, but keyed on (video id, frame index)
    and with a finer noise lattice, so the two domains share the latent while
    differing in texture."""
    if width <= 0 or height <= 0:
        raise ValueError(f"dimensions must be positive, got {width}x{height}")
    key = stable_hash64("genesis-frame", video_id, str(frame_index))
    return _render_channels(key, concept_level, width, height, grid=16, noise=noise)


def default_seed_for(video_id: str) -> int:
    """Per-video synthesis seed: stable hash of the id (overridable via config)."""
    return stable_hash64("synthesis-seed", video_id) % 2**63


@dataclass(frozen=True)
class StubBackend:
    noise: float = 0.05
    model_id: str = STUB_MODEL_ID

    def generate(self, request: SynthesisRequest) -> BackendResponse:
        data = stub_generate(request.prompt, request.seed, request.width, request.height, noise=self.noise)
        return BackendResponse(image_bytes=data, model_id=self.model_id)


@dataclass(frozen=True)
class HttpBackend:
    """Client for the synthesis wire protocol.

    POST {prompt, seed, steps, guidance_scale, width, height} to the endpoint;
    the reply is either {image_base64, model_id} or {error}.
    """

    url: str
    timeout: float = 120.0

    def generate(self, request: SynthesisRequest) -> BackendResponse:
        try:
            resp = requests.post(self.url, json=request.to_wire(), timeout=self.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise BackendTimeoutError(f"synthesis backend unreachable at {self.url}: {exc}") from exc
        try:
            body = resp.json()
        except ValueError as exc:
            raise BackendRejectionError(
                f"synthesis backend returned non-structured response (status {resp.status_code})"
            ) from exc
        if "error" in body:
            raise BackendRejectionError(f"synthesis backend rejected request: {body['error']}")
        if resp.status_code != 200:
            raise BackendRejectionError(f"synthesis backend returned status {resp.status_code}")
        try:
            image = base64.b64decode(body["image_base64"])
            model_id = str(body["model_id"])
        except (KeyError, ValueError) as exc:
            raise BackendRejectionError(f"synthesis backend response missing fields: {exc}") from exc
        return BackendResponse(image_bytes=image, model_id=model_id)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    factor: float = 2.0

    def delay(self, attempt: int) -> float:
        """Delay after the given 1-based failed attempt."""
        return self.base_delay * self.factor ** (attempt - 1)


def synthesize(
    request: SynthesisRequest,
    backend: Backend,
    *,
    video_id: str,
    storage_path: str | Path,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> ImageRecord:
    """Generate one image, persist it, and record its digest.

    Timeouts are retried with exponential backoff per `retry`; rejections
    surface the backend's message immediately.
    """
    attempt = 0
    while True:
        attempt += 1
        try:
            response = backend.generate(request)
            break
        except BackendTimeoutError:
            if attempt >= retry.max_attempts:
                raise
            sleep(retry.delay(attempt))
    path = Path(storage_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(response.image_bytes)
    return ImageRecord(
        video_id=video_id,
        image_bytes_digest=sha256_hex(response.image_bytes),
        storage_path=str(path),
        request=request,
        backend_id=response.model_id,
    )


@dataclass(frozen=True)
class SynthesisFailure:
    video_id: str
    message: str


@dataclass(frozen=True)
class BatchResult:
    records: tuple[ImageRecord, ...]
    failures: tuple[SynthesisFailure, ...]


@dataclass(frozen=True)
class ImageParams:
    """Request parameters shared by every item of a batch."""

    steps: int = 50
    guidance_scale: float = 7.5
    width: int = 512
    height: int = 512


def batch_synthesize(
    entries: Sequence[PromptEntry],
    backend: Backend,
    out_dir: str | Path,
    *,
    params: ImageParams = ImageParams(),
    max_in_flight: int = 4,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> BatchResult:
    """Synthesize every manifest entry, up to max_in_flight concurrently.

    Output order is input order regardless of completion order. A failed item
    (after its own retries) lands in the failure ledger; the batch continues.
    """
    if max_in_flight < 1:
        raise ValueError(f"max_in_flight must be >= 1, got {max_in_flight}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run_one(entry: PromptEntry) -> ImageRecord:
        request = SynthesisRequest(
            prompt=entry.prompt,
            seed=entry.seed,
            steps=params.steps,
            guidance_scale=params.guidance_scale,
            width=params.width,
            height=params.height,
        )
        return synthesize(
            request,
            backend,
            video_id=entry.video_id,
            storage_path=out / f"{entry.video_id}.ppm",
            retry=retry,
            sleep=sleep,
        )

    records: list[ImageRecord] = []
    failures: list[SynthesisFailure] = []
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        outcomes = list(pool.map(lambda e: _capture(run_one, e), entries))
    for entry, (record, error) in zip(entries, outcomes):
        if record is not None:
            records.append(record)
        else:
            failures.append(SynthesisFailure(video_id=entry.video_id, message=error or "unknown error"))
    return BatchResult(records=tuple(records), failures=tuple(failures))


def _capture(fn: Callable[[PromptEntry], ImageRecord], entry: PromptEntry) -> tuple[ImageRecord | None, str | None]:
    try:
        return fn(entry), None
    except SynthesisError as exc:
        return None, str(exc)


# --- fine-tune job spec -----------------------------------------------------

@dataclass(frozen=True)
class FinetuneJobSpec:
    """Serialized plan for an external diffusion fine-tune run."""

    style_image_paths: tuple[str, ...]
    regularization_image_paths: tuple[str, ...]
    train_steps: int
    style_token: str
    base_checkpoint_id: str = DEFAULT_BASE_CHECKPOINT
    warnings: tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "style_image_paths": list(self.style_image_paths),
            "regularization_image_paths": list(self.regularization_image_paths),
            "train_steps": self.train_steps,
            "style_token": self.style_token,
            "base_checkpoint_id": self.base_checkpoint_id,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FinetuneJobSpec":
        return cls(
            style_image_paths=tuple(obj["style_image_paths"]),
            regularization_image_paths=tuple(obj["regularization_image_paths"]),
            train_steps=int(obj["train_steps"]),
            style_token=obj["style_token"],
            base_checkpoint_id=obj["base_checkpoint_id"],
            warnings=tuple(obj["warnings"]),
        )


def plan_finetune(
    style_paths: Sequence[str | Path],
    reg_paths: Sequence[str | Path],
    steps: int,
    token: str,
    base_checkpoint_id: str = DEFAULT_BASE_CHECKPOINT,
) -> FinetuneJobSpec:
    """Validate a fine-tune plan. Counts that deviate from the reference
    recipe (20 style images, 1500 regularization images, 2200 steps) attach
    warnings to the spec but do not fail it."""
    if not style_paths:
        raise ValueError("fine-tune plan needs at least one style image")
    if not token:
        raise ValueError("fine-tune plan needs a non-empty style token")
    if steps < 1:
        raise ValueError(f"train_steps must be >= 1, got {steps}")
    for p in [*style_paths, *reg_paths]:
        if not Path(p).is_file():
            raise FileNotFoundError(f"fine-tune input image missing: {p}")
    warnings: list[str] = []
    if len(style_paths) != EXPECTED_STYLE_IMAGES:
        warnings.append(f"expected {EXPECTED_STYLE_IMAGES} style images, got {len(style_paths)}")
    if len(reg_paths) != EXPECTED_REGULARIZATION_IMAGES:
        warnings.append(
            f"expected {EXPECTED_REGULARIZATION_IMAGES} regularization images, got {len(reg_paths)}"
        )
    if steps != EXPECTED_TRAIN_STEPS:
        warnings.append(f"expected {EXPECTED_TRAIN_STEPS} train steps, got {steps}")
    return FinetuneJobSpec(
        style_image_paths=tuple(str(p) for p in style_paths),
        regularization_image_paths=tuple(str(p) for p in reg_paths),
        train_steps=steps,
        style_token=token,
        base_checkpoint_id=base_checkpoint_id,
        warnings=tuple(warnings),
    )
