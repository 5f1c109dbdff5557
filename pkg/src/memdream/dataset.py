"""Video metadata manifests: loading, validation, and fixture generation.

A manifest is UTF-8 line-delimited JSON, one record per line, with keys
id, captions, action_labels, mem_score (nullable), split, frame_count.
Withheld-test records carry ``mem_score: null`` instead of a sentinel so
nothing can accidentally train on placeholders.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path

SPLITS = ("train", "val", "test")
_RECORD_KEYS = ("id", "captions", "action_labels", "mem_score", "split", "frame_count")


class ManifestError(ValueError):
    """Raised for malformed manifest files or invalid records."""


def canonical_text(s: str) -> str:
    """Trim and collapse internal whitespace runs; case is preserved because
    prompt text is case-meaningful to synthesis backends."""
    return " ".join(s.split())


@dataclass(frozen=True)
class VideoRecord:
    id: str
    captions: tuple[str, ...]
    action_labels: tuple[str, ...]
    mem_score: float | None
    split: str
    frame_count: int

    def __post_init__(self) -> None:
        if not self.id:
            raise ManifestError("record id is empty")
        captions = tuple(canonical_text(c) for c in self.captions)
        labels = tuple(canonical_text(label) for label in self.action_labels)
        object.__setattr__(self, "captions", captions)
        object.__setattr__(self, "action_labels", labels)
        if len(self.captions) < 1 or any(not c for c in self.captions):
            raise ManifestError(f"record {self.id!r}: captions must be non-empty strings")
        if any(not label for label in self.action_labels):
            raise ManifestError(f"record {self.id!r}: action labels must be non-empty strings")
        if self.mem_score is not None and not (0.0 <= self.mem_score <= 1.0):
            raise ManifestError(f"record {self.id!r}: mem_score {self.mem_score} outside [0, 1]")
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.id!r}: unknown split {self.split!r}")
        if self.frame_count < 1:
            raise ManifestError(f"record {self.id!r}: frame_count must be >= 1, got {self.frame_count}")


@dataclass(frozen=True)
class SplitManifest:
    records: tuple[VideoRecord, ...]
    source_tag: str

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate record id {r.id!r}")
            seen.add(r.id)

    def by_split(self, split: str) -> tuple[VideoRecord, ...]:
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return tuple(r for r in self.records if r.split == split)


def _record_to_obj(r: VideoRecord) -> dict:
    return {
        "id": r.id,
        "captions": list(r.captions),
        "action_labels": list(r.action_labels),
        "mem_score": r.mem_score,
        "split": r.split,
        "frame_count": r.frame_count,
    }


def _record_from_obj(obj: dict) -> VideoRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"expected an object, got {type(obj).__name__}")
    missing = [k for k in _RECORD_KEYS if k not in obj]
    unknown = [k for k in obj if k not in _RECORD_KEYS]
    if missing or unknown:
        raise ManifestError(f"bad record keys: missing {missing}, unknown {unknown}")
    score = obj["mem_score"]
    if score is not None and not isinstance(score, (int, float)):
        raise ManifestError(f"mem_score must be a number or null, got {score!r}")
    return VideoRecord(
        id=str(obj["id"]),
        captions=tuple(str(c) for c in obj["captions"]),
        action_labels=tuple(str(a) for a in obj["action_labels"]),
        mem_score=None if score is None else float(score),
        split=str(obj["split"]),
        frame_count=int(obj["frame_count"]),
    )


def load_manifest(path: str | Path, source_tag: str | None = None) -> SplitManifest:
    """Parse a manifest file; errors name the offending line or record id."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p}")
    records: list[VideoRecord] = []
    with p.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(_record_from_obj(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{p}: line {lineno}: not valid JSON: {exc}") from exc
            except (ManifestError, TypeError, ValueError) as exc:
                raise ManifestError(f"{p}: line {lineno}: {exc}") from exc
    return SplitManifest(records=tuple(records), source_tag=source_tag if source_tag is not None else p.name)


def save_manifest(manifest: SplitManifest, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as f:
        for r in manifest.records:
            f.write(json.dumps(_record_to_obj(r), ensure_ascii=False))
            f.write("\n")


def split_counts(manifest: SplitManifest) -> tuple[int, int, int]:
    counts = {s: 0 for s in SPLITS}
    for r in manifest.records:
        counts[r.split] += 1
    return counts["train"], counts["val"], counts["test"]


def apportion(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder split sizing: floor each ratio*n, then hand the
    remaining records to the splits with the largest fractional parts
    (ties broken in train/val/test order)."""
    if n < 0:
        raise ManifestError(f"n must be >= 0, got {n}")
    if any(r < 0 for r in ratios):
        raise ManifestError(f"ratios must be non-negative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ManifestError(f"ratios must sum to 1 within 1e-9, got {ratios} (sum {sum(ratios)})")
    exact = [r * n for r in ratios]
    base = [math.floor(e) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - base[i]), i))
    for i in range(n - sum(base)):
        base[order[i]] += 1
    return base[0], base[1], base[2]


_SUBJECTS = (
    "man", "woman", "child", "dog", "chef", "runner", "cyclist",
    "barista", "group of friends", "street performer",
)
_ADJECTIVES = ("young", "smiling", "tired", "excited", "focused", "playful")
_VERBS = (
    "running", "jumping", "cooking", "dancing", "laughing", "sliding",
    "painting", "singing", "stretching", "pouring",
)
_PLACES = (
    "in the park", "in a kitchen", "on the street", "at the beach",
    "in a gym", "on a mountain trail", "in the living room",
    "at the office", "in a garden", "near the lake",
)


def make_fixture(seed: int, n: int, ratios: tuple[float, float, float]) -> SplitManifest:
    """Deterministic desk-scale manifest.

    Captions and labels come from a fixed vocabulary (no separator
    collisions, varied modifier triggers). Each record's mem_score is an
    affine function of a hidden concept latent derived from its default
    prompt and synthesis seed; fixture images encode the same latent in
    their pixel statistics, which is what the acceptance harness exploits.
    """
    from .prompt_forge import build_prompt
    from .synthesis import default_seed_for, stub_concept_level

    n_train, n_val, n_test = apportion(n, ratios)
    rng = random.Random(seed)
    records: list[VideoRecord] = []
    for i in range(n):
        vid = f"video{i:05d}"
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        caption = (
            f"a {rng.choice(_ADJECTIVES)} {rng.choice(_SUBJECTS)} is "
            f"{rng.choice(_VERBS)} {rng.choice(_PLACES)}"
        )
        captions = [caption]
        if rng.random() < 0.3:
            captions.append(f"someone is {rng.choice(_VERBS)} {rng.choice(_PLACES)}")
        labels = tuple(rng.choice(_VERBS) for _ in range(rng.choice((0, 1, 1, 2))))
        record = VideoRecord(
            id=vid,
            captions=tuple(captions),
            action_labels=labels,
            mem_score=None,
            split=split,
            frame_count=rng.randint(4, 48),
        )
        level = stub_concept_level(build_prompt(record), default_seed_for(vid))
        records.append(replace(record, mem_score=0.05 + 0.9 * level))
    return SplitManifest(records=tuple(records), source_tag=f"fixture-seed{seed}-n{n}")


def fixture_latents(manifest: SplitManifest) -> dict[str, float]:
    """Recompute each fixture record's hidden concept latent (test oracle).

    Only meaningful for fixture manifests built with the default modifier
    table, style token, and seed policy.
    """
    from .prompt_forge import build_prompt
    from .synthesis import default_seed_for, stub_concept_level

    return {r.id: stub_concept_level(build_prompt(r), default_seed_for(r.id)) for r in manifest.records}
