"""Build and parse the text prompts fed to the image-synthesis backend.

A prompt is rendered as comma-separated segments: the video's action labels
(if any), its first caption, one of three configured content modifiers, and
a trailing style token. The grammar is intentionally trivial so prompts
round-trip exactly; fields containing the separator are rejected at build
time instead of escaped.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

if TYPE_CHECKING:
    from .dataset import VideoRecord

SEPARATOR = ", "
DEFAULT_STYLE_TOKEN = "mem10kstyle"


class PromptError(ValueError):
    """Raised when a prompt cannot be built or parsed."""


@dataclass(frozen=True)
class Modifier:
    """One content modifier: matched by trigger keywords, rendered as text."""

    id: str
    trigger_keywords: tuple[str, ...]
    text: str


@dataclass(frozen=True)
class ModifierTable:
    """Exactly three content modifiers plus the fallback choice."""

    entries: tuple[Modifier, Modifier, Modifier]
    default_id: str

    def __post_init__(self) -> None:
        if len(self.entries) != 3:
            raise PromptError(f"modifier table needs exactly 3 entries, got {len(self.entries)}")
        ids = [m.id for m in self.entries]
        if len(set(ids)) != 3:
            raise PromptError(f"modifier ids must be unique, got {ids}")
        for m in self.entries:
            if not m.text:
                raise PromptError(f"modifier {m.id!r} has empty text")
        if self.default_id not in ids:
            raise PromptError(f"default modifier {self.default_id!r} not in table {ids}")

    def by_id(self, modifier_id: str) -> Modifier:
        for m in self.entries:
            if m.id == modifier_id:
                return m
        raise PromptError(f"unknown modifier id {modifier_id!r}")

    def by_text(self, text: str) -> Modifier | None:
        for m in self.entries:
            if m.text == text:
                return m
        return None


def default_modifier_table() -> ModifierTable:
    """Shipped modifier configuration; override via the experiment config."""
    return ModifierTable(
        entries=(
            Modifier(
                id="indoor",
                trigger_keywords=(
                    "kitchen", "room", "indoor", "indoors", "inside", "house",
                    "office", "table", "bed", "gym", "stage", "hall",
                ),
                text="a candid indoor photograph",
            ),
            Modifier(
                id="outdoor",
                trigger_keywords=(
                    "park", "street", "outdoor", "outdoors", "outside", "field",
                    "beach", "mountain", "garden", "road", "yard", "lake", "forest",
                ),
                text="a candid outdoor photograph",
            ),
            Modifier(
                id="object",
                trigger_keywords=(
                    "object", "closeup", "close-up", "toy", "phone", "cup",
                    "plate", "tool", "food", "camera",
                ),
                text="a close-up photograph of an object",
            ),
        ),
        default_id="outdoor",
    )


@dataclass(frozen=True)
class PromptParts:
    """Structured view of a prompt; ``render`` produces the wire text."""

    action_labels: tuple[str, ...]
    caption: str
    modifier_id: str
    modifier_text: str
    style_token: str

    def render(self) -> str:
        return render_prompt(self.action_labels, self.caption, self.modifier_text, self.style_token)


def _check_field(name: str, value: str) -> None:
    if not value:
        raise PromptError(f"prompt field {name!r} is empty")
    if SEPARATOR in value:
        raise PromptError(f"prompt field {name!r} contains the segment separator {SEPARATOR!r}: {value!r}")


def _check_style_token(style_token: str) -> None:
    if not style_token:
        raise PromptError("style token is empty")
    if "," in style_token or any(c.isspace() for c in style_token):
        raise PromptError(f"style token contains separator characters: {style_token!r}")


def select_modifier(caption: str, action_labels: Sequence[str], table: ModifierTable) -> str:
    """Pick the first modifier (in table order) whose trigger appears as a
    whole word, case-insensitively, in the caption or any action label.
    Falls back to the table's default."""
    haystacks = [caption, *action_labels]
    for entry in table.entries:
        for keyword in entry.trigger_keywords:
            pattern = re.compile(r"\b" + re.escape(keyword) + r"\b", re.IGNORECASE)
            if any(pattern.search(h) for h in haystacks):
                return entry.id
    return table.default_id


def render_prompt(
    action_labels: Sequence[str],
    caption: str,
    modifier_text: str,
    style_token: str = DEFAULT_STYLE_TOKEN,
) -> str:
    """Join ``labels..., caption, modifier, style_token`` with ", ".

    The leading label segment is omitted when there are no labels.
    """
    for i, label in enumerate(action_labels):
        _check_field(f"action_labels[{i}]", label)
    _check_field("caption", caption)
    _check_field("modifier_text", modifier_text)
    _check_style_token(style_token)
    segments = [*action_labels, caption, modifier_text, style_token]
    return SEPARATOR.join(segments)


def build_prompt(
    record: "VideoRecord",
    table: ModifierTable | None = None,
    style_token: str = DEFAULT_STYLE_TOKEN,
) -> str:
    """Render the prompt for one video record (first caption is canonical)."""
    table = table if table is not None else default_modifier_table()
    caption = record.captions[0]
    modifier = table.by_id(select_modifier(caption, record.action_labels, table))
    return render_prompt(record.action_labels, caption, modifier.text, style_token)


def parse_prompt(
    text: str,
    table: ModifierTable | None = None,
    style_token: str = DEFAULT_STYLE_TOKEN,
) -> PromptParts:
    """Invert ``build_prompt``. Only valid on prompts produced with the same
    table and style token (fields must not contain the separator)."""
    table = table if table is not None else default_modifier_table()
    _check_style_token(style_token)
    segments = text.split(SEPARATOR)
    if len(segments) < 3 or segments[-1] != style_token:
        raise PromptError(f"prompt does not end with style token {style_token!r}: {text!r}")
    modifier = table.by_text(segments[-2])
    if modifier is None:
        raise PromptError(f"no configured modifier text in penultimate segment: {segments[-2]!r}")
    caption = segments[-3]
    if not caption:
        raise PromptError(f"empty caption segment in prompt: {text!r}")
    return PromptParts(
        action_labels=tuple(segments[:-3]),
        caption=caption,
        modifier_id=modifier.id,
        modifier_text=modifier.text,
        style_token=style_token,
    )


@dataclass(frozen=True)
class PromptEntry:
    """One line of the prompt manifest handed to the synthesis stage."""

    video_id: str
    prompt: str
    modifier_id: str
    seed: int


def write_prompt_manifest(entries: Iterable[PromptEntry], path: str | Path) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(
                {"id": e.video_id, "prompt": e.prompt, "modifier_id": e.modifier_id, "seed": e.seed},
                ensure_ascii=False,
            ))
            f.write("\n")


def read_prompt_manifest(path: str | Path) -> list[PromptEntry]:
    entries: list[PromptEntry] = []
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entries.append(PromptEntry(
                    video_id=obj["id"],
                    prompt=obj["prompt"],
                    modifier_id=obj["modifier_id"],
                    seed=int(obj["seed"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PromptError(f"{path}: malformed prompt manifest line {lineno}: {exc}") from exc
    return entries
