"""Experiment configuration: one strict JSON file.

Unknown keys are errors at every level (silent typos corrupt experiments).
The config's content hash, computed over everything except out_dir, names
the artifact directory so that stages of the same experiment find each
other and different experiments never collide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .evaluation import RUN_REGISTRY
from .prompt_forge import DEFAULT_STYLE_TOKEN, Modifier, ModifierTable, default_modifier_table
from .regression import TrainConfig
from .synthesis import ImageParams
from .util import canonical_json, sha256_hex

EVAL_SPLITS = ("val", "test")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configs."""


@dataclass(frozen=True)
class FixtureConfig:
    n: int
    ratios: tuple[float, float, float]
    noise: float = 0.05
    genesis_noise: float = 0.05

    def __post_init__(self) -> None:
        if self.n < 0:
            raise ConfigError(f"fixture.n must be >= 0, got {self.n}")
        if len(self.ratios) != 3:
            raise ConfigError(f"fixture.ratios must have 3 entries, got {self.ratios}")
        for name, v in (("noise", self.noise), ("genesis_noise", self.genesis_noise)):
            if not 0.0 <= v <= 0.1:
                raise ConfigError(f"fixture.{name} must lie in [0, 0.1], got {v}")


@dataclass(frozen=True)
class SynthesisEndpoint:
    url: str
    timeout: float = 120.0


@dataclass(frozen=True)
class EmbeddingEndpoint:
    url: str
    extractor_id: str
    dim: int
    timeout: float = 60.0


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: Path
    seed: int
    eval_split: str
    style_token: str
    modifier_table: ModifierTable
    manifest_path: Path | None
    frames_dir: Path | None
    fixture: FixtureConfig | None
    synthesis_backend: SynthesisEndpoint | None  # None selects the stub
    embedding_backend: EmbeddingEndpoint | None  # None selects the toy extractor
    image: ImageParams
    train: TrainConfig
    hidden_width: int
    seed_policy: str
    max_in_flight: int
    runs: tuple[str, ...]
    config_hash: str

    @property
    def artifact_dir(self) -> Path:
        return self.out_dir / self.config_hash


def _check_keys(obj: dict, allowed: set[str], context: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown} (allowed: {sorted(allowed)})")


def _get(obj: dict, key: str, types: type | tuple[type, ...], default: Any, context: str) -> Any:
    if key not in obj:
        if default is _REQUIRED:
            raise ConfigError(f"{context}: missing required key {key!r}")
        return default
    value = obj[key]
    if types is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, types) or isinstance(value, bool) and types is not bool:
        raise ConfigError(f"{context}: key {key!r} has wrong type {type(value).__name__}")
    return value


class _Required:
    pass


_REQUIRED = _Required()


def _parse_modifier_table(obj: dict) -> ModifierTable:
    _check_keys(obj, {"entries", "default_id"}, "modifier_table")
    entries_raw = _get(obj, "entries", list, _REQUIRED, "modifier_table")
    entries = []
    for i, e in enumerate(entries_raw):
        ctx = f"modifier_table.entries[{i}]"
        if not isinstance(e, dict):
            raise ConfigError(f"{ctx}: expected an object")
        _check_keys(e, {"id", "trigger_keywords", "text"}, ctx)
        keywords = _get(e, "trigger_keywords", list, _REQUIRED, ctx)
        entries.append(Modifier(
            id=_get(e, "id", str, _REQUIRED, ctx),
            trigger_keywords=tuple(str(k) for k in keywords),
            text=_get(e, "text", str, _REQUIRED, ctx),
        ))
    if len(entries) != 3:
        raise ConfigError(f"modifier_table: exactly 3 entries required, got {len(entries)}")
    return ModifierTable(
        entries=(entries[0], entries[1], entries[2]),
        default_id=_get(obj, "default_id", str, _REQUIRED, "modifier_table"),
    )


_TOP_KEYS = {
    "out_dir", "seed", "eval_split", "style_token", "modifier_table",
    "manifest", "frames_dir", "fixture", "synthesis_backend",
    "embedding_backend", "image", "train", "seed_policy", "max_in_flight",
    "runs",
}


def parse_config(obj: dict, base_dir: Path) -> ExperimentConfig:
    """Validate a parsed config object; relative paths resolve against the
    config file's directory."""
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    _check_keys(obj, _TOP_KEYS, "config")

    seed = _get(obj, "seed", int, 0, "config")
    eval_split = _get(obj, "eval_split", str, "val", "config")
    if eval_split not in EVAL_SPLITS:
        raise ConfigError(f"config: eval_split must be one of {EVAL_SPLITS}, got {eval_split!r}")

    table_obj = _get(obj, "modifier_table", dict, None, "config")
    table = _parse_modifier_table(table_obj) if table_obj is not None else default_modifier_table()

    manifest = _get(obj, "manifest", str, None, "config")
    frames_dir = _get(obj, "frames_dir", str, None, "config")
    fixture_obj = _get(obj, "fixture", dict, None, "config")
    if (manifest is None) == (fixture_obj is None):
        raise ConfigError("config: exactly one of 'manifest' and 'fixture' must be set")
    fixture = None
    if fixture_obj is not None:
        _check_keys(fixture_obj, {"n", "ratios", "noise", "genesis_noise"}, "fixture")
        ratios_raw = _get(fixture_obj, "ratios", list, _REQUIRED, "fixture")
        if len(ratios_raw) != 3 or not all(isinstance(r, (int, float)) for r in ratios_raw):
            raise ConfigError(f"fixture: ratios must be 3 numbers, got {ratios_raw}")
        fixture = FixtureConfig(
            n=_get(fixture_obj, "n", int, _REQUIRED, "fixture"),
            ratios=(float(ratios_raw[0]), float(ratios_raw[1]), float(ratios_raw[2])),
            noise=_get(fixture_obj, "noise", float, 0.05, "fixture"),
            genesis_noise=_get(fixture_obj, "genesis_noise", float, 0.05, "fixture"),
        )

    manifest_path = None
    frames_path = None
    if manifest is not None:
        if frames_dir is None:
            raise ConfigError("config: 'manifest' requires 'frames_dir' (genesis frame images)")
        manifest_path = (base_dir / manifest).resolve()
        frames_path = (base_dir / frames_dir).resolve()
        if not manifest_path.is_file():
            raise ConfigError(f"config: manifest file not found: {manifest_path}")
        if not frames_path.is_dir():
            raise ConfigError(f"config: frames_dir not found: {frames_path}")
    elif frames_dir is not None:
        raise ConfigError("config: 'frames_dir' only applies with 'manifest' (fixtures render their own frames)")

    synth_obj = _get(obj, "synthesis_backend", (str, dict), "stub", "config")
    if synth_obj == "stub":
        synthesis_backend = None
    elif isinstance(synth_obj, dict):
        _check_keys(synth_obj, {"url", "timeout"}, "synthesis_backend")
        synthesis_backend = SynthesisEndpoint(
            url=_get(synth_obj, "url", str, _REQUIRED, "synthesis_backend"),
            timeout=_get(synth_obj, "timeout", float, 120.0, "synthesis_backend"),
        )
    else:
        raise ConfigError(f"config: synthesis_backend must be \"stub\" or an object, got {synth_obj!r}")

    embed_obj = _get(obj, "embedding_backend", (str, dict), "toy", "config")
    if embed_obj == "toy":
        embedding_backend = None
    elif isinstance(embed_obj, dict):
        _check_keys(embed_obj, {"url", "extractor_id", "dim", "timeout"}, "embedding_backend")
        embedding_backend = EmbeddingEndpoint(
            url=_get(embed_obj, "url", str, _REQUIRED, "embedding_backend"),
            extractor_id=_get(embed_obj, "extractor_id", str, _REQUIRED, "embedding_backend"),
            dim=_get(embed_obj, "dim", int, _REQUIRED, "embedding_backend"),
            timeout=_get(embed_obj, "timeout", float, 60.0, "embedding_backend"),
        )
    else:
        raise ConfigError(f"config: embedding_backend must be \"toy\" or an object, got {embed_obj!r}")

    image_obj = _get(obj, "image", dict, None, "config") or {}
    _check_keys(image_obj, {"width", "height", "steps", "guidance_scale"}, "image")
    image = ImageParams(
        steps=_get(image_obj, "steps", int, 50, "image"),
        guidance_scale=_get(image_obj, "guidance_scale", float, 7.5, "image"),
        width=_get(image_obj, "width", int, 512, "image"),
        height=_get(image_obj, "height", int, 512, "image"),
    )

    train_obj = _get(obj, "train", dict, None, "config") or {}
    _check_keys(train_obj, {"epochs", "max_lr", "weight_decay", "batch_size", "hidden_width", "seed"}, "train")
    train = TrainConfig(
        epochs=_get(train_obj, "epochs", int, 50, "train"),
        max_lr=_get(train_obj, "max_lr", float, 1e-3, "train"),
        weight_decay=_get(train_obj, "weight_decay", float, 1e-2, "train"),
        batch_size=_get(train_obj, "batch_size", int, 32, "train"),
        seed=_get(train_obj, "seed", int, seed, "train"),
    )
    hidden_width = _get(train_obj, "hidden_width", int, 64, "train")
    if hidden_width < 1:
        raise ConfigError(f"train: hidden_width must be >= 1, got {hidden_width}")

    seed_policy = _get(obj, "seed_policy", str, "hash", "config")
    if seed_policy != "hash" and not _parse_fixed_policy(seed_policy):
        raise ConfigError(f"config: seed_policy must be \"hash\" or \"fixed:<int>\", got {seed_policy!r}")

    max_in_flight = _get(obj, "max_in_flight", int, 4, "config")
    if max_in_flight < 1:
        raise ConfigError(f"config: max_in_flight must be >= 1, got {max_in_flight}")

    runs_raw = _get(obj, "runs", list, None, "config")
    if runs_raw is None:
        runs = tuple(RUN_REGISTRY)
    else:
        if not runs_raw:
            raise ConfigError("config: run list must not be empty")
        unknown = [r for r in runs_raw if r not in RUN_REGISTRY]
        if unknown:
            raise ConfigError(f"config: unknown runs {unknown}; known runs: {sorted(RUN_REGISTRY)}")
        runs = tuple(str(r) for r in runs_raw)

    out_dir = Path(_get(obj, "out_dir", str, "runs", "config"))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir

    return ExperimentConfig(
        out_dir=out_dir,
        seed=seed,
        eval_split=eval_split,
        style_token=_get(obj, "style_token", str, DEFAULT_STYLE_TOKEN, "config"),
        modifier_table=table,
        manifest_path=manifest_path,
        frames_dir=frames_path,
        fixture=fixture,
        synthesis_backend=synthesis_backend,
        embedding_backend=embedding_backend,
        image=image,
        train=train,
        hidden_width=hidden_width,
        seed_policy=seed_policy,
        max_in_flight=max_in_flight,
        runs=runs,
        config_hash=config_hash(obj),
    )


def _parse_fixed_policy(policy: str) -> bool:
    if not policy.startswith("fixed:"):
        return False
    try:
        int(policy.split(":", 1)[1])
    except ValueError:
        return False
    return True


def seed_for_video(config: ExperimentConfig, video_id: str) -> int:
    from .synthesis import default_seed_for

    if config.seed_policy == "hash":
        return default_seed_for(video_id)
    return int(config.seed_policy.split(":", 1)[1])


def config_hash(obj: dict) -> str:
    """12-hex-digit content hash of the config, excluding out_dir: moving the
    output tree must not orphan existing artifacts."""
    hashed = {k: v for k, v in obj.items() if k != "out_dir"}
    return sha256_hex(canonical_json(hashed).encode("utf-8"))[:12]


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read and validate a config file. `overrides` replaces top-level keys
    before validation (how CLI flags land); everything except out_dir
    participates in the config hash."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{p}: config root must be an object")
    for key, value in (overrides or {}).items():
        obj[key] = value
    return parse_config(obj, p.parent.resolve())
