"""Staged experiment pipeline.

Stages communicate only through files under out_dir/<config-hash>/ so a
multi-hour real run is resumable and auditable, and a fixture run of the
same shape finishes in seconds. Every stage rereads prior artifacts from
disk; a missing prerequisite names the stage that produces it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, seed_for_video
from .dataset import SplitManifest, fixture_latents, load_manifest, make_fixture, save_manifest
from .evaluation import RUN_REGISTRY, FeatureSource, RunResult, RunSpec, emit_results_table, evaluate_run
from .features import (
    EmbeddingMatrix,
    Extractor,
    HttpExtractor,
    ToyExtractor,
    extract_many,
    load_matrix,
    save_matrix,
    select_frames,
)
from .prompt_forge import PromptEntry, build_prompt, parse_prompt, write_prompt_manifest
from .regression import (
    fit_bayesian_ridge,
    fit_head,
    load_bayesian_ridge,
    load_head,
    predict_bayesian_ridge,
    predict_head,
    save_bayesian_ridge,
    save_head,
)
from .synthesis import BatchResult, HttpBackend, StubBackend, batch_synthesize, render_genesis_frame

FRAME_NAME = "{video_id}_frame{index:04d}.ppm"


class StageError(RuntimeError):
    """A stage cannot run; the message names the stage to run first."""


def _missing(what: str, stage: str) -> StageError:
    return StageError(f"missing {what}: run `{stage}` first")


@dataclass(frozen=True)
class ArtifactPaths:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "dataset" / "manifest.jsonl"

    @property
    def latents(self) -> Path:
        return self.root / "dataset" / "latents.json"

    @property
    def frames_dir(self) -> Path:
        return self.root / "frames"

    @property
    def prompts(self) -> Path:
        return self.root / "terraform" / "prompts.jsonl"

    @property
    def images_dir(self) -> Path:
        return self.root / "terraform" / "images"

    @property
    def image_records(self) -> Path:
        return self.root / "terraform" / "images.jsonl"

    @property
    def failures(self) -> Path:
        return self.root / "terraform" / "failures.jsonl"

    def matrix(self, source_key: str, split: str) -> Path:
        return self.root / "extract" / f"{source_key}_{split}.emb"

    def model(self, spec: RunSpec) -> Path:
        suffix = "brr1" if spec.model_kind == "bayesian_ridge" else "head"
        return self.root / "train" / f"{spec.run_name}.{suffix}"

    def predictions(self, run_name: str) -> Path:
        return self.root / "predict" / f"{run_name}.predictions.jsonl"

    def result(self, run_name: str) -> Path:
        return self.root / "evaluate" / f"{run_name}.result.json"

    @property
    def report_txt(self) -> Path:
        return self.root / "report" / "report.txt"

    @property
    def report_json(self) -> Path:
        return self.root / "report" / "report.json"


def artifact_paths(config: ExperimentConfig) -> ArtifactPaths:
    return ArtifactPaths(root=config.artifact_dir)


def _load_dataset(config: ExperimentConfig, paths: ArtifactPaths) -> SplitManifest:
    if config.fixture is not None:
        if not paths.manifest.is_file():
            raise _missing("fixture manifest", "fixture")
        return load_manifest(paths.manifest)
    assert config.manifest_path is not None
    return load_manifest(config.manifest_path)


def _genesis_frames_dir(config: ExperimentConfig, paths: ArtifactPaths) -> Path:
    if config.fixture is not None:
        if not paths.frames_dir.is_dir():
            raise _missing("fixture genesis frames", "fixture")
        return paths.frames_dir
    assert config.frames_dir is not None
    return config.frames_dir


def _synthesis_backend(config: ExperimentConfig):
    if config.synthesis_backend is None:
        noise = config.fixture.noise if config.fixture is not None else 0.05
        return StubBackend(noise=noise)
    return HttpBackend(url=config.synthesis_backend.url, timeout=config.synthesis_backend.timeout)


def _extractor(config: ExperimentConfig) -> Extractor:
    if config.embedding_backend is None:
        return ToyExtractor()
    e = config.embedding_backend
    return HttpExtractor(url=e.url, extractor_id=e.extractor_id, dim=e.dim, timeout=e.timeout)


# --- stages ------------------------------------------------------------------

def cmd_fixture(config: ExperimentConfig) -> SplitManifest:
    """Generate the fixture manifest, its latent oracle, and genesis frames."""
    if config.fixture is None:
        raise StageError("config has no fixture block; the fixture stage only applies to fixture experiments")
    paths = artifact_paths(config)
    manifest = make_fixture(config.seed, config.fixture.n, config.fixture.ratios)
    save_manifest(manifest, paths.manifest)
    latents = fixture_latents(manifest)
    paths.latents.parent.mkdir(parents=True, exist_ok=True)
    paths.latents.write_text(json.dumps(latents, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths.frames_dir.mkdir(parents=True, exist_ok=True)
    for record in manifest.records:
        level = latents[record.id]
        for index in sorted(set(select_frames(record.frame_count))):
            frame = render_genesis_frame(
                record.id,
                index,
                level,
                config.image.width,
                config.image.height,
                noise=config.fixture.genesis_noise,
            )
            name = FRAME_NAME.format(video_id=record.id, index=index)
            (paths.frames_dir / name).write_bytes(frame)
    return manifest


def cmd_terraform(config: ExperimentConfig) -> BatchResult:
    """Build one prompt per record and synthesize the surrogate images."""
    paths = artifact_paths(config)
    manifest = _load_dataset(config, paths)
    entries = []
    for r in manifest.records:
        prompt = build_prompt(r, config.modifier_table, config.style_token)
        parts = parse_prompt(prompt, config.modifier_table, config.style_token)
        entries.append(PromptEntry(
            video_id=r.id, prompt=prompt, modifier_id=parts.modifier_id,
            seed=seed_for_video(config, r.id),
        ))
    write_prompt_manifest(entries, paths.prompts)
    result = batch_synthesize(
        entries,
        _synthesis_backend(config),
        paths.images_dir,
        params=config.image,
        max_in_flight=config.max_in_flight,
    )
    with paths.image_records.open("w", encoding="utf-8") as f:
        for rec in result.records:
            f.write(json.dumps({
                "id": rec.video_id,
                "digest": rec.image_bytes_digest,
                "path": str(Path(rec.storage_path).relative_to(paths.root)),
                "backend_id": rec.backend_id,
                "seed": rec.request.seed,
            }, ensure_ascii=False))
            f.write("\n")
    with paths.failures.open("w", encoding="utf-8") as f:
        for fail in result.failures:
            f.write(json.dumps({"id": fail.video_id, "error": fail.message}, ensure_ascii=False))
            f.write("\n")
    return result


def _needed_sources(config: ExperimentConfig) -> list[FeatureSource]:
    sources: dict[str, FeatureSource] = {}
    for name in config.runs:
        spec = RUN_REGISTRY[name]
        sources[spec.train_features.key] = spec.train_features
        sources[spec.test_features.key] = spec.test_features
    return [sources[k] for k in sorted(sources)]


def _genesis_frame_bytes(frames_dir: Path, video_id: str, index: int) -> bytes:
    path = frames_dir / FRAME_NAME.format(video_id=video_id, index=index)
    if path.is_file():
        return path.read_bytes()
    matches = sorted(frames_dir.glob(f"{video_id}_frame{index:04d}.*"))
    if not matches:
        raise StageError(f"genesis frame {index} of {video_id!r} not found under {frames_dir}")
    return matches[0].read_bytes()


def cmd_extract(config: ExperimentConfig, domain: str = "both") -> list[Path]:
    """Extract embedding matrices for every (source, split) the run list
    needs, restricted to one domain when requested."""
    if domain not in ("genesis", "dream", "both"):
        raise StageError(f"unknown extract domain {domain!r} (use genesis, dream, or both)")
    paths = artifact_paths(config)
    manifest = _load_dataset(config, paths)
    sources = [s for s in _needed_sources(config) if domain in ("both", s.domain)]
    if not sources:
        raise StageError(f"nothing to extract: no configured run uses {domain} features")
    extractor = _extractor(config)
    splits = dict.fromkeys(("train", config.eval_split))
    written: list[Path] = []
    for source in sources:
        for split in splits:
            records = manifest.by_split(split)
            if not records:
                raise StageError(f"nothing to extract: split {split!r} has no records")
            if source.domain == "dream":
                images_dir = paths.images_dir
                if not images_dir.is_dir():
                    raise _missing("surrogate images", "terraform")
                items = []
                for r in records:
                    img = images_dir / f"{r.id}.ppm"
                    if not img.is_file():
                        raise _missing(f"surrogate image for {r.id!r}", "terraform")
                    items.append((r.id, [img.read_bytes()]))
            else:
                frames_dir = _genesis_frames_dir(config, paths)
                items = []
                for r in records:
                    first, middle, last = select_frames(r.frame_count)
                    indices = [middle] if source.frames == "middle" else [first, middle, last]
                    items.append((r.id, [_genesis_frame_bytes(frames_dir, r.id, i) for i in indices]))
            matrix = extract_many(items, extractor, max_workers=config.max_in_flight)
            out = paths.matrix(source.key, split)
            save_matrix(matrix, out)
            written.append(out)
    return written


def _scores_for(manifest: SplitManifest, ids: tuple[str, ...], split: str, purpose: str) -> np.ndarray:
    by_id = {r.id: r for r in manifest.by_split(split)}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise StageError(f"{purpose}: ids {missing[:5]} not in split {split!r} of the manifest")
    absent = [i for i in ids if by_id[i].mem_score is None]
    if absent:
        raise StageError(f"{purpose}: {len(absent)} records have no mem_score (e.g. {absent[:5]})")
    return np.array([by_id[i].mem_score for i in ids], dtype=np.float64)


def _load_matrix_for(paths: ArtifactPaths, source_key: str, split: str) -> EmbeddingMatrix:
    path = paths.matrix(source_key, split)
    if not path.is_file():
        raise _missing(f"embedding matrix {path.name}", "extract")
    return load_matrix(path)


def cmd_train(config: ExperimentConfig) -> list[Path]:
    """Fit one model per configured run on its train-side features."""
    paths = artifact_paths(config)
    manifest = _load_dataset(config, paths)
    written: list[Path] = []
    for name in config.runs:
        spec = RUN_REGISTRY[name]
        matrix = _load_matrix_for(paths, spec.train_features.key, "train")
        y = _scores_for(manifest, matrix.ids, "train", f"training {name}")
        out = paths.model(spec)
        if spec.model_kind == "bayesian_ridge":
            model = fit_bayesian_ridge(matrix.data, y)
            save_bayesian_ridge(model, out)
        else:
            head, _ = fit_head(matrix.data, y, config.train, hidden_width=config.hidden_width)
            save_head(head, out)
        written.append(out)
    return written


def cmd_predict(config: ExperimentConfig) -> list[Path]:
    """Apply each trained model to its test-side eval-split features.

    Predictions are clamped to [0, 1] here, at reporting time, for both
    model kinds; scores outside the range are impossible downstream.
    """
    paths = artifact_paths(config)
    written: list[Path] = []
    for name in config.runs:
        spec = RUN_REGISTRY[name]
        model_path = paths.model(spec)
        if not model_path.is_file():
            raise _missing(f"model for run {name}", "train")
        matrix = _load_matrix_for(paths, spec.test_features.key, config.eval_split)
        if spec.model_kind == "bayesian_ridge":
            mean, _ = predict_bayesian_ridge(load_bayesian_ridge(model_path), matrix.data)
            preds = np.clip(mean, 0.0, 1.0)
        else:
            preds = predict_head(load_head(model_path), matrix.data)
        out = paths.predictions(name)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", encoding="utf-8") as f:
            for vid, p in zip(matrix.ids, preds):
                f.write(json.dumps({"id": vid, "prediction": float(p)}))
                f.write("\n")
        written.append(out)
    return written


def _read_predictions(path: Path) -> dict[str, float]:
    preds: dict[str, float] = {}
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                obj = json.loads(line)
                preds[obj["id"]] = float(obj["prediction"])
    return preds


def cmd_evaluate(config: ExperimentConfig) -> list[Path]:
    """Score each run's predictions against eval-split ground truth."""
    paths = artifact_paths(config)
    manifest = _load_dataset(config, paths)
    truth = {r.id: r.mem_score for r in manifest.by_split(config.eval_split)}
    written: list[Path] = []
    for name in config.runs:
        pred_path = paths.predictions(name)
        if not pred_path.is_file():
            raise _missing(f"predictions for run {name}", "predict")
        result = evaluate_run(RUN_REGISTRY[name], _read_predictions(pred_path), truth)
        out = paths.result(name)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(out)
    return written


def cmd_report(config: ExperimentConfig) -> tuple[Path, Path, str]:
    """Render the grouped results table and the structured per-run report."""
    paths = artifact_paths(config)
    results: list[RunResult] = []
    for name in config.runs:
        path = paths.result(name)
        if not path.is_file():
            raise _missing(f"result for run {name}", "evaluate")
        results.append(RunResult.from_json(json.loads(path.read_text(encoding="utf-8"))))
    table = emit_results_table(results)
    paths.report_txt.parent.mkdir(parents=True, exist_ok=True)
    paths.report_txt.write_text(table, encoding="utf-8")
    report = {
        "config_hash": config.config_hash,
        "eval_split": config.eval_split,
        "runs": [r.to_json() for r in sorted(results, key=lambda r: r.run_name)],
    }
    paths.report_json.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths.report_txt, paths.report_json, table


def run_all(config: ExperimentConfig) -> tuple[BatchResult, str]:
    """Run every stage in order; returns the synthesis outcome and the table."""
    if config.fixture is not None:
        cmd_fixture(config)
    batch = cmd_terraform(config)
    if batch.failures:
        return batch, ""
    cmd_extract(config)
    cmd_train(config)
    cmd_predict(config)
    cmd_evaluate(config)
    _, _, table = cmd_report(config)
    return batch, table


def read_latents(config: ExperimentConfig) -> dict[str, float]:
    """The fixture's hidden concept latents (test oracle)."""
    paths = artifact_paths(config)
    if not paths.latents.is_file():
        raise _missing("fixture latents", "fixture")
    return {k: float(v) for k, v in json.loads(paths.latents.read_text(encoding="utf-8")).items()}
