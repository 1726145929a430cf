"""Stage functions wiring the modules together: prepare, render, train, sweep,
evaluate and predict. Every file written here goes through a temp-and-rename.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio_io, dsp, ensemble, metrics, models, preprocess, render
from .config import RunConfig, worker_count
from .io_util import atomic_path, atomic_write_text
from .manifest import (
    Label,
    Manifest,
    ManifestRecord,
    assign_splits,
    build_manifest,
    filename_label_rule,
    folder_label_rule,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
CLIP_DIR = "clips"
IMAGE_DIR = "images"
SPEC_FILE = "spectrogram.npy"
CENT_FILE = "centroid.npy"


def _stage_file(directory: Path, stage: str) -> Path:
    return directory / f".stage-{stage}.json"


def _stage_key(directory: Path, stage: str) -> str | None:
    p = _stage_file(directory, stage)
    if p.exists():
        return json.loads(p.read_text())["key"]
    return None


def _mark_stage(directory: Path, stage: str, key: str) -> None:
    atomic_write_text(_stage_file(directory, stage), json.dumps({"stage": stage, "key": key}) + "\n")


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
        h.update(b"\0")
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def stft_params(cfg: RunConfig) -> dsp.StftParams:
    return dsp.StftParams(cfg.dsp.fft_size, cfg.dsp.hop)


def clip_images(samples: np.ndarray, cfg: RunConfig, clip_id: str = ""):
    """Spectrogram image and centroid graph for one clip."""
    rate = cfg.audio.sample_rate
    params = stft_params(cfg)
    filtered = dsp.lowpass(samples, cfg.dsp.cutoff_hz, rate, cfg.dsp.filter_order)
    spec = dsp.stft_magnitude(filtered, params, rate)
    spec_img = render.render_spectrogram(
        spec, cfg.render.image_size, cfg.render.max_bin, cfg.render.db_range, clip_id
    )
    if cfg.dsp.filter_centroid:
        wave, cent_spec = filtered, spec
    else:
        wave, cent_spec = np.asarray(samples, dtype=np.float64), dsp.stft_magnitude(samples, params, rate)
    cent = dsp.spectral_centroid(cent_spec)
    cent_img = render.render_centroid_graph(wave, cent, params, cfg.render.image_size, clip_id)
    return spec_img, cent_img


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def prepare(data_dir, out_dir, cfg: RunConfig = RunConfig(), force: bool = False) -> Manifest:
    """Discover, decode, segment, augment and split; writes the manifest and clip cache."""
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    rule = folder_label_rule if cfg.split.label_rule == "folder" else filename_label_rule
    found = build_manifest([data_dir], rule)

    h = hashlib.sha256()
    for rec in found:
        h.update(rec.source_path.encode())
        h.update(Path(rec.source_path).read_bytes())
    key = _hash(cfg.digest("seed", "audio", "preprocess", "split"), h.hexdigest())
    manifest_path = out_dir / MANIFEST_NAME
    if not force and manifest_path.exists() and _stage_key(out_dir, "prepare") == key:
        log.info("prepare: cache hit, reusing %s", manifest_path)
        return Manifest.load(manifest_path)

    rate = cfg.audio.sample_rate
    clip_len = cfg.preprocess.clip_seconds * rate
    records = []
    for rec in found:
        raw = audio_io.load(rec.source_path, rate)
        rel = Path(rec.source_path).relative_to(data_dir).as_posix()
        for clip in preprocess.segment(raw, rec.label, rec.clip_id, clip_len, rate):
            versions = preprocess.augment(
                clip, cfg.seed, cfg.preprocess.n_versions, cfg.preprocess.noise_std
            )
            for v in versions:
                clip_id = preprocess.version_clip_id(clip.clip_id, v.augmentation_index)
                preprocess.save_clip(v.samples, out_dir / CLIP_DIR / f"{clip_id}.f32")
                records.append(
                    ManifestRecord(
                        clip_id=clip_id,
                        source_path=rel,
                        label=rec.label,
                        augmentation_index=v.augmentation_index,
                        segment_index=v.segment_index,
                    )
                )
    manifest = assign_splits(
        Manifest(records), cfg.split.val_fraction, cfg.seed, cfg.split.drop_augmented_validation
    )
    manifest.save(manifest_path)
    _mark_stage(out_dir, "prepare", key)
    return manifest


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def default_image_dir(manifest_path) -> Path:
    return Path(manifest_path).parent / IMAGE_DIR


def render_manifest(manifest_path, out_dir=None, cfg: RunConfig = RunConfig(),
                    force: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Render both modalities for every manifest clip into ``[N, S, S]`` arrays."""
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir) if out_dir else default_image_dir(manifest_path)
    clip_dir = manifest_path.parent / CLIP_DIR
    manifest = Manifest.load(manifest_path)
    key = _hash(
        cfg.digest("audio", "dsp", "render"),
        hashlib.sha256(manifest_path.read_bytes()).hexdigest(),
        _stage_key(manifest_path.parent, "prepare"),
    )
    spec_path, cent_path = out_dir / SPEC_FILE, out_dir / CENT_FILE
    if not force and spec_path.exists() and cent_path.exists() and _stage_key(out_dir, "render") == key:
        log.info("render: cache hit in %s", out_dir)
        return np.load(spec_path), np.load(cent_path)

    def work(rec: ManifestRecord):
        samples = preprocess.load_clip(clip_dir / f"{rec.clip_id}.f32")
        return clip_images(samples, cfg, rec.clip_id)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        pairs = list(pool.map(work, manifest))
    size = cfg.render.image_size
    specs = np.stack([p[0].pixels for p in pairs]) if pairs else np.zeros((0, size, size), np.float32)
    cents = np.stack([p[1].pixels for p in pairs]) if pairs else np.zeros((0, size, size), np.float32)
    for arr, path in ((specs, spec_path), (cents, cent_path)):
        with atomic_path(path) as tmp:
            with open(tmp, "wb") as fh:
                np.save(fh, arr)
    atomic_write_text(out_dir / "clip_ids.txt", "".join(r.clip_id + "\n" for r in manifest))
    if cfg.render.export_pgm:
        from .io_util import atomic_write_bytes

        for s_img, c_img in pairs:
            atomic_write_bytes(out_dir / "pgm" / s_img.filename(), s_img.to_pgm())
            atomic_write_bytes(out_dir / "pgm" / c_img.filename(), c_img.to_pgm())
    _mark_stage(out_dir, "render", key)
    return specs, cents


def load_images(images_dir, manifest: Manifest) -> tuple[np.ndarray, np.ndarray]:
    images_dir = Path(images_dir)
    ids = (images_dir / "clip_ids.txt").read_text().split("\n")[:-1]
    if ids != [r.clip_id for r in manifest]:
        raise ValueError(f"images in {images_dir} do not match the manifest; re-run render")
    return np.load(images_dir / SPEC_FILE), np.load(images_dir / CENT_FILE)


# ---------------------------------------------------------------------------
# train / sweep / evaluate
# ---------------------------------------------------------------------------

MODALITY_OF = {"vit": 0, "cnn": 1}  # index into (spectrogram, centroid)


def history_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.stem + ".history.csv")


def build(kind: str, cfg: RunConfig) -> models.Model:
    return models.build_model(kind, cfg.cnn, cfg.vit, cfg.seed)


def train_expert(kind: str, manifest_path, ckpt, cfg: RunConfig = RunConfig(),
                 images_dir=None) -> models.TrainResult:
    manifest = Manifest.load(manifest_path)
    images = load_images(images_dir or default_image_dir(manifest_path), manifest)[MODALITY_OF[kind]]
    model = build(kind, cfg)
    result = models.train(model, images, manifest, cfg.train_config())
    model.save(ckpt)
    atomic_write_text(history_path(ckpt), result.history_csv())
    return result


def _load_expert(kind: str, ckpt, cfg: RunConfig) -> models.Model:
    model = build(kind, cfg)
    model.load(ckpt)
    return model


def validation_probs(vit_ckpt, cnn_ckpt, manifest: Manifest, images, cfg: RunConfig):
    spec_imgs, cent_imgs = images
    val = np.array([r.split.value == "validation" for r in manifest], dtype=bool)
    if not val.any():
        raise ensemble.EmptyValidation("manifest has no validation records")
    vit = _load_expert("vit", vit_ckpt, cfg)
    cnn = _load_expert("cnn", cnn_ckpt, cfg)
    p_vit = models.predict_proba(vit, spec_imgs[val])
    p_cnn = models.predict_proba(cnn, cent_imgs[val])
    return p_vit, p_cnn, manifest.labels()[val]


@dataclass
class SweepOutputs:
    result: ensemble.SweepResult
    summary: dict


def run_sweep(vit_ckpt, cnn_ckpt, manifest_path, out_dir=None, cfg: RunConfig = RunConfig(),
              images_dir=None) -> SweepOutputs:
    manifest = Manifest.load(manifest_path)
    out_dir = Path(out_dir) if out_dir else Path(manifest_path).parent
    images = load_images(images_dir or default_image_dir(manifest_path), manifest)
    p_vit, p_cnn, y = validation_probs(vit_ckpt, cnn_ckpt, manifest, images, cfg)
    result = ensemble.sweep(p_vit, p_cnn, y, cfg.ensemble.metric)
    acc_vit = result.table[-1].accuracy
    acc_cnn = result.table[0].accuracy
    summary = {
        "k": result.best.k,
        "w_vit": result.best.w_vit,
        "w_cnn": result.best.w_cnn,
        "metric": result.metric,
        "val_accuracy": {"ensemble": result.best_accuracy, "vit": acc_vit, "cnn": acc_cnn},
        "vit_checkpoint": str(vit_ckpt),
        "cnn_checkpoint": str(cnn_ckpt),
    }
    atomic_write_text(out_dir / "sweep.csv", result.to_csv())
    atomic_write_text(out_dir / "weights.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return SweepOutputs(result, summary)


def load_weights(path) -> tuple[ensemble.EnsembleWeights, dict]:
    summary = json.loads(Path(path).read_text())
    return ensemble.EnsembleWeights(int(summary["k"])), summary


def evaluate(weights_path, manifest_path, out_dir=None, cfg: RunConfig = RunConfig(),
             images_dir=None, vit_ckpt=None, cnn_ckpt=None) -> metrics.MetricReport:
    weights, summary = load_weights(weights_path)
    manifest = Manifest.load(manifest_path)
    out_dir = Path(out_dir) if out_dir else Path(manifest_path).parent
    images = load_images(images_dir or default_image_dir(manifest_path), manifest)
    p_vit, p_cnn, y = validation_probs(
        vit_ckpt or summary["vit_checkpoint"], cnn_ckpt or summary["cnn_checkpoint"], manifest, images, cfg
    )
    pred = ensemble.classify(p_vit, p_cnn, weights)
    rep = metrics.report(metrics.confusion(y, pred))
    atomic_write_text(out_dir / "report.csv", rep.to_csv())
    atomic_write_text(out_dir / "confusion.csv", rep.confusion.to_csv())
    atomic_write_text(out_dir / "report.md", rep.to_markdown())
    atomic_write_text(out_dir / "report.txt", rep.to_table())
    return rep


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


@dataclass
class ClipVerdict:
    segment_index: int
    label: Label
    probs: np.ndarray


@dataclass
class RecordingVerdict:
    clips: list[ClipVerdict]
    label: Label


def recording_vote(clips: list[ClipVerdict]) -> Label:
    """Majority vote; ties go to the label with the highest mean fused probability."""
    votes = Counter(c.label for c in clips)
    top = max(votes.values())
    tied = [lab for lab in Label if votes.get(lab, 0) == top]
    if len(tied) == 1:
        return tied[0]
    mean = np.mean([c.probs for c in clips], axis=0)
    return max(tied, key=lambda lab: (mean[int(lab)], -int(lab)))


def predict_file(wav, weights_path, vit_ckpt, cnn_ckpt, cfg: RunConfig = RunConfig()) -> RecordingVerdict:
    weights, _ = load_weights(weights_path)
    vit = _load_expert("vit", vit_ckpt, cfg)
    cnn = _load_expert("cnn", cnn_ckpt, cfg)
    rate = cfg.audio.sample_rate
    rec = audio_io.load(wav, rate)
    clips = preprocess.segment(rec, Label.NORMAL, Path(wav).stem,
                               cfg.preprocess.clip_seconds * rate, rate)
    verdicts = []
    for clip in clips:
        spec_img, cent_img = clip_images(clip.samples, cfg, clip.clip_id)
        fused = ensemble.fuse(
            models.predict_proba(vit, spec_img.pixels), models.predict_proba(cnn, cent_img.pixels), weights
        )
        verdicts.append(ClipVerdict(clip.segment_index, Label(int(np.argmax(fused))), fused))
    return RecordingVerdict(verdicts, recording_vote(verdicts))


# ---------------------------------------------------------------------------
# whole chain
# ---------------------------------------------------------------------------


def _train_job(args):
    kind, manifest_path, ckpt, cfg = args
    return kind, train_expert(kind, manifest_path, ckpt, cfg)


def run_pipeline(data_dir, work_dir, cfg: RunConfig = RunConfig(), workers: int | None = None) -> dict:
    """prepare -> render -> train both experts -> sweep -> evaluate.

    With two or more workers the experts train in separate processes.
    """
    work_dir = Path(work_dir)
    prepare(data_dir, work_dir, cfg)
    manifest_path = work_dir / MANIFEST_NAME
    render_manifest(manifest_path, None, cfg)
    jobs = [(kind, manifest_path, work_dir / f"{kind}.eht", cfg) for kind in ("vit", "cnn")]
    workers = worker_count() if workers is None else workers
    if workers >= 2:
        with ProcessPoolExecutor(max_workers=2) as pool:
            histories = dict(pool.map(_train_job, jobs))
    else:
        histories = dict(map(_train_job, jobs))
    sw = run_sweep(work_dir / "vit.eht", work_dir / "cnn.eht", manifest_path, None, cfg)
    rep = evaluate(work_dir / "weights.json", manifest_path, None, cfg)
    return {"histories": histories, "sweep": sw, "report": rep}
