"""Experiment orchestration: attacks over a dataset, persisted records and
artifacts, controls, and aggregate metrics.

Layout under the output directory:

    manifest.json               run inputs and artifact paths
    records/<variant>/<id>.json per-image journal (the resume unit)
    records.jsonl               one record per attack, canonical order
    images/<variant>/...        adversarial PNG + exact .npy + perturbation PNG
    metrics.csv / metrics.json  aggregates (written by the evaluate phase)
    captions.csv                caption drift table (caption-eval phase)

Records store full detection summaries for both the clean and the attacked
image, so evaluation and captioning never re-run attacks. Controls re-test
success on the exact float pixels from the .npy files; the 8-bit PNGs exist
for humans.

Determinism: every random choice flows from a per-record stream seeded by
(global_seed, image_id, variant), so scheduling order and resumption cannot
change results.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attack import (
    DEFAULT_LEARNING_RATE,
    VARIANTS,
    AttackConfig,
    AttackResult,
    all_objects_success,
    box_set_a,
    nontargeted_success,
    pick_object_mask,
    run_all_objects,
    run_non_targeted,
    run_targeted,
    sample_substitute_class,
    select_pick_object,
    targeted_success,
)
from .detector import load_mini_detector
from .detector.model import Detection, DetectionSet
from .downstream import (
    CaptionPair,
    caption_csv,
    generate_caption,
    score_caption_pairs,
)
from .geometry import BinaryMask, Box, Image
from .metrics import (
    acac,
    actc,
    aggregate_records,
    l2_image_norm,
    map_outside_mask,
    permuted_attack_succeeds,
    perturbation_delta,
    rescale_mask,
    resized_attack_succeeds,
    ssim,
    write_report,
)
from .scenedata import DatasetConfig, generate_dataset, load_images

PICK_VARIANTS = ("non_tar_frequent", "non_tar_confident",
                 "tar_frequent", "tar_confident")


@dataclass
class ExperimentConfig:
    weights: str
    out_dir: str
    data_dir: str | None = None
    dataset: DatasetConfig | None = None
    variants: tuple[str, ...] = VARIANTS
    learning_rate: float = DEFAULT_LEARNING_RATE
    max_iter: int = 60
    # per-variant AttackConfig overrides. Non-targeted flips tolerate a hotter
    # rate than the shared default; the all-objects baseline needs the larger
    # budget plus a gentle rate, because image-wide updates at the default
    # rate shred the image before every class has cleared.
    attack_overrides: dict = field(default_factory=lambda: {
        "non_tar_frequent": {"learning_rate": 1.5e5},
        "non_tar_confident": {"learning_rate": 1.5e5},
        "non_tar_all": {"max_iter": 120, "learning_rate": 4e4},
    })
    targets_per_image: int = 10
    run_permutation: bool = True
    run_resize: bool = True
    resize_scales: tuple[float, ...] = (0.6, 1.4)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.targets_per_image < 1:
            raise ValueError("targets_per_image must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.variants = tuple(self.variants)
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants: {sorted(unknown)}")
        self.resize_scales = tuple(float(s) for s in self.resize_scales)
        if any(s <= 0 for s in self.resize_scales):
            raise ValueError("resize scales must be positive")
        if self.data_dir is None and self.dataset is None:
            raise ValueError("need data_dir or an inline dataset")

    def attack_config_for(self, variant: str) -> AttackConfig:
        params = {"learning_rate": self.learning_rate,
                  "max_iter": self.max_iter}
        params.update(self.attack_overrides.get(variant, {}))
        return AttackConfig(**params)


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Config file (YAML mapping of field names), then explicit overrides,
    then the MASKSTRIKE_OUT environment variable for the output directory."""
    params: dict = {}
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path} must contain a mapping")
        params.update(loaded)
    params.update({k: v for k, v in overrides.items() if v is not None})
    if isinstance(params.get("dataset"), dict):
        params["dataset"] = DatasetConfig(**params["dataset"])
    env_out = os.environ.get("MASKSTRIKE_OUT")
    if env_out:
        params["out_dir"] = env_out
    return ExperimentConfig(**params)


# -- record (de)serialization ----------------------------------------------


def summarize_detections(dets: DetectionSet) -> list[dict]:
    return [{"box": [float(v) for v in d.box.as_tuple()],
             "objectness": float(d.objectness),
             "class_probs": [float(p) for p in d.class_probs]}
            for d in dets]


def detections_from_summary(summary: list[dict], class_vocab: list[str],
                            image_shape, input_shape) -> DetectionSet:
    dets = [Detection(Box(*row["box"]), row["objectness"],
                      np.asarray(row["class_probs"], dtype=np.float64))
            for row in summary]
    return DetectionSet(dets, class_vocab, tuple(image_shape),
                        tuple(input_shape))


def record_rng(seed: int, image_id: str, variant: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [seed, zlib.crc32(image_id.encode()), VARIANTS.index(variant)]))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_scenes(cfg: ExperimentConfig) -> list[tuple[str, Image]]:
    if cfg.data_dir is not None:
        return load_images(cfg.data_dir)
    scenes = generate_dataset(cfg.dataset)
    return [(s.annotation.image_id, s.image) for s in scenes]


# -- attack phase ------------------------------------------------------------


def _base_record(image_id: str, variant: str, image: Image) -> dict:
    return {
        "image_id": image_id,
        "variant": variant,
        "image_shape": list(image.shape),
        "o_pick": None,
        "target_class": None,
        "substitute_class": None,
        "original_classes": None,
        "success": False,
        "failure_cause": None,
        "iterations_used": 0,
        "trace": [],
        "n_overlap_boxes": None,
        "mask_pixels": None,
        "delta": None,
        "l2_image_norm": None,
        "ssim": None,
        "actc": None,
        "acac": None,
        "map_outside": None,
        "permutation_success": None,
        "resize_success": None,
        "paths": None,
        "detections_original": None,
        "detections_final": None,
    }


def _save_artifacts(out: Path, variant: str, tag: str,
                    result: AttackResult) -> dict:
    d = out / "images" / variant
    d.mkdir(parents=True, exist_ok=True)
    adv_png = d / f"{tag}.png"
    adv_npy = d / f"{tag}.npy"
    pert_png = d / f"{tag}_pert.png"
    result.adversarial.save(adv_png)
    np.save(adv_npy, result.adversarial.pixels)
    Image(np.clip(result.perturbation + 128.0, 0.0, 255.0)).save(pert_png)
    return {"adversarial_png": str(adv_png.relative_to(out)),
            "adversarial_npy": str(adv_npy.relative_to(out)),
            "perturbation_png": str(pert_png.relative_to(out))}


def _finish_record(rec: dict, out: Path, variant: str, tag: str, image: Image,
                   result: AttackResult, dets_org: DetectionSet,
                   mask: BinaryMask | None) -> None:
    rec["success"] = bool(result.success)
    rec["failure_cause"] = result.failure_cause
    rec["iterations_used"] = result.iterations_used
    rec["trace"] = [[float(l), int(n)] for l, n in result.trace]
    rec["l2_image_norm"] = l2_image_norm(image, result.adversarial)
    rec["ssim"] = ssim(image, result.adversarial)
    rec["detections_original"] = summarize_detections(dets_org)
    rec["detections_final"] = summarize_detections(result.final_detections)
    rec["input_shape"] = list(result.final_detections.input_shape)
    if mask is not None:
        rec["mask_pixels"] = mask.pixel_count
        rec["delta"] = perturbation_delta(image, result.adversarial, mask)
        rec["actc"] = actc(result.final_detections, mask, rec["o_pick"])
        rec["map_outside"] = map_outside_mask(dets_org,
                                              result.final_detections, mask)
    else:
        all_false = BinaryMask.empty(image.shape)
        rec["map_outside"] = map_outside_mask(dets_org,
                                              result.final_detections,
                                              all_false)
    rec["paths"] = _save_artifacts(out, variant, tag, result)


def attack_image(cfg: ExperimentConfig, detector, image_id: str,
                 image: Image, variant: str) -> list[dict]:
    """All records for one (image, variant) pair; never raises on attack
    failures, which land in failure_cause instead."""
    out = Path(cfg.out_dir)
    acfg = cfg.attack_config_for(variant)
    rng = record_rng(cfg.seed, image_id, variant)
    dets_org = detector.detect(image)
    n_foreground = len(detector.class_vocab) - 1

    if len(dets_org) == 0 and variant != "non_tar_all":
        rec = _base_record(image_id, variant, image)
        rec["failure_cause"] = "no_detections"
        return [rec]

    if variant == "non_tar_all":
        rec = _base_record(image_id, variant, image)
        original_classes = sorted({d.predicted_class for d in dets_org})
        rec["original_classes"] = original_classes
        rec["n_overlap_boxes"] = len(dets_org)
        if len(original_classes) >= n_foreground:
            rec["failure_cause"] = "no_substitute_class"
            return [rec]
        z = sample_substitute_class(original_classes, n_foreground, rng)
        rec["substitute_class"] = z
        result = run_all_objects(image, detector, z, acfg)
        _finish_record(rec, out, variant, image_id, image, result, dets_org,
                       mask=None)
        return [rec]

    strategy = "frequent" if variant.endswith("frequent") else "confident"
    o_pick = select_pick_object(dets_org, strategy)
    mask = pick_object_mask(dets_org, o_pick)

    if variant.startswith("non_tar"):
        rec = _base_record(image_id, variant, image)
        rec["o_pick"] = o_pick
        rec["n_overlap_boxes"] = len(box_set_a(dets_org, o_pick))
        result = run_non_targeted(image, detector, o_pick, mask, acfg)
        _finish_record(rec, out, variant, image_id, image, result, dets_org,
                       mask)
        return [rec]

    candidates = [c for c in range(n_foreground) if c != o_pick]
    n_targets = min(cfg.targets_per_image, len(candidates))
    targets = rng.choice(candidates, size=n_targets, replace=False)
    records = []
    for k in (int(t) for t in targets):
        rec = _base_record(image_id, variant, image)
        rec["o_pick"] = o_pick
        rec["target_class"] = k
        rec["n_overlap_boxes"] = len(box_set_a(dets_org, o_pick))
        result = run_targeted(image, detector, o_pick, k, mask, acfg)
        _finish_record(rec, out, variant, f"{image_id}_t{k:02d}", image,
                       result, dets_org, mask)
        rec["acac"] = acac(result.final_detections, k)
        records.append(rec)
    return records


def _journal_path(out: Path, variant: str, image_id: str) -> Path:
    return out / "records" / variant / f"{image_id}.json"


def run_attacks(cfg: ExperimentConfig, detector=None) -> list[dict]:
    """Attack every (image, variant) pair, journal per-image results for
    resumability, and concatenate the canonical records.jsonl."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if detector is None:
        detector = load_mini_detector(cfg.weights)
    scenes = load_scenes(cfg)
    variants = [v for v in VARIANTS if v in cfg.variants]

    pending = []
    for variant in variants:
        (out / "records" / variant).mkdir(parents=True, exist_ok=True)
        for image_id, image in scenes:
            if not _journal_path(out, variant, image_id).exists():
                pending.append((variant, image_id, image))

    def _one(job):
        variant, image_id, image = job
        try:
            return attack_image(cfg, detector, image_id, image, variant)
        except Exception as e:  # recorded, never fatal to the run
            rec = _base_record(image_id, variant, image)
            rec["failure_cause"] = f"error:{type(e).__name__}:{e}"
            return [rec]

    if cfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_one, pending))
    else:
        results = [_one(job) for job in pending]

    for (variant, image_id, _), records in zip(pending, results):
        _atomic_write(_journal_path(out, variant, image_id),
                      json.dumps(records, indent=1))

    records = _collect_records(cfg)
    _write_jsonl(out / "records.jsonl", records)
    _write_manifest(cfg, detector)
    return records


def _collect_records(cfg: ExperimentConfig) -> list[dict]:
    out = Path(cfg.out_dir)
    scenes = load_scenes(cfg)
    records = []
    for variant in (v for v in VARIANTS if v in cfg.variants):
        for image_id, _ in scenes:
            path = _journal_path(out, variant, image_id)
            if path.exists():
                records.extend(json.loads(path.read_text()))
    return records


def _write_jsonl(path: Path, records: list[dict]) -> None:
    _atomic_write(path, "".join(
        json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_records(out_dir: str | Path) -> list[dict]:
    path = Path(out_dir) / "records.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines()]


def _write_manifest(cfg: ExperimentConfig, detector) -> None:
    out = Path(cfg.out_dir)
    snapshot = asdict(cfg)  # converts the nested DatasetConfig too
    journal = sorted(str(p.relative_to(out))
                     for p in (out / "records").glob("*/*.json"))
    manifest = {
        "version": __version__,
        "config": snapshot,
        "class_vocab": list(detector.class_vocab),
        "records": "records.jsonl",
        "image_records": journal,
        "metrics_csv": "metrics.csv",
        "metrics_json": "metrics.json",
        "captions_csv": "captions.csv",
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=1))


# -- evaluate phase ----------------------------------------------------------


def _success_predicate(rec: dict, vocab: list[str]):
    """The attack's own success predicate, lifted to (detections, shape) so
    resize controls can rescale the mask to the tested resolution."""
    variant = rec["variant"]
    if variant == "non_tar_all":
        banned = rec["original_classes"] or []

        def ok(dets, shape):
            return all_objects_success(dets, banned)
    elif variant.startswith("non_tar"):
        o_pick = rec["o_pick"]

        def ok(dets, shape):
            return nontargeted_success(dets, o_pick)
    else:
        o_pick, k = rec["o_pick"], rec["target_class"]
        mask = _mask_from_record(rec, vocab)

        def ok(dets, shape):
            return targeted_success(dets, rescale_mask(mask, shape), o_pick, k)
    return ok


def _mask_from_record(rec: dict, vocab: list[str]) -> BinaryMask:
    dets_org = detections_from_summary(
        rec["detections_original"], vocab, rec["image_shape"],
        rec.get("input_shape", rec["image_shape"]))
    return pick_object_mask(dets_org, rec["o_pick"])


def run_controls(cfg: ExperimentConfig, detector=None):
    """Fill permutation/resize control outcomes on successful records, then
    aggregate everything into metrics.csv / metrics.json."""
    out = Path(cfg.out_dir)
    if detector is None:
        detector = load_mini_detector(cfg.weights)
    vocab = list(detector.class_vocab)
    records = read_records(out)
    originals = dict(load_scenes(cfg))

    for rec in records:
        if not rec["success"] or rec["paths"] is None:
            continue
        adv = Image(np.load(out / rec["paths"]["adversarial_npy"]))
        original = originals[rec["image_id"]]
        ok = _success_predicate(rec, vocab)
        if cfg.run_permutation and rec["variant"] != "non_tar_all":
            perm_seed = zlib.crc32(
                f"{rec['image_id']}:{rec['variant']}:{rec['target_class']}"
                .encode())
            rec["permutation_success"] = permuted_attack_succeeds(
                original, adv.pixels - original.pixels, perm_seed, detector,
                ok)
        if cfg.run_resize:
            rec["resize_success"] = {
                f"{s:g}": resized_attack_succeeds(adv, s, detector, ok)
                for s in cfg.resize_scales}

    _write_jsonl(out / "records.jsonl", records)
    report = aggregate_records(records)
    write_report(report, out)
    return report


# -- caption phase -----------------------------------------------------------


def run_caption_eval(cfg: ExperimentConfig, detector=None) -> str:
    """Caption drift table over successful attacks; returns the CSV text."""
    out = Path(cfg.out_dir)
    if detector is None:
        detector = load_mini_detector(cfg.weights)
    vocab = list(detector.class_vocab)
    records = read_records(out)
    scores = []
    for variant in (v for v in VARIANTS if v in cfg.variants):
        pairs = []
        for rec in records:
            if rec["variant"] != variant or not rec["success"]:
                continue
            shape = rec["image_shape"]
            input_shape = rec.get("input_shape", shape)
            before = detections_from_summary(rec["detections_original"],
                                             vocab, shape, input_shape)
            after = detections_from_summary(rec["detections_final"],
                                            vocab, shape, input_shape)
            keyword = vocab[rec["o_pick"]] if rec["o_pick"] is not None else ""
            pairs.append(CaptionPair(generate_caption(before),
                                     generate_caption(after), keyword))
        if pairs:
            scores.append(score_caption_pairs(variant, pairs))
    text = caption_csv(scores)
    _atomic_write(out / "captions.csv", text)
    return text


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Attack, evaluate, caption-eval; returns the manifest."""
    detector = load_mini_detector(cfg.weights)
    run_attacks(cfg, detector)
    run_controls(cfg, detector)
    run_caption_eval(cfg, detector)
    return json.loads((Path(cfg.out_dir) / "manifest.json").read_text())
