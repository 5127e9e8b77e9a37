"""Rendered views of a completed run: histograms, perturbation triptychs,
and a Markdown summary whose table cells are lifted verbatim from the CSVs
so the two formats can never disagree.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .geometry import Image
from .runner import ExperimentConfig, load_scenes, read_records
from .scenedata import DatasetConfig


def _config_from_manifest(manifest: dict) -> ExperimentConfig:
    params = dict(manifest["config"])
    if isinstance(params.get("dataset"), dict):
        params["dataset"] = DatasetConfig(**params["dataset"])
    return ExperimentConfig(**params)


def _hist(values, title: str, xlabel: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if values:
        ax.hist(values, bins=min(24, max(4, len(set(values)))),
                color="#4878a8", edgecolor="black", linewidth=0.4)
    ax.set_title(title, fontsize=10)
    ax.set_xlabel(xlabel, fontsize=9)
    ax.set_ylabel("count", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _mean_probs(rec: dict) -> list[float]:
    # loss is -sum(log g) over the active boxes, so exp(-loss/n) is the
    # geometric mean probability the loop was pushing on at that iteration
    return [math.exp(-loss / n) for loss, n in rec["trace"] if n > 0]


def _render_histograms(records: list[dict], report_dir: Path,
                       variants: list[str]) -> list[str]:
    files = []
    for variant in variants:
        rows = [r for r in records if r["variant"] == variant]
        if not rows:
            continue
        iters = [r["iterations_used"] for r in rows]
        boxes = [r["n_overlap_boxes"] for r in rows
                 if r["n_overlap_boxes"] is not None]
        probs = [p for r in rows for p in _mean_probs(r)]
        for name, values, xlabel in (
            ("iterations", iters, "iterations used"),
            ("active_boxes", boxes, "attacked boxes"),
            ("mean_prob", probs, "geometric mean class probability"),
        ):
            path = report_dir / f"{name}_{variant}.png"
            _hist(values, f"{variant}: {name}", xlabel, path)
            files.append(path.name)
    return files


def _triptych(original: Image, adversarial: np.ndarray, path: Path) -> None:
    pert = adversarial - original.pixels
    amplified = np.clip(128.0 + 20.0 * pert, 0.0, 255.0)
    gap = np.full((original.height, 4, 3), 255.0)
    panel = np.concatenate(
        [original.pixels, gap, amplified, gap,
         np.clip(adversarial, 0.0, 255.0)], axis=1)
    Image(panel).save(path)


def _render_triptychs(records: list[dict], out: Path, report_dir: Path,
                      count: int, variants: list[str]) -> list[str]:
    chosen: list[dict] = []
    # round-robin over variants so every attack style gets a panel
    pools = {v: [r for r in records
                 if r["variant"] == v and r["success"] and r["paths"]]
             for v in variants}
    while len(chosen) < count and any(pools.values()):
        for v in variants:
            if pools[v] and len(chosen) < count:
                chosen.append(pools[v].pop(0))
    if not chosen:
        return []
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = _config_from_manifest(manifest)
    originals = dict(load_scenes(cfg))
    files = []
    for rec in chosen:
        adv = np.load(out / rec["paths"]["adversarial_npy"])
        tag = Path(rec["paths"]["adversarial_npy"]).stem
        path = report_dir / f"triptych_{rec['variant']}_{tag}.png"
        _triptych(originals[rec["image_id"]], adv, path)
        files.append(path.name)
    return files


def _csv_to_markdown(text: str) -> str:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return ""
    out = ["| " + " | ".join(rows[0]) + " |",
           "|" + "---|" * len(rows[0])]
    for row in rows[1:]:
        out.append("| " + " | ".join(row) + " |")
    return "\n".join(out)


def render_report(out_dir: str | Path, triptych_count: int = 6) -> Path:
    """Histograms, triptychs, and report.md for the run in out_dir."""
    out = Path(out_dir)
    if not (out / "manifest.json").exists():
        raise FileNotFoundError(f"no manifest.json under {out}")
    records = read_records(out)
    if not records:
        raise ValueError("the run produced no records")
    report_dir = out / "report"
    report_dir.mkdir(exist_ok=True)
    variants = sorted({r["variant"] for r in records},
                      key=["non_tar_frequent", "non_tar_confident",
                           "tar_frequent", "tar_confident",
                           "non_tar_all"].index)

    hist_files = _render_histograms(records, report_dir, variants)
    trip_files = _render_triptychs(records, out, report_dir, triptych_count,
                                   variants)

    lines = [f"# Attack run report", "",
             f"Package version {__version__}; {len(records)} attack records "
             f"over {len({r['image_id'] for r in records})} images.", ""]
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        lines += ["## Metrics", "",
                  _csv_to_markdown(metrics_path.read_text()), ""]
    captions_path = out / "captions.csv"
    if captions_path.exists():
        lines += ["## Caption drift", "",
                  _csv_to_markdown(captions_path.read_text()), ""]
    lines += ["## Histograms", ""]
    lines += [f"![{name}]({name})" for name in hist_files]
    lines += ["", "## Examples", ""]
    if trip_files:
        lines += ["Original, amplified perturbation (20x around mid-gray), "
                  "adversarial:", ""]
        lines += [f"![{name}]({name})" for name in trip_files]
    else:
        lines += ["No successful attacks to illustrate."]
    (report_dir / "report.md").write_text("\n".join(lines) + "\n")
    return report_dir
