"""Command line entry points.

Every subcommand reads the same YAML config file and accepts flags that
override individual fields. MASKSTRIKE_OUT overrides the output directory
everywhere, including explicit flags. Individual attack failures are recorded
in the output, never turned into a nonzero exit.
"""

from __future__ import annotations

import os
from dataclasses import replace

import click
import yaml

from .detector import (
    TrainConfig,
    save_mini_detector,
    train_mini_detector,
)
from .metrics import heldout_map
from .report import render_report
from .runner import load_config, run_attacks, run_caption_eval, run_controls
from .scenedata import DatasetConfig, class_names, generate_dataset, write_dataset


def _read_yaml(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise click.ClickException(f"{path} must contain a mapping")
    return data


def _run_options(f):
    opts = [
        click.option("--config", "config_path", default=None,
                     type=click.Path(exists=True, dir_okay=False),
                     help="YAML experiment config."),
        click.option("--weights", default=None, type=click.Path(),
                     help="Detector weights file."),
        click.option("--out", "out_dir", default=None, type=click.Path(),
                     help="Run output directory."),
        click.option("--data-dir", default=None, type=click.Path(),
                     help="Directory of PNGs + annotations.json to attack."),
        click.option("--seed", default=None, type=int),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


@click.group()
def main():
    """Type-specific adversarial attacks on the bundled mini detector."""


@main.command("generate-data")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="YAML config; the dataset section seeds the generator.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n-scenes", default=None, type=int)
@click.option("--seed", default=None, type=int)
def generate_data(config_path, out_dir, n_scenes, seed):
    """Write a synthetic scene dataset (PNGs plus annotations.json)."""
    params = dict(_read_yaml(config_path).get("dataset") or {})
    if n_scenes is not None:
        params["n_scenes"] = n_scenes
    if seed is not None:
        params["seed"] = seed
    scenes = write_dataset(DatasetConfig(**params), out_dir)
    click.echo(f"wrote {len(scenes)} scenes to {out_dir}")


@main.command("train-detector")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="YAML config; the train_dataset section is used if set.")
@click.option("--out", "weights_path", required=True, type=click.Path())
@click.option("--train-scenes", default=None, type=int)
@click.option("--epochs", default=None, type=int)
@click.option("--seed", default=None, type=int)
def train_detector(config_path, weights_path, train_scenes, epochs, seed):
    """Train the mini detector from scratch and report held-out mAP."""
    params = dict(_read_yaml(config_path).get("train_dataset") or {})
    params.setdefault("n_scenes", 1600)
    if train_scenes is not None:
        params["n_scenes"] = train_scenes
    if seed is not None:
        params["seed"] = seed
    data_cfg = DatasetConfig(**params)
    train_cfg = TrainConfig(epochs=epochs) if epochs else TrainConfig()

    vocab = class_names() + ["background"]
    det = train_mini_detector(generate_dataset(data_cfg), vocab,
                              train=train_cfg)
    heldout = replace(data_cfg, n_scenes=100, seed=data_cfg.seed + 1)
    score = heldout_map(det, generate_dataset(heldout))
    save_mini_detector(det, weights_path, metadata={
        "train_scenes": data_cfg.n_scenes, "heldout_map": score})
    click.echo(f"held-out mAP {score:.3f}; weights -> {weights_path}")


@main.command()
@_run_options
@click.option("--variants", default=None,
              help="Comma-separated subset of attack variants.")
@click.option("--learning-rate", default=None, type=float)
@click.option("--max-iter", default=None, type=int)
@click.option("--targets-per-image", default=None, type=int)
@click.option("--workers", default=None, type=int)
def attack(config_path, variants, **overrides):
    """Run the attack phase; results land in <out>/records.jsonl."""
    if variants is not None:
        overrides["variants"] = tuple(v.strip() for v in variants.split(","))
    cfg = load_config(config_path, **overrides)
    records = run_attacks(cfg)
    n_ok = sum(r["success"] for r in records)
    click.echo(f"{len(records)} attacks, {n_ok} successful; "
               f"records -> {cfg.out_dir}/records.jsonl")


@main.command()
@_run_options
@click.option("--no-permutation", is_flag=True,
              help="Skip the permuted-perturbation control.")
@click.option("--no-resize", is_flag=True, help="Skip the resize control.")
@click.option("--resize-scales", default=None,
              help="Comma-separated resize factors, e.g. 0.6,1.4.")
def evaluate(config_path, no_permutation, no_resize, resize_scales,
             **overrides):
    """Fill control results and aggregate metrics.csv / metrics.json."""
    if no_permutation:
        overrides["run_permutation"] = False
    if no_resize:
        overrides["run_resize"] = False
    if resize_scales is not None:
        overrides["resize_scales"] = tuple(
            float(s) for s in resize_scales.split(","))
    cfg = load_config(config_path, **overrides)
    report = run_controls(cfg)
    click.echo(report.to_csv().strip())
    click.echo(f"metrics -> {cfg.out_dir}/metrics.csv")


@main.command("caption-eval")
@_run_options
def caption_eval(config_path, **overrides):
    """Score caption drift over successful attacks."""
    cfg = load_config(config_path, **overrides)
    text = run_caption_eval(cfg)
    click.echo(text.strip())
    click.echo(f"captions -> {cfg.out_dir}/captions.csv")


@main.command()
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(),
              help="Run directory to render (defaults to the config's).")
@click.option("--triptychs", default=6, type=int,
              help="How many example triptychs to render.")
@click.option("--seed", default=None, type=int, hidden=True)
def report(config_path, out_dir, triptychs, seed):
    """Render histograms, example triptychs, and report.md for a run."""
    out = (os.environ.get("MASKSTRIKE_OUT") or out_dir
           or _read_yaml(config_path).get("out_dir"))
    if not out:
        raise click.UsageError("no output directory; pass --out or --config")
    report_dir = render_report(out, triptych_count=triptychs)
    click.echo(f"report -> {report_dir / 'report.md'}")


if __name__ == "__main__":
    main()
