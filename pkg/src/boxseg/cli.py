"""Command-line pipeline: gen-data / proposals / frstats / train / eval / ablate.

Every subcommand echoes its effective configuration into a run manifest next
to its outputs, refuses to overwrite non-empty output directories without
--force, and draws all randomness from an explicit seed.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .dataset import SynthConfig, generate_synthetic, load_dataset, save_dataset
from .fcn import load_checkpoint, save_checkpoint
from .fillrate import FillRateTable, build_fill_rate_table, collect_fill_samples, format_report
from .proposals import CrfParams, generate_proposals, load_label_maps, save_label_maps
from .train import (
    TrainConfig,
    evaluate_miou,
    format_ablation_table,
    run_ablation,
    train,
    write_training_log,
)


def _fail(message: str):
    raise click.ClickException(message)


def _prepare_out_dir(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        _fail(f"output directory {out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(path: Path, subcommand: str, config: dict, inputs: dict, outputs: dict,
                        seed, started: float):
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        _fail(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        _fail(f"malformed config {path}: {e}")


def _train_config_from_dict(d: dict) -> TrainConfig:
    """Expand a {"supervision": ...} shorthand or accept a full TrainConfig dict."""
    if "supervision" not in d:
        _fail("train config must name a 'supervision' setting")
    if "masking" in d or "fr" in d:
        return TrainConfig.from_dict(d)
    kwargs = {k: v for k, v in d.items() if k != "supervision"}
    return TrainConfig.for_supervision(d["supervision"], **kwargs)


@click.group()
@click.version_option(version=__version__, prog_name="boxseg")
def main():
    """Box-supervised weakly supervised segmentation pipeline."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(), default=None, help="SynthConfig JSON")
@click.option("--out", required=True, type=click.Path(), help="dataset directory to create")
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--count", type=int, default=None, help="override the sample count")
@click.option("--force", is_flag=True, help="allow writing into a non-empty directory")
def cmd_gen_data(config_path, out, seed, count, force):
    """Generate a synthetic shape dataset with exact ground truth."""
    started = time.time()
    d = _load_json(config_path) if config_path else {}
    try:
        cfg = SynthConfig.from_dict(d)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if count is not None:
            cfg = replace(cfg, count=count)
        out_dir = _prepare_out_dir(out, force)
        samples = generate_synthetic(cfg)
        save_dataset(samples, out_dir, n_classes=cfg.n_classes)
    except click.ClickException:
        raise
    except Exception as e:
        _fail(str(e))
    _write_run_manifest(
        out_dir / "run_manifest.json", "gen-data", cfg.to_dict(),
        {"config": str(config_path) if config_path else None},
        {"dataset": str(out_dir)}, cfg.seed, started,
    )
    click.echo(f"wrote {len(samples)} samples to {out_dir}")


@main.command("proposals")
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["box", "crf"]), default="crf")
@click.option("--config", "config_path", type=click.Path(), default=None, help="CrfParams JSON")
@click.option("--iterations", type=int, default=None, help="override mean-field sweep count")
@click.option("--jobs", type=int, default=1, help="parallel worker processes")
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
def cmd_proposals(dataset, mode, config_path, iterations, jobs, out, force):
    """Rasterize boxes (box) or refine them by mean-field inference (crf)."""
    started = time.time()
    try:
        params = CrfParams.from_dict(_load_json(config_path)) if config_path else CrfParams()
        if iterations is not None:
            params = replace(params, iterations=iterations)
        samples, n_classes = load_dataset(dataset)
        out_dir = _prepare_out_dir(out, force)
        maps = generate_proposals(samples, n_classes, mode=mode, params=params, n_jobs=jobs)
        meta = {"mode": mode, "crf_params": params.to_dict(), "num_classes": n_classes, "dataset": str(dataset)}
        save_label_maps(maps, [s.id for s in samples], out_dir, meta=meta)
    except click.ClickException:
        raise
    except Exception as e:
        _fail(str(e))
    _write_run_manifest(
        out_dir / "run_manifest.json", "proposals",
        {"mode": mode, "crf_params": params.to_dict()},
        {"dataset": str(dataset)}, {"proposals": str(out_dir)}, None, started,
    )
    click.echo(f"wrote {len(maps)} proposal maps to {out_dir}")


@main.command("frstats")
@click.argument("dataset", type=click.Path(exists=True))
@click.argument("proposals", type=click.Path(exists=True))
@click.option("--k", type=int, default=3, help="sub-classes per class")
@click.option("--seed", type=int, default=0, help="clustering seed")
@click.option("--out", required=True, type=click.Path(), help="fill-rate table file")
def cmd_frstats(dataset, proposals, k, seed, out):
    """Compute per-class mean filling rates and sub-class refinements."""
    started = time.time()
    try:
        samples, _ = load_dataset(dataset)
        maps, ids, _ = load_label_maps(proposals)
        by_id = dict(zip(ids, maps))
        aligned = [by_id[s.id] for s in samples if s.id in by_id]
        if len(aligned) != len(samples):
            missing = [s.id for s in samples if s.id not in by_id][:3]
            _fail(f"proposals missing for samples: {missing} ...")
        fill_samples = collect_fill_samples(aligned, [s.boxes for s in samples])
        table = build_fill_rate_table(fill_samples, k=k, seed=seed)
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        table.save(out_path)
    except click.ClickException:
        raise
    except Exception as e:
        _fail(str(e))
    _write_run_manifest(
        out_path.with_name(out_path.name + ".run.json"), "frstats", {"k": k, "seed": seed},
        {"dataset": str(dataset), "proposals": str(proposals)}, {"table": str(out_path)}, seed, started,
    )
    click.echo(format_report(table))


@main.command("train")
@click.argument("dataset", type=click.Path(exists=True))
@click.argument("proposals", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(), required=True, help="TrainConfig JSON")
@click.option("--fr-table", "fr_table_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--iterations", type=int, default=None)
@click.option("--lambda", "lam", type=float, default=None, help="mask-loss weight override")
@click.option("--semi-fraction", type=float, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
def cmd_train(dataset, proposals, config_path, fr_table_path, seed, iterations, lam, semi_fraction, out, force):
    """Train the segmenter on proposal supervision."""
    started = time.time()
    try:
        cfg = _train_config_from_dict(_load_json(config_path))
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if iterations is not None:
            cfg = replace(cfg, iterations=iterations)
        if lam is not None:
            cfg = replace(cfg, lam=lam)
        if semi_fraction is not None:
            cfg = replace(cfg, semi_fraction=semi_fraction)

        samples, n_classes = load_dataset(dataset)
        maps, ids, _ = load_label_maps(proposals)
        by_id = dict(zip(ids, maps))
        try:
            aligned = [by_id[s.id] for s in samples]
        except KeyError as e:
            _fail(f"proposals missing for sample {e}")
        fr_table = FillRateTable.load(fr_table_path) if fr_table_path else None
        if cfg.fr.mode in ("class_fr", "subclass_fr") and fr_table is None:
            _fail(f"supervision {cfg.supervision!r} requires --fr-table")

        out_dir = _prepare_out_dir(out, force)
        state, rows = train(samples, aligned, fr_table, cfg, n_classes)
        ckpt = out_dir / "checkpoint.bin"
        save_checkpoint(state, ckpt, meta={"train_config": cfg.to_dict(), "n_classes": n_classes})
        write_training_log(out_dir / "training_log.tsv", rows, cfg)
    except click.ClickException:
        raise
    except Exception as e:
        _fail(str(e))
    _write_run_manifest(
        out_dir / "run_manifest.json", "train", cfg.to_dict(),
        {"dataset": str(dataset), "proposals": str(proposals), "fr_table": fr_table_path},
        {"checkpoint": str(ckpt), "log": str(out_dir / "training_log.tsv")}, cfg.seed, started,
    )
    click.echo(f"trained {cfg.supervision} for {cfg.iterations} iterations -> {ckpt}")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="evaluation report JSON")
def cmd_eval(checkpoint, dataset, out):
    """Evaluate a checkpoint's mean IoU on a dataset."""
    started = time.time()
    try:
        state, meta = load_checkpoint(checkpoint)
        samples, n_classes = load_dataset(dataset)
        if meta.get("n_classes") not in (None, n_classes):
            _fail(f"checkpoint was trained with {meta['n_classes']} classes, dataset has {n_classes}")
        fingerprint = meta.get("train_config", {}).get("supervision", "")
        seed = meta.get("train_config", {}).get("seed", 0)
        report = evaluate_miou(state, samples, n_classes, fingerprint, seed)
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"format": "boxseg-eval-v1", "train_config": meta.get("train_config", {}), **report.to_dict()}
        out_path.write_text(json.dumps(payload, indent=2) + "\n")
    except click.ClickException:
        raise
    except Exception as e:
        _fail(str(e))
    _write_run_manifest(
        out_path.with_name(out_path.name + ".run.json"), "eval", meta.get("train_config", {}),
        {"checkpoint": str(checkpoint), "dataset": str(dataset)}, {"report": str(out_path)}, seed, started,
    )
    click.echo(f"mIoU {report.miou:.4f} -> {out_path}")


@main.command("ablate")
@click.argument("train_dataset", type=click.Path(exists=True))
@click.argument("val_dataset", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(), required=True, help="grid JSON")
@click.option("--seeds", default="0,1,2", help="comma-separated training seeds")
@click.option("--k", type=int, default=3, help="sub-classes for the fill-rate table")
@click.option("--jobs", type=int, default=1, help="parallel worker processes")
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
def cmd_ablate(train_dataset, val_dataset, config_path, seeds, k, jobs, out, force):
    """Train and evaluate a grid of supervision settings, median over seeds."""
    started = time.time()
    try:
        grid_cfg = _load_json(config_path)
        seed_list = [int(s) for s in seeds.split(",") if s != ""]
        defaults = grid_cfg.get("defaults", {})
        rows_spec = grid_cfg.get("rows")
        if not rows_spec:
            _fail("grid config has no 'rows'")
        grid = []
        for row in rows_spec:
            if isinstance(row, str):
                row = {"name": row, "supervision": row}
            cfg = _train_config_from_dict({"supervision": row["supervision"], **defaults, **row.get("overrides", {})})
            grid.append((row.get("name", row["supervision"]), cfg))

        train_samples, n_classes = load_dataset(train_dataset)
        val_samples, n_val = load_dataset(val_dataset)
        if n_val != n_classes:
            _fail(f"train dataset has {n_classes} classes but validation has {n_val}")
        out_dir = _prepare_out_dir(out, force)

        crf_params = CrfParams.from_dict(grid_cfg.get("crf_params", {}))
        sources = {cfg.proposal_source for _, cfg in grid}
        proposals_by_source = {
            src: generate_proposals(train_samples, n_classes, mode=src, params=crf_params, n_jobs=jobs)
            for src in sources
        }
        fr_tables = {}
        for src in sources:
            fill = collect_fill_samples(proposals_by_source[src], [s.boxes for s in train_samples])
            fr_tables[src] = build_fill_rate_table(fill, k=k, seed=seed_list[0])

        rows = run_ablation(
            train_samples, val_samples, n_classes, grid, seed_list, proposals_by_source, fr_tables,
            n_jobs=jobs,
        )
        table_text = format_ablation_table(rows)
        (out_dir / "ablation.tsv").write_text(table_text)
    except click.ClickException:
        raise
    except Exception as e:
        _fail(str(e))
    _write_run_manifest(
        out_dir / "run_manifest.json", "ablate",
        {"grid": grid_cfg, "seeds": seed_list, "k": k},
        {"train_dataset": str(train_dataset), "val_dataset": str(val_dataset)},
        {"table": str(out_dir / "ablation.tsv")}, seed_list, started,
    )
    click.echo(table_text, nl=False)


if __name__ == "__main__":
    main()
