"""Experiment runner. Subcommands mirror the pipeline order:

    make-dataset -> invert -> gen-views -> pretrain -> probe / knn / mi / plot

plus ``sweep`` for grid runs. Every command reads one JSON experiment config,
writes its artifacts under ``output_dir``, and stamps (config hash, seed,
code version) into everything it writes. Failures exit nonzero with a
machine-readable JSON error on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import sys

import numpy as np
import torch

from . import __version__
from .config import (ConfigError, ExperimentConfig, config_from_dict, config_hash,
                     config_to_dict, load_config, save_config, set_by_path)
from .datasets import load_dataset, make_blob_dataset, save_dataset
from .evaluation import knn_eval, linear_probe, mine_estimate
from .inversion import optimize_latent, pretrain_discriminator, train_inverter
from .modelzoo import (BlobGenerator, ConvDiscriminator, ConvEncoder, ConvInverter,
                       RandomPerceptualNet, StyleMapper, evaluate, load_checkpoint,
                       save_checkpoint)
from .trainer import pretrain
from .viewcache import generate_and_cache, read_cache, write_cache
from .viewgen import TransformConfig, calibrate_epsilon, expert_transform, per_sample_rng

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class UpstreamMissingError(RuntimeError):
    """A required artifact is absent; names the subcommand that creates it."""

    def __init__(self, required_subcommand: str, detail: str):
        super().__init__(f"{detail} (run '{required_subcommand}' first)")
        self.required_subcommand = required_subcommand


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

class Workspace:
    """Resolves artifact paths and builds models for one experiment config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.root = cfg.output_dir

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def dataset_dir(self) -> str:
        return self.path("dataset")

    @property
    def inversions_cache(self) -> str:
        return self.path("inversions.cache")

    def views_cache(self, mode: str) -> str:
        return self.path(f"views_{mode}.cache")

    def run_dir(self, run_name: str) -> str:
        return self.path("runs", run_name)

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.cfg.model.dtype]

    def image_shape(self):
        d = self.cfg.dataset
        return (d.channels, d.resolution, d.resolution)

    def build_generator(self) -> BlobGenerator:
        return BlobGenerator(self.cfg.model.latent_dim, self.image_shape(), dtype=self.dtype)

    def build_encoder(self, seed: int) -> ConvEncoder:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return ConvEncoder(self.image_shape(), self.cfg.model.embed_dim,
                               channels=tuple(self.cfg.model.encoder_channels), dtype=self.dtype)

    def build_inversion_models(self, seed: int):
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            inverter = ConvInverter(self.image_shape(), self.cfg.model.latent_dim, dtype=self.dtype)
            disc = ConvDiscriminator(self.image_shape(), dtype=self.dtype)
            perceptual = RandomPerceptualNet(self.image_shape(), dtype=self.dtype)
            mapper = StyleMapper(self.cfg.model.style_dim, self.cfg.model.latent_dim,
                                 dtype=self.dtype)
        return inverter, disc, perceptual, mapper

    def generator_hash(self) -> str:
        g = self.build_generator()
        return hashlib.sha256(g.architecture_id.encode()).hexdigest()[:12]

    def require_dataset(self):
        if not os.path.exists(os.path.join(self.dataset_dir, "meta.json")):
            raise UpstreamMissingError("make-dataset", f"no dataset at {self.dataset_dir}")
        return load_dataset(self.dataset_dir)

    def require_inversions(self):
        if not os.path.exists(self.inversions_cache):
            raise UpstreamMissingError("invert", f"no inversion cache at {self.inversions_cache}")
        return read_cache(self.inversions_cache)

    def require_views(self, mode: str):
        path = self.views_cache(mode)
        if not os.path.exists(path):
            raise UpstreamMissingError("gen-views", f"no view cache at {path}")
        return read_cache(path)

    def require_encoder_run(self, run_name: str) -> ConvEncoder:
        ckpt = os.path.join(self.run_dir(run_name), "encoder.ckpt")
        if not os.path.exists(ckpt):
            raise UpstreamMissingError("pretrain", f"no encoder checkpoint at {ckpt}")
        encoder = self.build_encoder(seed=0)
        load_checkpoint(encoder, ckpt)
        return encoder

    def stamp(self, extra: dict | None = None) -> dict:
        meta = {"config_hash": self.hash, "seed": self.cfg.seed, "code_version": __version__}
        if extra:
            meta.update(extra)
        return meta

    def write_result(self, name: str, metric: str, value, extra: dict | None = None) -> str:
        os.makedirs(self.path("results"), exist_ok=True)
        row = self.stamp({"metric": metric, "value": value})
        if extra:
            row.update(extra)
        path = self.path("results", f"{name}.json")
        with open(path, "w") as fh:
            json.dump(row, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return path


def _default_run_name(cfg: ExperimentConfig) -> str:
    t = cfg.train
    if t.assimilation == "baseline_two_expert":
        return "baseline"
    tag = "a1" if t.assimilation == "A1_replace" else "a2"
    src = t.view_source.replace("_cache", "")
    return f"{tag}_{src}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_make_dataset(ws: Workspace, args) -> dict:
    out = ws.dataset_dir
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise RuntimeError(f"{out} is not empty; pass --force to overwrite")
    d = ws.cfg.dataset
    generator = ws.build_generator()
    train, test, _ = make_blob_dataset(
        generator, d.classes, d.train_per_class, d.test_per_class, seed=ws.cfg.seed,
        prototype_scale=d.prototype_scale, latent_jitter=d.latent_jitter)
    meta = ws.stamp({
        "classes": d.classes,
        "train_size": len(train),
        "test_size": len(test),
        "resolution": d.resolution,
    })
    save_dataset(out, train, test, meta)
    return {"dataset_dir": out, **meta}


def cmd_invert(ws: Workspace, args) -> dict:
    train, test, _ = ws.require_dataset()
    cfg = ws.cfg
    generator = ws.build_generator()
    inverter, disc, perceptual, mapper = ws.build_inversion_models(cfg.seed)
    train_images = train.images_tensor(ws.dtype)
    test_images = test.images_tensor(ws.dtype)

    def sample_latents(rng, count):
        s = torch.as_tensor(rng.standard_normal((count, cfg.model.style_dim)), dtype=ws.dtype)
        return evaluate(mapper, s)

    disc_history = pretrain_discriminator(disc, generator, train_images, cfg.inversion,
                                          seed=cfg.seed, latent_sampler=sample_latents)
    history = train_inverter(train_images, test_images, inverter, generator, disc,
                             perceptual, cfg.inversion, seed=cfg.seed)

    entries = {}
    for split in (train, test):
        images = split.images_tensor(ws.dtype)
        if cfg.inversion.latent_opt_steps > 0:
            for i, aid in enumerate(split.anchor_ids):
                w = optimize_latent(images[i], inverter, generator, disc, perceptual,
                                    cfg.inversion)
                entries[int(aid)] = (w.numpy()[None, :].astype(np.float32), None)
        else:
            with torch.no_grad():
                ws_all = evaluate(inverter, images).cpu().numpy().astype(np.float32)
            for i, aid in enumerate(split.anchor_ids):
                entries[int(aid)] = (ws_all[i][None, :], None)
    checksum = write_cache(ws.inversions_cache, entries,
                           dataset_id=ws.hash, generator_hash=ws.generator_hash())

    save_checkpoint(inverter, ws.path("inverter.ckpt"), seed=cfg.seed)
    save_checkpoint(disc, ws.path("discriminator.ckpt"), seed=cfg.seed)
    summary = ws.stamp({
        "initial_val_loss": history["initial_val"],
        "final_val_loss": history["final_val"],
        "lambda_vgg": cfg.inversion.lambda_vgg,
        "lambda_adv": cfg.inversion.lambda_adv,
        "latent_opt_steps": cfg.inversion.latent_opt_steps,
        "disc_final_loss": disc_history["final"],
        "cache_checksum": checksum,
        "n_inversions": len(entries),
    })
    with open(ws.path("invert_summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


def cmd_gen_views(ws: Workspace, args) -> dict:
    train, _, _ = ws.require_dataset()
    cfg = ws.cfg
    mode = cfg.viewgen.mode
    inversions_cache = ws.require_inversions()
    inversions = {aid: inversions_cache.record(aid)[0][0] for aid in inversions_cache.anchor_ids}
    generator = ws.build_generator()
    images = train.images_tensor(ws.dtype)

    encoder = None
    wcfg = cfg.viewgen.wsearch
    if mode == "w_search":
        encoder = ws.require_encoder_run(cfg.viewgen.encoder_run)
        if cfg.viewgen.calibrate_epsilons:
            rng = per_sample_rng(cfg.seed, 0xCA11B)
            sample = images[:min(256, len(images))]
            cal = calibrate_epsilon(encoder, sample, TransformConfig.full(), rng)
            wcfg = type(wcfg)(**{**wcfg.__dict__, "epsilon1": cal.epsilon1,
                                 "epsilon2": cal.epsilon2})

    summary = generate_and_cache(
        images, train.anchor_ids, mode, ws.views_cache(mode),
        g=generator, f=encoder, cfg=wcfg if mode == "w_search" else cfg.viewgen.perturb,
        seed=cfg.seed, inversions=inversions,
        dataset_id=ws.hash, generator_hash=ws.generator_hash())
    summary = ws.stamp(summary)
    with open(ws.path(f"gen_views_{mode}_summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


def cmd_pretrain(ws: Workspace, args) -> dict:
    train, test, _ = ws.require_dataset()
    cfg = ws.cfg
    cache = None
    if cfg.train.view_source != "expert":
        cache = ws.require_views(cfg.train.view_source.replace("_cache", ""))
    run_name = args.run_name or _default_run_name(cfg)
    encoder = ws.build_encoder(cfg.seed)
    result = pretrain(encoder, train.images_tensor(ws.dtype), train.labels,
                      test.images_tensor(ws.dtype), test.labels, train.anchor_ids,
                      cfg.train, cache=cache, out_dir=ws.run_dir(run_name))
    meta = ws.stamp({
        "run_name": run_name,
        "final_knn5": result["final_knn5"],
        "steps": len(result["rows"]),
        "loss_variant": cfg.train.loss.variant,
        "assimilation": cfg.train.assimilation,
    })
    with open(os.path.join(ws.run_dir(run_name), "run_meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return meta


def cmd_probe(ws: Workspace, args) -> dict:
    train, test, _ = ws.require_dataset()
    run_name = args.run_name or _default_run_name(ws.cfg)
    encoder = ws.require_encoder_run(run_name)
    acc = linear_probe(encoder, train.images_tensor(ws.dtype), train.labels,
                       test.images_tensor(ws.dtype), test.labels,
                       ws.cfg.eval, seed=ws.cfg.seed)
    path = ws.write_result(f"probe_{run_name}", "linear_probe_acc1", acc,
                           {"run_name": run_name})
    return {"metric": "linear_probe_acc1", "value": acc, "path": path}


def cmd_knn(ws: Workspace, args) -> dict:
    train, test, _ = ws.require_dataset()
    run_name = args.run_name or _default_run_name(ws.cfg)
    encoder = ws.require_encoder_run(run_name)
    acc = knn_eval(encoder, train.images_tensor(ws.dtype), train.labels,
                   test.images_tensor(ws.dtype), test.labels, k=ws.cfg.eval.k)
    path = ws.write_result(f"knn_{run_name}", f"knn{ws.cfg.eval.k}_acc", acc,
                           {"run_name": run_name})
    return {"metric": f"knn{ws.cfg.eval.k}_acc", "value": acc, "path": path}


def _mi_pairs(ws: Workspace, pair: str, representation: str, run_name: str):
    train, _, _ = ws.require_dataset()
    cfg = ws.cfg
    images = train.images_tensor(ws.dtype)
    if pair == "expert":
        partners = []
        tcfg = TransformConfig.full()
        for i, aid in enumerate(train.anchor_ids):
            rng = per_sample_rng(cfg.seed, 0x3145, int(aid))
            partners.append(expert_transform(images[i], tcfg, rng))
        partners = torch.stack(partners)
    elif pair in ("w_search", "w_perturb"):
        cache = ws.require_views(pair)
        partners = []
        for i, aid in enumerate(train.anchor_ids):
            _, cached = cache.record(int(aid))
            rng = per_sample_rng(cfg.seed, 0x3145, int(aid))
            pick = int(rng.integers(0, len(cached)))
            partners.append(torch.as_tensor(cached[pick], dtype=ws.dtype))
        partners = torch.stack(partners)
    else:
        raise ValueError(f"unknown MI pair {pair!r}")

    if representation == "embedding":
        encoder = ws.require_encoder_run(run_name)
        from .evaluation import embed_images
        u = embed_images(encoder, images).numpy()
        v = embed_images(encoder, partners).numpy()
    elif representation == "pixel":
        pool = torch.nn.functional.avg_pool2d
        u = pool(images, 4).flatten(1).numpy()
        v = pool(partners, 4).flatten(1).numpy()
    else:
        raise ValueError(f"unknown MI representation {representation!r}")
    return u, v


def cmd_mi(ws: Workspace, args) -> dict:
    run_name = args.run_name or _default_run_name(ws.cfg)
    u, v = _mi_pairs(ws, args.pair, args.representation, run_name)
    value = mine_estimate(u, v, ws.cfg.eval.mine, seed=ws.cfg.seed)
    name = f"mi_{args.pair}_{args.representation}"
    path = ws.write_result(name, "mutual_information_nats", value,
                           {"pair": args.pair, "representation": args.representation})
    return {"metric": "mutual_information_nats", "value": value, "path": path}


def cmd_plot(ws: Workspace, args) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .trainer import read_metrics_csv

    run_names = args.runs.split(",") if args.runs else [_default_run_name(ws.cfg)]
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = 0
    for name in run_names:
        path = os.path.join(ws.run_dir(name.strip()), "metrics.csv")
        if not os.path.exists(path):
            raise UpstreamMissingError("pretrain", f"no metrics at {path}")
        rows = [r for r in read_metrics_csv(path) if r["knn5_acc"] is not None]
        ax.plot([r["epoch"] + 1 for r in rows], [r["knn5_acc"] for r in rows],
                marker="o", label=name.strip())
        plotted += 1
    ax.set_xlabel("epoch")
    ax.set_ylabel("5-NN accuracy")
    ax.set_title("5-NN accuracy during training")
    ax.legend()
    ax.grid(alpha=0.3)
    os.makedirs(ws.path("plots"), exist_ok=True)
    out = args.out or ws.path("plots", "knn_curves.png")
    fig.savefig(out, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return {"plot": out, "curves": plotted}


_SWEEP_STEPS = {
    "make-dataset": cmd_make_dataset,
    "invert": cmd_invert,
    "gen-views": cmd_gen_views,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "knn": cmd_knn,
}


def _link_upstream(base_ws: Workspace, cell_root: str) -> None:
    """Give a sweep cell read access to the base experiment's artifacts."""
    os.makedirs(cell_root, exist_ok=True)
    for rel in ("dataset", "inversions.cache", "runs"):
        src = os.path.join(base_ws.root, rel)
        dst = os.path.join(cell_root, rel)
        if os.path.exists(src) and not os.path.exists(dst):
            os.symlink(os.path.abspath(src), dst)


def cmd_sweep(ws: Workspace, args) -> dict:
    """Cartesian product over 'parameters'; 'paired' lists (equal length)
    advance in lockstep, e.g. epsilon2 tracking epsilon1 + 0.2."""
    with open(args.grid) as fh:
        grid = json.load(fh)
    parameters = grid.get("parameters", {})
    paired = grid.get("paired", {})
    if not parameters and not paired:
        raise ConfigError("sweep grid needs a 'parameters' and/or 'paired' map")
    steps = grid.get("steps", ["pretrain", "probe"])
    unknown = [s for s in steps if s not in _SWEEP_STEPS]
    if unknown:
        raise ConfigError(f"unknown sweep step(s) {unknown}; choose from {sorted(_SWEEP_STEPS)}")

    axes = [[((n, v),) for v in parameters[n]] for n in sorted(parameters)]
    if paired:
        lengths = {len(v) for v in paired.values()}
        if len(lengths) != 1:
            raise ConfigError("paired sweep lists must share one length")
        paired_names = sorted(paired)
        axes.append([tuple((n, paired[n][i]) for n in paired_names)
                     for i in range(lengths.pop())])
    cells = [dict(pair for group in combo for pair in group)
             for combo in itertools.product(*axes)]
    os.makedirs(ws.path("sweep"), exist_ok=True)
    results_path = ws.path("sweep", "sweep_results.jsonl")
    rows = []
    with open(results_path, "w") as out:
        for index, overrides in enumerate(cells):
            cell_dict = json.loads(json.dumps(config_to_dict(ws.cfg)))
            for dotted, value in overrides.items():
                set_by_path(cell_dict, dotted, value)
            cell_dict["seed"] = ws.cfg.seed + index
            cell_root = ws.path("sweep", f"cell_{index:03d}")
            cell_dict["output_dir"] = cell_root
            row = {"cell": index, "overrides": overrides, "seed": cell_dict["seed"]}
            try:
                cell_cfg = config_from_dict(cell_dict)
                cell_ws = Workspace(cell_cfg)
                _link_upstream(ws, cell_root)
                row["config_hash"] = cell_ws.hash
                metrics = {}
                for step in steps:
                    out_step = _SWEEP_STEPS[step](cell_ws, args)
                    if "value" in out_step:
                        metrics[out_step["metric"]] = out_step["value"]
                row["status"] = "ok"
                row["metrics"] = metrics
            except Exception as exc:  # noqa: BLE001 - a cell failure must not stop the sweep
                row["status"] = "error"
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            out.write(json.dumps(row, sort_keys=True) + "\n")
    ok = sum(1 for r in rows if r["status"] == "ok")
    return {"results": results_path, "cells": len(rows), "ok": ok}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentviews",
                                     description="Learned-view contrastive learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON (defaults used if omitted)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--output", help="override config output_dir")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        p.add_argument("--run-name", default=None, help="pretraining run name")

    for name in ("make-dataset", "invert", "gen-views", "pretrain", "probe", "knn"):
        common(sub.add_parser(name))
    p_mi = sub.add_parser("mi")
    common(p_mi)
    p_mi.add_argument("--pair", default="expert", choices=["expert", "w_search", "w_perturb"])
    p_mi.add_argument("--representation", default="embedding", choices=["embedding", "pixel"])
    p_plot = sub.add_parser("plot")
    common(p_plot)
    p_plot.add_argument("--runs", help="comma-separated run names to overlay")
    p_plot.add_argument("--out", help="output image path")
    p_sweep = sub.add_parser("sweep")
    common(p_sweep)
    p_sweep.add_argument("--grid", required=True, help="grid spec JSON")
    return parser


_COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "invert": cmd_invert,
    "gen-views": cmd_gen_views,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "knn": cmd_knn,
    "mi": cmd_mi,
    "plot": cmd_plot,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output is not None:
            cfg.output_dir = args.output
        os.makedirs(cfg.output_dir, exist_ok=True)
        ws = Workspace(cfg)
        save_config(cfg, ws.path("config_used.json"))
        result = _COMMANDS[args.command](ws, args)
        print(json.dumps(result, sort_keys=True))
        return 0
    except UpstreamMissingError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "required_subcommand": exc.required_subcommand}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not crashes
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
