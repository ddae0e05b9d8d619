"""``raresynth`` command-line interface.

Every command reads a JSON config (``--config``; profile defaults otherwise),
writes ``resolved_config.json`` next to its outputs and replaces output files
atomically. On failure it prints exactly one line to stderr,
``error: <category>: <message>``, and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import __version__, pipeline
from .checkpoint import load_adapter, load_classifier, load_diffusion, save_adapter, save_classifier, save_diffusion
from .config import PipelineConfig, load_config
from .data import POSITIVE, SYNTHETIC, Dataset, load_image_dir, write_image_dir
from .diversity import PERCEPTUAL_LABEL, compare_diversity
from .errors import InvalidArgument, RareSynthError
from .io import atomic_write_json, atomic_write_text
from .report import format_markdown, format_table
from .rng import derive_seed
from .svg import histogram_overlay, metric_vs_ratio
from .sweep import aggregate_csv, read_results_csv, results_csv, run_sweep

log = logging.getLogger("raresynth")

EXIT_CODES = {"invalid-argument": 2, "format-error": 3, "checkpoint-error": 4, "not-found": 5}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidArgument(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (profile defaults if omitted)")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="raresynth", description="Rare-class synthetic augmentation pipeline.")
    ap.add_argument("--version", action="version", version=f"raresynth {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train the class-conditional base diffusion model")
    _common(p)
    p.add_argument("--steps", type=int, help="override diffusion.train.steps")

    p = sub.add_parser("finetune", help="fit low-rank adapters on the rare class")
    _common(p)
    p.add_argument("--base", required=True, help="base diffusion checkpoint")
    p.add_argument("--rare", help="image directory whose positives form the adapter set")
    p.add_argument("--steps", type=int, help="override lora.steps")

    p = sub.add_parser("generate", help="sample a synthetic rare-class pool")
    _common(p)
    p.add_argument("--base", required=True, help="base diffusion checkpoint")
    p.add_argument("--adapter", help="adapter checkpoint")
    p.add_argument("--n", type=int, help="number of images")
    p.add_argument("--steps", type=int, help="denoising steps")
    p.add_argument("--guidance", type=float, help="classifier-free guidance scale")
    p.add_argument("--eta", type=float, help="DDIM eta (0 = deterministic)")
    p.add_argument("--seed0", type=int, help="seed of the first image")

    p = sub.add_parser("sweep", help="ratio sweep with stratified cross-validation")
    _common(p)
    p.add_argument("--pool", help="synthetic pool directory (generated in-process if omitted)")
    p.add_argument("--base", help="base checkpoint used when generating in-process")
    p.add_argument("--adapter", help="adapter checkpoint used when generating in-process")
    p.add_argument("--real", help="real image directory (domain generator if omitted)")

    p = sub.add_parser("diversity", help="pairwise diversity of real vs synthetic positives")
    _common(p)
    p.add_argument("--real", help="real image directory (domain generator if omitted)")
    p.add_argument("--synth", required=True, help="synthetic pool directory")
    p.add_argument("--classifier", help="classifier checkpoint for the perceptual embedding")

    p = sub.add_parser("report", help="format a results CSV as a table")
    _common(p)
    p.add_argument("--results", required=True, help="results CSV written by 'sweep'")
    return ap


# ---------------------------------------------------------------------------


def _resolve(args) -> tuple[PipelineConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise InvalidArgument("--seed must be non-negative")
        cfg = cfg.replace(seed=args.seed)
    if args.jobs < 1:
        raise InvalidArgument("--jobs must be >= 1")
    out = Path(args.out if args.out else cfg.out_dir)
    cfg = cfg.replace(out_dir=str(out))
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _loss_csv(log_rows) -> str:
    return "step,loss\n" + "".join(f"{s},{v:.6g}\n" for s, v in log_rows)


def _real(cfg: PipelineConfig, path: str | None) -> Dataset:
    if path:
        return load_image_dir(path, image_size=cfg.image_size, domain=cfg.data.domain)
    return pipeline.real_data(cfg)[0]


def _pool(cfg: PipelineConfig, path: str) -> Dataset:
    return load_image_dir(path, image_size=cfg.image_size, origin=SYNTHETIC, domain=cfg.data.domain)


def cmd_pretrain(args, cfg: PipelineConfig, out: Path) -> None:
    if args.steps is not None:
        cfg = cfg.replace(diffusion={**cfg.to_dict()["diffusion"], "train": {**cfg.to_dict()["diffusion"]["train"], "steps": args.steps}})
    atomic_write_text(out / "resolved_config.json", cfg.to_json())
    model, curve = pipeline.pretrain(cfg)
    save_diffusion(out / "base.rsck", model, cfg.to_dict())
    atomic_write_text(out / "pretrain_loss.csv", _loss_csv(curve))


def cmd_finetune(args, cfg: PipelineConfig, out: Path) -> None:
    if args.steps is not None:
        cfg = cfg.replace(lora={**cfg.to_dict()["lora"], "steps": args.steps})
    atomic_write_text(out / "resolved_config.json", cfg.to_json())
    base, _ = load_diffusion(args.base)
    if args.rare:
        rare = load_image_dir(args.rare, image_size=cfg.image_size, domain=cfg.data.domain).filter(label=POSITIVE)
    else:
        rare = pipeline.real_data(cfg)[1]
    adapted, curve = pipeline.finetune(cfg, base, rare)
    save_adapter(out / "adapter.rsck", adapted, cfg.to_dict())
    atomic_write_text(out / "finetune_loss.csv", _loss_csv(curve))


def _load_generator(cfg: PipelineConfig, base: str, adapter: str | None):
    model, _ = load_diffusion(base)
    if adapter:
        model, _ = load_adapter(adapter, model)
    return model


def cmd_generate(args, cfg: PipelineConfig, out: Path) -> None:
    g = cfg.to_dict()["generate"]
    sampler = dict(g["sampler"])
    for flag, key in (("steps", "steps"), ("guidance", "guidance_scale"), ("eta", "eta")):
        if getattr(args, flag) is not None:
            sampler[key] = getattr(args, flag)
    g["sampler"] = sampler
    if args.n is not None:
        g["pool_size"] = args.n
    if args.seed0 is not None:
        g["seed0"] = args.seed0
    cfg = cfg.replace(generate=g)
    cfg.generate.sampler.validate(pipeline.schedule(cfg))
    atomic_write_text(out / "resolved_config.json", cfg.to_json())
    pool = pipeline.generate(cfg, _load_generator(cfg, args.base, args.adapter))
    write_image_dir(pool, out / "pool")


def _sweep_plot(agg: list[dict], mode: str = "mixed") -> str:
    series = {m: {r["ratio"]: r[f"{m}_mean"] for r in agg if r["mode"] == mode} for m in ("f1", "pr_auc", "recall")}
    names = {"f1": "F1", "pr_auc": "PR-AUC", "recall": "Recall"}
    return metric_vs_ratio({names[k]: v for k, v in series.items()}, "Classification metrics vs synthetic ratio", "mean over folds x seeds")


def cmd_sweep(args, cfg: PipelineConfig, out: Path) -> None:
    atomic_write_text(out / "resolved_config.json", cfg.to_json())
    real = _real(cfg, args.real)
    pool = pool_for = None
    if args.pool:
        if cfg.sweep.refit_lora_per_fold:
            raise InvalidArgument("--pool cannot be combined with sweep.refit_lora_per_fold")
        pool = _pool(cfg, args.pool)
    else:
        if args.base:
            base, _ = load_diffusion(args.base)
        else:
            base, _ = pipeline.pretrain(cfg)
        if cfg.sweep.refit_lora_per_fold:
            cache: dict[tuple[int, int], Dataset] = {}

            def pool_for(fold, si, train):
                if (fold, si) not in cache:
                    adapted, _ = pipeline.finetune(cfg, base, train.filter(label=POSITIVE), tag=(fold, si))
                    cache[(fold, si)] = pipeline.generate(cfg, adapted)
                return cache[(fold, si)]

        else:
            if args.adapter:
                model, _ = load_adapter(args.adapter, base)
            else:
                model, _ = pipeline.finetune(cfg, base, pipeline.real_data(cfg)[1])
            pool = pipeline.generate(cfg, model)
    res = run_sweep(
        cfg,
        real,
        pool=pool,
        pool_for=pool_for,
        jobs=args.jobs,
        progress=lambda i, n: log.info("run %d/%d", i, n),
    )
    atomic_write_text(out / "results.csv", results_csv(res.results, cfg.sweep.record_wall_time))
    atomic_write_text(out / "aggregate.csv", aggregate_csv(res.aggregate))
    atomic_write_text(out / "sweep.svg", _sweep_plot(res.aggregate))


def cmd_diversity(args, cfg: PipelineConfig, out: Path) -> None:
    atomic_write_text(out / "resolved_config.json", cfg.to_json())
    real_all = _real(cfg, args.real)
    synth = _pool(cfg, args.synth)
    if args.classifier:
        clf, _ = load_classifier(args.classifier)
    else:
        clf = pipeline.reference_classifier(cfg, real_all)
        save_classifier(out / "reference_classifier.rsck", clf, cfg.to_dict())
    d = cfg.diversity
    rep = compare_diversity(
        real_all.filter(label=POSITIVE),
        synth,
        clf,
        budget=d.max_pairs,
        seed=derive_seed(cfg.seed, "diversity"),
        delta_psnr=d.delta_psnr,
        collapse_std_ratio=d.collapse_std_ratio,
        bins=d.bins,
    )
    atomic_write_json(out / "diversity.json", rep.to_dict())
    for name, a, b, xlabel in (
        ("psnr_hist.svg", rep.psnr_real, rep.psnr_synth, "pairwise PSNR (dB)"),
        ("perceptual_hist.svg", rep.percep_real, rep.percep_synth, PERCEPTUAL_LABEL),
    ):
        svg = histogram_overlay(a.bin_edges, {"real": a.counts, "synthetic": b.counts}, "Pairwise diversity", xlabel)
        atomic_write_text(out / name, svg)


def cmd_report(args, cfg: PipelineConfig, out: Path) -> None:
    rows = read_results_csv(args.results)
    if not rows:
        raise InvalidArgument(f"{args.results}: no result rows")
    atomic_write_text(out / "resolved_config.json", cfg.to_json())
    table = format_table(rows)
    atomic_write_text(out / "table.txt", table)
    atomic_write_text(out / "table.md", format_markdown(rows))
    sys.stdout.write(table)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "sweep": cmd_sweep,
    "diversity": cmd_diversity,
    "report": cmd_report,
}


def _category(e: BaseException) -> str:
    if isinstance(e, RareSynthError):
        return e.category
    if isinstance(e, FileNotFoundError):
        return "not-found"
    if isinstance(e, (ValueError, TypeError)):
        return "invalid-argument"
    return "internal-error"


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        cfg, out = _resolve(args)
        COMMANDS[args.command](args, cfg, out)
        return 0
    except KeyboardInterrupt:
        print("error: interrupted: keyboard interrupt", file=sys.stderr)
        return 130
    except Exception as e:  # noqa: BLE001 - single reporting point
        cat = _category(e)
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
