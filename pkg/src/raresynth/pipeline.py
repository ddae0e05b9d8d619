"""Stage functions driven by a :class:`PipelineConfig`.

Each stage derives its seeds from ``cfg.seed`` and a stage tag, so stages can
be run separately (CLI) or chained in-process (sweep) with identical results.
"""

from __future__ import annotations

import dataclasses
import logging

from torch import nn

from .classifier import ClassifierModel, train_classifier
from .config import PipelineConfig
from .data import Dataset, build_pretrain_corpus, build_real_corpus, quantize
from .diffusion import NoiseSchedule, UNet, build_noise_schedule, generate_pool, pretrain_diffusion
from .lora import AdaptedModel, attach_lora, finetune_lora, merge_lora
from .rng import derive_seed

log = logging.getLogger(__name__)


def schedule(cfg: PipelineConfig) -> NoiseSchedule:
    return build_noise_schedule(cfg.diffusion.T, cfg.diffusion.schedule)


def real_data(cfg: PipelineConfig) -> tuple[Dataset, Dataset]:
    """``(real corpus, adapter set)`` for the configured domain."""
    d = cfg.data
    return build_real_corpus(d.domain, d.params, d.n_neg, d.n_pos, d.n_lora, derive_seed(cfg.seed, "real"))


def pretrain(cfg: PipelineConfig) -> tuple[UNet, list[tuple[int, float]]]:
    d = cfg.data
    corpus = build_pretrain_corpus(d.domain, d.params, d.n_pretrain, d.pretrain_pos_fraction, derive_seed(cfg.seed, "pretrain-data"))
    log.info("pretraining on %d images for %d steps", len(corpus), cfg.diffusion.train.steps)
    return pretrain_diffusion(
        corpus,
        cfg.diffusion.train,
        derive_seed(cfg.seed, "pretrain"),
        spec=cfg.diffusion.unet_spec(cfg.image_size),
        sched=schedule(cfg),
    )


def finetune(cfg: PipelineConfig, base: nn.Module, rare: Dataset, tag: tuple = ()) -> tuple[AdaptedModel, list[tuple[int, float]]]:
    adapted = attach_lora(base, cfg.lora, seed=derive_seed(cfg.seed, "lora", *tag))
    log.info("fine-tuning adapters on %d rare images for %d steps", len(rare), cfg.lora.steps)
    return finetune_lora(adapted, rare, schedule(cfg), cfg.lora, seed=derive_seed(cfg.seed, "lora", *tag))


def generate(cfg: PipelineConfig, model: nn.Module, n: int | None = None, seed0: int | None = None) -> Dataset:
    """Sample the synthetic pool and round it to the 8-bit on-disk grid.

    Rounding here keeps in-process sweeps identical to sweeps that read the
    pool back from PNG files.
    """
    g = cfg.generate
    if isinstance(model, AdaptedModel):
        model = merge_lora(model)
    model.eval()
    n = g.pool_size if n is None else n
    log.info("sampling %d synthetic positives", n)
    pool = generate_pool(
        model,
        schedule(cfg),
        g.sampler,
        n,
        g.seed0 if seed0 is None else seed0,
        image_size=cfg.image_size,
        batch_size=g.batch_size,
        domain=cfg.data.domain,
    )
    return quantize(pool)


def reference_classifier(cfg: PipelineConfig, real: Dataset) -> ClassifierModel:
    """Classifier trained on all real data; its embedding defines the perceptual space."""
    tc = dataclasses.replace(cfg.classifier, seed=derive_seed(cfg.seed, "reference-clf"))
    model, _ = train_classifier(real, tc)
    return model
