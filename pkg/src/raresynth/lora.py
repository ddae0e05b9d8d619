"""Low-rank adapters for the frozen noise predictor.

Each targeted weight ``W`` (``d_out x d_in``; a ``k x k`` conv kernel is
treated as ``d_out x (d_in k k)``) gets a trainable pair ``A`` (``r x d_in``)
and ``B`` (``d_out x r``). The adapted layer computes

    W x + (alpha / r) * B (A dropout(x))

with ``B = 0`` at creation, so a freshly attached model reproduces the base
model exactly. Only ``A`` and ``B`` are ever trained.
"""

from __future__ import annotations

import copy
import fnmatch
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import POSITIVE, REAL, Dataset
from .diffusion import NoiseSchedule, batch_tensors, diffusion_loss
from .errors import InvalidArgument
from .rng import derive_seed, torch_generator


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 8.0
    dropout: float = 0.08
    # "all", "linear", "conv", or a list of fnmatch patterns over module names
    targets: str | list[str] = "all"
    steps: int = 200
    lr: float = 5e-3
    batch_size: int = 16
    grad_clip: float = 1.0
    log_every: int = 10

    def __post_init__(self):
        if self.rank < 1:
            raise InvalidArgument("LoRA rank must be >= 1")
        if not (self.alpha > 0 and math.isfinite(self.alpha / self.rank)):
            raise InvalidArgument("LoRA alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgument("LoRA dropout must be in [0, 1)")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoRALayer(nn.Module):
    """A frozen ``nn.Linear``/``nn.Conv2d`` plus a low-rank residual."""

    def __init__(self, base: nn.Linear | nn.Conv2d, rank: int, alpha: float, dropout: float, gen: torch.Generator):
        super().__init__()
        if isinstance(base, nn.Conv2d) and base.groups != 1:
            raise InvalidArgument("grouped convolutions cannot be adapted")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        w = base.weight
        d_out, d_in = w.shape[0], int(w[0].numel())
        self.rank = rank
        self.scale = alpha / rank
        self.p = dropout
        bound = 1.0 / math.sqrt(d_in)
        a = (torch.rand((rank, d_in), generator=gen, dtype=torch.float64) * 2.0 - 1.0) * bound
        self.A = nn.Parameter(a.to(w.dtype))
        self.B = nn.Parameter(torch.zeros((d_out, rank), dtype=w.dtype))
        self.dropout_gen: torch.Generator | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def _drop(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        if self.dropout_gen is None:
            return F.dropout(x, self.p, training=True)
        keep = torch.rand(x.shape, generator=self.dropout_gen, dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)

    def delta_weight(self) -> torch.Tensor:
        return (self.scale * (self.B @ self.A)).view_as(self.base.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        h = self._drop(x)
        if isinstance(self.base, nn.Linear):
            h = F.linear(F.linear(h, self.A), self.B)
        else:
            conv = self.base
            k = self.A.view(self.rank, conv.in_channels, *conv.kernel_size)
            h = F.conv2d(h, k, None, conv.stride, conv.padding, conv.dilation)
            h = F.conv2d(h, self.B[:, :, None, None])
        return out + self.scale * h


class AdaptedModel(nn.Module):
    """A base noise predictor with LoRA layers swapped in for the targets."""

    def __init__(self, net: nn.Module, cfg: LoRAConfig):
        super().__init__()
        self.net = net
        self.cfg = cfg

    def forward(self, x, t, c):
        return self.net(x, t, c)

    def adapters(self) -> dict[str, LoRALayer]:
        return {name: m for name, m in self.net.named_modules() if isinstance(m, LoRALayer)}

    def lora_parameters(self) -> list[nn.Parameter]:
        return [p for m in self.adapters().values() for p in (m.A, m.B)]

    def base_parameters(self) -> dict[str, torch.Tensor]:
        """Frozen base tensors under their original (unwrapped) names."""
        out = {}
        for name, p in self.net.named_parameters():
            if name.endswith(".A") or name.endswith(".B"):
                continue
            out[name.replace(".base.", ".")] = p
        return out

    def n_trainable(self) -> int:
        return sum(p.numel() for p in self.lora_parameters())

    def set_dropout_generator(self, gen: torch.Generator | None) -> None:
        for m in self.adapters().values():
            m.dropout_gen = gen


def _selected(name: str, module: nn.Module, targets) -> bool:
    if not isinstance(module, (nn.Linear, nn.Conv2d)):
        return False
    if targets == "all":
        return True
    if targets == "linear":
        return isinstance(module, nn.Linear)
    if targets == "conv":
        return isinstance(module, nn.Conv2d)
    if isinstance(targets, str):
        targets = [targets]
    return any(fnmatch.fnmatchcase(name, pat) for pat in targets)


def attach_lora(model: nn.Module, cfg: LoRAConfig, seed: int = 0) -> AdaptedModel:
    """Copy ``model``, freeze it, and wrap every selected weight with an adapter.

    The input model is left untouched.
    """
    if isinstance(model, AdaptedModel):
        raise TypeError("model already carries adapters; merge it first")
    net = copy.deepcopy(model)
    for p in net.parameters():
        p.requires_grad_(False)
    names = [n for n, m in net.named_modules() if n and _selected(n, m, cfg.targets)]
    if not names:
        raise InvalidArgument(f"LoRA target selector {cfg.targets!r} matched no weight matrices")
    gen = torch_generator(derive_seed(seed, "lora-init"))
    for name in names:
        parent_name, _, attr = name.rpartition(".")
        parent = net.get_submodule(parent_name) if parent_name else net
        base = getattr(parent, attr)
        setattr(parent, attr, LoRALayer(base, cfg.rank, cfg.alpha, cfg.dropout, gen))
    adapted = AdaptedModel(net, cfg)
    adapted.train(model.training)
    return adapted


def finetune_lora(
    adapted: AdaptedModel,
    rare: Dataset,
    sched: NoiseSchedule,
    cfg: LoRAConfig | None = None,
    seed: int = 0,
) -> tuple[AdaptedModel, list[tuple[int, float]]]:
    """Fit the adapters on real rare-class images, in place.

    Every image is conditioned on the positive token (the analogue of a fixed
    caption) and label dropout is off. Returns the model and a ``(step, loss)``
    log.
    """
    cfg = cfg or adapted.cfg
    if len(rare) == 0:
        raise InvalidArgument("rare set is empty")
    bad = [s.id for s in rare if s.label != POSITIVE or s.origin != REAL]
    if bad:
        raise InvalidArgument(f"rare set must hold only real positives; offending ids: {bad[:5]}")
    x_all, y_all = batch_tensors(rare.samples, dtype=next(adapted.parameters()).dtype)
    params = adapted.lora_parameters()
    g = torch_generator(derive_seed(seed, "lora-train"))
    adapted.set_dropout_generator(torch_generator(derive_seed(seed, "lora-dropout")))
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    log: list[tuple[int, float]] = []
    adapted.train()
    bs = min(cfg.batch_size, len(rare))
    for step in range(cfg.steps):
        idx = torch.randint(0, len(rare), (bs,), generator=g)
        loss = diffusion_loss(adapted, x_all[idx], y_all[idx], sched, g, p_uncond=0.0)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append((step, float(loss.detach())))
    adapted.eval()
    adapted.set_dropout_generator(None)
    return adapted, log


@torch.no_grad()
def merge_lora(adapted: AdaptedModel) -> nn.Module:
    """Fold ``(alpha/r) B A`` into each base weight and return a plain model."""
    if not isinstance(adapted, AdaptedModel):
        raise TypeError(f"merge_lora expects an AdaptedModel, got {type(adapted).__name__}")
    net = copy.deepcopy(adapted.net)
    for name, layer in list((n, m) for n, m in net.named_modules() if isinstance(m, LoRALayer)):
        base = layer.base
        base.weight.copy_(base.weight + layer.delta_weight())
        parent_name, _, attr = name.rpartition(".")
        parent = net.get_submodule(parent_name) if parent_name else net
        setattr(parent, attr, base)
    for p in net.parameters():
        p.requires_grad_(True)
    net.eval()
    return net


def adapter_state(adapted: AdaptedModel) -> dict[str, torch.Tensor]:
    return {f"{name}.{k}": getattr(m, k).detach() for name, m in adapted.adapters().items() for k in ("A", "B")}


@torch.no_grad()
def load_adapter_state(adapted: AdaptedModel, state: dict[str, torch.Tensor]) -> None:
    layers = adapted.adapters()
    expected = {f"{n}.{k}" for n in layers for k in ("A", "B")}
    if set(state) != expected:
        missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
        raise InvalidArgument(f"adapter state mismatch: missing={missing[:3]} unexpected={extra[:3]}")
    for key, value in state.items():
        name, _, k = key.rpartition(".")
        target = getattr(layers[name], k)
        if tuple(target.shape) != tuple(value.shape):
            raise InvalidArgument(f"adapter tensor {key}: shape {tuple(value.shape)} != {tuple(target.shape)}")
        target.copy_(value.to(target.dtype))
