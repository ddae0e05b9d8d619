"""Downstream rare-class detector: a small residual CNN with one logit,
trained with class-weighted logistic loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NEGATIVE, POSITIVE, Dataset
from .errors import InvalidArgument
from .rng import derive_seed, seeded_torch, torch_generator

LOGIT_CAP = 30.0


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    pos_weight: float | str = "auto"
    seed: int = 0
    widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.pos_weight != "auto" and not float(self.pos_weight) > 0:
            raise InvalidArgument("pos_weight must be positive or 'auto'")


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class ResNetSmall(nn.Module):
    """Stride-2 stem, three residual stages, global average pool, one logit."""

    def __init__(self, widths: tuple[int, ...] = (16, 32, 64)):
        super().__init__()
        self.widths = tuple(widths)
        self.stem = nn.Sequential(nn.Conv2d(1, widths[0], 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU())
        stages = []
        c = widths[0]
        for i, w in enumerate(widths):
            stages.append(BasicBlock(c, w, 1 if i == 0 else 2))
            c = w
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(c, 1)

    @property
    def embedding_dim(self) -> int:
        return self.widths[-1]

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stages(self.stem((x - 0.5) / 0.5))
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))[:, 0]


class ClassifierModel:
    """Trained network plus the metadata needed to use it."""

    def __init__(self, net: ResNetSmall, image_size: int, trained: bool = False, history: list | None = None):
        self.net = net
        self.image_size = image_size
        self.trained = trained
        self.history = history or []

    def _tensor(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=next(self.net.parameters()).dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or tuple(x.shape[1:]) != (1, self.image_size, self.image_size):
            raise InvalidArgument(
                f"expected images of shape (N, {self.image_size}, {self.image_size}), got {tuple(np.shape(images))}"
            )
        return x

    @torch.no_grad()
    def logits(self, images) -> np.ndarray:
        # one image per forward pass: batched conv kernels reorder float sums,
        # so a score would otherwise depend on its batch neighbours
        x = self._tensor(images)
        self.net.eval()
        out = [self.net(x[i : i + 1]) for i in range(x.shape[0])]
        return torch.cat(out).double().numpy() if out else np.zeros(0)

    @torch.no_grad()
    def embed(self, images) -> np.ndarray:
        if not self.trained:
            raise InvalidArgument("embeddings of an untrained classifier are meaningless; train or load one first")
        x = self._tensor(images)
        self.net.eval()
        out = [self.net.embed(x[i : i + 1]) for i in range(x.shape[0])]
        return torch.cat(out).double().numpy()


def build_classifier(widths: tuple[int, ...], seed: int, image_size: int = 32, dtype=torch.float32) -> ClassifierModel:
    with seeded_torch(seed):
        net = ResNetSmall(widths)
    return ClassifierModel(net.to(dtype), image_size)


def compute_pos_weight(train: Dataset) -> float:
    """``N_neg / N_pos`` over the assembled set (synthetic positives count)."""
    n_pos = train.count(label=POSITIVE)
    n_neg = train.count(label=NEGATIVE)
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgument(f"both classes required (positives={n_pos}, negatives={n_neg})")
    return n_neg / n_pos


def weighted_bce_loss(logits, labels, pos_weight: float) -> tuple[float, np.ndarray]:
    """Mean of ``-w y log s(z) - (1-y) log(1-s(z))`` and its gradient in ``z``.

    Uses ``log s(z) = -softplus(-z)`` with a log-sum-exp softplus, so large
    ``|z|`` neither overflows nor loses the loss value.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise InvalidArgument(f"logits {z.shape} and labels {y.shape} differ in shape")
    if z.size == 0:
        raise InvalidArgument("empty batch")
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("non-finite logits")
    w = float(pos_weight)
    sp_neg = np.logaddexp(0.0, -z)  # -log s(z)
    sp_pos = np.logaddexp(0.0, z)  # -log(1 - s(z))
    loss = float(np.mean(w * y * sp_neg + (1.0 - y) * sp_pos))
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    grad = (w * y * (sig - 1.0) + (1.0 - y) * sig) / z.size
    return loss, grad


def weighted_bce_torch(z: torch.Tensor, y: torch.Tensor, pos_weight: float) -> torch.Tensor:
    """Autograd form of :func:`weighted_bce_loss`."""
    return (pos_weight * y * F.softplus(-z) + (1.0 - y) * F.softplus(z)).mean()


def train_classifier(
    train: Dataset,
    cfg: TrainConfig,
    dtype=torch.float32,
) -> tuple[ClassifierModel, list[tuple[int, float]]]:
    """Fixed-epoch Adam training; returns the model and ``(epoch, mean loss)`` rows."""
    n_pos, n_neg = train.count(label=POSITIVE), train.count(label=NEGATIVE)
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgument(f"classifier training needs both classes (positives={n_pos}, negatives={n_neg})")
    w = compute_pos_weight(train) if cfg.pos_weight == "auto" else float(cfg.pos_weight)
    images = train.images()
    model = build_classifier(cfg.widths, derive_seed(cfg.seed, "clf-init"), images.shape[-1], dtype)
    x_all = torch.as_tensor(images, dtype=dtype)[:, None]
    y_all = torch.as_tensor(train.labels(), dtype=dtype)
    g = torch_generator(derive_seed(cfg.seed, "clf-batches"))
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[tuple[int, float]] = []
    n = len(train)
    for epoch in range(cfg.epochs):
        model.net.train()
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            if idx.numel() < 2:  # BatchNorm needs >1 sample
                continue
            loss = weighted_bce_torch(model.net(x_all[idx]), y_all[idx], w)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * idx.numel()
        history.append((epoch, total / n))
    model.net.eval()
    model.trained = cfg.epochs > 0
    model.history = history
    return model, history


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=np.float64), -LOGIT_CAP, LOGIT_CAP)
    return 1.0 / (1.0 + np.exp(-z))


def predict_scores(model: ClassifierModel, images) -> np.ndarray:
    """Positive-class probabilities in the open interval (0, 1).

    Logits are capped at +/-30 before the sigmoid so the result never rounds
    to exactly 0 or 1; the map is strictly increasing inside the cap.
    """
    return sigmoid(model.logits(images))

