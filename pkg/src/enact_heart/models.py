"""The two experts: a small CNN for centroid graphs and a ViT for spectrograms."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import nn_core as nn
from .errors import EmptySplit, ShapeMismatch
from .manifest import N_CLASSES, Manifest, Split

log = logging.getLogger(__name__)

# small classifier heads keep the initial prediction close to uniform (loss ~ ln 5)
HEAD_GAIN = 0.25


@dataclass(frozen=True)
class CnnConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    pool: int = 2
    dropout: float = 0.25
    image_size: int = 64
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ValueError("the CNN has exactly three conv stages")

    def feature_side(self) -> int:
        side = self.image_size
        for _ in self.channels:
            side = (side - self.kernel + 1) // self.pool
        return side


@dataclass(frozen=True)
class VitConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 128
    image_size: int = 64
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    lr: float = 1e-3
    seed: int = 0
    eval_batch: int = 256

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")


class Model:
    """Named, ordered parameters plus a ``forward`` producing ``[B, classes]`` logits."""

    kind = "model"

    def __init__(self):
        self.params: dict[str, nn.Tensor] = {}
        self.rng = np.random.default_rng(0)

    def add_param(self, name: str, data) -> nn.Tensor:
        t = nn.parameter(data, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[nn.Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield name, p.data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeMismatch(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Model":
        clone = copy.deepcopy(self)
        for p in clone.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.named_arrays())

    def load(self, path) -> None:
        self.load_state_dict(nn.load_checkpoint(path))

    def _check_images(self, images: np.ndarray, size: int) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        if images.ndim != 3 or images.shape[1:] != (size, size):
            raise ShapeMismatch(f"{self.kind} expects [B, {size}, {size}] images, got {images.shape}")
        return images.astype(self.dtype, copy=False)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, images: np.ndarray, train: bool = False) -> nn.Tensor:
        raise NotImplementedError


class CNN(Model):
    """conv-relu-pool x3, dropout, dense head."""

    kind = "cnn"

    def __init__(self, cfg: CnnConfig = CnnConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c_in = 1
        k = cfg.kernel
        for i, c_out in enumerate(cfg.channels, start=1):
            fan_in = c_in * k * k
            self.add_param(f"conv{i}.weight", nn.kaiming_uniform(rng, (c_out, c_in, k, k), fan_in))
            self.add_param(f"conv{i}.bias", np.zeros(c_out, dtype=nn.DEFAULT_DTYPE))
            c_in = c_out
        flat = c_in * cfg.feature_side() ** 2
        self.add_param("head.weight", nn.kaiming_uniform(rng, (flat, cfg.n_classes), flat, HEAD_GAIN))
        self.add_param("head.bias", np.zeros(cfg.n_classes, dtype=nn.DEFAULT_DTYPE))
        self.rng = np.random.default_rng(seed + 1)

    def forward(self, images, train: bool = False) -> nn.Tensor:
        x = self._check_images(images, self.cfg.image_size)
        h = nn.Tensor(x[:, None])
        for i in range(1, len(self.cfg.channels) + 1):
            h = nn.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"])
            h = nn.maxpool2d(nn.relu(h), self.cfg.pool)
        h = nn.dropout(h, self.cfg.dropout, train, self.rng)
        h = h.reshape(h.shape[0], -1)
        return nn.linear(h, self.params["head.weight"], self.params["head.bias"])


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, H, W]`` -> ``[B, n_patches, patch*patch]``, patches in row-major order."""
    b, h, w = images.shape
    gh, gw = h // patch, w // patch
    return (
        images.reshape(b, gh, patch, gw, patch)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, gh * gw, patch * patch)
    )


class ViT(Model):
    """Pre-norm transformer encoder over 8x8 patches with a class token."""

    kind = "vit"

    def __init__(self, cfg: VitConfig = VitConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, p2 = cfg.dim, cfg.patch ** 2
        f32 = nn.DEFAULT_DTYPE

        def dense(name, fan_in, fan_out, gain=1.0):
            self.add_param(f"{name}.weight", nn.kaiming_uniform(rng, (fan_in, fan_out), fan_in, gain))
            self.add_param(f"{name}.bias", np.zeros(fan_out, dtype=f32))

        def norm(name):
            self.add_param(f"{name}.weight", np.ones(d, dtype=f32))
            self.add_param(f"{name}.bias", np.zeros(d, dtype=f32))

        dense("embed", p2, d)
        self.add_param("cls_token", rng.normal(0.0, 0.02, (1, 1, d)).astype(f32))
        self.add_param("pos_embed", rng.normal(0.0, 0.02, (1, cfg.n_patches + 1, d)).astype(f32))
        for i in range(cfg.depth):
            norm(f"block{i}.ln1")
            for proj in ("q", "k", "v", "out"):
                dense(f"block{i}.attn.{proj}", d, d)
            norm(f"block{i}.ln2")
            dense(f"block{i}.mlp.fc1", d, cfg.mlp_dim)
            dense(f"block{i}.mlp.fc2", cfg.mlp_dim, d)
        norm("ln_final")
        dense("head", d, cfg.n_classes, HEAD_GAIN)
        self.record_attention = False
        self.attention_maps: list[np.ndarray] = []

    def _dense(self, x: nn.Tensor, name: str) -> nn.Tensor:
        return nn.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _norm(self, x: nn.Tensor, name: str) -> nn.Tensor:
        return nn.layer_norm(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _attention(self, x: nn.Tensor, name: str, cls_only: bool = False) -> nn.Tensor:
        """Multi-head self-attention; with ``cls_only`` just the class-token query."""
        b, t, d = x.shape
        h = self.cfg.heads
        dh = d // h

        def heads(proj, src=x):
            return self._dense(src, f"{name}.{proj}").reshape(b, -1, h, dh).transpose(0, 2, 1, 3)

        q = heads("q", x[:, :1] if cls_only else x) * (1.0 / math.sqrt(dh))
        k, v = heads("k"), heads("v")
        attn = nn.softmax(q @ k.transpose(0, 1, 3, 2), axis=-1)
        if self.record_attention:
            self.attention_maps.append(attn.data.copy())
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, q.shape[2], d)
        return self._dense(ctx, f"{name}.out")

    def _block(self, x: nn.Tensor, i: int, cls_only: bool = False) -> nn.Tensor:
        a = self._attention(self._norm(x, f"block{i}.ln1"), f"block{i}.attn", cls_only)
        x = (x[:, :1] if cls_only else x) + a
        hmid = nn.gelu(self._dense(self._norm(x, f"block{i}.ln2"), f"block{i}.mlp.fc1"))
        return x + self._dense(hmid, f"block{i}.mlp.fc2")

    def tokens(self, patches: np.ndarray, pos_embed: nn.Tensor | None = None,
               cls_only: bool = False) -> nn.Tensor:
        """Embed ``[B, n_patches, patch*patch]`` and run the encoder.

        Returns all tokens, or with ``cls_only`` just ``[B, 1, dim]`` for the
        class token. Only the class token feeds the head, so the last block
        then skips the other queries and their MLP rows; the result is the
        same.
        """
        b = patches.shape[0]
        x = self._dense(nn.Tensor(patches), "embed")
        cls = nn.add(nn.Tensor(np.zeros((b, 1, self.cfg.dim), dtype=self.dtype)), self.params["cls_token"])
        x = nn.concat([cls, x], axis=1)
        x = x + (self.params["pos_embed"] if pos_embed is None else pos_embed)
        self.attention_maps = []
        for i in range(self.cfg.depth):
            x = self._block(x, i, cls_only and i == self.cfg.depth - 1)
        return self._norm(x, "ln_final")

    def forward(self, images, train: bool = False) -> nn.Tensor:
        x = self._check_images(images, self.cfg.image_size)
        tokens = self.tokens(patchify(x, self.cfg.patch), cls_only=not self.record_attention)
        return self._dense(tokens[:, 0, :], "head")


def build_model(kind: str, cnn_cfg: CnnConfig = CnnConfig(), vit_cfg: VitConfig = VitConfig(),
                seed: int = 0) -> Model:
    if kind == "cnn":
        return CNN(cnn_cfg, seed)
    if kind == "vit":
        return ViT(vit_cfg, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model: Model, images, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities; ``[B, classes]`` (or ``[classes]`` for one image)."""
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    out = []
    with nn.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(_softmax64(model.forward(images[start : start + batch_size]).data))
    probs = np.concatenate(out) if out else np.zeros((0, N_CLASSES))
    return probs[0] if single else probs


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    probs = predict_proba(model, images, batch_size)
    return float(np.mean(probs.argmax(axis=1) == labels))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    best_state: dict[str, np.ndarray] = field(default_factory=dict)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_accuracy"])
        for r in self.history:
            w.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.val_accuracy:.8f}"])
        return buf.getvalue()


def train_arrays(
    model: Model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    progress=None,
) -> TrainResult:
    """Adam on mean cross-entropy; keeps the parameters of the best validation epoch."""
    if len(train_x) == 0:
        raise EmptySplit("training split is empty")
    if len(val_x) == 0:
        raise EmptySplit("validation split is empty")
    rng = np.random.default_rng(cfg.seed)
    model.rng = np.random.default_rng([cfg.seed, 1])
    params = model.parameters()
    state = nn.AdamState(lr=cfg.lr)
    result = TrainResult(best_val_accuracy=-1.0)
    n = len(train_x)
    train_x = np.asarray(train_x, dtype=model.dtype)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = nn.cross_entropy(model.forward(train_x[idx], train=True), train_y[idx])
            nn.backward(loss)
            nn.adam_step(params, [p.grad for p in params], state)
            total += loss.item() * len(idx)
        val_acc = accuracy(model, val_x, val_y, cfg.eval_batch)
        record = EpochRecord(epoch, total / n, val_acc)
        result.history.append(record)
        if val_acc > result.best_val_accuracy:
            result.best_val_accuracy = val_acc
            result.best_epoch = epoch
            result.best_state = model.state_dict()
        log.info("%s epoch %d loss %.4f val_acc %.4f", model.kind, epoch, record.train_loss, val_acc)
        if progress is not None:
            progress(record)
    model.load_state_dict(result.best_state)
    return result


def train(model: Model, images: np.ndarray, manifest: Manifest, cfg: TrainConfig = TrainConfig(),
          progress=None) -> TrainResult:
    """Train on the manifest's train split; ``images`` is aligned with ``manifest``."""
    images = np.asarray(images)
    if len(images) != len(manifest):
        raise ShapeMismatch(f"{len(images)} images for {len(manifest)} manifest records")
    labels = manifest.labels()
    is_train = np.array([r.split is Split.TRAIN for r in manifest], dtype=bool)
    return train_arrays(
        model, images[is_train], labels[is_train], images[~is_train], labels[~is_train], cfg, progress
    )
