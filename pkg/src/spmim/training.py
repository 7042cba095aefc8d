"""Masked-reconstruction pretraining, fine-tuning, optimizer, checkpoints.

The pretraining step is: sample a fresh per-image patch mask, expand it to
a pyramid, run the mask-aware encoder, substitute mask embeddings at
hidden positions, decode to a full-resolution image, and minimize the
mean squared error over hidden pixels only. Fine-tuning reloads encoder
weights, attaches a pooled classification head and trains dense (no
masks) with softmax cross-entropy.

Checkpoints are a binary format: magic ``SPMIM001``, a little-endian u32
length, a canonical JSON metadata document (config snapshot, epoch, RNG
seed, tensor directory with per-tensor CRC32), then raw float32
little-endian payloads in directory order. Saving a loaded checkpoint
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import Decoder, DecoderConfig, build_decoder
from .encoder import Encoder, EncoderConfig, StageSpec, build_encoder
from .errors import (
    ArgumentError,
    CheckpointCorruptionError,
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    DegenerateLossError,
    DimensionError,
    NumericsError,
)
from .masking import build_mask_pyramid, expand_mask, sample_mask, stack_pyramids
from .module import Module
from .sparse import MaskEmbedding, densify
from .tensor import (
    Tensor,
    cross_entropy,
    dropout,
    matmul,
    mul,
    no_grad,
    tmean,
    tsum,
)

CHECKPOINT_MAGIC = b"SPMIM001"
CHECKPOINT_VERSION = 1

# seed-derivation tags (stable, arbitrary constants)
_TAG_MASK = 1
_TAG_ORDER = 2
_TAG_DROPOUT = 3
_TAG_EMBED = 4
_TAG_DECODER = 5
_TAG_HEAD = 6


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# loss


def masked_mse_loss(recon: Tensor, target: Tensor, base_mask) -> Tensor:
    """Mean squared error over hidden pixels only, averaged over the batch.

    ``base_mask`` is one :class:`MaskGrid` shared by the batch or a
    sequence with one grid per sample. Visible pixels contribute exactly
    zero, to the value and to the gradient.
    """
    if recon.shape != target.shape:
        raise DimensionError(f"recon {recon.shape} != target {target.shape}")
    n, _, h, w = recon.shape
    grids = list(base_mask) if isinstance(base_mask, (list, tuple)) else [base_mask]
    if len(grids) == 1 and n > 1:
        grids = grids * n
    if len(grids) != n:
        raise DimensionError(f"{len(grids)} masks for a batch of {n}")
    hidden = np.stack([~expand_mask(g, h, w) for g in grids])[:, None]
    m_count = int(hidden.sum()) * recon.shape[1]
    if m_count == 0:
        raise DegenerateLossError("no masked pixels; loss undefined")
    diff = mul(recon - target, Tensor(hidden.astype(np.float64)))
    return tsum(diff * diff) * (1.0 / m_count)


def normalize_targets_per_patch(images: np.ndarray, grid_rows: int,
                                grid_cols: int, eps: float = 1e-6) -> np.ndarray:
    """Optional target transform: standardize each mask-grid patch.

    Each (H/rows, W/cols) patch of each channel is shifted/scaled to zero
    mean, unit variance. Off by default in training configs.
    """
    n, c, h, w = images.shape
    ph, pw = h // grid_rows, w // grid_cols
    patches = images.reshape(n, c, grid_rows, ph, grid_cols, pw)
    mean = patches.mean(axis=(3, 5), keepdims=True)
    var = patches.var(axis=(3, 5), keepdims=True)
    return ((patches - mean) / np.sqrt(var + eps)).reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    delta: float = 0.1       # <= 0 disables the projection entirely
    wd_ratio: float = 0.1


class AdamP:
    """Adam with bias correction, decoupled weight decay, and an update
    projection for scale-invariant weight tensors.

    For each multi-dimensional parameter the cosine similarity between the
    gradient and the weight is measured per channel row and per whole
    layer; if the largest similarity stays below ``delta / sqrt(view
    width)`` the weight is treated as scale-invariant, the update is
    projected orthogonal to the weight, and the weight decay is damped by
    ``wd_ratio``. ``delta <= 0`` disables the projection, leaving plain
    decoupled-weight-decay Adam.
    """

    def __init__(self, params: list[Tensor], config: OptimizerConfig = OptimizerConfig()):
        self.params = list(params)
        self.config = config
        self.lr = config.lr
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _project(self, p: np.ndarray, grad: np.ndarray,
                 perturb: np.ndarray) -> tuple[np.ndarray, float]:
        cfg = self.config
        expand = (-1,) + (1,) * (p.ndim - 1)
        for view in ("channel", "layer"):
            if view == "channel":
                pv = p.reshape(p.shape[0], -1)
                gv = grad.reshape(p.shape[0], -1)
            else:
                pv = p.reshape(1, -1)
                gv = grad.reshape(1, -1)
            dot = np.abs((gv * pv).sum(axis=1))
            norms = np.linalg.norm(gv, axis=1) * np.linalg.norm(pv, axis=1)
            cosine = dot / np.maximum(norms, cfg.eps)
            if cosine.max() < cfg.delta / math.sqrt(pv.shape[1]):
                row_norm = np.linalg.norm(pv, axis=1)
                row_norm = np.where(row_norm > 0, row_norm, 1.0)
                if view == "channel":
                    p_n = p / row_norm.reshape(expand)
                    coeff = (p_n * perturb).reshape(p.shape[0], -1).sum(axis=1)
                    perturb = perturb - p_n * coeff.reshape(expand)
                else:
                    p_n = p / row_norm[0]
                    perturb = perturb - p_n * (p_n * perturb).sum()
                return perturb, cfg.wd_ratio
        return perturb, 1.0

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        step_size = self.lr / bc1
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise NumericsError("optimizer step refused: non-finite gradient")
            m, v = self._m[i], self._v[i]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1 - cfg.beta2) * grad * grad
            denom = np.sqrt(v) / math.sqrt(bc2) + cfg.eps
            perturb = m / denom
            wd_scale = 1.0
            if cfg.delta > 0 and p.ndim > 1:
                perturb, wd_scale = self._project(p.data, grad, perturb)
            if cfg.weight_decay > 0:
                p.data *= 1.0 - self.lr * cfg.weight_decay * wd_scale
            p.data -= step_size * perturb

    def state_arrays(self) -> tuple[int, list[np.ndarray], list[np.ndarray]]:
        return self.t, self._m, self._v

    def load_state(self, t: int, m: list[np.ndarray], v: list[np.ndarray]) -> None:
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ConfigError("optimizer state does not match parameter list")
        self.t = t
        self._m = [np.array(a, dtype=np.float64) for a in m]
        self._v = [np.array(a, dtype=np.float64) for a in v]


# ---------------------------------------------------------------------------
# models


class ClassifierHead(Module):
    """Global average pool over the deepest scale, dropout, affine logits."""

    def __init__(self, in_channels: int, num_classes: int, dropout_p: float,
                 rng: np.random.Generator):
        if num_classes < 2:
            raise ConfigError("classifier needs at least two classes")
        std = math.sqrt(2.0 / in_channels)
        self.weight = Tensor(
            rng.standard_normal((in_channels, num_classes)) * std, requires_grad=True
        )
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)
        self._dropout_p = dropout_p

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def __call__(self, features: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        pooled = tmean(features, axis=(2, 3))
        if self._dropout_p > 0:
            pooled = dropout(pooled, self._dropout_p, rng=rng, training=training)
        return matmul(pooled, self.weight) + self.bias


class PretrainModel(Module):
    """Encoder, per-scale mask embeddings, and reconstruction decoder."""

    def __init__(self, encoder: Encoder, embeddings: MaskEmbedding, decoder: Decoder):
        self.encoder = encoder
        self.embeddings = embeddings
        self.decoder = decoder

    def reconstruct(self, images: Tensor, masks, training: bool = True,
                    rng: np.random.Generator | None = None) -> Tensor:
        scales = self.encoder.forward(images, pyramid=masks, training=training, rng=rng)
        s_prime = [
            densify(scales[i], masks.level(i + 1), self.embeddings.vector(i + 1))
            for i in range(len(scales))
        ]
        return self.decoder.forward(s_prime, training=training)


class Classifier(Module):
    """Encoder plus classification head, always run dense (no masks)."""

    def __init__(self, encoder: Encoder, head: ClassifierHead,
                 freeze_encoder: bool = False):
        self.encoder = encoder
        self.head = head
        self._freeze_encoder = freeze_encoder

    @property
    def frozen_encoder(self) -> bool:
        return self._freeze_encoder

    def forward_with_taps(self, images: Tensor, training: bool = False,
                          rng: np.random.Generator | None = None):
        if self._freeze_encoder:
            with no_grad():
                scales = self.encoder.forward(images, training=False)
        else:
            scales = self.encoder.forward(images, training=training, rng=rng)
        logits = self.head(scales[-1], training=training, rng=rng)
        return scales, logits

    def forward(self, images: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        return self.forward_with_taps(images, training=training, rng=rng)[1]

    def trainable_parameters(self) -> list[Tensor]:
        if self._freeze_encoder:
            return self.head.parameters()
        return self.parameters()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_probabilities(model: Classifier, images: np.ndarray,
                          batch_size: int = 32) -> np.ndarray:
    """Eval-mode class probabilities for a stack of images."""
    outputs = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.forward(Tensor(images[start : start + batch_size]),
                                   training=False)
            outputs.append(softmax(logits.data))
    return np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)  # float32
    epoch: int = 0
    seed: int = 0
    optimizer_step: int | None = None

    def param_names(self) -> list[str]:
        return list(self.tensors)


def collect_state(named_modules: list[tuple[str, Module]]) -> dict[str, np.ndarray]:
    """Parameters and persistent buffers as float32, stable order."""
    state: dict[str, np.ndarray] = {}
    for prefix, module in named_modules:
        for name, p in module.named_parameters(f"{prefix}."):
            state[name] = p.data.astype(np.float32)
        for name, buf in module.named_buffers(f"{prefix}."):
            state[name] = buf.astype(np.float32)
    return state


def load_state(named_modules: list[tuple[str, Module]],
               tensors: dict[str, np.ndarray]) -> None:
    """Write stored tensors back into modules (strict name matching)."""
    consumed = set()
    for prefix, module in named_modules:
        for name, p in module.named_parameters(f"{prefix}."):
            if name not in tensors:
                raise CheckpointFormatError(f"checkpoint missing tensor {name}")
            stored = tensors[name]
            if tuple(stored.shape) != p.shape:
                raise ConfigError(
                    f"tensor {name}: checkpoint shape {stored.shape} != "
                    f"model shape {p.shape}"
                )
            p.data = stored.astype(np.float64)
            consumed.add(name)
        for name, buf in module.named_buffers(f"{prefix}."):
            if name not in tensors:
                raise CheckpointFormatError(f"checkpoint missing buffer {name}")
            buf[...] = tensors[name].astype(np.float64)
            consumed.add(name)
    prefixes = tuple(f"{prefix}." for prefix, _ in named_modules)
    extra = [n for n in tensors if n.startswith(prefixes) and n not in consumed]
    if extra:
        raise ConfigError(f"checkpoint holds unknown tensors: {extra[:3]}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    directory = []
    payloads = []
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "crc32": zlib.crc32(raw)}
        )
        payloads.append(raw)
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "optimizer_step": ckpt.optimizer_step,
        "config": ckpt.config,
        "tensors": directory,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic bytes {magic!r}")
        size_raw = fh.read(4)
        if len(size_raw) != 4:
            raise CheckpointFormatError("truncated metadata length")
        meta_len = int.from_bytes(size_raw, "little")
        blob = fh.read(meta_len)
        if len(blob) != meta_len:
            raise CheckpointCorruptionError("truncated metadata document")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"unreadable metadata: {exc}") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {meta.get('version')}"
            )
        tensors: dict[str, np.ndarray] = {}
        for entry in meta["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointCorruptionError(
                    f"truncated payload for tensor {entry['name']}"
                )
            if zlib.crc32(raw) != entry["crc32"]:
                raise CheckpointCorruptionError(
                    f"checksum mismatch for tensor {entry['name']}"
                )
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(
                entry["shape"]
            ).copy()
    return Checkpoint(
        config=meta["config"],
        tensors=tensors,
        epoch=meta["epoch"],
        seed=meta["seed"],
        optimizer_step=meta.get("optimizer_step"),
    )


def encoder_config_dict(config: EncoderConfig) -> dict:
    # normalize through JSON so snapshots compare equal after a round trip
    return json.loads(json.dumps(asdict(config)))


def encoder_config_from_dict(data: dict) -> EncoderConfig:
    stages = tuple(StageSpec(**s) for s in data["stages"])
    order = data.get("channel_order")
    return EncoderConfig(
        stem_channels=data["stem_channels"],
        stem_stride=data["stem_stride"],
        stages=stages,
        dropout_site=data["dropout_site"],
        channel_order=tuple(order) if order is not None else None,
    )


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 1
    batch_size: int = 8
    mask_ratio: float = 0.6
    lr_schedule: str = "constant"   # "constant" | "cosine"
    normalize_targets: bool = False


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 300
    batch_size: int = 16
    num_classes: int = 2
    head_dropout: float = 0.2
    freeze_encoder: bool = False
    lr_schedule: str = "constant"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_ms: float


def _schedule_lr(base_lr: float, schedule: str, epoch: int, total: int) -> float:
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(total, 1)))
    if schedule == "constant":
        return base_lr
    raise ConfigError(f"unknown lr schedule {schedule!r}")


def _validate_images(images: np.ndarray, ratio: int) -> tuple[int, int]:
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError("images must be (M, 3, H, W)")
    if images.shape[0] == 0:
        raise ArgumentError("dataset is empty")
    h, w = images.shape[2], images.shape[3]
    if h % ratio or w % ratio:
        raise ArgumentError(f"image size ({h}, {w}) not divisible by {ratio}")
    return h, w


def build_pretrain_model(encoder_config: EncoderConfig,
                         decoder_config: DecoderConfig, seed: int,
                         downsample_ratio: int = 32) -> PretrainModel:
    encoder = build_encoder(encoder_config, seed, downsample_ratio=downsample_ratio)
    channels = encoder_config.scale_channels()
    embeddings = MaskEmbedding(
        channels, np.random.default_rng(derive_seed(seed, _TAG_EMBED))
    )
    decoder = build_decoder(decoder_config, channels, derive_seed(seed, _TAG_DECODER))
    return PretrainModel(encoder, embeddings, decoder)


def pretrain(model: PretrainModel, images: np.ndarray, config: PretrainConfig,
             optimizer_config: OptimizerConfig, seed: int,
             start_epoch: int = 0,
             optimizer: AdamP | None = None,
             augment_fn=None) -> tuple[list[EpochRecord], AdamP]:
    """Run masked-reconstruction pretraining; returns per-epoch records.

    Every stochastic choice (batch order, per-image masks, dropout) is
    derived from ``seed`` and the epoch/image indices, so identical calls
    produce identical loss curves. ``augment_fn(epoch, index, image)``
    may transform each sample before masking; the transformed image is
    also the reconstruction target.
    """
    depth = model.encoder.depth
    h, w = _validate_images(images, 2 ** depth)
    rows, cols = h // 2 ** depth, w // 2 ** depth
    params = model.parameters()
    opt = optimizer if optimizer is not None else AdamP(params, optimizer_config)
    records: list[EpochRecord] = []
    count = images.shape[0]
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        opt.lr = _schedule_lr(optimizer_config.lr, config.lr_schedule, epoch,
                              config.epochs)
        order = np.random.default_rng(
            derive_seed(seed, _TAG_ORDER, epoch)
        ).permutation(count)
        losses = []
        for start in range(0, count, config.batch_size):
            batch = order[start : start + config.batch_size]
            if augment_fn is not None:
                imgs = np.stack(
                    [augment_fn(epoch, int(idx), images[idx]) for idx in batch]
                )
            else:
                imgs = images[batch]
            grids = [
                sample_mask(rows, cols, config.mask_ratio,
                            derive_seed(seed, _TAG_MASK, epoch, int(idx)))
                for idx in batch
            ]
            stack = stack_pyramids(
                [build_mask_pyramid(g, h, w, depth=depth) for g in grids]
            )
            drop_rng = np.random.default_rng(
                derive_seed(seed, _TAG_DROPOUT, epoch, start)
            )
            targets = imgs
            if config.normalize_targets:
                targets = normalize_targets_per_patch(imgs, rows, cols)
            recon = model.reconstruct(Tensor(imgs), stack, training=True,
                                      rng=drop_rng)
            loss = masked_mse_loss(recon, Tensor(targets), grids)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        wall_ms = (time.perf_counter() - t0) * 1e3
        records.append(EpochRecord(epoch + 1, float(np.mean(losses)), wall_ms))
    return records, opt


def make_pretrain_checkpoint(model: PretrainModel, config: dict, seed: int,
                             epoch: int, optimizer: AdamP | None = None) -> Checkpoint:
    tensors = collect_state(
        [("encoder", model.encoder), ("embeddings", model.embeddings),
         ("decoder", model.decoder)]
    )
    step = None
    if optimizer is not None:
        t, ms, vs = optimizer.state_arrays()
        step = t
        names = [n for n, _ in _named_param_list(model)]
        for name, m, v in zip(names, ms, vs):
            tensors[f"optimizer.m.{name}"] = m.astype(np.float32)
            tensors[f"optimizer.v.{name}"] = v.astype(np.float32)
    return Checkpoint(config=config, tensors=tensors, epoch=epoch, seed=seed,
                      optimizer_step=step)


def _named_param_list(model: PretrainModel) -> list[tuple[str, Tensor]]:
    out = []
    for prefix, module in (("encoder", model.encoder),
                           ("embeddings", model.embeddings),
                           ("decoder", model.decoder)):
        out.extend(module.named_parameters(f"{prefix}."))
    return out


def restore_pretrain_model(ckpt: Checkpoint,
                           downsample_ratio: int = 32) -> PretrainModel:
    enc_cfg = encoder_config_from_dict(ckpt.config["encoder"])
    dec_cfg = DecoderConfig(tuple(ckpt.config["decoder"]["channels"]))
    model = build_pretrain_model(enc_cfg, dec_cfg, ckpt.seed,
                                 downsample_ratio=downsample_ratio)
    load_state(
        [("encoder", model.encoder), ("embeddings", model.embeddings),
         ("decoder", model.decoder)],
        ckpt.tensors,
    )
    return model


def restore_optimizer(ckpt: Checkpoint, model: PretrainModel,
                      optimizer_config: OptimizerConfig) -> AdamP | None:
    if ckpt.optimizer_step is None:
        return None
    params = model.parameters()
    opt = AdamP(params, optimizer_config)
    names = [n for n, _ in _named_param_list(model)]
    ms = [ckpt.tensors[f"optimizer.m.{n}"].astype(np.float64) for n in names]
    vs = [ckpt.tensors[f"optimizer.v.{n}"].astype(np.float64) for n in names]
    opt.load_state(ckpt.optimizer_step, ms, vs)
    return opt


def build_classifier(encoder_config: EncoderConfig, finetune_config: FinetuneConfig,
                     seed: int, pretrained: Checkpoint | None = None,
                     downsample_ratio: int = 32) -> Classifier:
    """Fresh or checkpoint-initialized classifier.

    When a pretrained checkpoint is supplied its encoder section must
    match the run's encoder config exactly; decoder and embedding weights
    are discarded.
    """
    if pretrained is not None:
        stored = pretrained.config.get("encoder")
        if stored != encoder_config_dict(encoder_config):
            raise ConfigError(
                "checkpoint encoder config does not match run config"
            )
    encoder = build_encoder(encoder_config, seed, downsample_ratio=downsample_ratio)
    if pretrained is not None:
        encoder_tensors = {
            name: arr for name, arr in pretrained.tensors.items()
            if name.startswith("encoder.")
        }
        load_state([("encoder", encoder)], encoder_tensors)
    head = ClassifierHead(
        encoder_config.scale_channels()[-1], finetune_config.num_classes,
        finetune_config.head_dropout,
        np.random.default_rng(derive_seed(seed, _TAG_HEAD)),
    )
    return Classifier(encoder, head, freeze_encoder=finetune_config.freeze_encoder)


def finetune(model: Classifier, images: np.ndarray, labels: np.ndarray,
             config: FinetuneConfig, optimizer_config: OptimizerConfig,
             seed: int, start_epoch: int = 0,
             augment_fn=None) -> tuple[list[EpochRecord], AdamP]:
    """Supervised training on dense (unmasked) forward passes."""
    _validate_images(images, 2 ** model.encoder.depth)
    labels = np.asarray(labels)
    if labels.shape != (images.shape[0],):
        raise DimensionError("labels must be one integer per image")
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise ConfigError(
            f"labels span {labels.min()}..{labels.max()}, but the head has "
            f"{config.num_classes} classes"
        )
    params = model.trainable_parameters()
    opt = AdamP(params, optimizer_config)
    records: list[EpochRecord] = []
    count = images.shape[0]
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        opt.lr = _schedule_lr(optimizer_config.lr, config.lr_schedule, epoch,
                              config.epochs)
        order = np.random.default_rng(
            derive_seed(seed, _TAG_ORDER, epoch)
        ).permutation(count)
        losses = []
        for start in range(0, count, config.batch_size):
            batch = order[start : start + config.batch_size]
            if augment_fn is not None:
                imgs = np.stack(
                    [augment_fn(epoch, int(idx), images[idx]) for idx in batch]
                )
            else:
                imgs = images[batch]
            drop_rng = np.random.default_rng(
                derive_seed(seed, _TAG_DROPOUT, epoch, start)
            )
            logits = model.forward(Tensor(imgs), training=True,
                                   rng=drop_rng)
            loss = cross_entropy(logits, labels[batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        wall_ms = (time.perf_counter() - t0) * 1e3
        records.append(EpochRecord(epoch + 1, float(np.mean(losses)), wall_ms))
    return records, opt


def make_classifier_checkpoint(model: Classifier, config: dict, seed: int,
                               epoch: int) -> Checkpoint:
    tensors = collect_state([("encoder", model.encoder), ("head", model.head)])
    return Checkpoint(config=config, tensors=tensors, epoch=epoch, seed=seed)


def restore_classifier(ckpt: Checkpoint,
                       downsample_ratio: int = 32) -> Classifier:
    enc_cfg = encoder_config_from_dict(ckpt.config["encoder"])
    ft = ckpt.config["finetune"]
    cfg = FinetuneConfig(
        epochs=ft["epochs"], batch_size=ft["batch_size"],
        num_classes=ft["num_classes"], head_dropout=ft["head_dropout"],
        freeze_encoder=ft["freeze_encoder"], lr_schedule=ft["lr_schedule"],
    )
    model = build_classifier(enc_cfg, cfg, ckpt.seed,
                             downsample_ratio=downsample_ratio)
    load_state([("encoder", model.encoder), ("head", model.head)], ckpt.tensors)
    return model


def write_report(records: list[EpochRecord], path, include_timing: bool = True) -> None:
    """Line-delimited training report (epoch, mean_loss[, wall_ms])."""
    with open(path, "w", encoding="utf-8") as fh:
        if include_timing:
            fh.write("epoch\tmean_loss\twall_ms\n")
            for r in records:
                fh.write(f"{r.epoch}\t{r.mean_loss:.17g}\t{r.wall_ms:.3f}\n")
        else:
            fh.write("epoch\tmean_loss\n")
            for r in records:
                fh.write(f"{r.epoch}\t{r.mean_loss:.17g}\n")
