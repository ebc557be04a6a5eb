"""Classifier with a latent category pool between encoder and decoder.

The encoder maps a batch to a feature map with D channels over P positions
per sample (vector data collapses to P = 1; image data keeps a small spatial
grid). The latent pool scores every position against M shared latent
vectors; the normalized similarity channels are concatenated onto the
features, globally average-pooled per sample, and classified by a linear
decoder. Batches are carried as stacked position columns [D, B*P].

The training objective combines three terms:
    total = alpha * latent augmentation + beta * reconstruction + gamma * cls

where the augmentation term scores the latent vectors themselves under a
separate linear pseudo-classifier with identity labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .augment import CategoryStats, isda_upper_bound_loss
from .diffcore import GradCheckReport, Parameter, ShapeError, Tape, Tensor
from .latent import (
    LatentPool,
    Reconstruction,
    SimilarityStack,
    fuse_for_decoder,
    init_pool,
    reconstruct,
    reconstruction_loss,
    similarity_maps,
)

CONV_KERNEL = 3
CONV_STRIDE = 2


def conv_grid(height: int, width: int, layers: int) -> tuple[int, int]:
    """Spatial size after ``layers`` valid 3x3 stride-2 convolutions."""
    for _ in range(layers):
        height = (height - CONV_KERNEL) // CONV_STRIDE + 1
        width = (width - CONV_KERNEL) // CONV_STRIDE + 1
        if height < 1 or width < 1:
            raise ValueError("conv_grid: input too small for the conv stack")
    return height, width


@dataclass(frozen=True)
class EncoderConfig:
    """Shape contract of the feature extractor.

    kind "vector": input_shape (dim,), an MLP, grid must be (1, 1).
    kind "image": input_shape (channels, H, W); each hidden width is one
    3x3 stride-2 conv; a final 1x1 map produces feature_dim channels on
    ``grid``.
    """
    kind: str
    input_shape: tuple[int, ...]
    hidden: tuple[int, ...]
    feature_dim: int
    grid: tuple[int, int] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.feature_dim < 2:
            raise ValueError("EncoderConfig: feature_dim must be >= 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("EncoderConfig: hidden widths must be positive")
        if self.kind == "vector":
            if len(self.input_shape) != 1:
                raise ValueError("EncoderConfig: vector input_shape must be (dim,)")
            if self.grid != (1, 1):
                raise ValueError("EncoderConfig: vector data uses grid (1, 1)")
        elif self.kind == "image":
            if len(self.input_shape) != 3:
                raise ValueError("EncoderConfig: image input_shape must be (C, H, W)")
            expect = conv_grid(self.input_shape[1], self.input_shape[2], len(self.hidden))
            if self.grid != expect:
                raise ValueError(
                    f"EncoderConfig: grid {self.grid} does not match conv stack {expect}"
                )
        else:
            raise ValueError(f"EncoderConfig: unknown kind {self.kind!r}")

    @property
    def positions(self) -> int:
        return self.grid[0] * self.grid[1]


def vector_encoder(input_dim: int, hidden: tuple[int, ...], feature_dim: int) -> EncoderConfig:
    return EncoderConfig("vector", (input_dim,), tuple(hidden), feature_dim, (1, 1))


def image_encoder(channels: int, height: int, width: int,
                  hidden: tuple[int, ...], feature_dim: int) -> EncoderConfig:
    grid = conv_grid(height, width, len(hidden))
    return EncoderConfig("image", (channels, height, width), tuple(hidden), feature_dim, grid)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    num_classes: int
    num_latents: int
    latent_on: bool = True
    stop_cls_grad_to_pool: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("ModelConfig: need at least two classes")
        if self.latent_on and self.num_latents < 1:
            raise ValueError("ModelConfig: need at least one latent")

    @property
    def fused_channels(self) -> int:
        d = self.encoder.feature_dim
        return d + self.num_latents if self.latent_on else d


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: list[Parameter]
    pool: LatentPool | None
    dec_w: Parameter
    dec_b: Parameter
    lat_w: Parameter | None
    lat_b: Parameter | None

    def parameters(self) -> list[Parameter]:
        out = list(self.encoder)
        if self.pool is not None:
            out += self.pool.parameters()
        out += [self.dec_w, self.dec_b]
        if self.lat_w is not None:
            out += [self.lat_w, self.lat_b]
        return out

    def decay_parameters(self) -> list[Parameter]:
        """Weight decay applies to encoder and decoder groups only."""
        return list(self.encoder) + [self.dec_w, self.dec_b]

    def frozen_stage2(self) -> list[Parameter]:
        """Groups held fixed during decoder finetuning."""
        out = list(self.encoder)
        if self.pool is not None:
            out += self.pool.parameters()
        if self.lat_w is not None:
            out += [self.lat_w, self.lat_b]
        return out

    def stage2_trainable(self) -> list[Parameter]:
        return [self.dec_w, self.dec_b]


def _encoder_layer_dims(cfg: EncoderConfig) -> list[tuple[int, int]]:
    """(fan_out, fan_in) per layer, conv kernels flattened into fan_in."""
    if cfg.kind == "vector":
        dims = [cfg.input_shape[0], *cfg.hidden, cfg.feature_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
    chans = [cfg.input_shape[0], *cfg.hidden]
    layers = [
        (chans[i + 1], chans[i] * CONV_KERNEL * CONV_KERNEL)
        for i in range(len(cfg.hidden))
    ]
    layers.append((cfg.feature_dim, chans[-1]))  # final 1x1 map
    return layers


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """Parameter groups drawn from independent child streams of one seed, so
    configurations that share a group share its exact initialization."""
    enc_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    encoder = []
    for i, (fan_out, fan_in) in enumerate(_encoder_layer_dims(cfg.encoder)):
        w = enc_rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        encoder.append(Parameter(w, f"enc.{i}.w"))
        encoder.append(Parameter(np.zeros(fan_out), f"enc.{i}.b"))

    dec_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 103]))
    dec_w = dec_rng.standard_normal((cfg.num_classes, cfg.fused_channels))
    dec_w /= np.sqrt(cfg.fused_channels)

    pool = lat_w = lat_b = None
    if cfg.latent_on:
        pool = init_pool(cfg.num_latents, cfg.encoder.feature_dim, seed)
        lat_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 107]))
        lw = lat_rng.standard_normal((cfg.num_latents, cfg.encoder.feature_dim))
        lat_w = Parameter(lw / np.sqrt(cfg.encoder.feature_dim), "latcls.w")
        lat_b = Parameter(np.zeros(cfg.num_latents), "latcls.b")

    return ModelParams(
        config=cfg,
        encoder=encoder,
        pool=pool,
        dec_w=Parameter(dec_w, "dec.w"),
        dec_b=Parameter(np.zeros(cfg.num_classes), "dec.b"),
        lat_w=lat_w,
        lat_b=lat_b,
    )


_PATCH_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _patch_indices(channels: int, height: int, width: int, batch: int) -> np.ndarray:
    """Flat gather indices turning [C, B*H*W] columns into 3x3 patch rows."""
    key = (channels, height, width, batch)
    hit = _PATCH_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    k, s = CONV_KERNEL, CONV_STRIDE
    h1 = (height - k) // s + 1
    w1 = (width - k) // s + 1
    p0, p1 = height * width, h1 * w1
    ky = np.arange(k)
    kx = np.arange(k)
    ys = np.arange(h1) * s
    xs = np.arange(w1) * s
    # positions [H1, W1, k, k] inside one channel plane
    pos = (ys[:, None, None, None] + ky[None, None, :, None]) * width + (
        xs[None, :, None, None] + kx[None, None, None, :]
    )
    base = (
        np.arange(channels)[:, None, None, None, None] * (batch * p0)
        + pos[None, :, :, :, :]
    )  # [C, H1, W1, k, k]
    core = base.transpose(0, 3, 4, 1, 2).reshape(channels * k * k, p1)
    full = core[:, None, :] + (np.arange(batch) * p0)[None, :, None]
    idx = np.ascontiguousarray(full.reshape(channels * k * k, batch * p1))
    _PATCH_INDEX_CACHE[key] = idx
    return idx


def stack_batch_columns(cfg: EncoderConfig, x_batch: np.ndarray) -> np.ndarray:
    """Batch array to stacked position columns for the encoder input."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if cfg.kind == "vector":
        if x_batch.ndim != 2 or x_batch.shape[1] != cfg.input_shape[0]:
            raise ShapeError(f"encode: batch shape {x_batch.shape} for {cfg.input_shape}")
        return x_batch.T.copy()
    if x_batch.ndim != 4 or x_batch.shape[1:] != cfg.input_shape:
        raise ShapeError(f"encode: batch shape {x_batch.shape} for {cfg.input_shape}")
    b, c, h, w = x_batch.shape
    return x_batch.transpose(1, 0, 2, 3).reshape(c, b * h * w)


def encode(tape: Tape, params: ModelParams, x_batch: np.ndarray) -> tuple[Tensor, int]:
    """Feature columns [D, B*P] and the per-sample position count P."""
    cfg = params.config.encoder
    batch = len(x_batch)
    h = tape.constant(stack_batch_columns(cfg, x_batch))
    layers = [(params.encoder[2 * i], params.encoder[2 * i + 1])
              for i in range(len(params.encoder) // 2)]
    if cfg.kind == "vector":
        for w, b in layers[:-1]:
            h = tape.tanh(tape.linear_map_1x1(h, tape.use(w), tape.use(b)))
        w, b = layers[-1]
        f = tape.linear_map_1x1(h, tape.use(w), tape.use(b))
        return f, 1
    chans, (height, width) = cfg.input_shape[0], cfg.input_shape[1:]
    for w, b in layers[:-1]:
        idx = _patch_indices(chans, height, width, batch)
        patches = tape.take_flat(h, idx)
        h = tape.tanh(tape.linear_map_1x1(patches, tape.use(w), tape.use(b)))
        chans = w.value.shape[0]
        height = (height - CONV_KERNEL) // CONV_STRIDE + 1
        width = (width - CONV_KERNEL) // CONV_STRIDE + 1
    w, b = layers[-1]
    f = tape.linear_map_1x1(h, tape.use(w), tape.use(b))
    return f, height * width


@dataclass
class ForwardOut:
    logits: Tensor                      # [B, C]
    features: Tensor                    # [D, B*P]
    pooled: Tensor                      # [fused, B]
    positions: int
    sims: SimilarityStack | None = None
    recon: Reconstruction | None = None


def forward(tape: Tape, params: ModelParams, x_batch: np.ndarray,
            with_recon_corr: bool = False) -> ForwardOut:
    cfg = params.config
    f, p = encode(tape, params, x_batch)
    sims = recon = None
    if cfg.latent_on:
        sims = similarity_maps(tape, params.pool, f)
        if with_recon_corr and p > 1:
            recon = reconstruct(tape, sims, f, positions_per_sample=p)
        if cfg.stop_cls_grad_to_pool:
            fuse_sims = similarity_maps(tape, params.pool, f, detach_pool=True)
        else:
            fuse_sims = sims
        fused = fuse_for_decoder(tape, f, fuse_sims)
    else:
        fused = f
    pooled = tape.mean_pool_segments(fused, p)
    logits = tape.transpose(
        tape.linear_map_1x1(pooled, tape.use(params.dec_w), tape.use(params.dec_b))
    )
    return ForwardOut(logits=logits, features=f, pooled=pooled, positions=p,
                      sims=sims, recon=recon)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar terms of one training step; total is their weighted sum."""
    total: float
    cls: float
    recon: float
    latent_aug: float
    alpha: float
    beta: float
    gamma: float


def total_loss(tape: Tape, params: ModelParams, x_batch: np.ndarray, labels,
               stats: CategoryStats | None, lam: float,
               weights: LossWeights = LossWeights(),
               recon_on: bool = True, aug_on: bool = True,
               label_smoothing: float = 0.0):
    """Combined objective. Returns (breakdown, loss node, forward pieces).

    Terms behind disabled flags are recorded as exact zeros and contribute
    no gradient. On P = 1 feature maps the reconstruction target is a single
    position, so its loss is identically log(1) = 0 and is skipped the same
    way.
    """
    cfg = params.config
    labels = np.asarray(labels, dtype=np.int64)
    want_corr = recon_on and cfg.latent_on and cfg.encoder.positions > 1
    fwd = forward(tape, params, x_batch, with_recon_corr=want_corr)
    cls = tape.cross_entropy(fwd.logits, labels, label_smoothing=label_smoothing)
    loss = tape.scale(cls, weights.gamma)

    recon_value = 0.0
    if want_corr and fwd.recon is not None and fwd.recon.corr:
        recon_term = reconstruction_loss(tape, fwd.recon)
        recon_value = recon_term.item()
        loss = tape.add(loss, tape.scale(recon_term, weights.beta))

    aug_value = 0.0
    if aug_on and cfg.latent_on:
        if stats is None:
            raise ValueError("total_loss: augmentation enabled but no stats given")
        aug_term = isda_upper_bound_loss(
            tape,
            tape.use(params.pool.features),
            tape.use(params.lat_w),
            tape.use(params.lat_b),
            stats,
            lam,
        )
        aug_value = aug_term.item()
        loss = tape.add(loss, tape.scale(aug_term, weights.alpha))

    breakdown = LossBreakdown(
        total=loss.item(),
        cls=cls.item(),
        recon=recon_value,
        latent_aug=aug_value,
        alpha=weights.alpha,
        beta=weights.beta,
        gamma=weights.gamma,
    )
    return breakdown, loss, fwd


def end_to_end_grad_check(params: ModelParams, x_batch: np.ndarray, labels,
                          stats: CategoryStats | None, lam: float,
                          weights: LossWeights = LossWeights(),
                          recon_on: bool = True, aug_on: bool = True,
                          tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Central-difference check of the combined objective over every
    parameter scalar of the model."""

    def loss_value() -> float:
        tape = Tape()
        breakdown, _, _ = total_loss(
            tape, params, x_batch, labels, stats, lam, weights, recon_on, aug_on
        )
        return breakdown.total

    all_params = params.parameters()
    for p in all_params:
        p.zero_grad()
    tape = Tape()
    _, loss, _ = total_loss(tape, params, x_batch, labels, stats, lam, weights,
                            recon_on, aug_on)
    tape.backward(loss)

    max_rel = 0.0
    for p in all_params:
        flat = p.value.data.reshape(-1)
        grad = p.grad.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = loss_value()
            flat[j] = orig - step
            lo = loss_value()
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * step)
            rel = abs(grad[j] - numeric) / max(abs(grad[j]), abs(numeric), 1.0)
            max_rel = max(max_rel, rel)
    return GradCheckReport("end_to_end_total_loss", max_rel, tolerance, max_rel <= tolerance)


CHECKPOINT_META_VERSION = 1


def save_model(path, params: ModelParams, stats: CategoryStats | None, iteration: int):
    """Single-file checkpoint: all parameter groups, stats, iteration."""
    tensors = {p.id: p.value.data for p in params.parameters()}
    if stats is not None:
        tensors["stats.count"] = stats.count.astype(np.float64)
        tensors["stats.mean"] = stats.mean
        tensors["stats.cov"] = stats.cov
    meta = {
        "checkpoint_version": CHECKPOINT_META_VERSION,
        "iteration": int(iteration),
        "num_classes": params.config.num_classes,
        "num_latents": params.config.num_latents if params.config.latent_on else 0,
        "feature_dim": params.config.encoder.feature_dim,
        "latent_on": int(params.config.latent_on),
        "has_stats": int(stats is not None),
    }
    tensorio.save_tensors(path, tensors, meta)


def load_model(path, cfg: ModelConfig):
    """Rebuild (params, stats, iteration) from a checkpoint for ``cfg``."""
    tensors, meta = tensorio.load_tensors(path)
    if meta.get("checkpoint_version") != CHECKPOINT_META_VERSION:
        raise ValueError("load_model: unsupported checkpoint version")
    if meta.get("num_classes") != cfg.num_classes or meta.get("latent_on") != int(cfg.latent_on):
        raise ValueError("load_model: checkpoint does not match the model config")
    params = init_model(cfg, seed=0)
    for p in params.parameters():
        if p.id not in tensors:
            raise ValueError(f"load_model: checkpoint missing tensor {p.id}")
        if tensors[p.id].shape != p.value.shape:
            raise ValueError(f"load_model: shape mismatch for {p.id}")
        p.value.data[...] = tensors[p.id]
    stats = None
    if meta.get("has_stats"):
        stats = CategoryStats(
            count=tensors["stats.count"].astype(np.int64),
            mean=tensors["stats.mean"],
            cov=tensors["stats.cov"],
        )
    return params, stats, int(meta["iteration"])
