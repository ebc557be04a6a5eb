"""Shared pool of class-agnostic latent category features.

The pool holds M trainable latent vectors plus a 1x1 encoding map. For a
feature map f with D channels over P positions, each encoded latent scores
every position (sigmoid of the inner product), the M scores per position are
softmax-normalized, and the feature map is reconstructed as the
normalization-weighted sum of encoded latents. The reconstruction is scored
against the original features by row-wise softmax cross-entropy on their
correlation matrix with diagonal targets: position i of the reconstruction
should match position i of the input, nothing else.

None of this reads labels; the pool is shared by all classes.

Columns may stack several samples' position blocks side by side
([D, B*P] with equal P); every op here is positionwise except the
correlation blocks, which are built per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorio
from .diffcore import Parameter, ShapeError, Tape, Tensor


@dataclass
class LatentPool:
    """M latent feature vectors and the shared 1x1 encoding map."""
    features: Parameter  # [M, D]
    enc_w: Parameter     # [D, D]
    enc_b: Parameter     # [D]

    def __post_init__(self):
        m, d = self.features.value.shape
        if m < 1:
            raise ValueError("LatentPool: need at least one latent vector")
        if self.enc_w.value.shape != (d, d) or self.enc_b.value.shape != (d,):
            raise ValueError("LatentPool: encoder map shapes do not match D")
        for p in (self.features, self.enc_w, self.enc_b):
            if not np.isfinite(p.value.data).all():
                raise ValueError("LatentPool: non-finite parameter")

    @property
    def num_latents(self) -> int:
        return self.features.value.shape[0]

    @property
    def dim(self) -> int:
        return self.features.value.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.features, self.enc_w, self.enc_b]


def init_pool(num_latents: int, dim: int, seed: int) -> LatentPool:
    """Latents at stdev 1/sqrt(D); encoding map near identity."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 53]))
    feats = rng.standard_normal((num_latents, dim)) / np.sqrt(dim)
    enc_w = np.eye(dim) + 0.01 * rng.standard_normal((dim, dim))
    return LatentPool(
        features=Parameter(feats, "pool.features"),
        enc_w=Parameter(enc_w, "pool.enc_w"),
        enc_b=Parameter(np.zeros(dim), "pool.enc_b"),
    )


@dataclass
class SimilarityStack:
    """Per-position latent scores: raw after sigmoid, normalized over latents."""
    raw: Tensor         # [M, P]
    normalized: Tensor  # [M, P], columns sum to 1
    encoded: Tensor     # [M, D] encoded latents, reused by reconstruction


def _pool_nodes(tape: Tape, pool: LatentPool, detach_pool: bool):
    if detach_pool:
        f = tape.constant(pool.features.value.data.copy())
        w = tape.constant(pool.enc_w.value.data.copy())
        b = tape.constant(pool.enc_b.value.data.copy())
        return f, w, b
    return tape.use(pool.features), tape.use(pool.enc_w), tape.use(pool.enc_b)


def encoded_latents(tape: Tape, pool: LatentPool, detach_pool: bool = False) -> Tensor:
    """Encoding map applied to every latent row: [M, D]."""
    f, w, b = _pool_nodes(tape, pool, detach_pool)
    return tape.add_rowvec(tape.matmul(f, tape.transpose(w)), b)


def similarity_maps(tape: Tape, pool: LatentPool, f: Tensor,
                    detach_pool: bool = False) -> SimilarityStack:
    """Sigmoid scores of encoded latents against f, then softmax over latents."""
    if f.data.ndim != 2 or f.shape[0] != pool.dim:
        raise ShapeError(f"similarity_maps: f shape {f.shape}, pool dim {pool.dim}")
    enc = encoded_latents(tape, pool, detach_pool)
    raw = tape.sigmoid(tape.matmul(enc, f))
    normalized = tape.softmax(raw, axis=0)
    return SimilarityStack(raw=raw, normalized=normalized, encoded=enc)


@dataclass
class Reconstruction:
    """Weighted latent reconstruction of f plus per-sample correlation blocks."""
    f_hat: Tensor          # [D, P]
    corr: list[Tensor]     # per sample: [HW, HW] = f_hat_b^T f_b


def reconstruct(tape: Tape, sims: SimilarityStack, f: Tensor,
                positions_per_sample: int | None = None,
                with_corr: bool = True) -> Reconstruction:
    """f_hat = encoded^T @ normalized; correlation is built per sample block."""
    f_hat = tape.matmul(tape.transpose(sims.encoded), sims.normalized)
    corr: list[Tensor] = []
    if with_corr:
        total = f.shape[1]
        p = total if positions_per_sample is None else int(positions_per_sample)
        if p < 1 or total % p != 0:
            raise ShapeError(f"reconstruct: {total} columns with block {p}")
        for start in range(0, total, p):
            fh = tape.col_block(f_hat, start, p) if total != p else f_hat
            fb = tape.col_block(f, start, p) if total != p else f
            corr.append(tape.matmul(tape.transpose(fh), fb))
    return Reconstruction(f_hat=f_hat, corr=corr)


def reconstruction_loss(tape: Tape, recon: Reconstruction) -> Tensor:
    """Row-wise softmax cross-entropy on each correlation block, diagonal
    targets, averaged over rows then samples."""
    if not recon.corr:
        raise ShapeError("reconstruction_loss: reconstruction carries no correlation blocks")
    total = None
    for block in recon.corr:
        p = block.shape[0]
        ce = tape.cross_entropy(block, np.arange(p))
        total = ce if total is None else tape.add(total, ce)
    return tape.scale(total, 1.0 / len(recon.corr))


def fuse_for_decoder(tape: Tape, f: Tensor, sims: SimilarityStack) -> Tensor:
    """Channel-concatenate features with normalized similarity maps."""
    if f.shape[1] != sims.normalized.shape[1]:
        raise ShapeError("fuse_for_decoder: position count mismatch")
    return tape.concat_rows(f, sims.normalized)


def save_pool(path, pool: LatentPool):
    tensorio.save_tensors(path, {
        "pool.features": pool.features.value.data,
        "pool.enc_w": pool.enc_w.value.data,
        "pool.enc_b": pool.enc_b.value.data,
    })


def load_pool(path) -> LatentPool:
    tensors, _ = tensorio.load_tensors(path)
    return LatentPool(
        features=Parameter(tensors["pool.features"], "pool.features"),
        enc_w=Parameter(tensors["pool.enc_w"], "pool.enc_w"),
        enc_b=Parameter(tensors["pool.enc_b"], "pool.enc_b"),
    )
