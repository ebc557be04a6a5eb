"""Streaming category statistics and closed-form semantic augmentation.

Per category m we keep a running count, mean, and population covariance over
a stream of D-dimensional observations, merged batch-by-batch in one pass:
given the current aggregate (n, mu, S) and a batch aggregate (n', mu', S'),

    mu_new = (n mu + n' mu') / (n + n')
    S_new  = (n S + n' S') / (n + n') + n n' (mu - mu') (mu - mu')^T / (n + n')^2

which is exact for population (divide-by-n) moments under any bracketing.

The augmentation loss treats each latent vector as the single member of its
own pseudo-class (label m) and scores a linear classifier (w, b) under
Gaussian perturbations N(f'_m, lambda * Sigma_m), in closed form:

    loss = mean_m log sum_j exp(z_mj)
    z_mj = (w_j - w_m)^T f'_m + (b_j - b_m)
           + (lambda / 2) (w_j - w_m)^T Sigma_m (w_j - w_m)

with z_mm = 0 exactly. This is the expected cross-entropy's upper bound (the
Gaussian moment generating function applied inside Jensen's inequality), so a
Monte-Carlo estimate of the expectation must not exceed it beyond noise;
`mc_expected_ce` provides that independent check. Gradients flow through the
latents and the classifier but never through the covariance, which enters as
a detached constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorio
from .diffcore import ShapeError, Tape, Tensor


@dataclass
class CategoryStats:
    """Streaming count/mean/population-covariance per category."""
    count: np.ndarray  # [M] int64
    mean: np.ndarray   # [M, D]
    cov: np.ndarray    # [M, D, D]

    def __post_init__(self):
        self.count = np.asarray(self.count, dtype=np.int64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        m = len(self.count)
        d = self.mean.shape[1] if self.mean.ndim == 2 else -1
        if self.mean.shape != (m, d) or self.cov.shape != (m, d, d):
            raise ValueError("CategoryStats: inconsistent shapes")
        if (self.count < 0).any():
            raise ValueError("CategoryStats: negative count")
        empty = self.count == 0
        if empty.any():
            if np.abs(self.mean[empty]).max(initial=0.0) != 0.0:
                raise ValueError("CategoryStats: empty category with nonzero mean")
            if np.abs(self.cov[empty]).max(initial=0.0) != 0.0:
                raise ValueError("CategoryStats: empty category with nonzero covariance")

    @property
    def num_categories(self) -> int:
        return len(self.count)

    @property
    def dim(self) -> int:
        return self.mean.shape[1]


def init_stats(num_categories: int, dim: int) -> CategoryStats:
    return CategoryStats(
        count=np.zeros(num_categories, dtype=np.int64),
        mean=np.zeros((num_categories, dim)),
        cov=np.zeros((num_categories, dim, dim)),
    )


def batch_moments(values: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
    """Count, mean, population covariance of one batch of row vectors."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    mu = values.mean(axis=0)
    centered = values - mu
    cov = centered.T @ centered / n
    return n, mu, cov


def _merge_one(n_a, mu_a, cov_a, n_b, mu_b, cov_b):
    n = n_a + n_b
    if n_a == 0:
        return n_b, mu_b.copy(), cov_b.copy()
    if n_b == 0:
        return n_a, mu_a.copy(), cov_a.copy()
    mu = (n_a * mu_a + n_b * mu_b) / n
    delta = mu_a - mu_b
    cov = (n_a * cov_a + n_b * cov_b) / n + (n_a * n_b) * np.outer(delta, delta) / (n * n)
    return n, mu, cov


def update_stats(stats: CategoryStats, values: np.ndarray, categories) -> CategoryStats:
    """Merge a batch of observations (rows of ``values``, labeled by
    ``categories``) into the running stats. Returns new stats."""
    values = np.asarray(values, dtype=np.float64)
    categories = np.asarray(categories, dtype=np.int64)
    if values.ndim != 2 or values.shape[1] != stats.dim:
        raise ValueError(f"update_stats: values shape {values.shape}, dim {stats.dim}")
    if categories.shape != (len(values),):
        raise ValueError("update_stats: one category per observation required")
    if len(categories) and (categories.min() < 0 or categories.max() >= stats.num_categories):
        raise ValueError("update_stats: category out of range")

    count = stats.count.copy()
    mean = stats.mean.copy()
    cov = stats.cov.copy()

    if len(categories) == stats.num_categories and np.array_equal(
        categories, np.arange(stats.num_categories)
    ):
        # exactly one observation per category: vectorize the merge
        n_a = count.astype(np.float64)
        n = n_a + 1.0
        mu_b = values
        mu = (n_a[:, None] * mean + mu_b) / n[:, None]
        delta = mean - mu_b
        cov = (n_a[:, None, None] * cov) / n[:, None, None] + (
            n_a[:, None, None] * np.einsum("md,me->mde", delta, delta)
        ) / (n * n)[:, None, None]
        return CategoryStats(count + 1, mu, cov)

    for c in np.unique(categories):
        chunk = values[categories == c]
        n_b, mu_b, cov_b = batch_moments(chunk)
        count[c], mean[c], cov[c] = _merge_one(
            int(count[c]), mean[c], cov[c], n_b, mu_b, cov_b
        )
    return CategoryStats(count, mean, cov)


def merge_stats(a: CategoryStats, b: CategoryStats) -> CategoryStats:
    """Merge two aggregates category by category (same math as update)."""
    if a.num_categories != b.num_categories or a.dim != b.dim:
        raise ValueError("merge_stats: shape mismatch")
    count = np.empty_like(a.count)
    mean = np.empty_like(a.mean)
    cov = np.empty_like(a.cov)
    for m in range(a.num_categories):
        count[m], mean[m], cov[m] = _merge_one(
            int(a.count[m]), a.mean[m], a.cov[m], int(b.count[m]), b.mean[m], b.cov[m]
        )
    return CategoryStats(count, mean, cov)


def save_stats(path, stats: CategoryStats):
    tensorio.save_tensors(path, {
        "stats.count": stats.count.astype(np.float64),
        "stats.mean": stats.mean,
        "stats.cov": stats.cov,
    })


def load_stats(path) -> CategoryStats:
    tensors, _ = tensorio.load_tensors(path)
    return CategoryStats(
        count=tensors["stats.count"].astype(np.int64),
        mean=tensors["stats.mean"],
        cov=tensors["stats.cov"],
    )


@dataclass(frozen=True)
class AugSchedule:
    """Linear ramp of the augmentation strength over a stage."""
    lambda0: float
    total_iters: int

    def __post_init__(self):
        if self.lambda0 < 0 or self.total_iters < 1:
            raise ValueError("AugSchedule: lambda0 >= 0 and total_iters >= 1 required")

    def lambda_at(self, t: int) -> float:
        if t < 0:
            raise ValueError("AugSchedule: t must be >= 0")
        return min(t / self.total_iters, 1.0) * self.lambda0


def quadratic_penalty_rows(tape: Tape, w: Tensor, cov: np.ndarray, lam: float) -> list[Tensor]:
    """Row m: (lam/2) (w_j - w_m)^T cov[m] (w_j - w_m) for all j; entry m is 0."""
    rows = []
    for m in range(cov.shape[0]):
        wm = tape.take_row(w, m)
        v = tape.sub_rowvec(w, wm)
        vs = tape.matmul(v, tape.constant(cov[m]))
        rows.append(tape.scale(tape.sum_axis(tape.mul(vs, v), axis=1), lam / 2.0))
    return rows


def latent_aug_logits(tape: Tape, latents: Tensor, w: Tensor, b: Tensor,
                      stats: CategoryStats, lam: float) -> Tensor:
    """The difference-form score matrix z, [M, M], diagonal exactly zero."""
    m, d = latents.shape
    if w.shape != (m, d) or b.shape != (m,):
        raise ShapeError(f"latent_aug_logits: classifier shapes {w.shape}, {b.shape}")
    if stats.num_categories != m or stats.dim != d:
        raise ShapeError("latent_aug_logits: stats do not match latents")
    if lam < 0:
        raise ValueError("latent_aug_logits: lambda must be >= 0")
    plain = tape.add_rowvec(tape.matmul(latents, tape.transpose(w)), b)
    penalty = tape.stack_rows(quadratic_penalty_rows(tape, w, stats.cov, lam))
    aug = tape.add(plain, penalty)
    return tape.sub_colvec(aug, tape.diag_part(aug))


def isda_upper_bound_loss(tape: Tape, latents: Tensor, w: Tensor, b: Tensor,
                          stats: CategoryStats, lam: float) -> Tensor:
    """Mean over categories of log-sum-exp of the z rows.

    Equals cross-entropy of z against the identity pseudo-labels because the
    diagonal of z is exactly zero.
    """
    z = latent_aug_logits(tape, latents, w, b, stats, lam)
    return tape.cross_entropy(z, np.arange(stats.num_categories))


def classwise_augmented_logits(tape: Tape, logits: Tensor, w: Tensor, labels,
                               stats: CategoryStats, lam: float) -> Tensor:
    """Per-sample augmented logits for class-conditional stats.

    Sample i with label y gets logits[i, j] + (lam/2)(w_j - w_y)^T
    Sigma_y (w_j - w_y); used by the raw-feature augmentation baseline.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError("classwise_augmented_logits: logits/labels mismatch")
    if logits.shape[1] != stats.num_categories:
        raise ShapeError("classwise_augmented_logits: class count mismatch")
    penalty_full = tape.stack_rows(quadratic_penalty_rows(tape, w, stats.cov, lam))
    return tape.add(logits, tape.take_rows(penalty_full, labels))


def psd_factor(cov: np.ndarray, tolerance: float = 1e-8) -> np.ndarray:
    """Symmetric factor A with A A^T = cov, repairing tiny negative eigenvalues.

    Eigenvalues below -tolerance are rejected; those within it are clamped
    to zero.
    """
    sym = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(sym)
    if evals.min() < -tolerance:
        raise ValueError(f"psd_factor: matrix is not PSD (min eigenvalue {evals.min():g})")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def sample_augmented(mean: np.ndarray, cov: np.ndarray, lam: float,
                     count: int, seed: int) -> np.ndarray:
    """Draws from N(mean, lam * cov); exact copies of mean when lam == 0."""
    mean = np.asarray(mean, dtype=np.float64)
    if lam < 0:
        raise ValueError("sample_augmented: lambda must be >= 0")
    factor = psd_factor(np.asarray(cov, dtype=np.float64))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 61]))
    g = rng.standard_normal((count, len(mean)))
    return mean[None, :] + np.sqrt(lam) * (g @ factor.T)


def mc_expected_ce(mean: np.ndarray, cov: np.ndarray, lam: float,
                   w: np.ndarray, b: np.ndarray, target: int,
                   n_samples: int, seed: int,
                   with_stderr: bool = False):
    """Monte-Carlo estimate of E[CE(classifier(x), target)], x ~ N(mean, lam cov).

    Pure numpy; independent of the tape implementation on purpose.
    """
    x = sample_augmented(mean, cov, lam, n_samples, seed)
    logits = x @ np.asarray(w).T + np.asarray(b)[None, :]
    mx = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - mx).sum(axis=1)) + mx[:, 0]
    ces = lse - logits[:, int(target)]
    est = float(ces.mean())
    if with_stderr:
        stderr = float(ces.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
        return est, stderr
    return est
