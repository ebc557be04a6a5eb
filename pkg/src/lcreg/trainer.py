"""Two-stage training on long-tailed mixtures, with ablations.

Stage 1 trains everything under instance-balanced sampling with the combined
objective. Stage 2 freezes the encoder and the latent pool and retrains only
the linear decoder under class-balanced sampling with plain cross-entropy,
which is what recovers tail-class accuracy after representation learning.

Every stochastic choice is keyed off the run seed through named child
streams, so a configuration that drops a component leaves the remaining
draws untouched and runs rerun bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .augment import (
    AugSchedule,
    CategoryStats,
    classwise_augmented_logits,
    init_stats,
    update_stats,
)
from .data import (
    LongTailDataset,
    batch_stream,
    build_profile,
    make_mixture_spec,
    split_classes,
    synthesize_mixture,
)
from .diffcore import Tape
from .latent import fuse_for_decoder, similarity_maps
from .model import (
    LossBreakdown,
    LossWeights,
    ModelConfig,
    ModelParams,
    encode,
    forward,
    init_model,
    total_loss,
    vector_encoder,
)

RESULTS_FORMAT_VERSION = 1
VOLATILE_KEYS = ("created_at", "wall_time_s")
DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic long-tailed classification task: a Gaussian mixture whose
    training split follows a decaying count profile and whose test split is
    balanced."""
    num_classes: int = 10
    input_dim: int = 8
    n_max: int = 500
    imbalance: float = 100.0
    profile: str = "exponential"
    mean_scale: float = 1.0
    stdev: float = 1.0
    test_per_class: int = 200

    def __post_init__(self):
        if self.test_per_class < 1:
            raise ValueError("TaskSpec: test_per_class must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs besides the task itself."""
    hidden: tuple[int, ...] = (32,)
    feature_dim: int = 16
    num_latents: int = 24
    t1_iters: int = 3000
    t2_iters: int = 500
    batch_size: int = 64
    lr: float = 0.1
    lr_decay_points: tuple[float, ...] = (0.6, 0.8)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda0: float = 0.25
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 1.0
    seed: int = 0
    latent_on: bool = True
    recon_on: bool = True
    aug_on: bool = True
    raw_isda: bool = False
    stop_cls_grad_to_pool: bool = False
    stage2_lr: float = 0.01
    stage2_smoothing: float = 0.0
    stats_reset_on_stage2: bool = False
    log_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "lr_decay_points",
                           tuple(float(p) for p in self.lr_decay_points))
        if self.raw_isda and self.latent_on:
            raise ValueError("TrainConfig: raw_isda replaces the latent branch")
        if not self.latent_on and (self.recon_on or self.aug_on):
            raise ValueError("TrainConfig: recon/aug terms need the latent branch")
        if self.t1_iters < 1 or self.t2_iters < 0 or self.batch_size < 1:
            raise ValueError("TrainConfig: bad loop sizes")
        if self.log_every < 1:
            raise ValueError("TrainConfig: log_every must be >= 1")


def stage2_stream_seed(seed: int) -> int:
    """Stage 2 samples from its own stream, disjoint from stage 1."""
    return int(np.random.SeedSequence([int(seed), 43]).generate_state(1)[0])


def test_draw_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), 29]).generate_state(1)[0])


def make_task_data(task: TaskSpec, seed: int) -> tuple[LongTailDataset, LongTailDataset]:
    """(long-tailed train split, balanced test split) for one run seed."""
    spec = make_mixture_spec(task.num_classes, task.input_dim, seed,
                             mean_scale=task.mean_scale, stdev=task.stdev)
    counts = build_profile(task.num_classes, task.n_max, task.imbalance, task.profile)
    train = synthesize_mixture(spec, counts)
    test_counts = np.full(task.num_classes, task.test_per_class, dtype=np.int64)
    test = synthesize_mixture(spec, test_counts, seed=test_draw_seed(seed))
    return train, test


def lr_at(cfg: TrainConfig, t: int) -> float:
    passed = sum(1 for frac in cfg.lr_decay_points if t >= int(frac * cfg.t1_iters))
    return cfg.lr * cfg.lr_decay_factor ** passed


class SGD:
    """Momentum SGD; weight decay is added to the gradient of listed
    parameters at step time."""

    def __init__(self, params, lr, momentum, weight_decay, decay_params=()):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.decay_ids = {id(p) for p in decay_params}
        self.velocity = {id(p): np.zeros_like(p.value.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            g = p.grad.data
            if id(p) in self.decay_ids:
                g = g + self.weight_decay * p.value.data
            v = self.velocity[id(p)]
            v *= self.momentum
            v += g
            p.value.data -= self.lr * v


def _stage2_logits(tape: Tape, params: ModelParams, x_batch: np.ndarray):
    """Decoder-only forward: features and pool are cut out of the graph, so
    their gradients stay exactly zero during finetuning."""
    f, p = encode(tape, params, x_batch)
    f = tape.stop_gradient(f)
    if params.config.latent_on:
        sims = similarity_maps(tape, params.pool, f, detach_pool=True)
        fused = fuse_for_decoder(tape, f, sims)
    else:
        fused = f
    pooled = tape.mean_pool_segments(fused, p)
    return tape.transpose(
        tape.linear_map_1x1(pooled, tape.use(params.dec_w), tape.use(params.dec_b))
    )


@dataclass(frozen=True)
class EvalReport:
    """Balanced-test accuracy overall, per class, and by frequency group.

    Group accuracies are sample-weighted: overall equals the count-weighted
    mean of the group accuracies up to rounding."""
    overall: float
    many: float
    medium: float
    few: float
    per_class: np.ndarray
    group_counts: dict

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "many": self.many,
            "medium": self.medium,
            "few": self.few,
            "per_class": [float(a) for a in self.per_class],
            "group_counts": dict(self.group_counts),
        }


def evaluate(params: ModelParams, dataset: LongTailDataset,
             train_counts, chunk: int = 256) -> EvalReport:
    """Accuracy on ``dataset``; groups come from the training-set counts."""
    c = dataset.num_classes
    correct = np.zeros(c, dtype=np.int64)
    total = np.zeros(c, dtype=np.int64)
    for start in range(0, len(dataset.labels), chunk):
        xb = dataset.samples[start:start + chunk]
        yb = dataset.labels[start:start + chunk]
        logits = forward(Tape(), params, xb).logits.data
        pred = logits.argmax(axis=1)
        np.add.at(correct, yb, pred == yb)
        np.add.at(total, yb, 1)
    per_class = np.where(total > 0, correct / np.maximum(total, 1), 0.0)
    split = split_classes(train_counts)

    def group_acc(classes) -> tuple[float, int]:
        idx = sorted(classes)
        n = int(total[idx].sum()) if idx else 0
        if n == 0:
            return 0.0, 0
        return float(correct[idx].sum() / n), n

    many, n_many = group_acc(split.many)
    medium, n_medium = group_acc(split.medium)
    few, n_few = group_acc(split.few)
    overall = float(correct.sum() / max(total.sum(), 1))
    return EvalReport(
        overall=overall, many=many, medium=medium, few=few, per_class=per_class,
        group_counts={"many": n_many, "medium": n_medium, "few": n_few},
    )


@dataclass
class TrainResult:
    params: ModelParams
    stats: CategoryStats | None
    history: dict
    report: EvalReport | None
    diverged: bool
    diverged_at: int | None
    wall_time_s: float


def model_config(cfg: TrainConfig, task: TaskSpec) -> ModelConfig:
    enc = vector_encoder(task.input_dim, cfg.hidden, cfg.feature_dim)
    return ModelConfig(enc, task.num_classes, cfg.num_latents,
                       latent_on=cfg.latent_on,
                       stop_cls_grad_to_pool=cfg.stop_cls_grad_to_pool)


def run_training(cfg: TrainConfig, task: TaskSpec,
                 datasets: tuple[LongTailDataset, LongTailDataset] | None = None
                 ) -> TrainResult:
    """One full two-stage run; returns the trained model and its report."""
    t_start = time.perf_counter()
    train_ds, test_ds = datasets if datasets is not None else make_task_data(task, cfg.seed)
    if train_ds.sample_shape != (task.input_dim,):
        raise ValueError("run_training: dataset does not match task input_dim")
    params = init_model(model_config(cfg, task), cfg.seed)
    weights = LossWeights(cfg.alpha, cfg.beta, cfg.gamma)

    stats = None
    if cfg.aug_on:
        stats = init_stats(cfg.num_latents, cfg.feature_dim)
    elif cfg.raw_isda:
        stats = init_stats(task.num_classes, cfg.feature_dim)
    schedule = AugSchedule(cfg.lambda0, cfg.t1_iters) if (cfg.aug_on or cfg.raw_isda) else None

    history = {"iters": [], "total": [], "cls": [], "recon": [], "latent_aug": [],
               "stage2_iters": [], "stage2_cls": []}
    diverged = False
    diverged_at = None

    stream = batch_stream(train_ds, "instance_balanced", cfg.batch_size, cfg.seed)
    opt = SGD(params.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay,
              decay_params=params.decay_parameters())
    for t in range(cfg.t1_iters):
        opt.lr = lr_at(cfg, t)
        idx = next(stream)
        xb, yb = train_ds.samples[idx], train_ds.labels[idx]
        lam = schedule.lambda_at(t + 1) if schedule is not None else 0.0
        tape = Tape()
        if cfg.raw_isda:
            # class-conditional stats over pooled features, refreshed before
            # the loss so the bound sees the current batch
            fwd = forward(tape, params, xb)
            stats = update_stats(stats, fwd.pooled.data.T, yb)
            aug_logits = classwise_augmented_logits(
                tape, fwd.logits, tape.use(params.dec_w), yb, stats, lam
            )
            loss = tape.scale(tape.cross_entropy(aug_logits, yb), cfg.gamma)
            breakdown = LossBreakdown(
                total=loss.item(), cls=loss.item() / cfg.gamma, recon=0.0,
                latent_aug=0.0, alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma,
            )
        else:
            breakdown, loss, fwd = total_loss(
                tape, params, xb, yb, stats if cfg.aug_on else None, lam,
                weights, recon_on=cfg.recon_on, aug_on=cfg.aug_on,
            )
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        if cfg.aug_on:
            # each step contributes the current latents as one observation
            # per category, so counts equal the iteration number
            stats = update_stats(stats, params.pool.features.value.data,
                                 np.arange(cfg.num_latents))
        if not np.isfinite(breakdown.total) or abs(breakdown.total) > DIVERGENCE_LIMIT:
            diverged, diverged_at = True, t
            break
        if (t + 1) % cfg.log_every == 0 or t + 1 == cfg.t1_iters:
            history["iters"].append(t + 1)
            history["total"].append(breakdown.total)
            history["cls"].append(breakdown.cls)
            history["recon"].append(breakdown.recon)
            history["latent_aug"].append(breakdown.latent_aug)

    if not diverged and cfg.t2_iters > 0:
        if cfg.stats_reset_on_stage2 and stats is not None:
            stats = init_stats(stats.num_categories, stats.dim)
        stream2 = batch_stream(train_ds, "class_balanced", cfg.batch_size,
                               stage2_stream_seed(cfg.seed))
        opt2 = SGD(params.stage2_trainable(), cfg.stage2_lr, cfg.momentum,
                   cfg.weight_decay, decay_params=params.stage2_trainable())
        for t in range(cfg.t2_iters):
            idx = next(stream2)
            xb, yb = train_ds.samples[idx], train_ds.labels[idx]
            tape = Tape()
            logits = _stage2_logits(tape, params, xb)
            loss = tape.cross_entropy(logits, yb, label_smoothing=cfg.stage2_smoothing)
            opt2.zero_grad()
            tape.backward(loss)
            opt2.step()
            value = loss.item()
            if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
                diverged, diverged_at = True, cfg.t1_iters + t
                break
            if (t + 1) % cfg.log_every == 0 or t + 1 == cfg.t2_iters:
                history["stage2_iters"].append(t + 1)
                history["stage2_cls"].append(value)

    report = None if diverged else evaluate(params, test_ds, train_ds.counts)
    return TrainResult(
        params=params, stats=stats, history=history, report=report,
        diverged=diverged, diverged_at=diverged_at,
        wall_time_s=time.perf_counter() - t_start,
    )


# -- run records ----------------------------------------------------------


def config_dict(cfg: TrainConfig, task: TaskSpec) -> dict:
    d = {"task": asdict(task), "train": asdict(cfg)}
    d["train"]["hidden"] = list(cfg.hidden)
    d["train"]["lr_decay_points"] = list(cfg.lr_decay_points)
    return d


def config_hash(cfg: TrainConfig, task: TaskSpec) -> str:
    canon = json.dumps(config_dict(cfg, task), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def make_run_record(cfg: TrainConfig, task: TaskSpec, result: TrainResult) -> dict:
    return {
        "format_version": RESULTS_FORMAT_VERSION,
        "config": config_dict(cfg, task),
        "config_hash": config_hash(cfg, task),
        "seed": cfg.seed,
        "metrics": result.report.to_dict() if result.report is not None else None,
        "history": result.history,
        "diverged": result.diverged,
        "diverged_at": result.diverged_at,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "wall_time_s": result.wall_time_s,
    }


def canonical_record_bytes(record: dict) -> bytes:
    """Record serialization with volatile fields removed; two runs of the
    same config must agree on this byte string exactly."""
    pruned = {k: v for k, v in record.items() if k not in VOLATILE_KEYS}
    return json.dumps(pruned, sort_keys=True, separators=(",", ":")).encode()


# -- component ablation ---------------------------------------------------

COMPONENT_GRID: dict[str, dict] = {
    "baseline": dict(latent_on=False, recon_on=False, aug_on=False, raw_isda=False),
    "latent": dict(latent_on=True, recon_on=False, aug_on=False, raw_isda=False),
    "latent_recon": dict(latent_on=True, recon_on=True, aug_on=False, raw_isda=False),
    "latent_aug": dict(latent_on=True, recon_on=False, aug_on=True, raw_isda=False),
    "full": dict(latent_on=True, recon_on=True, aug_on=True, raw_isda=False),
    "raw_isda": dict(latent_on=False, recon_on=False, aug_on=False, raw_isda=True),
}


def run_ablation(base_cfg: TrainConfig, task: TaskSpec, seeds,
                 rows: dict | None = None) -> dict:
    """Component grid over shared per-seed datasets.

    Returns {"rows": {name: {"seeds": {seed: metrics-or-error}}},
    "summary": {name: mean metrics over clean runs}}.
    """
    rows = COMPONENT_GRID if rows is None else rows
    out: dict = {"rows": {}, "summary": {}}
    data_cache = {int(s): make_task_data(task, int(s)) for s in seeds}
    for name, flags in rows.items():
        per_seed = {}
        for s in seeds:
            cfg = replace(base_cfg, seed=int(s), **flags)
            result = run_training(cfg, task, datasets=data_cache[int(s)])
            if result.diverged:
                per_seed[int(s)] = {"error": "diverged", "at": result.diverged_at}
            else:
                per_seed[int(s)] = result.report.to_dict()
        out["rows"][name] = {"seeds": per_seed}
        clean = [m for m in per_seed.values() if "error" not in m]
        if clean:
            out["summary"][name] = {
                key: float(np.mean([m[key] for m in clean]))
                for key in ("overall", "many", "medium", "few")
            }
            out["summary"][name]["num_clean"] = len(clean)
        else:
            out["summary"][name] = {"num_clean": 0}
    return out
