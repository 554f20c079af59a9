"""Finetuning loop with learnable class embeddings, synthesized-unknown
regularization, and self-distillation.

The text-encoder side of the original setting is emulated by one learnable
embedding per base class (initialized at the dataset's class embeddings);
new-class embeddings stay frozen. Each epoch the base classes are
reshuffled into pseudo-known/pseudo-unknown roles: pseudo-known image
features drive a cosine-softmax cross-entropy over the union of base
columns, pseudo-unknown classes get features synthesized from their
nearest pseudo-known neighbors, optionally held consistent with an EMA
teacher of the generator. Optimization is SGD with momentum and cosine
learning-rate decay. Runs are deterministic per seed.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import objective
from ._tensorio import read_tensor_file, write_tensor_file
from .distillation import (
    ScheduleConfig,
    TeacherQueue,
    almt_teacher,
    ema_mean_teacher,
    push_checkpoint,
    teacher_epoch_range,
    window_size,
)
from .embedding_store import EmbeddingSet
from .errors import ConfigError, DataError, NumericalError
from .generator import (
    GeneratorGrads,
    GeneratorParams,
    backward,
    extrapolate_jointly,
    extrapolate_per_class,
    init_params,
)
from .retrieval import build_context, retrieve_knn

SCHEMES = ("none", "per_class", "joint")
DISTILL_MODES = ("none", "mt", "almt", "fixed")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    k: int = 3
    scheme: str = "joint"
    distill: str = "almt"
    fixed_window: "int | None" = None
    tau: float = 0.01
    learning_rate: float = 0.02
    generator_lr: float = 0.02
    momentum: float = 0.9
    lambda_syn: float = 2.0
    lambda_distill: float = 1.0
    pseudo_unknown_fraction: float = 0.3
    seed: int = 0
    heads: int = 4
    d_ff: "int | None" = None
    m_min: int = 2
    m_max: int = 9
    ema_alpha: float = 0.9
    random_neighbors: bool = False
    known_loss_union: bool = True

    def validate(self, dataset: "EmbeddingSet | None" = None) -> None:
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if self.distill not in DISTILL_MODES:
            raise ConfigError(f"unknown distill mode {self.distill!r}, expected one of {DISTILL_MODES}")
        if self.scheme == "none" and self.distill != "none":
            raise ConfigError("scheme=none has no generator to distill; use distill=none")
        if self.distill == "fixed" and (self.fixed_window is None or self.fixed_window < 1):
            raise ConfigError("distill=fixed requires fixed_window >= 1")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.learning_rate < 0 or self.generator_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lambda_syn < 0 or self.lambda_distill < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 < self.pseudo_unknown_fraction < 1.0:
            raise ConfigError(
                f"pseudo_unknown_fraction must be in (0, 1), got {self.pseudo_unknown_fraction}"
            )
        if not 1 <= self.m_min <= self.m_max:
            raise ConfigError(f"need 1 <= m_min <= m_max, got {self.m_min}, {self.m_max}")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ConfigError(f"ema_alpha must be in (0, 1), got {self.ema_alpha}")
        if dataset is not None:
            c_b = len(dataset.split.base)
            if c_b == 0:
                raise DataError("dataset has no base classes to finetune on")
            if dataset.dim % self.heads != 0:
                raise ConfigError(f"heads={self.heads} does not divide dim={dataset.dim}")
            n_unk = math.ceil(self.pseudo_unknown_fraction * c_b)
            if n_unk >= c_b:
                raise ConfigError(
                    f"pseudo split leaves no known classes ({n_unk} of {c_b} unknown)"
                )
            for c in dataset.split.base:
                if dataset.image_features[c].shape[0] < 2:
                    raise DataError(
                        f"base class {c} ({dataset.class_names[c]!r}) needs >= 2 image features"
                    )

    def effective_k(self, dataset: EmbeddingSet) -> int:
        """k after clamping to the pseudo-known class count (recorded in
        run metadata when it differs from the requested k)."""
        c_b = len(dataset.split.base)
        n_known = c_b - math.ceil(self.pseudo_unknown_fraction * c_b)
        return min(self.k, n_known)


@dataclass
class EpochMetrics:
    epoch: int
    base_acc: float
    new_acc: float
    harmonic_mean: float
    known_ce: float
    synth_ce: float
    distill_mse: float
    m_t: int
    teacher_lo: "int | None" = None
    teacher_hi: "int | None" = None


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    next_epoch: int
    embeddings: np.ndarray              # (d, C_b) float64, base-split order
    emb_velocity: np.ndarray
    params: "GeneratorParams | None"
    gen_velocity: "GeneratorGrads | None"
    rng: np.random.Generator
    queue: "TeacherQueue | None"
    mt_teacher: "GeneratorParams | None"


@dataclass
class TrainResult:
    params: "GeneratorParams | None"
    embeddings: np.ndarray
    metrics: list
    state: TrainState


def harmonic_mean(a: float, b: float) -> float:
    """2ab/(a+b) for non-negative inputs (accuracies or percentages);
    zero when both are zero."""
    if a < 0 or b < 0:
        raise DataError(f"harmonic mean needs non-negative inputs, got {a}, {b}")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


class _EvalCache:
    """Precomputed per-split feature matrices and union-column labels."""

    def __init__(self, dataset: EmbeddingSet):
        self.dataset = dataset
        base, new = dataset.split.base, dataset.split.new
        self.frozen_new = dataset.embedding_columns(new) if new else np.empty((dataset.dim, 0))
        self.base_feats = self._stack(dataset, base)
        self.base_labels = self._labels(dataset, base, offset=0)
        self.new_feats = self._stack(dataset, new)
        self.new_labels = self._labels(dataset, new, offset=len(base))

    @staticmethod
    def _stack(dataset, classes):
        if not classes:
            return np.empty((0, dataset.dim))
        return np.concatenate(
            [dataset.image_features[c].astype(np.float64) for c in classes], axis=0
        )

    @staticmethod
    def _labels(dataset, classes, offset):
        counts = [dataset.image_features[c].shape[0] for c in classes]
        return np.repeat(np.arange(offset, offset + len(classes)), counts)

    def accuracies(self, base_embeddings: np.ndarray):
        union = np.concatenate([base_embeddings, self.frozen_new], axis=1)
        unit = union / np.linalg.norm(union, axis=0)
        base_acc = self._acc(self.base_feats, self.base_labels, unit)
        new_acc = self._acc(self.new_feats, self.new_labels, unit)
        return base_acc, new_acc

    @staticmethod
    def _acc(feats, labels, unit_union):
        if feats.shape[0] == 0:
            return 0.0
        pred = np.argmax(feats @ unit_union, axis=1)
        return float(np.mean(pred == labels))


def evaluate(params, embeddings, dataset: EmbeddingSet, tau: float = 0.01):
    """Score every image feature against the union of learnable base
    columns and frozen new-class embeddings; argmax accuracy per split
    plus the harmonic mean. The generator does not participate at
    evaluation time (params is accepted for checkpoint-eval symmetry);
    tau does not affect the argmax.
    """
    del params, tau
    cache = _EvalCache(dataset)
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape != (dataset.dim, len(dataset.split.base)):
        raise DataError(
            f"embeddings shape {emb.shape} != ({dataset.dim}, {len(dataset.split.base)})"
        )
    base_acc, new_acc = cache.accuracies(emb)
    return base_acc, new_acc, harmonic_mean(base_acc, new_acc)


def _unit_vector_vjp(raw: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(raw)
    unit = raw / norm
    return (d_unit - unit * (unit @ d_unit)) / norm


def _sgd_step(value: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float):
    velocity *= momentum
    velocity += grad
    value -= lr * velocity


def _init_state(dataset: EmbeddingSet, cfg: TrainConfig) -> TrainState:
    init_ss, loop_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    base = list(dataset.split.base)
    embeddings = dataset.embedding_columns(base).copy()
    params = None
    gen_velocity = None
    if cfg.scheme != "none":
        d_ff = cfg.d_ff if cfg.d_ff is not None else 2 * dataset.dim
        params = init_params(cfg.heads, dataset.dim, d_ff, seed=int(init_ss.generate_state(1)[0]))
        gen_velocity = GeneratorGrads.zeros_like(params)
    queue = None
    if cfg.distill in ("almt", "fixed"):
        schedule = ScheduleConfig(
            t_max=cfg.epochs, m_min=cfg.m_min, m_max=cfg.m_max, ema_alpha=cfg.ema_alpha
        )
        capacity = max(cfg.m_max, cfg.fixed_window or 0) + 1
        queue = TeacherQueue(schedule=schedule, capacity=capacity)
    return TrainState(
        next_epoch=0,
        embeddings=embeddings,
        emb_velocity=np.zeros_like(embeddings),
        params=params,
        gen_velocity=gen_velocity,
        rng=np.random.default_rng(loop_ss),
        queue=queue,
        mt_teacher=None,
    )


def _resolve_teacher(state: TrainState, cfg: TrainConfig, epoch: int):
    """Teacher params for this epoch plus the (lo, hi) checkpoint epochs
    used, or (None, None) while no checkpoint exists yet."""
    if cfg.distill == "mt":
        if state.mt_teacher is None:
            return None, None
        return state.mt_teacher, (0, epoch - 1)
    if cfg.distill in ("almt", "fixed"):
        if state.queue is None or len(state.queue) == 0:
            return None, None
        if cfg.distill == "almt":
            m = window_size(epoch, state.queue.schedule)
            return almt_teacher(state.queue, epoch), teacher_epoch_range(state.queue, m + 1)
        window = [p for _, p in state.queue.last(min(cfg.fixed_window + 1, len(state.queue)))]
        return (
            ema_mean_teacher(window, cfg.ema_alpha),
            teacher_epoch_range(state.queue, cfg.fixed_window + 1),
        )
    return None, None


def _mt_update(state: TrainState, cfg: TrainConfig) -> None:
    if state.mt_teacher is None:
        state.mt_teacher = state.params.copy()
        return
    alpha = cfg.ema_alpha
    teacher = state.mt_teacher.tensor_dict()
    student = state.params.tensor_dict()
    for name, t in teacher.items():
        t *= alpha
        t += (1.0 - alpha) * student[name]


def train(dataset: EmbeddingSet, cfg: TrainConfig, state: "TrainState | None" = None, on_epoch=None) -> TrainResult:
    """Run (or continue) a finetuning run; returns the metric rows
    produced by this call along with the final parameters and state."""
    cfg.validate(dataset)
    if state is None:
        state = _init_state(dataset, cfg)

    base = list(dataset.split.base)
    c_b = len(base)
    n_unk = math.ceil(cfg.pseudo_unknown_fraction * c_b)
    feats_by_col = {j: dataset.image_features[c] for j, c in enumerate(base)}
    known_feats = np.concatenate(
        [dataset.image_features[c].astype(np.float64) for c in base], axis=0
    )
    feat_col = np.repeat(
        np.arange(c_b), [dataset.image_features[c].shape[0] for c in base]
    )
    # frozen new-class columns participate in every softmax denominator
    # (the union reading); they never receive updates
    frozen_new = (
        dataset.embedding_columns(dataset.split.new)
        if dataset.split.new
        else np.empty((dataset.dim, 0))
    )
    eval_cache = _EvalCache(dataset)
    extrapolate = extrapolate_jointly if cfg.scheme == "joint" else extrapolate_per_class
    synth_fns = {
        "joint": (objective.synth_ce_joint, objective.distill_grad_joint, objective.prob_joint_scheme),
        "per_class": (objective.synth_ce_per_class, objective.distill_grad_per_class, objective.prob_per_class_scheme),
    }
    rng = state.rng
    rows = []

    for epoch in range(state.next_epoch, cfg.epochs):
        decay = 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        lr_emb = cfg.learning_rate * decay
        lr_gen = cfg.generator_lr * decay

        # fresh pseudo known/unknown roles for the base classes
        perm = rng.permutation(c_b)
        unknown_cols = np.sort(perm[:n_unk])
        known_cols = np.sort(perm[n_unk:])

        # -- known-class cross-entropy, minibatch SGD on the embeddings --
        rows_known = np.flatnonzero(np.isin(feat_col, known_cols))
        shuffled = rows_known[rng.permutation(rows_known.size)]
        known_loss_sum = 0.0
        for start in range(0, shuffled.size, cfg.batch_size):
            batch = shuffled[start : start + cfg.batch_size]
            feats = known_feats[batch].T
            targets = feat_col[batch]
            if cfg.known_loss_union:
                denom = np.concatenate([state.embeddings, frozen_new], axis=1)
            else:
                denom = state.embeddings
            loss, d_denom = objective.known_batch_ce(feats, denom, cfg.tau, targets)
            # frozen new columns take part in the softmax but stay fixed
            grad = d_denom[:, :c_b]
            _sgd_step(state.embeddings, grad, state.emb_velocity, lr_emb, cfg.momentum)
            known_loss_sum += loss * batch.size
        known_ce = known_loss_sum / max(rows_known.size, 1)

        # -- synthesized-unknown losses, one accumulated step --
        synth_ce = 0.0
        mse = 0.0
        teacher_range = None
        if cfg.scheme != "none":
            ce_fn, mse_fn, prob_fn = synth_fns[cfg.scheme]
            teacher, teacher_range = _resolve_teacher(state, cfg, epoch)
            gen_grads = GeneratorGrads.zeros_like(state.params)
            emb_grad = np.zeros_like(state.embeddings)
            k_eff = min(cfg.k, known_cols.size)
            union = np.concatenate([state.embeddings, frozen_new], axis=1)
            for u in unknown_cols:
                w_raw = state.embeddings[:, u]
                if cfg.random_neighbors:
                    picks = rng.choice(known_cols.size, size=k_eff, replace=False)
                    neighbor_cols = known_cols[picks]
                else:
                    local = retrieve_knn(w_raw, state.embeddings[:, known_cols], k_eff)
                    neighbor_cols = known_cols[local]
                ctx = build_context(
                    neighbor_cols,
                    state.embeddings[:, neighbor_cols],
                    feats_by_col,
                    rng,
                    conditioning=int(u),
                )
                w_unit = w_raw / np.linalg.norm(w_raw)
                feature, tape = extrapolate(ctx, w_unit, state.params)
                ce, d_feat, d_union = ce_fn(feature, union, cfg.tau, int(u))
                synth_ce += ce
                upstream = cfg.lambda_syn * d_feat
                emb_grad += cfg.lambda_syn * d_union[:, :c_b]
                if teacher is not None:
                    t_feature, _ = extrapolate(ctx, w_unit, teacher)
                    p_teacher = prob_fn(t_feature, union, cfg.tau)
                    m, dm_feat, dm_union = mse_fn(p_teacher, feature, union, cfg.tau)
                    mse += m
                    upstream = upstream + cfg.lambda_distill * dm_feat
                    emb_grad += cfg.lambda_distill * dm_union[:, :c_b]
                ggrads, igrads = backward(tape, upstream)
                gen_grads.add_(ggrads)
                emb_grad[:, u] += _unit_vector_vjp(w_raw, igrads.w_n)
                for j, col in enumerate(ctx.neighbor_indices):
                    emb_grad[:, col] += _unit_vector_vjp(
                        state.embeddings[:, col], igrads.neighbor_embeddings[:, j]
                    )
            gen_grads.scale_(1.0 / unknown_cols.size)
            emb_grad /= unknown_cols.size
            synth_ce /= unknown_cols.size
            if teacher is not None:
                mse /= unknown_cols.size
            for name, tensor in state.params.tensor_dict().items():
                _sgd_step(
                    tensor,
                    getattr(gen_grads, name),
                    getattr(state.gen_velocity, name),
                    lr_gen,
                    cfg.momentum,
                )
            _sgd_step(state.embeddings, emb_grad, state.emb_velocity, lr_emb, cfg.momentum)

        # -- teacher bookkeeping, evaluation, metrics --
        if cfg.distill in ("almt", "fixed"):
            push_checkpoint(state.queue, epoch, state.params)
        elif cfg.distill == "mt":
            _mt_update(state, cfg)

        if cfg.distill == "almt":
            m_t = window_size(epoch, state.queue.schedule)
        elif cfg.distill == "fixed":
            m_t = cfg.fixed_window
        else:
            m_t = 0

        breakdown = objective.LossBreakdown(
            known_ce=known_ce,
            synth_ce=synth_ce,
            distill_mse=mse,
            lambda_syn=cfg.lambda_syn,
            lambda_distill=cfg.lambda_distill,
        )
        if not (
            np.isfinite(breakdown.total) and np.all(np.isfinite(state.embeddings))
        ):
            raise NumericalError(
                f"non-finite state at epoch {epoch}: known_ce={known_ce!r} "
                f"synth_ce={synth_ce!r} distill_mse={mse!r}"
            )
        base_acc, new_acc = eval_cache.accuracies(state.embeddings)
        row = EpochMetrics(
            epoch=epoch,
            base_acc=base_acc,
            new_acc=new_acc,
            harmonic_mean=harmonic_mean(base_acc, new_acc),
            known_ce=known_ce,
            synth_ce=synth_ce,
            distill_mse=mse,
            m_t=m_t,
            teacher_lo=teacher_range[0] if teacher_range else None,
            teacher_hi=teacher_range[1] if teacher_range else None,
        )
        rows.append(row)
        state.next_epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(state, row)

    return TrainResult(
        params=state.params, embeddings=state.embeddings, metrics=rows, state=state
    )


# ---------------------------------------------------------------------------
# Run-state persistence (full precision; resume is bit-exact)
# ---------------------------------------------------------------------------


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    tensors = {
        "embeddings": state.embeddings,
        "emb_velocity": state.emb_velocity,
    }
    meta = {
        "format": "ogen-run-state",
        "version": 1,
        "next_epoch": state.next_epoch,
        "rng": state.rng.bit_generator.state,
        "config": asdict(cfg),
        "queue_epochs": [e for e, _ in state.queue.entries] if state.queue else None,
        "has_mt": state.mt_teacher is not None,
        "gen_meta": None,
    }
    if state.params is not None:
        meta["gen_meta"] = {
            "heads": state.params.heads,
            "dim": state.params.dim,
            "d_ff": state.params.d_ff,
        }
        tensors.update({f"params.{k}": v for k, v in state.params.tensor_dict().items()})
        tensors.update({f"velocity.{k}": v for k, v in state.gen_velocity.tensor_dict().items()})
        if state.queue is not None:
            for i, (_, params) in enumerate(state.queue.entries):
                tensors.update({f"queue{i}.{k}": v for k, v in params.tensor_dict().items()})
        if state.mt_teacher is not None:
            tensors.update({f"mt.{k}": v for k, v in state.mt_teacher.tensor_dict().items()})
    write_tensor_file(path, tensors, meta)


def _params_from(tensors: dict, prefix: str, gen_meta: dict) -> GeneratorParams:
    fields = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    return GeneratorParams(
        heads=gen_meta["heads"], dim=gen_meta["dim"], d_ff=gen_meta["d_ff"], **fields
    )


def load_state(path):
    """Returns (TrainState, TrainConfig) reconstructed from a state file."""
    tensors, meta = read_tensor_file(path)
    if meta.get("format") != "ogen-run-state":
        raise DataError(f"{path}: not a run-state file")
    cfg = TrainConfig(**meta["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    params = None
    gen_velocity = None
    queue = None
    mt_teacher = None
    gen_meta = meta.get("gen_meta")
    if gen_meta is not None:
        params = _params_from(tensors, "params.", gen_meta)
        velocity_fields = _params_from(tensors, "velocity.", gen_meta)
        gen_velocity = GeneratorGrads(**velocity_fields.tensor_dict())
        epochs = meta.get("queue_epochs")
        if epochs is not None:
            schedule = ScheduleConfig(
                t_max=cfg.epochs, m_min=cfg.m_min, m_max=cfg.m_max, ema_alpha=cfg.ema_alpha
            )
            capacity = max(cfg.m_max, cfg.fixed_window or 0) + 1
            queue = TeacherQueue(schedule=schedule, capacity=capacity)
            queue.entries = [
                (e, _params_from(tensors, f"queue{i}.", gen_meta)) for i, e in enumerate(epochs)
            ]
        if meta.get("has_mt"):
            mt_teacher = _params_from(tensors, "mt.", gen_meta)
    state = TrainState(
        next_epoch=int(meta["next_epoch"]),
        embeddings=tensors["embeddings"],
        emb_velocity=tensors["emb_velocity"],
        params=params,
        gen_velocity=gen_velocity,
        rng=rng,
        queue=queue,
        mt_teacher=mt_teacher,
    )
    return state, cfg


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------


@dataclass
class AblationReport:
    """Mean +- std of final base/new/H per grid cell, one list per table."""

    component: list = field(default_factory=list)
    schemes: list = field(default_factory=list)
    k_sweep: list = field(default_factory=list)
    distill: list = field(default_factory=list)

    def tables(self):
        return {
            "component": self.component,
            "schemes": self.schemes,
            "k_sweep": self.k_sweep,
            "distill": self.distill,
        }


def _cell_stats(finals):
    arr = np.array(finals, dtype=np.float64)  # rows: (base, new, H)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1) if arr.shape[0] > 1 else np.zeros(3)
    return {
        "base_mean": float(mean[0]),
        "base_std": float(std[0]),
        "new_mean": float(mean[1]),
        "new_std": float(std[1]),
        "h_mean": float(mean[2]),
        "h_std": float(std[2]),
        "seeds": arr.shape[0],
    }


def ablation_workers(requested: "int | None" = None) -> int:
    cap = os.environ.get("OGEN_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if limit < 1:
        raise ConfigError(f"OGEN_THREADS must be >= 1, got {limit}")
    return max(1, min(requested or limit, limit))


def ablate(dataset: EmbeddingSet, base_cfg: TrainConfig, seeds: int = 3, max_workers=None) -> AblationReport:
    """Run the standard ablation grid and aggregate final-epoch metrics.

    Tables: component on/off, extrapolation schemes, neighbor-count sweep
    with a random-neighbor row, and distillation variants. Cells sharing a
    configuration reuse the same runs. Runs execute in parallel worker
    threads (capped by OGEN_THREADS); results do not depend on scheduling.
    """
    if seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {seeds}")
    base_cfg.validate(dataset)

    def variant(**kw) -> TrainConfig:
        return replace(base_cfg, **kw)

    plan = {
        "component": [
            ("generator=off distill=off", variant(scheme="none", distill="none")),
            ("generator=on distill=off", variant(scheme="joint", distill="none")),
            ("generator=on distill=on", variant(scheme="joint", distill="almt")),
        ],
        "schemes": [
            ("none", variant(scheme="none", distill="none")),
            ("per_class", variant(scheme="per_class", distill="none")),
            ("joint", variant(scheme="joint", distill="none")),
        ],
        "k_sweep": [
            (f"knn k={k}", variant(scheme="joint", distill="none", k=k)) for k in (1, 2, 3, 4)
        ]
        + [(f"random k={base_cfg.k}", variant(scheme="joint", distill="none", random_neighbors=True))],
        "distill": [
            ("none", variant(scheme="joint", distill="none")),
            ("mt", variant(scheme="joint", distill="mt")),
            ("fixed m=2", variant(scheme="joint", distill="fixed", fixed_window=2)),
            ("fixed m=9", variant(scheme="joint", distill="fixed", fixed_window=9)),
            ("almt", variant(scheme="joint", distill="almt")),
        ],
    }

    jobs = {}
    for rows in plan.values():
        for _, cfg in rows:
            for i in range(seeds):
                run_cfg = replace(cfg, seed=base_cfg.seed + i)
                jobs.setdefault(run_cfg, None)

    def run_one(cfg: TrainConfig):
        final = train(dataset, cfg).metrics[-1]
        return (final.base_acc, final.new_acc, final.harmonic_mean)

    with ThreadPoolExecutor(max_workers=ablation_workers(max_workers)) as pool:
        futures = {cfg: pool.submit(run_one, cfg) for cfg in jobs}
        results = {cfg: fut.result() for cfg, fut in futures.items()}

    report = AblationReport()
    for table, rows in plan.items():
        out = getattr(report, table)
        for label, cfg in rows:
            finals = [results[replace(cfg, seed=base_cfg.seed + i)] for i in range(seeds)]
            out.append({"variant": label, **_cell_stats(finals)})
    return report
