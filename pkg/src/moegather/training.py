"""Losses, exact reverse-mode gradients, the optimizer, and training loops.

The backward pass is written by hand for the fixed block architecture in
:mod:`moegather.model`. Top-k routing is treated as piecewise constant: no
gradient flows through the selection indices, only through the gate
probabilities of the selected experts (and, separately, through every gate
probability via the balance loss, which is a direct function of them).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    ClassifierModel,
    MoELayer,
    forward_batch,
    state_hash,
)
from .numerics import NumericalError, Rng

GradientSet = dict[str, np.ndarray]

KL_DIRECTIONS = ("teacher_to_student", "student_to_teacher")
DISTILL_MODES = ("soft", "hard", "none")


@dataclass
class LossBreakdown:
    main: float
    distill: float = 0.0
    balance: float = 0.0
    total: float = 0.0


@dataclass
class DistillConfig:
    """Settings for student refinement against a frozen teacher."""

    alpha: float = 0.25
    temperature: float = 1.0
    mode: str = "soft"
    steps: int = 800
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    eval_every: int = 200
    kl_direction: str = "teacher_to_student"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode not in DISTILL_MODES:
            raise ValueError(f"mode must be one of {DISTILL_MODES}, got {self.mode!r}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")


@dataclass
class TrainConfig:
    """Settings for supervised training (teacher or dense baseline)."""

    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 3e-3
    balance_coeff: float = 0.01
    seed: int = 0
    eval_every: int = 200


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Negative log-likelihood of the true class."""
    return float(-_log_softmax(np.asarray(logits, dtype=np.float64))[int(label)])


def soft_kd_loss(z_s: np.ndarray, z_t: np.ndarray, temperature: float,
                 kl_direction: str = "teacher_to_student") -> float:
    """Temperature-scaled KL divergence between softened teacher and student
    logits, scaled by T^2 so gradient magnitude is temperature-invariant."""
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_s.shape != z_t.shape:
        raise ValueError(f"logit shapes differ: {z_s.shape} vs {z_t.shape}")
    if not (np.isfinite(z_s).all() and np.isfinite(z_t).all()):
        raise NumericalError("non-finite logits in distillation loss")
    t = temperature
    ls_s = _log_softmax(z_s / t)
    ls_t = _log_softmax(z_t / t)
    if kl_direction == "teacher_to_student":
        kl = float(np.sum(np.exp(ls_t) * (ls_t - ls_s)))
    else:
        kl = float(np.sum(np.exp(ls_s) * (ls_s - ls_t)))
    return t * t * kl


def hard_kd_loss(z_s: np.ndarray, z_t: np.ndarray) -> float:
    """Cross-entropy of the student against the teacher's argmax decision."""
    z_s = np.asarray(z_s, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_s.shape != z_t.shape:
        raise ValueError(f"logit shapes differ: {z_s.shape} vs {z_t.shape}")
    return cross_entropy(z_s, int(np.argmax(z_t)))


def total_loss(main: float, distill: float, alpha: float) -> float:
    """Convex combination of the task loss and the distillation loss."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * main + (1.0 - alpha) * distill


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _distill_terms(logits: np.ndarray, teacher_logits: np.ndarray, cfg: DistillConfig):
    """Mean distillation loss over the batch and its gradient w.r.t. the
    student logits."""
    b = logits.shape[0]
    t = cfg.temperature
    if cfg.mode == "hard":
        targets = np.argmax(teacher_logits, axis=1)
        ls = _log_softmax(logits)
        loss = float(-ls[np.arange(b), targets].mean())
        dlogits = (np.exp(ls) - _onehot(targets, logits.shape[1])) / b
        return loss, dlogits
    ls_s = _log_softmax(logits / t)
    ls_t = _log_softmax(teacher_logits / t)
    p_s, p_t = np.exp(ls_s), np.exp(ls_t)
    if cfg.kl_direction == "teacher_to_student":
        loss = float(t * t * np.sum(p_t * (ls_t - ls_s)) / b)
        dlogits = t * (p_s - p_t) / b
    else:
        log_ratio = ls_s - ls_t
        kl = np.sum(p_s * log_ratio, axis=1, keepdims=True)
        loss = float(t * t * kl.sum() / b)
        dlogits = t * p_s * (log_ratio - kl) / b
    return loss, dlogits


def _pooled_balance(cache: dict) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Balance loss over all MoE invocations in the forward cache.

    Returns (loss, per-invocation gate arrays, pooled dispatch fractions m).
    """
    gate_arrays = [
        blk["stage"]["probs"] for blk in cache["blocks"] if blk["stage"]["kind"] == "moe"
    ]
    if not gate_arrays:
        return 0.0, [], np.zeros(0)
    pooled = np.concatenate(gate_arrays, axis=0)
    num_experts = pooled.shape[1]
    primary = np.argmax(pooled, axis=1)
    m = np.bincount(primary, minlength=num_experts) / pooled.shape[0]
    loss = float(num_experts * (m @ pooled.mean(axis=0)))
    return loss, gate_arrays, m


def _stage_backward(stage, stage_cache: dict, d_out: np.ndarray, grads: GradientSet,
                    prefix: str, balance_dp: np.ndarray | None) -> np.ndarray:
    if stage_cache["kind"] == "dense":
        x, h_act = stage_cache["x"], stage_cache["h_act"]
        grads[f"{prefix}.w2"] += h_act.T @ d_out
        grads[f"{prefix}.b2"] += d_out.sum(axis=0)
        dh = (d_out @ stage.w2.T) * stage_cache["h_grad"]
        grads[f"{prefix}.w1"] += x.T @ dh
        grads[f"{prefix}.b1"] += dh.sum(axis=0)
        return dh @ stage.w1.T

    if stage_cache["forced"]:
        raise NotImplementedError("backward through a forced-gate forward is unsupported")
    x, probs = stage_cache["x"], stage_cache["probs"]
    d_probs = np.zeros_like(probs)
    if balance_dp is not None:
        d_probs += balance_dp
    d_x = np.zeros_like(x)
    for e, ec in stage_cache["experts"].items():
        idx = ec["idx"]
        d_ye_path = d_out[idx]
        # gate path: output depends linearly on the selected gate probability
        d_probs[idx, e] += np.einsum("nd,nd->n", d_ye_path, ec["y"])
        # expert path, weighted by the (constant w.r.t. weights) gate value
        d_ye = d_ye_path * ec["gate"][:, None]
        expert = stage.experts[e]
        grads[f"{prefix}.expert{e}.w2"] += ec["h_act"].T @ d_ye
        grads[f"{prefix}.expert{e}.b2"] += d_ye.sum(axis=0)
        dh = (d_ye @ expert.w2.T) * ec["h_grad"]
        grads[f"{prefix}.expert{e}.w1"] += x[idx].T @ dh
        grads[f"{prefix}.expert{e}.b1"] += dh.sum(axis=0)
        d_x[idx] += dh @ expert.w1.T
    # softmax backward: additive routing noise is a constant shift
    d_logits = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))
    grads[f"{prefix}.router"] += x.T @ d_logits
    d_x += d_logits @ stage.router.weight.T
    return d_x


def _layer_norm_backward(d_y: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray,
                         gain: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d_gain = (d_y * xhat).sum(axis=(0, 1))
    d_bias = d_y.sum(axis=(0, 1))
    d_xhat = d_y * gain
    d_x = inv_std * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True)
    )
    return d_x, d_gain, d_bias


def backward_from_logits(model: ClassifierModel, cache: dict, d_logits: np.ndarray,
                         balance_coeff: float = 0.0) -> GradientSet:
    """Accumulate gradients of (loss from d_logits) + balance_coeff * balance
    into a fresh GradientSet keyed like ``model.parameters()``."""
    params = model.parameters()
    grads: GradientSet = {name: np.zeros_like(p) for name, p in params.items()}
    tokens = cache["tokens"]
    b, s, d = tokens.shape

    balance_dp = None
    if balance_coeff > 0.0:
        _, gate_arrays, m = _pooled_balance(cache)
        if gate_arrays:
            n_pool = sum(g.shape[0] for g in gate_arrays)
            balance_dp = balance_coeff * m.size * m / n_pool

    grads["head.w"] += cache["pooled"].T @ d_logits
    grads["head.b"] += d_logits.sum(axis=0)
    d_x = np.broadcast_to((d_logits @ model.head_w.T)[:, None, :] / s, (b, s, d)).copy()

    for i in reversed(range(len(model.blocks))):
        blk = model.blocks[i]
        blk_cache = cache["blocks"][i]
        prefix = "stage" if model.arch.parameter_sharing else f"block{i}.stage"
        d_stage_in = _stage_backward(
            blk.stage, blk_cache["stage"], d_x.reshape(-1, d), grads, prefix, balance_dp
        ).reshape(b, s, d)
        ln2_xhat, ln2_inv = blk_cache["ln2"]
        d_res1, d_g2, d_b2 = _layer_norm_backward(d_stage_in, ln2_xhat, ln2_inv, blk.ln2_gain)
        grads[f"block{i}.ln2.gain"] += d_g2
        grads[f"block{i}.ln2.bias"] += d_b2
        d_res1 = d_res1 + d_x  # residual around the stage
        d_ln1_out = np.einsum("ts,btd->bsd", blk.mixer, d_res1)
        ln1_xhat, ln1_inv = blk_cache["ln1"]
        d_in, d_g1, d_b1 = _layer_norm_backward(d_ln1_out, ln1_xhat, ln1_inv, blk.ln1_gain)
        grads[f"block{i}.ln1.gain"] += d_g1
        grads[f"block{i}.ln1.bias"] += d_b1
        d_x = d_res1 + d_in  # residual around the mixer

    grads["embed"] += tokens.reshape(-1, d).T @ d_x.reshape(-1, d)
    return grads


def loss_and_grads(
    model: ClassifierModel,
    tokens: np.ndarray,
    labels: np.ndarray,
    *,
    teacher: ClassifierModel | None = None,
    distill: DistillConfig | None = None,
    balance_coeff: float = 0.0,
    rng: Rng | None = None,
    compute_grads: bool = True,
) -> tuple[LossBreakdown, GradientSet | None]:
    """One training objective evaluation: batch-mean loss and its exact
    gradients. Teacher logits (when distilling) are produced noise-free and
    the teacher never appears in the gradient set."""
    labels = np.asarray(labels)
    logits, cache = forward_batch(model, tokens, rng=rng)
    b = logits.shape[0]
    ls = _log_softmax(logits)
    main = float(-ls[np.arange(b), labels].mean())
    d_main = (np.exp(ls) - _onehot(labels, logits.shape[1])) / b

    distilling = distill is not None and distill.mode != "none" and teacher is not None
    if distilling:
        teacher_logits, _ = forward_batch(teacher, tokens, rng=None)
        distill_val, d_distill = _distill_terms(logits, teacher_logits, distill)
        alpha = distill.alpha
        d_logits = alpha * d_main + (1.0 - alpha) * d_distill
        total = total_loss(main, distill_val, alpha)
    else:
        distill_val = 0.0
        d_logits = d_main
        total = main

    balance = 0.0
    if balance_coeff > 0.0:
        balance, _, _ = _pooled_balance(cache)
        total += balance_coeff * balance

    breakdown = LossBreakdown(main=main, distill=distill_val, balance=balance, total=total)
    if not compute_grads:
        return breakdown, None
    grads = backward_from_logits(model, cache, d_logits, balance_coeff=balance_coeff)
    return breakdown, grads


def backward(
    model: ClassifierModel,
    tokens: np.ndarray,
    labels: np.ndarray,
    *,
    teacher: ClassifierModel | None = None,
    distill: DistillConfig | None = None,
    balance_coeff: float = 0.0,
    rng: Rng | None = None,
) -> GradientSet:
    """Exact gradients of the configured total loss for every trainable tensor."""
    _, grads = loss_and_grads(
        model, tokens, labels, teacher=teacher, distill=distill,
        balance_coeff=balance_coeff, rng=rng,
    )
    return grads


@dataclass(frozen=True)
class LinearDecaySchedule:
    """Linear learning-rate decay; the final step lands exactly on end_lr."""

    base_lr: float
    total_steps: int
    end_lr: float = 0.0

    def lr_at(self, step: int) -> float:
        if self.total_steps <= 1:
            return self.base_lr
        frac = min(max(step / (self.total_steps - 1), 0.0), 1.0)
        return self.base_lr + (self.end_lr - self.base_lr) * frac


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def for_params(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def optimizer_step(params: dict[str, np.ndarray], grads: GradientSet,
                   state: AdamState, schedule: LinearDecaySchedule) -> None:
    """In-place Adam update; the step index lives in the optimizer state."""
    lr = schedule.lr_at(state.t)
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass
class TrainResult:
    model: ClassifierModel
    log: list[dict] = field(default_factory=list)
    final_heldout_acc: float = 0.0
    final_balance: float | None = None


def evaluate_accuracy(model: ClassifierModel, tokens: np.ndarray, labels: np.ndarray,
                      batch: int = 512) -> float:
    """Argmax accuracy with routing noise disabled."""
    hits = 0
    for start in range(0, len(labels), batch):
        logits, _ = forward_batch(model, tokens[start : start + batch], rng=None)
        hits += int((np.argmax(logits, axis=1) == labels[start : start + batch]).sum())
    return hits / len(labels)


def _measure_balance(model: ClassifierModel, tokens: np.ndarray, limit: int = 256) -> float:
    _, cache = forward_batch(model, tokens[:limit], rng=None)
    value, gates, _ = _pooled_balance(cache)
    return value if gates else 0.0


def _run_training(
    model: ClassifierModel,
    data,
    *,
    steps: int,
    batch_size: int,
    learning_rate: float,
    seed: int,
    eval_every: int,
    balance_coeff: float = 0.0,
    teacher: ClassifierModel | None = None,
    distill_cfg: DistillConfig | None = None,
) -> TrainResult:
    train, test = data
    n = len(train.labels)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds training set size {n}")
    rng = Rng(seed)
    noise_rng = rng.derive("router-noise") if model.arch.stage == "moe" else None
    order_rng = rng.derive("batch-order")
    schedule = LinearDecaySchedule(learning_rate, steps)
    params = model.parameters()
    state = AdamState.for_params(params)
    log: list[dict] = []
    perm = order_rng.permutation(n)
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > n:
            perm = order_rng.permutation(n)
            cursor = 0
        idx = perm[cursor : cursor + batch_size]
        cursor += batch_size
        lr = schedule.lr_at(state.t)
        breakdown, grads = loss_and_grads(
            model,
            train.tokens[idx],
            train.labels[idx],
            teacher=teacher,
            distill=distill_cfg,
            balance_coeff=balance_coeff,
            rng=noise_rng,
        )
        if not np.isfinite(breakdown.total):
            raise NumericalError(f"training diverged (non-finite loss) at step {step}")
        optimizer_step(params, grads, state, schedule)
        row = {
            "step": step,
            "main": breakdown.main,
            "distill": breakdown.distill,
            "balance": breakdown.balance,
            "total": breakdown.total,
            "lr": lr,
            "heldout_acc": "",
        }
        if eval_every and ((step + 1) % eval_every == 0 or step == steps - 1):
            row["heldout_acc"] = evaluate_accuracy(model, test.tokens, test.labels)
        log.append(row)
    final_acc = evaluate_accuracy(model, test.tokens, test.labels)
    final_balance = None
    if model.arch.stage == "moe":
        final_balance = _measure_balance(model, test.tokens)
    return TrainResult(model=model, log=log, final_heldout_acc=final_acc, final_balance=final_balance)


def train_classifier(model: ClassifierModel, cfg: TrainConfig, data) -> TrainResult:
    """Supervised training on the task loss; MoE models add the balance
    penalty and exploration noise, dense models train plain."""
    balance = cfg.balance_coeff if model.arch.stage == "moe" else 0.0
    return _run_training(
        model,
        data,
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        balance_coeff=balance,
    )


def train_teacher(arch, cfg: TrainConfig, data) -> TrainResult:
    """Build and train an MoE teacher from scratch; deterministic per seed."""
    from .model import Architecture, build_classifier  # local to avoid import noise

    if not isinstance(arch, Architecture) or arch.stage != "moe":
        raise ValueError("train_teacher expects an MoE architecture")
    model = build_classifier(arch, Rng(cfg.seed).derive("init"))
    return train_classifier(model, cfg, data)


def distill_student(student: ClassifierModel, teacher: ClassifierModel,
                    cfg: DistillConfig, data) -> TrainResult:
    """Refine the student against the frozen teacher.

    The teacher is forwarded noise-free for its logits and is verified
    bit-identical before and after training.
    """
    teacher_before = state_hash(teacher)
    result = _run_training(
        student,
        data,
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        balance_coeff=0.0,
        teacher=teacher,
        distill_cfg=cfg,
    )
    if state_hash(teacher) != teacher_before:
        raise RuntimeError("teacher weights changed during distillation")
    return result
