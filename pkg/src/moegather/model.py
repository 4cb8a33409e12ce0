"""Desk-scale classifier models.

A model is an input projection, a stack of residual blocks, a mean pool, and
a linear head. Each block applies a fixed (non-trainable, seeded) linear token
mixer followed by a per-token feed-forward stage, both behind layer norms.
The feed-forward stage is either a single dense :class:`FeedForward` or an
:class:`MoELayer` that routes every token to its top-k experts.

``forward_batch`` is the one forward implementation; the per-sequence and
per-token operations below it are thin, independently testable views used by
gathering, metrics, and the test oracles.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import NumericalError, Rng, ShapeError, top_k_indices

LAYER_NORM_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _gelu_with_grad(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Tanh-form GELU; value and derivative share one tanh evaluation.
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return y, dy


def _relu_with_grad(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0.0
    return np.where(mask, x, 0.0), mask.astype(np.float64)


_ACTIVATIONS = {"gelu": _gelu_with_grad, "relu": _relu_with_grad}


def activation_with_grad(name: str):
    """Return f(x) -> (value, derivative) for the named activation."""
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(_ACTIVATIONS)}")


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-form GELU."""
    return _gelu_with_grad(np.asarray(x, dtype=np.float64))[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def activation_pair(name: str):
    """(value_fn, grad_fn) view kept for callers that need them separately."""
    with_grad = activation_with_grad(name)
    return (lambda x: with_grad(x)[0]), (lambda x: with_grad(x)[1])


@dataclass
class FeedForward:
    """Two linear layers around a nonlinearity.

    Serves both as one expert inside an MoE layer and as the dense stage of a
    student model; the two roles share shapes by construction.
    """

    w1: np.ndarray  # (d_model, d_ff)
    b1: np.ndarray  # (d_ff,)
    w2: np.ndarray  # (d_ff, d_model)
    b2: np.ndarray  # (d_model,)
    activation: str = "gelu"

    def __post_init__(self):
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, d) or self.b2.shape != (d,):
            raise ShapeError(
                f"inconsistent feed-forward shapes: w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )
        activation_pair(self.activation)

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "FeedForward":
        return FeedForward(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.activation)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def ffn_forward(ffn: FeedForward, x: np.ndarray) -> np.ndarray:
    """Apply a feed-forward stage to a vector or a (..., d_model) batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != ffn.d_model:
        raise ShapeError(f"input width {x.shape[-1]} != d_model {ffn.d_model}")
    act, _ = activation_pair(ffn.activation)
    return act(x @ ffn.w1 + ffn.b1) @ ffn.w2 + ffn.b2


@dataclass
class Router:
    """Linear gate over experts with optional Gaussian exploration noise."""

    weight: np.ndarray  # (d_model, num_experts)
    top_k: int
    noise_std: float | None = None  # defaults to 1/num_experts
    noise_enabled: bool = True

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError("router weight must be 2-D")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k={self.top_k} out of range for {self.num_experts} experts")
        if self.noise_std is None:
            self.noise_std = 1.0 / self.num_experts

    @property
    def num_experts(self) -> int:
        return self.weight.shape[1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def router_probs(x: np.ndarray, router: Router, rng: Rng | None = None) -> np.ndarray:
    """Gate probabilities for one token. Noise is drawn iff enabled and an rng
    is supplied (evaluation passes rng=None)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericalError("router input contains non-finite entries")
    if x.shape != (router.weight.shape[0],):
        raise ShapeError(f"token width {x.shape} != router input {router.weight.shape[0]}")
    logits = x @ router.weight
    if router.noise_enabled and rng is not None:
        logits = logits + rng.normal(size=router.num_experts, scale=router.noise_std)
    return _softmax(logits)


@dataclass
class MoELayer:
    experts: list[FeedForward]
    router: Router

    def __post_init__(self):
        if not self.experts:
            raise ShapeError("MoE layer needs at least one expert")
        d, h = self.experts[0].d_model, self.experts[0].d_ff
        for i, e in enumerate(self.experts):
            if (e.d_model, e.d_ff) != (d, h):
                raise ShapeError(f"expert {i} shape {(e.d_model, e.d_ff)} != expert 0 shape {(d, h)}")
        if self.router.num_experts != len(self.experts):
            raise ShapeError(
                f"router width {self.router.num_experts} != expert count {len(self.experts)}"
            )

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def d_model(self) -> int:
        return self.experts[0].d_model

    @property
    def d_ff(self) -> int:
        return self.experts[0].d_ff


@dataclass
class RoutingOutcome:
    """Routing record for a single token."""

    selected: tuple[int, ...]
    probs: np.ndarray  # (num_experts,), sums to 1

    @property
    def dispatch(self) -> np.ndarray:
        """One-hot over the primary (highest-gate) expert; ties pick the lower index."""
        one_hot = np.zeros_like(self.probs)
        one_hot[int(np.argmax(self.probs))] = 1.0
        return one_hot


def moe_forward(layer: MoELayer, x: np.ndarray, rng: Rng | None = None) -> tuple[np.ndarray, RoutingOutcome]:
    """Route one token: y = sum of raw gate * expert output over the top-k set."""
    probs = router_probs(x, layer.router, rng)
    selected = top_k_indices(probs, layer.router.top_k)
    y = np.zeros(layer.d_model)
    for i in selected:
        y += probs[i] * ffn_forward(layer.experts[i], x)
    return y, RoutingOutcome(selected=tuple(selected), probs=probs)


def balance_loss(outcomes: list[RoutingOutcome]) -> float:
    """Load-balance penalty over a pool of routing outcomes.

    num_experts * sum_i (fraction of tokens whose primary expert is i)
                        * (mean gate probability of i).
    Uniform dispatch and uniform gates give exactly 1.0.
    """
    if not outcomes:
        raise ValueError("balance_loss needs at least one routing outcome")
    probs = np.stack([o.probs for o in outcomes])
    dispatch = np.stack([o.dispatch for o in outcomes])
    num_experts = probs.shape[1]
    return float(num_experts * (dispatch.mean(axis=0) @ probs.mean(axis=0)))


@dataclass(frozen=True)
class Architecture:
    """Shape description of a classifier; serializable for checkpoints."""

    d_model: int
    d_ff: int
    seq_len: int
    num_classes: int
    num_blocks: int = 2
    parameter_sharing: bool = True
    activation: str = "gelu"
    stage: str = "dense"  # "dense" | "moe"
    num_experts: int = 1
    top_k: int = 1
    router_noise_std: float | None = None

    def __post_init__(self):
        if self.stage not in ("dense", "moe"):
            raise ValueError(f"stage must be 'dense' or 'moe', got {self.stage!r}")
        if self.stage == "moe" and not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k={self.top_k} out of range for {self.num_experts} experts")
        activation_pair(self.activation)

    def dense_twin(self) -> "Architecture":
        """Same shapes with the MoE stage collapsed to a single dense stage."""
        return replace(self, stage="dense", num_experts=1, top_k=1, router_noise_std=None)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "seq_len": self.seq_len,
            "num_classes": self.num_classes,
            "num_blocks": self.num_blocks,
            "parameter_sharing": self.parameter_sharing,
            "activation": self.activation,
            "stage": self.stage,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "router_noise_std": self.router_noise_std,
        }

    @staticmethod
    def from_dict(d: dict) -> "Architecture":
        return Architecture(**d)


@dataclass
class Block:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mixer: np.ndarray  # (seq_len, seq_len), fixed at build time
    stage: FeedForward | MoELayer


@dataclass
class ClassifierModel:
    arch: Architecture
    embed: np.ndarray  # (d_model, d_model) input projection
    blocks: list[Block]
    head_w: np.ndarray  # (d_model, num_classes)
    head_b: np.ndarray  # (num_classes,)

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors, in canonical order; a shared stage appears once."""
        params: dict[str, np.ndarray] = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            params[f"block{i}.ln1.gain"] = blk.ln1_gain
            params[f"block{i}.ln1.bias"] = blk.ln1_bias
            params[f"block{i}.ln2.gain"] = blk.ln2_gain
            params[f"block{i}.ln2.bias"] = blk.ln2_bias
        for prefix, stage in self.stages():
            if isinstance(stage, MoELayer):
                params[f"{prefix}.router"] = stage.router.weight
                for e, expert in enumerate(stage.experts):
                    for name, tensor in expert.tensors().items():
                        params[f"{prefix}.expert{e}.{name}"] = tensor
            else:
                for name, tensor in stage.tensors().items():
                    params[f"{prefix}.{name}"] = tensor
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def constants(self) -> dict[str, np.ndarray]:
        """Fixed (non-trainable) tensors that still belong in a checkpoint."""
        return {f"block{i}.mixer": blk.mixer for i, blk in enumerate(self.blocks)}

    def stages(self) -> list[tuple[str, FeedForward | MoELayer]]:
        """Unique feed-forward stages with their parameter-name prefixes."""
        if self.arch.parameter_sharing:
            return [("stage", self.blocks[0].stage)]
        return [(f"block{i}.stage", blk.stage) for i, blk in enumerate(self.blocks)]


def _init_linear(rng: Rng, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(size=(d_in, d_out), scale=np.sqrt(2.0 / (d_in + d_out)))


def _build_stage(arch: Architecture, rng: Rng) -> FeedForward | MoELayer:
    d, h = arch.d_model, arch.d_ff

    def make_ffn() -> FeedForward:
        return FeedForward(
            w1=_init_linear(rng, d, h),
            b1=np.zeros(h),
            w2=_init_linear(rng, h, d),
            b2=np.zeros(d),
            activation=arch.activation,
        )

    if arch.stage == "dense":
        return make_ffn()
    experts = [make_ffn() for _ in range(arch.num_experts)]
    router = Router(
        weight=rng.normal(size=(d, arch.num_experts), scale=0.02),
        top_k=arch.top_k,
        noise_std=arch.router_noise_std,
    )
    return MoELayer(experts=experts, router=router)


def build_classifier(arch: Architecture, rng: Rng) -> ClassifierModel:
    """Construct and initialize a model; deterministic given the rng seed."""
    d = arch.d_model
    embed = _init_linear(rng, d, d)
    shared = _build_stage(arch, rng) if arch.parameter_sharing else None
    blocks = []
    for _ in range(arch.num_blocks):
        blocks.append(
            Block(
                ln1_gain=np.ones(d),
                ln1_bias=np.zeros(d),
                ln2_gain=np.ones(d),
                ln2_bias=np.zeros(d),
                mixer=rng.normal(size=(arch.seq_len, arch.seq_len), scale=1.0 / np.sqrt(arch.seq_len)),
                stage=shared if shared is not None else _build_stage(arch, rng),
            )
        )
    head_w = _init_linear(rng, d, arch.num_classes)
    head_b = np.zeros(arch.num_classes)
    return ClassifierModel(arch=arch, embed=embed, blocks=blocks, head_w=head_w, head_b=head_b)


def count_parameters(model: ClassifierModel) -> int:
    return sum(t.size for t in model.parameters().values())


def state_hash(model: ClassifierModel) -> str:
    """SHA-256 over all tensors (trainable and fixed) in canonical order."""
    h = hashlib.sha256()
    for name, tensor in list(model.parameters().items()) + list(model.constants().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return h.hexdigest()


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    """Per-token layer norm over the last axis; returns (y, xhat, inv_std)."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    return gain * xhat + bias, xhat, inv_std


def _stage_forward_dense(stage: FeedForward, x: np.ndarray) -> dict:
    act = activation_with_grad(stage.activation)
    h_act, h_grad = act(x @ stage.w1 + stage.b1)
    return {"kind": "dense", "x": x, "h_grad": h_grad, "h_act": h_act, "out": h_act @ stage.w2 + stage.b2}


def _stage_forward_moe(
    stage: MoELayer, x: np.ndarray, rng: Rng | None, force_expert: int | None
) -> dict:
    n = x.shape[0]
    num_experts = stage.num_experts
    logits = x @ stage.router.weight
    if stage.router.noise_enabled and rng is not None:
        logits = logits + rng.normal(size=logits.shape, scale=stage.router.noise_std)
    probs = _softmax(logits)
    if force_expert is None:
        k = stage.router.top_k
        sel = np.sort(np.argsort(-probs, axis=1, kind="stable")[:, :k], axis=1)
        gates = np.take_along_axis(probs, sel, axis=1)
    else:
        sel = np.full((n, 1), force_expert, dtype=np.intp)
        gates = np.ones((n, 1))
    act = activation_with_grad(stage.experts[0].activation)
    out = np.zeros_like(x)
    per_expert: dict[int, dict] = {}
    for e in range(num_experts):
        hits = np.nonzero((sel == e).any(axis=1))[0]
        if hits.size == 0:
            continue
        expert = stage.experts[e]
        xe = x[hits]
        h_act, h_grad = act(xe @ expert.w1 + expert.b1)
        ye = h_act @ expert.w2 + expert.b2
        g = gates[hits][sel[hits] == e]
        out[hits] += g[:, None] * ye
        per_expert[e] = {"idx": hits, "h_grad": h_grad, "h_act": h_act, "y": ye, "gate": g}
    return {
        "kind": "moe",
        "x": x,
        "probs": probs,
        "sel": sel,
        "forced": force_expert is not None,
        "experts": per_expert,
        "out": out,
    }


def forward_batch(
    model: ClassifierModel,
    tokens: np.ndarray,
    rng: Rng | None = None,
    force_expert: int | None = None,
) -> tuple[np.ndarray, dict]:
    """Run a (batch, seq_len, d_model) token array through the model.

    Returns (logits, cache); the cache carries every intermediate the backward
    pass needs, plus per-MoE-stage routing arrays for the balance loss.
    Router noise is drawn only when an rng is supplied.
    """
    b, s, d = tokens.shape
    if s != model.arch.seq_len or d != model.arch.d_model:
        raise ShapeError(
            f"tokens shaped {(s, d)} but model expects ({model.arch.seq_len}, {model.arch.d_model})"
        )
    x = tokens.reshape(-1, d) @ model.embed
    x = x.reshape(b, s, d)
    cache: dict = {"tokens": tokens, "blocks": []}
    for blk in model.blocks:
        ln1_out, ln1_xhat, ln1_inv = layer_norm(x, blk.ln1_gain, blk.ln1_bias)
        mixed = np.einsum("ts,bsd->btd", blk.mixer, ln1_out)
        res1 = x + mixed
        ln2_out, ln2_xhat, ln2_inv = layer_norm(res1, blk.ln2_gain, blk.ln2_bias)
        flat = ln2_out.reshape(-1, d)
        if isinstance(blk.stage, MoELayer):
            stage_cache = _stage_forward_moe(blk.stage, flat, rng, force_expert)
        else:
            stage_cache = _stage_forward_dense(blk.stage, flat)
        x = res1 + stage_cache["out"].reshape(b, s, d)
        cache["blocks"].append(
            {
                "ln1": (ln1_xhat, ln1_inv),
                "ln2": (ln2_xhat, ln2_inv),
                "stage": stage_cache,
            }
        )
    pooled = x.mean(axis=1)
    logits = pooled @ model.head_w + model.head_b
    cache["pooled"] = pooled
    return logits, cache


def routing_outcomes(cache: dict) -> list[RoutingOutcome]:
    """Materialize per-token routing records from a forward cache, pooled
    across every MoE stage invocation in block order."""
    outcomes = []
    for blk in cache["blocks"]:
        stage = blk["stage"]
        if stage["kind"] != "moe":
            continue
        probs = stage["probs"]
        sel = stage["sel"]
        for t in range(probs.shape[0]):
            outcomes.append(RoutingOutcome(selected=tuple(int(i) for i in sel[t]), probs=probs[t]))
    return outcomes


def classifier_forward(
    model: ClassifierModel, tokens: np.ndarray, rng: Rng | None = None
) -> tuple[np.ndarray, list[RoutingOutcome]]:
    """Forward one (seq_len, d_model) sequence; aux is the routing pool for
    the balance loss (empty for dense models)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ShapeError("classifier_forward expects a single (seq_len, d_model) sequence")
    logits, cache = forward_batch(model, tokens[None, :, :], rng=rng)
    return logits[0], routing_outcomes(cache)
