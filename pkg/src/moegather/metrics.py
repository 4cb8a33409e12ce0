"""Evaluation metrics: benefit preservation, accuracy, FLOPs accounting, and
an empirical decomposition of the noise injected by SVD knowledge gathering.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .gather import average_bias, svdkg_merge
from .model import ClassifierModel, FeedForward, MoELayer, ffn_forward, router_probs
from .numerics import svd
from .training import evaluate_accuracy

# Multiply-accumulate counted as two floating point operations.
FLOPS_PER_MAC = 2


class UndefinedMetricError(ValueError):
    """The benefit ratio is undefined when the MoE and dense scores coincide."""


@dataclass(frozen=True)
class Scoreboard:
    """Three scores on one common metric (e.g. accuracy in percent)."""

    score_student: float
    score_dense: float
    score_moe: float


def moe_benefits(s: Scoreboard) -> float:
    """Fraction of the MoE's improvement over the plain dense model that the
    student preserves: (student - dense) / (moe - dense)."""
    denom = s.score_moe - s.score_dense
    if denom == 0.0:
        raise UndefinedMetricError("score_moe equals score_dense; benefit ratio undefined")
    return (s.score_student - s.score_dense) / denom


def accuracy(model: ClassifierModel, dataset) -> float:
    """Argmax accuracy over a labeled dataset, routing noise disabled.

    ``dataset`` is anything with ``tokens``/``labels`` attributes or a
    (tokens, labels) pair.
    """
    if hasattr(dataset, "tokens"):
        tokens, labels = dataset.tokens, dataset.labels
    else:
        tokens, labels = dataset
    return evaluate_accuracy(model, tokens, np.asarray(labels))


def flops_per_token(layer: FeedForward | MoELayer) -> int:
    """Floating point operations one token spends in a feed-forward or MoE
    stage. Counts the linear maps only (MAC = 2 FLOPs); activations, norms
    and biases are excluded. The MoE cost is k experts plus the router."""
    if isinstance(layer, FeedForward):
        return 2 * FLOPS_PER_MAC * layer.d_model * layer.d_ff
    dense_cost = 2 * FLOPS_PER_MAC * layer.d_model * layer.d_ff
    router_cost = FLOPS_PER_MAC * layer.d_model * layer.num_experts
    return layer.router.top_k * dense_cost + router_cost


@dataclass(frozen=True)
class NoiseScanRow:
    svd_ratio: float
    mean_signal_norm: float
    mean_noise_norm: float
    noise_signal_ratio: float
    mean_selected_gate: float


def _select_expert(moe: MoELayer, x: np.ndarray) -> tuple[int, float]:
    probs = router_probs(x, moe.router, rng=None)  # noise off for analysis
    idx = int(np.argmax(probs))
    return idx, float(probs[idx])


def noise_decompose(
    moe: MoELayer, svd_ratio: float, x: np.ndarray, *, full_ffn: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Split the SVD-gathered layer's output on one token into signal + noise.

    Signal is what the routed expert alone would contribute after its own
    truncation (gate treated as 1); noise is everything the merge adds on
    top: the truncated foreign experts plus the bias-averaging mismatch.
    By construction signal + noise equals the gathered layer's output exactly.

    Default analyses the first linear layer only; ``full_ffn`` compares
    end-to-end feed-forward outputs instead.
    """
    picked, _ = _select_expert(moe, x)
    expert = moe.experts[picked]
    b1_avg, b2_avg = average_bias(moe.experts)
    if full_ffn:
        w1_g, trunc1 = svdkg_merge([e.w1 for e in moe.experts], svd_ratio)
        w2_g, trunc2 = svdkg_merge([e.w2 for e in moe.experts], svd_ratio)
        student = FeedForward(w1_g, b1_avg, w2_g, b2_avg, activation=expert.activation)
        own = FeedForward(
            trunc1[picked].reconstruct(), expert.b1,
            trunc2[picked].reconstruct(), expert.b2,
            activation=expert.activation,
        )
        signal = ffn_forward(own, x)
        noise = ffn_forward(student, x) - signal
        return signal, noise
    w1_g, trunc1 = svdkg_merge([e.w1 for e in moe.experts], svd_ratio)
    signal = x @ trunc1[picked].reconstruct() + expert.b1
    gathered = x @ w1_g + b1_avg
    return signal, gathered - signal


def noise_scan(moe: MoELayer, svd_ratios, tokens: np.ndarray) -> list[NoiseScanRow]:
    """Mean signal/noise norms of the first-layer gathering noise over a token
    sample, one row per ratio, rows sorted by ratio ascending."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != moe.d_model:
        raise ValueError(f"tokens must be (n, {moe.d_model})")
    ratios = sorted(float(r) for r in svd_ratios)
    factors = [svd(e.w1) for e in moe.experts]
    b1_avg, _ = average_bias(moe.experts)
    selections = [_select_expert(moe, x) for x in tokens]
    picks = np.array([s[0] for s in selections])
    gates = np.array([s[1] for s in selections])
    mats = [e.w1 for e in moe.experts]
    rows = []
    for ratio in ratios:
        w1_g, trunc = svdkg_merge(mats, ratio, factors=factors)
        recon = [f.reconstruct() for f in trunc]
        signal_norms = np.empty(len(tokens))
        noise_norms = np.empty(len(tokens))
        for t, x in enumerate(tokens):
            e = int(picks[t])
            signal = x @ recon[e] + moe.experts[e].b1
            noise = (x @ w1_g + b1_avg) - signal
            signal_norms[t] = np.linalg.norm(signal)
            noise_norms[t] = np.linalg.norm(noise)
        mean_signal = float(signal_norms.mean())
        mean_noise = float(noise_norms.mean())
        rows.append(
            NoiseScanRow(
                svd_ratio=ratio,
                mean_signal_norm=mean_signal,
                mean_noise_norm=mean_noise,
                noise_signal_ratio=mean_noise / mean_signal if mean_signal > 0 else 0.0,
                mean_selected_gate=float(gates.mean()),
            )
        )
    return rows


NOISE_SCAN_COLUMNS = ["lambda", "mean_signal_norm", "mean_noise_norm", "ratio", "mean_selected_gate"]


def write_noise_scan_csv(rows: list[NoiseScanRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NOISE_SCAN_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.svd_ratio,
                    row.mean_signal_norm,
                    row.mean_noise_norm,
                    row.noise_signal_ratio,
                    row.mean_selected_gate,
                ]
            )
