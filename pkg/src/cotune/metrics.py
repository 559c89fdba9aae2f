"""Balance measurements between the encoder (S) and adapter (T) steps.

``d`` is a metric on categorical distributions: total variation by default,
or the square root of the base-2 Jensen-Shannon divergence. It is lifted to
generation distributions by averaging over answer positions, then examples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from .model import Batch, GenerationDistribution, ToyMLLM
from .tensor import ContractError, no_grad

KINDS = ("tv", "sqrt_js")
KAPPA_FLOOR = 1e-12
KAPPA_MIN = 1e-3
KAPPA_MAX = 1e3


class MaskMismatch(ContractError):
    pass


class RestoreError(RuntimeError):
    pass


def _check_normalized(p: np.ndarray, name: str) -> None:
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > 1e-9) or np.any(p < 0):
        raise ContractError(f"{name} is not a normalized categorical distribution")


def row_distances(p: np.ndarray, q: np.ndarray, kind: str = "tv") -> np.ndarray:
    """Distances between matching rows of two [M, V] probability matrices."""
    if p.shape != q.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {q.shape}")
    if kind == "tv":
        return 0.5 * np.abs(p - q).sum(axis=-1)
    if kind == "sqrt_js":
        m = 0.5 * (p + q)
        with np.errstate(divide="ignore", invalid="ignore"):
            kp = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0) / m), 0.0).sum(axis=-1)
            kq = np.where(q > 0, q * np.log2(np.where(q > 0, q, 1.0) / m), 0.0).sum(axis=-1)
        return np.sqrt(np.clip(0.5 * kp + 0.5 * kq, 0.0, 1.0))
    raise ContractError(f"unknown distance kind {kind!r}")


def distribution_distance(p, q, kind: str = "tv") -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractError("distributions must be 1-D and of equal length")
    _check_normalized(p, "p")
    _check_normalized(q, "q")
    return float(row_distances(p[None], q[None], kind)[0])


def sequence_distance(a: GenerationDistribution, b: GenerationDistribution, kind: str = "tv") -> float:
    """Mean over examples of the mean over answer positions of ``d``."""
    if not a.same_layout(b):
        raise MaskMismatch("generation distributions come from different batches/masks")
    d = row_distances(a.probs, b.probs, kind)
    return _nested_mean(d, a.row_example, a.n_examples)


def _nested_mean(values: np.ndarray, row_example: np.ndarray, n_examples: int) -> float:
    sums = np.bincount(row_example, weights=values, minlength=n_examples)
    counts = np.bincount(row_example, minlength=n_examples)
    return float(np.mean(sums / counts))


def component_step_distance(
    model: ToyMLLM,
    batch: Batch,
    component: str,
    delta: Mapping[str, np.ndarray],
    lr: float,
    kind: str = "tv",
    base: GenerationDistribution | None = None,
) -> float:
    """Distance moved by the candidate step ``theta - lr * delta`` of one component.

    Parameters are restored exactly afterwards (checked by checksum).
    """
    if base is None:
        base = model.forward_distributions(batch)
    before = model.trainable_checksum()
    model.apply_delta(component, delta, -lr)
    try:
        moved = model.forward_distributions(batch)
    finally:
        model.apply_delta(component, delta, lr)
    if model.trainable_checksum() != before:
        raise RestoreError(f"component {component} was not restored after a candidate step")
    return sequence_distance(moved, base, kind)


def compute_kappa(
    d_T: float, d_S: float, floor: float = KAPPA_FLOOR,
    kappa_min: float = KAPPA_MIN, kappa_max: float = KAPPA_MAX,
) -> tuple[float, bool]:
    """Balance coefficient d_T / max(d_S, floor), clamped; also reports whether the floor engaged."""
    if d_T < 0 or d_S < 0:
        raise ContractError("distances must be non-negative")
    degenerate = d_S < floor
    kappa = d_T / max(d_S, floor)
    return float(min(max(kappa, kappa_min), kappa_max)), degenerate


@dataclass(frozen=True)
class InputNorms:
    instr: float  # batch mean Frobenius norm of instruction token embeddings
    soft: float  # batch mean Frobenius norm of soft-token matrices
    feature: float  # batch mean l2 norm of raw features


def input_norms(model: ToyMLLM, batch: Batch) -> InputNorms:
    emb = model.backbone["tok_emb"].data
    instr = [
        np.linalg.norm(emb[batch.tokens[i, : batch.instr_len[i]]]) for i in range(batch.size)
    ]
    with no_grad():
        soft = model.encode_features(batch.features).data
    return InputNorms(
        instr=float(np.mean(instr)),
        soft=float(np.mean(np.sqrt((soft**2).sum(axis=(1, 2))))),
        feature=float(np.mean(np.linalg.norm(batch.features, axis=1))),
    )


def compute_H(
    model: ToyMLLM, batch: Batch, d_S: float, d_T: float, norms: InputNorms | None = None
) -> tuple[float, float]:
    """Individual learning steps (H^S, H^T)."""
    norms = norms or input_norms(model, batch)
    denom_s = norms.instr + norms.soft
    if denom_s <= 0 or norms.feature <= 0:
        raise ContractError("input norms must be positive")
    return d_S / denom_s, d_T / norms.feature


def gradient_bounds(kappa: float, H_S: float, H_T: float, gamma: float) -> tuple[float, float]:
    """(bound on ||G^T||, bound on ||G^S||)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if kappa <= 0:
        raise ContractError("kappa must be positive")
    return gamma * (kappa + 1.0) * H_S, gamma * (1.0 / kappa + 1.0) * H_T


def flat_norm(arrays: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(a))) for a in arrays.values()))


def normalized_grad_norm(grads: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray]) -> float:
    if set(grads) != set(params):
        raise ContractError("gradient and parameter names differ")
    for k in grads:
        if np.shape(grads[k]) != np.shape(params[k]):
            raise ContractError(f"shape mismatch for {k}")
    pn = flat_norm(params)
    if pn == 0:
        raise ContractError("parameter norm is zero")
    return flat_norm(grads) / pn


CSV_COLUMNS = (
    "step", "loss", "kappa", "kappa_ma", "dT", "dS", "dJoint", "HS", "HT", "boundT", "boundS",
    "gnormS", "gnormT", "lrS", "lrT", "regDS", "regDT", "evalAcc",
)


@dataclass
class BalanceRecord:
    step: int
    loss: float
    kappa: float
    kappa_ma: float
    d_T: float
    d_S: float
    d_joint: float
    H_S: float
    H_T: float
    bound_T: float
    bound_S: float
    gnorm_S: float
    gnorm_T: float
    lr_S: float
    lr_T: float
    reg_d_S: float = 0.0
    reg_d_T: float = 0.0
    eval_acc: float | None = None
    # not part of the CSV schema
    d_S_after_T: float = 0.0
    kappa_degenerate: bool = False
    upd_S: float = 0.0
    upd_T: float = 0.0
    forwards: int = 0
    backwards: int = 0
    probe_forwards: int = 0
    detail: dict | None = None

    def csv_values(self) -> list:
        return [
            self.step, self.loss, self.kappa, self.kappa_ma, self.d_T, self.d_S, self.d_joint,
            self.H_S, self.H_T, self.bound_T, self.bound_S, self.gnorm_S, self.gnorm_T,
            self.lr_S, self.lr_T, self.reg_d_S, self.reg_d_T, self.eval_acc,
        ]

    def check_finite(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise FloatingPointError(f"BalanceRecord.{f.name} is not finite at step {self.step}")
