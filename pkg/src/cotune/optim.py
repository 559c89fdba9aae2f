"""Update rules: plain SGD, the look-ahead regularized two-component step, and
an Adam variant without first moment whose step size carries the
second-moment bias correction ``alpha_k = alpha * sqrt((1 - beta2^k) / (1 - beta2))``.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import metrics
from .errors import ConfigError
from . import tensor as tc
from .metrics import BalanceRecord
from .model import Batch, GenerationDistribution, ToyMLLM
from .tensor import ContractError, NonFiniteError

Arrays = Mapping[str, np.ndarray]


class OptimConfigError(ConfigError):
    pass


def sgd_step(params: Arrays, grads: Arrays, lr: float) -> dict[str, np.ndarray]:
    if set(params) != set(grads):
        raise ContractError("sgd_step: parameter and gradient names differ")
    out = {}
    for k, p in params.items():
        if np.shape(grads[k]) != np.shape(p):
            raise ContractError(f"sgd_step: shape mismatch for {k}")
        out[k] = p - lr * grads[k]
    return out


@dataclass
class AdamState:
    alpha: float
    beta2: float = 0.999
    eps: float = 1e-8
    v: dict = field(default_factory=dict)
    k: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta2 <= 1.0:
            raise OptimConfigError(f"beta2 must lie in (0, 1], got {self.beta2}")


def adam_step_size(alpha: float, beta2: float, k: int) -> float:
    if beta2 == 1.0:
        return alpha * math.sqrt(k)
    return alpha * math.sqrt((1.0 - beta2**k) / (1.0 - beta2))


def adam_step(state: AdamState, params: Arrays, grads: Arrays) -> dict[str, np.ndarray]:
    """v_k = beta2 v_{k-1} + g^2;  x_k = x_{k-1} - alpha_k g / sqrt(v_k + eps)."""
    if not 0.0 < state.beta2 <= 1.0:
        raise OptimConfigError(f"beta2 must lie in (0, 1], got {state.beta2}")
    state.k += 1
    step = adam_step_size(state.alpha, state.beta2, state.k)
    out = {}
    for name, x in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for {name}")
        v = state.v.get(name)
        v = g * g if v is None else state.beta2 * v + g * g
        state.v[name] = v
        out[name] = x - step * g / np.sqrt(v + state.eps)
    return out


@dataclass
class RegularizerConfig:
    enabled: bool = False
    lam: float = 1.0
    kind: str = "sqrt_js"

    @property
    def active(self) -> bool:
        return self.enabled and self.lam != 0.0


@dataclass
class MeasureConfig:
    kind: str = "tv"
    gamma: float = 0.5
    floor: float = metrics.KAPPA_FLOOR
    kappa_min: float = metrics.KAPPA_MIN
    kappa_max: float = metrics.KAPPA_MAX
    kappa_mode: str = "scaled"  # "raw" measures unit steps along the raw gradients
    joint_probe: bool = True


@contextmanager
def _only_trainable(model: ToyMLLM, component: str):
    other = model.component("S" if component == "T" else "T")
    other.set_requires_grad(False)
    try:
        yield
    finally:
        other.set_requires_grad(True)


def _distribution(logits: np.ndarray, batch: Batch) -> GenerationDistribution:
    return GenerationDistribution(
        probs=tc._softmax(logits), row_example=batch.row_example, row_pos=batch.row_pos,
        n_examples=batch.size,
    )


@dataclass
class Lookahead:
    reg_grad: dict[str, np.ndarray]
    distance: float  # regularizer distance at the candidate point
    moved: GenerationDistribution  # distributions at the candidate point


def lookahead_regularizer_grad(
    model: ToyMLLM,
    batch: Batch,
    component: str,
    base_grad: Arrays,
    lr: float,
    kind: str = "sqrt_js",
    base: GenerationDistribution | None = None,
) -> Lookahead:
    """Gradient of the mean distance between the current (detached) distributions
    and those after the candidate step ``theta - lr * base_grad``, taken at the
    candidate point. Parameters are restored exactly before returning.
    """
    if base is None:
        base = model.forward_distributions(batch)
    params = model.component(component)
    before = model.trainable_checksum()
    params.apply_delta(base_grad, -lr)
    try:
        with _only_trainable(model, component):
            logits = model.answer_logits(batch)
            dist = tc.distance_to_fixed(base.probs, logits, batch.weights, kind)
            names = params.names()
            grads = tc.grad(dist, [params[n] for n in names])
    finally:
        params.apply_delta(base_grad, lr)
    if model.trainable_checksum() != before:
        raise metrics.RestoreError(f"look-ahead probe did not restore component {component}")
    return Lookahead(
        reg_grad=dict(zip(names, grads)), distance=dist.item(), moved=_distribution(logits.data, batch)
    )


def _candidate(model, batch, component, grads, lr) -> GenerationDistribution:
    params = model.component(component)
    params.apply_delta(grads, -lr)
    try:
        return model.forward_distributions(batch)
    finally:
        params.apply_delta(grads, lr)


def commit_step(
    model: ToyMLLM,
    batch: Batch,
    rates: tuple[float, float],
    reg: RegularizerConfig = RegularizerConfig(),
    backend: str = "sgd",
    adam: Mapping[str, AdamState] | None = None,
    measure: MeasureConfig = MeasureConfig(),
    step: int = 0,
    apply: bool = True,
    keep_vectors: bool = False,
) -> BalanceRecord:
    """One two-component update with balance measurements.

    ``rates`` is ``(lr_S, lr_T)``. The per-component combined gradient is
    ``grad L - lam * r`` so the applied SGD delta is ``-lr grad L + lr lam r``.
    Candidate steps used for the regularizer are reused for the balance
    measurements; only the joint probe costs an extra forward.
    """
    if backend not in ("sgd", "adam"):
        raise OptimConfigError(f"unknown backend {backend!r}")
    if backend == "adam" and adam is None:
        raise OptimConfigError("adam backend needs per-component AdamState")
    lr = {"S": float(rates[0]), "T": float(rates[1])}
    f0, b0 = model.counters["forward"], tc.COUNTERS["backward"]

    model.encoder.zero_grad()
    model.adapter.zero_grad()
    logits = model.answer_logits(batch)
    loss = tc.cross_entropy(logits, batch.targets, weights=batch.weights)
    tc.backward(loss)
    base = _distribution(logits.data, batch)
    g = {"S": model.encoder.grads(), "T": model.adapter.grads()}
    model.encoder.zero_grad()
    model.adapter.zero_grad()
    checksum = model.trainable_checksum()

    moved: dict[str, GenerationDistribution] = {}
    r: dict[str, dict[str, np.ndarray]] = {}
    reg_d = {"S": 0.0, "T": 0.0}
    for c in ("T", "S"):
        if reg.active:
            la = lookahead_regularizer_grad(model, batch, c, g[c], lr[c], reg.kind, base)
            moved[c], r[c], reg_d[c] = la.moved, la.reg_grad, la.distance
        else:
            moved[c] = _candidate(model, batch, c, g[c], lr[c])
    train_forwards = model.counters["forward"] - f0
    backwards = tc.COUNTERS["backward"] - b0

    kind = measure.kind
    if measure.kappa_mode == "raw":
        d_T = metrics.sequence_distance(_candidate(model, batch, "T", g["T"], 1.0), base, kind)
        d_S = metrics.sequence_distance(_candidate(model, batch, "S", g["S"], 1.0), base, kind)
    else:
        d_T = metrics.sequence_distance(moved["T"], base, kind)
        d_S = metrics.sequence_distance(moved["S"], base, kind)

    d_joint = d_S_after_T = 0.0
    if measure.joint_probe:
        model.adapter.apply_delta(g["T"], -lr["T"])
        model.encoder.apply_delta(g["S"], -lr["S"])
        try:
            joint = model.forward_distributions(batch)
        finally:
            model.encoder.apply_delta(g["S"], lr["S"])
            model.adapter.apply_delta(g["T"], lr["T"])
        d_joint = metrics.sequence_distance(joint, base, kind)
        d_S_after_T = metrics.sequence_distance(joint, moved["T"], kind)
    if model.trainable_checksum() != checksum:
        raise metrics.RestoreError("candidate probes did not restore the model")
    probe_forwards = model.counters["forward"] - f0 - train_forwards

    kappa, degenerate = metrics.compute_kappa(d_T, d_S, measure.floor, measure.kappa_min, measure.kappa_max)
    H_S, H_T = metrics.compute_H(model, batch, d_S, d_T)
    bound_T, bound_S = metrics.gradient_bounds(kappa, H_S, H_T, measure.gamma)

    gnorm = {c: metrics.normalized_grad_norm(g[c], model.component(c).arrays()) for c in ("S", "T")}

    combined = {}
    for c in ("S", "T"):
        if reg.active:
            combined[c] = {k: g[c][k] - reg.lam * r[c][k] for k in g[c]}
        else:
            combined[c] = g[c]
        for k, v in combined[c].items():
            if not np.isfinite(v).all():
                raise NonFiniteError(f"commit_step: non-finite combined gradient {c}.{k} at step {step}")

    upd = {"S": 0.0, "T": 0.0}
    deltas = {}
    if apply:
        for c in ("S", "T"):
            params = model.component(c)
            old = params.arrays()
            if backend == "sgd":
                new = sgd_step(old, combined[c], lr[c])
            elif lr[c] > 0:
                adam[c].alpha = lr[c]
                new = adam_step(adam[c], old, combined[c])
            else:
                continue
            deltas[c] = {k: new[k] - old[k] for k in new}
            upd[c] = metrics.flat_norm(deltas[c])
            params.assign(new)

    rec = BalanceRecord(
        step=step, loss=loss.item(), kappa=kappa, kappa_ma=kappa, d_T=d_T, d_S=d_S,
        d_joint=d_joint, H_S=H_S, H_T=H_T, bound_T=bound_T, bound_S=bound_S,
        gnorm_S=gnorm["S"], gnorm_T=gnorm["T"], lr_S=lr["S"], lr_T=lr["T"],
        reg_d_S=reg_d["S"], reg_d_T=reg_d["T"], d_S_after_T=d_S_after_T,
        kappa_degenerate=degenerate, upd_S=upd["S"], upd_T=upd["T"],
        forwards=train_forwards, backwards=backwards, probe_forwards=probe_forwards,
    )
    if keep_vectors:
        rec.detail = {"grad": g, "reg_grad": r, "combined": combined, "delta": deltas}
    return rec


def baseline_sgd_train(model: ToyMLLM, batches: Iterable[Batch], lr_S: float, lr_T: float) -> list[float]:
    """Plain joint SGD on both components with no measurement; returns the loss sequence."""
    losses = []
    for batch in batches:
        model.encoder.zero_grad()
        model.adapter.zero_grad()
        loss = model.batch_loss(batch)
        tc.backward(loss)
        losses.append(loss.item())
        for params, lr in ((model.encoder, lr_S), (model.adapter, lr_T)):
            grads = params.grads()
            params.assign({k: p - lr * grads[k] for k, p in params.arrays().items()})
        model.encoder.zero_grad()
        model.adapter.zero_grad()
    return losses
