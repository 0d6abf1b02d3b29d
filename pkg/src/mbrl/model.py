"""The moderately-balanced representation network and its training loop.

An encoder maps covariates to a representation read by three consumers: a
sigmoid discriminator producing propensity scores, and two outcome heads for
the control and treated arms. Two trainable free scalars turn the mean
outcome and treatment residuals into noise regularizers. Training alternates
three tasks per minibatch:

  Task 1  ascend   L_dis - lambda1 * Omega_d   over (discriminator, eps_d)
  Task 2  descend  L_imb                       over the encoder
  Task 3  descend  L_fo + lambda2 * Omega_y    over (encoder, heads, eps_y)

Model selection tracks the validation perturbation error (RMSE plus a
weighted cross-residual term) and keeps the best epoch's parameters.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import nn
from .data import Dataset
from .metrics import rmse
from .ot import SinkhornConfig, wasserstein_sinkhorn

logger = logging.getLogger(__name__)

ABLATIONS = ("full_mbrl", "no_eps_p", "no_orthogonality", "tarnet_mode", "cfr_mode")

BETA_DEFAULT_CONTINUOUS = 0.1
BETA_DEFAULT_BINARY = 100.0


def default_beta(outcome_kind: str) -> float:
    return BETA_DEFAULT_BINARY if outcome_kind == "binary" else BETA_DEFAULT_CONTINUOUS


# =========================================================================
# Network
# =========================================================================

@dataclass
class MBRLNet:
    """Encoder, discriminator, outcome heads and the two free scalars.

    ``input_mean``/``input_scale`` hold the per-feature standardization
    (train-split statistics) applied before the encoder; they are part of
    the model, not of the data.
    """

    phi_spec: nn.NetSpec
    phi: nn.ParamSet
    pi_spec: nn.NetSpec
    pi: nn.ParamSet
    f0_spec: nn.NetSpec
    f0: nn.ParamSet
    f1_spec: nn.NetSpec
    f1: nn.ParamSet
    eps_y: np.ndarray
    eps_d: np.ndarray
    outcome_kind: str = "continuous"
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        rep = self.phi_spec.output_width
        for name, spec in (("pi", self.pi_spec), ("f0", self.f0_spec),
                           ("f1", self.f1_spec)):
            if spec.input_width != rep:
                raise ValueError(f"{name} input width must equal the representation "
                                 f"width {rep}")
        self.eps_y = np.asarray(self.eps_y, dtype=float).reshape(())
        self.eps_d = np.asarray(self.eps_d, dtype=float).reshape(())
        if not (np.isfinite(self.eps_y) and np.isfinite(self.eps_d)):
            raise ValueError("eps scalars must be finite")
        s = self.phi_spec.input_width
        if self.input_mean is None:
            self.input_mean = np.zeros(s)
        if self.input_scale is None:
            self.input_scale = np.ones(s)
        self.input_mean = np.asarray(self.input_mean, dtype=float)
        self.input_scale = np.asarray(self.input_scale, dtype=float)
        if self.input_mean.shape != (s,) or self.input_scale.shape != (s,):
            raise ValueError("input transform must match the covariate width")
        if np.any(self.input_scale <= 0):
            raise ValueError("input_scale entries must be positive")

    def transform(self, Z: np.ndarray) -> np.ndarray:
        return (np.asarray(Z, dtype=float) - self.input_mean) / self.input_scale

    def copy(self) -> "MBRLNet":
        return copy.deepcopy(self)


def standardizer_from(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and scale of a training split; constant features
    get unit scale."""
    mean = data.covariates.mean(axis=0)
    scale = data.covariates.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


class Batch(NamedTuple):
    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray

    @classmethod
    def from_dataset(cls, data: Dataset, indices: np.ndarray | None = None) -> "Batch":
        if indices is None:
            return cls(data.covariates, data.treatment.astype(float),
                       data.outcome_factual)
        return cls(data.covariates[indices],
                   data.treatment[indices].astype(float),
                   data.outcome_factual[indices])


# =========================================================================
# Configuration
# =========================================================================

@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    lambda1: float = 0.01
    lambda2: float = 0.01
    beta: float | None = None  # None resolves to 0.1 continuous / 100 binary
    batch_size: int = 100
    epochs: int = 1000
    learning_rate: float = 1e-3
    ablation: str = "full_mbrl"
    seed: int = 0
    phi_depth: int = 4
    phi_width: int = 200
    pi_depth: int = 4
    pi_width: int = 200
    head_depth: int = 3
    head_width: int = 100
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    eps_clip: float = 100.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        for name in ("phi_depth", "phi_width", "pi_depth", "pi_width",
                     "head_depth", "head_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.eps_clip <= 0:
            raise ValueError("eps_clip must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "lambda1", "lambda2", "beta", "batch_size", "epochs",
            "learning_rate", "ablation", "seed", "phi_depth", "phi_width",
            "pi_depth", "pi_width", "head_depth", "head_width", "eps_clip")}
        d["sinkhorn"] = {
            "entropic_reg": self.sinkhorn.entropic_reg,
            "max_iters": self.sinkhorn.max_iters,
            "tol": self.sinkhorn.tol,
            "cost": self.sinkhorn.cost,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sk = d.pop("sinkhorn", None)
        cfg = cls(**d)
        if sk is not None:
            cfg.sinkhorn = SinkhornConfig(**sk)
        return cfg


@dataclass
class _TaskPlan:
    """Effective task behavior after applying the ablation flags."""

    lambda1: float
    lambda2: float
    train_eps: bool
    run_balance: bool
    selection: str  # "eps_p" or "rmse"


def _resolve(cfg: TrainConfig) -> _TaskPlan:
    if cfg.ablation in ("full_mbrl", "no_eps_p"):
        return _TaskPlan(cfg.lambda1, cfg.lambda2, True, True,
                         "eps_p" if cfg.ablation == "full_mbrl" else "rmse")
    if cfg.ablation == "no_orthogonality":
        return _TaskPlan(0.0, 0.0, False, True, "rmse")
    if cfg.ablation == "tarnet_mode":
        return _TaskPlan(0.0, 0.0, False, False, "rmse")
    # cfr_mode: tarnet plus the balancing task
    return _TaskPlan(0.0, 0.0, False, True, "rmse")


def build_net(n_covariates: int, outcome_kind: str, cfg: TrainConfig,
              seed: int | None = None,
              input_mean: np.ndarray | None = None,
              input_scale: np.ndarray | None = None) -> MBRLNet:
    """Construct a freshly initialized network for s-dimensional covariates."""
    seed = cfg.seed if seed is None else seed
    children = np.random.SeedSequence(seed).spawn(4)
    seeds = [int(c.generate_state(1)[0]) for c in children]
    rep = cfg.phi_width
    phi_spec = nn.NetSpec((n_covariates, *([cfg.phi_width] * cfg.phi_depth)))
    pi_spec = nn.NetSpec((rep, *([cfg.pi_width] * cfg.pi_depth), 1),
                         output_activation="sigmoid")
    head_out = "sigmoid" if outcome_kind == "binary" else "identity"
    head_spec = nn.NetSpec((rep, *([cfg.head_width] * cfg.head_depth), 1),
                           output_activation=head_out)
    return MBRLNet(
        phi_spec=phi_spec, phi=nn.init_params(phi_spec, seeds[0]),
        pi_spec=pi_spec, pi=nn.init_params(pi_spec, seeds[1]),
        f0_spec=head_spec, f0=nn.init_params(head_spec, seeds[2]),
        f1_spec=head_spec, f1=nn.init_params(head_spec, seeds[3]),
        eps_y=np.zeros(()), eps_d=np.zeros(()),
        outcome_kind=outcome_kind,
        input_mean=input_mean, input_scale=input_scale,
    )


# =========================================================================
# Predictions and losses
# =========================================================================

def predict(net: MBRLNet, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-unit (yhat0, yhat1, propensity). These are exactly the nuisance
    estimates g_hat(0, z), g_hat(1, z) and m_hat(z)."""
    X = net.transform(Z)
    R, _ = nn.forward(net.phi, net.phi_spec, X)
    p, _ = nn.forward(net.pi, net.pi_spec, R)
    o0, _ = nn.forward(net.f0, net.f0_spec, R)
    o1, _ = nn.forward(net.f1, net.f1_spec, R)
    return o0[:, 0], o1[:, 0], p[:, 0]


def factual_prediction(net: MBRLNet, Z: np.ndarray, d: np.ndarray) -> np.ndarray:
    yhat0, yhat1, _ = predict(net, Z)
    return np.where(np.asarray(d) == 1, yhat1, yhat0)


def factual_outcome_loss(net: MBRLNet, batch: Batch) -> float:
    """MSE for continuous outcomes, mean negative log-likelihood for binary."""
    pred = factual_prediction(net, batch.covariates, batch.treatment)
    y = batch.outcome
    if net.outcome_kind == "binary":
        return float(-np.mean(y * np.log(pred) + (1.0 - y) * np.log1p(-pred)))
    return float(np.mean((y - pred) ** 2))


def distinguishability_loss(net: MBRLNet, batch: Batch) -> float:
    """Mean treatment log-likelihood of the discriminator (<= 0, maximized)."""
    _, _, p = predict(net, batch.covariates)
    d = batch.treatment
    return float(np.mean(d * np.log(p) + (1.0 - d) * np.log1p(-p)))


def noise_regularizers(net: MBRLNet, batch: Batch) -> tuple[float, float]:
    """Omega_y = eps_y |mean outcome residual|, Omega_d = eps_d |mean
    treatment residual|, both over the minibatch."""
    pred = factual_prediction(net, batch.covariates, batch.treatment)
    _, _, p = predict(net, batch.covariates)
    omega_y = float(net.eps_y) * abs(float(np.mean(batch.outcome - pred)))
    omega_d = float(net.eps_d) * abs(float(np.mean(batch.treatment - p)))
    return omega_y, omega_d


def perturbation_error(y, yhat, d, dhat, beta: float) -> float:
    """RMSE plus beta times the absolute mean cross-residual product."""
    y, yhat, d, dhat = (np.asarray(v, dtype=float) for v in (y, yhat, d, dhat))
    if not (y.shape == yhat.shape == d.shape == dhat.shape) or y.ndim != 1 or y.size < 1:
        raise ValueError("length mismatch")
    cross = float(np.mean((y - yhat) * (d - dhat)))
    return rmse(y, yhat) + beta * abs(cross)


# =========================================================================
# Multi-task training step
# =========================================================================

@dataclass
class TrainState:
    net: MBRLNet
    opt_discriminator: nn.AdamState
    opt_balance: nn.AdamState
    opt_outcome: nn.AdamState
    step_count: int = 0
    clip_events: int = 0
    last: dict = field(default_factory=dict)


def _group_discriminator(net: MBRLNet, train_eps: bool) -> list[np.ndarray]:
    group = [*net.pi.weights, *net.pi.biases]
    if train_eps:
        group.append(net.eps_d)
    return group


def _group_encoder(net: MBRLNet) -> list[np.ndarray]:
    return [*net.phi.weights, *net.phi.biases]


def _group_outcome(net: MBRLNet, train_eps: bool) -> list[np.ndarray]:
    group = [*net.phi.weights, *net.phi.biases,
             *net.f0.weights, *net.f0.biases,
             *net.f1.weights, *net.f1.biases]
    if train_eps:
        group.append(net.eps_y)
    return group


def init_train_state(net: MBRLNet, cfg: TrainConfig) -> TrainState:
    plan = _resolve(cfg)
    lr = cfg.learning_rate
    return TrainState(
        net=net,
        opt_discriminator=nn.adam_init(_group_discriminator(net, plan.train_eps), lr),
        opt_balance=nn.adam_init(_group_encoder(net), lr),
        opt_outcome=nn.adam_init(_group_outcome(net, plan.train_eps), lr),
    )


def _outcome_loss_and_grad(net: MBRLNet, y: np.ndarray,
                           pred: np.ndarray) -> tuple[float, np.ndarray]:
    b = y.shape[0]
    if net.outcome_kind == "binary":
        loss = float(-np.mean(y * np.log(pred) + (1.0 - y) * np.log1p(-pred)))
        dpred = (-(y / pred) + (1.0 - y) / (1.0 - pred)) / b
    else:
        loss = float(np.mean((y - pred) ** 2))
        dpred = 2.0 * (pred - y) / b
    return loss, dpred


def multitask_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> TrainState:
    """Run the three tasks on one minibatch, in order, each with its own
    optimizer state.

    The balancing task is skipped when the batch lacks a treatment arm (the
    imbalance loss is then defined as 0) and under the tarnet ablation.
    """
    plan = _resolve(cfg)
    net = state.net
    Z = net.transform(batch.covariates)
    d = np.asarray(batch.treatment, dtype=float)
    y = np.asarray(batch.outcome, dtype=float)
    b = Z.shape[0]

    # ---- Task 1: discriminator ascent on L_dis - lambda1 * Omega_d
    R, _ = nn.forward(net.phi, net.phi_spec, Z)
    p_mat, cache_pi = nn.forward(net.pi, net.pi_spec, R)
    p = p_mat[:, 0]
    l_dis = float(np.mean(d * np.log(p) + (1.0 - d) * np.log1p(-p)))
    gap_d = float(np.mean(d - p))
    omega_d = float(net.eps_d) * abs(gap_d)
    dobj_dp = (d / p - (1.0 - d) / (1.0 - p)) / b
    dobj_dp = dobj_dp + plan.lambda1 * float(net.eps_d) * np.sign(gap_d) / b
    grads_pi, _ = nn.backward(net.pi, net.pi_spec, cache_pi, dobj_dp[:, None])
    group = _group_discriminator(net, plan.train_eps)
    grad_list = [*grads_pi.weights, *grads_pi.biases]
    if plan.train_eps:
        grad_list.append(np.asarray(-plan.lambda1 * abs(gap_d)))
    nn.adam_update(group, grad_list, state.opt_discriminator, maximize=True)

    # ---- Task 2: encoder descent on the imbalance distance
    l_imb = 0.0
    treated = d == 1
    if plan.run_balance and treated.any() and (~treated).any():
        R, cache_phi = nn.forward(net.phi, net.phi_spec, Z)
        ot_res = wasserstein_sinkhorn(R[treated], R[~treated], cfg.sinkhorn)
        dR = np.zeros_like(R)
        dR[treated] = ot_res.grad_a
        dR[~treated] = ot_res.grad_b
        grads_phi, _ = nn.backward(net.phi, net.phi_spec, cache_phi, dR)
        nn.adam_update(_group_encoder(net),
                       [*grads_phi.weights, *grads_phi.biases],
                       state.opt_balance)
        l_imb = ot_res.distance

    # ---- Task 3: outcome descent on L_fo + lambda2 * Omega_y
    R, cache_phi = nn.forward(net.phi, net.phi_spec, Z)
    o0_mat, cache_f0 = nn.forward(net.f0, net.f0_spec, R)
    o1_mat, cache_f1 = nn.forward(net.f1, net.f1_spec, R)
    pred = d * o1_mat[:, 0] + (1.0 - d) * o0_mat[:, 0]
    l_fo, dpred = _outcome_loss_and_grad(net, y, pred)
    gap_y = float(np.mean(y - pred))
    omega_y = float(net.eps_y) * abs(gap_y)
    dpred = dpred - plan.lambda2 * float(net.eps_y) * np.sign(gap_y) / b
    grads_f1, dR1 = nn.backward(net.f1, net.f1_spec, cache_f1, (dpred * d)[:, None])
    grads_f0, dR0 = nn.backward(net.f0, net.f0_spec, cache_f0,
                                (dpred * (1.0 - d))[:, None])
    grads_phi, _ = nn.backward(net.phi, net.phi_spec, cache_phi, dR1 + dR0)
    group = _group_outcome(net, plan.train_eps)
    grad_list = [*grads_phi.weights, *grads_phi.biases,
                 *grads_f0.weights, *grads_f0.biases,
                 *grads_f1.weights, *grads_f1.biases]
    if plan.train_eps:
        grad_list.append(np.asarray(plan.lambda2 * abs(gap_y)))
    nn.adam_update(group, grad_list, state.opt_outcome)

    if plan.train_eps:
        for eps in (net.eps_y, net.eps_d):
            if abs(float(eps)) > cfg.eps_clip:
                eps[()] = np.clip(float(eps), -cfg.eps_clip, cfg.eps_clip)
                state.clip_events += 1
                logger.warning("free scalar clipped to |eps| <= %g", cfg.eps_clip)

    losses = {"l_fo": l_fo, "l_dis": l_dis, "l_imb": l_imb,
              "omega_y": omega_y, "omega_d": omega_d}
    if not all(np.isfinite(v) for v in losses.values()):
        raise RuntimeError(f"non-finite training signal at step "
                           f"{state.step_count + 1}: {losses}")
    state.step_count += 1
    state.last = losses
    return state


# =========================================================================
# Task objectives with analytic gradients (for finite-difference checks)
# =========================================================================

def task_objective(net: MBRLNet, batch: Batch, cfg: TrainConfig,
                   task: int) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Value, analytic gradients and parameter group of one task objective.

    Task 1 returns the ascent objective L_dis - lambda1*Omega_d; tasks 2 and
    3 return the descent objectives. Gradients follow the objective's own
    sign convention (not the update direction).
    """
    plan = _resolve(cfg)
    Z = net.transform(batch.covariates)
    d = np.asarray(batch.treatment, dtype=float)
    y = np.asarray(batch.outcome, dtype=float)
    b = Z.shape[0]
    if task == 1:
        R, _ = nn.forward(net.phi, net.phi_spec, Z)
        p_mat, cache_pi = nn.forward(net.pi, net.pi_spec, R)
        p = p_mat[:, 0]
        gap = float(np.mean(d - p))
        value = (float(np.mean(d * np.log(p) + (1.0 - d) * np.log1p(-p)))
                 - plan.lambda1 * float(net.eps_d) * abs(gap))
        dobj = (d / p - (1.0 - d) / (1.0 - p)) / b
        dobj = dobj + plan.lambda1 * float(net.eps_d) * np.sign(gap) / b
        grads_pi, _ = nn.backward(net.pi, net.pi_spec, cache_pi, dobj[:, None])
        group = _group_discriminator(net, train_eps=True)
        grads = [*grads_pi.weights, *grads_pi.biases,
                 np.asarray(-plan.lambda1 * abs(gap))]
        return value, grads, group
    if task == 2:
        R, cache_phi = nn.forward(net.phi, net.phi_spec, Z)
        treated = d == 1
        if not treated.any() or treated.all():
            raise ValueError("task 2 needs both treatment arms in the batch")
        res = wasserstein_sinkhorn(R[treated], R[~treated], cfg.sinkhorn)
        dR = np.zeros_like(R)
        dR[treated] = res.grad_a
        dR[~treated] = res.grad_b
        grads_phi, _ = nn.backward(net.phi, net.phi_spec, cache_phi, dR)
        return res.distance, [*grads_phi.weights, *grads_phi.biases], _group_encoder(net)
    if task == 3:
        R, cache_phi = nn.forward(net.phi, net.phi_spec, Z)
        o0_mat, cache_f0 = nn.forward(net.f0, net.f0_spec, R)
        o1_mat, cache_f1 = nn.forward(net.f1, net.f1_spec, R)
        pred = d * o1_mat[:, 0] + (1.0 - d) * o0_mat[:, 0]
        l_fo, dpred = _outcome_loss_and_grad(net, y, pred)
        gap = float(np.mean(y - pred))
        value = l_fo + plan.lambda2 * float(net.eps_y) * abs(gap)
        dpred = dpred - plan.lambda2 * float(net.eps_y) * np.sign(gap) / b
        grads_f1, dR1 = nn.backward(net.f1, net.f1_spec, cache_f1, (dpred * d)[:, None])
        grads_f0, dR0 = nn.backward(net.f0, net.f0_spec, cache_f0,
                                    (dpred * (1.0 - d))[:, None])
        grads_phi, _ = nn.backward(net.phi, net.phi_spec, cache_phi, dR1 + dR0)
        group = _group_outcome(net, train_eps=True)
        grads = [*grads_phi.weights, *grads_phi.biases,
                 *grads_f0.weights, *grads_f0.biases,
                 *grads_f1.weights, *grads_f1.biases,
                 np.asarray(plan.lambda2 * abs(gap))]
        return value, grads, group
    raise ValueError("task must be 1, 2 or 3")


def task_gradient_error(net: MBRLNet, batch: Batch, cfg: TrainConfig,
                        task: int, h: float = 1e-5,
                        max_coords: int = 2000, seed: int = 0) -> float:
    """Max relative error between analytic task gradients and central
    finite differences over the task's parameter group."""
    _, grads, group = task_objective(net, batch, cfg, task)
    coords = [(ti, j) for ti, t in enumerate(group) for j in range(t.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in picked]
    max_err = 0.0
    for ti, j in coords:
        flat = group[ti].reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        f_plus = task_objective(net, batch, cfg, task)[0]
        flat[j] = orig - h
        f_minus = task_objective(net, batch, cfg, task)[0]
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(grads[ti].reshape(-1)[j])
        err = abs(analytic - numeric) / max(1.0, abs(analytic) + abs(numeric))
        max_err = max(max_err, err)
    return max_err


# =========================================================================
# Fit and model selection
# =========================================================================

@dataclass
class EpochStats:
    epoch: int
    l_fo: float
    l_dis: float
    l_imb: float
    omega_y: float
    omega_d: float
    val_rmse: float
    val_eps_p: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epoch", "l_fo", "l_dis", "l_imb", "omega_y", "omega_d",
            "val_rmse", "val_eps_p")}


@dataclass
class Checkpoint:
    """Best parameters under the run's selection criterion plus its history.

    ``net_rmse`` is the best snapshot under plain validation RMSE, tracked on
    every run so selection rules can be compared on one trajectory.
    """

    net: MBRLNet
    best_epoch: int
    best_eps_p: float
    history: list[EpochStats]
    selection: str
    beta: float
    config: TrainConfig | None = None
    net_rmse: MBRLNet | None = None
    best_epoch_rmse: int | None = None
    best_val_rmse: float | None = None
    clip_events: int = 0


def validation_scores(net: MBRLNet, val: Dataset, beta: float) -> tuple[float, float]:
    """(RMSE, perturbation error) of factual predictions on a dataset."""
    yhat0, yhat1, p = predict(net, val.covariates)
    pred = np.where(val.treatment == 1, yhat1, yhat0)
    val_rmse = rmse(val.outcome_factual, pred)
    eps_p = perturbation_error(val.outcome_factual, pred,
                               val.treatment.astype(float), p, beta)
    return val_rmse, eps_p


def fit(train: Dataset, val: Dataset, cfg: TrainConfig) -> Checkpoint:
    """Epoch loop of shuffled minibatch multi-task steps.

    After each epoch the validation RMSE and perturbation error are
    recorded; the checkpoint keeps the parameters of the epoch minimizing
    the selection criterion (perturbation error by default, RMSE under
    ablations that drop it). Ties keep the earlier epoch.
    """
    if train.n_units == 0 or val.n_units == 0:
        raise ValueError("empty split")
    if train.n_covariates != val.n_covariates:
        raise ValueError("train and validation covariate dimensions differ")
    if train.outcome_kind != val.outcome_kind:
        raise ValueError("train and validation outcome kinds differ")

    plan = _resolve(cfg)
    beta = default_beta(train.outcome_kind) if cfg.beta is None else cfg.beta
    root = np.random.SeedSequence(cfg.seed).spawn(2)
    mean, scale = standardizer_from(train)
    net = build_net(train.n_covariates, train.outcome_kind, cfg,
                    seed=int(root[0].generate_state(1)[0]),
                    input_mean=mean, input_scale=scale)
    state = init_train_state(net, cfg)
    rng = np.random.default_rng(int(root[1].generate_state(1)[0]))

    n = train.n_units
    history: list[EpochStats] = []
    best_eps_p = np.inf
    best_epoch = 0
    best_net: MBRLNet | None = None
    best_rmse = np.inf
    best_epoch_rmse = 0
    best_net_rmse: MBRLNet | None = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = {"l_fo": 0.0, "l_dis": 0.0, "l_imb": 0.0,
                "omega_y": 0.0, "omega_d": 0.0}
        n_steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            multitask_step(state, Batch.from_dataset(train, idx), cfg)
            for k in sums:
                sums[k] += state.last[k]
            n_steps += 1
        if n_steps == 0:
            raise ValueError("batch_size leaves no usable minibatch")

        val_rmse, val_eps_p = validation_scores(net, val, beta)
        history.append(EpochStats(
            epoch=epoch,
            **{k: sums[k] / n_steps for k in sums},
            val_rmse=val_rmse, val_eps_p=val_eps_p,
        ))
        if val_eps_p < best_eps_p:
            best_eps_p = val_eps_p
            best_epoch = epoch
            best_net = net.copy()
        if val_rmse < best_rmse:
            best_rmse = val_rmse
            best_epoch_rmse = epoch
            best_net_rmse = net.copy()

    if plan.selection == "eps_p":
        selected_net, selected_epoch, selected_value = best_net, best_epoch, best_eps_p
    else:
        selected_net, selected_epoch, selected_value = (
            best_net_rmse, best_epoch_rmse, best_rmse)
    return Checkpoint(
        net=selected_net,
        best_epoch=selected_epoch,
        best_eps_p=float(selected_value),
        history=history,
        selection=plan.selection,
        beta=beta,
        config=cfg,
        net_rmse=best_net_rmse,
        best_epoch_rmse=best_epoch_rmse,
        best_val_rmse=float(best_rmse),
        clip_events=state.clip_events,
    )


# =========================================================================
# Hyperparameter search
# =========================================================================

def hyper_search(train: Dataset, val: Dataset,
                 grid: Iterable[TrainConfig]) -> TrainConfig:
    """Exhaustive grid evaluation; selection by the validation criterion,
    ties broken by grid order."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    logger.info("hyperparameter search over %d candidate configs", len(grid))
    best_cfg = None
    best_value = np.inf
    for cfg in grid:
        ckpt = fit(train, val, cfg)
        if ckpt.best_eps_p < best_value:
            best_value = ckpt.best_eps_p
            best_cfg = cfg
    return best_cfg


_GRID_LAMBDAS = (0.01, 0.1, 1.0)
_GRID_DEPTHS = (2, 3, 4)
_GRID_WIDTHS = (100, 200)
_GRID_BATCH_EPOCH = {
    "ihdp": ((100, 300), (500, 1000)),
    "twins": ((500, 1000), (250, 500)),
}


def search_grid(dataset: str = "ihdp",
                base: TrainConfig | None = None) -> list[TrainConfig]:
    """The standard search ranges (shared lambda for both regularizers)."""
    if dataset not in _GRID_BATCH_EPOCH:
        raise ValueError(f"unknown grid preset {dataset!r}")
    base = base or TrainConfig()
    batches, epochs = _GRID_BATCH_EPOCH[dataset]
    grid = []
    for lam, pd_, pw, dd, dw, hd, hw, bs, ep in product(
            _GRID_LAMBDAS, _GRID_DEPTHS, _GRID_WIDTHS, _GRID_DEPTHS,
            _GRID_WIDTHS, _GRID_DEPTHS, _GRID_WIDTHS, batches, epochs):
        grid.append(replace(base, lambda1=lam, lambda2=lam,
                            phi_depth=pd_, phi_width=pw,
                            pi_depth=dd, pi_width=dw,
                            head_depth=hd, head_width=hw,
                            batch_size=bs, epochs=ep))
    return grid


# =========================================================================
# Persistence: versioned params file plus a JSON sidecar (config, history)
# =========================================================================

CHECKPOINT_FORMAT = "mbrl-checkpoint"
CHECKPOINT_VERSION = 1


def _net_to_dict(net: MBRLNet) -> dict:
    return {
        "outcome_kind": net.outcome_kind,
        "eps_y": float(net.eps_y),
        "eps_d": float(net.eps_d),
        "input_mean": net.input_mean.tolist(),
        "input_scale": net.input_scale.tolist(),
        "subnets": {
            name: {"spec": nn.spec_to_dict(getattr(net, f"{name}_spec")),
                   "params": nn.params_to_dict(getattr(net, name))}
            for name in ("phi", "pi", "f0", "f1")
        },
    }


def _net_from_dict(d: dict) -> MBRLNet:
    parts = {}
    for name in ("phi", "pi", "f0", "f1"):
        sub = d["subnets"][name]
        parts[f"{name}_spec"] = nn.spec_from_dict(sub["spec"])
        parts[name] = nn.params_from_dict(sub["params"])
    return MBRLNet(**parts, eps_y=np.asarray(d["eps_y"]),
                   eps_d=np.asarray(d["eps_d"]),
                   outcome_kind=d["outcome_kind"],
                   input_mean=d.get("input_mean"),
                   input_scale=d.get("input_scale"))


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net": _net_to_dict(ckpt.net),
        "best_epoch": ckpt.best_epoch,
        "best_eps_p": ckpt.best_eps_p,
        "selection": ckpt.selection,
        "beta": ckpt.beta,
    }
    path.write_text(json.dumps(doc, sort_keys=True))
    meta = {
        "config": None if ckpt.config is None else ckpt.config.to_dict(),
        "history": [h.to_dict() for h in ckpt.history],
        "selection": ckpt.selection,
        "clip_events": ckpt.clip_events,
        "best_epoch_rmse": ckpt.best_epoch_rmse,
        "best_val_rmse": ckpt.best_val_rmse,
    }
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    config = None
    history: list[EpochStats] = []
    clip_events = 0
    best_epoch_rmse = None
    best_val_rmse = None
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        if meta.get("config") is not None:
            config = TrainConfig.from_dict(meta["config"])
        history = [EpochStats(**h) for h in meta.get("history", [])]
        clip_events = meta.get("clip_events", 0)
        best_epoch_rmse = meta.get("best_epoch_rmse")
        best_val_rmse = meta.get("best_val_rmse")
    return Checkpoint(
        net=_net_from_dict(doc["net"]),
        best_epoch=doc["best_epoch"],
        best_eps_p=doc["best_eps_p"],
        history=history,
        selection=doc["selection"],
        beta=doc["beta"],
        config=config,
        best_epoch_rmse=best_epoch_rmse,
        best_val_rmse=best_val_rmse,
        clip_events=clip_events,
    )


def history_to_csv(history: Sequence[EpochStats], path: str | Path) -> None:
    """Training log: one row per epoch."""
    fields = ["epoch", "l_fo", "l_dis", "l_imb", "omega_y", "omega_d",
              "val_rmse", "val_eps_p"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow(row.to_dict())
