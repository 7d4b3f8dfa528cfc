"""Entropy-regularized REINFORCE with a region log-likelihood term.

Loss per minibatch (signs folded into each component)::

    L_PG  = -(1/N) sum_i (R_i - b) log pi(a_i | z_i, c_i)
    L_ENT = -(alpha/N) sum_i H(pi(. | z_i, c_i))
    L_NLL = -(beta/N) sum_i nll_term(pi(. | z_i, c_i), Omega_{c_i})

``batch_losses`` evaluates these through the distribution helpers in
:mod:`policygen.policy`; ``batch_gradients`` differentiates them in closed
form at the logits and backpropagates, so the two are independent routes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .nncore import Adam, log_softmax, make_rng
from .policy import (
    NLL_FORMS,
    ActionDistribution,
    PolicyGenerator,
    entropy,
    log_prob,
    sample_indices,
)
from .problem import ConditionSet, SyntProblem, batch_reward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 30_000
    batch_size: int = 32
    alpha: float = 0.005
    beta_max: float = 1.0
    beta_ramp: int = 5_000
    nll_form: str = "log-mass"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_dim: int = 64
    emb_dim: int = 8
    hidden: tuple[int, ...] = (128, 128)
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("batch_size", "beta_ramp", "noise_dim", "emb_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0 or self.beta_max < 0:
            raise ValueError("alpha and beta_max must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.nll_form not in NLL_FORMS:
            raise ValueError(f"nll_form must be one of {sorted(NLL_FORMS)}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainRecord:
    iteration: int
    samples_cum: int
    mean_reward: float
    loss_pg: float
    loss_ent: float
    loss_nll: float
    loss_total: float
    beta: float
    baseline: float


TRAJECTORY_COLUMNS = [
    "iteration", "samples_cum", "mean_reward", "loss_pg", "loss_ent",
    "loss_nll", "loss_total", "beta", "baseline",
]


class TrainingAborted(FloatingPointError):
    def __init__(self, message: str, trajectory: list[TrainRecord]):
        super().__init__(message)
        self.trajectory = trajectory


def beta_at(config: TrainConfig, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.beta_max * min(1.0, iteration / config.beta_ramp)


@dataclass
class BaselineState:
    """Mean reward of the previous batch; 0 before the first batch."""

    b: float = 0.0

    def update(self, rewards) -> float:
        rewards = np.asarray(rewards, dtype=np.float64)
        if rewards.size == 0:
            raise ValueError("empty reward batch")
        self.b = float(rewards.mean())
        return self.b


def baseline_update(state: BaselineState, rewards) -> float:
    return state.update(rewards)


@dataclass
class Batch:
    noise: np.ndarray  # (N, T, noise_dim)
    labels: np.ndarray  # (N,)
    actions: np.ndarray  # (N, T)
    rewards: np.ndarray  # (N,)
    mask_table: list[np.ndarray] = field(repr=False)  # per cell, (L, card)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    def masks(self) -> list[np.ndarray]:
        return [tab[self.labels] for tab in self.mask_table]


def _nll_values(dist: ActionDistribution, batch: Batch, nll_form: str) -> np.ndarray:
    return NLL_FORMS[nll_form](dist, None, masks=batch.masks())


def batch_losses(gen: PolicyGenerator, batch: Batch, baseline: float, alpha: float,
                 beta: float, nll_form: str = "log-mass") -> tuple[float, float, float]:
    dist = gen.act_distribution(batch.noise, batch.labels)
    n = batch.size
    adv = np.asarray(batch.rewards, dtype=np.float64) - baseline
    lp = log_prob(dist, batch.actions)
    ent = entropy(dist)
    nll = _nll_values(dist, batch, nll_form) if beta != 0 else np.zeros(n)
    for name, arr in (("log_prob", lp), ("entropy", ent), ("nll", nll)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if len(bad):
            raise FloatingPointError(f"non-finite {name} at sample {int(bad[0])}")
    l_pg = -float(np.sum(adv * lp)) / n
    l_ent = -alpha * float(np.sum(ent)) / n
    l_nll = -beta * float(np.sum(nll)) / n
    return l_pg, l_ent, l_nll


def logit_gradients(lp: np.ndarray, actions: np.ndarray, adv: np.ndarray, mask: np.ndarray,
                    alpha: float, beta: float, nll_form: str, n: int,
                    sumlog_coef: np.ndarray | None = None) -> np.ndarray:
    """d(total loss)/d(logits) for cells stacked along leading axes.

    ``lp``/``mask`` are ``(..., N, card)``, ``actions`` is ``(..., N)``.
    ``sumlog_coef`` holds |Omega|/|allowed_t| per ``(..., N)`` for sum-log.
    """
    p = np.exp(lp)
    w = (adv / n)[..., :, None]
    g = p * w
    np.put_along_axis(g, actions[..., None],
                      np.take_along_axis(g, actions[..., None], axis=-1) - w, axis=-1)
    if alpha:
        h = -(p * lp).sum(axis=-1, keepdims=True)
        g += (alpha / n) * p * (lp + h)
    if beta:
        if nll_form == "log-mass":
            inside = np.where(mask, lp, -np.inf)
            q = np.exp(inside - inside.max(axis=-1, keepdims=True))
            q /= q.sum(axis=-1, keepdims=True)
            g -= (beta / n) * (q - p)
        else:
            size = mask.sum(axis=-1, keepdims=True)
            g -= (beta / n) * sumlog_coef[..., None] * (mask - size * p)
    return g


def batch_gradients(gen: PolicyGenerator, batch: Batch, baseline: float, alpha: float,
                    beta: float, nll_form: str = "log-mass", with_losses: bool = False,
                    forward_pass=None):
    """Exact gradient of ``sum(batch_losses)`` w.r.t. ``gen.theta``.

    With ``with_losses`` also returns the three components, computed from
    the same forward pass. ``forward_pass`` reuses ``(log_probs, cache)``
    from :func:`draw_batch` when the parameters have not moved since.
    """
    if nll_form not in NLL_FORMS:
        raise ValueError(f"unknown nll_form {nll_form!r}")
    n = batch.size
    adv = np.asarray(batch.rewards, dtype=np.float64) - baseline
    if forward_pass is None:
        logits, cache = gen.forward(batch.noise, batch.labels)
        lps = [log_softmax(z) for z in logits]
    else:
        lps, cache = forward_pass
    masks = batch.masks()
    coef = None
    if beta and nll_form == "sum-log":
        sizes = np.stack([m.sum(axis=-1) for m in masks]).astype(np.float64)  # (T, N)
        coef = np.prod(sizes, axis=0) / sizes
    if gen.homogeneous:
        g = logit_gradients(np.stack(lps), batch.actions.T, adv, np.stack(masks),
                            alpha, beta, nll_form, n, coef)
        grad_logits = list(g)
    else:
        grad_logits = [
            logit_gradients(lp, batch.actions[:, t], adv, masks[t], alpha, beta, nll_form, n,
                            None if coef is None else coef[t])
            for t, lp in enumerate(lps)
        ]
    grad = gen.backward(cache, grad_logits)
    if not with_losses:
        return grad
    dist = ActionDistribution(lps)
    lp_a = log_prob(dist, batch.actions)
    ent = entropy(dist)
    nll = NLL_FORMS[nll_form](dist, None, masks=masks) if beta else np.zeros(n)
    losses = (-float(np.sum(adv * lp_a)) / n,
              -alpha * float(np.sum(ent)) / n,
              -beta * float(np.sum(nll)) / n)
    return grad, losses


def draw_batch(rng: np.random.Generator, gen: PolicyGenerator, problem: SyntProblem,
               mask_table, n: int):
    """One minibatch from the current generator. Draw order is fixed:
    noise, labels, then one uniform per (sample, cell).

    Returns ``(batch, (log_probs, cache))``; the second item can be passed
    to :func:`batch_gradients` as ``forward_pass``."""
    noise = rng.standard_normal((n, gen.dim, gen.noise_dim))
    labels = rng.integers(gen.n_classes, size=n)
    logits, cache = gen.forward(noise, labels)
    lps = [log_softmax(z) for z in logits]
    actions = sample_indices(rng, ActionDistribution(lps))
    _, rewards = batch_reward(problem, actions)
    return Batch(noise, labels, actions, rewards, mask_table), (lps, cache)


def make_generator(problem: SyntProblem, conditions: ConditionSet, config: TrainConfig,
                   rng: np.random.Generator) -> PolicyGenerator:
    gen = PolicyGenerator(problem.cardinalities, conditions.n_classes, config.noise_dim,
                          config.emb_dim, config.hidden, conditional=conditions.n_classes > 1)
    return gen.initialize(rng)


def train(problem: SyntProblem, conditions: ConditionSet, config: TrainConfig,
          on_checkpoint=None, progress_every: int = 0):
    """Run the training loop. Returns ``(generator, trajectory, optimizer)``.

    ``on_checkpoint(iteration, gen, optimizer)`` fires every
    ``config.checkpoint_every`` iterations when that is non-zero.
    """
    for r in conditions.regions:
        r.masks(problem.cardinalities)  # validates region against the problem
    rng = make_rng(config.seed)
    gen = make_generator(problem, conditions, config, rng)
    opt = Adam(gen.theta.size, config.lr, config.adam_beta1, config.adam_beta2,
               config.adam_eps, mask=gen.params.trainable_mask())
    mask_table = conditions.mask_table(problem.cardinalities)
    unconditional = conditions.n_classes == 1
    baseline = BaselineState()
    trajectory: list[TrainRecord] = []
    for it in range(config.iterations):
        beta = 0.0 if unconditional else beta_at(config, it)
        batch, fwd = draw_batch(rng, gen, problem, mask_table, config.batch_size)
        b = baseline.b
        grad, (l_pg, l_ent, l_nll) = batch_gradients(
            gen, batch, b, config.alpha, beta, config.nll_form, with_losses=True,
            forward_pass=fwd)
        total = l_pg + l_ent + l_nll
        rec = TrainRecord(it, (it + 1) * config.batch_size, float(batch.rewards.mean()),
                          l_pg, l_ent, l_nll, total, beta, b)
        if not all(np.isfinite([l_pg, l_ent, l_nll])):
            raise TrainingAborted(f"non-finite loss at iteration {it}", trajectory)
        trajectory.append(rec)
        try:
            opt.step(gen.theta, grad, gen.params)
        except FloatingPointError as exc:
            raise TrainingAborted(f"iteration {it}: {exc}", trajectory) from None
        baseline.update(batch.rewards)
        if progress_every and (it + 1) % progress_every == 0:
            log.info("iter %d reward %.4f loss %.4f", it + 1, rec.mean_reward, total)
        if on_checkpoint and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            on_checkpoint(it + 1, gen, opt)
    return gen, trajectory, opt


def trailing_mean(values, window: int = 1000) -> np.ndarray:
    """Mean of the last ``window`` entries at every position (shorter at start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def convergence_iteration(trajectory, threshold: float = -0.05, window: int = 1000):
    """First iteration whose trailing-``window`` mean reward exceeds ``threshold``
    (only full windows count); ``None`` if never."""
    rewards = [r.mean_reward for r in trajectory]
    if len(rewards) < window:
        return None
    tm = trailing_mean(rewards, window)
    hits = np.flatnonzero(tm[window - 1:] > threshold)
    return int(trajectory[hits[0] + window - 1].iteration) if len(hits) else None
