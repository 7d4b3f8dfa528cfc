"""Conditional policy generator: one softmax cell per variable, fed with its
own Gaussian noise vector concatenated to a shared class embedding.

Distribution helpers work on a single sample (per-cell arrays of shape
``(card,)``) or a batch (``(N, card)``); results are summed over cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import BUILD_ID
from .nncore import (
    Block,
    FlatParams,
    Mlp,
    bind_mlp,
    init_mlp_weights,
    log_softmax,
    make_rng,
)
from .problem import OCTANT_ENCODING, Assignment, RegionSpec, SyntProblem

LOG_FLOOR = np.log(1e-300)
CHECKPOINT_FORMAT = "policygen-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ActionDistribution:
    """Per-cell log-probabilities. Exact zeros are stored as -inf; every
    consumer of a log value floors it at log(1e-300)."""

    log_probs: list[np.ndarray]

    @classmethod
    def from_probs(cls, probs) -> "ActionDistribution":
        out = []
        for p in probs:
            p = np.asarray(p, dtype=np.float64)
            if (p < 0).any():
                raise ValueError("negative probability")
            with np.errstate(divide="ignore"):
                out.append(np.log(p))
        return cls(out)

    @property
    def per_cell_probs(self) -> list[np.ndarray]:
        return [np.exp(lp) for lp in self.log_probs]

    @property
    def dim(self) -> int:
        return len(self.log_probs)


@dataclass
class SampledAction:
    assignment: Assignment
    log_prob: float
    distribution: ActionDistribution
    noise: np.ndarray
    label: int


def _cell_axis_indices(a, dim: int) -> np.ndarray:
    if isinstance(a, Assignment):
        a = a.indices
    idx = np.asarray(a, dtype=np.int64)
    if idx.shape[-1] != dim:
        raise ValueError(f"action has {idx.shape[-1]} variables, distribution has {dim}")
    return idx


def log_prob(dist: ActionDistribution, a) -> np.ndarray | float:
    """log pi(a) = sum over cells of log p_t[a_t]. ``a`` is (T,) or (N, T)."""
    idx = _cell_axis_indices(a, dist.dim)
    total = 0.0
    for t, lp in enumerate(dist.log_probs):
        j = idx[..., t]
        if lp.ndim == 1:
            total = total + np.maximum(lp[j], LOG_FLOOR)
        else:
            total = total + np.maximum(np.take_along_axis(lp, j[:, None], axis=-1)[:, 0], LOG_FLOOR)
    return total


def entropy(dist: ActionDistribution):
    """Joint entropy of the product distribution (sum of cell entropies)."""
    total = 0.0
    for lp in dist.log_probs:
        p = np.exp(lp)
        total = total - (p * np.where(p > 0, lp, 0.0)).sum(axis=-1)
    return total


def _masked_logsumexp(lp: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.where(mask, lp, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def region_log_mass(dist: ActionDistribution, region: RegionSpec, masks=None):
    """log of the total probability inside a factorized region."""
    if region is not None and region.dim != dist.dim:
        raise ValueError(f"region has {region.dim} variables, distribution has {dist.dim}")
    if masks is None:
        masks = region.masks([lp.shape[-1] for lp in dist.log_probs])
    total = 0.0
    for lp, m in zip(dist.log_probs, masks):
        total = total + np.maximum(_masked_logsumexp(lp, m), LOG_FLOOR)
    return total


def region_sum_log(dist: ActionDistribution, region: RegionSpec, masks=None):
    """Sum of log pi over every action in the region, in closed form."""
    if region is not None and region.dim != dist.dim:
        raise ValueError(f"region has {region.dim} variables, distribution has {dist.dim}")
    if masks is None:
        masks = region.masks([lp.shape[-1] for lp in dist.log_probs])
    sizes = [np.asarray(m).sum(axis=-1) for m in masks]
    omega = np.prod(np.stack([np.asarray(s, dtype=np.float64) for s in sizes]), axis=0)
    total = 0.0
    for lp, m, s in zip(dist.log_probs, masks, sizes):
        total = total + (omega / s) * np.where(m, np.maximum(lp, LOG_FLOOR), 0.0).sum(axis=-1)
    return total


NLL_FORMS = {"log-mass": region_log_mass, "sum-log": region_sum_log}


def sample_indices(rng: np.random.Generator, dist: ActionDistribution) -> np.ndarray:
    """Inverse-CDF draw per cell. Returns (T,) or (N, T) indices."""
    cols = []
    for lp in dist.log_probs:
        cdf = np.cumsum(np.exp(lp), axis=-1)
        u = rng.random(cdf.shape[:-1]) * cdf[..., -1]
        j = (cdf <= u[..., None]).sum(axis=-1)
        cols.append(np.minimum(j, cdf.shape[-1] - 1))
    return np.stack(cols, axis=-1)


def sample_action(rng: np.random.Generator, dist: ActionDistribution,
                  problem: SyntProblem | None = None, noise=None, label: int = 0) -> SampledAction:
    if dist.log_probs[0].ndim != 1:
        raise ValueError("sample_action takes a single (unbatched) distribution")
    idx = sample_indices(rng, dist)
    if problem is not None:
        a = problem.assignment(idx)
    else:
        a = Assignment(tuple(int(i) for i in idx), tuple(float("nan") for _ in idx))
    return SampledAction(a, float(log_prob(dist, idx)), dist, noise, label)


class GeneratorCache:
    """Activation record of one batched forward pass through every cell."""

    def __init__(self, labels, stacked, per_cell):
        self.labels = labels
        self.stacked = stacked  # (inputs, pre) lists for the fused path
        self.per_cell = per_cell  # ForwardCache per cell for the loop path


class PolicyGenerator:
    """T independent MLP cells plus a class-embedding table, all stored in
    one flat parameter vector (``self.params.data``).

    Blocks are laid out layer-major (layer k weights of every cell, then
    layer k biases of every cell). When all cells share one shape this makes
    each layer a contiguous ``(T, out, in)`` stack, and forward/backward run
    all cells in a single batched matmul.
    """

    def __init__(self, cardinalities, n_classes: int = 1, noise_dim: int = 64,
                 emb_dim: int = 8, hidden=(128, 128), conditional: bool | None = None):
        cardinalities = [int(c) for c in cardinalities]
        if not cardinalities or min(cardinalities) < 1:
            raise ValueError("need at least one variable with a non-empty domain")
        if n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if conditional is None:
            conditional = n_classes > 1
        if not conditional and n_classes != 1:
            raise ValueError("an unconditional generator has exactly one class")
        self.cardinalities = cardinalities
        self.n_classes = int(n_classes)
        self.noise_dim = int(noise_dim)
        self.emb_dim = int(emb_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.conditional = bool(conditional)

        T = len(cardinalities)
        in_width = self.noise_dim + self.emb_dim
        sizes = [[in_width, *self.hidden, card] for card in cardinalities]
        n_layers = len(self.hidden) + 1
        self.params = FlatParams()
        w_blocks = [[None] * n_layers for _ in range(T)]
        b_blocks = [[None] * n_layers for _ in range(T)]
        for k in range(n_layers):
            for t in range(T):
                w_blocks[t][k] = self.params.add(f"cell{t}.layer{k}.weights",
                                                 (sizes[t][k + 1], sizes[t][k]))
            for t in range(T):
                b_blocks[t][k] = self.params.add(f"cell{t}.layer{k}.biases", (sizes[t][k + 1],))
        self._emb_block = self.params.add(
            "embedding", (self.n_classes, self.emb_dim), trainable=self.conditional
        )
        self.params.finalize()
        acts = ["relu"] * (n_layers - 1) + ["identity"]
        self.cell_blocks = [
            [(w_blocks[t][k], b_blocks[t][k], acts[k]) for k in range(n_layers)] for t in range(T)
        ]
        self.cells: list[Mlp] = [bind_mlp(self.params, s) for s in self.cell_blocks]
        self.embedding = self.params.view(self._emb_block)
        self.homogeneous = len(set(cardinalities)) == 1
        self._stack_specs = None
        if self.homogeneous:
            self._stack_specs = []
            for k in range(n_layers):
                w0, b0 = w_blocks[0][k], b_blocks[0][k]
                self._stack_specs.append((
                    Block(f"layer{k}.weights", w0.offset, (T, *w0.shape)),
                    Block(f"layer{k}.biases", b0.offset, (T, *b0.shape)),
                    acts[k],
                ))
            self.stacked = [(self.params.view(w), self.params.view(b), a)
                            for w, b, a in self._stack_specs]

    @classmethod
    def for_problem(cls, problem: SyntProblem, n_classes: int = 1, **kw) -> "PolicyGenerator":
        return cls(problem.cardinalities, n_classes=n_classes, **kw)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def theta(self) -> np.ndarray:
        return self.params.data

    def initialize(self, rng: np.random.Generator) -> "PolicyGenerator":
        for cell in self.cells:
            init_mlp_weights(rng, cell)
        if self.conditional:
            self.embedding[...] = rng.standard_normal(self.embedding.shape)
        else:
            self.embedding[...] = 0.0
        return self

    def copy(self) -> "PolicyGenerator":
        other = PolicyGenerator(self.cardinalities, self.n_classes, self.noise_dim,
                                self.emb_dim, self.hidden, self.conditional)
        other.theta[...] = self.theta
        return other

    # -- forward / backward ------------------------------------------------

    def _check_inputs(self, noise, labels):
        noise = np.asarray(noise, dtype=np.float64)
        want = (self.dim, self.noise_dim)
        if noise.shape[-2:] != want or noise.ndim not in (2, 3):
            raise ValueError(f"noise must have shape (..., {want[0]}, {want[1]}), got {noise.shape}")
        labels = np.asarray(labels, dtype=np.int64)
        if (labels < 0).any() or (labels >= self.n_classes).any():
            raise ValueError(f"class label out of range [0, {self.n_classes})")
        if noise.ndim == 3 and labels.ndim == 0:
            labels = np.full(noise.shape[0], int(labels))
        if noise.ndim == 3 and labels.shape != (noise.shape[0],):
            raise ValueError("need one label per noise sample")
        if noise.ndim == 2 and labels.ndim != 0:
            raise ValueError("a single noise sample takes a single label")
        return noise, labels

    def cell_inputs(self, noise, labels, t: int) -> np.ndarray:
        emb = self.embedding[labels]
        return np.concatenate([noise[..., t, :], emb], axis=-1)

    def forward(self, noise, labels, fused: bool | None = None):
        """Per-cell logits for noise ``(N, T, noise_dim)`` or ``(T, noise_dim)``.

        Returns ``(logits, cache)``; ``logits`` is a list of ``(N, card)``
        (or ``(card,)``) arrays.
        """
        noise, labels = self._check_inputs(noise, labels)
        single = noise.ndim == 2
        if single:
            noise, labels = noise[None], labels[None]
        if fused is None:
            fused = self.homogeneous
        if fused and self.homogeneous:
            n = noise.shape[0]
            emb = np.broadcast_to(self.embedding[labels], (self.dim, n, self.emb_dim))
            h = np.concatenate([noise.transpose(1, 0, 2), emb], axis=-1)
            inputs, pre = [], []
            for W, b, act in self.stacked:
                inputs.append(h)
                z = np.matmul(h, W.transpose(0, 2, 1))
                z += b[:, None, :]
                pre.append(z)
                h = np.maximum(z, 0.0) if act == "relu" else z
            logits = list(h)
            cache = GeneratorCache(labels, (inputs, pre), None)
        else:
            logits, caches = [], []
            for t, cell in enumerate(self.cells):
                z, c = cell.forward(self.cell_inputs(noise, labels, t))
                logits.append(z)
                caches.append(c)
            cache = GeneratorCache(labels, None, caches)
        if single:
            logits = [z[0] for z in logits]
        return logits, cache

    def backward(self, cache: GeneratorCache, grad_logits, out: np.ndarray | None = None) -> np.ndarray:
        """Gradient w.r.t. ``theta`` given d(loss)/d(logits) per cell (batched
        shapes as returned by :meth:`forward`)."""
        grad = np.empty_like(self.theta) if out is None else out
        store = self.params
        g_emb = store.view(self._emb_block, grad)
        g_emb[...] = 0.0
        labels = np.atleast_1d(cache.labels)
        grad_logits = [np.asarray(g, dtype=np.float64).reshape(len(labels), -1) for g in grad_logits]
        if cache.stacked is not None:
            inputs, pre = cache.stacked
            g = np.stack(grad_logits)
            for k in range(len(self.stacked) - 1, -1, -1):
                W, _, act = self.stacked[k]
                wspec, bspec, _ = self._stack_specs[k]
                if act == "relu":
                    g = g * (pre[k] > 0.0)
                np.matmul(g.transpose(0, 2, 1), inputs[k], out=store.view(wspec, grad))
                g.sum(axis=1, out=store.view(bspec, grad))
                g = np.matmul(g, W)
            np.add.at(g_emb, labels, g[:, :, self.noise_dim:].sum(axis=0))
        else:
            for t, (cell, c) in enumerate(zip(self.cells, cache.per_cell)):
                layer_grads, g_in = cell.backward(c, grad_logits[t])
                for (wb, bb, _), (dW, db) in zip(self.cell_blocks[t], layer_grads):
                    store.view(wb, grad)[...] = dW
                    store.view(bb, grad)[...] = db
                np.add.at(g_emb, labels, g_in[:, self.noise_dim:])
        return grad

    def act_distribution(self, noise, label) -> ActionDistribution:
        logits, _ = self.forward(noise, label)
        return ActionDistribution([log_softmax(z) for z in logits])

    # -- persistence -------------------------------------------------------

    def to_document(self, problem: SyntProblem | None = None, optimizer=None) -> dict:
        layers = []
        for t, cell in enumerate(self.cells):
            layers.append({
                "cell": t,
                "sizes": cell.sizes,
                "activations": cell.activations,
                "weights": [layer.weights.ravel().tolist() for layer in cell.layers],
                "biases": [layer.biases.tolist() for layer in cell.layers],
            })
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "build": BUILD_ID,
            "T": self.dim,
            "cardinality": list(self.cardinalities),
            "noise_dim": self.noise_dim,
            "emb_dim": self.emb_dim,
            "hidden": list(self.hidden),
            "L": self.n_classes,
            "conditional": self.conditional,
            "octant_encoding": OCTANT_ENCODING,
            "cells": layers,
            "embedding": self.embedding.tolist(),
        }
        if problem is not None:
            doc["problem"] = problem_to_dict(problem)
        if optimizer is not None:
            doc["optimizer"] = optimizer.state_dict()
        return doc

    @classmethod
    def from_document(cls, doc: dict, problem: SyntProblem | None = None) -> "PolicyGenerator":
        return checkpoint_load(doc, problem)


def problem_to_dict(problem: SyntProblem) -> dict:
    return {
        "dim": problem.dim,
        "cardinality": problem.cardinalities,
        "lower": [d.lower for d in problem.domains],
        "upper": [d.upper for d in problem.domains],
        "threshold": problem.threshold,
    }


def problem_from_dict(doc: dict) -> SyntProblem:
    from .problem import DiscreteDomain

    doms = tuple(
        DiscreteDomain(float(lo), float(hi), int(c))
        for lo, hi, c in zip(doc["lower"], doc["upper"], doc["cardinality"])
    )
    if len(doms) != int(doc["dim"]):
        raise CheckpointError("problem block is inconsistent")
    return SyntProblem(doms, float(doc["threshold"]))


def checkpoint_save(gen: PolicyGenerator, problem=None, optimizer=None) -> dict:
    return gen.to_document(problem, optimizer)


def checkpoint_dumps(doc: dict) -> str:
    return json.dumps(doc, indent=None, separators=(",", ":"))


def checkpoint_load(doc, problem: SyntProblem | None = None) -> PolicyGenerator:
    """Rebuild a generator from a checkpoint document (dict or JSON text).

    Nothing is returned unless every block validates.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("malformed checkpoint: expected a JSON object")
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')!r} not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        cards = [int(c) for c in doc["cardinality"]]
        T = int(doc["T"])
        cells = doc["cells"]
        emb = np.asarray(doc["embedding"], dtype=np.float64)
        gen = PolicyGenerator(cards, int(doc["L"]), int(doc["noise_dim"]), int(doc["emb_dim"]),
                              tuple(doc["hidden"]), bool(doc["conditional"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if T != len(cards) or len(cells) != T:
        raise CheckpointError(f"checkpoint declares T={T} but stores {len(cells)} cells")
    if problem is not None:
        if problem.dim != T:
            missing = min(T, problem.dim)
            raise CheckpointError(
                f"shape mismatch at cell {missing}: checkpoint has {T} cells, "
                f"problem has {problem.dim} variables"
            )
        for t, (a, b) in enumerate(zip(cards, problem.cardinalities)):
            if a != b:
                raise CheckpointError(f"shape mismatch at cell {t}: cardinality {a} vs problem {b}")
    # gen is fresh and only returned on success, so partial fills never leak
    for t, (cell, blob) in enumerate(zip(gen.cells, cells)):
        if blob.get("sizes") != cell.sizes or blob.get("activations") != cell.activations:
            raise CheckpointError(f"shape mismatch at cell {t}: layer sizes {blob.get('sizes')}")
        try:
            for layer, w, b in zip(cell.layers, blob["weights"], blob["biases"], strict=True):
                layer.weights[...] = np.asarray(w, dtype=np.float64).reshape(layer.weights.shape)
                layer.biases[...] = np.asarray(b, dtype=np.float64).reshape(layer.biases.shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"shape mismatch at cell {t}: {exc}") from None
    if emb.shape != gen.embedding.shape:
        raise CheckpointError(f"embedding shape {emb.shape} != {gen.embedding.shape}")
    gen.embedding[...] = emb
    if not np.isfinite(gen.theta).all():
        raise CheckpointError("checkpoint contains non-finite parameters")
    return gen


def new_generator(problem: SyntProblem, n_classes: int = 1, seed: int = 0, **kw) -> PolicyGenerator:
    return PolicyGenerator.for_problem(problem, n_classes, **kw).initialize(make_rng(seed))
