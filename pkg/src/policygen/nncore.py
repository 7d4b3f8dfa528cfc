"""Small dense-network toolkit: layers, softmax, backprop, Adam, seeded RNG.

Everything is float64. Parameters of a model live in one flat vector
(:class:`FlatParams`) and every layer holds *views* into it, so the optimizer
updates the whole model with a handful of vectorized operations and the
update order is fixed by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; normals come from numpy's ziggurat."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-worker streams derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def gaussian_sample(rng: np.random.Generator, n) -> np.ndarray:
    """``n`` standard-normal draws (``n`` may be a shape tuple)."""
    return rng.standard_normal(n)


# ---------------------------------------------------------------------------
# parameter storage
# ---------------------------------------------------------------------------


@dataclass
class Block:
    name: str
    offset: int
    shape: tuple[int, ...]
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class FlatParams:
    """Append-only registry of named parameter blocks backed by one vector.

    Call :meth:`add` for every block, then :meth:`finalize`; after that
    :meth:`view` hands out reshaped views into ``data``.
    """

    def __init__(self):
        self.blocks: list[Block] = []
        self._size = 0
        self.data: np.ndarray | None = None

    def add(self, name: str, shape, trainable: bool = True) -> Block:
        if self.data is not None:
            raise RuntimeError("parameter vector already finalized")
        blk = Block(name, self._size, tuple(int(s) for s in shape), trainable)
        self.blocks.append(blk)
        self._size += blk.size
        return blk

    def finalize(self) -> np.ndarray:
        self.data = np.zeros(self._size, dtype=np.float64)
        return self.data

    @property
    def size(self) -> int:
        return self._size

    def view(self, blk: Block, vec: np.ndarray | None = None) -> np.ndarray:
        vec = self.data if vec is None else vec
        return vec[blk.offset : blk.offset + blk.size].reshape(blk.shape)

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self._size, dtype=bool)
        for blk in self.blocks:
            if blk.trainable:
                mask[blk.offset : blk.offset + blk.size] = True
        return mask

    def block_at(self, index: int) -> Block:
        for blk in self.blocks:
            if blk.offset <= index < blk.offset + blk.size:
                return blk
        raise IndexError(index)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes {self.weights.shape} / {self.biases.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class ForwardCache:
    owner: int  # id() of the Mlp that produced it
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


class Mlp:
    """Stack of dense layers; accepts a single vector or a batch (rows)."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].n_in != layers[k - 1].n_out:
                raise ValueError(
                    f"layer {k} expects {layers[k].n_in} inputs, "
                    f"layer {k - 1} produces {layers[k - 1].n_out}"
                )
        self.layers = layers

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def forward(self, x) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.layers[0].n_in:
            raise ValueError(
                f"input width {x.shape[-1]} does not match layer width {self.layers[0].n_in}"
            )
        cache = ForwardCache(owner=id(self))
        h = x
        for layer in self.layers:
            cache.inputs.append(h)
            z = h @ layer.weights.T + layer.biases
            cache.pre.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        return h, cache

    def backward(
        self, cache: ForwardCache, grad_out
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Reverse pass. Returns ``[(dW, db), ...]`` per layer and d(input).

        For batched input the parameter gradients are summed over rows.
        """
        if cache.owner != id(self) or len(cache.pre) != len(self.layers):
            raise ValueError("forward cache does not belong to this network")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != cache.pre[-1].shape:
            raise ValueError(f"gradient shape {g.shape} != output shape {cache.pre[-1].shape}")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)  # type: ignore[list-item]
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            if layer.activation == "relu":
                g = g * (cache.pre[k] > 0.0)
            h = cache.inputs[k]
            if g.ndim == 1:
                dW = np.outer(g, h)
                db = g.copy()
            else:
                g2 = g.reshape(-1, g.shape[-1])
                dW = g2.T @ h.reshape(-1, h.shape[-1])
                db = g2.sum(axis=0)
            grads[k] = (dW, db)
            g = g @ layer.weights
        return grads, g


def forward(mlp: Mlp, x):
    return mlp.forward(x)


def backward(mlp: Mlp, cache: ForwardCache, grad_logits):
    return mlp.backward(cache, grad_logits)


def register_mlp(store: FlatParams, prefix: str, sizes, activation: str = "relu") -> list[tuple[Block, Block, str]]:
    """Reserve weight/bias blocks for an MLP; hidden layers use ``activation``,
    the last layer is identity."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ValueError(f"layer sizes must be >= 1 and at least two: {sizes}")
    specs = []
    n = len(sizes) - 1
    for k in range(n):
        act = "identity" if k == n - 1 else activation
        wb = store.add(f"{prefix}.layer{k}.weights", (sizes[k + 1], sizes[k]))
        bb = store.add(f"{prefix}.layer{k}.biases", (sizes[k + 1],))
        specs.append((wb, bb, act))
    return specs


def bind_mlp(store: FlatParams, specs) -> Mlp:
    return Mlp([DenseLayer(store.view(w), store.view(b), act) for w, b, act in specs])


def init_mlp_weights(rng: np.random.Generator, mlp: Mlp) -> None:
    """Fan-in scaled normal init in place: var 2/fan_in for relu layers,
    1/fan_in for identity layers; biases zero."""
    for layer in mlp.layers:
        fan_in = layer.n_in
        gain = 2.0 if layer.activation == "relu" else 1.0
        layer.weights[...] = rng.standard_normal(layer.weights.shape) * np.sqrt(gain / fan_in)
        layer.biases[...] = 0.0


def init_params(rng: np.random.Generator, sizes, activation: str = "relu") -> Mlp:
    """Standalone randomly initialized MLP (own parameter vector)."""
    store = FlatParams()
    specs = register_mlp(store, "mlp", sizes, activation)
    store.finalize()
    mlp = bind_mlp(store, specs)
    init_mlp_weights(rng, mlp)
    return mlp


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("NaN in logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("NaN in logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a flat parameter vector.

    ``mask`` freezes entries: they never move (their moment slots are
    still updated but never applied).
    """

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, mask: np.ndarray | None = None):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        mask = None if mask is None else np.asarray(mask, dtype=bool)
        self.frozen = None if mask is None or mask.all() else np.flatnonzero(~mask)
        self._tmp = np.empty(size)
        self._tmp2 = np.empty(size)

    def step(self, params: np.ndarray, grads: np.ndarray, store: FlatParams | None = None) -> None:
        if params.shape != self.m.shape or grads.shape != self.m.shape:
            raise ValueError(
                f"shape mismatch: params {params.shape}, grads {grads.shape}, state {self.m.shape}"
            )
        if not np.isfinite(grads.sum()):
            bad = np.flatnonzero(~np.isfinite(grads))
            if len(bad):
                where = store.block_at(int(bad[0])).name if store is not None else f"index {bad[0]}"
                raise FloatingPointError(f"non-finite gradient in parameter block {where}")
        g = grads
        tmp, tmp2 = self._tmp, self._tmp2
        self.t += 1
        np.multiply(g, 1.0 - self.beta1, out=tmp)
        self.m *= self.beta1
        self.m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - self.beta2
        self.v *= self.beta2
        self.v += tmp
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        np.multiply(self.v, 1.0 / bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(self.m, tmp, out=tmp2)
        tmp2 *= self.lr / bc1
        if self.frozen is not None:
            tmp2[self.frozen] = 0.0
        params -= tmp2

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "t": self.t, "m": self.m.tolist(), "v": self.v.tolist(),
        }

    def load_state_dict(self, doc: dict) -> None:
        m = np.asarray(doc["m"], dtype=np.float64)
        v = np.asarray(doc["v"], dtype=np.float64)
        if m.shape != self.m.shape or v.shape != self.v.shape:
            raise ValueError("optimizer state does not match parameter count")
        self.lr, self.beta1, self.beta2, self.eps = doc["lr"], doc["beta1"], doc["beta2"], doc["eps"]
        self.t = int(doc["t"])
        self.m[...] = m
        self.v[...] = v


def optimizer_step(state: Adam, params: np.ndarray, grads: np.ndarray, store=None) -> np.ndarray:
    state.step(params, grads, store)
    return params
