"""Small embedding network with hand-derived gradients and an NAG optimizer.

The network maps ``d_in`` features through zero or more tanh hidden layers
to a linear ``d``-dimensional output that is L2-normalized. A softmax head
on top of the normalized embedding gives the classification model used for
pre-training, cleaning and joint training.

Parameters are immutable snapshots: every optimizer step returns new
objects, and a :class:`ForwardTrace` remembers which snapshot produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, LabelError, NumericalError, TraceError


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Weights ``W`` of shape ``(out, in)`` and biases ``b`` per layer."""

    layers: tuple

    def __post_init__(self):
        layers = tuple((_frozen(W), _frozen(b)) for W, b in self.layers)
        for (W, b), (W_next, _) in zip(layers, layers[1:] + ((None, None),)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise DimensionError("bias length must match weight rows")
            if W_next is not None and W_next.shape[1] != W.shape[0]:
                raise DimensionError("layer shapes do not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NumericalError("non-finite parameter")
        object.__setattr__(self, "layers", layers)

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def d(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def hidden_dims(self) -> list[int]:
        return [W.shape[0] for W, _ in self.layers[:-1]]

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        return ModelParams(tuple((next(it), next(it)) for _ in self.layers))


@dataclass(frozen=True, eq=False)
class SoftmaxHead:
    """Linear classifier on the normalized embedding.

    Logits are ``scale * (weight @ e + bias)``. ``scale`` is a fixed
    hyperparameter: with unit-norm inputs the head cannot otherwise reach
    confident logits without first growing its weights.
    """

    weight: np.ndarray
    bias: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        W, b = _frozen(self.weight), _frozen(self.bias)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise DimensionError("softmax head must be (C, d) weight with C-vector bias")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NumericalError("non-finite softmax head")
        object.__setattr__(self, "weight", W)
        object.__setattr__(self, "bias", b)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def with_arrays(self, arrays) -> "SoftmaxHead":
        W, b = arrays
        return SoftmaxHead(W, b, self.scale)

    def logits(self, E) -> np.ndarray:
        return self.scale * (np.atleast_2d(E) @ self.weight.T + self.bias)


def init_params(d_in: int, d: int, hidden_dims=(64,), rng=None) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(rng)
    dims = [d_in, *hidden_dims, d]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(
            (rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out))
        )
    return ModelParams(tuple(layers))


def init_head(num_classes: int, d: int, rng=None, scale: float = 1.0) -> SoftmaxHead:
    if num_classes < 2:
        raise ConfigError("a softmax head needs at least two classes")
    rng = np.random.default_rng(rng)
    bound = 1.0 / np.sqrt(d)
    return SoftmaxHead(rng.uniform(-bound, bound, (num_classes, d)), np.zeros(num_classes), scale)


@dataclass(eq=False)
class ForwardTrace:
    """Intermediate values of one forward pass, enough for exact backprop."""

    params: ModelParams
    inputs: list  # input to each layer, (n, fan_in)
    z: np.ndarray  # pre-normalization output, (n, d)
    norms: np.ndarray  # ||z|| per row, (n,)
    embeddings: np.ndarray  # z / ||z||

    def __len__(self) -> int:
        return self.z.shape[0]

    def rows(self, idx) -> "ForwardTrace":
        idx = np.atleast_1d(idx)
        return ForwardTrace(
            self.params,
            [a[idx] for a in self.inputs],
            self.z[idx],
            self.norms[idx],
            self.embeddings[idx],
        )


def forward_batch(params: ModelParams, X) -> tuple[np.ndarray, ForwardTrace]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.d_in:
        raise DimensionError(f"expected {params.d_in} input features, got {X.shape[1]}")
    inputs = []
    h = X
    for W, b in params.layers[:-1]:
        inputs.append(h)
        h = np.tanh(h @ W.T + b)
    inputs.append(h)
    W, b = params.layers[-1]
    z = h @ W.T + b
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite activation in forward pass")
    if np.any(norms == 0.0):
        raise NumericalError("zero pre-normalization activation")
    E = z / norms[:, None]
    return E, ForwardTrace(params, inputs, z, norms, E)


def forward(params: ModelParams, x) -> tuple[np.ndarray, ForwardTrace]:
    """Embed a single feature vector; returns the unit-norm embedding and its trace."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("forward takes one feature vector; use forward_batch for matrices")
    E, trace = forward_batch(params, x)
    return E[0], trace


def embed(params: ModelParams, X, chunk: int = 8192) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((X.shape[0], params.d))
    for s in range(0, X.shape[0], chunk):
        out[s : s + chunk] = forward_batch(params, X[s : s + chunk])[0]
    return out


def backward(trace: ForwardTrace, grad_embeddings, params: ModelParams | None = None) -> list:
    """Backpropagate dL/dE through normalization and every layer.

    Returns gradients in the order of :meth:`ModelParams.arrays`.
    """
    if params is not None and params is not trace.params:
        raise TraceError("trace was produced by a different parameter snapshot")
    params = trace.params
    G = np.atleast_2d(np.asarray(grad_embeddings, dtype=np.float64))
    E = trace.embeddings
    # d(z/|z|)/dz = (I - e e^T) / |z|
    gz = (G - E * np.einsum("ij,ij->i", E, G)[:, None]) / trace.norms[:, None]
    grads = []
    g = gz
    for li in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[li]
        a_in = trace.inputs[li]
        grads.append((g.T @ a_in, g.sum(axis=0)))
        if li > 0:
            g = (g @ W) * (1.0 - a_in * a_in)
    grads.reverse()
    return [a for pair in grads for a in pair]


# --- losses ---------------------------------------------------------------


def triplet_loss(a, p, n, alpha: float) -> float:
    """Hinge ``max(0, |a-p|^2 - |a-n|^2 + alpha)``."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    if not (a.shape == p.shape == n.shape):
        raise DimensionError("triplet members differ in dimension")
    d_ap = float(np.dot(a - p, a - p))
    d_an = float(np.dot(a - n, a - n))
    return max(0.0, d_ap - d_an + alpha)


def triplet_terms(E, anchors, positives, negatives, alpha: float):
    """Per-triplet ``(d_ap, d_an, loss)`` for index triples into ``E``."""
    A, P, N = E[anchors], E[positives], E[negatives]
    d_ap = ((A - P) * (A - P)).sum(axis=-1)
    d_an = ((A - N) * (A - N)).sum(axis=-1)
    return d_ap, d_an, np.maximum(0.0, d_ap - d_an + alpha)


def triplet_embedding_grad(E, anchors, positives, negatives, alpha: float, scale: float = 1.0):
    """dL/dE of ``scale * sum(hinge)`` over the given triplets.

    A hinge argument of exactly zero contributes nothing.
    """
    anchors, positives, negatives = (np.asarray(i, dtype=np.int64) for i in (anchors, positives, negatives))
    G = np.zeros_like(E)
    if len(anchors) == 0:
        return G
    _, _, loss = triplet_terms(E, anchors, positives, negatives, alpha)
    act = loss > 0.0
    a, p, n = anchors[act], positives[act], negatives[act]
    A, P, N = E[a], E[p], E[n]
    np.add.at(G, a, 2.0 * scale * (N - P))
    np.add.at(G, p, 2.0 * scale * (P - A))
    np.add.at(G, n, 2.0 * scale * (A - N))
    return G


def triplet_backward(trace_a: ForwardTrace, trace_p: ForwardTrace, trace_n: ForwardTrace, alpha: float):
    """Parameter gradient of a single triplet's hinge loss."""
    params = trace_a.params
    if trace_p.params is not params or trace_n.params is not params:
        raise TraceError("triplet traces come from different parameter snapshots")
    merged = ForwardTrace(
        params,
        [np.concatenate(parts) for parts in zip(trace_a.inputs, trace_p.inputs, trace_n.inputs)],
        np.concatenate([trace_a.z, trace_p.z, trace_n.z]),
        np.concatenate([trace_a.norms, trace_p.norms, trace_n.norms]),
        np.concatenate([trace_a.embeddings, trace_p.embeddings, trace_n.embeddings]),
    )
    G = triplet_embedding_grad(merged.embeddings, [0], [1], [2], alpha)
    return backward(merged, G)


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def predict_proba(head: SoftmaxHead, E) -> np.ndarray:
    return np.exp(_log_softmax(head.logits(E)))


def softmax_loss(head: SoftmaxHead, e, label: int) -> float:
    """Cross-entropy of one embedding against its label."""
    if not 0 <= label < head.num_classes:
        raise LabelError(f"label {label} outside [0, {head.num_classes})")
    logits = head.logits(np.asarray(e, dtype=np.float64))[0]
    return float(-_log_softmax(logits)[label])


def softmax_backward(head: SoftmaxHead, e, label: int):
    """Gradients ``(dW, db, de)`` of :func:`softmax_loss`."""
    loss, dW, db, dE = softmax_batch(head, np.atleast_2d(e), [label], reduction="sum")
    return dW, db, dE[0]


def softmax_batch(head: SoftmaxHead, E, labels, reduction: str = "mean"):
    """Cross-entropy over rows of ``E``; returns ``(loss, dW, db, dE)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise LabelError("label outside the softmax head's class range")
    n = len(labels)
    if n == 0:
        return 0.0, np.zeros_like(head.weight), np.zeros_like(head.bias), np.zeros_like(E)
    logp = _log_softmax(head.logits(E))
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = -logp[np.arange(n), labels].sum() * scale
    gl = np.exp(logp)
    gl[np.arange(n), labels] -= 1.0
    gl *= scale * head.scale
    return float(loss), gl.T @ E, gl.sum(axis=0), gl @ head.weight


def joint_loss(triplet_terms_, softmax_terms, lam: float) -> float:
    """Mean triplet loss plus ``lam`` times mean softmax loss."""
    if lam < 0:
        raise ConfigError("joint weight must be non-negative")
    t = np.asarray(triplet_terms_, dtype=np.float64)
    s = np.asarray(softmax_terms, dtype=np.float64)
    mean_t = float(t.mean()) if t.size else 0.0
    mean_s = float(s.mean()) if s.size else 0.0
    return mean_t + lam * mean_s


@dataclass
class LossReport:
    triplet_loss: float = 0.0
    softmax_loss: float = 0.0
    active_triplets: int = 0
    num_triplets: int = 0
    batch_size: int = 0
    fallback: bool = False

    def as_dict(self) -> dict:
        return {
            "triplet_loss": self.triplet_loss,
            "softmax_loss": self.softmax_loss,
            "active_triplets": self.active_triplets,
            "num_triplets": self.num_triplets,
            "batch_size": self.batch_size,
            "fallback": self.fallback,
        }


def joint_objective(params, head, X, triplets=None, labels=None, alpha=0.4, lam=1.0):
    """Loss and gradients of the joint triplet + softmax objective on one batch.

    ``triplets`` is an ``(k, 3)`` integer array of row indices into ``X``;
    ``labels`` (optional) are the classes of the rows of ``X`` for the
    softmax term. Returns ``(loss, model_grads, head_grads, report)``;
    ``head_grads`` is ``None`` when no softmax term is present.
    """
    E, trace = forward_batch(params, X)
    report = LossReport(batch_size=len(E))
    G = np.zeros_like(E)
    loss = 0.0
    if triplets is not None and len(triplets):
        tri = np.asarray(triplets, dtype=np.int64)
        _, _, tl = triplet_terms(E, tri[:, 0], tri[:, 1], tri[:, 2], alpha)
        report.triplet_loss = float(tl.mean())
        report.active_triplets = int(np.count_nonzero(tl > 0))
        report.num_triplets = len(tri)
        loss += report.triplet_loss
        G += triplet_embedding_grad(E, tri[:, 0], tri[:, 1], tri[:, 2], alpha, 1.0 / len(tri))
    head_grads = None
    if labels is not None and head is not None and lam > 0:
        sl, dW, db, dE = softmax_batch(head, E, labels)
        report.softmax_loss = sl
        loss += lam * sl
        G += lam * dE
        head_grads = [lam * dW, lam * db]
    return loss, backward(trace, G), head_grads, report


# --- optimizer ------------------------------------------------------------


@dataclass
class NagState:
    velocity: list
    momentum: float = 0.9
    learning_rate: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")


def nag_init(arrays: Sequence[np.ndarray], momentum=0.9, learning_rate=0.01) -> NagState:
    return NagState([np.zeros_like(a) for a in arrays], momentum, learning_rate)


def lookahead(arrays: Sequence[np.ndarray], state: NagState) -> list:
    """Point ``theta + mu * v`` where the caller must evaluate the gradient."""
    return [a + state.momentum * v for a, v in zip(arrays, state.velocity)]


def nag_step(arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: NagState):
    """One Nesterov update given gradients taken at :func:`lookahead`.

    ``v <- mu v - lr g;  theta <- theta + v``. Returns new arrays and a new state.
    """
    if len(arrays) != len(grads) or len(arrays) != len(state.velocity):
        raise DimensionError("parameter, gradient and velocity lists differ in length")
    new_v, new_a = [], []
    for a, g, v in zip(arrays, grads, state.velocity):
        if a.shape != g.shape or a.shape != v.shape:
            raise DimensionError("parameter and gradient shapes differ")
        v2 = state.momentum * v - state.learning_rate * g
        a2 = a + v2
        if not np.all(np.isfinite(a2)):
            raise NumericalError("non-finite parameter after NAG step")
        new_v.append(v2)
        new_a.append(a2)
    return new_a, NagState(new_v, state.momentum, state.learning_rate)


# --- gradient checking ----------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


@dataclass
class GradCheckBatch:
    X: np.ndarray
    triplets: np.ndarray | None = None
    labels: np.ndarray | None = None
    head: SoftmaxHead | None = None
    alpha: float = 0.4
    lam: float = 1.0
    extra: dict = field(default_factory=dict)


def grad_check(params: ModelParams, batch: GradCheckBatch, h: float = 1e-5, floor: float = 1e-6):
    """Central finite differences of the joint loss against the analytic gradient.

    Checks every model parameter and, when present, every softmax-head
    parameter. Returns the maximum relative error.
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    head = batch.head

    def loss_at(p_arrays, h_arrays):
        p = params.with_arrays(p_arrays)
        hd = head.with_arrays(h_arrays) if head is not None else None
        return joint_objective(p, hd, batch.X, batch.triplets, batch.labels, batch.alpha, batch.lam)[0]

    _, g_model, g_head, _ = joint_objective(
        params, head, batch.X, batch.triplets, batch.labels, batch.alpha, batch.lam
    )
    p_arrays = [np.array(a) for a in params.arrays()]
    h_arrays = [np.array(a) for a in head.arrays()] if head is not None else []
    if g_head is None:
        g_head = [np.zeros_like(a) for a in h_arrays]

    worst = 0.0
    for group, analytic_group in ((p_arrays, g_model), (h_arrays, g_head)):
        for arr, analytic in zip(group, analytic_group):
            numeric = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_at(p_arrays, h_arrays)
                flat[i] = orig - h
                down = loss_at(p_arrays, h_arrays)
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * h)
            worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
