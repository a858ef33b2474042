"""Deep belief network: Gaussian-RBM input layer, binary RBM stack, softmax head.

All gradients follow the log-likelihood *ascent* convention, so an update is
always ``p + lr * g``. Models are immutable: training functions return new
models and every parameter array is read-only.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .config import TrainConfig
from .traffic import (
    CONTINUOUS_INDEX,
    DISCRETE_INDEX,
    FEATURE_NAMES,
    FLAGS,
    N_CLASSES,
    PROTOCOLS,
    SERVICES,
    ClassId,
    FeatureVector,
)

FORMAT_VERSION = 1
LOG_PROB_FLOOR = -700.0
MAX_ENUMERATION_UNITS = 20


class DbnError(Exception):
    pass


class DimensionMismatch(DbnError, ValueError):
    pass


class UnknownCategory(DbnError, ValueError):
    pass


class TooLargeForEnumeration(DbnError, ValueError):
    pass


class EmptyBatch(DbnError, ValueError):
    pass


class EmptyDataset(DbnError, ValueError):
    pass


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# input encoding


@dataclass(frozen=True)
class FeatureMoments:
    """Count, mean and centred sum of squares of the continuous features.

    Nodes exchange these aggregates (never samples) to agree on one encoding.
    """

    count: int
    mean: tuple[float, ...]
    m2: tuple[float, ...]

    @classmethod
    def of(cls, X_raw: np.ndarray) -> "FeatureMoments":
        C = np.asarray(X_raw, dtype=np.float64)[:, CONTINUOUS_INDEX]
        if len(C) == 0:
            return cls(0, (0.0,) * len(CONTINUOUS_INDEX), (0.0,) * len(CONTINUOUS_INDEX))
        mean = C.mean(axis=0)
        m2 = ((C - mean) ** 2).sum(axis=0)
        return cls(len(C), tuple(mean.tolist()), tuple(m2.tolist()))

    @staticmethod
    def merge(parts: Sequence["FeatureMoments"]) -> "FeatureMoments":
        n, mean, m2 = 0, None, None
        for p in parts:
            if p.count == 0:
                continue
            pm, pv = np.asarray(p.mean), np.asarray(p.m2)
            if n == 0:
                n, mean, m2 = p.count, pm, pv
                continue
            total = n + p.count
            delta = pm - mean
            mean = mean + delta * (p.count / total)
            m2 = m2 + pv + delta ** 2 * (n * p.count / total)
            n = total
        if n == 0:
            raise EmptyDataset("no samples to compute feature moments from")
        return FeatureMoments(n, tuple(mean.tolist()), tuple(m2.tolist()))


@dataclass(frozen=True)
class EncodingSpec:
    """Category vocabularies plus per-feature z-score constants."""

    protocols: tuple[str, ...] = PROTOCOLS
    services: tuple[str, ...] = SERVICES
    flags: tuple[str, ...] = FLAGS
    means: tuple[float, ...] = (0.0,) * len(CONTINUOUS_INDEX)
    stds: tuple[float, ...] = (1.0,) * len(CONTINUOUS_INDEX)

    def __post_init__(self):
        for name in ("protocols", "services", "flags", "means", "stds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.means) != len(CONTINUOUS_INDEX) or len(self.stds) != len(CONTINUOUS_INDEX):
            raise DimensionMismatch("encoding needs one mean and std per continuous feature")
        if min(self.stds) <= 0:
            raise ValueError("standard deviations must be positive")

    @property
    def width(self) -> int:
        return len(self.protocols) + len(self.services) + len(self.flags) + len(self.means)

    @classmethod
    def from_moments(cls, moments: FeatureMoments) -> "EncodingSpec":
        var = np.asarray(moments.m2) / moments.count
        std = np.sqrt(var)
        std[~(std > 1e-12)] = 1.0
        return cls(means=tuple(moments.mean), stds=tuple(std.tolist()))

    @classmethod
    def fit(cls, X_raw: np.ndarray) -> "EncodingSpec":
        return cls.from_moments(FeatureMoments.of(X_raw))

    def to_json(self) -> dict:
        return {
            "protocol_type": list(self.protocols),
            "service": list(self.services),
            "flag": list(self.flags),
            "continuous": [FEATURE_NAMES[i] for i in CONTINUOUS_INDEX],
            "means": list(self.means),
            "stds": list(self.stds),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EncodingSpec":
        return cls(tuple(obj["protocol_type"]), tuple(obj["service"]), tuple(obj["flag"]),
                   tuple(obj["means"]), tuple(obj["stds"]))


def encode_matrix(X_raw: np.ndarray, spec: EncodingSpec) -> np.ndarray:
    """Encode raw ``(n, 21)`` feature rows into ``(n, spec.width)`` network inputs.

    Layout: one-hot protocol_type, service, flag, then the z-scored
    continuous features in their original order.
    """
    X_raw = np.asarray(X_raw, dtype=np.float64)
    if X_raw.ndim != 2 or X_raw.shape[1] != len(FEATURE_NAMES):
        raise DimensionMismatch(f"expected (n, {len(FEATURE_NAMES)}) raw features, got {X_raw.shape}")
    blocks = []
    for name, vocab in (("protocol_type", spec.protocols), ("service", spec.services),
                        ("flag", spec.flags)):
        codes = X_raw[:, DISCRETE_INDEX[name]]
        ints = codes.astype(np.int64)
        bad = (ints != codes) | (ints < 0) | (ints >= len(vocab))
        if bad.any():
            raise UnknownCategory(f"{name} code {codes[bad][0]!r} outside vocabulary {vocab}")
        blocks.append(np.eye(len(vocab))[ints])
    cont = (X_raw[:, CONTINUOUS_INDEX] - np.asarray(spec.means)) / np.asarray(spec.stds)
    blocks.append(cont)
    return np.hstack(blocks)


def encode(sample: FeatureVector, spec: EncodingSpec) -> np.ndarray:
    return encode_matrix(sample.as_array()[None, :], spec)[0]


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True, eq=False)
class RbmLayer:
    W: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen(self.W, 2))
        object.__setattr__(self, "b1", _frozen(self.b1, 1))
        object.__setattr__(self, "b2", _frozen(self.b2, 1))
        M, N = self.W.shape
        if self.b1.shape != (M,) or self.b2.shape != (N,):
            raise DimensionMismatch(f"W {self.W.shape} vs b1 {self.b1.shape}, b2 {self.b2.shape}")

    @property
    def n_visible(self) -> int:
        return self.W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[1]

    def hidden_probs(self, V: np.ndarray) -> np.ndarray:
        return expit(V @ self.W + self.b2)

    def visible_probs(self, H: np.ndarray) -> np.ndarray:
        return expit(H @ self.W.T + self.b1)


@dataclass(frozen=True, eq=False)
class GrbmLayer(RbmLayer):
    """Real-valued visible units with per-unit standard deviation ``sigma``."""

    sigma: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        sigma = np.ones(self.W.shape[0]) if self.sigma is None else self.sigma
        object.__setattr__(self, "sigma", _frozen(sigma, 1))
        if self.sigma.shape != self.b1.shape:
            raise DimensionMismatch("sigma must have one entry per visible unit")
        if not (self.sigma > 0).all():
            raise ValueError("sigma must be strictly positive")

    def hidden_probs(self, V: np.ndarray) -> np.ndarray:
        return expit((V / self.sigma) @ self.W + self.b2)

    def visible_mean(self, H: np.ndarray) -> np.ndarray:
        return self.sigma * (H @ self.W.T) + self.b1


@dataclass(frozen=True, eq=False)
class SoftmaxHead:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen(self.W, 2))
        object.__setattr__(self, "b", _frozen(self.b, 1))
        if self.b.shape != (self.W.shape[0],):
            raise DimensionMismatch(f"head W {self.W.shape} vs b {self.b.shape}")


@dataclass(frozen=True, eq=False)
class DbnModel:
    grbm: GrbmLayer
    rbms: tuple[RbmLayer, ...]
    head: SoftmaxHead
    encoding: EncodingSpec = field(default_factory=EncodingSpec)

    def __post_init__(self):
        object.__setattr__(self, "rbms", tuple(self.rbms))
        width = self.grbm.n_hidden
        for i, layer in enumerate(self.rbms):
            if layer.n_visible != width:
                raise DimensionMismatch(f"rbm{i + 1} expects {layer.n_visible} inputs, gets {width}")
            width = layer.n_hidden
        if self.head.W.shape[1] != width:
            raise DimensionMismatch(f"head expects {self.head.W.shape[1]} inputs, gets {width}")
        if self.head.W.shape[0] != N_CLASSES:
            raise DimensionMismatch(f"head must have {N_CLASSES} outputs")

    @property
    def layers(self) -> tuple[RbmLayer, ...]:
        return (self.grbm,) + self.rbms

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.grbm.n_visible,) + tuple(l.n_hidden for l in self.layers) + (N_CLASSES,)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            prefix = "grbm" if i == 0 else f"rbm{i}"
            out[f"{prefix}.W"] = layer.W
            out[f"{prefix}.b1"] = layer.b1
            out[f"{prefix}.b2"] = layer.b2
        out["head.W"] = self.head.W
        out["head.b"] = self.head.b
        return out

    def with_params(self, params: Mapping[str, np.ndarray]) -> "DbnModel":
        grbm = GrbmLayer(params["grbm.W"], params["grbm.b1"], params["grbm.b2"], self.grbm.sigma)
        rbms = tuple(
            RbmLayer(params[f"rbm{i}.W"], params[f"rbm{i}.b1"], params[f"rbm{i}.b2"])
            for i in range(1, len(self.rbms) + 1)
        )
        return DbnModel(grbm, rbms, SoftmaxHead(params["head.W"], params["head.b"]), self.encoding)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.params().values())


def init_model(input_width: int, hidden_sizes: Sequence[int], rng: np.random.Generator,
               encoding: EncodingSpec | None = None, scale: float = 0.01) -> DbnModel:
    """Weights uniform in ``[-scale, scale]``, biases zero, unit visible sigma."""
    sizes = (input_width,) + tuple(hidden_sizes)
    layers = []
    for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = rng.uniform(-scale, scale, size=(m, n))
        if i == 0:
            layers.append(GrbmLayer(W, np.zeros(m), np.zeros(n), np.ones(m)))
        else:
            layers.append(RbmLayer(W, np.zeros(m), np.zeros(n)))
    head = SoftmaxHead(rng.uniform(-scale, scale, size=(N_CLASSES, sizes[-1])), np.zeros(N_CLASSES))
    return DbnModel(layers[0], tuple(layers[1:]), head, encoding or EncodingSpec())


# ---------------------------------------------------------------------------
# gradient containers


@dataclass(frozen=True, eq=False)
class GradientBundle:
    """Per-parameter gradients keyed like :meth:`DbnModel.params`."""

    arrays: Mapping[str, np.ndarray]

    def __post_init__(self):
        frozen = {}
        for k, v in self.arrays.items():
            a = np.array(v, dtype=np.float64)
            a.setflags(write=False)
            frozen[k] = a
        object.__setattr__(self, "arrays", frozen)

    @classmethod
    def zeros_like(cls, model: DbnModel) -> "GradientBundle":
        return cls({k: np.zeros_like(v) for k, v in model.params().items()})

    def keys(self):
        return self.arrays.keys()

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.arrays.items()}

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        if self.shapes() != other.shapes():
            raise DimensionMismatch("gradient bundles are not shape-congruent")
        return GradientBundle({k: v + other.arrays[k] for k, v in self.arrays.items()})

    def __neg__(self) -> "GradientBundle":
        return GradientBundle({k: -v for k, v in self.arrays.items()})

    def scale(self, alpha: float) -> "GradientBundle":
        return GradientBundle({k: alpha * v for k, v in self.arrays.items()})

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.arrays.values())))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in self.arrays.items()}


@dataclass(frozen=True)
class LayerGradient:
    W: np.ndarray
    b1: np.ndarray
    b2: np.ndarray


# ---------------------------------------------------------------------------
# energies and exact probabilities


def _check_vh(layer: RbmLayer, v, h):
    v = np.asarray(v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if v.shape[-1] != layer.n_visible or h.shape[-1] != layer.n_hidden:
        raise DimensionMismatch(
            f"layer is {layer.n_visible}x{layer.n_hidden}, got v {v.shape}, h {h.shape}")
    return v, h


def grbm_energy(layer: GrbmLayer, v, h) -> float:
    v, h = _check_vh(layer, v, h)
    eps = layer.sigma
    quad = np.sum((v - layer.b1) ** 2 / (2.0 * eps ** 2))
    inter = np.sum(layer.W * np.outer(v / eps, h))
    return float(quad - inter - np.dot(layer.b2, h))


def rbm_energy(layer: RbmLayer, v, h) -> float:
    v, h = _check_vh(layer, v, h)
    return float(-np.dot(layer.b1, v) - v @ layer.W @ h - np.dot(layer.b2, h))


def _binary_states(n: int) -> np.ndarray:
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(2 ** n, n)


def _joint_neg_energy(layer: RbmLayer):
    if layer.n_visible + layer.n_hidden > MAX_ENUMERATION_UNITS:
        raise TooLargeForEnumeration(
            f"{layer.n_visible}+{layer.n_hidden} units exceeds {MAX_ENUMERATION_UNITS}")
    V = _binary_states(layer.n_visible)
    H = _binary_states(layer.n_hidden)
    neg_e = (V @ layer.b1)[:, None] + V @ layer.W @ H.T + (H @ layer.b2)[None, :]
    return V, H, neg_e


def log_visible_marginal(layer: RbmLayer, v) -> float:
    """``log p(v)`` by enumerating every visible and hidden state."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (layer.n_visible,):
        raise DimensionMismatch(f"v has shape {v.shape}, layer has {layer.n_visible} visible units")
    V, H, neg_e = _joint_neg_energy(layer)
    log_z = logsumexp(neg_e)
    neg_e_v = v @ layer.b1 + v @ layer.W @ H.T + H @ layer.b2
    return float(logsumexp(neg_e_v) - log_z)


def visible_marginal(layer: RbmLayer, v) -> float:
    return float(np.exp(log_visible_marginal(layer, v)))


def joint_distribution(layer: RbmLayer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Enumerated visible states, hidden states and the ``p(v, h)`` table."""
    V, H, neg_e = _joint_neg_energy(layer)
    return V, H, np.exp(neg_e - logsumexp(neg_e))


# ---------------------------------------------------------------------------
# contrastive divergence


def _grad_terms(layer: RbmLayer, V: np.ndarray, PH: np.ndarray):
    n = len(V)
    if isinstance(layer, GrbmLayer):
        scaled = V / layer.sigma
        return (scaled.T @ PH / n, ((V - layer.b1) / layer.sigma ** 2).mean(axis=0), PH.mean(axis=0))
    return V.T @ PH / n, V.mean(axis=0), PH.mean(axis=0)


def _gibbs_visible(layer: RbmLayer, H: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if isinstance(layer, GrbmLayer):
        mean = layer.visible_mean(H)
        return mean + layer.sigma * rng.standard_normal(mean.shape)
    P = layer.visible_probs(H)
    return (rng.random(P.shape) < P).astype(np.float64)


def cd_gradient(layer: RbmLayer, batch, k_steps: int = 1,
                rng: np.random.Generator | None = None, exact: bool = False) -> LayerGradient:
    """Batch-averaged CD-k estimate of the log-likelihood gradient (ascent).

    The data phase uses exact hidden probabilities. The model phase runs a
    k-step block Gibbs chain started at the data; with ``exact=True`` (binary
    layers small enough to enumerate) it uses the true model expectations.
    """
    V = np.asarray(batch, dtype=np.float64)
    if V.ndim == 1:
        V = V[None, :]
    if V.size == 0 or len(V) == 0:
        raise EmptyBatch("cd_gradient needs at least one sample")
    if V.shape[1] != layer.n_visible:
        raise DimensionMismatch(f"batch width {V.shape[1]} != {layer.n_visible} visible units")
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")

    PH0 = layer.hidden_probs(V)
    dW, db1, db2 = _grad_terms(layer, V, PH0)

    if exact:
        if isinstance(layer, GrbmLayer):
            raise TooLargeForEnumeration("exact model expectations need binary visible units")
        Vs, Hs, P = joint_distribution(layer)
        mW = Vs.T @ P @ Hs
        mb1 = P.sum(axis=1) @ Vs
        mb2 = P.sum(axis=0) @ Hs
    else:
        if rng is None:
            raise ValueError("sampling CD needs an rng")
        H = (rng.random(PH0.shape) < PH0).astype(np.float64)
        for step in range(k_steps):
            Vk = _gibbs_visible(layer, H, rng)
            PHk = layer.hidden_probs(Vk)
            if step < k_steps - 1:
                H = (rng.random(PHk.shape) < PHk).astype(np.float64)
        mW, mb1, mb2 = _grad_terms(layer, Vk, PHk)
    return LayerGradient(dW - mW, db1 - mb1, db2 - mb2)


def reconstruction_error(layer: RbmLayer, V: np.ndarray) -> float:
    """Mean squared error of the mean-field visible reconstruction."""
    PH = layer.hidden_probs(V)
    R = layer.visible_mean(PH) if isinstance(layer, GrbmLayer) else layer.visible_probs(PH)
    return float(np.mean((V - R) ** 2))


def _step_layer(layer: RbmLayer, g: LayerGradient, lr: float) -> RbmLayer:
    W, b1, b2 = layer.W + lr * g.W, layer.b1 + lr * g.b1, layer.b2 + lr * g.b2
    if isinstance(layer, GrbmLayer):
        return GrbmLayer(W, b1, b2, layer.sigma)
    return RbmLayer(W, b1, b2)


def train_layer(layer: RbmLayer, V: np.ndarray, epochs: int, lr: float, batch_size: int,
                k_steps: int, rng: np.random.Generator,
                history: list | None = None) -> RbmLayer:
    """Mini-batch CD-k training of a single layer over shuffled epochs."""
    n = len(V)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            layer = _step_layer(layer, cd_gradient(layer, V[idx], k_steps, rng), lr)
        if history is not None:
            history.append(reconstruction_error(layer, V))
    return layer


def pretrain(model: DbnModel, unlabeled: np.ndarray, cfg: TrainConfig,
             rng: np.random.Generator) -> DbnModel:
    """Greedy bottom-up CD-k pre-training of the GRBM and every RBM."""
    X = np.asarray(unlabeled, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise EmptyDataset("pre-training needs a non-empty (n, width) matrix")
    if cfg.pretrain_epochs == 0:
        return model
    trained = []
    inputs = X
    for layer in model.layers:
        layer = train_layer(layer, inputs, cfg.pretrain_epochs, cfg.pretrain_lr,
                            cfg.pretrain_batch, cfg.cd_k, rng)
        trained.append(layer)
        inputs = layer.hidden_probs(inputs)
    return DbnModel(trained[0], tuple(trained[1:]), model.head, model.encoding)


# ---------------------------------------------------------------------------
# classification


def _check_input(model: DbnModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.grbm.n_visible:
        raise DimensionMismatch(f"input width {X.shape[-1]} != model input {model.grbm.n_visible}")
    return X


def hidden_activations(model: DbnModel, X: np.ndarray) -> list[np.ndarray]:
    acts = [model.grbm.hidden_probs(X)]
    for layer in model.rbms:
        acts.append(layer.hidden_probs(acts[-1]))
    return acts


def logits(model: DbnModel, X: np.ndarray) -> np.ndarray:
    X = _check_input(model, X)
    return hidden_activations(model, X)[-1] @ model.head.W.T + model.head.b


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(model: DbnModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-field pass; returns (last hidden activations, class probabilities)."""
    X = _check_input(model, np.atleast_2d(X))
    last = hidden_activations(model, X)[-1]
    return last, softmax(last @ model.head.W.T + model.head.b)


def forward(model: DbnModel, encoded) -> tuple[np.ndarray, np.ndarray]:
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.ndim != 1:
        raise DimensionMismatch("forward takes a single encoded vector")
    last, probs = forward_batch(model, encoded[None, :])
    return last[0], probs[0]


def predict_batch(model: DbnModel, X: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(forward_batch(model, X)[1], axis=1)


def predict(model: DbnModel, encoded) -> ClassId:
    return ClassId(int(np.argmax(forward(model, encoded)[1])))


def mean_log_likelihood(model: DbnModel, X: np.ndarray, y: np.ndarray) -> float:
    """Mean log-probability of the true classes, each clamped at -700."""
    z = logits(model, np.atleast_2d(X))
    y = np.asarray(y, dtype=np.int64)
    logp = z[np.arange(len(y)), y] - logsumexp(z, axis=1)
    return float(np.mean(np.maximum(logp, LOG_PROB_FLOOR)))


def supervised_gradient(model: DbnModel, X: np.ndarray, y: np.ndarray) -> GradientBundle:
    """Backpropagated gradient of the mean true-class log-probability.

    Covers the head and every layer's weights and hidden biases; visible biases
    do not enter the feed-forward pass, so their entries are zero.
    """
    X = _check_input(model, np.atleast_2d(X))
    y = np.asarray(y, dtype=np.int64)
    n = len(X)
    if n == 0:
        raise EmptyBatch("supervised_gradient needs at least one sample")
    if y.shape != (n,):
        raise DimensionMismatch("one label per sample required")

    acts = hidden_activations(model, X)
    probs = softmax(acts[-1] @ model.head.W.T + model.head.b)
    delta = -probs
    delta[np.arange(n), y] += 1.0

    grads: dict[str, np.ndarray] = {}
    grads["head.W"] = delta.T @ acts[-1] / n
    grads["head.b"] = delta.mean(axis=0)

    back = delta @ model.head.W
    layers = model.layers
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h = acts[i]
        da = back * h * (1.0 - h)
        if i == 0:
            below = X / model.grbm.sigma
            prefix = "grbm"
        else:
            below = acts[i - 1]
            prefix = f"rbm{i}"
        grads[f"{prefix}.W"] = below.T @ da / n
        grads[f"{prefix}.b1"] = np.zeros(layer.n_visible)
        grads[f"{prefix}.b2"] = da.mean(axis=0)
        back = da @ layer.W.T
    order = model.params().keys()
    return GradientBundle({k: grads[k] for k in order})


def generative_gradient(model: DbnModel, X: np.ndarray, k_steps: int,
                        rng: np.random.Generator) -> GradientBundle:
    """CD-k gradients of every layer on the batch (head entries zero)."""
    X = _check_input(model, np.atleast_2d(X))
    grads = {}
    inputs = X
    for i, layer in enumerate(model.layers):
        prefix = "grbm" if i == 0 else f"rbm{i}"
        g = cd_gradient(layer, inputs, k_steps, rng)
        grads[f"{prefix}.W"], grads[f"{prefix}.b1"], grads[f"{prefix}.b2"] = g.W, g.b1, g.b2
        inputs = layer.hidden_probs(inputs)
    grads["head.W"] = np.zeros_like(model.head.W)
    grads["head.b"] = np.zeros_like(model.head.b)
    return GradientBundle(grads)


def total_gradient(model: DbnModel, X: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator | None = None) -> GradientBundle:
    """The node's round gradient: supervised, plus CD terms when configured."""
    g = supervised_gradient(model, X, y)
    if cfg.include_generative_term:
        if rng is None:
            raise ValueError("the generative term needs an rng")
        g = g + generative_gradient(model, X, cfg.cd_k, rng)
    return g


def apply_update(model: DbnModel, g: GradientBundle, lr: float) -> DbnModel:
    """Return the model with every parameter moved to ``p + lr * g_p``."""
    params = model.params()
    if set(params) != set(g.keys()):
        raise DimensionMismatch("gradient does not cover the model's parameters")
    new = {}
    for k, p in params.items():
        gp = g[k]
        if gp.shape != p.shape:
            raise DimensionMismatch(f"{k}: gradient {gp.shape} vs parameter {p.shape}")
        new[k] = p + lr * gp
    return model.with_params(new)


def parameter_delta_norm(a: DbnModel, b: DbnModel) -> float:
    pa, pb = a.params(), b.params()
    return float(np.sqrt(sum(float(np.sum((pa[k] - pb[k]) ** 2)) for k in pa)))


def average_models(models: Sequence[DbnModel]) -> DbnModel:
    """Element-wise mean of shape-congruent models, summed in list order."""
    if not models:
        raise EmptyDataset("nothing to average")
    params = [m.params() for m in models]
    out = {}
    for k in params[0]:
        acc = params[0][k].copy()
        for p in params[1:]:
            acc = acc + p[k]
        out[k] = acc / len(params)
    return models[0].with_params(out)


# ---------------------------------------------------------------------------
# serialization


def model_to_json(model: DbnModel) -> dict:
    layers = []
    for i, layer in enumerate(model.layers):
        d = {"kind": "grbm" if i == 0 else "rbm", "W": layer.W.tolist(),
             "b1": layer.b1.tolist(), "b2": layer.b2.tolist()}
        if i == 0:
            d["sigma"] = layer.sigma.tolist()
        layers.append(d)
    return {
        "format_version": FORMAT_VERSION,
        "encoding": model.encoding.to_json(),
        "dims": list(model.dims),
        "layers": layers,
        "head": {"W": model.head.W.tolist(), "b": model.head.b.tolist()},
    }


def model_from_json(obj: Mapping) -> DbnModel:
    if obj.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {obj.get('format_version')!r}")
    first, *rest = obj["layers"]
    grbm = GrbmLayer(first["W"], first["b1"], first["b2"], first["sigma"])
    rbms = tuple(RbmLayer(l["W"], l["b1"], l["b2"]) for l in rest)
    head = SoftmaxHead(obj["head"]["W"], obj["head"]["b"])
    model = DbnModel(grbm, rbms, head, EncodingSpec.from_json(obj["encoding"]))
    if list(model.dims) != list(obj["dims"]):
        raise DimensionMismatch(f"declared dims {obj['dims']} != actual {list(model.dims)}")
    return model


def dumps(model: DbnModel) -> str:
    return json.dumps(model_to_json(model), separators=(",", ":")) + "\n"


def loads(text: str) -> DbnModel:
    return model_from_json(json.loads(text))


def save_model(model: DbnModel, path: str | Path) -> None:
    Path(path).write_text(dumps(model), encoding="utf-8")


def load_model(path: str | Path) -> DbnModel:
    return loads(Path(path).read_text(encoding="utf-8"))


def models_equal(a: DbnModel, b: DbnModel) -> bool:
    return dumps(a) == dumps(b)

