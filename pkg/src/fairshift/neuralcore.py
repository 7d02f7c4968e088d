"""Dense ReLU networks with hand-written backpropagation.

A :class:`Network` is an encoder followed by a classifier head and any number
of adversary heads.  Every adversary head reads the encoder output through a
gradient-reversal coupling: identity on the forward pass, ``-coefficient``
times the incoming gradient on the backward pass.  All arithmetic is float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError

CLASSIFIER = "classifier"


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    # Each layer draws from its own stream so adding or removing a head never
    # perturbs the initialisation of the others.
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_layer(in_dim: int, out_dim: int, seed: int, name: str) -> DenseLayer:
    rng = _layer_rng(seed, name)
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = rng.uniform(-bound, bound, size=out_dim)
    return DenseLayer(w, b)


@dataclass
class Network:
    encoder: List[DenseLayer]
    classifier: List[DenseLayer]
    adversaries: Dict[str, List[DenseLayer]] = field(default_factory=dict)
    reversal: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        in_dim: int,
        encoder_sizes: Sequence[int],
        n_classes: int,
        seed: int,
        classifier_hidden: Sequence[int] = (),
        adversaries: Optional[Mapping[str, Tuple[Sequence[int], int]]] = None,
        reversal: float | Mapping[str, float] = 1.0,
    ) -> "Network":
        """Build a network with uniform(+-1/sqrt(fan_in)) initialisation.

        ``adversaries`` maps head name to ``(hidden_sizes, out_dim)``.
        """
        def stack(prefix: str, sizes: Sequence[int], d_in: int) -> List[DenseLayer]:
            layers = []
            for i, d_out in enumerate(sizes):
                layers.append(init_layer(d_in, d_out, seed, f"{prefix}.{i}"))
                d_in = d_out
            return layers

        encoder = stack("encoder", encoder_sizes, in_dim)
        rep_dim = encoder_sizes[-1] if encoder_sizes else in_dim
        classifier = stack(CLASSIFIER, list(classifier_hidden) + [n_classes], rep_dim)
        heads = {}
        coefs = {}
        for name, (hidden, out_dim) in (adversaries or {}).items():
            if name == CLASSIFIER:
                raise ContractError("adversary head may not be named 'classifier'")
            heads[name] = stack(name, list(hidden) + [out_dim], rep_dim)
            coefs[name] = float(reversal[name] if isinstance(reversal, Mapping) else reversal)
        return cls(encoder, classifier, heads, coefs)

    @property
    def in_dim(self) -> int:
        return (self.encoder or self.classifier)[0].in_dim

    def head(self, name: str) -> List[DenseLayer]:
        if name == CLASSIFIER:
            return self.classifier
        try:
            return self.adversaries[name]
        except KeyError:
            raise ContractError(f"network has no head named {name!r}") from None

    @property
    def head_names(self) -> List[str]:
        return [CLASSIFIER] + list(self.adversaries)

    def blocks(self) -> Iterable[Tuple[str, List[DenseLayer]]]:
        yield "encoder", self.encoder
        yield CLASSIFIER, self.classifier
        yield from self.adversaries.items()

    def parameters(self) -> Dict[str, np.ndarray]:
        """Name -> array mapping; the arrays are the live parameter storage."""
        params = {}
        for prefix, layers in self.blocks():
            for i, layer in enumerate(layers):
                params[f"{prefix}.{i}.W"] = layer.weights
                params[f"{prefix}.{i}.b"] = layer.bias
        return params

    def copy(self) -> "Network":
        def dup(layers):
            return [DenseLayer(l.weights.copy(), l.bias.copy()) for l in layers]

        return Network(
            dup(self.encoder),
            dup(self.classifier),
            {k: dup(v) for k, v in self.adversaries.items()},
            dict(self.reversal),
        )

    def load_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        for name, arr in self.parameters().items():
            arr[...] = params[name]

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward(self, x, heads=[CLASSIFIER])
        return out[CLASSIFIER]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def layer_spec(self) -> str:
        parts = []
        for prefix, layers in self.blocks():
            dims = [layers[0].in_dim] + [l.out_dim for l in layers] if layers else []
            coef = self.reversal.get(prefix)
            tag = f"{prefix}:{'x'.join(map(str, dims))}"
            if coef is not None:
                tag += f"@{coef!r}"
            parts.append(tag)
        return ";".join(parts)


@dataclass
class ForwardCache:
    x: np.ndarray
    enc_pre: List[np.ndarray]
    enc_post: List[np.ndarray]
    head_pre: Dict[str, List[np.ndarray]]
    head_in: Dict[str, List[np.ndarray]]


def _run_stack(layers: List[DenseLayer], h: np.ndarray, relu_last: bool):
    pres, ins = [], []
    for i, layer in enumerate(layers):
        ins.append(h)
        z = h @ layer.weights.T + layer.bias
        pres.append(z)
        last = i == len(layers) - 1
        h = np.maximum(z, 0.0) if (relu_last or not last) else z
    return h, pres, ins


def forward(
    net: Network, x: np.ndarray, heads: Optional[Iterable[str]] = None
) -> Tuple[Dict[str, np.ndarray], ForwardCache]:
    """Return head outputs (pre-activation logits) and the cache for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ContractError(f"input shape {x.shape} does not match network input width {net.in_dim}")
    names = net.head_names if heads is None else list(heads)
    rep, enc_pre, enc_ins = _run_stack(net.encoder, x, relu_last=True)
    enc_post = enc_ins[1:] + [rep]
    outputs, head_pre, head_in = {}, {}, {}
    for name in names:
        out, pres, ins = _run_stack(net.head(name), rep, relu_last=False)
        outputs[name] = out
        head_pre[name] = pres
        head_in[name] = ins
    return outputs, ForwardCache(x, enc_pre, enc_post, head_pre, head_in)


def _backprop_stack(prefix, layers, pres, ins, grad, grads):
    for i in range(len(layers) - 1, -1, -1):
        if i < len(layers) - 1:
            grad = grad * (pres[i] > 0)
        grads[f"{prefix}.{i}.W"] = grad.T @ ins[i]
        grads[f"{prefix}.{i}.b"] = grad.sum(axis=0)
        grad = grad @ layers[i].weights
    return grad


def backward(
    net: Network, cache: ForwardCache, head_grads: Mapping[str, np.ndarray]
) -> Dict[str, np.ndarray]:
    """Gradients of the summed head losses for every parameter the forward touched.

    ``head_grads[name]`` is dLoss/d(output of head ``name``).  Adversary heads
    pass ``-coefficient`` times their input gradient into the encoder.
    """
    missing = [h for h in cache.head_pre if h not in head_grads]
    if missing:
        raise ContractError(f"missing loss gradient for head(s) {missing}")
    grads: Dict[str, np.ndarray] = {}
    d_rep = None
    for name in cache.head_pre:
        g = np.asarray(head_grads[name], dtype=np.float64)
        d_in = _backprop_stack(name, net.head(name), cache.head_pre[name], cache.head_in[name], g, grads)
        if name != CLASSIFIER:
            d_in = -net.reversal[name] * d_in
        d_rep = d_in if d_rep is None else d_rep + d_in
    if net.encoder:
        d = d_rep * (cache.enc_pre[-1] > 0)
        enc_ins = [cache.x] + cache.enc_post[:-1]
        for i in range(len(net.encoder) - 1, -1, -1):
            if i < len(net.encoder) - 1:
                d = d * (cache.enc_pre[i] > 0)
            grads[f"encoder.{i}.W"] = d.T @ enc_ins[i]
            grads[f"encoder.{i}.b"] = d.sum(axis=0)
            if i:
                d = d @ net.encoder[i].weights
    return grads


def accumulate(total: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], scale: float = 1.0) -> None:
    for name, g in grads.items():
        if name in total:
            total[name] += scale * g if scale != 1.0 else g
        else:
            total[name] = scale * g if scale != 1.0 else g.copy()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    """Single-sample loss ``-log softmax(logits)[label]`` and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ContractError(f"label {label} outside {logits.shape[-1]} classes")
    lp = log_softmax(logits)
    grad = np.exp(lp)
    grad[label] -= 1.0
    return float(-lp[label]), grad


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and per-row gradient (softmax - onehot)."""
    lp = log_softmax(logits)
    rows = np.arange(len(labels))
    grad = np.exp(lp)
    grad[rows, labels] -= 1.0
    return -lp[rows, labels], grad


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ContractError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """In-place heavy-ball update ``v <- m*v + g; p <- p - lr*v``.

    Parameters with no entry in ``grads`` are treated as having zero gradient.
    """
    for name, p in params.items():
        g = grads.get(name)
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ContractError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v *= state.momentum
        if g is not None:
            v += g
        p -= state.learning_rate * v


def save_snapshot(net: Network, path) -> None:
    lines = [f"layers={net.layer_spec()}"]
    for name, arr in net.parameters().items():
        shape = "x".join(map(str, arr.shape))
        values = " ".join(f"{v:.17g}" for v in arr.ravel())
        lines.append(f"{name} {shape} {values}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path) -> Network:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("layers="):
            raise ContractError(f"{path}: missing layers= header")
        arrays = {}
        for line in fh:
            if not line.strip():
                continue
            name, shape, *values = line.split()
            dims = tuple(int(s) for s in shape.split("x"))
            arrays[name] = np.array([float(v) for v in values], dtype=np.float64).reshape(dims)

    blocks: Dict[str, Tuple[List[DenseLayer], Optional[float]]] = {}
    for tag in header[len("layers="):].split(";"):
        prefix, rest = tag.split(":", 1)
        coef = None
        if "@" in rest:
            rest, c = rest.split("@")
            coef = float(c)
        n_layers = len(rest.split("x")) - 1 if rest else 0
        layers = [DenseLayer(arrays[f"{prefix}.{i}.W"], arrays[f"{prefix}.{i}.b"]) for i in range(n_layers)]
        blocks[prefix] = (layers, coef)
    encoder = blocks.pop("encoder")[0]
    classifier = blocks.pop(CLASSIFIER)[0]
    return Network(
        encoder,
        classifier,
        {k: v[0] for k, v in blocks.items()},
        {k: v[1] for k, v in blocks.items()},
    )
