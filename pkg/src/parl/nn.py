"""Layer stacks with per-layer output taps, Adam, and checkpoint files.

A model is a :class:`ModelSpec` (architecture) plus :class:`ModelParams`
(weights). Forward passes run on the autodiff tape so that input gradients of
intermediate layers can be differentiated again with respect to parameters.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .exceptions import ContractViolation, NumericalFault, ParseError, VersionError

ACTIVATIONS = ("relu", "tanh", "identity")

CHECKPOINT_MAGIC = b"PARL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    activation: str = "relu"
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    activation: str = "relu"
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class Normalize:
    """Fixed affine input standardisation ``(x - mean) / std``, broadcast per feature or channel."""

    mean: tuple = (0.5,)
    std: tuple = (0.25,)
    kind: str = field(default="normalize", init=False)

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in np.atleast_1d(self.mean)))
        object.__setattr__(self, "std", tuple(float(s) for s in np.atleast_1d(self.std)))
        if any(s <= 0 for s in self.std):
            raise ContractViolation("normalize std must be positive")

    def arrays(self, shape):
        mean, std = np.asarray(self.mean), np.asarray(self.std)
        if len(shape) == 3:
            mean, std = mean.reshape(-1, 1, 1), std.reshape(-1, 1, 1)
        return mean, std


@dataclass(frozen=True)
class Flatten:
    kind: str = field(default="flatten", init=False)


@dataclass(frozen=True)
class AvgPool:
    kernel_size: int = 2
    kind: str = field(default="avgpool", init=False)


_LAYER_TYPES = {"dense": Dense, "conv2d": Conv2d, "flatten": Flatten, "avgpool": AvgPool,
                "normalize": Normalize}


def layer_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _LAYER_TYPES:
        raise ContractViolation(f"unknown layer kind {kind!r}")
    return _LAYER_TYPES[kind](**d)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a layer stack.

    ``tap_layers`` are indices into ``layers`` whose post-activation outputs
    are exposed as hidden-layer taps, in order.
    """

    input_shape: tuple
    layers: tuple
    num_classes: int
    tap_layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        self.validate()

    def validate(self):
        shapes = self.layer_output_shapes()
        if shapes[-1] != (self.num_classes,):
            raise ContractViolation(
                f"final layer outputs {shapes[-1]}, expected ({self.num_classes},)")
        taps = self.tap_layers
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ContractViolation("tap_layers must be strictly increasing")
        if taps and (taps[0] < 0 or taps[-1] >= len(self.layers)):
            raise ContractViolation("tap layer index out of range")

    def layer_output_shapes(self):
        """Per-example output shape of every layer (shape calculus)."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ContractViolation(f"layer {i}: dense expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ContractViolation(f"layer {i}: conv2d expects {layer.in_channels} channels, got {shape}")
                k, s, p = layer.kernel_size, layer.stride, layer.padding
                h = (shape[1] + 2 * p - k) // s + 1
                w = (shape[2] + 2 * p - k) // s + 1
                if h < 1 or w < 1:
                    raise ContractViolation(f"layer {i}: kernel larger than input")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, Normalize):
                n_stats = shape[0]
                if len(layer.mean) not in (1, n_stats) or len(layer.std) not in (1, n_stats):
                    raise ContractViolation(f"layer {i}: normalize statistics do not fit {shape}")
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, AvgPool):
                k = layer.kernel_size
                if len(shape) != 3 or shape[1] % k or shape[2] % k:
                    raise ContractViolation(f"layer {i}: avgpool {k} does not fit {shape}")
                shape = (shape[0], shape[1] // k, shape[2] // k)
            else:
                raise ContractViolation(f"layer {i}: unknown layer {layer!r}")
            if getattr(layer, "activation", "identity") not in ACTIVATIONS:
                raise ContractViolation(f"layer {i}: unknown activation {layer.activation!r}")
            shapes.append(shape)
        return shapes

    def tap_sizes(self):
        """Number of output features D(L_k) of each tap."""
        shapes = self.layer_output_shapes()
        return [int(np.prod(shapes[t])) for t in self.tap_layers]

    def parameter_shapes(self):
        shapes = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes[f"{i}.W"] = (layer.in_features, layer.out_features)
                shapes[f"{i}.b"] = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                k = layer.kernel_size
                shapes[f"{i}.W"] = (layer.out_channels, layer.in_channels, k, k)
                shapes[f"{i}.b"] = (layer.out_channels,)
        return shapes

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [asdict(layer) for layer in self.layers],
            "num_classes": self.num_classes,
            "tap_layers": list(self.tap_layers),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=tuple(layer_from_dict(l) for l in d["layers"]),
            num_classes=int(d["num_classes"]),
            tap_layers=tuple(d.get("tap_layers", ())),
        )

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def with_taps(self, tap_layers):
        return replace(self, tap_layers=tuple(tap_layers))


def mlp_spec(sizes, activation="relu", tap_layers=None, normalize=None):
    """Dense stack with the given layer widths; taps default to every hidden dense layer.

    ``normalize`` is an optional ``(mean, std)`` pair prepended as a fixed
    :class:`Normalize` layer.
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ContractViolation("an MLP needs at least input and output sizes")
    layers = [Normalize(*normalize)] if normalize is not None else []
    first = len(layers)
    layers += [
        Dense(sizes[i], sizes[i + 1], activation if i < len(sizes) - 2 else "identity")
        for i in range(len(sizes) - 1)
    ]
    if tap_layers is None:
        tap_layers = range(first, len(layers) - 1)
    return ModelSpec((sizes[0],), tuple(layers), sizes[-1], tuple(tap_layers))


@dataclass
class ModelParams:
    """Trainable tensors keyed ``"<layer>.W"`` / ``"<layer>.b"``."""

    tensors: dict
    init_seed: int = 0

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.init_seed)

    def check(self, spec):
        expected = spec.parameter_shapes()
        if list(expected) != list(self.tensors) or any(
            self.tensors[k].shape != s for k, s in expected.items()
        ):
            raise ContractViolation("parameters do not match the model spec")
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise NumericalFault(f"parameter {k} is not finite")


def init_params(spec, seed):
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
            continue
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(tensors, int(seed))


def _activate(z, name):
    if name == "relu":
        return ad.relu(z)
    if name == "tanh":
        return ad.tanh(z)
    return z


def _as_nodes(params):
    if isinstance(params, ModelParams):
        return {k: ad.constant(v) for k, v in params.tensors.items()}
    return params


def forward_all(spec, params, x):
    """Outputs of every layer, in order. ``params`` may be ModelParams or a dict of nodes."""
    nodes = _as_nodes(params)
    h = ad.constant(x)
    if h.shape[1:] != spec.input_shape:
        raise ContractViolation(f"input batch shape {h.shape} does not match {spec.input_shape}")
    outputs = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            h = _activate(ad.add(ad.matmul(h, nodes[f"{i}.W"]), nodes[f"{i}.b"]), layer.activation)
        elif isinstance(layer, Conv2d):
            h = ad.conv2d(h, nodes[f"{i}.W"], nodes[f"{i}.b"], layer.stride, layer.padding)
            h = _activate(h, layer.activation)
        elif isinstance(layer, Normalize):
            mean, std = layer.arrays(spec.input_shape if i == 0 else h.shape[1:])
            h = ad.div(ad.sub(h, mean), std)
        elif isinstance(layer, Flatten):
            h = ad.flatten(h)
        elif isinstance(layer, AvgPool):
            h = ad.avgpool2d(h, layer.kernel_size)
        outputs.append(h)
    return outputs


def forward_with_taps(spec, params, x):
    """Return ``(logits, taps)`` for a batch ``x``; taps are post-activation outputs."""
    outputs = forward_all(spec, params, x)
    return outputs[-1], [outputs[t] for t in spec.tap_layers]


def predict_logits(spec, params, x):
    with ad.no_grad():
        return forward_all(spec, params, x)[-1].value


# Incremented once per input-gradient backward pass.
input_gradient_calls = 0


def reset_input_gradient_counter():
    global input_gradient_calls
    input_gradient_calls = 0


def tap_input_gradients(spec, params, x, n_taps=None, create_graph=False):
    """Input gradients of the summed output of each of the first ``n_taps`` taps.

    ``x`` is a batch. Examples do not interact, so the gradient of the
    batch-wide sum gives every example's own gradient in a single backward
    pass per tap. Returns ``(logits, gradients)``; with ``create_graph`` the
    gradients are nodes differentiable w.r.t. ``params``.
    """
    global input_gradient_calls
    n_taps = len(spec.tap_layers) if n_taps is None else n_taps
    if n_taps > len(spec.tap_layers):
        raise ContractViolation(f"requested {n_taps} taps, spec has {len(spec.tap_layers)}")
    xn = x if isinstance(x, ad.Node) and x.requires_grad else ad.variable(np.asarray(x, dtype=np.float64))
    logits, taps = forward_with_taps(spec, params, xn)
    grads = []
    for tap in taps[:n_taps]:
        grads.append(ad.grad(ad.sum(tap), xn, create_graph=create_graph))
        input_gradient_calls += 1
    return logits, grads


def layer_input_gradient(spec, params, x, k, create_graph=False):
    """Gradient w.r.t. ``x`` of the sum over output features of tap ``k``.

    ``x`` may be a single example (shape ``spec.input_shape``) or a batch.
    """
    if not 0 <= k < len(spec.tap_layers):
        raise ContractViolation(f"tap index {k} out of range")
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == spec.input_shape
    batch = x[None] if single else x
    sub = spec.with_taps(spec.tap_layers[k:k + 1])
    _, (g,) = tap_input_gradients(sub, params, batch, 1, create_graph)
    if single:
        return ad.reshape(g, spec.input_shape) if create_graph else g[0]
    return g


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper):
        tensors = params.tensors if isinstance(params, ModelParams) else params
        return cls({k: np.zeros_like(v) for k, v in tensors.items()},
                   {k: np.zeros_like(v) for k, v in tensors.items()}, **hyper)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not modified."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFault(f"non-finite gradient for parameter {k}")
        if g.shape != params.tensors[k].shape:
            raise ContractViolation(f"gradient shape mismatch for {k}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return ModelParams(new_p, params.init_seed), replace(state, m=new_m, v=new_v, t=t)


# ----------------------------------------------------------------------------
# Checkpoint files
#
#   magic "PARL" | u32 version | 32-byte spec digest | i64 init seed | u32 count
#   then per tensor: u32 rank | rank x u32 dims | little-endian float64 data
# ----------------------------------------------------------------------------

NULL_DIGEST = bytes(32)


def save_tensors(path, tensors, digest=NULL_DIGEST, seed=0):
    if len(digest) != 32:
        raise ContractViolation("digest must be 32 bytes")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), digest,
              struct.pack("<qI", int(seed), len(tensors))]
    for t in tensors:
        t = np.array(t, dtype="<f8", order="C")
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(t.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise ParseError(f"truncated file while reading {what}", offset)
    return buf[offset:offset + n], offset + n


def load_tensors(path):
    """Read a tensor file. Returns ``(tensors, digest, seed)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, off = _take(buf, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ParseError("bad magic bytes", 0)
    raw, off = _take(buf, off, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", 4)
    digest, off = _take(buf, off, 32, "spec digest")
    raw, off = _take(buf, off, 12, "header")
    seed, count = struct.unpack("<qI", raw)
    tensors = []
    for i in range(count):
        raw, off = _take(buf, off, 4, f"rank of tensor {i}")
        (rank,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, 4 * rank, f"dims of tensor {i}")
        dims = struct.unpack(f"<{rank}I", raw)
        n = int(np.prod(dims)) if rank else 1
        raw, off = _take(buf, off, 8 * n, f"data of tensor {i}")
        tensors.append(np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64))
    if off != len(buf):
        raise ParseError("trailing bytes after last tensor", off)
    return tensors, digest, seed


def save_params(path, spec, params):
    params.check(spec)
    save_tensors(path, list(params.tensors.values()), spec.digest(), params.init_seed)


def load_params(path, spec):
    """Load parameters for ``spec``; the file's spec digest must match."""
    tensors, digest, seed = load_tensors(path)
    if digest != spec.digest():
        raise ContractViolation(f"checkpoint {path} was written for a different model spec")
    names = list(spec.parameter_shapes())
    if len(names) != len(tensors):
        raise ContractViolation(f"checkpoint {path} holds {len(tensors)} tensors, expected {len(names)}")
    params = ModelParams(dict(zip(names, tensors)), seed)
    params.check(spec)
    return params
