"""Small maskable architectures.

A model is a flat list of layers. Dense and conv2d weights are maskable;
biases and batch-norm parameters are not. The same forward pass serves plain
evaluation, weight-masked evaluation (``mask * weight``) and neuron-perturbed
evaluation for adversarial neuron pruning.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ContractError, DimensionError, SpecError, TrainingError
from .optim import AdamState, adam_step, sgd_step
from .tensor import ParamSet, Tensor

LAYER_KINDS = ("dense", "conv2d", "batchnorm2d", "maxpool2x2", "dropout", "flatten", "activation")


@dataclass
class LayerSpec:
    kind: str
    in_size: int | None = None     # in_features / in_channels
    out_size: int | None = None    # out_features / out_channels
    rate: float = 0.0              # dropout
    activation: str = "relu"       # relu | elu
    alpha: float = 1.0             # elu
    maskable: bool = False
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.maskable and self.kind not in ("dense", "conv2d"):
            raise SpecError(f"{self.kind} layers cannot be maskable")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def dense(i, o, maskable=True, bias=True):
    return LayerSpec("dense", i, o, maskable=maskable, bias=bias)


def conv(i, o, maskable=True):
    return LayerSpec("conv2d", i, o, maskable=maskable)


def act(name="relu", alpha=1.0):
    return LayerSpec("activation", activation=name, alpha=alpha)


@dataclass
class ModelSpec:
    layers: list
    input_shape: tuple
    classes: int

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def shapes(self):
        """Per-sample output shape of every layer; raises SpecError on mismatch."""
        if self.classes < 2:
            raise SpecError("a model needs at least two classes")
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k == "dense":
                if len(shape) != 1 or shape[0] != layer.in_size:
                    raise SpecError(f"layer {i} (dense) expects ({layer.in_size},), receives {shape}")
                shape = (layer.out_size,)
            elif k == "conv2d":
                if len(shape) != 3 or shape[0] != layer.in_size:
                    raise SpecError(f"layer {i} (conv2d) expects {layer.in_size} channels, receives {shape}")
                shape = (layer.out_size, shape[1], shape[2])
            elif k == "batchnorm2d":
                if len(shape) != 3 or (layer.in_size is not None and shape[0] != layer.in_size):
                    raise SpecError(f"layer {i} (batchnorm2d) cannot follow shape {shape}")
            elif k == "maxpool2x2":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise SpecError(f"layer {i} (maxpool2x2) needs even spatial dims, receives {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            out.append(shape)
        if shape != (self.classes,):
            raise SpecError(f"final layer yields {shape}, expected ({self.classes},)")
        return out

    def to_dict(self):
        return {"layers": [l.to_dict() for l in self.layers],
                "input_shape": list(self.input_shape), "classes": self.classes}

    @classmethod
    def from_dict(cls, d):
        return cls(d["layers"], tuple(d["input_shape"]), int(d["classes"]))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# -------------------------------------------------------------------- zoo

def mlp_spec(input_shape, classes, hidden=32):
    flat = int(np.prod(input_shape))
    layers = [LayerSpec("flatten")] if len(input_shape) > 1 else []
    layers += [dense(flat, hidden), act("relu"), dense(hidden, classes)]
    return ModelSpec(layers, input_shape, classes)


def small_cnn_spec(input_shape, classes, widths=(8, 16)):
    c, h, w = input_shape
    a, b = widths
    layers = [conv(c, a), act("relu"), LayerSpec("maxpool2x2"),
              conv(a, b), act("relu"), LayerSpec("maxpool2x2"),
              LayerSpec("flatten"), dense(b * (h // 4) * (w // 4), classes)]
    return ModelSpec(layers, input_shape, classes)


def vgg_mini_spec(input_shape, classes, widths=(8, 16, 32), dropout=(0.2, 0.3, 0.4)):
    """Three blocks of (conv-BN-ELU) x2, 2x2 max-pool, dropout; then a classifier."""
    c, h, w = input_shape
    layers = []
    prev = c
    for width, p in zip(widths, dropout):
        for _ in range(2):
            layers += [conv(prev, width), LayerSpec("batchnorm2d", width), act("elu", 1.0)]
            prev = width
        layers += [LayerSpec("maxpool2x2"), LayerSpec("dropout", rate=p)]
    layers += [LayerSpec("flatten"), dense(prev * (h // 8) * (w // 8), classes)]
    return ModelSpec(layers, input_shape, classes)


VGG_FULL_WIDTHS = (32, 64, 128)


def vgg_full_spec(input_shape, classes):
    return vgg_mini_spec(input_shape, classes, widths=VGG_FULL_WIDTHS)


ZOO = {"mlp": mlp_spec, "small_cnn": small_cnn_spec, "vgg_mini": vgg_mini_spec, "vgg_full": vgg_full_spec}


# ------------------------------------------------------------- mask/neurons

@dataclass
class MaskState:
    """Soft weight mask in [0, 1], one entry per maskable weight."""

    values: np.ndarray
    layer_index_map: np.ndarray
    layout: list  # (layer_index, start, stop, weight_shape)

    @classmethod
    def ones(cls, layout):
        total = layout[-1][2] if layout else 0
        owners = np.zeros(total, dtype=np.int64)
        for li, a, b, _ in layout:
            owners[a:b] = li
        return cls(np.ones(total, dtype=np.float64), owners, list(layout))

    def __len__(self):
        return self.values.size

    def copy(self):
        return MaskState(self.values.copy(), self.layer_index_map.copy(), list(self.layout))

    def layers(self):
        return [li for li, *_ in self.layout]

    def layer_values(self, layer_index):
        for li, a, b, _ in self.layout:
            if li == layer_index:
                return self.values[a:b]
        raise KeyError(layer_index)

    def tensors(self, dtype=np.float32, requires_grad=False):
        return OrderedDict(
            (li, Tensor(self.values[a:b].reshape(shape).astype(dtype), requires_grad=requires_grad))
            for li, a, b, shape in self.layout)

    def gather_grad(self, tensors):
        out = np.zeros(self.values.size, dtype=np.float64)
        for li, a, b, _ in self.layout:
            t = tensors[li]
            if t.grad is not None:
                out[a:b] = t.grad.reshape(-1)
        return out

    def clip_(self):
        np.clip(self.values, 0.0, 1.0, out=self.values)
        return self

    def l1(self):
        return float(np.abs(self.values).sum())

    def to_entries(self):
        return OrderedDict((f"mask.{li}", self.values[a:b].reshape(shape).astype(np.float32))
                           for li, a, b, shape in self.layout)

    @classmethod
    def from_entries(cls, entries, layout):
        mask = cls.ones(layout)
        for li, a, b, shape in layout:
            arr = np.asarray(entries[f"mask.{li}"])
            if arr.shape != tuple(shape):
                raise DimensionError(f"mask.{li} has shape {arr.shape}, model expects {tuple(shape)}")
            mask.values[a:b] = arr.reshape(-1)
        return mask


@dataclass
class NeuronSite:
    host: int    # dense/conv layer the neuron belongs to
    site: int    # layer whose parameters get scaled (host, or the BN right after it)
    start: int
    stop: int

    @property
    def n(self):
        return self.stop - self.start


@dataclass
class NeuronPerturbation:
    """Per-neuron multiplicative factors for weights (delta) and biases (xi)."""

    delta: np.ndarray
    xi: np.ndarray
    epsilon: float
    sites: list = field(default_factory=list)

    @classmethod
    def zeros(cls, sites, epsilon):
        n = sites[-1].stop if sites else 0
        return cls(np.zeros(n), np.zeros(n), float(epsilon), list(sites))

    @property
    def neuron_count(self):
        return self.delta.size

    def check(self):
        tol = 1e-12
        if np.any(np.abs(self.delta) > self.epsilon + tol) or np.any(np.abs(self.xi) > self.epsilon + tol):
            raise ContractError(f"neuron perturbation leaves [-{self.epsilon}, {self.epsilon}]")

    def project_(self):
        np.clip(self.delta, -self.epsilon, self.epsilon, out=self.delta)
        np.clip(self.xi, -self.epsilon, self.epsilon, out=self.xi)
        return self


# ------------------------------------------------------------------- model

class Model:
    def __init__(self, spec: ModelSpec, params: ParamSet, buffers=None, dtype=np.float32):
        self.spec = spec
        self.params = params
        self.buffers = buffers if buffers is not None else OrderedDict()
        self.dtype = np.dtype(dtype)
        self.out_shapes = spec.shapes() if spec.layers else []
        self.mask_layout = self._mask_layout()
        self.neuron_sites = self._neuron_sites()

    @property
    def layers(self):
        return self.spec.layers

    @property
    def classes(self):
        return self.spec.classes

    def _mask_layout(self):
        layout, off = [], 0
        for i, layer in enumerate(self.layers):
            if layer.maskable:
                w = self.params[f"{i}.weight"]
                layout.append((i, off, off + w.size, w.shape))
                off += w.size
        return layout

    def _neuron_sites(self):
        hosts = [i for i, l in enumerate(self.layers) if l.kind in ("dense", "conv2d")]
        sites, off = [], 0
        for i in hosts[:-1]:  # the classifier's logits are not prunable neurons
            n = self.layers[i].out_size
            site = i + 1 if i + 1 < len(self.layers) and self.layers[i + 1].kind == "batchnorm2d" else i
            sites.append(NeuronSite(i, site, off, off + n))
            off += n
        return sites

    def new_mask(self):
        return MaskState.ones(self.mask_layout)

    def maskable_param_count(self):
        return self.mask_layout[-1][2] if self.mask_layout else 0

    def copy(self):
        bufs = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return Model(self.spec, self.params.copy(), bufs, self.dtype)

    def astype(self, dtype):
        params = ParamSet((n, Tensor(t.data.astype(dtype), dtype=dtype)) for n, t in self.params)
        return Model(self.spec, params, OrderedDict(self.buffers), dtype)

    # checkpoints
    def state_entries(self):
        entries = OrderedDict((n, t.data) for n, t in self.params)
        entries.update(self.buffers)
        return entries

    def save(self, path):
        checkpoint.save(path, self.state_entries())

    def load_entries(self, entries):
        for n, t in self.params:
            if n not in entries:
                raise DimensionError(f"checkpoint lacks parameter {n!r}")
            arr = np.asarray(entries[n])
            if arr.shape != t.shape:
                raise DimensionError(f"{n}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.astype(self.dtype)
        for n in self.buffers:
            self.buffers[n] = np.asarray(entries[n], dtype=np.float64)
        return self

    @classmethod
    def load(cls, spec, path, dtype=np.float32):
        model, _ = build_model(spec, seed=0, dtype=dtype)
        return model.load_entries(checkpoint.load(path))

    # forward
    def forward(self, x, mask=None, neuron=None, train=False, rng=None):
        """Run the network.

        ``mask`` maps maskable layer index -> Tensor shaped like that weight.
        ``neuron`` maps site layer index -> (weight_scale, bias_scale) Tensors of
        length n, scaling each neuron's weight row (or BN scale) and bias (or BN
        shift).
        """
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if self.spec.layers and h.shape[1:] != self.spec.input_shape:
            raise DimensionError(f"layer 0 ({self.layers[0].kind}) expects input {self.spec.input_shape}, got {h.shape[1:]}")
        mask = mask or {}
        neuron = neuron or {}
        for i, layer in enumerate(self.layers):
            try:
                h = self._layer_forward(i, layer, h, mask, neuron, train, rng)
            except DimensionError as exc:
                raise DimensionError(f"layer {i} ({layer.kind}): {exc}") from None
        return h

    __call__ = forward

    def _layer_forward(self, i, layer, h, mask, neuron, train, rng):
        kind = layer.kind
        if kind in ("dense", "conv2d"):
            w = self.params[f"{i}.weight"]
            b = self.params[f"{i}.bias"] if layer.bias else None
            if i in mask:
                w = T.mul(mask[i], w)
            if i in neuron:
                ws, bs = neuron[i]
                tail = (1,) * (w.data.ndim - 1)
                w = T.mul(w, T.reshape(ws, (ws.shape[0],) + tail))
                if b is not None:
                    b = T.mul(b, bs)
            if kind == "dense":
                return T.linear(h, w, b)
            return T.conv2d(h, w, b, padding=1)
        if kind == "batchnorm2d":
            g = self.params[f"{i}.gamma"]
            be = self.params[f"{i}.beta"]
            if i in neuron:
                ws, bs = neuron[i]
                g = T.mul(g, ws)
                be = T.mul(be, bs)
            if train:
                out, mu, var = T.batchnorm2d_train(h, g, be)
                n = h.shape[0] * h.shape[2] * h.shape[3]
                unbiased = var * n / max(n - 1, 1)
                self.buffers[f"{i}.running_mean"] = 0.9 * self.buffers[f"{i}.running_mean"] + 0.1 * mu
                self.buffers[f"{i}.running_var"] = 0.9 * self.buffers[f"{i}.running_var"] + 0.1 * unbiased
                return out
            return T.batchnorm2d_eval(h, g, be, self.buffers[f"{i}.running_mean"],
                                      self.buffers[f"{i}.running_var"])
        if kind == "maxpool2x2":
            return T.maxpool2x2(h)
        if kind == "flatten":
            return T.reshape(h, (h.shape[0], -1))
        if kind == "dropout":
            return T.dropout(h, layer.rate, rng) if train else h
        if layer.activation == "relu":
            return T.relu(h)
        if layer.activation == "elu":
            return T.elu(h, layer.alpha)
        raise SpecError(f"unknown activation {layer.activation!r}")

    def predict(self, images, mask=None, batch_size=512):
        mask_t = mask.tensors(self.dtype) if mask is not None else None
        preds = []
        for s in range(0, len(images), batch_size):
            logits = self.forward(images[s:s + batch_size], mask=mask_t)
            preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def build_model(spec: ModelSpec, seed=0, dtype=np.float32):
    """He-normal weights, zero biases, unit BN scale; returns (model, all-ones mask)."""
    spec.shapes()
    rng = np.random.default_rng(seed)
    params = ParamSet()
    buffers = OrderedDict()
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            w = rng.standard_normal((layer.out_size, layer.in_size)) * np.sqrt(2.0 / layer.in_size)
            params.add(f"{i}.weight", Tensor(w, dtype=dtype))
            if layer.bias:
                params.add(f"{i}.bias", Tensor(np.zeros(layer.out_size), dtype=dtype))
        elif layer.kind == "conv2d":
            fan_in = layer.in_size * 9
            w = rng.standard_normal((layer.out_size, layer.in_size, 3, 3)) * np.sqrt(2.0 / fan_in)
            params.add(f"{i}.weight", Tensor(w, dtype=dtype))
            if layer.bias:
                params.add(f"{i}.bias", Tensor(np.zeros(layer.out_size), dtype=dtype))
        elif layer.kind == "batchnorm2d":
            c = layer.in_size
            params.add(f"{i}.gamma", Tensor(np.ones(c), dtype=dtype))
            params.add(f"{i}.beta", Tensor(np.zeros(c), dtype=dtype))
            buffers[f"{i}.running_mean"] = np.zeros(c)
            buffers[f"{i}.running_var"] = np.ones(c)
    model = Model(spec, params, buffers, dtype)
    return model, model.new_mask()


# ---------------------------------------------------------- forward variants

def forward_eval(model: Model, x):
    return model.forward(x)


def masked_forward(model: Model, mask: MaskState, x, mask_tensors=None):
    if len(mask) != model.maskable_param_count():
        raise DimensionError(f"mask has {len(mask)} entries, model has {model.maskable_param_count()} maskable weights")
    return model.forward(x, mask=mask_tensors if mask_tensors is not None else mask.tensors(model.dtype))


def neuron_tensors(model: Model, pert: NeuronPerturbation, neuron_mask=None, requires_grad=False):
    """Build per-site (weight_scale, bias_scale) tensors.

    Weight scale is ``m + delta`` (``m`` defaults to one), bias scale ``1 + xi``.
    Returns the site dict plus the leaf tensors so callers can read gradients.
    """
    dt = model.dtype
    leaves = {"delta": {}, "xi": {}, "mask": {}}
    sites = {}
    for s in model.neuron_sites:
        d = Tensor(pert.delta[s.start:s.stop].astype(dt), requires_grad=requires_grad)
        xi = Tensor(pert.xi[s.start:s.stop].astype(dt), requires_grad=requires_grad)
        leaves["delta"][s.site], leaves["xi"][s.site] = d, xi
        if neuron_mask is not None:
            m = Tensor(np.asarray(neuron_mask[s.start:s.stop], dtype=dt), requires_grad=requires_grad)
            leaves["mask"][s.site] = m
            sites[s.site] = (T.add(m, d), T.add(xi, 1.0))
        else:
            sites[s.site] = (T.add(d, 1.0), T.add(xi, 1.0))
    return sites, leaves


def neuron_perturbed_forward(model: Model, pert: NeuronPerturbation, neuron_mask, x, weight_mask=None):
    pert.check()
    sites, _ = neuron_tensors(model, pert, neuron_mask)
    wm = weight_mask.tensors(model.dtype) if weight_mask is not None else None
    return model.forward(x, mask=wm, neuron=sites)


# ----------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 64
    optimizer: str = "adam"


def train_model(model: Model, data, epochs=None, config: TrainConfig | None = None, seed=0):
    """Supervised training of every parameter; returns (model, per-epoch mean loss)."""
    config = config or TrainConfig()
    epochs = config.epochs if epochs is None else epochs
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    params = model.params
    params.requires_grad_(True)
    state = AdamState.for_params(params)
    curve = []
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            params.zero_grad()
            loss = T.cross_entropy(model.forward(data.images[idx], train=True, rng=rng), data.labels[idx])
            if not np.isfinite(loss.item()):
                params.requires_grad_(False)
                raise TrainingError("non-finite training loss", epoch=epoch)
            loss.backward()
            flat, grad = params.flat(), params.flat_grad()
            if config.optimizer == "adam":
                flat, state = adam_step(state, flat, grad, config.lr)
            else:
                flat = sgd_step(flat, grad, config.lr)
            params.assign_flat(flat)
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
    params.zero_grad()
    params.requires_grad_(False)
    return model, curve
