"""Shared oracles for the test suite."""
from pathlib import Path

import numpy as np

from awmlab.data import generate_synthetic

FD_STEP = 1e-3
FD_TOL = 1e-4
FIXTURES = Path(__file__).parent / "fixtures"

# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def numeric_grad(f, x, h=FD_STEP):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Max abs difference scaled by the larger gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def away_from_zero(rng, shape, margin=0.05):
    """Normal samples pushed at least ``margin`` from zero, so no kink sits within an FD step."""
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + margin, x - margin)


def byte_loop_idx(path):
    """Independent IDX reader: one byte at a time, no numpy."""
    raw = Path(path).read_bytes()
    assert raw[0] == 0 and raw[1] == 0 and raw[2] == 8
    ndim = raw[3]
    dims = []
    pos = 4
    for _ in range(ndim):
        v = 0
        for _ in range(4):
            v = (v << 8) | raw[pos]
            pos += 1
        dims.append(v)
    count = 1
    for d in dims:
        count *= d
    return dims, [raw[pos + i] for i in range(count)]


def tiny_dataset(classes=4, per_class=12, size=8, seed=0):
    return generate_synthetic(classes, per_class, size, seed=seed)


def tiny_config_dict(out_dir, **over):
    """A harness config that trains and defends in a few seconds."""
    d = {
        "name": "tiny",
        "dataset": {"source": "synthetic", "classes": 4, "per_class": 40, "image_size": 8, "seed": 0},
        "train_per_class": 20,
        "pool_per_class": 5,
        "model": "small_cnn",
        "train": {"epochs": 4, "lr": 0.01, "batch_size": 32},
        "poison": {"triggers": ["badnets-square"], "rate": 0.1, "policy": "all_to_one", "target": 1, "seed": 0},
        "defenses": ["awm"],
        "awm": {"epochs": 2, "inner_steps": 2},
        "seeds": [0],
        "out_dir": str(out_dir),
    }
    d.update(over)
    return d


# ------------------------------------------------------------ gradient cases
#
# Each case maps an rng to (arrays, loss). ``arrays`` holds float64 leaves;
# ``loss`` turns a dict of Tensors into a scalar Tensor. Inputs are drawn away
# from kinks (relu at 0, clamp bounds, max-pool ties) so central differences
# with h=1e-3 stay on one smooth piece.

def _weighted_sum(out, rng_weights):
    from awmlab import tensor as T
    return T.tsum(T.mul(out, rng_weights))


def _case(arrays, body, out_shape_rng):
    from awmlab.tensor import Tensor
    weights = {}

    def loss(ts):
        out = body(ts)
        if out.data.size == 1:
            return out
        if "r" not in weights:
            weights["r"] = Tensor(out_shape_rng.standard_normal(out.shape), dtype=np.float64)
        return _weighted_sum(out, weights["r"])
    return arrays, loss


def gradient_cases():
    from awmlab import tensor as T

    def dense(rng):
        a = {"x": rng.standard_normal((4, 5)), "w": rng.standard_normal((3, 5)), "b": rng.standard_normal(3)}
        return _case(a, lambda t: T.linear(t["x"], t["w"], t["b"]), rng)

    def conv2d(rng):
        a = {"x": rng.standard_normal((2, 2, 5, 5)), "w": rng.standard_normal((3, 2, 3, 3)),
             "b": rng.standard_normal(3)}
        return _case(a, lambda t: T.conv2d(t["x"], t["w"], t["b"]), rng)

    def batchnorm_train(rng):
        a = {"x": rng.standard_normal((3, 2, 3, 3)), "gamma": rng.uniform(0.5, 1.5, 2),
             "beta": rng.standard_normal(2)}
        return _case(a, lambda t: T.batchnorm2d_train(t["x"], t["gamma"], t["beta"])[0], rng)

    def batchnorm_eval(rng):
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2.0, 2)
        a = {"x": rng.standard_normal((3, 2, 3, 3)), "gamma": rng.uniform(0.5, 1.5, 2),
             "beta": rng.standard_normal(2)}
        return _case(a, lambda t: T.batchnorm2d_eval(t["x"], t["gamma"], t["beta"], rm, rv), rng)

    def maxpool(rng):
        vals = rng.permutation(2 * 2 * 4 * 4).astype(np.float64) * 0.1
        return _case({"x": vals.reshape(2, 2, 4, 4)}, lambda t: T.maxpool2x2(t["x"]), rng)

    def relu(rng):
        return _case({"x": away_from_zero(rng, (4, 6))}, lambda t: T.relu(t["x"]), rng)

    def elu(rng):
        return _case({"x": away_from_zero(rng, (4, 6))}, lambda t: T.elu(t["x"], 1.0), rng)

    def dropout(rng):
        seed = int(rng.integers(1 << 30))
        return _case({"x": rng.standard_normal((4, 6))},
                     lambda t: T.dropout(t["x"], 0.3, np.random.default_rng(seed)), rng)

    def flatten(rng):
        return _case({"x": rng.standard_normal((2, 3, 2, 2))}, lambda t: T.reshape(t["x"], (2, -1)), rng)

    def cross_entropy(rng):
        labels = rng.integers(0, 4, size=5)
        return _case({"z": rng.standard_normal((5, 4)) * 2}, lambda t: T.cross_entropy(t["z"], labels), rng)

    def clamp(rng):
        x = rng.uniform(-0.5, 1.5, (4, 5))
        x = np.where(np.abs(x) < 0.05, x + 0.1, x)
        x = np.where(np.abs(x - 1) < 0.05, x + 0.1, x)
        return _case({"x": x}, lambda t: T.clamp(t["x"], 0.0, 1.0), rng)

    def elementwise(rng):
        a = {"a": away_from_zero(rng, (3, 4)), "b": rng.standard_normal((1, 4))}
        return _case(a, lambda t: T.add(T.mul(T.square(t["a"]), t["b"]),
                                        T.sub(T.tabs(t["a"]), T.mul(t["b"], 2.0))), rng)

    def reductions(rng):
        a = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}
        return _case(a, lambda t: T.add(T.l2_norm(T.matmul(t["a"], t["b"])),
                                        T.mean(T.tsum(t["a"], axis=1))), rng)

    return {"dense": dense, "conv2d": conv2d, "batchnorm2d_train": batchnorm_train,
            "batchnorm2d_eval": batchnorm_eval, "maxpool2x2": maxpool, "relu": relu, "elu": elu,
            "dropout": dropout, "flatten": flatten, "cross_entropy": cross_entropy, "clamp": clamp,
            "elementwise": elementwise, "reductions": reductions}


def check_case(arrays, loss):
    """Worst relative error over every leaf of a gradient case."""
    from awmlab.tensor import Tensor

    leaves = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in arrays.items()}
    loss(leaves).backward()
    worst = 0.0

    def f():
        return loss({k: Tensor(v, dtype=np.float64) for k, v in arrays.items()}).item()

    for k, v in arrays.items():
        worst = max(worst, rel_error(leaves[k].grad, numeric_grad(f, v)))
    return worst


def tiny_fd_model(rng):
    """float64 conv-BN-ELU-pool-dense net (69 parameters) with random BN statistics."""
    from awmlab.models import LayerSpec, ModelSpec, act, build_model, conv, dense
    spec = ModelSpec([conv(1, 2), LayerSpec("batchnorm2d", 2), act("elu"), LayerSpec("maxpool2x2"),
                      LayerSpec("flatten"), dense(8, 3)], (1, 4, 4), 3)
    model, _ = build_model(spec, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    model.buffers["1.running_mean"] = rng.standard_normal(2) * 0.1
    model.buffers["1.running_var"] = rng.uniform(0.5, 1.5, 2)
    for _, t in model.params:
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    return model


POOL_MARGIN = 1e-2


def pool_gap(model, x, mask=None):
    """Smallest top-two gap over the 2x2 windows feeding the first max-pool."""
    from awmlab.tensor import Tensor
    h = Tensor(x, dtype=model.dtype)
    for i, layer in enumerate(model.layers):
        if layer.kind == "maxpool2x2":
            n, c, hh, ww = h.shape
            win = np.sort(h.data.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                          .reshape(-1, 4), axis=1)
            return float((win[:, 3] - win[:, 2]).min())
        h = model._layer_forward(i, layer, h, mask.tensors(model.dtype) if mask else {}, {}, False, None)
    return np.inf


def model_grad_errors(rng):
    """Relative FD errors of cross-entropy through a masked model w.r.t. theta, m and x."""
    from awmlab import tensor as T
    from awmlab.models import masked_forward
    from awmlab.tensor import Tensor

    while True:
        model = tiny_fd_model(rng)
        x = rng.uniform(0, 1, (3, 1, 4, 4))
        mask = model.new_mask()
        mask.values = rng.uniform(0.2, 1.0, len(mask))
        if pool_gap(model, x, mask) > POOL_MARGIN:
            break
    y = rng.integers(0, 3, 3)

    def loss_value():
        return T.cross_entropy(masked_forward(model, mask, Tensor(x, dtype=np.float64)), y).item()

    model.params.requires_grad_(True)
    mt = mask.tensors(np.float64, requires_grad=True)
    xt = Tensor(x, requires_grad=True, dtype=np.float64)
    T.cross_entropy(masked_forward(model, mask, xt, mt), y).backward()
    errs = {}
    theta = [rel_error(t.grad, numeric_grad(loss_value, t.data)) for _, t in model.params]
    model.params.requires_grad_(False)
    errs["theta"] = max(theta)
    errs["m"] = rel_error(mask.gather_grad(mt), numeric_grad(loss_value, mask.values))
    errs["x"] = rel_error(xt.grad, numeric_grad(loss_value, x))
    return errs
