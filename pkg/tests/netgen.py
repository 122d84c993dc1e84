"""Random small networks for oracle-equivalence tests."""

import numpy as np

from fprog.model import Hyperparameters, LayerSpec, build_model, infer_layer
from fprog.numerics import dense_backward, dense_forward, gd_update, init_params, max_rel_error
from fprog.systolic import SystolicSimulator

MAX_NODES = 64


def random_model(rng: np.random.Generator, max_layers: int = 4, batch_mode: str = "GD"):
    """Input plus up to ``max_layers - 1`` layers ending in Output, every layer <= 64 nodes."""
    while True:
        c = int(rng.integers(1, 3))
        h = int(rng.integers(2, 7))
        w = int(rng.integers(2, 7))
        if h * w * c <= MAX_NODES:
            break
    shape = (h, w, c)
    layers = [LayerSpec("Input")]
    flat = False
    for _ in range(int(rng.integers(0, max_layers - 1))):
        options = ["fc"] if flat else ["conv", "conv", "pool", "fc"]
        if not flat and min(shape[:2]) < 2:
            options = ["conv", "fc"]
        kind = options[int(rng.integers(len(options)))]
        if kind == "conv":
            f = int(rng.integers(1, min(3, min(shape[:2])) + 1))
            s = int(rng.integers(1, 3))
            pad = "same" if rng.random() < 0.6 else "valid"
            probe = infer_layer(LayerSpec("Conv", f, s, pad, 1, "ReLU"), shape)
            cmax = max(1, MAX_NODES // (probe[0] * probe[1]))
            out_c = int(rng.integers(1, min(cmax, 4) + 1))
            spec = LayerSpec("Conv", f, s, pad, out_c, "ReLU" if rng.random() < 0.7 else "Identity")
        elif kind == "pool":
            s = int(rng.integers(1, 3))
            spec = LayerSpec("MaxPool", 2, s, "valid")
        else:
            spec = LayerSpec("FullyConnected", out_channels=int(rng.integers(2, 17)), activation="ReLU")
            flat = True
        layers.append(spec)
        shape = infer_layer(spec, shape)
    n_out = int(rng.integers(2, 7))
    layers.append(LayerSpec("Output", out_channels=n_out, activation="Softmax" if rng.random() < 0.8 else "Identity"))
    return build_model((h, w, c), layers, Hyperparameters(learning_rate=0.1, batch_mode=batch_mode))


def random_batch(rng: np.random.Generator, model, n: int = 3):
    x = rng.standard_normal((n, *model.input_shape))
    n_out = model.layers[-1].out_channels
    y = np.zeros((n, n_out))
    y[np.arange(n), rng.integers(0, n_out, n)] = 1.0
    return x, y


def check_equivalence(model, seed, n=3):
    """Worst relative deviation of systolic outputs, backward sums and gradients from dense."""
    rng = np.random.default_rng(seed)
    params = init_params(model, seed)
    x, y = random_batch(rng, model, n)
    sim = SystolicSimulator(model, params)
    step = sim.train_step(x, y, model.hyper.learning_rate)
    cache = dense_forward(model, params, x)
    ref = dense_backward(model, params, cache, y)
    errs = [max_rel_error(step.outputs, cache.outputs[-1].reshape(n, -1))]
    for i in range(len(model.layers) - 1):
        errs.append(max_rel_error(step.backward_sums[i], ref.activation_grads[i].reshape(n, -1)))
    for i, g in enumerate(ref.grads):
        if g is not None:
            errs.append(max_rel_error(step.grads[i]["w"], g["w"]))
            errs.append(max_rel_error(step.grads[i]["b"], g["b"]))
    updated = gd_update(params, ref.grads, model.hyper.learning_rate)
    for p_sim, p_ref in zip(sim.params, updated):
        if p_ref is not None:
            errs.append(max_rel_error(p_sim["w"], p_ref["w"]))
            errs.append(max_rel_error(p_sim["b"], p_ref["b"]))
    return max(errs)
