"""Central finite-difference checks for every primitive and for the composed toy network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor, backward, recording

STEP = 1e-5
PRIMITIVE_TOL = 1e-4
DEEP_TOL = 1e-3
# below this magnitude a gradient entry is compared absolutely rather than relatively
REL_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    entries: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} entries={self.entries:<5} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e}"


def _leaf(rng, shape, name, low=None) -> Tensor:
    data = rng.standard_normal(shape)
    if low is not None:
        # keep entries away from kinks so the central difference never straddles one
        data = np.sign(data) * (low + np.abs(data))
    return Tensor(data, name=name, requires_grad=True)


def check_function(name: str, fn: Callable[[list[Tensor]], Tensor], inputs: list[Tensor],
                   rng: np.random.Generator, step: float = STEP, tol: float = PRIMITIVE_TOL) -> CheckResult:
    """Compare tape gradients of ``sum(fn(inputs) * c)`` against central differences.

    ``c`` is a fixed random projection so every output entry contributes.
    """
    c = rng.standard_normal(fn(inputs).shape)

    def scalar() -> float:
        return float(np.sum(fn(inputs).data * c))

    with recording() as tape:
        loss = ops.dot_const(fn(inputs), c)
    backward(tape, loss)
    worst, count = 0.0, 0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = scalar()
            flat[i] = old - step
            down = scalar()
            flat[i] = old
            numeric.flat[i] = (up - down) / (2 * step)
        worst = max(worst, float(rel_error(analytic, numeric).max()))
        count += flat.size
    return CheckResult(name, worst, count, tol)


def _bn(training: bool):
    def fn(ts):
        x, gamma, beta = ts
        c = gamma.shape[0]
        state = ops.BatchNormState(gamma, beta, np.linspace(-0.2, 0.2, c), np.linspace(0.5, 1.5, c),
                                   training=training)
        return ops.batch_norm(x, state)
    return fn


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """Named (function, inputs) pairs covering every differentiable primitive."""
    cases: dict[str, tuple[Callable, list[Tensor]]] = {}

    def conv_case(k, s, bias, cin=2, cout=3, hw=5):
        spec = ops.ConvSpec(cin, cout, k, s, bias)
        ts = [_leaf(rng, (2, cin, hw, hw), "x"), _leaf(rng, spec.weight_shape, "w")]
        if bias:
            ts.append(_leaf(rng, (cout,), "b"))
        return (lambda t: ops.conv2d(t[0], spec, t[1], t[2] if bias else None)), ts

    cases["conv2d/3x3"] = conv_case(3, 1, False)
    cases["conv2d/3x3-stride2"] = conv_case(3, 2, False, hw=6)
    cases["conv2d/1x1-bias"] = conv_case(1, 1, True)
    cases["conv2d/1x1-stride2"] = conv_case(1, 2, False, hw=6)
    bn_in = lambda: [_leaf(rng, (3, 2, 3, 3), "x"), _leaf(rng, (2,), "gamma"), _leaf(rng, (2,), "beta")]
    cases["batch_norm/train"] = (_bn(True), bn_in())
    cases["batch_norm/infer"] = (_bn(False), bn_in())
    cases["relu"] = (lambda t: ops.relu(t[0]), [_leaf(rng, (2, 2, 3, 3), "x", low=1e-2)])
    cases["sum_n"] = (ops.sum_n, [_leaf(rng, (1, 2, 3, 3), f"x{i}") for i in range(3)])
    cases["mul_n"] = (ops.mul_n, [_leaf(rng, (1, 2, 3, 3), f"x{i}") for i in range(3)])
    cases["concat"] = (ops.concat_channels, [_leaf(rng, (1, c, 2, 3), f"x{c}") for c in (1, 2, 3)])
    cases["slice"] = (lambda t: ops.slice_channels(t[0], 1, 3), [_leaf(rng, (1, 4, 2, 2), "x")])
    cases["bilinear_resize/up"] = (lambda t: ops.bilinear_resize(t[0], 7, 6), [_leaf(rng, (1, 2, 3, 3), "x")])
    cases["bilinear_resize/down"] = (lambda t: ops.bilinear_resize(t[0], 2, 3), [_leaf(rng, (1, 2, 4, 6), "x")])
    cases["avg_pool/ceil"] = (lambda t: ops.avg_pool(t[0], 2, 2, ceil_mode=True), [_leaf(rng, (1, 2, 5, 3), "x")])
    # distinct, well-separated values so the argmax cannot flip under the perturbation
    mp = Tensor(rng.permutation(2 * 4 * 4).reshape(1, 2, 4, 4) * 0.1, name="x", requires_grad=True)
    cases["max_pool"] = (lambda t: ops.max_pool(t[0], 2, 2), [mp])
    cases["avg_pool_global"] = (lambda t: ops.avg_pool_global(t[0]), [_leaf(rng, (2, 3, 2, 3), "x")])
    cases["flatten"] = (lambda t: ops.flatten(t[0]), [_leaf(rng, (2, 3, 2, 2), "x")])
    cases["linear"] = (lambda t: ops.linear(t[0], t[1], t[2]),
                       [_leaf(rng, (3, 4), "x"), _leaf(rng, (2, 4), "w"), _leaf(rng, (2,), "b")])
    cases["pad"] = (lambda t: ops.pad_to_multiple(t[0], 4), [_leaf(rng, (1, 1, 3, 5), "x")])
    cases["pad_channels"] = (lambda t: ops.pad_channels(t[0], 5), [_leaf(rng, (1, 2, 2, 3), "x")])
    cases["mean"] = (lambda t: ops.mean(t[0]), [_leaf(rng, (1, 2, 3, 3), "x")])
    cases["scale"] = (lambda t: ops.scale(t[0], -1.7), [_leaf(rng, (1, 2, 2, 2), "x")])
    cases["sub"] = (lambda t: ops.sub(t[0], t[1]), [_leaf(rng, (1, 2, 2, 2), "a"), _leaf(rng, (1, 2, 2, 2), "b")])
    cases["square"] = (lambda t: ops.square(t[0]), [_leaf(rng, (1, 2, 2, 2), "x")])
    labels = rng.integers(0, 3, size=(2, 2, 3))
    labels[0, 0, 0] = 255
    cases["softmax_cross_entropy"] = (lambda t: ops.softmax_cross_entropy(t[0], labels),
                                      [_leaf(rng, (2, 3, 2, 3), "logits")])
    return cases


def check_primitives(seed: int = 0, only: str | None = None) -> list[CheckResult]:
    """Run the primitive suite; ``only`` keeps cases whose name starts with it (e.g. ``conv2d``)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, inputs) in primitive_cases(rng).items():
        if only and not (name == only or name.startswith(only + "/")):
            continue
        results.append(check_function(name, fn, inputs, rng))
    if only and not results:
        raise KeyError(f"no primitive matches {only!r}")
    return results


def _relu_pattern(tape) -> np.ndarray:
    masks = [rec.inputs[0].data > 0 for rec in tape.records if rec.op == "relu"]
    return np.concatenate([m.reshape(-1) for m in masks]) if masks else np.zeros(0, dtype=bool)


def check_deep(seed: int = 0, samples: int = 25, batch: int = 4, step: float = STEP,
               tol: float = DEEP_TOL, min_step: float = 1e-9) -> list[CheckResult]:
    """Sampled parameter gradients of the toy network's heatmap MSE against central differences.

    A composed network has ReLU kinks everywhere; when the +/- probes land on different
    sides of one, the stencil is shrunk tenfold (down to ``min_step``) until both probes
    see the same activation pattern.
    """
    from .builder import build
    from .graph import execute, init_params
    from .tasks import mse_heatmap_loss
    from .training import SyntheticKeypoints, toy_config

    graph = build(toy_config())
    params, buffers = init_params(graph, seed)
    rng = np.random.default_rng(seed + 7)
    data = SyntheticKeypoints()
    images, kps = data.sample(batch, rng)
    x, target = Tensor(images), data.targets(kps)

    def probe() -> tuple[float, np.ndarray]:
        with recording() as t:
            value = mse_heatmap_loss(execute(graph, params, buffers, x, training=True)[0], target).item()
        return value, _relu_pattern(t)

    with recording() as tape:
        loss = mse_heatmap_loss(execute(graph, params, buffers, x, training=True)[0], target)
    grads = backward(tape, loss)

    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names])
    picks = rng.choice(int(sizes.sum()), size=samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    results = []
    for flat_idx in sorted(picks):
        which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name, i = names[which], int(flat_idx - offsets[which])
        flat = params[name].data.reshape(-1)
        old = flat[i]
        h = step
        while True:
            flat[i] = old + h
            up, mask_up = probe()
            flat[i] = old - h
            down, mask_down = probe()
            flat[i] = old
            if np.array_equal(mask_up, mask_down) or h / 10 < min_step:
                break
            h /= 10
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name].reshape(-1)[i])
        err = float(rel_error(analytic, numeric))
        label = f"{name}[{i}]" if h == step else f"{name}[{i}] h={h:.0e}"
        results.append(CheckResult(label, err, 1, tol))
    return results
