"""Desk-scale training: a synthetic single-keypoint task, Adam/SGD and the toy loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .builder import build
from .config import ArchConfig
from .graph import Graph, execute, init_params
from .tasks import KeypointSet, decode_keypoints, make_gaussian_targets, mse_heatmap_loss, oks
from .tensor import Tensor, backward, recording


def toy_config(**overrides) -> ArchConfig:
    base = dict(width_c=4, stage_blocks=(1, 1, 1, 1), head="V1", num_outputs=1)
    base.update(overrides)
    return ArchConfig(**base)


@dataclass(frozen=True)
class SyntheticKeypoints:
    """Images holding one Gaussian blob; the keypoint is the blob centre."""

    size: int = 32
    blob_sigma: float = 2.0
    margin: float = 4.0
    noise: float = 0.05
    oks_scale: float = 32.0
    oks_falloff: float = 0.1

    def sample(self, n: int, rng: np.random.Generator):
        pts = rng.uniform(self.margin, self.size - 1 - self.margin, size=(n, 2))
        grid = np.arange(self.size, dtype=np.float64)
        images = np.empty((n, 3, self.size, self.size))
        for i, (x, y) in enumerate(pts):
            blob = np.exp(-((grid[None, :] - x) ** 2 + (grid[:, None] - y) ** 2) / (2 * self.blob_sigma ** 2))
            images[i] = blob[None] + self.noise * rng.standard_normal((3, self.size, self.size))
        kps = [KeypointSet(p[None], [2], self.oks_scale, [self.oks_falloff]) for p in pts]
        return images, kps

    def targets(self, kps: list[KeypointSet]) -> np.ndarray:
        return make_gaussian_targets(kps, (self.size, self.size))


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.eps = params, lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-2, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.buf[k] = self.momentum * self.buf[k] + g
            p.data = p.data - self.lr * self.buf[k]


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class TrainResult:
    losses: list[float]
    graph: Graph
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def reduction(self) -> float:
        return self.losses[0] / self.losses[-1]

    def write_trace(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{i},{v!r}\n" for i, v in enumerate(self.losses)))


def train_toy(config: ArchConfig | None = None, dataset: SyntheticKeypoints | None = None,
              steps: int = 300, lr: float = 1e-3, optimizer: str = "adam", seed: int = 0,
              n_train: int = 64, schedule: dict[int, float] | None = None) -> TrainResult:
    """Full-batch training on a fixed synthetic set.

    ``losses[t]`` is the training loss after ``t`` updates, so the trace has ``steps + 1``
    entries. ``schedule`` maps a step index to a new learning rate.
    """
    config = config or toy_config()
    dataset = dataset or SyntheticKeypoints()
    graph = build(config)
    params, buffers = init_params(graph, seed)
    rng = np.random.default_rng(seed + 1)
    images, kps = dataset.sample(n_train, rng)
    x = Tensor(images)
    target = dataset.targets(kps)
    if optimizer == "adam":
        opt = Adam(params, lr)
    elif optimizer == "sgd":
        opt = SGD(params, lr)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")

    losses = []
    for t in range(steps + 1):
        if schedule and t in schedule:
            opt.lr = schedule[t]
        with recording() as tape:
            pred = execute(graph, params, buffers, x, training=True)[0]
            loss = mse_heatmap_loss(pred, target)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(t)
        losses.append(value)
        if t == steps:
            break
        opt.step(backward(tape, loss))
    return TrainResult(losses, graph, params, buffers)


def evaluate_oks(result: TrainResult, dataset: SyntheticKeypoints | None = None,
                 n: int = 64, seed: int = 10_000) -> float:
    """Mean OKS on a held-out synthetic set, BN in inference mode."""
    dataset = dataset or SyntheticKeypoints()
    images, truth = dataset.sample(n, np.random.default_rng(seed))
    pred = execute(result.graph, result.params, result.buffers, Tensor(images), training=False)[0]
    decoded = decode_keypoints(pred)
    return float(np.mean([oks(p, t) for p, t in zip(decoded, truth)]))
