"""Optimizers, the synthetic blob-quadrant task, and the seeded training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, Tensor
from .nn import Module


# ---------------------------------------------------------------------------
# optimizers (updates happen outside tape recording)
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = [(n, p) for n, p in params]
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v


class Adam:
    """Standard Adam with bias correction; with beta1=beta2=0 the update
    reduces to lr * g / (|g| + eps)."""

    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [(n, p) for n, p in params]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params, lr: float, momentum: float = 0.0,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if kind == "sgd":
        return SGD(params, lr, momentum)
    if kind == "adam":
        return Adam(params, lr, beta1, beta2, eps)
    raise ValueError(f"unknown optimizer {kind!r}")


def grad_norm(params) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# loss / metrics
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy from raw logits (B, K), stable log-sum-exp form."""
    B, K = logits.shape
    m = T.reduce("max", logits, axes=(1,), keepdims=True)
    z = T.sub(logits, m)
    lse = T.log(T.reduce("sum", T.exp(z), axes=(1,), keepdims=True))
    logp = T.sub(z, lse)
    onehot = np.zeros((B, K), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1.0
    picked = T.mul(logp, Tensor(onehot))
    total = T.reduce("sum", picked, axes=(0, 1))
    return T.mul(total, Tensor(np.asarray(-1.0 / B, dtype=logits.dtype)))


def accuracy(logits: Tensor, labels: np.ndarray) -> float:
    pred = logits.data.argmax(axis=1)
    return float((pred == labels).mean())


# ---------------------------------------------------------------------------
# blob-quadrant dataset
# ---------------------------------------------------------------------------

def make_blob_dataset(seed: int, n: int, size: int = 16,
                      noise_std: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """n single-channel images with a Gaussian blob in one of 4 quadrants.

    Label = quadrant index; classes are balanced by construction (round-robin
    then a seeded shuffle). The blob peak is the argmax of the noiseless image.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    q = size // 4
    centers = [(q, q), (q, 3 * q), (3 * q, q), (3 * q, 3 * q)]
    labels = np.arange(n) % 4
    rng.shuffle(labels)
    images = np.zeros((n, 1, size, size))
    ii, jj = np.mgrid[0:size, 0:size]
    for s in range(n):
        ci, cj = centers[labels[s]]
        ci += int(rng.integers(-2, 3))
        cj += int(rng.integers(-2, 3))
        blob = 3.0 * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * 2.0 ** 2))
        images[s, 0] = blob + noise_std * rng.standard_normal((size, size))
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainRecord:
    step: int
    loss: float
    acc: float
    grad_norm: float
    wall_ms: float


class TrainDivergence(NumericError):
    def __init__(self, step: int, records: list[TrainRecord]):
        super().__init__(f"non-finite loss at step {step}; last good step {step - 1}")
        self.step = step
        self.records = records


def train_classifier(model: Module, images: np.ndarray, labels: np.ndarray,
                     optimizer, steps: int, batch_size: int, seed: int,
                     record_wall: bool = False) -> tuple[list[TrainRecord], dict]:
    """Seeded minibatch training; returns per-step records and a summary."""
    n = images.shape[0]
    batch_size = min(batch_size, n)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = np.arange(n)
    rng.shuffle(order)
    cursor = 0
    records: list[TrainRecord] = []
    params = list(model.parameters())
    model.set_training(True)
    for step in range(steps):
        if cursor + batch_size > n:
            rng.shuffle(order)
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        xb = Tensor(images[idx])
        yb = labels[idx]
        t0 = time.perf_counter()
        logits = model(xb)
        loss = cross_entropy(logits, yb)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainDivergence(step, records)
        model.zero_grads()
        T.backward(loss)
        gn = grad_norm(params)
        with T.no_grad():
            optimizer.step()
        T.reset_tape()
        wall = (time.perf_counter() - t0) * 1000.0 if record_wall else 0.0
        records.append(TrainRecord(step, loss_val, accuracy(logits, yb), gn, wall))
    summary = {
        "steps": steps,
        "initial_loss": records[0].loss if records else None,
        "final_loss": records[-1].loss if records else None,
        "final_train_accuracy": evaluate(model, images, labels),
    }
    return records, summary


def evaluate(model: Module, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> float:
    was_training = model.training
    model.set_training(False)
    correct = 0
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            xb = Tensor(images[start:start + batch_size])
            logits = model(xb)
            correct += int((logits.data.argmax(axis=1) == labels[start:start + batch_size]).sum())
    model.set_training(was_training)
    return correct / images.shape[0]
