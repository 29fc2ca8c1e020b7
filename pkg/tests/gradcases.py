"""Shared gradcheck case definitions: every layer primitive and mechanism,
each as (builder, input_shapes). Builders take a seed so parametrized sweeps
stay deterministic."""

import numpy as np

import sasenet.tensor as T
from sasenet import nn
from sasenet.cli import GRADCHECK_MODULES, build_named_module


class FnModule(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self._fn = fn

    def forward(self, *xs):
        return self._fn(*xs)


def _fn(fn, shapes):
    return (lambda seed: FnModule(fn)), shapes


def _layer(factory, shapes):
    return (lambda seed: factory(np.random.default_rng(seed))), shapes


def _positive(t):
    # map an unconstrained tensor into (0.5, 1.5) for division/log tests
    return T.add(T.sigmoid(t), T.full(t.shape, 0.5, dtype=t.dtype))


def _eval_bn(rng):
    bn = nn.BatchNorm2d(3)
    bn.running_mean[:] = rng.standard_normal(3)
    bn.running_var[:] = 0.5 + rng.random(3)
    bn.set_training(False)
    return bn


def _shuffle_layout(x):
    a, b = T.split(x, 0, 2)
    y = T.concat([b, a], axis=0)
    y = T.transpose(y, (1, 0, 2))
    return T.reshape(y, (x.shape[1], x.size // x.shape[1]))


PRIMITIVE_CASES = {
    "add": _fn(lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "add_broadcast": _fn(lambda a, b: T.add(a, b), [(3, 1), (1, 4)]),
    "sub": _fn(lambda a, b: T.sub(a, b), [(2, 5), (2, 5)]),
    "mul_broadcast": _fn(lambda a, b: T.mul(a, b), [(4, 1, 1), (1, 3, 3)]),
    "div": _fn(lambda a, b: T.div(a, _positive(b)), [(3, 3), (3, 3)]),
    "exp": _fn(lambda a: T.exp(a), [(3, 4)]),
    "log": _fn(lambda a: T.log(_positive(a)), [(3, 4)]),
    "relu": _fn(lambda a: T.relu(a), [(4, 4)]),
    "leaky_relu": _fn(lambda a: T.leaky_relu(a, 0.1), [(4, 4)]),
    "sigmoid": _fn(lambda a: T.sigmoid(a), [(4, 4)]),
    "tanh": _fn(lambda a: T.tanh(a), [(4, 4)]),
    "softmax": _fn(lambda a: T.softmax(a, axis=1), [(3, 5)]),
    "matmul": _fn(lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "reduce_sum": _fn(lambda a: T.reduce("sum", a, axes=(1,)), [(3, 4)]),
    "reduce_mean": _fn(lambda a: T.reduce("mean", a, axes=(0, 1)), [(3, 4)]),
    "reduce_max": _fn(lambda a: T.reduce("max", a, axes=(0,)), [(3, 4)]),
    "layout_ops": _fn(_shuffle_layout, [(4, 3, 2)]),
    "conv2d": _layer(lambda rng: nn.Conv2d(2, 3, 3, padding=1, rng=rng), [(2, 5, 5)]),
    "conv2d_strided_dilated": _layer(
        lambda rng: nn.Conv2d(2, 2, 3, stride=2, padding=2, dilation=2, rng=rng), [(2, 7, 7)]),
    "conv2d_grouped_circular": _layer(
        lambda rng: nn.Conv2d(4, 4, 3, groups=2, padding=1, padding_mode="circular", rng=rng),
        [(4, 6, 6)]),
    "conv_transpose2d": _layer(
        lambda rng: nn.ConvTranspose2d(3, 2, 4, stride=2, padding=1, rng=rng), [(3, 4, 4)]),
    "avg_pool2d": _fn(lambda a: nn.avg_pool2d(a, 2, 2), [(3, 6, 6)]),
    "adaptive_avg_pool2d": _fn(lambda a: nn.adaptive_avg_pool2d(a, (2, 2)), [(2, 5, 7)]),
    "global_avg_pool": _fn(lambda a: nn.global_avg_pool(a), [(3, 4, 4)]),
    "max_pool2d": _fn(lambda a: nn.max_pool2d(a, 3, 2, 1), [(2, 7, 7)]),
    "glu": _fn(lambda a: nn.glu(a), [(4, 3, 3)]),
    "upsample_nearest": _fn(lambda a: nn.upsample_nearest(a, 2), [(2, 3, 3)]),
    "upsample_bilinear": _fn(lambda a: nn.upsample_bilinear(a, (5, 7)), [(2, 3, 4)]),
    "inject_noise": _fn(lambda a: nn.inject_noise(a, seed=5, std=0.8), [(2, 4, 4)]),
    "batchnorm_train": _layer(lambda rng: nn.BatchNorm2d(3), [(4, 3, 5, 5)]),
    "batchnorm_eval": _layer(_eval_bn, [(4, 3, 5, 5)]),
    "linear": _layer(lambda rng: nn.Linear(5, 3, rng=rng), [(2, 5)]),
}

MECHANISM_CASES = {name: (lambda seed, name=name: build_named_module(name, seed))
                   for name in GRADCHECK_MODULES}
