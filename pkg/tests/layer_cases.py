"""Random single-layer gradient-check cases shared by the unit and acceptance suites."""
import math

import numpy as np

from autometa import tensor as T
from autometa.nn import BNStats, LayerKind, Mode, forward
from autometa.tensor import Tensor


def he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0, math.sqrt(2 / fan_in), size=shape)


def away_from_zero(rng, shape, margin=0.05):
    """Random values with |x| >= margin so a +/-1e-3 probe never crosses a ReLU kink."""
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))


def distinct_values(rng, shape, spacing=0.01):
    """A permutation of an evenly spaced grid: max-pool winners stay put under +/-1e-3."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def layer_case(kind: LayerKind, rng):
    """(params dict, loss_fn) for one layer; loss = <random projection, output>."""
    n, c, h, w = 2, 3, 5, 5
    mode = Mode.TRAIN
    stats = None
    if kind is LayerKind.MAX_POOL3X3:
        x = distinct_values(rng, (n, c, h, w))
    elif kind is LayerKind.RELU:
        x = away_from_zero(rng, (n, c, h, w))
    elif kind is LayerKind.LINEAR:
        x = rng.normal(size=(4, 6))
    elif kind is LayerKind.BATCH_NORM:
        x = rng.normal(size=(8, c, 3, 3)) * 2 + 1
    else:
        x = rng.normal(size=(n, c, h, w))
    params = {"x": Tensor(x, requires_grad=True)}
    layer = []
    extra = []
    if kind is LayerKind.CONV3X3:
        layer = [he(rng, (4, c, 3, 3)), rng.normal(size=4)]
    elif kind is LayerKind.CONV1X1:
        layer = [he(rng, (4, c, 1, 1)), rng.normal(size=4)]
    elif kind is LayerKind.FACTORIZED_CONV5X5:
        layer = [he(rng, (4, c, 1, 5)), rng.normal(size=4), he(rng, (4, 4, 5, 1)), rng.normal(size=4)]
    elif kind is LayerKind.LINEAR:
        layer = [he(rng, (3, 6)), rng.normal(size=3)]
    elif kind is LayerKind.BATCH_NORM:
        layer = [1 + 0.3 * rng.normal(size=c), rng.normal(size=c)]
        stats = BNStats.fresh(c)
    elif kind in (LayerKind.ADD, LayerKind.CONCAT):
        extra = [Tensor(rng.normal(size=(n, c, h, w)), requires_grad=True)]
        params["x2"] = extra[0]
    for i, arr in enumerate(layer):
        params[f"p{i}"] = Tensor(arr, requires_grad=True)
    out_shape = forward(kind, [params["x"], *extra], [params[f"p{i}"] for i in range(len(layer))],
                        mode, stats).shape
    proj = rng.normal(size=out_shape)

    def loss_fn():
        out = forward(kind, [params["x"], *extra], [params[f"p{i}"] for i in range(len(layer))],
                      mode, stats)
        return T.sum_all(T.mul(out, Tensor(proj)))

    return params, loss_fn
