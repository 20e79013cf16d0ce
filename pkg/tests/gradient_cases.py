"""Finite-difference gradient cases shared by the unit and acceptance suites.

Each case maps a seed to ``(fn, inputs)`` for :func:`caselab.gradcheck.check_gradients`.
"""
import numpy as np

from caselab import tensor as T
from caselab.adapters import CaseConfig
from caselab.backbone import Backbone
from caselab.heads import LinearHead
from caselab.tensor import Tensor


def _u(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


def _away_from_zero(rng, *shape, margin=0.05):
    # keeps relu's kink outside the finite-difference stencil
    x = _u(rng, *shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def case_add(rng):
    return (lambda a, b: a + b), [_u(rng, 3, 4), _u(rng, 4)]


def case_mul(rng):
    return (lambda a, b: a * b), [_u(rng, 3, 4), _u(rng, 3, 1)]


def case_matmul(rng):
    return T.matmul, [_u(rng, 3, 5), _u(rng, 5, 2)]


def case_relu(rng):
    return T.relu, [_away_from_zero(rng, 4, 5)]


def case_silu(rng):
    return T.silu, [_u(rng, 4, 5)]


def case_sigmoid(rng):
    return T.sigmoid, [_u(rng, 4, 5)]


def case_tanh(rng):
    return T.tanh, [_u(rng, 4, 5)]


def case_conv2d(rng):
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    return (lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=padding)), \
        [_u(rng, 2, 2, 5, 5), _u(rng, 3, 2, 3, 3), _u(rng, 3)]


def case_global_avg_pool(rng):
    return T.global_avg_pool, [_u(rng, 2, 3, 4, 4)]


def case_batchnorm(rng):
    mean, var = _u(rng, 3), rng.uniform(0.5, 1.5, 3)
    return (lambda x, g, b: T.batchnorm(x, Tensor(mean), Tensor(var), g, b)), \
        [_u(rng, 2, 3, 2, 2), _u(rng, 3), _u(rng, 3)]


def case_standardize(rng):
    return T.standardize, [_u(rng, 2, 6)]


def case_cross_entropy(rng):
    labels = rng.integers(0, 4, size=5)
    return (lambda z: T.cross_entropy(z, labels)), [_u(rng, 5, 4)]


def case_composite(rng):
    """Body with CaSE adapters, context then target pass, fixed linear head.

    Inputs are the target images and the output layer of the deepest adapter.
    """
    from conftest import randomize_heads, tiny_spec

    seed = int(rng.integers(1 << 30))
    context = _u(rng, 3, 3, 8, 8)
    head = LinearHead(_u(rng, 3, 8), _u(rng, 3))
    labels = np.array([0, 2])

    def build():
        bb = Backbone(tiny_spec(), seed=seed)
        bb.freeze()
        bb.attach_adapters("case", CaseConfig(reduction=2, min_units=4), seed=seed)
        randomize_heads(bb.adapters[1], np.random.default_rng(seed))
        return bb

    state = {}

    def fn(targets, w_out):
        if "bb" not in state:
            state["bb"] = build()
        bb = state["bb"]
        block = bb.adapters[2]
        _, b = block.mlp.heads[0]
        block.mlp.heads[0] = (w_out, b)
        bb.embed(Tensor(context), "adaptive")
        z = bb.embed(targets, "inference")
        return T.cross_entropy(head.logits(z), labels)

    w0 = 0.5 * _u(rng, 8, 4)
    return fn, [_u(rng, 2, 3, 8, 8), w0]


PRIMITIVE_CASES = {
    "add": case_add,
    "mul": case_mul,
    "matmul": case_matmul,
    "relu": case_relu,
    "silu": case_silu,
    "sigmoid": case_sigmoid,
    "tanh": case_tanh,
    "conv2d": case_conv2d,
    "global_avg_pool": case_global_avg_pool,
    "batchnorm": case_batchnorm,
    "standardize": case_standardize,
    "cross_entropy": case_cross_entropy,
}
ALL_CASES = {**PRIMITIVE_CASES, "composite": case_composite}
GRAD_SEEDS = range(20)
GRAD_TOL = 1e-4
