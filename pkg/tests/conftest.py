"""Shared finite-difference oracles and tiny model factories."""

import numpy as np
import pytest

from smat import autodiff as ad
from smat.model import MiniTransformer, ModelConfig


def fd_gradients(f, arrays, h=1e-6):
    """Per-coordinate central differences of a scalar function.

    ``f`` maps a list of float64 numpy arrays to a python float. Returns
    one gradient array per input, same shapes.
    """
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(base.size):
            probe = [a.copy() for a in arrays]
            probe[k].reshape(-1)[i] = base.reshape(-1)[i] + h
            up = f(probe)
            probe[k].reshape(-1)[i] = base.reshape(-1)[i] - h
            down = f(probe)
            flat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(got, want):
    """L2 relative error of ``got`` against the oracle ``want``."""
    got = np.asarray(got, dtype=np.float64).reshape(-1)
    want = np.asarray(want, dtype=np.float64).reshape(-1)
    denom = max(float(np.linalg.norm(want)), 1e-12)
    return float(np.linalg.norm(got - want)) / denom


def check_op_gradients(build, seeds=range(10), rel_tol=1e-4, h=1e-6):
    """FD-check one op builder at several seeded random points.

    ``build(rng)`` returns ``(arrays, f)`` with ``f`` mapping a list of
    Tensors to a scalar Tensor. Gradients from backward() must match
    per-coordinate central differences within ``rel_tol``.
    """
    for seed in seeds:
        rng = np.random.default_rng(seed)
        arrays, f = build(rng)
        tensors = [ad.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        got = [g.data for g in ad.backward(f(tensors), tensors)]

        def value(probe):
            with ad.no_grad():
                return f([ad.Tensor(a, dtype=np.float64) for a in probe]).item()

        want = fd_gradients(value, arrays, h=h)
        for name_i, (g, w) in enumerate(zip(got, want)):
            err = rel_err(g, w)
            assert err < rel_tol, f"seed {seed}, input {name_i}: rel err {err:.3g}"


def weighted_sum(out, rng):
    """Project an op output to a scalar through a fixed random weighting."""
    w = ad.constant(rng.normal(size=out.shape), dtype=np.float64)
    return ad.tsum(ad.mul(out, w))


def tiny_config(**overrides):
    base = dict(
        vocab_size=12,
        max_len=6,
        num_layers=2,
        heads_per_layer=2,
        model_dim=8,
        head_dim=4,
        ffn_dim=16,
        task="classification",
        num_classes=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=np.float64, **overrides):
    return MiniTransformer(tiny_config(**overrides), seed=seed, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
