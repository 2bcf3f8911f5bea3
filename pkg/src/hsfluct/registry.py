"""Registry of admissible test functions for the experiment harness.

Config files refer to observables by name only; each entry carries its
exact L^2(M dz) pairing metadata and parity, so t = 0 references need no
quadrature.  No user-supplied code is ever loaded.
"""

import math

import numpy as np

from .geometry import TestFunction


def _tf(name, fn, *, odd, sq_norm, velocity_only=True, x_lip=None, bound_pad=1.5):
    # norm_bound: empirical sup of |g|/M over |v| <= 6 (metadata only)
    rng = np.random.default_rng(20240101)
    v = rng.standard_normal((20000, 3)) * 2.0
    v = v[np.linalg.norm(v, axis=1) <= 6.0]
    x = rng.random((v.shape[0], 3))
    d = v.shape[1]
    mvals = (2 * math.pi) ** (-d / 2) * np.exp(-0.5 * np.sum(v * v, axis=1))
    bound = float(np.max(np.abs(fn(x, v)) / mvals)) * bound_pad
    return TestFunction(name=name, fn=fn, norm_bound=bound, x_lipschitz=x_lip,
                        velocity_only=velocity_only, parity_odd_v=odd,
                        sq_norm=sq_norm, mean=0.0)


def _build():
    reg = {}
    reg["v1"] = _tf("v1", lambda x, v: v[..., 0], odd=True, sq_norm=1.0)
    reg["v2"] = _tf("v2", lambda x, v: v[..., 1], odd=True, sq_norm=1.0)
    reg["v1v2"] = _tf("v1v2", lambda x, v: v[..., 0] * v[..., 1],
                      odd=False, sq_norm=1.0)
    reg["he3_v1"] = _tf("he3_v1", lambda x, v: v[..., 0] ** 3 - 3.0 * v[..., 0],
                        odd=True, sq_norm=6.0)
    # |v|^2 - d and raw |v|^2 need the dimension at call time; stored for d=3
    reg["vsq_minus_d"] = _tf(
        "vsq_minus_d", lambda x, v: np.sum(v * v, axis=-1) - v.shape[-1],
        odd=False, sq_norm=6.0)
    reg["vsq"] = TestFunction(
        name="vsq", fn=lambda x, v: np.sum(v * v, axis=-1),
        norm_bound=reg["vsq_minus_d"].norm_bound, velocity_only=True,
        parity_odd_v=False, sq_norm=15.0, mean=3.0)
    reg["mode1_v1"] = _tf(
        "mode1_v1", lambda x, v: np.cos(2.0 * math.pi * x[..., 0]) * v[..., 0],
        odd=True, sq_norm=0.5, velocity_only=False, x_lip=2.0 * math.pi)
    return reg


REGISTRY = _build()


def get_test_function(name):
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown test function {name!r}; "
                       f"known: {sorted(REGISTRY)}") from None


def velocity_callable(tf):
    """Velocity-only view g(v) of a registry entry (for semigroup routines)."""
    if not tf.velocity_only:
        raise ValueError(f"{tf.name} depends on x; semigroup routines need "
                         "velocity-only observables")
    return lambda v: tf.fn(None, v)


def exact_pairing(name_h, name_g, d=3):
    """Exact <h, g> in L^2(M dz) for registry pairs (orthogonality included)."""
    h, g = get_test_function(name_h), get_test_function(name_g)
    if name_h == name_g:
        if name_h == "vsq_minus_d" and d != 3:
            return 2.0 * d
        if name_h == "vsq" and d != 3:
            return d * d + 2.0 * d
        return h.sq_norm
    if h.parity_odd_v != g.parity_odd_v:
        return 0.0
    pairs = {frozenset(("v1", "he3_v1")): 0.0,
             frozenset(("v1", "v2")): 0.0,
             frozenset(("v1", "mode1_v1")): 0.0,
             frozenset(("v2", "he3_v1")): 0.0,
             frozenset(("v2", "mode1_v1")): 0.0,
             frozenset(("he3_v1", "mode1_v1")): 0.0,
             frozenset(("v1v2", "vsq")): 0.0,
             frozenset(("v1v2", "vsq_minus_d")): 0.0,
             frozenset(("vsq", "vsq_minus_d")): 2.0 * d}
    key = frozenset((name_h, name_g))
    if key in pairs:
        return pairs[key]
    raise KeyError(f"no exact pairing stored for ({name_h}, {name_g})")
