"""Random instances of every differentiable numgrad op, shared by the unit and acceptance suites.

Each case returns (params, build_loss) where the loss contracts the op output
with a fixed random weight so every Jacobian entry is exercised.
"""
import numpy as np
import scipy.sparse as sp

from timekit import numgrad as ng


def _contract(out, w):
    return ng.sum_(ng.hadamard(out, ng.Tensor(w)))


def _case(rng, shapes, fn, out_shape):
    params = [ng.parameter(rng.normal(size=s)) for s in shapes]
    w = rng.normal(size=out_shape)

    def build(ps):
        out = fn(*ps)
        return out if out.size == 1 and out_shape == () else _contract(out, w)

    return params, build


def make_case(op, rng):
    m, n, k = rng.integers(2, 5, size=3)
    if op == "add":
        return _case(rng, [(m, n), (m, n)], ng.add, (m, n))
    if op == "sub":
        return _case(rng, [(m, n), (m, n)], ng.sub, (m, n))
    if op == "hadamard":
        return _case(rng, [(m, n), (m, n)], ng.hadamard, (m, n))
    if op == "scale":
        c = float(rng.normal())
        return _case(rng, [(m, n)], lambda a: ng.scale(a, c), (m, n))
    if op == "shift":
        return _case(rng, [(m, n)], lambda a: ng.shift(a, 0.3), (m, n))
    if op == "matmul":
        return _case(rng, [(m, k), (k, n)], ng.matmul, (m, n))
    if op == "bmv":
        return _case(rng, [(m, n, k), (m, k)], ng.bmv, (m, n))
    if op == "spmm":
        adj = sp.random(m, k, density=0.6, random_state=int(rng.integers(1 << 30)), format="csr")
        return _case(rng, [(k, n)], lambda a: ng.spmm(adj, a), (m, n))
    if op == "add_row":
        return _case(rng, [(m, n), (n,)], ng.add_row, (m, n))
    if op == "sigmoid":
        return _case(rng, [(m, n)], ng.sigmoid, (m, n))
    if op == "log_sigmoid":
        return _case(rng, [(m, n)], ng.log_sigmoid, (m, n))
    if op == "tanh":
        return _case(rng, [(m, n)], ng.tanh, (m, n))
    if op == "relu":
        # keep inputs away from the kink so finite differences are valid
        params, build = _case(rng, [(m, n)], ng.relu, (m, n))
        v = params[0].value
        v[np.abs(v) < 0.05] += 0.2
        return params, build
    if op == "reshape":
        return _case(rng, [(m, n)], lambda a: ng.reshape(a, (n, m)), (n, m))
    if op == "slice":
        return _case(rng, [(m, n + 1)], lambda a: ng.slice_(a, np.s_[:, 1:]), (m, n))
    if op == "gather":
        rows = rng.integers(0, m, size=k + 2)
        return _case(rng, [(m, n)], lambda a: ng.gather(a, rows), (k + 2, n))
    if op == "concat":
        return _case(rng, [(m, n), (k, n)], lambda a, b: ng.concat([a, b], axis=0), (m + k, n))
    if op == "sum":
        return _case(rng, [(m, n)], lambda a: ng.sum_(a, axis=1), (m,))
    if op == "mean":
        return _case(rng, [(m, n)], lambda a: ng.scale(ng.mean(ng.hadamard(a, a)), 1.0), ())
    if op == "rowdot":
        return _case(rng, [(m, n), (m, n)], ng.rowdot, (m,))
    if op == "mean_squared_error":
        return _case(rng, [(m, n), (m, n)], ng.mean_squared_error, ())
    raise KeyError(op)


OPS = [
    "add", "sub", "hadamard", "scale", "shift", "matmul", "bmv", "spmm", "add_row", "sigmoid",
    "log_sigmoid", "tanh", "relu", "reshape", "slice", "gather", "concat", "sum", "mean", "rowdot",
    "mean_squared_error",
]


def forecaster_case(kind, rng, entities=3, r=3, d=4, hidden=8, steps_per_interval=4):
    """(params, build_loss) for the window MSE of a randomly initialised forecaster.

    With r=3 and 4 steps per interval the NCDE solve composes 8 RK4 steps.
    """
    from timekit import forecaster as fc

    if kind == "gru":
        model = fc.GruForecaster.create(d, hidden, rng)
    else:
        model = fc.NcdeForecaster.create(d, hidden, rng, steps_per_interval)
        # lift the tiny default FC2 init so the field actually shapes the gradient
        model.params["fc2_w"].value = rng.normal(0.0, 0.3, size=model.params["fc2_w"].shape)
    for name, p in model.params.items():
        if name.endswith("_b") or name in ("bx", "bh"):
            p.value = rng.normal(0.0, 0.1, size=p.shape)
    x = rng.normal(size=(entities, r, d))
    y = rng.normal(size=(entities, d))

    def build(ps):
        return ng.mean_squared_error(model.forward(x), y)

    return model.param_list, build
