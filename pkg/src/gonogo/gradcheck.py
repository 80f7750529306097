"""Finite-difference verification of analytic gradients.

Central differences with h=1e-3 on float32 forward passes.  The scalar check
loss is a fixed random projection of the model output accumulated in float64,
which keeps the finite-difference signal above float32 rounding noise.
Coordinates are sampled among those with non-negligible analytic gradient
(relative error on a zero gradient is meaningless).
"""

import numpy as np

from . import autodiff as ad


def projection_loss(out, proj):
    """Scalar <out, proj>; proj is a fixed numpy array of out's shape."""
    return ad.tsum(ad.mul(out, ad.Tensor(proj)))


def _loss_value_f64(out_data, proj):
    return float(np.dot(out_data.reshape(-1).astype(np.float64),
                        proj.reshape(-1).astype(np.float64)))


def finite_difference(forward, param, coords, proj, h=1e-3):
    """Central-difference dLoss/dparam at the given flat coordinates.

    `forward()` reruns the model and returns output data (numpy array).
    """
    flat = param.data.reshape(-1)
    out = np.empty(len(coords))
    for k, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + h
        hi = _loss_value_f64(forward(), proj)
        flat[idx] = orig - h
        lo = _loss_value_f64(forward(), proj)
        flat[idx] = orig
        out[k] = (hi - lo) / (2.0 * h)
    return out


def sample_coords(grad, n, rng, floor_ratio=0.5):
    """Sample `n` coordinates, preferring ones with |grad| above a floor.

    The floor is a fraction of the gradient RMS; if too few coordinates
    qualify, the largest-|grad| coordinates fill the rest.  Coordinates with
    tiny gradients are excluded because their relative error is dominated by
    float32 rounding of the forward pass, not by the backward rule under test
    (a wrong backward rule shifts every coordinate, so the filter loses no
    detection power).
    """
    flat = np.abs(grad.reshape(-1))
    scale = np.sqrt(np.mean(flat.astype(np.float64) ** 2))
    eligible = np.nonzero(flat > floor_ratio * scale)[0]
    if len(eligible) >= n:
        return rng.choice(eligible, size=n, replace=False)
    order = np.argsort(flat)[::-1]
    return order[:n].copy()


def check_gradients(model, x, tolerance=1e-3, n_coords=10, h=1e-3, seed=0):
    """Compare analytic and finite-difference gradients per parameter.

    Returns a report dict: per-parameter max relative error, overall pass
    flag, and the worst offender.  Failures are reported, never raised.
    """
    rng = np.random.default_rng(seed)
    x = ad.as_tensor(x)
    first = model.forward(x)
    proj = rng.normal(0.0, 1.0, first.data.shape).astype(np.float32)

    loss = projection_loss(model.forward(x), proj)
    model.zero_grad()
    loss.backward()

    rows = []
    for name, p in model.named_parameters():
        if p.grad is None:
            rows.append({"param": name, "max_rel_err": float("nan"), "ok": False,
                         "note": "no gradient reached this parameter"})
            continue
        coords = sample_coords(p.grad, n_coords, rng)
        analytic = p.grad.reshape(-1)[coords].astype(np.float64)
        fd = finite_difference(lambda: model.forward(x).data, p, coords, proj, h=h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
        rel = np.abs(analytic - fd) / denom
        rows.append({"param": name, "max_rel_err": float(rel.max()),
                     "ok": bool(rel.max() < tolerance), "note": ""})
    worst = max((r for r in rows if not np.isnan(r["max_rel_err"])),
                key=lambda r: r["max_rel_err"], default=None)
    return {
        "tolerance": tolerance,
        "per_param": rows,
        "passed": all(r["ok"] for r in rows),
        "worst": worst,
    }


def check_scalar_fn(fn, param, tolerance=1e-3, n_coords=10, h=1e-3, seed=0):
    """Gradcheck for an arbitrary scalar-valued `fn()` of one parameter tensor.

    `fn` must rebuild its graph on every call (it is re-evaluated for the
    finite differences).  Used for composite losses that are not plain
    model-forward projections.
    """
    rng = np.random.default_rng(seed)
    loss = fn()
    param.zero_grad()
    loss.backward()
    if param.grad is None:
        return {"max_rel_err": float("nan"), "passed": False}
    coords = sample_coords(param.grad, n_coords, rng)
    analytic = param.grad.reshape(-1)[coords].astype(np.float64)

    flat = param.data.reshape(-1)
    fd = np.empty(len(coords))
    for k, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + h
        hi = float(fn().data)
        flat[idx] = orig - h
        lo = float(fn().data)
        flat[idx] = orig
        fd[k] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    rel = np.abs(analytic - fd) / denom
    return {"max_rel_err": float(rel.max()), "passed": bool(rel.max() < tolerance),
            "analytic": analytic, "fd": fd}
