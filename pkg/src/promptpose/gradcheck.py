"""Finite-difference gradient verification.

``check_blocks`` compares the analytic gradients of a scalar-valued closure
against central differences, parameter block by parameter block, at a handful
of deterministically chosen coordinates per block.
"""

from __future__ import annotations

import numpy as np

from .autodiff import backward


def numeric_gradient(fn, array, coords, h=1e-5):
    """Central-difference d fn / d array[coord] for each flat coordinate.

    ``fn`` is re-evaluated with the array perturbed in place; the array is
    restored afterwards.
    """
    flat = array.reshape(-1)
    grads = np.empty(len(coords))
    for i, c in enumerate(coords):
        keep = flat[c]
        flat[c] = keep + h
        f_plus = float(fn())
        flat[c] = keep - h
        f_minus = float(fn())
        flat[c] = keep
        grads[i] = (f_plus - f_minus) / (2.0 * h)
    return grads


def relative_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def noise_floor(loss_value, h=1e-5):
    """Error floor for gradients that are (near) zero: central differences
    of a loss of this magnitude carry ~|loss|*eps/h cancellation noise, so
    comparisons below this scale are meaningless."""
    return max(1e-6, abs(loss_value) * 1e-6)


def pick_coords(grad_flat, n_coords, rng):
    """Largest-|gradient| coordinates plus one random extra (best FD signal)."""
    order = np.argsort(-np.abs(grad_flat), kind="stable")
    coords = list(order[:n_coords])
    if len(grad_flat) > n_coords:
        extra = int(rng.integers(0, len(grad_flat)))
        if extra not in coords:
            coords.append(extra)
    return coords


def check_blocks(loss_fn, store, seed=0, n_coords=3, h=1e-5, corrupt=None, names=None):
    """Return {block name: max relative error} for registered blocks.

    ``loss_fn()`` must rebuild the loss from current parameter values (it is
    called repeatedly with perturbed parameters). ``corrupt`` names a block
    whose analytic gradient is deliberately damaged, for harness self-tests;
    ``names`` restricts the check to a subset of blocks.
    """
    rng = np.random.default_rng(seed)
    store.zero_grads()
    loss = loss_fn()
    backward(loss)
    floor = noise_floor(loss.item(), h)
    analytic = {name: p.grad.copy().reshape(-1) for name, p in store}
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"unknown parameter block '{corrupt}'")
        analytic[corrupt] = analytic[corrupt] + 1.0
    store.clear_grads()

    def forward_value():
        return loss_fn().item()

    report = {}
    for name, p in store:
        if names is not None and name not in names:
            continue
        coords = pick_coords(analytic[name], n_coords, rng)
        numeric = numeric_gradient(forward_value, p.data, coords, h=h)
        errs = relative_error(analytic[name][coords], numeric, floor=floor)
        report[name] = float(errs.max())
    return report
