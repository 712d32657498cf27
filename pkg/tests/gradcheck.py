"""Directional finite-difference gradient verification helpers."""

from __future__ import annotations

import torch


def directional_check(fn, tensors, rng, h=1e-6, rel_tol=1e-4, floor=1e-7):
    """Compare autograd's directional derivative against central differences.

    ``fn`` maps the (leaf, float64, requires_grad) tensors to a scalar.
    A random unit direction is drawn per tensor; the check passes when
    |ad - fd| <= rel_tol * max(|ad|, |fd|, floor).
    Returns (autograd_value, fd_value).
    """
    for t in tensors:
        assert t.dtype == torch.float64 and t.requires_grad
    value = fn(*tensors)
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    directions = []
    for t in tensors:
        d = torch.from_numpy(rng.standard_normal(tuple(t.shape)))
        d = d / d.norm().clamp_min(1e-12)
        directions.append(d)
    ad = sum(
        float((g * d).sum()) for g, d in zip(grads, directions) if g is not None
    )
    with torch.no_grad():
        plus = [t + h * d for t, d in zip(tensors, directions)]
        minus = [t - h * d for t, d in zip(tensors, directions)]
    for t in plus + minus:
        t.requires_grad_(False)
    fd = (float(fn(*plus)) - float(fn(*minus))) / (2 * h)
    err = abs(ad - fd)
    tol = rel_tol * max(abs(ad), abs(fd), floor)
    assert err <= tol, f"autograd {ad} vs central difference {fd} (err {err} > {tol})"
    return ad, fd


def param_group_check(build_loss, params, rng, h=1e-6, rel_tol=1e-3, floor=1e-7):
    """Directional check over one parameter group of a live module.

    ``build_loss`` recomputes the scalar loss from the module's current
    parameters.  The group's parameters are perturbed in place for the
    central difference, then restored.
    """
    loss = build_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    directions = [
        torch.from_numpy(rng.standard_normal(tuple(p.shape))) for p in params
    ]
    norm = torch.sqrt(sum((d**2).sum() for d in directions))
    directions = [d / norm.clamp_min(1e-12) for d in directions]
    ad = sum(
        float((g * d).sum()) for g, d in zip(grads, directions) if g is not None
    )

    def shift(sign):
        with torch.no_grad():
            for p, d in zip(params, directions):
                p.add_(sign * h * d)

    shift(+1)
    with torch.no_grad():
        f_plus = float(build_loss())
    shift(-2)
    with torch.no_grad():
        f_minus = float(build_loss())
    shift(+1)
    fd = (f_plus - f_minus) / (2 * h)
    err = abs(ad - fd)
    tol = rel_tol * max(abs(ad), abs(fd), floor)
    assert err <= tol, f"autograd {ad} vs central difference {fd} (err {err} > {tol})"
    return ad, fd
