"""Numerical helpers on top of torch: stable softmax, gradient extraction
and a central finite-difference oracle.

Training runs in float32; the gradient checks re-run everything in float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf shows up in a value that must stay finite."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with max-subtraction."""
    logits = torch.as_tensor(logits)
    if logits.shape[-1] < 1:
        raise ValueError("softmax needs a non-empty last axis")
    check_finite(logits, "softmax input")
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    """log-softmax via log-sum-exp; never log(softmax(x))."""
    logits = torch.as_tensor(logits)
    check_finite(logits, "log_softmax input")
    m = logits.max(dim=-1, keepdim=True).values
    shifted = logits - m
    return shifted - shifted.exp().sum(dim=-1, keepdim=True).log()


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. ``params``.

    Parameters the loss does not depend on get a zero gradient.
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        check_finite(g, "gradient")
        out.append(g)
    return out


def numeric_gradient(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
    batched: bool = False,
) -> torch.Tensor:
    """Central differences of ``f`` at ``x`` (flattened coordinates).

    With ``batched=True`` ``f`` must map a stack ``(m, *x.shape)`` to ``(m,)``
    and all perturbations are evaluated in one call.
    Returns a tensor of the selected coordinates' partial derivatives.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = x.detach().reshape(-1)
    idx = torch.arange(flat.numel()) if coords is None else torch.as_tensor(list(coords))
    m = idx.numel()
    if batched:
        pert = flat.expand(2 * m, -1).clone()
        rows = torch.arange(m)
        pert[rows, idx] += step
        pert[rows + m, idx] -= step
        vals = f(pert.reshape(2 * m, *x.shape))
        check_finite(vals, "finite-difference evaluation")
        return (vals[:m] - vals[m:]) / (2 * step)
    out = torch.empty(m, dtype=flat.dtype)
    for j, c in enumerate(idx.tolist()):
        xp = flat.clone()
        xp[c] += step
        xm = flat.clone()
        xm[c] -= step
        fp = f(xp.reshape(x.shape))
        fm = f(xm.reshape(x.shape))
        check_finite(torch.stack([torch.as_tensor(fp), torch.as_tensor(fm)]),
                     "finite-difference evaluation")
        out[j] = (fp - fm) / (2 * step)
    return out


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    """|a - n| / max(1e-8, |n|), elementwise."""
    return (analytic - numeric).abs() / numeric.abs().clamp_min(1e-8)


def finite_difference_check(
    f: Callable[[Sequence[torch.Tensor]], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-3,
    n_samples: int = 8,
    generator: torch.Generator | None = None,
) -> float:
    """Max relative error between autodiff and central differences of ``f``.

    ``f`` takes the list of parameter tensors and returns a scalar. Up to
    ``n_samples`` coordinates per parameter are probed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [p.detach().clone().requires_grad_(True) for p in params]
    analytic = backward(f(params), params)
    worst = 0.0
    for i, p in enumerate(params):
        n = p.numel()
        if n <= n_samples:
            coords = list(range(n))
        else:
            coords = torch.randperm(n, generator=generator)[:n_samples].tolist()

        def f_i(x: torch.Tensor, i: int = i) -> torch.Tensor:
            args = [q.detach() for q in params]
            args[i] = x
            with torch.no_grad():
                return f(args)

        num = numeric_gradient(f_i, p.detach(), step, coords)
        ana = analytic[i].reshape(-1)[torch.as_tensor(coords)]
        worst = max(worst, float(relative_error(ana, num).max()))
    return worst
