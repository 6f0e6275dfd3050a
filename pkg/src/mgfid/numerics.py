"""Tensor primitives, reverse-mode gradients and Adam on top of torch.

Every primitive here is a thin, shape-checked wrapper so that misuse fails
with a message naming both operand shapes instead of a broadcasting surprise.
All of them are ordinary torch ops, so they take part in autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import torch
from torch import Tensor


class ShapeError(ValueError):
    """Operands whose shapes do not conform for the requested primitive."""


def _shape(x: Tensor) -> tuple[int, ...]:
    return tuple(x.shape)


def _mismatch(op: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {_shape(a)} and {_shape(b)}")


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _mismatch("matmul", a, b)
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_shape = torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _mismatch("add", a, b) from None
    if out_shape != a.shape and out_shape != b.shape:
        raise _mismatch("add", a, b)
    return a + b


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: no operands")
    first = parts[0]
    for p in parts[1:]:
        if p.dim() != first.dim():
            raise _mismatch("concat", first, p)
        for ax in range(first.dim()):
            if ax != axis % first.dim() and p.shape[ax] != first.shape[ax]:
                raise _mismatch("concat", first, p)
    return torch.cat(list(parts), dim=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row softmax; a row that is entirely ``-inf`` yields zeros instead of NaN."""
    m = x.amax(dim=axis, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(x - m)
    s = e.sum(dim=axis, keepdim=True)
    return e / torch.where(s > 0, s, torch.ones_like(s))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.log_softmax(x, dim=axis)


def mean_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Mean of rows ``start..stop-1`` of a matrix."""
    if x.dim() != 2 or not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"mean_rows: range [{start}, {stop}) invalid for shape {_shape(x)}")
    return x[start:stop].mean(dim=0)


def max_pool(rows: Tensor | Sequence[Tensor]) -> Tensor:
    """Coordinatewise maximum over a set of vectors."""
    if not isinstance(rows, Tensor):
        if not rows:
            raise ShapeError("max_pool: empty set")
        for r in rows[1:]:
            if r.shape != rows[0].shape:
                raise _mismatch("max_pool", rows[0], r)
        rows = torch.stack(list(rows))
    if rows.dim() != 2 or rows.shape[0] == 0:
        raise ShapeError(f"max_pool: expected non-empty [n, d] rows, got {_shape(rows)}")
    return rows.amax(dim=0)


def embedding(table: Tensor, ids: Tensor) -> Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {_shape(table)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding: ids out of range for table of {table.shape[0]} rows")
    return table[ids]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise _mismatch("layer_norm", x, gain)
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    key_mask: Tensor | None = None,
    causal: bool = False,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention.

    q: [..., Tq, dh], k and v: [..., Tk, dh]. ``key_mask`` is a boolean tensor
    broadcastable to [..., Tk] with True on keys that may be attended.
    Returns the attended values and the attention weights [..., Tq, Tk].
    """
    if q.shape[-1] != k.shape[-1]:
        raise _mismatch("attention(q, k)", q, k)
    if k.shape[-2] != v.shape[-2]:
        raise _mismatch("attention(k, v)", k, v)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    allowed = None
    if key_mask is not None:
        allowed = key_mask.unsqueeze(-2)
    if causal:
        tq, tk = scores.shape[-2], scores.shape[-1]
        tri = torch.ones(tq, tk, dtype=torch.bool).tril(tk - tq)
        allowed = tri if allowed is None else allowed & tri
    if allowed is not None:
        scores = scores.masked_fill(~allowed, float("-inf"))
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def log(x: Tensor) -> Tensor:
    return torch.log(x)


def power(x: Tensor, p: float) -> Tensor:
    return x**p


def neg(x: Tensor) -> Tensor:
    return -x


def scale(x: Tensor, c: float) -> Tensor:
    return x * c


# ---------------------------------------------------------------------------
# differentiation


def gradient(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """d(loss)/d(param) for every named parameter.

    Parameters the loss does not depend on get a zero tensor. The graph is
    retained, so asking twice for the same forward pass is allowed and gives
    the same answer.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise ShapeError(f"gradient: loss must be a scalar, got shape {_shape(loss)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(
        loss.reshape(()), tensors, allow_unused=True, retain_graph=True
    )
    return {
        n: (torch.zeros_like(t) if g is None else g)
        for n, t, g in zip(names, tensors, grads)
    }


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam hyperparameters out of range")


@torch.no_grad()
def adam_step(
    state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, Tensor]
) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step[{name}]: gradient {_shape(g)} vs parameter {_shape(p)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            v = state.v[name] = torch.zeros_like(p)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return params, state


def named_parameters(module: torch.nn.Module) -> dict[str, Tensor]:
    return dict(module.named_parameters())


def zeros_like_all(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {n: torch.zeros_like(p) for n, p in params.items()}


def accumulate(into: dict[str, Tensor], grads: Mapping[str, Tensor], weight: float = 1.0) -> None:
    for n, g in grads.items():
        into[n].add_(g, alpha=weight)


def all_finite(tensors: Iterable[Tensor]) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)
