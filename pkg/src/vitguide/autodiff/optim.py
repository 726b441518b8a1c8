"""AdamW (decoupled weight decay) and momentum SGD over lists of leaf tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NumericFault, ShapeError, Tensor


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments plus the shared hyperparameters."""

    m: list
    v: list
    t: int = 0
    lr: float = 5e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    decay_mask: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hparams) -> "OptimizerState":
        state = cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hparams,
        )
        if not state.decay_mask:
            state.decay_mask = [True] * len(params)
        return state


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState) -> None:
    """One in-place AdamW update.

    The weight decay ``p -= lr * wd * p`` is applied separately from the
    bias-corrected adaptive step, as in Loshchilov & Hutter. A ``None`` gradient
    counts as zero.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"adamw_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    state.t += 1
    b1, b2 = state.betas
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    lr = state.lr
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapeError(f"adamw_step: grad {g.shape} / moment {state.m[i].shape} vs param {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericFault(f"adamw_step: non-finite gradient for parameter {p.name or i}")
        dtype = p.data.dtype.type
        m = state.m[i]
        v = state.v[i]
        m *= dtype(b1)
        m += dtype(1.0 - b1) * g
        v *= dtype(b2)
        v += dtype(1.0 - b2) * (g * g)
        if state.decay_mask[i] and state.weight_decay:
            p.data *= dtype(1.0 - lr * state.weight_decay)
        m_hat = m / dtype(bias1)
        v_hat = v / dtype(bias2)
        p.data -= dtype(lr) * m_hat / (np.sqrt(v_hat) + dtype(state.eps))


def _default_decay_mask(params: Sequence[Tensor]) -> list:
    # Biases, norm affines and the token/position embeddings are not decayed.
    mask = []
    for p in params:
        name = p.name or ""
        mask.append(p.ndim > 1 and not name.endswith(("cls_token", "pos_embed")))
    return mask


class AdamW:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 5e-4,
        weight_decay: float = 0.05,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        decay_mask: list | None = None,
    ):
        self.params = list(params)
        self.state = OptimizerState.for_params(
            self.params,
            lr=lr,
            weight_decay=weight_decay,
            betas=tuple(betas),
            eps=eps,
            decay_mask=decay_mask if decay_mask is not None else _default_decay_mask(self.params),
        )

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for p, buf in zip(self.params, self.buffers):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericFault(f"sgd: non-finite gradient for parameter {p.name}")
            dtype = p.data.dtype.type
            if self.weight_decay:
                g = g + dtype(self.weight_decay) * p.data
            buf *= dtype(self.momentum)
            buf += g
            p.data -= dtype(self.lr) * buf
