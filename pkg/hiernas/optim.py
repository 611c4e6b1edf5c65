# hiernas/optim.py
"""
Optimizers over named ParamStore groups. State lives in `store.state` so a
checkpoint carries it.
"""

import math
from typing import Iterable, List, Optional, Tuple

import numpy as np
from loguru import logger

from hiernas.common import InvalidArgumentError
from hiernas.microtensor import ParamStore, Tensor


def cosine_lr(step: int, total_steps: int, lr_max: float = 0.025, lr_min: float = 0.001) -> float:
    """
    lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2.
    Both endpoints are returned exactly.
    """
    if step < 0 or step > total_steps:
        raise InvalidArgumentError(f"step {step} outside 0..{total_steps}")
    if step == 0:
        return lr_max
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def grad_norm(params: Iterable[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    return math.sqrt(sq)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """
    Rescale gradients in place so their global L2 norm is at most `max_norm`.
    Returns the norm before clipping; a non-finite norm leaves grads untouched.
    """
    params = list(params)
    norm = grad_norm(params)
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Optimizer:
    def __init__(self, store: ParamStore, names: Optional[Iterable[str]], lr: float, weight_decay: float):
        if lr <= 0 or weight_decay < 0:
            raise InvalidArgumentError(f"invalid rates lr={lr}, weight_decay={weight_decay}")
        self.store = store
        self.names: List[str] = list(store) if names is None else list(names)
        self.lr = lr
        self.weight_decay = weight_decay

    def params(self) -> Iterable[Tuple[str, Tensor]]:
        for name in self.names:
            yield name, self.store[name]

    def tensors(self) -> List[Tensor]:
        return [p for _, p in self.params()]

    def zero_grad(self) -> None:
        for _, p in self.params():
            p.grad = None

    def slot(self, name: str, key: str, like: np.ndarray) -> np.ndarray:
        state = self.store.state.setdefault(name, {})
        if key not in state:
            state[key] = np.zeros_like(like)
        return state[key]


class MomentumSGD(Optimizer):
    """
    SGD with heavy-ball momentum; weight decay is added to the gradient (L2).
    """

    def __init__(self, store, names=None, lr: float = 0.025, momentum: float = 0.9, weight_decay: float = 3e-4):
        super().__init__(store, names, lr, weight_decay)
        self.momentum = momentum

    def step(self) -> None:
        for name, p in self.params():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            state = self.store.state.setdefault(name, {})
            buf = state.get("momentum")
            buf = g.copy() if buf is None else self.momentum * buf + g
            state["momentum"] = buf
            p.data = p.data - self.lr * buf


class Adam(Optimizer):
    """
    Adam with bias correction and decoupled weight decay.
    """

    def __init__(
        self,
        store,
        names=None,
        lr: float = 3e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-3,
    ):
        super().__init__(store, names, lr, weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps

    def step(self) -> None:
        for name, p in self.params():
            if p.grad is None:
                continue
            state = self.store.state.setdefault(name, {})
            t = int(state.get("step", np.zeros(1))[0]) + 1
            m = self.beta1 * self.slot(name, "m", p.data) + (1 - self.beta1) * p.grad
            v = self.beta2 * self.slot(name, "v", p.data) + (1 - self.beta2) * p.grad**2
            state.update(m=m, v=v, step=np.array([float(t)]))
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        logger.trace("Adam step over {} tensors", len(self.names))
