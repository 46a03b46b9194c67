"""SGD and Adam over named parameter collections."""

from __future__ import annotations

from typing import Dict

import numpy as np

from rlqfs.errors import ContractError
from rlqfs.ndgrad.tensor import Tensor


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most max_norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = sq**0.5
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class SGD:
    kind = "sgd"

    def __init__(self, params: Dict[str, Tensor], lr: float):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        pass

    def config(self) -> dict:
        return {"kind": self.kind, "lr": self.lr}


class Adam:
    kind = "adam"

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            m = tensors[f"m.{name}"]
            v = tensors[f"v.{name}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ContractError(f"optimizer moment shape mismatch for {name!r}")
            self.m[name] = m.astype(np.float64)
            self.v[name] = v.astype(np.float64)

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
        }


def make_optimizer(kind: str, params: Dict[str, Tensor], lr: float, **kwargs):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        opt = Adam(
            params,
            lr,
            beta1=kwargs.get("beta1", 0.9),
            beta2=kwargs.get("beta2", 0.999),
            eps=kwargs.get("eps", 1e-8),
        )
        opt.t = kwargs.get("t", 0)
        return opt
    raise ContractError(f"unknown optimizer kind {kind!r}")
