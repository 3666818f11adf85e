"""SGD with momentum and Adam over flat ``name -> ndarray`` parameter maps (updates in place)."""

from __future__ import annotations

import numpy as np


class SGD:
    kind = "sgd"

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.step_count = 0
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict, lr: float = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v.astype(params[name].dtype)
            params[name] -= params[name].dtype.type(lr) * self.velocity[name]

    def state(self) -> tuple[dict, dict]:
        return {"kind": self.kind, "step": self.step_count}, {f"sgd.v.{k}": v for k, v in self.velocity.items()}

    def load_state(self, meta: dict, tensors: dict) -> None:
        self.step_count = int(meta["step"])
        self.velocity = {k[len("sgd.v."):]: v.copy() for k, v in tensors.items() if k.startswith("sgd.v.")}


class Adam:
    kind = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr: float = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        corr = np.sqrt(1 - self.beta2 ** t) / (1 - self.beta1 ** t)
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = (self.beta1 * m + (1 - self.beta1) * g).astype(p.dtype)
            v = (self.beta2 * v + (1 - self.beta2) * g * g).astype(p.dtype)
            self.m[name], self.v[name] = m, v
            p -= (lr * corr * m / (np.sqrt(v) + self.eps)).astype(p.dtype)

    def state(self) -> tuple[dict, dict]:
        tensors = {f"adam.m.{k}": v for k, v in self.m.items()}
        tensors.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return {"kind": self.kind, "step": self.step_count}, tensors

    def load_state(self, meta: dict, tensors: dict) -> None:
        self.step_count = int(meta["step"])
        self.m = {k[len("adam.m."):]: v.copy() for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in tensors.items() if k.startswith("adam.v.")}


def make_optimizer(cfg):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, cfg.momentum)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
