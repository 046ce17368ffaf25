# src/nncore/store.py
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from src.nncore.layers import MLP
from src.utils.errors import ShapeError


class ParameterStore:
    """
    Named view over a module's parameters plus the Adam moment state.
    Names are the module's dotted parameter names; shapes never change.
    """

    def __init__(self, module: nn.Module):
        self.module = module
        self._optimizer: Optional[torch.optim.Adam] = None
        self._trainable_keys: Tuple[int, ...] = ()

    # ---------- naming ----------

    def named(self) -> Dict[str, nn.Parameter]:
        return dict(self.module.named_parameters())

    def trainable(self) -> Dict[str, nn.Parameter]:
        return {n: p for n, p in self.module.named_parameters() if p.requires_grad}

    def __getitem__(self, name: str) -> nn.Parameter:
        params = self.named()
        if name not in params:
            raise KeyError(f"unknown parameter {name}")
        return params[name]

    def submodule(self, name: str) -> nn.Module:
        return self.module.get_submodule(name)

    # ---------- freezing / precision ----------

    def freeze(self, prefix: str) -> None:
        for n, p in self.module.named_parameters():
            if n.startswith(prefix):
                p.requires_grad_(False)

    def unfreeze(self, prefix: str) -> None:
        for n, p in self.module.named_parameters():
            if n.startswith(prefix):
                p.requires_grad_(True)

    def to_float64(self) -> "ParameterStore":
        self.module.double()
        self._optimizer = None
        return self

    def to_float32(self) -> "ParameterStore":
        self.module.float()
        self._optimizer = None
        return self

    # ---------- gradients ----------

    def zero_grad(self) -> None:
        for p in self.module.parameters():
            p.grad = None

    def grads(self) -> Dict[str, torch.Tensor]:
        return {
            n: (p.grad if p.grad is not None else torch.zeros_like(p))
            for n, p in self.module.named_parameters()
        }

    # ---------- optimizer ----------

    def optimizer(self, lr: float, betas: Tuple[float, float], eps: float) -> torch.optim.Adam:
        params = [p for p in self.module.parameters() if p.requires_grad]
        keys = tuple(id(p) for p in params)
        if self._optimizer is None or keys != self._trainable_keys:
            previous = self._optimizer
            self._optimizer = torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)
            self._trainable_keys = keys
            if previous is not None:
                # moments survive a freeze/unfreeze for parameters that stay trainable
                for p in params:
                    if p in previous.state:
                        self._optimizer.state[p] = previous.state[p]
        for group in self._optimizer.param_groups:
            group["lr"] = lr
            group["betas"] = betas
            group["eps"] = eps
        return self._optimizer

    def moments(self, name: str) -> Tuple[torch.Tensor, torch.Tensor]:
        """(first, second) Adam moments of a parameter; zeros before the first step."""
        p = self[name]
        state = self._optimizer.state.get(p, {}) if self._optimizer else {}
        if not state:
            return torch.zeros_like(p), torch.zeros_like(p)
        return state["exp_avg"], state["exp_avg_sq"]

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.module.named_parameters()}


def mlp_forward(store: ParameterStore, name: str, x: torch.Tensor) -> torch.Tensor:
    mlp = store.submodule(name)
    if not isinstance(mlp, MLP):
        raise ShapeError(f"{name} is not a registered MLP stack")
    return mlp(x)


def backward(loss: torch.Tensor, store: ParameterStore) -> Dict[str, torch.Tensor]:
    """
    Accumulate d(loss)/d(param) into every parameter's .grad; parameters the
    loss never reached get explicit zeros.
    """
    if loss.requires_grad:
        loss.backward()
    for p in store.module.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    return store.grads()


def adam_step(store: ParameterStore, lr: float, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    store.optimizer(lr, betas, eps).step()
