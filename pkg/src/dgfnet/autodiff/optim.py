"""Adaptive-moment optimizer with optional decoupled weight decay.

One Adam instance manages several parameter groups; a group with
``decoupled_decay > 0`` applies the AdamW update (decay multiplies the
parameter directly, scaled by lr, independent of the gradient moments).
"""

from __future__ import annotations

import numpy as np

from dgfnet.autodiff.tensor import Tensor
from dgfnet.errors import ContractError, NumericError


class Adam:
    def __init__(self, groups: list[dict], betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        """``groups``: [{'name': str, 'params': {pname: Tensor}, 'lr': float,
        'decoupled_decay': float}, ...]."""
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.groups = []
        seen: set[str] = set()
        for g in groups:
            lr = float(g["lr"])
            if lr <= 0:
                raise ContractError(f"learning rate must be > 0, got {lr}")
            params = dict(g["params"])
            for pname in params:
                if pname in seen:
                    raise ContractError(f"duplicate parameter name {pname!r}")
                seen.add(pname)
            self.groups.append({
                "name": g.get("name", "default"),
                "params": params,
                "lr": lr,
                "decoupled_decay": float(g.get("decoupled_decay", 0.0)),
            })
        self.m = {name: np.zeros_like(p.data)
                  for g in self.groups for name, p in g["params"].items()}
        self.v = {name: np.zeros_like(p.data)
                  for g in self.groups for name, p in g["params"].items()}

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"].values():
                p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for g in self.groups:
            lr, wd = g["lr"], g["decoupled_decay"]
            for name, p in g["params"].items():
                grad = p.grad
                if grad is None:
                    grad = np.zeros_like(p.data)
                elif not np.all(np.isfinite(grad)):
                    raise NumericError(f"non-finite gradient for parameter {name!r}")
                m = self.m[name]
                v = self.v[name]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                if wd:
                    p.data -= lr * wd * p.data
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    # -- state round-trip for resumable checkpoints -------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array([self.step_count], dtype=np.float64)}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["optim.step"][0])
        for name in self.m:
            self.m[name] = arrays[f"optim.m.{name}"].astype(self.m[name].dtype, copy=True)
            self.v[name] = arrays[f"optim.v.{name}"].astype(self.v[name].dtype, copy=True)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: Adam | None = None, lr: float = 1e-3,
                   decoupled_decay: float = 0.0) -> Adam:
    """Single-group convenience wrapper: assign grads, advance one step."""
    if state is None:
        state = Adam([{"name": "default", "params": params, "lr": lr,
                       "decoupled_decay": decoupled_decay}])
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for {name!r}")
        p.grad = grads[name]
    state.step()
    return state
