from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .nn import Module


class Adam:
    """Adam over a module's named parameters; state is checkpointable."""

    def __init__(self, module: Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.step_count = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in module.named_parameters())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in module.named_parameters())

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.module.named_parameters():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        state = OrderedDict()
        for k in self.m:
            state[f"m/{k}"] = self.m[k].copy()
            state[f"v/{k}"] = self.v[k].copy()
        return state

    def load_state_dict(self, state: dict, step_count: int) -> None:
        for k in self.m:
            self.m[k] = np.array(state[f"m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64)
        self.step_count = int(step_count)


def module_grads(module: Module, loss) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter of ``module``."""
    from .tensor import grad

    named = list(module.named_parameters())
    gs = grad(loss, [p for _, p in named])
    return {k: g.data for (k, _), g in zip(named, gs)}
