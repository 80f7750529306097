"""Adam optimizer with bias correction."""

import numpy as np

from .autodiff import GradientError


class AdamState:
    """Per-parameter first/second moment buffers plus the shared step counter."""

    def __init__(self, params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state):
    """One in-place Adam update; `grads` aligns with `params` element-wise.

    Raises GradientError naming the parameter if a gradient is NaN.
    """
    state.step += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    lr, eps = np.float32(state.lr), np.float32(state.eps)
    c1 = np.float32(1.0 - state.beta1 ** state.step)
    c2 = np.float32(1.0 - state.beta2 ** state.step)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if np.isnan(g).any():
            raise GradientError(f"NaN gradient for parameter {p.name or i}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} "
                             f"for {p.name or i}")
        state.m[i] = b1 * state.m[i] + (np.float32(1) - b1) * g
        state.v[i] = b2 * state.v[i] + (np.float32(1) - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class Adam:
    """Convenience wrapper: step() reads `.grad` from the tracked parameters."""

    def __init__(self, params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(self.params, lr, beta1, beta2, eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
