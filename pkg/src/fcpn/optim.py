"""ADAM optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """Update ``params`` in place (dict name -> Tensor or ndarray) and return them.

    Parameters with a ``None`` gradient are left untouched; the step counter
    still advances once per call.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        if g.shape != data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {data.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(data)
            state.second_moment[name] = np.zeros_like(data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        data -= update.astype(data.dtype, copy=False)
    return params


class Adam:
    """Convenience wrapper binding an :class:`AdamState` to a parameter dict of Tensors."""

    def __init__(self, params, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=eps)

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = float(value)

    def step(self):
        trainable = {k: p for k, p in self.params.items() if p.requires_grad}
        grads = {k: p.grad for k, p in trainable.items()}
        adam_step(trainable, grads, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
