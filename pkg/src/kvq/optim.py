"""Adam with bias correction over a list of parameter tensors."""

from typing import List, Optional, Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], scales: Optional[Sequence[float]] = None) -> None:
        """Update every parameter in place from ``grads`` (same order as ``params``).

        ``scales`` multiplies the step size per parameter. A zero scale holds
        the parameter fixed while its moment estimates keep accumulating.
        """
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        scales = [1.0] * len(self.params) if scales is None else list(scales)
        for p, g, m, v, scale in zip(self.params, grads, self.m, self.v, scales):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if scale == 0:
                continue
            update = scale * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
