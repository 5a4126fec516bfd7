"""Adam with named parameter groups and row-wise state surgery."""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


def lr_at(iteration: int, total: int, lr_init: float = 1e-3, lr_final: float = 1e-5) -> float:
    """Exponential decay from ``lr_init`` at 0 to ``lr_final`` at ``total``.

    Written as ``a^(1-r) * b^r`` so that both endpoints are returned exactly.
    """
    if total <= 0:
        return lr_final
    r = min(max(iteration / total, 0.0), 1.0)
    return lr_init ** (1.0 - r) * lr_final**r


class AdamState:
    """First/second moments and step count of one array parameter."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0

    def update(self, grad: np.ndarray, lr: float, beta1=BETA1, beta2=BETA2, eps=EPS) -> np.ndarray:
        """Advance the moments and return the (already scaled) step ``-lr * m_hat / (sqrt(v_hat) + eps)``."""
        self.step += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad
        m_hat = self.m / (1.0 - beta1**self.step)
        v_hat = self.v / (1.0 - beta2**self.step)
        return -lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a dict of named arrays that are updated in place.

    Rows of every group can be filtered or extended together, which is how
    densification keeps the moments aligned with the primitives: surviving
    rows keep their moments and new rows start from zero.
    """

    def __init__(self, params: dict[str, np.ndarray], eps: float = EPS):
        self.eps = eps
        self.state = {name: AdamState(p.shape) for name, p in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float]) -> None:
        for name, st in self.state.items():
            lr = lrs.get(name, 0.0)
            if lr == 0.0:
                continue
            params[name] += st.update(grads[name], lr, eps=self.eps)

    def remap_rows(self, keep: np.ndarray, n_new: int) -> None:
        """Keep rows ``keep`` (mask or indices) and append ``n_new`` zeroed rows."""
        for st in self.state.values():
            m, v = st.m[keep], st.v[keep]
            pad = (n_new,) + m.shape[1:]
            st.m = np.concatenate([m, np.zeros(pad)])
            st.v = np.concatenate([v, np.zeros(pad)])
