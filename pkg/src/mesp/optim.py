"""Plain SGD (with optional heavy-ball momentum for contract checks)."""

from __future__ import annotations

import numpy as np

from mesp.ledger import MemoryLedger


def sgd_update(param: np.ndarray, grad: np.ndarray, lr: float) -> None:
    """param ← param − lr·grad, in place."""
    if param.shape != grad.shape:
        raise ValueError(f"sgd_update: param {param.shape} vs grad {grad.shape}")
    param -= lr * grad


class SGD:
    def __init__(self, lr: float = 1e-4, momentum: float = 0.0, ledger: MemoryLedger | None = None):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        self.lr = lr
        self.momentum = momentum
        self.ledger = ledger
        self._buf = {}

    @property
    def is_plain(self) -> bool:
        return self.momentum == 0.0

    def update(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        if self.is_plain:
            sgd_update(param, grad, self.lr)
            return
        buf = self._buf.get(name)
        if buf is None:
            data = np.zeros_like(param)
            buf = self.ledger.alloc(data, "optimizer") if self.ledger is not None else data
            self._buf[name] = buf
        v = buf.data if self.ledger is not None else buf
        v *= self.momentum
        v += grad
        sgd_update(param, v, self.lr)
