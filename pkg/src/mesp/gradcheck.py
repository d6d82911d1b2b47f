"""Finite-difference checks for every backward kernel.

Each check draws a random instance, builds the scalar loss ⟨R, f(inputs)⟩
for a fixed random R, and compares the analytic input gradients against
central differences.  The error of a check is the norm-wise relative error
‖analytic − numeric‖₂ / ‖numeric‖₂, maximized over the inputs checked.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from mesp import model as M
from mesp import tensor_core as tc
from mesp.ledger import Workspace
from mesp.trainer import finite_difference_oracle

Pair = tuple[np.ndarray, np.ndarray]


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    den = np.linalg.norm(numeric)
    num = np.linalg.norm(analytic - numeric)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / den)


def _fd(fn, arr, delta):
    return finite_difference_oracle(fn, arr, delta)


def check_matmul(rng, delta) -> list[Pair]:
    x, w = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
    R = rng.standard_normal((2, 3, 5))
    loss = lambda: float(np.sum(R * tc.matmul(x, w)))
    dx, dw = tc.matmul_backward(R, x, w)
    return [(dx, _fd(loss, x, delta)), (dw, _fd(loss, w, delta))]


def check_softmax(rng, delta) -> list[Pair]:
    n = 6
    s = rng.standard_normal((2, n, n)) * 2
    mask = M.causal_mask(n)
    R = rng.standard_normal(s.shape)

    def fwd():
        return tc.softmax_row(np.where(mask, -np.inf, s))

    loss = lambda: float(np.sum(R * fwd()))
    ds = tc.softmax_backward(R, fwd())
    return [(ds, _fd(loss, s, delta))]


def check_rmsnorm(rng, delta) -> list[Pair]:
    x = rng.standard_normal((3, 4, 8))
    gamma = 1 + 0.3 * rng.standard_normal(8)
    R = rng.standard_normal(x.shape)
    loss = lambda: float(np.sum(R * tc.rmsnorm_forward(x, gamma, 1e-6)[1]))
    xhat, _, rms = tc.rmsnorm_forward(x, gamma, 1e-6)
    return [(tc.rmsnorm_backward(R, xhat, gamma, rms), _fd(loss, x, delta))]


def check_silu(rng, delta) -> list[Pair]:
    x = rng.standard_normal((5, 7)) * 3
    R = rng.standard_normal(x.shape)
    loss = lambda: float(np.sum(R * tc.silu(x)))
    return [(tc.silu_backward(R, x), _fd(loss, x, delta))]


def check_cross_entropy(rng, delta) -> list[Pair]:
    logits = rng.standard_normal((2, 5, 11)) * 2
    targets = rng.integers(0, 11, (2, 5))
    targets[0, rng.integers(0, 5)] = tc.IGNORE_INDEX
    loss = lambda: tc.cross_entropy(logits, targets, grad=False)[0]
    return [(tc.cross_entropy(logits, targets)[1], _fd(loss, logits, delta))]


def check_attention(rng, delta) -> list[Pair]:
    shape = (1, 2, 5, 3)
    Q, K, V = (rng.standard_normal(shape) for _ in range(3))
    R = rng.standard_normal(shape)
    loss = lambda: float(np.sum(R * M.attention_forward(Q, K, V)[0]))
    _, alpha = M.attention_forward(Q, K, V)
    dQ, dK, dV = M.attention_backward(R, Q, K, V, alpha)
    return [(dQ, _fd(loss, Q, delta)), (dK, _fd(loss, K, delta)), (dV, _fd(loss, V, delta))]


def check_lora_linear(rng, delta) -> list[Pair]:
    din, dout, r = 6, 5, 2
    x = rng.standard_normal((2, 3, din))
    W0 = rng.standard_normal((din, dout))
    ad = M.LoraAdapter(rng.standard_normal((din, r)), rng.standard_normal((r, dout)), 1.7)
    R = rng.standard_normal((2, 3, dout))
    loss = lambda: float(np.sum(R * M.lora_linear_forward(x, W0, ad)[0]))
    dA, dB, dx = M.lora_linear_backward(R, x, W0, ad)
    return [(dA, _fd(loss, ad.A, delta)), (dB, _fd(loss, ad.B, delta)), (dx, _fd(loss, x, delta))]


def tiny_config(**kw) -> M.ModelConfig:
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab=11, lora_rank=2, lora_alpha=4.0, max_seq=8)
    base.update(kw)
    return M.ModelConfig(**base)


def check_block(rng, delta) -> list[Pair]:
    """One whole block: dX and all fourteen LoRA matrices."""
    cfg = tiny_config(n_layers=1)
    params = M.init_params(cfg, int(rng.integers(1 << 31)), init_std=0.3, lora_std=0.3, lora_b_std=0.3)
    bp = params.blocks[0]
    x = rng.standard_normal((1, 5, cfg.d_model))
    R = rng.standard_normal(x.shape)
    loss = lambda: float(np.sum(R * M.block_forward(x, bp, cfg, M.STORE_ALL, Workspace())))
    ws = Workspace()
    M.block_forward(x, bp, cfg, M.STORE_ALL, ws)
    dX, grads = M.block_backward(R, ws, bp, cfg)
    pairs = [(dX, _fd(loss, x, delta))]
    for site in M.SITES:
        pairs.append((grads[site][0], _fd(loss, bp.lora[site].A, delta)))
        pairs.append((grads[site][1], _fd(loss, bp.lora[site].B, delta)))
    return pairs


def check_model(rng, delta) -> list[Pair]:
    """Embedding → blocks → head → cross-entropy, through the structured strategy."""
    from mesp.strategies import mesp_step

    cfg = tiny_config()
    params = M.init_params(cfg, int(rng.integers(1 << 31)), init_std=0.3, lora_std=0.3, lora_b_std=0.3)
    tokens = rng.integers(0, cfg.vocab, (1, 5))
    targets = rng.integers(0, cfg.vocab, (1, 5))

    def loss():
        logits, _ = M.model_forward(tokens, params)
        return tc.cross_entropy(logits, targets, grad=False)[0]

    grads = mesp_step((tokens, targets), params.copy(), keep_grads=True).grads_by_layer
    pairs = []
    for bp in params.blocks:
        for site in M.SITES:
            pairs.append((grads[bp.index][site][0], _fd(loss, bp.lora[site].A, delta)))
            pairs.append((grads[bp.index][site][1], _fd(loss, bp.lora[site].B, delta)))
    return pairs


KERNEL_CHECKS: dict[str, Callable] = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "rmsnorm": check_rmsnorm,
    "silu": check_silu,
    "cross_entropy": check_cross_entropy,
    "attention": check_attention,
    "lora_linear": check_lora_linear,
}
COMPOSITE_CHECKS: dict[str, Callable] = {"block": check_block, "model": check_model}


def run_check(fn, instances: int, seed: int, delta: float = 1e-4) -> float:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        worst = max(worst, max(rel_err(a, n) for a, n in fn(rng, delta)))
    return worst


def run_suite(instances: int = 20, seed: int = 0, delta: float = 1e-4, composite_instances: int = 2,
              only=None) -> dict[str, float]:
    out = {}
    for name, fn in KERNEL_CHECKS.items():
        if only is None or name in only:
            out[name] = run_check(fn, instances, seed, delta)
    for name, fn in COMPOSITE_CHECKS.items():
        if composite_instances and (only is None or name in only):
            out[name] = run_check(fn, composite_instances, seed, delta)
    return out


# === STRATEGY EQUIVALENCE ===

def grad_max_rel_diff(grads, ref) -> float:
    """max over every adapter matrix of max|g − g_ref| / max|g_ref|."""
    worst = 0.0
    for i in ref:
        for site in M.SITES:
            for a, b in zip(grads[i][site], ref[i][site]):
                scale = np.max(np.abs(b))
                d = np.max(np.abs(a - b))
                if scale == 0:
                    worst = max(worst, 0.0 if d == 0 else float("inf"))
                else:
                    worst = max(worst, float(d / scale))
    return worst


def strategy_equivalence(cfg: M.ModelConfig, seed: int = 0, seq: int = 64, lora_b_std: float = 0.02) -> dict:
    """Max relative gradient difference of mebp and mesp against the store-all reference.

    B is drawn nonzero so that dA is not identically zero.
    """
    from mesp.strategies import STEP_FNS, REFERENCE, MEBP, MESP

    params = M.init_params(cfg, seed, lora_b_std=lora_b_std)
    rng = np.random.default_rng([seed, 4])
    batch = (rng.integers(0, min(cfg.vocab, 256), (1, seq)), rng.integers(0, min(cfg.vocab, 256), (1, seq)))
    ref = STEP_FNS[REFERENCE](batch, params.copy(), keep_grads=True).grads_by_layer
    return {name: grad_max_rel_diff(STEP_FNS[kind](batch, params.copy(), keep_grads=True).grads_by_layer, ref)
            for name, kind in (("mebp", MEBP), ("mesp", MESP))}
