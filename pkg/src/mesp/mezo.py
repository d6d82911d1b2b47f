"""Zeroth-order (SPSA) gradient estimation over the LoRA adapters.

One step takes two forwards, at w + εz and w − εz, and forms the projected
gradient c = (L₊ − L₋)/(2ε).  The update is w ← w − lr·c·z.  z is never
stored.  Each adapter's slice is regenerated on demand from a counter-based
generator,

    z[site] = Generator(Philox(key=[step_seed, site_index])).standard_normal(shape, dtype)

where ``site_index`` is the position of the matrix in
:meth:`ModelParams.trainable` (block, then q..down, then A before B).

Perturbation walk
-----------------
:func:`perturb_in_place` does not write ``w + scale·z`` back into the stored
arrays.  It adds ``scale`` to a pending offset that the forward applies when
it reads each adapter, one site at a time, as a transient copy.  The offsets
of the walk (+ε, −2ε, +ε) sum to exactly 0.0 in binary floating point, so the
stored arrays come back bit-identical.  A literal in-place walk rounds at
every add and does not (see :func:`walk_literal`).  Only the update phase
really mutates the arrays.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mesp.ledger import MemoryLedger, Workspace
from mesp.model import CHECKPOINT, SITES, ModelParams, PendingOffset, block_forward, embed, head_logits, head_norm
from mesp.tensor_core import cross_entropy

ZFn = Callable[[int, str, str, tuple, np.dtype], np.ndarray]


class NonFiniteLossError(FloatingPointError):
    """A perturbed forward produced a non-finite loss; the step was aborted."""


@dataclass
class MezoConfig:
    epsilon: float | None = None  # None → 1e-5 for float64, 1e-3 for float32
    probes: int = 1
    seed: int = 0
    lr: float = 1e-4

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.probes < 1:
            raise ValueError("probes must be >= 1")

    def eps_for(self, dtype) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 1e-5 if np.dtype(dtype).itemsize == 8 else 1e-3


def step_seed(seed: int, step: int, probe: int = 0) -> int:
    return int(np.random.SeedSequence([seed, step, probe]).generate_state(1, np.uint64)[0])


def site_order(params: ModelParams) -> list[tuple[int, str, str]]:
    return [(bp.index, site, which) for bp in params.blocks for site in SITES for which in "AB"]


@dataclass
class PerturbationSpec:
    """Everything needed to regenerate z: a step seed and the site ordering."""

    seed: int
    order: list[tuple[int, str, str]]
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {key: i for i, key in enumerate(self.order)}

    @classmethod
    def for_params(cls, params: ModelParams, seed: int) -> "PerturbationSpec":
        return cls(seed, site_order(params))

    def z(self, block: int, site: str, which: str, shape, dtype) -> np.ndarray:
        i = self.index[(block, site, which)]
        gen = np.random.Generator(np.random.Philox(key=np.array([self.seed, i], dtype=np.uint64)))
        return gen.standard_normal(shape, dtype=np.dtype(dtype))

    __call__ = z


def zero_direction(block, site, which, shape, dtype) -> np.ndarray:
    """Test hook: z ≡ 0."""
    return np.zeros(shape, dtype)


def perturb_in_place(params: ModelParams, spec: PerturbationSpec | ZFn, scale: float) -> None:
    """Shift the effective adapters by ``scale·z``; see the module docstring."""
    if params.pending is None:
        params.pending = PendingOffset(0.0, spec)
    elif params.pending.direction is not spec:
        raise RuntimeError("a different perturbation is still pending")
    params.pending.scale += scale
    if params.pending.scale == 0.0:
        params.pending = None


def walk_literal(params: ModelParams, spec: PerturbationSpec | ZFn, scale: float) -> None:
    """w ← w + scale·z written into the stored arrays (rounds at every call)."""
    for bp in params.blocks:
        for site in SITES:
            ad = bp.lora[site]
            ad.A += scale * spec(bp.index, site, "A", ad.A.shape, ad.A.dtype)
            ad.B += scale * spec(bp.index, site, "B", ad.B.shape, ad.B.dtype)


def restore(params: ModelParams) -> None:
    params.pending = None


def forward_loss(batch, params: ModelParams, ledger: MemoryLedger | None = None) -> float:
    """Inference-only loss: each block's working set is freed as soon as its output exists."""
    tokens, targets = batch
    cfg = params.cfg
    x = embed(tokens, params)
    cur = ledger.alloc(x, "boundary", 0) if ledger is not None else None
    for bp in params.blocks:
        ws = Workspace(ledger, bp.index)
        block_forward(x, bp, cfg, CHECKPOINT, ws, out_tag="boundary", pending=params.pending)
        y = ws.take("y")
        if ledger is not None:
            ledger.free(cur)
        cur, x = y, y.data
    hws = Workspace(ledger, cfg.n_layers)
    head_norm(x, params, hws)
    hws.drop("xhatf", "rmsf")
    logits = head_logits(hws, params)
    hws.drop("af")
    if ledger is not None:
        ledger.free(cur)
    loss, _ = cross_entropy(logits, targets, grad=False)
    hws.clear()
    return loss


def projected_grad(batch, params: ModelParams, spec, eps: float, ledger=None) -> tuple[float, float, float]:
    """Run the +ε, −2ε, +ε walk; return (L₊, L₋, c).  Stored arrays are left untouched."""
    try:
        perturb_in_place(params, spec, eps)
        lp = forward_loss(batch, params, ledger)
        perturb_in_place(params, spec, -2 * eps)
        lm = forward_loss(batch, params, ledger)
        perturb_in_place(params, spec, eps)
    finally:
        restore(params)
    if not (np.isfinite(lp) and np.isfinite(lm)):
        raise NonFiniteLossError(f"non-finite loss (L+={lp}, L-={lm}); step aborted, parameters restored")
    return lp, lm, (lp - lm) / (2 * eps)


def apply_update(params: ModelParams, spec, coef: float, ledger: MemoryLedger | None = None) -> None:
    """w ← w − coef·z per site, regenerating z one matrix at a time."""
    for bp in params.blocks:
        for site in SITES:
            ad = bp.lora[site]
            for which, w in (("A", ad.A), ("B", ad.B)):
                z = spec(bp.index, site, which, w.shape, w.dtype)
                t = ledger.alloc(z, "perturbation", bp.index) if ledger is not None else None
                w -= coef * z
                if t is not None:
                    ledger.free(t)


@dataclass
class MezoStepResult:
    loss_plus: float
    loss_minus: float
    projected_grad: float
    peak_bytes: int = 0
    wall_time: float = 0.0
    per_probe: list[float] = field(default_factory=list)

    @property
    def loss(self) -> float:
        return 0.5 * (self.loss_plus + self.loss_minus)

    def __iter__(self):
        return iter((self.loss_plus, self.loss_minus, self.projected_grad))


def mezo_step(batch, params: ModelParams, cfg: MezoConfig, step: int = 0,
              ledger: MemoryLedger | None = None) -> MezoStepResult:
    """One SPSA step.  With several probes, each z_k is applied with weight c_k/probes."""
    if ledger is not None:
        ledger.window()
    t0 = time.perf_counter()
    eps = cfg.eps_for(params.cfg.dtype.np)
    order = site_order(params)
    runs = []
    for k in range(cfg.probes):
        spec = PerturbationSpec(step_seed(cfg.seed, step, k), order)
        runs.append((spec, projected_grad(batch, params, spec, eps, ledger)))
    for spec, (_, _, c) in runs:
        apply_update(params, spec, cfg.lr * c / cfg.probes, ledger)
    lp = float(np.mean([r[0] for _, r in runs]))
    lm = float(np.mean([r[1] for _, r in runs]))
    cs = [r[2] for _, r in runs]
    peak = ledger.report().peak_bytes if ledger is not None else 0
    return MezoStepResult(lp, lm, float(np.mean(cs)), peak, time.perf_counter() - t0, cs)


def mezo_estimate_full(batch, params: ModelParams, cfg: MezoConfig, step: int = 0,
                       z_hook: ZFn | None = None) -> dict[int, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Materialize ĝ = mean_k c_k·z_k for every adapter (analysis path, memory-unconstrained)."""
    eps = cfg.eps_for(params.cfg.dtype.np)
    order = site_order(params)
    out = {bp.index: {s: (np.zeros_like(bp.lora[s].A), np.zeros_like(bp.lora[s].B)) for s in SITES}
           for bp in params.blocks}
    for k in range(cfg.probes):
        spec = z_hook or PerturbationSpec(step_seed(cfg.seed, step, k), order)
        _, _, c = projected_grad(batch, params, spec, eps)
        for bp in params.blocks:
            for s in SITES:
                gA, gB = out[bp.index][s]
                ad = bp.lora[s]
                gA += (c / cfg.probes) * spec(bp.index, s, "A", ad.A.shape, ad.A.dtype)
                gB += (c / cfg.probes) * spec(bp.index, s, "B", ad.B.shape, ad.B.dtype)
    return out


# === GENERIC SPSA ===

def spsa_estimate(loss_fn: Callable[[np.ndarray], float], w: np.ndarray, eps: float, z: np.ndarray) -> np.ndarray:
    """Single-probe estimate ((L(w+εz) − L(w−εz))/(2ε))·z for any flat or shaped w."""
    c = (loss_fn(w + eps * z) - loss_fn(w - eps * z)) / (2 * eps)
    return c * z
