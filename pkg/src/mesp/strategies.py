"""First-order step strategies over the same model and kernels.

``reference``  store-all forward; every intermediate lives until backward ends.
``mebp``       block checkpointing, with every LoRA projection h kept from its
               forward creation until its block's backward is done.  This is a
               documented retention model of what an autodiff framework holds,
               not an autodiff implementation.
``mesp``       block checkpointing; h is recomputed inside each LoRA backward
               and dropped right after dB; each block's adapters are updated
               as soon as its gradients exist.

All three call the same kernels in the same order, so their gradients agree
bit for bit; they differ only in the ledger trace.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from mesp.ledger import LedgerReport, MemoryLedger, Workspace
from mesp.model import (
    CHECKPOINT,
    SITES,
    STORE_ALL,
    ModelParams,
    block_backward,
    block_backward_structured,
    block_forward,
    embed,
    grads_in_workspace,
    head_backward,
    head_logits,
    head_norm,
)
from mesp.optim import SGD
from mesp.tensor_core import Tensor, cross_entropy

REFERENCE = "reference_store_all"
MEBP = "mebp_store_h"
MESP = "mesp_recompute_h"
KINDS = (REFERENCE, MEBP, MESP)
ALIASES = {"reference": REFERENCE, "ref": REFERENCE, "mebp": MEBP, "store_h": MEBP,
           "mesp": MESP, "recompute_h": MESP}

Grads = dict[int, dict[str, tuple[np.ndarray, np.ndarray]]]


def resolve_kind(name: str) -> str:
    if name in KINDS:
        return name
    try:
        return ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; valid: {', '.join(sorted(ALIASES))}") from None


@dataclass
class StepResult:
    loss: float
    grads_by_layer: Grads | None
    peak_bytes: int
    wall_time: float
    report: LedgerReport | None = None
    live_after_block: list[int] = field(default_factory=list)


def register_params(ledger: MemoryLedger, params: ModelParams) -> list[Tensor]:
    return [ledger.alloc(a, "parameter") for a in params.named_arrays().values()]


def _session_ledger(ledger, params):
    if ledger is None:
        ledger = MemoryLedger()
        register_params(ledger, params)
    return ledger


def _apply(optimizer: SGD, params: ModelParams, i: int, grads) -> None:
    bp = params.blocks[i]
    for site in SITES:
        dA, dB = grads[site]
        optimizer.update(f"blocks.{i}.{site}.A", bp.lora[site].A, dA)
        optimizer.update(f"blocks.{i}.{site}.B", bp.lora[site].B, dB)


def _copy_grads(grads):
    return {site: (dA.copy(), dB.copy()) for site, (dA, dB) in grads.items()}


# === REFERENCE ===

def reference_step(batch, params: ModelParams, optimizer: SGD | None = None,
                   ledger: MemoryLedger | None = None, keep_grads: bool = False,
                   trace: bool = False) -> StepResult:
    """Store-all forward, backward over stored tensors, update at the end."""
    tokens, targets = batch
    cfg = params.cfg
    L = cfg.n_layers
    ledger = _session_ledger(ledger, params)
    ledger.window()
    t0 = time.perf_counter()

    x = embed(tokens, params)
    boundaries = [ledger.alloc(x, "checkpoint", 0)]
    wss = []
    for bp in params.blocks:
        ws = Workspace(ledger, bp.index)
        last = bp.index == L - 1
        block_forward(x, bp, cfg, STORE_ALL, ws, out_tag="boundary" if last else "checkpoint")
        y = ws.take("y")
        boundaries.append(y)
        wss.append(ws)
        x = y.data

    hws = Workspace(ledger, L)
    head_norm(x, params, hws)
    logits = head_logits(hws, params)
    loss, dlogits = cross_entropy(logits, targets)
    hws.put("dlogits", dlogits)
    head_backward(params, hws, release=False)
    dY = hws.take("dY")

    grads: Grads = {}
    prev = None
    for i in reversed(range(L)):
        if prev is not None:
            ledger.free(prev)
        _, g = block_backward(dY.data, wss[i], params.blocks[i], cfg, release=False)
        grads[i] = g
        prev, dY = dY, wss[i].take("dX")
    ledger.free(prev)
    ledger.free(dY)

    if optimizer is not None:
        for i in range(L):
            _apply(optimizer, params, i, grads[i])
    out = {i: _copy_grads(g) for i, g in grads.items()} if keep_grads else None
    for ws in wss:
        ws.clear()
    hws.clear()
    for t in boundaries:
        ledger.free(t)
    rep = ledger.report(trace)
    return StepResult(loss, out, rep.peak_bytes, time.perf_counter() - t0, rep)


# === CHECKPOINTED (MeBP emulation and MeSP) ===

def _checkpointed_step(batch, params, optimizer, ledger, keep_grads, retain_h, interleaved, trace):
    tokens, targets = batch
    cfg = params.cfg
    L = cfg.n_layers
    ledger = _session_ledger(ledger, params)
    ledger.window()
    t0 = time.perf_counter()

    # forward: keep block inputs (and, for MeBP, every h) only
    x = embed(tokens, params)
    ckpt = {0: ledger.alloc(x, "checkpoint", 0)}
    retained: dict[int, dict[str, Tensor]] = {}
    for bp in params.blocks:
        ws = Workspace(ledger, bp.index)
        last = bp.index == L - 1
        block_forward(x, bp, cfg, CHECKPOINT, ws, keep_h=retain_h,
                      out_tag="boundary" if last else "checkpoint")
        if retain_h:
            retained[bp.index] = {s: ws.take(f"h_{s}") for s in SITES}
        y = ws.take("y")
        if not last:
            ckpt[bp.index + 1] = y
        x = y.data
    hws = Workspace(ledger, L)
    head_norm(x, params, hws)
    head_logits(hws, params)
    logits = hws.take("logits")
    hws.clear()
    ledger.free(y)

    # head backward: rebuild the last block output and final norm from its checkpoint
    ws = Workspace(ledger, L - 1)
    block_forward(ckpt[L - 1].data, params.blocks[L - 1], cfg, CHECKPOINT, ws, out_tag="boundary")
    y_last = ws.take("y")
    hws = Workspace(ledger, L)
    head_norm(y_last.data, params, hws)
    hws.drop("af")
    ledger.free(y_last)
    loss, dlogits = cross_entropy(logits.data, targets)
    hws.put("dlogits", dlogits)
    ledger.free(logits)
    head_backward(params, hws)
    dY = hws.take("dY")

    grads_out: Grads = {}
    deferred: Grads = {}
    live_after = []
    prev = None
    for i in reversed(range(L)):
        if prev is not None:
            ledger.free(prev)
        bp = params.blocks[i]
        ws = Workspace(ledger, i)
        h_store = {s: t.data for s, t in retained[i].items()} if retain_h else None
        _, grads = block_backward_structured(dY.data, ckpt[i].data, bp, cfg, ws, h_store, keep=True)
        dX = ws.take("dX")
        if retain_h:
            for t in retained.pop(i).values():
                ledger.free(t)
        if keep_grads:
            grads_out[i] = _copy_grads(grads)
        if optimizer is not None:
            if interleaved:
                _apply(optimizer, params, i, grads)
            else:
                deferred[i] = _copy_grads(grads)
        ws.drop(*grads_in_workspace(ws))
        if ws.slots:
            raise RuntimeError(f"block {i} backward leaked {sorted(ws.slots)}")
        ledger.free(ckpt.pop(i))
        prev, dY = dY, dX
        live_after.append(ledger.live_bytes)
    ledger.free(prev)
    ledger.free(dY)

    for i, g in deferred.items():
        _apply(optimizer, params, i, g)
    rep = ledger.report(trace)
    return StepResult(loss, grads_out if keep_grads else None, rep.peak_bytes,
                      time.perf_counter() - t0, rep, live_after)


def mesp_step(batch, params: ModelParams, optimizer: SGD | None = None, ledger: MemoryLedger | None = None,
              keep_grads: bool = False, interleaved: bool = True, trace: bool = False) -> StepResult:
    """Structured backprop: checkpoint block inputs, recompute per block, h on demand."""
    return _checkpointed_step(batch, params, optimizer, ledger, keep_grads, False, interleaved, trace)


def mebp_step(batch, params: ModelParams, optimizer: SGD | None = None, ledger: MemoryLedger | None = None,
              keep_grads: bool = False, interleaved: bool = True, trace: bool = False) -> StepResult:
    """Same math as :func:`mesp_step`; every h stays resident from forward to its block's backward."""
    return _checkpointed_step(batch, params, optimizer, ledger, keep_grads, True, interleaved, trace)


STEP_FNS = {REFERENCE: reference_step, MEBP: mebp_step, MESP: mesp_step}


class GradStrategy:
    """One strategy bound to a parameter set, optimizer and session ledger."""

    def __init__(self, kind: str, params: ModelParams, optimizer: SGD | None = None,
                 ledger: MemoryLedger | None = None):
        self.kind = resolve_kind(kind)
        self.params = params
        self.optimizer = optimizer
        self.ledger = ledger if ledger is not None else MemoryLedger()
        if ledger is None:
            register_params(self.ledger, params)
        if optimizer is not None and optimizer.ledger is None:
            optimizer.ledger = self.ledger

    def step(self, batch, keep_grads: bool = False, trace: bool = False) -> StepResult:
        return STEP_FNS[self.kind](batch, self.params, self.optimizer, self.ledger,
                                   keep_grads=keep_grads, trace=trace)


class Equivalence(enum.Enum):
    EQUAL = "equal"
    DIFFERENT = "different"
    NOT_APPLICABLE = "not applicable"

    def __bool__(self):
        return self is Equivalence.EQUAL


def interleaved_update_equivalence_check(batch, params: ModelParams, optimizer: SGD) -> Equivalence:
    """Compare per-block immediate updates against update-after-backward.

    Only meaningful for plain SGD, whose update of one parameter never reads
    another; anything with optimizer state is reported as not applicable.
    """
    if not optimizer.is_plain:
        return Equivalence.NOT_APPLICABLE
    a, b = params.copy(), params.copy()
    mesp_step(batch, a, SGD(optimizer.lr), interleaved=True)
    mesp_step(batch, b, SGD(optimizer.lr), interleaved=False)
    same = all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.trainable(), b.trainable()))
    return Equivalence.EQUAL if same else Equivalence.DIFFERENT
