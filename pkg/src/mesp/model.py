"""Toy decoder-only transformer with LoRA adapters on seven sites per block.

Block layout (pre-norm, Qwen-style, learned absolute positions)::

    a1 = RMSNorm₁(x)                          γ₁ frozen
    q, k, v = LoRA(a1)                        causal multi-head attention
    x2 = x + LoRA_o(attn(q, k, v))
    a2 = RMSNorm₂(x2)
    y  = x2 + LoRA_down(SiLU(LoRA_gate(a2)) ⊙ LoRA_up(a2))

``block_forward`` runs in one of three retention modes.  ``STORE_ALL`` keeps
every tensor it produces, ``CHECKPOINT`` keeps nothing but the output, and
``RECOMPUTE`` keeps the set the structured backward needs.  The forward value
is the same in every mode; only what stays alive differs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mesp.ledger import Workspace
from mesp.tensor_core import (
    DType,
    rmsnorm_backward,
    rmsnorm_forward,
    silu,
    silu_backward,
    softmax_backward,
    softmax_row,
)

SITES = ("q", "k", "v", "o", "gate", "up", "down")

STORE_ALL = "store_all"
CHECKPOINT = "checkpoint_only"
RECOMPUTE = "backward_recompute"
MODES = (STORE_ALL, CHECKPOINT, RECOMPUTE)

# what RECOMPUTE leaves alive for block_backward; a1, a2 and the gated product
# are cheap elementwise results and get rebuilt on demand
RECOMPUTE_KEEP = frozenset({"xhat1", "rms1", "q", "k", "v", "alpha", "ctx",
                            "xhat2", "rms2", "gate", "up"})


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab: int = 257
    lora_rank: int = 8
    lora_alpha: float = 16.0
    max_seq: int = 64
    eps: float = 1e-6
    tie_embeddings: bool = False
    dtype: DType = DType.TEST

    def __post_init__(self):
        self.dtype = DType.parse(self.dtype)
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if 2 * self.lora_rank > min(self.d_model, self.d_ff):
            raise ValueError(f"lora_rank={self.lora_rank} must be at most half of "
                             f"min(d_model, d_ff)={min(self.d_model, self.d_ff)}")
        if not math.isfinite(self.scaling):
            raise ValueError("lora_alpha / lora_rank must be finite")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    def site_shape(self, site: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {"gate": (d, f), "up": (d, f), "down": (f, d)}.get(site, (d, d))


@dataclass
class LoraAdapter:
    A: np.ndarray  # [d_in, r]
    B: np.ndarray  # [r, d_out]
    s: float

    def __post_init__(self):
        if self.A.shape[1] != self.B.shape[0]:
            raise ValueError(f"adapter rank mismatch: A {self.A.shape}, B {self.B.shape}")


@dataclass
class BlockParams:
    index: int
    w: dict[str, np.ndarray]
    gamma1: np.ndarray
    gamma2: np.ndarray
    lora: dict[str, LoraAdapter]

    def __post_init__(self):
        if set(self.lora) != set(SITES) or set(self.w) != set(SITES):
            raise ValueError(f"a block needs exactly the sites {SITES}")


@dataclass
class PendingOffset:
    """Additive offset ``scale · direction(...)`` applied to adapters when read.

    Used by zeroth-order probing: the stored A, B stay untouched while the
    effective weights seen by the forward are shifted.
    """

    scale: float
    direction: Callable[[int, str, str, tuple[int, ...], np.dtype], np.ndarray]


@dataclass
class ModelParams:
    cfg: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    blocks: list[BlockParams]
    final_gamma: np.ndarray
    w_out_untied: np.ndarray | None
    pending: PendingOffset | None = None

    @property
    def w_out(self) -> np.ndarray:
        return self.tok_emb.T if self.w_out_untied is None else self.w_out_untied

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb, "final_gamma": self.final_gamma}
        if self.w_out_untied is not None:
            out["w_out"] = self.w_out_untied
        for bp in self.blocks:
            out[f"blocks.{bp.index}.gamma1"] = bp.gamma1
            out[f"blocks.{bp.index}.gamma2"] = bp.gamma2
            for site in SITES:
                out[f"blocks.{bp.index}.{site}.w0"] = bp.w[site]
        return out

    def trainable(self) -> list[tuple[str, np.ndarray]]:
        """All LoRA matrices in canonical order: block, site (q..down), A then B."""
        out = []
        for bp in self.blocks:
            for site in SITES:
                ad = bp.lora[site]
                out.append((f"blocks.{bp.index}.{site}.A", ad.A))
                out.append((f"blocks.{bp.index}.{site}.B", ad.B))
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {**self.frozen_arrays(), **dict(self.trainable())}

    def n_elements(self) -> int:
        return sum(a.size for a in self.named_arrays().values())

    def copy(self) -> "ModelParams":
        blocks = [BlockParams(bp.index, {k: v.copy() for k, v in bp.w.items()}, bp.gamma1.copy(),
                              bp.gamma2.copy(),
                              {k: LoraAdapter(a.A.copy(), a.B.copy(), a.s) for k, a in bp.lora.items()})
                  for bp in self.blocks]
        return ModelParams(self.cfg, self.tok_emb.copy(), self.pos_emb.copy(), blocks,
                           self.final_gamma.copy(),
                           None if self.w_out_untied is None else self.w_out_untied.copy())


def init_params(cfg: ModelConfig, seed: int = 0, init_std: float = 0.02, lora_std: float = 0.02,
                lora_b_std: float = 0.0, gamma_std: float = 0.1) -> ModelParams:
    """Random frozen base plus fresh adapters (A ~ N(0, lora_std²), B = 0 by default).

    The RMSNorm scales are drawn as 1 + N(0, gamma_std²) so that a frozen,
    non-trivial γ is exercised everywhere.
    """
    rng = np.random.default_rng(seed)
    dt = cfg.dtype.np
    d, r = cfg.d_model, cfg.lora_rank

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(dt)

    tok = normal((cfg.vocab, d), init_std)
    pos = normal((cfg.max_seq, d), init_std)
    blocks = []
    for i in range(cfg.n_layers):
        w, lora = {}, {}
        for site in SITES:
            din, dout = cfg.site_shape(site)
            w[site] = normal((din, dout), init_std)
            B = normal((r, dout), lora_b_std) if lora_b_std else np.zeros((r, dout), dt)
            lora[site] = LoraAdapter(normal((din, r), lora_std), B, cfg.scaling)
        blocks.append(BlockParams(i, w, 1 + normal(d, gamma_std), 1 + normal(d, gamma_std), lora))
    w_out = None if cfg.tie_embeddings else normal((d, cfg.vocab), init_std)
    return ModelParams(cfg, tok, pos, blocks, 1 + normal(d, gamma_std), w_out)


# === LORA LINEAR ===

def lora_linear_forward(x: np.ndarray, W0: np.ndarray, adapter: LoraAdapter, keep_h: bool = False):
    """y = x W₀ + s·(x A) B.  Returns (y, h) with h = x A only when ``keep_h``."""
    if x.shape[-1] != W0.shape[0] or W0.shape[0] != adapter.A.shape[0] or W0.shape[1] != adapter.B.shape[1]:
        raise ValueError(f"lora_linear_forward: x {x.shape}, W0 {W0.shape}, "
                         f"A {adapter.A.shape}, B {adapter.B.shape}")
    h = np.matmul(x, adapter.A)
    y = np.matmul(x, W0) + adapter.s * np.matmul(h, adapter.B)
    return y, (h if keep_h else None)


def lora_linear_backward(g: np.ndarray, x: np.ndarray, W0: np.ndarray, adapter: LoraAdapter,
                         h: np.ndarray | None = None, ws: Workspace | None = None, name: str = "lora"):
    """Gradients (dA, dB, dx) of one LoRA linear given g = dL/dy.

    When ``h`` is None it is recomputed as x A and released right after dB.
    With a workspace, dB/dA are registered as ``{name}.dB``/``{name}.dA``
    (tag ``gradient``) and dx as ``{name}.dx``; the caller owns them.
    """
    A, B, s = adapter.A, adapter.B, adapter.s
    if g.shape != x.shape[:-1] + (W0.shape[1],) or x.shape[-1] != A.shape[0]:
        raise ValueError(f"lora_linear_backward: g {g.shape} and x {x.shape} do not match W0 {W0.shape}")
    expected_h = x.shape[:-1] + (A.shape[1],)
    if h is not None and h.shape != expected_h:
        raise ValueError(f"lora_linear_backward: h {h.shape} inconsistent with x·A {expected_h}")
    ws = ws if ws is not None else Workspace()
    own_h = h is None
    if own_h:
        h = ws.put(f"{name}.h", np.matmul(x, A), tag="h_projection")
    sg = s * g
    r = A.shape[1]
    dB = ws.put(f"{name}.dB", h.reshape(-1, r).T @ sg.reshape(-1, sg.shape[-1]), tag="gradient")
    if own_h:
        ws.drop(f"{name}.h")
    dh = ws.put(f"{name}.dh", np.matmul(sg, B.T))
    dA = ws.put(f"{name}.dA", x.reshape(-1, x.shape[-1]).T @ dh.reshape(-1, r), tag="gradient")
    dx = ws.put(f"{name}.dx", np.matmul(dh, A.T) + np.matmul(g, W0.T))
    ws.drop(f"{name}.dh")
    return dA, dB, dx


# === ATTENTION ===

def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def split_heads(t: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, d = t.shape
    return t.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(t: np.ndarray) -> np.ndarray:
    b, h, n, hd = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * hd)


def attention_forward(Q, K, V, causal: bool = True, ws: Workspace | None = None):
    """softmax(QKᵀ/√d + mask) V per head.  Q, K, V are [b, heads, n, head_dim]."""
    if not (Q.shape == K.shape == V.shape) or Q.ndim != 4:
        raise ValueError(f"attention_forward: Q {Q.shape}, K {K.shape}, V {V.shape}")
    ws = ws if ws is not None else Workspace()
    n, hd = Q.shape[2], Q.shape[3]
    scores = np.matmul(Q, K.transpose(0, 1, 3, 2)) / np.sqrt(hd).astype(Q.dtype)
    if causal:
        scores = np.where(causal_mask(n), -np.inf, scores).astype(Q.dtype)
    ws.put("scores", scores)
    alpha = ws.put("alpha", softmax_row(scores))
    ws.drop("scores")
    return np.matmul(alpha, V), alpha


def attention_backward(dout, Q, K, V, alpha, ws: Workspace | None = None):
    """(dQ, dK, dV) for the attention above; masked entries contribute exactly 0."""
    if not (dout.shape == Q.shape == K.shape == V.shape) or alpha.shape != Q.shape[:3] + (Q.shape[2],):
        raise ValueError(f"attention_backward: dout {dout.shape}, Q {Q.shape}, alpha {alpha.shape}")
    ws = ws if ws is not None else Workspace()
    inv = (1.0 / np.sqrt(Q.shape[3])).astype(Q.dtype)
    dV = np.matmul(alpha.transpose(0, 1, 3, 2), dout)
    dalpha = ws.put("dalpha", np.matmul(dout, V.transpose(0, 1, 3, 2)))
    dscores = ws.put("dscores", softmax_backward(dalpha, alpha))
    ws.drop("dalpha")
    dQ = np.matmul(dscores, K) * inv
    dK = np.matmul(dscores.transpose(0, 1, 3, 2), Q) * inv
    ws.drop("dscores")
    return dQ, dK, dV


# === BLOCK ===

def effective_adapter(bp: BlockParams, site: str, pending: PendingOffset | None,
                      ws: Workspace | None) -> LoraAdapter:
    ad = bp.lora[site]
    if pending is None or pending.scale == 0:
        return ad
    A = ad.A + pending.scale * pending.direction(bp.index, site, "A", ad.A.shape, ad.A.dtype)
    B = ad.B + pending.scale * pending.direction(bp.index, site, "B", ad.B.shape, ad.B.dtype)
    if ws is not None:
        # transient copies; callers drop them right after the projection
        ws.put(f"pert.{site}.A", A, tag="perturbation")
        ws.put(f"pert.{site}.B", B, tag="perturbation")
    return LoraAdapter(A, B, ad.s)


def _project(ws, bp, site, x, keep_h, pending):
    perturbed = pending is not None and pending.scale != 0
    ad = effective_adapter(bp, site, pending, ws)
    y, h = lora_linear_forward(x, bp.w[site], ad, keep_h=True)
    ws.put(f"h_{site}", h, tag="h_projection")
    ws.put(site, y)
    if perturbed:
        ws.drop(f"pert.{site}.A", f"pert.{site}.B")
    if not keep_h:
        ws.drop(f"h_{site}")
    return y


def block_forward(x: np.ndarray, bp: BlockParams, cfg: ModelConfig, mode: str = CHECKPOINT,
                  ws: Workspace | None = None, keep_h: bool = False, out_tag: str = "checkpoint",
                  pending: PendingOffset | None = None) -> np.ndarray:
    """Run one block; the output is registered in ``ws`` as ``"y"``.

    Retained tensors stay in ``ws`` under their schedule names (``xhat1``,
    ``alpha``, ``gate`` ...).  ``keep_h`` additionally retains the seven LoRA
    projections ``h_<site>``; ``STORE_ALL`` always retains them.
    """
    if mode not in MODES:
        raise ValueError(f"unknown block mode {mode!r}; expected one of {MODES}")
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ValueError(f"block_forward: expected [b, n, {cfg.d_model}], got {x.shape}")
    ws = ws if ws is not None else Workspace()
    store_all = mode == STORE_ALL
    keep = RECOMPUTE_KEEP if mode == RECOMPUTE else frozenset()
    keep_h = keep_h or store_all

    def release(*names):
        if not store_all:
            ws.drop(*[nm for nm in names if nm not in keep])

    xhat1, a1, rms1 = rmsnorm_forward(x, bp.gamma1, cfg.eps)
    ws.put("xhat1", xhat1)
    ws.put("rms1", rms1)
    ws.put("a1", a1)
    release("xhat1", "rms1")
    q = _project(ws, bp, "q", a1, keep_h, pending)
    k = _project(ws, bp, "k", a1, keep_h, pending)
    v = _project(ws, bp, "v", a1, keep_h, pending)
    release("a1")

    H = cfg.n_heads
    out, _ = attention_forward(split_heads(q, H), split_heads(k, H), split_heads(v, H), ws=ws)
    ctx = ws.put("ctx", merge_heads(out))
    release("alpha", "q", "k", "v")
    o = _project(ws, bp, "o", ctx, keep_h, pending)
    release("ctx")
    x2 = ws.put("x2", x + o)
    release("o")

    xhat2, a2, rms2 = rmsnorm_forward(x2, bp.gamma2, cfg.eps)
    ws.put("xhat2", xhat2)
    ws.put("rms2", rms2)
    ws.put("a2", a2)
    release("xhat2", "rms2")
    gate = _project(ws, bp, "gate", a2, keep_h, pending)
    up = _project(ws, bp, "up", a2, keep_h, pending)
    release("a2")
    sg = ws.put("sg", silu(gate))
    m = ws.put("m", sg * up)
    release("sg", "gate", "up")
    down = _project(ws, bp, "down", m, keep_h, pending)
    release("m")
    y = ws.put("y", x2 + down, tag=out_tag)
    release("x2", "down")
    return y


def _operand(ws: Workspace, name: str, build: Callable[[], np.ndarray]) -> tuple[np.ndarray, bool]:
    """Fetch a retained tensor or rebuild it as a transient (returns built flag)."""
    if name in ws:
        return ws[name], False
    return ws.put(name, build()), True


def block_backward(dY: np.ndarray, ws: Workspace, bp: BlockParams, cfg: ModelConfig,
                   h_store: dict[str, np.ndarray] | None = None, release: bool = True):
    """Chain the block's backward kernels in reverse, LoRA grads for all seven sites.

    ``ws`` holds the forward tensors (a ``STORE_ALL`` or ``RECOMPUTE`` set).
    LoRA ``h`` comes from ``ws`` when stored there, else from ``h_store``,
    else it is recomputed.  With ``release`` the forward tensors are freed as
    soon as they are consumed; otherwise they stay for the caller to free.

    Returns (dX, grads) with grads[site] = (dA, dB).  dX is registered in
    ``ws`` as ``"dX"`` with tag ``upstream``; the grads as ``grad.<site>.A/B``.
    """
    H = cfg.n_heads
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def consume(*names):
        if release:
            ws.drop(*[nm for nm in names if nm in ws])

    def h_for(site):
        if f"h_{site}" in ws:
            return ws[f"h_{site}"]
        if h_store is not None:
            return h_store[site]
        return None

    def lora_bwd(site, g, x):
        dA, dB, dx = lora_linear_backward(g, x, bp.w[site], bp.lora[site], h_for(site), ws, name=site)
        ws.slots[f"grad.{site}.A"] = ws.slots.pop(f"{site}.dA")
        ws.slots[f"grad.{site}.B"] = ws.slots.pop(f"{site}.dB")
        grads[site] = (dA, dB)
        return dx

    # MLP residual branch
    m, built = _operand(ws, "m", lambda: silu(ws["gate"]) * ws["up"])
    dm = lora_bwd("down", dY, m)
    ws.drop("m") if built else consume("m")
    gate, up = ws["gate"], ws["up"]
    ws.put("dup", dm * silu(gate))
    ws.put("dgate", silu_backward(dm * up, gate))
    ws.drop("down.dx")
    consume("gate", "up", "sg")

    a2, built = _operand(ws, "a2", lambda: ws["xhat2"] * bp.gamma2)
    da2 = lora_bwd("up", ws["dup"], a2)
    ws.drop("dup")
    da2 += lora_bwd("gate", ws["dgate"], a2)
    ws.drop("gate.dx", "dgate")
    ws.drop("a2") if built else consume("a2")
    ws.put("dx2n", rmsnorm_backward(da2, ws["xhat2"], bp.gamma2, ws["rms2"]))
    ws.drop("up.dx")
    consume("xhat2", "rms2", "x2", "down")
    dx2 = ws.put("dx2", dY + ws["dx2n"])
    ws.drop("dx2n")

    # attention residual branch
    dctx = lora_bwd("o", dx2, ws["ctx"])
    consume("ctx", "o")
    dQ, dK, dV = attention_backward(split_heads(dctx, H), split_heads(ws["q"], H),
                                    split_heads(ws["k"], H), split_heads(ws["v"], H), ws["alpha"], ws)
    ws.put("dq", merge_heads(dQ))
    ws.put("dk", merge_heads(dK))
    ws.put("dv", merge_heads(dV))
    ws.drop("o.dx")
    consume("alpha", "q", "k", "v")

    a1, built = _operand(ws, "a1", lambda: ws["xhat1"] * bp.gamma1)
    da1 = lora_bwd("q", ws["dq"], a1)
    ws.drop("dq")
    for site in ("k", "v"):
        da1 += lora_bwd(site, ws[f"d{site}"], a1)
        ws.drop(f"{site}.dx", f"d{site}")
    ws.drop("a1") if built else consume("a1")
    ws.put("dx1n", rmsnorm_backward(da1, ws["xhat1"], bp.gamma1, ws["rms1"]))
    ws.drop("q.dx")
    consume("xhat1", "rms1")
    dX = ws.put("dX", dx2 + ws["dx1n"], tag="upstream")
    ws.drop("dx2", "dx1n")
    return dX, grads


def grads_in_workspace(ws: Workspace) -> list[str]:
    return [nm for nm in ws.slots if nm.startswith("grad.")]


def block_backward_structured(dY: np.ndarray, x: np.ndarray | None, bp: BlockParams, cfg: ModelConfig,
                              ws: Workspace | None = None, h_store: dict[str, np.ndarray] | None = None,
                              keep: bool = False):
    """Recompute one block from its checkpointed input, then run its backward.

    With ``keep=False`` every tensor is released before returning.  With
    ``keep=True`` the ``dX`` and ``grad.*`` slots stay in ``ws`` for the
    caller (an optimizer update reads them before they are freed).
    """
    if x is None:
        raise KeyError(f"no checkpointed input for block {bp.index}")
    ws = ws if ws is not None else Workspace(block=bp.index)
    block_forward(x, bp, cfg, RECOMPUTE, ws, out_tag="intermediate")
    ws.drop("y")
    dX, grads = block_backward(dY, ws, bp, cfg, h_store=h_store)
    if not keep:
        ws.clear()
    return dX, grads


# === EMBEDDING AND HEAD ===

def embed(tokens: np.ndarray, params: ModelParams) -> np.ndarray:
    cfg = params.cfg
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [b, n], got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"token id out of range [0, {cfg.vocab})")
    n = tokens.shape[1]
    if n > cfg.max_seq:
        raise ValueError(f"sequence length {n} exceeds max_seq={cfg.max_seq}")
    return params.tok_emb[tokens] + params.pos_emb[:n]


def head_norm(y_last: np.ndarray, params: ModelParams, ws: Workspace) -> np.ndarray:
    """Final RMSNorm; registers ``xhatf``, ``rmsf`` and the scaled output ``af``."""
    xhat, a, rms = rmsnorm_forward(y_last, params.final_gamma, params.cfg.eps)
    ws.put("xhatf", xhat)
    ws.put("rmsf", rms)
    return ws.put("af", a)


def head_logits(ws: Workspace, params: ModelParams) -> np.ndarray:
    return ws.put("logits", np.matmul(ws["af"], params.w_out), tag="logits")


def head_backward(params: ModelParams, ws: Workspace, release: bool = True) -> np.ndarray:
    """dL/d(last block output) from ``ws["dlogits"]``; registered as ``"dY"`` (tag ``upstream``)."""
    d_af = ws.put("d_af", np.matmul(ws["dlogits"], params.w_out.T))
    ws.drop("dlogits")
    dY = ws.put("dY", rmsnorm_backward(d_af, ws["xhatf"], params.final_gamma, ws["rmsf"]), tag="upstream")
    ws.drop("d_af")
    if release:
        ws.drop("xhatf", "rmsf")
    return dY


# === WHOLE MODEL ===

@dataclass
class CheckpointStore:
    inputs: dict[int, np.ndarray] = field(default_factory=dict)
    logits: np.ndarray | None = None
    intermediates: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


def model_forward(tokens: np.ndarray, params: ModelParams, mode: str = CHECKPOINT,
                  pending: PendingOffset | None = None) -> tuple[np.ndarray, CheckpointStore]:
    """Full forward; ``store`` holds block inputs, logits and the mode's retained set."""
    cfg = params.cfg
    store = CheckpointStore()
    x = embed(tokens, params)
    for bp in params.blocks:
        store.inputs[bp.index] = x
        ws = Workspace(block=bp.index)
        y = block_forward(x, bp, cfg, mode, ws, pending=pending)
        if mode != CHECKPOINT:
            store.intermediates[bp.index] = {nm: ws[nm] for nm in ws.slots if nm != "y"}
        x = y
    hws = Workspace()
    head_norm(x, params, hws)
    store.logits = head_logits(hws, params)
    return store.logits, store


# === PARAMETER SNAPSHOTS ===
#
# Little-endian, no header: a sequence of records until EOF, each
#   u32 name_len | name (utf-8) | u32 rank | rank × u32 extents | float32 values (row-major)

def save_snapshot(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_snapshot(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"truncated snapshot at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    while pos < len(data):
        (nlen,) = take("<I")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        count = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * count > len(data):
            raise ValueError(f"truncated snapshot in array {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return out


def load_into(params: ModelParams, arrays: dict[str, np.ndarray], strict: bool = False) -> list[str]:
    """Copy snapshot arrays into ``params`` in place; returns the names applied."""
    targets = params.named_arrays()
    applied = []
    for name, arr in arrays.items():
        if name not in targets:
            if strict:
                raise KeyError(f"snapshot array {name!r} has no matching parameter")
            continue
        dst = targets[name]
        if dst.shape != arr.shape:
            raise ValueError(f"snapshot array {name!r} has shape {arr.shape}, parameter {dst.shape}")
        dst[...] = arr
        applied.append(name)
    return applied
