"""Modeled-byte accounting of tensor lifetimes.

Strategies route every materialized tensor through a :class:`MemoryLedger`:
``alloc`` when it is created, ``free`` when it is released.  The ledger keeps
the ordered event log, the running live total and the peak.  Bytes are
payload only (shape × element width); allocator slack is not modeled.

What counts as "materialized" is fixed by the model code: every named tensor
in a block schedule, every LoRA projection ``h``, and the n²-sized attention
scratch (scores, dα, dscores).  Products inside a single fused expression,
such as ``x W₀`` before the LoRA term is added, are not recorded.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from mesp.tensor_core import Tensor

TAGS = ("checkpoint", "intermediate", "h_projection", "gradient", "parameter",
        "logits", "optimizer", "perturbation")


class LedgerError(RuntimeError):
    pass


@dataclass(frozen=True)
class AllocEvent:
    seq: int
    id: int
    bytes: int
    tag: str
    action: str  # "alloc" | "free"
    block: int | None = None


@dataclass
class LedgerReport:
    peak_bytes: int
    peak_event_seq: int
    live_bytes_by_tag: dict[str, int]
    events: list[AllocEvent] | None = None

    @property
    def activation_peak(self) -> int:
        """Peak minus the parameter and optimizer bytes resident at that moment."""
        persistent = self.live_bytes_by_tag.get("parameter", 0) + self.live_bytes_by_tag.get("optimizer", 0)
        return self.peak_bytes - persistent


class MemoryLedger:
    """Ordered alloc/free log with live-byte and peak tracking.

    A session-level ledger can open measurement windows with :meth:`window`;
    reports then cover the events since the last window start, with the live
    bytes carried in at the start counted toward the window's peak.
    """

    def __init__(self):
        self.events: list[AllocEvent] = []
        self._live: dict[int, AllocEvent] = {}
        self.live_bytes = 0
        self._by_tag: dict[str, int] = defaultdict(int)
        self._seq = 0
        self._window_start = 0
        self.peak_bytes = 0
        self.peak_event_seq = 0
        self._peak_tags: dict[str, int] = {}

    # -- raw event interface --

    def record(self, event: AllocEvent) -> int:
        if event.action == "alloc":
            if event.id in self._live:
                raise LedgerError(f"tensor id {event.id} allocated twice")
            self._live[event.id] = event
            self.live_bytes += event.bytes
            self._by_tag[event.tag] += event.bytes
        elif event.action == "free":
            prior = self._live.pop(event.id, None)
            if prior is None:
                raise LedgerError(f"free of tensor id {event.id} with no live allocation")
            if prior.bytes != event.bytes:
                raise LedgerError(f"free of tensor id {event.id} with {event.bytes} bytes, allocated {prior.bytes}")
            self.live_bytes -= prior.bytes
            self._by_tag[prior.tag] -= prior.bytes
        else:
            raise LedgerError(f"unknown action {event.action!r}")
        self.events.append(event)
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
            self.peak_event_seq = event.seq
            self._peak_tags = {k: v for k, v in self._by_tag.items() if v}
        return self.live_bytes

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    # -- tensor interface --

    def alloc(self, data: np.ndarray, tag: str = "intermediate", block: int | None = None) -> Tensor:
        t = Tensor(data, tag=tag, block=block)
        self.record(AllocEvent(self._next_seq(), t.id, t.nbytes, tag, "alloc", block))
        return t

    def track(self, t: Tensor) -> Tensor:
        self.record(AllocEvent(self._next_seq(), t.id, t.nbytes, t.tag, "alloc", t.block))
        return t

    def free(self, t: Tensor) -> None:
        self.record(AllocEvent(self._next_seq(), t.id, t.nbytes, t.tag, "free", t.block))

    def is_live(self, t: Tensor) -> bool:
        return t.id in self._live

    # -- queries --

    def live_by_tag(self) -> dict[str, int]:
        return {k: v for k, v in self._by_tag.items() if v}

    def live_intermediate_blocks(self) -> set[int | None]:
        return {e.block for e in self._live.values() if e.tag == "intermediate"}

    def window(self) -> None:
        """Start a new measurement window at the current live total."""
        self._window_start = len(self.events)
        self.peak_bytes = self.live_bytes
        self.peak_event_seq = self.events[-1].seq if self.events else 0
        self._peak_tags = self.live_by_tag()

    def window_events(self) -> list[AllocEvent]:
        return self.events[self._window_start:]

    def report(self, trace: bool = False) -> LedgerReport:
        return LedgerReport(self.peak_bytes, self.peak_event_seq, dict(self._peak_tags),
                            list(self.window_events()) if trace else None)

    # -- export --

    def export_trace(self, path_or_buf, events: list[AllocEvent] | None = None) -> None:
        """Write one tab-separated line per event: seq, action, id, bytes, tag.

        Tensor ids are renumbered by first appearance in ``events`` so that a
        trace does not depend on how many tensors the process made before.
        A free of a tensor allocated before the exported range gets a fresh
        number too.
        """
        events = self.events if events is None else events
        ids: dict[int, int] = {}
        lines = ["# seq\taction\tid\tbytes\ttag"]
        for e in events:
            i = ids.setdefault(e.id, len(ids) + 1)
            lines.append(f"{e.seq}\t{e.action}\t{i}\t{e.bytes}\t{e.tag}")
        text = "\n".join(lines) + "\n"
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w") as f:
                f.write(text)


def read_trace(path_or_buf) -> list[tuple[int, str, int, int, str]]:
    text = path_or_buf.read() if hasattr(path_or_buf, "read") else open(path_or_buf).read()
    rows = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        seq, action, tid, nbytes, tag = line.split("\t")
        rows.append((int(seq), action, int(tid), int(nbytes), tag))
    return rows


def peak_of_trace(rows) -> int:
    """Max prefix sum of signed byte deltas over an exported trace."""
    deltas = np.array([b if a == "alloc" else -b for _, a, _, b, _ in rows], dtype=np.int64)
    if deltas.size == 0:
        return 0
    return int(max(0, np.cumsum(deltas).max()))


def reduction_report(a: LedgerReport | float, b: LedgerReport | float) -> float:
    """Percent reduction of ``a`` relative to baseline ``b``, cut to one decimal toward zero.

    136.2 vs 360.8 is 62.2506...% and reports as 62.2.
    """
    pa = a.peak_bytes if isinstance(a, LedgerReport) else float(a)
    pb = b.peak_bytes if isinstance(b, LedgerReport) else float(b)
    if pb == 0:
        raise ZeroDivisionError("reduction_report: baseline peak is zero")
    tenths = round((1.0 - pa / pb) * 1000.0, 6)  # absorb representation error before cutting
    return math.trunc(tenths) / 10.0


def reports_to_csv(rows: list[dict], buf: io.TextIOBase | None = None) -> str:
    out = buf or io.StringIO()
    if rows:
        w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return out.getvalue() if buf is None else ""


# === CLOSED-FORM MEMORY MODEL ===

@dataclass
class MemoryModel:
    """Element counts behind a peak prediction, split by term."""

    strategy: str
    width: int
    params: int
    terms: dict[str, int] = field(default_factory=dict)

    @property
    def activation_bytes(self) -> int:
        return sum(self.terms.values()) * self.width

    @property
    def peak_bytes(self) -> int:
        return self.params * self.width + self.activation_bytes


# === NAMED WORKSPACE ===

class Workspace:
    """Named live tensors for one computation segment, mirrored into a ledger.

    With ``ledger=None`` this is a plain name → array map, so model code runs
    the same with or without accounting.
    """

    def __init__(self, ledger: MemoryLedger | None = None, block: int | None = None):
        self.ledger = ledger
        self.block = block
        self.slots: dict[str, Tensor] = {}

    def put(self, name: str, data: np.ndarray, tag: str = "intermediate") -> np.ndarray:
        if name in self.slots:
            raise LedgerError(f"workspace slot {name!r} already live")
        if self.ledger is not None:
            t = self.ledger.alloc(data, tag, self.block)
        else:
            t = Tensor(data, tag=tag, block=self.block)
        self.slots[name] = t
        return data

    def adopt(self, name: str, t: Tensor) -> np.ndarray:
        """Take ownership of an already-tracked tensor."""
        self.slots[name] = t
        return t.data

    def __getitem__(self, name: str) -> np.ndarray:
        return self.slots[name].data

    def __contains__(self, name: str) -> bool:
        return name in self.slots

    def get(self, name: str, default=None):
        t = self.slots.get(name)
        return default if t is None else t.data

    def take(self, name: str) -> Tensor:
        """Remove a slot without freeing it; the caller now owns the tensor."""
        return self.slots.pop(name)

    def drop(self, *names: str) -> None:
        for name in names:
            t = self.slots.pop(name)
            if self.ledger is not None:
                self.ledger.free(t)

    def clear(self) -> None:
        self.drop(*list(self.slots))

    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.slots.values())


def _sizes(cfg, b: int, n: int) -> dict[str, int]:
    d, F, r, H, V, L = cfg.d_model, cfg.d_ff, cfg.lora_rank, cfg.n_heads, cfg.vocab, cfg.n_layers
    N = b * n
    lora = r * (11 * d + 3 * F)  # A and B over q, k, v, o (d→d), gate, up (d→F), down (F→d)
    frozen_block = 4 * d * d + 3 * d * F + 2 * d
    params = V * d + cfg.max_seq * d + d + (0 if cfg.tie_embeddings else d * V) + L * (frozen_block + lora)
    return dict(N=N, d=d, F=F, r=r, H=H, V=V, L=L, att=b * H * n * n, O=N * d, lora=lora, params=params,
                g_down=r * (F + d), g_mlp=r * (F + d) * 3, g_o=2 * r * d)


def block_terms(cfg, b: int, n: int) -> dict[str, int]:
    """Per-block element counts I, O, T plus the pieces they are built from.

    I  everything a store-all forward produces in one block, block input included:
       12 [N×d] tensors, 2 rms rows, 7 LoRA h, 4 [N×d_ff], 1 attention map.
    O  the block output [N×d].
    R  the set a recompute forward leaves for the structured backward:
       xhat₁, q, k, v, ctx, xhat₂ ([N×d] each), 2 rms rows, α, gate, up.
    T  the larger of the two backward working-set peaks, MLP side (R + dm,
       dup, dgate + the down-projection grads) and attention side (xhat₁,
       q, k, v, α, dx₂, dctx, dα, dscores + four sites' grads).
    """
    s = _sizes(cfg, b, n)
    N, d, F, r, att = s["N"], s["d"], s["F"], s["r"], s["att"]
    I = 12 * N * d + 2 * N + 7 * N * r + 4 * N * F + att
    R = 6 * N * d + 2 * N + att + 2 * N * F
    t_mlp = R + 3 * N * F + s["g_down"]
    t_attn = 4 * N * d + N + att + 2 * N * d + 2 * att + s["g_mlp"] + s["g_o"]
    return dict(I=I, O=N * d, R=R, T=max(t_mlp, t_attn), T_mlp=t_mlp, T_attn=t_attn,
                h=N * r, att=att, lora=s["lora"])


def modeled_complexity(cfg, strategy_kind: str, b: int, n: int) -> MemoryModel:
    """Closed-form peak prediction for one training step, in modeled bytes.

    reference  P + stored set + max(head backward, grads of L−1 blocks + block-0 backward)
    mesp       P + L·O + max(dY + T, head moments)
    mebp       mesp + 7·L·N·r (every h resident)
    mezo       P + largest single forward moment (no checkpoints)

    The head moments (logits and dlogits live together) only win when the
    vocabulary is large next to d_model and d_ff.  Only the moments that can
    dominate at realistic shapes are modeled; at very short sequences a
    backward moment holding many adapter gradients can peak instead, and
    the prediction then runs a few percent low.
    """
    kind = {"reference": "reference_store_all", "mebp": "mebp_store_h", "mesp": "mesp_recompute_h"}.get(
        strategy_kind, strategy_kind)
    s = _sizes(cfg, b, n)
    bt = block_terms(cfg, b, n)
    N, d, F, r, V, L, att = s["N"], s["d"], s["F"], s["r"], s["V"], s["L"], s["att"]
    width = cfg.dtype.width
    fwd_attn = 4 * N * d + 2 * att  # inference-mode block moments, block input included
    fwd_mlp = 2 * N * d + 4 * N * F
    if kind == "reference_store_all":
        head = 2 * N * d + N + N * V  # xhatf, af, rmsf, logits
        stored = (L + 1) * N * d + L * (bt["I"] - N * d) + head
        mlp = s["g_down"] + 3 * N * F + N * d
        attn = s["g_mlp"] + s["g_o"] + 3 * N * d + 2 * att
        block = (L - 1) * s["lora"] + max(mlp, attn)
        terms = {"stored": stored, "working": max(block, N * V + N * d)}
    elif kind in ("mesp_recompute_h", "mebp_store_h"):
        head = max(3 * N * d + N + N * V,             # final norm with logits live
                   N * d + N + 2 * N * V,             # logits and dlogits
                   N * V + max(fwd_attn, fwd_mlp) - N * d)  # last block rebuilt with logits live
        terms = {"checkpoints": L * N * d, "working": max(N * d + bt["T"], head)}
        if kind == "mebp_store_h":
            terms["h_retained"] = 7 * L * N * r
    elif kind == "mezo":
        head = max(3 * N * d + N, 2 * N * d + N * V)
        terms = {"working": max(fwd_attn, fwd_mlp, head, max(d, F) * r)}
    else:
        raise ValueError(f"unknown strategy {strategy_kind!r}")
    return MemoryModel(kind, width, s["params"], terms)
