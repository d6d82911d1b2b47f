"""Ledger-peak sweeps over model depth, sequence length and LoRA rank."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from mesp.ledger import MemoryLedger, modeled_complexity, reduction_report
from mesp.mezo import MezoConfig, mezo_step
from mesp.model import ModelConfig, init_params
from mesp.strategies import MEBP, MESP, REFERENCE, STEP_FNS, register_params

SHORT = {REFERENCE: "reference", MEBP: "mebp", MESP: "mesp", "mezo": "mezo"}


@dataclass(frozen=True)
class Cell:
    layers: int
    seq: int
    rank: int
    batch: int = 1


@dataclass
class CellResult:
    cell: Cell
    strategy: str
    peak_bytes: int
    activation_bytes: int
    modeled_bytes: int
    width: int = 8
    trace: str | None = None

    @property
    def model_error(self) -> float:
        return self.peak_bytes / self.modeled_bytes - 1.0


def sweep_cells(layers, seqs, ranks, base_rank: int, base_seq: int, batch: int = 1) -> list[Cell]:
    """Sequence sweep at ``base_rank`` plus rank sweep at ``base_seq``, for every depth."""
    cells = []
    for L in layers:
        for n in seqs:
            cells.append(Cell(L, n, base_rank, batch))
        for r in ranks:
            cells.append(Cell(L, base_seq, r, batch))
    return list(dict.fromkeys(cells))


def cell_config(base: ModelConfig, cell: Cell) -> ModelConfig:
    return replace(base, n_layers=cell.layers, lora_rank=cell.rank, max_seq=max(base.max_seq, cell.seq))


def run_cell(base: ModelConfig, cell: Cell, seed: int = 0, include_mezo: bool = True,
             trace: bool = False) -> list[CellResult]:
    """One step of every strategy on the same seeded batch; each in its own ledger session."""
    cfg = cell_config(base, cell)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, cell.layers, cell.seq, cell.rank])
    batch = (rng.integers(0, 256, (cell.batch, cell.seq)), rng.integers(0, 256, (cell.batch, cell.seq)))
    out = []
    kinds = [REFERENCE, MEBP, MESP] + (["mezo"] if include_mezo else [])
    for kind in kinds:
        p = params.copy()
        led = MemoryLedger()
        register_params(led, p)
        if kind == "mezo":
            mezo_step(batch, p, MezoConfig(seed=seed), 0, led)
        else:
            STEP_FNS[kind](batch, p, None, led)
        rep = led.report(trace)
        modeled = modeled_complexity(cfg, kind, cell.batch, cell.seq)
        text = None
        if trace:
            buf = io.StringIO()
            led.export_trace(buf, rep.events)
            text = buf.getvalue()
        out.append(CellResult(cell, SHORT[kind], rep.peak_bytes, rep.activation_peak,
                              modeled.peak_bytes, cfg.dtype.width, text))
    return out


def run_sweep(base: ModelConfig, cells: list[Cell], seed: int = 0, include_mezo: bool = True,
              trace: bool = False, parallel: int = 1) -> list[CellResult]:
    if not cells:
        raise ValueError("empty sweep")
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as ex:
            futs = [ex.submit(run_cell, base, c, seed, include_mezo, trace) for c in cells]
            chunks = [f.result() for f in futs]
    else:
        chunks = [run_cell(base, c, seed, include_mezo, trace) for c in cells]
    return [r for chunk in chunks for r in chunk]


# === TABLES ===

def _by(results):
    return {(r.cell, r.strategy): r for r in results}


def results_csv(results: list[CellResult], header_lines=()) -> str:
    idx = _by(results)
    buf = io.StringIO()
    for h in header_lines:
        buf.write(f"# {h}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layers", "seq", "rank", "batch", "strategy", "peak_bytes", "activation_bytes",
                "modeled_bytes", "model_error_pct", "reduction_vs_reference_pct", "reduction_vs_mebp_pct"])
    for r in results:
        ref, mebp = idx[(r.cell, "reference")], idx[(r.cell, "mebp")]
        w.writerow([r.cell.layers, r.cell.seq, r.cell.rank, r.cell.batch, r.strategy, r.peak_bytes,
                    r.activation_bytes, r.modeled_bytes, f"{100 * r.model_error:.2f}",
                    reduction_report(r.peak_bytes, ref.peak_bytes),
                    reduction_report(r.peak_bytes, mebp.peak_bytes)])
    return buf.getvalue()


def _mb(b: int) -> str:
    return f"{b / 2**20:.3f}"


def _grid(results, varying: str, fixed: dict) -> tuple[list, dict]:
    cells = sorted({r.cell for r in results if all(getattr(r.cell, k) == v for k, v in fixed.items())},
                   key=lambda c: getattr(c, varying))
    return cells, _by(results)


def _table(title, results, varying, fixed, metric="peak_bytes") -> list[str]:
    cells, idx = _grid(results, varying, fixed)
    if len(cells) < 1:
        return []
    strategies = [s for s in ("mebp", "mezo", "mesp", "reference") if (cells[0], s) in idx]
    head = [f"{varying}={getattr(c, varying)}" for c in cells]
    lines = [f"### {title}", "<!-- " + ", ".join(f"{k}={v}" for k, v in fixed.items()) + " -->", "",
             "| Method | " + " | ".join(head) + " |", "|---|" + "---:|" * len(cells)]
    for s in strategies:
        lines.append(f"| {s} | " + " | ".join(_mb(getattr(idx[(c, s)], metric)) for c in cells) + " |")
    for s in strategies:
        if s == "mebp":
            continue
        lines.append(f"| {s} red. vs mebp | " + " | ".join(
            f"{reduction_report(getattr(idx[(c, s)], metric), getattr(idx[(c, 'mebp')], metric))}%"
            for c in cells) + " |")
    return lines + [""]


def results_markdown(results: list[CellResult], header_lines=()) -> str:
    """Peak tables (MiB of modeled bytes) per depth, seq sweep and rank sweep, plus the h ablation.

    Each layout appears twice: total peak (parameters included) and the
    activation part of the peak (parameters excluded).
    """
    lines = [f"<!-- {h} -->" for h in header_lines]
    for metric, title in (("peak_bytes", "Ledger peak memory"), ("activation_bytes", "Activation part of the peak")):
        lines += [f"## {title} (MiB, modeled bytes)", ""]
        for L in sorted({r.cell.layers for r in results}):
            sub = [r for r in results if r.cell.layers == L]
            for r0 in sorted({r.cell.rank for r in sub}):
                if len({x.cell.seq for x in sub if x.cell.rank == r0}) > 1:
                    lines += ["<!-- layout: peak-vs-seq -->"] + _table(
                        f"L={L}, vs sequence length", sub, "seq", {"layers": L, "rank": r0}, metric)
            for n0 in sorted({r.cell.seq for r in sub}):
                if len({x.cell.rank for x in sub if x.cell.seq == n0}) > 1:
                    lines += ["<!-- layout: peak-vs-rank -->"] + _table(
                        f"L={L}, vs LoRA rank", sub, "rank", {"layers": L, "seq": n0}, metric)
    lines += ["<!-- layout: store-vs-recompute-h -->", "### Store h vs recompute h", "",
              "| L | seq | rank | Store h (mebp) | Recompute h (mesp) | gap bytes | closed-form 7·L·b·n·r·w |",
              "|---:|---:|---:|---:|---:|---:|---:|"]
    idx = _by(results)
    for c in sorted({r.cell for r in results}, key=lambda c: (c.layers, c.seq, c.rank)):
        a, b = idx[(c, "mebp")], idx[(c, "mesp")]
        lines.append(f"| {c.layers} | {c.seq} | {c.rank} | {_mb(a.peak_bytes)} | {_mb(b.peak_bytes)} | "
                     f"{a.peak_bytes - b.peak_bytes} | {h_gap(c, a.width)} |")
    return "\n".join(lines) + "\n"


def h_gap(cell: Cell, width: int) -> int:
    """Closed-form bytes of the retained h set: 7·L·b·n·r·width."""
    return 7 * cell.layers * cell.batch * cell.seq * cell.rank * width
