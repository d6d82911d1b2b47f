"""Per-layer agreement between a gradient estimate and the exact gradient.

Three metrics, each on one flattened vector per layer:

* cosine similarity ⟨a, b⟩ / (‖a‖‖b‖)
* sign agreement    fraction of coordinates with equal sign (0 agrees only with 0)
* relative error    ‖est − exact‖₂ / ‖exact‖₂

A layer's vector concatenates its seven adapters in site order
(q, k, v, o, gate, up, down); each site contributes dA then dB, row-major.
Undefined values (zero vectors) are reported as ``None``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from mesp.mezo import MezoConfig, mezo_estimate_full
from mesp.model import SITES, ModelParams
from mesp.strategies import mesp_step


def _flat(g) -> np.ndarray:
    return np.asarray(g, dtype=np.float64).reshape(-1)


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")


def cosine_similarity(g1, g2) -> float | None:
    a, b = _flat(g1), _flat(g2)
    _check(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def sign_agreement(g1, g2) -> float:
    a, b = _flat(g1), _flat(g2)
    _check(a, b)
    if a.size == 0:
        raise ValueError("empty vectors")
    return float(np.mean(np.sign(a) == np.sign(b)))


def relative_error(g_est, g_exact) -> float | None:
    a, b = _flat(g_est), _flat(g_exact)
    _check(a, b)
    nb = np.linalg.norm(b)
    if nb == 0:
        return None
    return float(np.linalg.norm(a - b) / nb)


def flatten_layer(grads_for_block: dict[str, tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([grads_for_block[s][0].ravel(), grads_for_block[s][1].ravel()])
                           for s in SITES])


@dataclass
class LayerRow:
    layer: int | str
    cosine: float | None
    sign_agreement: float
    relative_error: float | None
    size: int = 0


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class GradReport:
    rows: list[LayerRow] = field(default_factory=list)

    @property
    def average(self) -> LayerRow:
        return LayerRow("Avg", _mean([r.cosine for r in self.rows]),
                        _mean([r.sign_agreement for r in self.rows]),
                        _mean([r.relative_error for r in self.rows]),
                        int(sum(r.size for r in self.rows)))

    def all_rows(self) -> list[LayerRow]:
        return [*self.rows, self.average]

    def to_markdown(self, header_lines=()) -> str:
        out = [f"<!-- {h} -->" for h in header_lines]
        out += ["| Layer | Cosine Sim | Sign Agree | Rel. Error |", "|---:|---:|---:|---:|"]
        for r in self.all_rows():
            out.append(f"| {r.layer} | {_fmt(r.cosine, '.4f')} | {_fmt(r.sign_agreement * 100, '.1f')}% "
                       f"| {_fmt(r.relative_error, '.1f')} |")
        return "\n".join(out) + "\n"

    def to_csv(self, header_lines=()) -> str:
        buf = io.StringIO()
        for h in header_lines:
            buf.write(f"# {h}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "cosine_similarity", "sign_agreement", "relative_error", "n_params"])
        for r in self.all_rows():
            w.writerow([r.layer, _csv(r.cosine), _csv(r.sign_agreement), _csv(r.relative_error), r.size])
        return buf.getvalue()


def _fmt(v, spec):
    return "null" if v is None else format(v, spec)


def _csv(v):
    return "null" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)


def compare(exact, estimate, layer_indices) -> GradReport:
    if not layer_indices:
        raise ValueError("layer list is empty")
    rows = []
    for i in layer_indices:
        g, e = flatten_layer(exact[i]), flatten_layer(estimate[i])
        rows.append(LayerRow(i, cosine_similarity(e, g), sign_agreement(e, g), relative_error(e, g), g.size))
    return GradReport(rows)


def layer_report(params: ModelParams, batch, mezo_cfg: MezoConfig, layer_indices, step: int = 0,
                 estimate=None, trials: int = 1) -> GradReport:
    """Exact gradients from the structured strategy vs MeZO estimates, per listed block.

    With ``trials`` > 1 each metric is the mean over that many independent
    estimates (probe seeds ``step, step+1, ...``).  A single draw's relative
    error scales with |c|, which is occasionally near zero.  ``estimate``
    overrides the MeZO estimate (test hook).
    """
    if not layer_indices:
        raise ValueError("layer list is empty")
    bad = [i for i in layer_indices if not 0 <= i < params.cfg.n_layers]
    if bad:
        raise ValueError(f"layer index out of range: {bad}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    exact = mesp_step(batch, params.copy(), keep_grads=True).grads_by_layer
    if estimate is not None:
        return compare(exact, estimate, layer_indices)
    reps = [compare(exact, mezo_estimate_full(batch, params, mezo_cfg, step + t), layer_indices)
            for t in range(trials)]
    if trials == 1:
        return reps[0]
    rows = []
    for k, i in enumerate(layer_indices):
        rs = [rep.rows[k] for rep in reps]
        rows.append(LayerRow(i, _mean([r.cosine for r in rs]), _mean([r.sign_agreement for r in rs]),
                             _mean([r.relative_error for r in rs]), rs[0].size))
    return GradReport(rows)
