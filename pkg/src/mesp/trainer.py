"""Byte-level data, a finite-difference oracle and the training loop."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from mesp.ledger import MemoryLedger
from mesp.mezo import MezoConfig, forward_loss, mezo_step
from mesp.model import ModelConfig, ModelParams, init_params
from mesp.optim import SGD
from mesp.strategies import GradStrategy, resolve_kind
from mesp.tensor_core import DType

PAD = 256
VOCAB = 257  # 256 byte values plus pad


# === DATA ===

def tokenize(data: bytes | str) -> np.ndarray:
    """Identity byte vocabulary: byte b → token b."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


@dataclass
class Corpus:
    raw: bytes
    tokens: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.tokens = tokenize(self.raw)

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def from_file(cls, path) -> "Corpus":
        return cls(Path(path).read_bytes())

    @classmethod
    def bundled(cls) -> "Corpus":
        """The 64 KiB sample text shipped with the package."""
        return cls(resources.files("mesp").joinpath("data/corpus.txt").read_bytes())


def sample_batch(corpus: Corpus, n: int, b: int, rng: np.random.Generator):
    """b random windows of n+1 tokens; targets are inputs shifted by one."""
    T = len(corpus)
    if T <= n:
        raise ValueError(f"corpus of {T} tokens is too short for sequence length {n}")
    starts = rng.integers(0, T - n, size=b)
    win = np.stack([corpus.tokens[s:s + n + 1] for s in starts])
    return win[:, :-1].copy(), win[:, 1:].copy()


# === ORACLE ===

def finite_difference_oracle(loss_fn: Callable[[], float], param: np.ndarray, delta: float = 1e-4) -> np.ndarray:
    """Central differences (L(w+δe) − L(w−δe))/(2δ) for every element of ``param``.

    ``loss_fn`` is a closure that reads ``param`` (mutated in place and put
    back exactly after each element).
    """
    if param.dtype != np.float64:
        raise TypeError("finite_difference_oracle needs float64 parameters")
    grad = np.zeros_like(param)
    flat, g = param.reshape(-1), grad.reshape(-1)
    if not np.shares_memory(flat, param):
        raise ValueError("param must be contiguous")
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + delta
        lp = loss_fn()
        flat[i] = orig - delta
        lm = loss_fn()
        flat[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"non-finite loss at element {i}")
        g[i] = (lp - lm) / (2 * delta)
    return grad


# === TRAINING ===

@dataclass
class TrainConfig:
    strategy: str = "mesp"
    steps: int = 100
    batch: int = 1
    seq: int = 64
    lr: float = 1e-4
    seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 4
    dtype: DType = DType.TEST
    epsilon: float | None = None  # MeZO only
    probes: int = 1

    def __post_init__(self):
        self.dtype = DType.parse(self.dtype)
        if self.strategy != "mezo":
            self.strategy = resolve_kind(self.strategy)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eval_interval < 1 or self.batch < 1 or self.seq < 1:
            raise ValueError("eval_interval, batch and seq must be >= 1")


@dataclass
class LossTrajectory:
    points: list[tuple[int, float]] = field(default_factory=list)
    initial_loss: float = float("nan")
    step_losses: list[float] = field(default_factory=list)

    def add(self, step: int, loss: float) -> None:
        if self.points and step <= self.points[-1][0]:
            raise ValueError("trajectory steps must be strictly increasing")
        self.points.append((step, loss))

    @property
    def final_loss(self) -> float:
        return self.points[-1][1]

    def to_csv(self, header_lines: list[str] = ()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in self.points:
            w.writerow([step, repr(float(loss))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossTrajectory":
        rows = [r for r in csv.reader(l for l in text.splitlines() if l and not l.startswith("#"))]
        traj = cls()
        for step, loss in rows[1:]:
            traj.add(int(step), float(loss))
        return traj


def default_model_config(dtype=DType.TEST, seq: int = 64) -> ModelConfig:
    return ModelConfig(vocab=VOCAB, max_seq=max(64, seq), dtype=dtype)


def eval_loss(params: ModelParams, batches) -> float:
    return float(np.mean([forward_loss(b, params) for b in batches]))


def train(cfg: TrainConfig, corpus: Corpus, model_cfg: ModelConfig | None = None,
          params: ModelParams | None = None, ledger: MemoryLedger | None = None) -> LossTrajectory:
    """Run ``cfg.steps`` updates and record the eval loss every ``eval_interval`` steps.

    The eval loss is the mean over ``eval_batches`` fixed windows drawn once
    from the seed.  A final point is added when steps is not a multiple of
    the interval.  The per-step training losses are kept in ``step_losses``.
    """
    model_cfg = model_cfg or default_model_config(cfg.dtype, cfg.seq)
    if params is None:
        params = init_params(model_cfg, cfg.seed)
    train_rng = np.random.default_rng([cfg.seed, 1])
    eval_rng = np.random.default_rng([cfg.seed, 2])
    evals = [sample_batch(corpus, cfg.seq, cfg.batch, eval_rng) for _ in range(cfg.eval_batches)]

    traj = LossTrajectory(initial_loss=eval_loss(params, evals))
    if cfg.strategy == "mezo":
        mcfg = MezoConfig(cfg.epsilon, cfg.probes, cfg.seed, cfg.lr)
        run = lambda batch, step: mezo_step(batch, params, mcfg, step, ledger).loss
    else:
        strat = GradStrategy(cfg.strategy, params, SGD(cfg.lr), ledger)
        run = lambda batch, step: strat.step(batch).loss

    for step in range(1, cfg.steps + 1):
        batch = sample_batch(corpus, cfg.seq, cfg.batch, train_rng)
        loss = run(batch, step)
        if not np.isfinite(loss):
            raise FloatingPointError(f"training loss became non-finite at step {step}")
        traj.step_losses.append(loss)
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            traj.add(step, eval_loss(params, evals))
    return traj
