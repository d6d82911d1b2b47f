"""Command-line entry point: ``mesp {grad-check, bench-mem, train, mezo-quality}``.

Exit codes: 0 success, 1 a check or tolerance failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from mesp.config import ConfigError, RunConfig, load_config
from mesp.tensor_core import DType

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# === MANIFEST ===

def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    dtype: str
    source: str
    outputs: list[str] = field(default_factory=list)
    version: str = field(default_factory=code_version)

    def header_lines(self, layout: str | None = None) -> list[str]:
        body = json.dumps(asdict(self), sort_keys=True, default=str)
        lines = [f"layout: {layout}"] if layout else []
        # the timestamp is the only line that changes between identical runs
        return lines + [f"manifest: {body}", f"generated: {datetime.now(timezone.utc).isoformat(timespec='seconds')}"]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# === HELPERS ===

def _dtype(args, section: dict) -> DType:
    try:
        return DType.parse(args.dtype or section["dtype"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _model_cfg(rc: RunConfig, dtype: DType, **over):
    from mesp.model import ModelConfig

    try:
        return ModelConfig(**{**rc["model"], **over, "dtype": dtype})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[model]: {e}") from None


def _corpus(path):
    from mesp.trainer import Corpus

    if path is None:
        return Corpus.bundled()
    try:
        return Corpus.from_file(path)
    except OSError as e:
        raise ConfigError(f"cannot read corpus {path}: {e.strerror}") from None


def _table(rows: list[list], head: list[str]) -> str:
    out = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    out += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(out) + "\n"


# === GRAD-CHECK ===

def cmd_grad_check(args, rc: RunConfig) -> int:
    from mesp.gradcheck import run_suite, strategy_equivalence

    sec = rc["grad-check"]
    dtype = _dtype(args, sec)
    if dtype is not DType.TEST:
        raise ConfigError("grad-check runs in float64 only")
    tol = sec["tolerance"] if args.tolerance is None else args.tolerance
    out = Path(args.out_dir)
    man = RunManifest("grad-check", {"model": rc["model"], "grad-check": sec, "tolerance": tol}, args.seed,
                      dtype.value, rc.source, [str(out / "grad_check.md"), str(out / "grad_check.csv")])

    errs = run_suite(sec["instances"], args.seed, sec["delta"], sec["composite_instances"])
    rows = [[name, f"{e:.3e}", f"{tol:g}", "PASS" if e <= tol else "FAIL"] for name, e in errs.items()]
    cfg = _model_cfg(rc, dtype, max_seq=max(rc["model"]["max_seq"], sec["equivalence_seq"]))
    eq = strategy_equivalence(cfg, args.seed, sec["equivalence_seq"])
    etol = sec["equivalence_tolerance"]
    rows += [[f"{k} vs reference", f"{v:.3e}", f"{etol:g}", "PASS" if v <= etol else "FAIL"] for k, v in eq.items()]
    md = "\n".join(f"<!-- {h} -->" for h in man.header_lines("gradient-check")) + "\n"
    md += _table(rows, ["check", "max rel. error", "tolerance", "status"])
    csv_text = "".join(f"# {h}\n" for h in man.header_lines("gradient-check"))
    csv_text += "check,max_rel_error,tolerance,status\n" + "".join(f"{r[0]},{r[1]},{r[2]},{r[3]}\n" for r in rows)
    _write(out / "grad_check.md", md)
    _write(out / "grad_check.csv", csv_text)
    print(_table(rows, ["check", "max rel. error", "tolerance", "status"]), end="")
    failed = [r[0] for r in rows if r[3] == "FAIL"]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# === BENCH-MEM ===

def cmd_bench_mem(args, rc: RunConfig) -> int:
    from mesp.bench import h_gap, results_csv, results_markdown, run_sweep, sweep_cells

    sec = rc["bench-mem"]
    dtype = _dtype(args, sec)
    if not sec["layers"] or not sec["seqs"] or not sec["ranks"]:
        raise ConfigError("[bench-mem] layers, seqs and ranks must each list at least one value")
    base = _model_cfg(rc, dtype)
    cells = sweep_cells(sec["layers"], sec["seqs"], sec["ranks"], base.lora_rank, sec["seqs"][0], sec["batch"])
    for c in cells:
        _model_cfg(rc, dtype, n_layers=c.layers, lora_rank=c.rank, max_seq=max(base.max_seq, c.seq))
    out = Path(args.out_dir)
    man = RunManifest("bench-mem", {"model": rc["model"], "bench-mem": sec}, args.seed, dtype.value, rc.source,
                      [str(out / "bench_mem.csv"), str(out / "bench_mem.md")]
                      + ([str(out / "traces")] if sec["trace"] else []))
    results = run_sweep(base, cells, args.seed, sec["include_mezo"], sec["trace"], args.parallel)
    hdr = man.header_lines("ledger-peak-sweep")
    _write(out / "bench_mem.csv", results_csv(results, hdr))
    md = results_markdown(results, hdr)
    _write(out / "bench_mem.md", md)
    if sec["trace"]:
        for r in results:
            c = r.cell
            _write(out / "traces" / f"L{c.layers}_n{c.seq}_r{c.rank}_b{c.batch}_{r.strategy}.tsv", r.trace)
    print(md.split("\n", len(hdr))[-1], end="")

    idx = {(r.cell, r.strategy): r for r in results}
    bad = []
    for c in cells:
        ref, mebp, mesp = (idx[(c, s)].peak_bytes for s in ("reference", "mebp", "mesp"))
        if not mesp < mebp < ref:
            bad.append(f"{c}: ordering mesp < mebp < reference violated")
        if mebp - mesp != h_gap(c, dtype.width):
            bad.append(f"{c}: mebp-mesp gap {mebp - mesp} != {h_gap(c, dtype.width)}")
    for b in bad:
        print(b, file=sys.stderr)
    return EXIT_FAIL if bad else EXIT_OK


# === TRAIN ===

STRATEGY_NAMES = ("reference", "mebp", "mesp", "mezo")


def _train_one(tc, corpus_path, model_cfg):
    from mesp.trainer import train

    return train(tc, _corpus(corpus_path), model_cfg)


def cmd_train(args, rc: RunConfig) -> int:
    from mesp.strategies import ALIASES, KINDS
    from mesp.trainer import TrainConfig

    sec = rc["train"]
    dtype = _dtype(args, sec)
    valid = sorted(set(ALIASES) | set(KINDS) | {"mezo"})
    if not sec["strategies"]:
        raise ConfigError("[train] strategies is empty")
    for s in sec["strategies"]:
        if s not in valid:
            raise ConfigError(f"unknown strategy {s!r}; valid: {', '.join(valid)}")
    try:
        tcs = [TrainConfig(strategy=s, steps=sec["steps"], batch=sec["batch"], seq=sec["seq"], lr=sec["lr"],
                           seed=args.seed, eval_interval=sec["eval_interval"], eval_batches=sec["eval_batches"],
                           dtype=dtype, epsilon=sec["epsilon"], probes=sec["probes"])
               for s in sec["strategies"]]
    except ValueError as e:
        raise ConfigError(f"[train]: {e}") from None
    model_cfg = _model_cfg(rc, dtype, max_seq=max(rc["model"]["max_seq"], sec["seq"]))
    _corpus(sec["corpus"])  # fail early on a bad path
    out = Path(args.out_dir)
    names = [s if s == "mezo" else s.split("_")[0] for s in sec["strategies"]]
    paths = [out / f"train_{n}.csv" for n in names]

    if args.parallel > 1 and len(tcs) > 1:
        with ProcessPoolExecutor(min(args.parallel, len(tcs))) as ex:
            trajs = list(ex.map(_train_one, tcs, [sec["corpus"]] * len(tcs), [model_cfg] * len(tcs)))
    else:
        trajs = [_train_one(tc, sec["corpus"], model_cfg) for tc in tcs]

    for tc, name, path, traj in zip(tcs, names, paths, trajs):
        man = RunManifest("train", {"model": rc["model"], "train": {**sec, "strategy": tc.strategy}},
                          args.seed, dtype.value, rc.source, [str(path)])
        _write(path, traj.to_csv(man.header_lines("loss-trajectory") + [f"initial_loss: {traj.initial_loss!r}"]))
        print(f"{name}: initial loss {traj.initial_loss:.5f}, final loss {traj.final_loss:.5f} "
              f"after {tc.steps} steps -> {path}")
    return EXIT_OK


# === MEZO-QUALITY ===

def cmd_mezo_quality(args, rc: RunConfig) -> int:
    from mesp.grad_quality import layer_report
    from mesp.mezo import MezoConfig
    from mesp.model import init_params
    from mesp.trainer import TrainConfig, sample_batch, train

    sec = rc["mezo-quality"]
    dtype = _dtype(args, sec)
    cfg = _model_cfg(rc, dtype, max_seq=max(rc["model"]["max_seq"], sec["seq"]))
    layers = sec["layers"]
    if not layers:
        raise ConfigError("[mezo-quality] layers is empty")
    if any(not 0 <= i < cfg.n_layers for i in layers):
        raise ConfigError(f"[mezo-quality] layers {layers} out of range for n_layers={cfg.n_layers}")
    try:
        mcfg = MezoConfig(sec["epsilon"], sec["probes"], args.seed)
    except ValueError as e:
        raise ConfigError(f"[mezo-quality]: {e}") from None
    if sec["trials"] < 1 or sec["warmup_steps"] < 0:
        raise ConfigError("[mezo-quality] trials must be >= 1 and warmup_steps >= 0")
    corpus = _corpus(sec["corpus"])
    params = init_params(cfg, args.seed)
    if sec["warmup_steps"]:
        train(TrainConfig("mesp", sec["warmup_steps"], sec["batch"], sec["seq"], sec["warmup_lr"], args.seed,
                          eval_interval=sec["warmup_steps"], eval_batches=1, dtype=dtype), corpus, params=params)
    batch = sample_batch(corpus, sec["seq"], sec["batch"], np.random.default_rng([args.seed, 3]))
    report = layer_report(params, batch, mcfg, layers, trials=sec["trials"])

    out = Path(args.out_dir)
    man = RunManifest("mezo-quality", {"model": rc["model"], "mezo-quality": sec}, args.seed, dtype.value,
                      rc.source, [str(out / "mezo_quality.md"), str(out / "mezo_quality.csv")])
    hdr = man.header_lines("mezo-gradient-quality")
    md = report.to_markdown(hdr)
    _write(out / "mezo_quality.md", md)
    _write(out / "mezo_quality.csv", report.to_csv(hdr))
    print(md.split("\n", len(hdr))[-1], end="")
    return EXIT_OK


# === ENTRY ===

COMMANDS = {"grad-check": cmd_grad_check, "bench-mem": cmd_bench_mem, "train": cmd_train,
            "mezo-quality": cmd_mezo_quality}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; the packaged default.ini when omitted")
    common.add_argument("--out-dir", default="out", help="directory for reports (default: ./out)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--dtype", choices=["float64", "float32", "64", "32"], help="override the config dtype")
    common.add_argument("--parallel", type=int, default=1, metavar="N",
                        help="run independent sweep cells or training runs in N processes")
    p = argparse.ArgumentParser(prog="mesp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("grad-check", parents=[common], help="finite-difference and strategy equivalence checks")
    g.add_argument("--tolerance", type=float, help="override [grad-check] tolerance")
    sub.add_parser("bench-mem", parents=[common], help="ledger peak sweep over depth, length and rank")
    sub.add_parser("train", parents=[common], help="training runs and loss trajectories")
    sub.add_parser("mezo-quality", parents=[common], help="per-layer MeZO estimate vs exact gradient")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.parallel < 1:
        parser.error("--parallel must be >= 1")
    try:
        rc = load_config(args.config)
        return COMMANDS[args.command](args, rc)
    except ConfigError as e:
        print(f"mesp {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
