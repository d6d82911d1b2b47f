"""INI run configuration: one section per command plus a shared [model] section.

Every key has a declared type and default; any unknown section or key is an
error, so a typo can never fall back to a default silently.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.replace(",", " ").split()]


def _strs(s: str) -> list[str]:
    return [x for x in s.replace(",", " ").split()]


def _opt_float(s: str):
    return None if s.strip() in ("", "auto", "none") else float(s)


def _opt_str(s: str):
    return s.strip() or None


SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "n_layers": (int, 4), "d_model": (int, 64), "n_heads": (int, 4), "d_ff": (int, 256),
        "vocab": (int, 257), "lora_rank": (int, 8), "lora_alpha": (float, 16.0), "max_seq": (int, 64),
        "eps": (float, 1e-6), "tie_embeddings": (_bool, False),
    },
    "grad-check": {
        "dtype": (str, "float64"), "instances": (int, 20), "composite_instances": (int, 2),
        "delta": (float, 1e-4), "tolerance": (float, 1e-5), "equivalence_tolerance": (float, 1e-12),
        "equivalence_seq": (int, 64),
    },
    "bench-mem": {
        "dtype": (str, "float32"), "layers": (_ints, [2, 4, 8]), "seqs": (_ints, [64, 128, 256]),
        "ranks": (_ints, [4, 8, 16, 32]), "batch": (int, 1), "include_mezo": (_bool, True),
        "trace": (_bool, False),
    },
    "train": {
        "dtype": (str, "float64"), "strategies": (_strs, ["mesp"]), "steps": (int, 100), "lr": (float, 1e-4),
        "batch": (int, 1), "seq": (int, 64), "eval_interval": (int, 100), "eval_batches": (int, 4),
        "epsilon": (_opt_float, None), "probes": (int, 1), "corpus": (_opt_str, None),
    },
    "mezo-quality": {
        "dtype": (str, "float64"), "layers": (_ints, [0, 2, 3]), "warmup_steps": (int, 20),
        "warmup_lr": (float, 1e-4), "trials": (int, 8), "probes": (int, 1), "epsilon": (_opt_float, None),
        "seq": (int, 64), "batch": (int, 1), "corpus": (_opt_str, None),
    },
}


@dataclass
class RunConfig:
    sections: dict[str, dict]
    source: str

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]


def defaults() -> dict[str, dict]:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    out = defaults()
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]; valid: {', '.join(SCHEMA)}")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{sec}]; valid: {', '.join(SCHEMA[sec])}")
            conv = SCHEMA[sec][key][0]
            try:
                out[sec][key] = conv(raw)
            except ValueError as e:
                raise ConfigError(f"{source}: [{sec}] {key} = {raw!r}: {e}") from None
    return RunConfig(out, source)


def load_config(path: str | Path | None) -> RunConfig:
    """Read ``path``, or the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("mesp").joinpath("configs/default.ini").read_text()
        return parse_config(text, "default.ini")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(p))
