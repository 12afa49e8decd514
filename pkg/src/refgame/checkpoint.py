"""Checkpoint serialization: one structured text document.

Layout: a version line, the full config echo, scalar run state, then
named arrays (shape header plus one line of row-major values).  Floats
are written with repr, which round-trips every double exactly, so
save -> load -> continue is bit-identical to an uninterrupted run.  All
randomness is drawn from counter-keyed streams, so the only rng state a
resume needs is the update counter itself (recorded as rng_scheme).
"""

from __future__ import annotations

import os

import numpy as np

from . import config as cfgmod

VERSION_LINE = "refgame checkpoint v1"


def _format_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(raw):
    raw = raw.strip()
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def save_checkpoint(path, cfg, scalars, arrays):
    """Atomically write config echo, scalar state and named arrays."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(VERSION_LINE + "\n")
        f.write("[config]\n")
        f.write("\n".join(cfgmod.config_lines(cfg)) + "\n")
        f.write("[state]\n")
        f.write("rng_scheme = counter\n")
        for key in sorted(scalars):
            f.write(f"{key} = {_format_scalar(scalars[key])}\n")
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"[array {name} {dims}]\n")
            f.write(" ".join(repr(float(x)) for x in arr.reshape(-1)) + "\n")
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (RunConfig, scalar dict, array dict); rejects unknown
    format versions."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != VERSION_LINE:
        head = lines[0] if lines else "<empty>"
        raise ValueError(f"checkpoint {path}: version mismatch "
                         f"(got {head!r}, want {VERSION_LINE!r})")
    scalars = {}
    arrays = {}
    config_lines = []
    section = None
    i = 1
    while i < len(lines):
        line = lines[i]
        if line == "[config]":
            section = "config"
        elif line == "[state]":
            section = "state"
        elif line.startswith("[array "):
            parts = line[1:-1].split()
            name = parts[1]
            shape = tuple(int(d) for d in parts[2:])
            i += 1
            values = np.array([float(tok) for tok in lines[i].split()],
                              dtype=np.float64)
            if values.size != int(np.prod(shape, dtype=int)):
                raise ValueError(f"checkpoint {path}: array {name} has "
                                 f"{values.size} values for shape {shape}")
            arrays[name] = values.reshape(shape)
            section = None
        elif section == "config":
            config_lines.append(line)
        elif section == "state":
            key, _, raw = line.partition("=")
            scalars[key.strip()] = _parse_scalar(raw)
        elif line.strip():
            raise ValueError(f"checkpoint {path}: unexpected line {line!r}")
        i += 1
    values = cfgmod.parse_config_text("\n".join(config_lines))
    cfg = cfgmod.RunConfig()
    for key, value in values.items():
        setattr(cfg, key, value)
    return cfg.validate(), scalars, arrays
