"""Text file formats: dictionaries, instance datasets, checkpoints, solver traces.

All formats are JSON. Complex numbers are ``[re, im]`` pairs of decimal
floats written with Python's shortest round-trip representation, so every
value reloads bit-for-bit. Matrices are nested row-major lists.

Dataset files are JSON Lines: a header object followed by one instance
record per line.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .model import (
    RNG_ALGORITHM,
    BlockSparseSignal,
    Dictionary,
    GridSpec,
    Instance,
    SamplingPattern,
    build_dictionary,
)
from .networks import LayerSchedule, make_params
from .training import Checkpoint

DICTIONARY_FORMAT = "blocklista-dictionary"
DATASET_FORMAT = "blocklista-dataset"
CHECKPOINT_FORMAT = "blocklista-checkpoint"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file is malformed, has the wrong format tag, or an unsupported version."""


def complex_to_pairs(a) -> list:
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim == 0:
        return [float(a.real), float(a.imag)]
    return [complex_to_pairs(v) for v in a]


def pairs_to_complex(data) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] != 2:
        raise FormatError("complex values must be stored as [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False, separators=(",", ":"))


def dictionary_to_dict(d: Dictionary) -> dict:
    return {
        "format": DICTIONARY_FORMAT,
        "version": FORMAT_VERSION,
        "P": d.P,
        "Q": d.Q,
        "M": d.M,
        "N": d.N,
        "omega": list(d.pattern.omega),
        "normalize": d.normalized,
    }


def dictionary_from_dict(data: dict) -> Dictionary:
    _expect(data, DICTIONARY_FORMAT)
    try:
        grid = GridSpec(int(data["P"]), int(data["Q"]))
        pattern = SamplingPattern(tuple(data["omega"]), grid.M)
        return build_dictionary(grid, pattern, bool(data.get("normalize", False)))
    except KeyError as exc:
        raise FormatError(f"dictionary description is missing field {exc}") from None


def save_dictionary(d: Dictionary, path) -> None:
    Path(path).write_text(_dumps(dictionary_to_dict(d)) + "\n")


def load_dictionary(path) -> Dictionary:
    return dictionary_from_dict(_read_json(path))


def instance_to_dict(inst: Instance, d: Dictionary) -> dict:
    return {
        "grid": {"P": d.P, "Q": d.Q},
        "pattern": list(d.pattern.omega),
        "seed": inst.seed,
        "stream": list(inst.stream),
        "rng": inst.rng_algorithm,
        "snr_db": None if math.isinf(inst.snr_db) else inst.snr_db,
        "sigma": inst.sigma,
        "support": list(inst.truth.support),
        "y": complex_to_pairs(inst.y),
        "x": complex_to_pairs(inst.truth.values),
    }


def instance_from_dict(data: dict) -> Instance:
    try:
        grid = GridSpec(int(data["grid"]["P"]), int(data["grid"]["Q"]))
        truth = BlockSparseSignal(grid, tuple(data["support"]), pairs_to_complex(data["x"]))
        snr = data["snr_db"]
        return Instance(
            y=pairs_to_complex(data["y"]),
            truth=truth,
            sigma=float(data["sigma"]),
            snr_db=math.inf if snr is None else float(snr),
            seed=data["seed"],
            stream=tuple(data["stream"]),
            rng_algorithm=data.get("rng", RNG_ALGORITHM),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed instance record: {exc}") from None


def save_dataset(instances, d: Dictionary, path) -> None:
    instances = list(instances)
    header = {"format": DATASET_FORMAT, "version": FORMAT_VERSION, "count": len(instances),
              "dictionary": dictionary_to_dict(d)}
    with open(path, "w") as fh:
        fh.write(_dumps(header) + "\n")
        for inst in instances:
            fh.write(_dumps(instance_to_dict(inst, d)) + "\n")


def load_dataset(path) -> tuple[Dictionary, list[Instance]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty dataset file")
    header = _parse(lines[0], path)
    _expect(header, DATASET_FORMAT)
    d = dictionary_from_dict(header["dictionary"])
    instances = [instance_from_dict(_parse(line, path)) for line in lines[1:] if line]
    if len(instances) != header.get("count"):
        raise FormatError(
            f"{path}: header declares {header.get('count')} instances, found {len(instances)}"
        )
    for inst in instances:
        if inst.truth.grid != d.grid or inst.y.shape != (d.N,):
            raise FormatError(f"{path}: instance does not match the dataset dictionary")
    return d, instances


def _params_to_dict(params) -> dict:
    return {
        "weights": complex_to_pairs(params.weights),
        "thresholds": [float(v) for v in params.schedule.thresholds],
        "step_sizes": [float(v) for v in params.schedule.step_sizes],
    }


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": ckpt.format_version,
        "architecture": ckpt.arch,
        "dictionary": dictionary_to_dict(ckpt.dictionary),
        "params": _params_to_dict(ckpt.params),
        "train_config": ckpt.train_config,
        "epoch": int(ckpt.epoch),
        "val_loss": float(ckpt.val_loss),
        "lipschitz": float(ckpt.lipschitz),
        "lam": float(ckpt.lam),
        "extra": ckpt.extra,
    }
    payload["checksum"] = _checksum(payload)
    return payload


def checkpoint_from_dict(data: dict) -> Checkpoint:
    _expect(data, CHECKPOINT_FORMAT)
    stored = data.get("checksum")
    body = {k: v for k, v in data.items() if k != "checksum"}
    if stored != _checksum(body):
        raise FormatError("checkpoint checksum mismatch; file is corrupted or was edited")
    try:
        d = dictionary_from_dict(data["dictionary"])
        p = data["params"]
        schedule = LayerSchedule(p["thresholds"], p["step_sizes"])
        params = make_params(data["architecture"], pairs_to_complex(p["weights"]), schedule)
        return Checkpoint(
            arch=data["architecture"],
            dictionary=d,
            params=params,
            train_config=data["train_config"],
            epoch=int(data["epoch"]),
            val_loss=float(data["val_loss"]),
            lipschitz=float(data["lipschitz"]),
            lam=float(data["lam"]),
            format_version=int(data["version"]),
            extra=data.get("extra", {}),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing field {exc}") from None
    except ValidationError as exc:
        raise FormatError(f"checkpoint content is invalid: {exc}") from None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(_dumps(checkpoint_to_dict(ckpt)) + "\n")


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_dict(_read_json(path))


def write_trace_csv(trace, path) -> None:
    """Per-iteration objective values of a single-instance solver run."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "objective"])
        for it, obj in trace.to_rows():
            w.writerow([it, repr(obj)])


def _checksum(payload: dict) -> str:
    return hashlib.sha256(_dumps(payload).encode()).hexdigest()


def _expect(data, fmt: str) -> None:
    if not isinstance(data, dict) or data.get("format") != fmt:
        raise FormatError(f"expected a {fmt!r} file")
    if data.get("version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported {fmt} version {data.get('version')!r}; this build reads version {FORMAT_VERSION}"
        )


def _parse(text: str, path) -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None


def _read_json(path) -> dict:
    return _parse(Path(path).read_text(), path)
