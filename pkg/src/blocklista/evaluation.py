"""Support-recovery metrics, hit-rate sweeps over (SNR, K), convergence traces.

A *hit* means the ``K`` blocks with the largest estimated norms are exactly
the true support, using the true ``K`` of each instance.

A method is either an estimator with ``predict(Y)`` or a callable taking a
list of :class:`~blocklista.model.Instance` and returning estimates (B, M).
Estimators exposing a ``noise_std`` parameter receive the cell's noise level
through ``set_params`` on a clone.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import clone

from ._validation import ValidationError
from .model import Dictionary, draw_instance, snr_to_sigma, stack_instances
from .solvers import block_norms
from .training import loss_nmse

SWEEP_STREAM = 2
CSV_COLUMNS = ("method", "snr_db", "k", "trials", "hits", "hit_rate", "mean_nmse")


def recover_support(estimate, k: int, block_size: int) -> tuple[int, ...]:
    """1-based indices of the ``k`` largest-norm blocks, ties to the smaller index."""
    norms = block_norms(np.asarray(estimate).reshape(-1), block_size)
    if not 1 <= k <= norms.size:
        raise ValidationError(f"k={k} outside 1..{norms.size}")
    order = np.lexsort((np.arange(norms.size), -norms))
    return tuple(sorted(int(i) + 1 for i in order[:k]))


def _batch_supports(est: np.ndarray, ks, block_size: int) -> list[tuple[int, ...]]:
    norms = block_norms(est, block_size)
    idx = np.arange(norms.shape[1])
    out = []
    for row, k in zip(norms, ks):
        order = np.lexsort((idx, -row))
        out.append(tuple(sorted(int(i) + 1 for i in order[:k])))
    return out


def zeros_method(instances) -> np.ndarray:
    """Chance-level baseline: the all-zero estimate."""
    return np.zeros((len(instances), instances[0].truth.values.size), dtype=np.complex128)


def oracle_method(instances) -> np.ndarray:
    """Returns the ground truth (sanity baseline)."""
    return np.stack([inst.truth.values for inst in instances])


def _estimates(method, instances, sigma=None) -> np.ndarray:
    if hasattr(method, "predict"):
        if sigma is not None and "noise_std" in method.get_params(deep=False):
            method = clone(method).set_params(noise_std=sigma)
        Y, _ = stack_instances(instances)
        return np.asarray(method.predict(Y))
    return np.asarray(method(instances))


def hit_rate(method, instances, block_size: int | None = None) -> float:
    """Fraction of instances whose support is recovered exactly."""
    instances = list(instances)
    if not instances:
        raise ValidationError("hit rate of an empty instance list is undefined")
    P = block_size or instances[0].truth.grid.P
    sigmas = {inst.sigma for inst in instances}
    sigma = sigmas.pop() if len(sigmas) == 1 else None
    est = _estimates(method, instances, sigma)
    found = _batch_supports(est, [inst.K for inst in instances], P)
    return float(np.mean([f == inst.truth.support for f, inst in zip(found, instances)]))


@dataclass(frozen=True)
class SweepGrid:
    snr_list_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    k_list: tuple[int, ...] = (1, 2, 3, 4, 5)
    trials_per_cell: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "snr_list_db", tuple(float(s) for s in self.snr_list_db))
        object.__setattr__(self, "k_list", tuple(int(k) for k in self.k_list))
        if self.trials_per_cell < 1:
            raise ValidationError(f"trials_per_cell must be >= 1, got {self.trials_per_cell}")
        if not self.snr_list_db or not self.k_list:
            raise ValidationError("sweep grid needs at least one SNR and one K")

    def cell_instances(self, d: Dictionary, i_snr: int, i_k: int):
        snr, k = self.snr_list_db[i_snr], self.k_list[i_k]
        return [
            draw_instance(d, k, snr, self.seed, (SWEEP_STREAM, i_snr, i_k, t))
            for t in range(self.trials_per_cell)
        ]


@dataclass
class SweepResult:
    """Rows ``(method, snr_db, k, trials, hits, hit_rate, mean_nmse)`` plus provenance."""

    rows: list[dict]
    provenance: dict = field(default_factory=dict)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def cell(self, method: str, snr_db: float, k: int) -> dict:
        for r in self.rows:
            if r["method"] == method and r["snr_db"] == snr_db and r["k"] == k:
                return r
        raise KeyError((method, snr_db, k))

    def grid(self, method: str, key: str = "hit_rate"):
        """``(snr_values, k_values, table)`` with ``table[i_snr, i_k]``."""
        rows = [r for r in self.rows if r["method"] == method]
        snrs = sorted({r["snr_db"] for r in rows})
        ks = sorted({r["k"] for r in rows})
        table = np.full((len(snrs), len(ks)), np.nan)
        for r in rows:
            table[snrs.index(r["snr_db"]), ks.index(r["k"])] = r[key]
        return snrs, ks, table


def _check_method_dictionary(name, method, d: Dictionary):
    other = getattr(method, "dictionary", None)
    if other is None or other.same_geometry(d):
        return
    if other.grid != d.grid:
        what = f"grid P={other.P}, Q={other.Q} vs P={d.P}, Q={d.Q}"
    elif other.pattern != d.pattern:
        what = f"sampling pattern (N={other.N} vs N={d.N}, or different indices)"
    else:
        what = "column normalization"
    raise ValidationError(f"method {name!r} was trained on a different dictionary: {what}")


def run_sweep(methods: dict, d: Dictionary, grid: SweepGrid, provenance: dict | None = None) -> SweepResult:
    """Evaluate every method on identical fresh instances in every (SNR, K) cell."""
    for k in grid.k_list:
        if not 1 <= k <= d.Q:
            raise ValidationError(f"sweep K={k} outside 1..{d.Q}")
    for name, method in methods.items():
        _check_method_dictionary(name, method, d)
    rows = []
    for i_snr, snr in enumerate(grid.snr_list_db):
        sigma = snr_to_sigma(snr)
        for i_k, k in enumerate(grid.k_list):
            instances = grid.cell_instances(d, i_snr, i_k)
            X = np.stack([inst.truth.values for inst in instances])
            truths = [inst.truth.support for inst in instances]
            for name, method in methods.items():
                est = _estimates(method, instances, sigma)
                found = _batch_supports(est, [k] * len(instances), d.P)
                hits = int(sum(f == t for f, t in zip(found, truths)))
                rows.append(
                    {
                        "method": name,
                        "snr_db": snr,
                        "k": k,
                        "trials": len(instances),
                        "hits": hits,
                        "hit_rate": hits / len(instances),
                        "mean_nmse": float(np.mean(loss_nmse(est, X))),
                    }
                )
    prov = {
        "grid": {"P": d.P, "Q": d.Q, "N": d.N},
        "omega": list(d.pattern.omega),
        "normalize": d.normalized,
        "sweep_seed": grid.seed,
        "trials_per_cell": grid.trials_per_cell,
        "hit_definition": "exact support match using the true K",
    }
    prov.update(provenance or {})
    return SweepResult(rows, prov)


def convergence_trace(methods: dict, instances, steps: int | None = None) -> dict:
    """Per-step NMSE, shape (steps + 1, n_instances), for every method.

    Networks report the estimate after each layer; solvers estimators
    (``BlockISTA``) report each iterate, run for exactly ``steps`` iterations.
    Step 0 is the zero initialization. Solver entries also carry the
    objective trace under ``"<name>:objective"``.
    """
    instances = list(instances)
    Y, X = stack_instances(instances)
    out = {}
    for name, method in methods.items():
        if hasattr(method, "predict_layers"):
            layers = method.predict_layers(Y)
            out[name] = np.stack([loss_nmse(x, X) for x in layers])
        elif hasattr(method, "solve"):
            if steps is None:
                raise ValidationError("solver traces need an explicit iteration count")
            sigmas = np.array([inst.sigma for inst in instances])
            if "noise_std" in method.get_params(deep=False) and method.get_params()["alpha"] == "auto":
                method = clone(method).set_params(noise_std=sigmas)
            method = clone(method).set_params(max_iter=steps, tol=0.0)
            trace = method.solve(Y, record_iterates=True)
            out[name] = np.stack([loss_nmse(x, X) for x in trace.iterates])
            out[name + ":objective"] = np.stack(trace.objective_per_iter)
        else:
            est = _estimates(method, instances)
            out[name] = np.stack([np.zeros(len(instances)), loss_nmse(est, X)])
    return out


def crossing_iteration(curve, target: float) -> int | None:
    """First step at which ``curve`` is at or below ``target``; ``None`` if never."""
    hits = np.nonzero(np.asarray(curve) <= target)[0]
    return int(hits[0]) if hits.size else None


def export(result: SweepResult, path, fmt: str = "csv") -> None:
    """Write a sweep as CSV (provenance in ``#`` comments) or JSON."""
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write("# blocklista sweep v1\n")
            fh.write("# units: snr_db in dB; hit_rate is a fraction in [0, 1]; "
                     "mean_nmse is ||x_hat - x||^2 / ||x||^2 (linear)\n")
            for key in sorted(result.provenance):
                fh.write(f"# {key}: {json.dumps(result.provenance[key], sort_keys=True)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in result.rows:
                w.writerow([r["method"], repr(float(r["snr_db"])), r["k"], r["trials"],
                            r["hits"], repr(float(r["hit_rate"])), repr(float(r["mean_nmse"]))])
    elif fmt in ("json", "structured"):
        path.write_text(json.dumps({"format": "blocklista-sweep", "version": 1,
                                    "provenance": result.provenance, "rows": result.rows},
                                   sort_keys=True, indent=1) + "\n")
    else:
        raise ValidationError(f"unknown export format {fmt!r}; use 'csv' or 'json'")


def read_sweep(path) -> SweepResult:
    """Inverse of :func:`export` for either format."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        return SweepResult(data["rows"], data["provenance"])
    prov, body = {}, []
    for line in text.splitlines():
        if line.startswith("# ") and ": " in line and not line.startswith("# units"):
            key, _, value = line[2:].partition(": ")
            if key != "blocklista sweep v1":
                prov[key] = json.loads(value)
        elif not line.startswith("#"):
            body.append(line)
    rows = []
    for r in csv.DictReader(body):
        rows.append({"method": r["method"], "snr_db": float(r["snr_db"]), "k": int(r["k"]),
                     "trials": int(r["trials"]), "hits": int(r["hits"]),
                     "hit_rate": float(r["hit_rate"]), "mean_nmse": float(r["mean_nmse"])})
    return SweepResult(rows, prov)


def write_svg(result: SweepResult, path, cell: int = 28) -> None:
    """Grayscale hit-rate heatmaps, one panel per method (dark = high hit rate)."""
    methods = result.methods()
    panels = []
    x0 = 10
    width_total = x0
    height = 0
    for name in methods:
        snrs, ks, table = result.grid(name)
        w = 60 + cell * len(snrs)
        h = 60 + cell * len(ks)
        parts = [f'<g transform="translate({width_total},10)">',
                 f'<text x="{w / 2:.0f}" y="12" text-anchor="middle" font-size="12">{name}</text>']
        for i, snr in enumerate(snrs):
            for j, k in enumerate(ks):
                v = table[i, j]
                level = 255 if math.isnan(v) else int(round(255 * (1.0 - v)))
                x = 40 + i * cell
                y = 20 + (len(ks) - 1 - j) * cell
                parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                             f'fill="rgb({level},{level},{level})"><title>SNR {snr:g} dB, K={k}: '
                             f'{v:.3f}</title></rect>')
            parts.append(f'<text x="{40 + i * cell + cell / 2:.0f}" y="{20 + len(ks) * cell + 12}" '
                         f'text-anchor="middle" font-size="9">{snr:g}</text>')
        for j, k in enumerate(ks):
            y = 20 + (len(ks) - 1 - j) * cell + cell / 2 + 3
            parts.append(f'<text x="34" y="{y:.0f}" text-anchor="end" font-size="9">{k}</text>')
        parts.append(f'<text x="{40 + cell * len(snrs) / 2:.0f}" y="{20 + len(ks) * cell + 26}" '
                     f'text-anchor="middle" font-size="10">SNR (dB)</text>')
        parts.append(f'<text x="12" y="{20 + len(ks) * cell / 2:.0f}" font-size="10" '
                     f'transform="rotate(-90 12 {20 + len(ks) * cell / 2:.0f})" text-anchor="middle">K</text>')
        parts.append("</g>")
        panels.append("\n".join(parts))
        width_total += w
        height = max(height, h)
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_total + 10}" height="{height + 20}" '
           f'font-family="sans-serif">\n' + "\n".join(panels) + "\n</svg>\n")
    Path(path).write_text(svg)
