"""Command-line pipeline: ``blocklista {gen,train,sweep,trace,check,plot}``.

Every command reads one YAML run configuration (``--config``); ``--set
section.key=value`` and the dedicated flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from ._validation import CapabilityError, NumericalError, ValidationError
from .diagnostics import run_checks
from .estimators import BlockFISTA, BlockISTA, network_from_checkpoint
from .evaluation import (
    SweepGrid,
    convergence_trace,
    crossing_iteration,
    export,
    oracle_method,
    read_sweep,
    run_sweep,
    write_svg,
    zeros_method,
)
from .io import (
    FormatError,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    save_dictionary,
)
from .model import GridSpec, build_dictionary, make_rng, sample_pattern
from .networks import ARCHITECTURES, param_count
from .training import (
    TRAIN_STREAM,
    VAL_STREAM,
    TrainConfig,
    TrainingDiverged,
    generate_dataset,
    train,
)

SCHEMA_VERSION = 1
PATTERN_STREAM = 3
EXIT_OK, EXIT_CHECK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4
SOLVER_METHODS = ("block_ista", "block_fista")
BASELINE_METHODS = {"zeros": zeros_method, "oracle": oracle_method}

EXIT_HELP = """\
exit codes:
  0  success
  1  a diagnostic check failed (check)
  2  invalid configuration or input (bad values, untrained method, dictionary mismatch)
  3  numerical failure (divergence, non-finite values, no convergence)
  4  I/O or file-format failure (missing, unreadable or malformed files)
"""

CONFIG_HELP = """\
configuration (YAML, schema_version 1):
  schema_version: 1
  seed: 2024                 # global seed; default for train.seed and sweep.seed
  output_dir: runs/desk      # relative to the working directory
  grid:   {P: 4, Q: 16, N: 32, normalize: false}
  train:  {n_train, n_val, batch_size, epochs, learning_rate, lr_decay,
           lr_decay_every, snr_range_db: [lo, hi], k_range: [lo, hi], n_layers, seed}
  sweep:  {snr_list_db: [...], k_list: [...], trials_per_cell, seed, svg: true}
  methods: [adalista, adablock, adablistacp, block_ista, block_fista, zeros, oracle]
  solver: {max_iter: 1000, tol: 1.0e-10}
  trace:  {steps: 1000}
"""

_TOP_KEYS = {"schema_version", "seed", "output_dir", "grid", "train", "sweep", "methods", "solver", "trace"}

log = logging.getLogger("blocklista")


@dataclass
class RunConfig:
    grid: GridSpec
    N: int
    normalize: bool
    train: TrainConfig
    sweep: SweepGrid
    svg: bool
    methods: list[str]
    output_dir: Path
    seed: int
    solver: dict = field(default_factory=dict)
    trace_steps: int = 1000

    def dictionary(self):
        pattern = sample_pattern(self.grid, self.N, make_rng(self.seed, (PATTERN_STREAM,)))
        return build_dictionary(self.grid, pattern, self.normalize)

    @property
    def checkpoint_dir(self) -> Path:
        return self.output_dir / "checkpoints"

    def checkpoint_path(self, arch: str) -> Path:
        return self.checkpoint_dir / f"{arch}.json"


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    return dict(value)


def _apply_override(raw: dict, item: str) -> None:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ValidationError(f"--set expects section.key=value, got {item!r}")
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValidationError(f"--set {key}: {part!r} is not a section")
    node[parts[-1]] = yaml.safe_load(value)


def parse_config(raw: dict) -> RunConfig:
    """Validate a raw YAML mapping into a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ValidationError("configuration must be a YAML mapping")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported schema_version {raw.get('schema_version')!r}; expected {SCHEMA_VERSION}"
        )
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    g = _section(raw, "grid")
    try:
        P, Q, N = int(g.pop("P")), int(g.pop("Q")), int(g.pop("N"))
    except KeyError as exc:
        raise ValidationError(f"grid section needs P, Q and N (missing {exc})") from None
    normalize = bool(g.pop("normalize", False))
    if g:
        raise ValidationError(f"unknown grid keys: {sorted(g)}")
    grid = GridSpec(P, Q)
    if not 1 <= N <= grid.M:
        raise ValidationError(f"grid.N must satisfy 1 <= N <= M = P*Q = {grid.M}, got N={N}")

    t = _section(raw, "train")
    t.setdefault("seed", seed)
    train_cfg = TrainConfig.from_dict(t)
    s = _section(raw, "sweep")
    svg = bool(s.pop("svg", True))
    s.setdefault("seed", seed)
    unknown = set(s) - {"snr_list_db", "k_list", "trials_per_cell", "seed"}
    if unknown:
        raise ValidationError(f"unknown sweep keys: {sorted(unknown)}")
    sweep = SweepGrid(**s)
    for k in sweep.k_list:
        if not 1 <= k <= Q:
            raise ValidationError(f"sweep.k_list entry {k} outside 1..Q={Q}")
    if train_cfg.k_range[1] > Q:
        raise ValidationError(f"train.k_range upper bound {train_cfg.k_range[1]} exceeds Q={Q}")

    methods = list(raw.get("methods") or [])
    known = set(ARCHITECTURES) | set(SOLVER_METHODS) | set(BASELINE_METHODS)
    bad = [m for m in methods if m not in known]
    if bad:
        raise ValidationError(f"unknown methods {bad}; choose from {sorted(known)}")
    solver = _section(raw, "solver")
    unknown = set(solver) - {"max_iter", "tol"}
    if unknown:
        raise ValidationError(f"unknown solver keys: {sorted(unknown)}")
    tr = _section(raw, "trace")
    out = Path(raw.get("output_dir", "runs"))
    return RunConfig(
        grid=grid,
        N=N,
        normalize=normalize,
        train=train_cfg,
        sweep=sweep,
        svg=svg,
        methods=methods,
        output_dir=out,
        seed=seed,
        solver=solver,
        trace_steps=int(tr.get("steps", 1000)),
    )


def load_config(args) -> RunConfig:
    path = Path(args.config)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: invalid YAML: {exc}") from None
    raw = raw if isinstance(raw, dict) else {}
    for item in args.set or []:
        _apply_override(raw, item)
    if args.seed is not None:
        raw["seed"] = args.seed
        for section in ("train", "sweep"):
            raw.setdefault(section, {}).pop("seed", None)
    if args.out is not None:
        raw["output_dir"] = args.out
    try:
        return parse_config(raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{path}: invalid value: {exc}") from None


def _write_history(history, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_loss"])), repr(float(h["val_loss"])), repr(float(h["lr"]))])


def _load_pair(cfg: RunConfig):
    d = cfg.dictionary()
    out = {}
    for name in ("train", "val"):
        path = cfg.output_dir / f"{name}.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"dataset {path} not found; run `blocklista gen` first")
        d_file, instances = load_dataset(path)
        if not d_file.same_geometry(d):
            raise ValidationError(f"{path} was generated for a different dictionary than the config")
        out[name] = instances
    return d, out["train"], out["val"]


def _solver(name: str, d, cfg: RunConfig):
    cls = BlockISTA if name == "block_ista" else BlockFISTA
    est = cls(d, max_iter=int(cfg.solver.get("max_iter", 1000)), tol=float(cfg.solver.get("tol", 1e-10)))
    return est.fit()


def _load_network(cfg: RunConfig, arch: str):
    path = cfg.checkpoint_path(arch)
    if not path.exists():
        raise ValidationError(f"method {arch!r} is untrained: no checkpoint at {path}")
    ckpt = load_checkpoint(path)
    if ckpt.arch != arch:
        raise ValidationError(f"{path} holds architecture {ckpt.arch!r}, not {arch!r}")
    return network_from_checkpoint(ckpt), path


def _methods(cfg: RunConfig, d, names):
    methods, used = {}, {}
    for name in names:
        if name in ARCHITECTURES:
            methods[name], path = _load_network(cfg, name)
            used[name] = str(path)
        elif name in SOLVER_METHODS:
            methods[name] = _solver(name, d, cfg)
        else:
            methods[name] = BASELINE_METHODS[name]
    return methods, used


def cmd_gen(cfg: RunConfig, args) -> int:
    d = cfg.dictionary()
    cfg.train.validate_for(d)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    save_dictionary(d, cfg.output_dir / "dictionary.json")
    save_dataset(generate_dataset(d, cfg.train, cfg.train.n_train, TRAIN_STREAM), d, cfg.output_dir / "train.jsonl")
    save_dataset(generate_dataset(d, cfg.train, cfg.train.n_val, VAL_STREAM), d, cfg.output_dir / "val.jsonl")
    lo, hi = cfg.train.snr_range_db
    print(f"M={d.M} N={d.N} (P={d.P}, Q={d.Q}) K in [{cfg.train.k_range[0]}, {cfg.train.k_range[1]}] "
          f"SNR in [{lo:g}, {hi:g}] dB")
    print(f"wrote {cfg.train.n_train} train / {cfg.train.n_val} val instances to {cfg.output_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    d, train_set, val_set = _load_pair(cfg)
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    history_path = cfg.output_dir / f"loss_{args.arch}.csv"

    def progress(h):
        log.info("%s epoch %d train %.6g val %.6g", args.arch, h["epoch"], h["train_loss"], h["val_loss"])

    try:
        ckpt, history = train(args.arch, d, cfg.train, train_set, val_set, callback=progress)
    except TrainingDiverged as exc:
        _write_history(exc.history, history_path)
        raise
    counts = param_count(ckpt.params)
    print(f"{args.arch}: weights_real_scalars={counts['weights_real_scalars']} "
          f"real_scalars={counts['real_scalars']} (N={d.N}, Q={d.Q}, T={ckpt.params.schedule.depth})")
    save_checkpoint(ckpt, cfg.checkpoint_path(args.arch))
    _write_history(history, history_path)
    print(f"best epoch {ckpt.epoch} val NMSE {ckpt.val_loss:.6g}; checkpoint {cfg.checkpoint_path(args.arch)}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    if not cfg.methods:
        raise ValidationError("no methods configured for the sweep")
    d = cfg.dictionary()
    methods, used = _methods(cfg, d, cfg.methods)
    result = run_sweep(methods, d, cfg.sweep, provenance={"checkpoints": used, "seed": cfg.seed})
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    export(result, cfg.output_dir / "sweep.csv", "csv")
    if cfg.svg:
        write_svg(result, cfg.output_dir / "sweep.svg")
    for name in result.methods():
        _, _, table = result.grid(name)
        print(f"{name}: mean hit rate {np.mean(table):.4f}")
    return EXIT_OK


def cmd_trace(cfg: RunConfig, args) -> int:
    d, _, val_set = _load_pair(cfg)
    names = [m for m in cfg.methods if m in ARCHITECTURES or m in SOLVER_METHODS]
    if "block_ista" not in names:
        names.append("block_ista")
    methods, _ = _methods(cfg, d, names)
    curves = convergence_trace(methods, val_set, steps=cfg.trace_steps)
    medians = {name: np.median(c, axis=1) for name, c in curves.items() if ":" not in name}
    n_rows = max(len(m) for m in medians.values())
    path = cfg.output_dir / "trace.csv"
    with open(path, "w", newline="") as fh:
        fh.write("# median NMSE over the validation set after each layer/iteration; step 0 is x = 0\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + list(medians))
        for i in range(n_rows):
            w.writerow([i] + [repr(float(m[i])) if i < len(m) else "" for m in medians.values()])
    ref = medians["block_ista"]
    for name in names:
        if name in ARCHITECTURES:
            target = float(medians[name][-1])
            hit = crossing_iteration(ref, target)
            when = f"{hit} iterations" if hit is not None else f"> {cfg.trace_steps} iterations (not reached)"
            print(f"{name}: median NMSE {target:.6g} after {len(medians[name]) - 1} layers; "
                  f"Block-ISTA matches it after {when}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_check(cfg: RunConfig, args) -> int:
    d = cfg.dictionary()
    if args.fault == "lambda":
        lam = np.array(d.lambda_diag)
        lam[0] *= 2.0
        d = d.with_lambda(lam)
    trained = {}
    for path in args.checkpoint or []:
        ckpt = load_checkpoint(path)
        if not ckpt.dictionary.same_geometry(cfg.dictionary()):
            raise ValidationError(f"checkpoint {path} was trained on a different dictionary than the config")
        trained[ckpt.arch] = ckpt.params
    results = run_checks(d, seed=cfg.seed, depth=cfg.train.n_layers, trained=trained)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    print("all checks passed")
    return EXIT_OK


def cmd_plot(cfg: RunConfig, args) -> int:
    src = Path(args.input) if args.input else cfg.output_dir / "sweep.csv"
    dst = Path(args.output) if args.output else src.with_suffix(".svg")
    write_svg(read_sweep(src), dst)
    print(f"wrote {dst}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "trace": cmd_trace,
    "check": cmd_check,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="YAML run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=5 (repeatable)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="override output_dir")
    common.add_argument("--threads", type=int, default=1, help="cap BLAS/OpenMP threads (default 1)")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(
        prog="blocklista",
        description="Block-sparse recovery with unrolled networks: data, training, sweeps, diagnostics.",
        epilog=EXIT_HELP + "\n" + CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter
    sub.add_parser("gen", parents=[common], help="write dictionary and train/val datasets",
                   epilog=EXIT_HELP, formatter_class=fmt)
    p = sub.add_parser("train", parents=[common], help="train one network", epilog=EXIT_HELP, formatter_class=fmt)
    p.add_argument("--arch", required=True, choices=ARCHITECTURES)
    sub.add_parser("sweep", parents=[common], help="hit-rate sweep over (SNR, K)",
                   epilog=EXIT_HELP, formatter_class=fmt)
    sub.add_parser("trace", parents=[common], help="per-layer/iteration NMSE on the validation set",
                   epilog=EXIT_HELP, formatter_class=fmt)
    p = sub.add_parser("check", parents=[common], help="structural and gradient self-checks",
                       epilog=EXIT_HELP, formatter_class=fmt)
    p.add_argument("--checkpoint", action="append", help="run the gradient check at trained parameters")
    p.add_argument("--fault", choices=["lambda"], help="inject a fault (scale one entry of Lambda by 2)")
    p = sub.add_parser("plot", parents=[common], help="SVG heatmaps from a sweep CSV",
                       epilog=EXIT_HELP, formatter_class=fmt)
    p.add_argument("--input", help="sweep CSV (default output_dir/sweep.csv)")
    p.add_argument("--output", help="SVG path (default next to the input)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ValidationError(f"--threads must be >= 1, got {args.threads}")
        with threadpool_limits(limits=args.threads):
            cfg = load_config(args)
            return COMMANDS[args.command](cfg, args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
