"""Shared fixtures: the desk-scale trained networks and the acceptance report.

Training the three desk networks takes a few minutes, so results are cached
in the pytest cache under a key derived from the package sources and the
desk preset; any code or config change retrains. ``pytest --cache-clear``
forces a fresh run.
"""

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import yaml

import blocklista
from blocklista.cli import parse_config
from blocklista.estimators import BlockISTA, network_from_checkpoint
from blocklista.evaluation import export, read_sweep, run_sweep, zeros_method
from blocklista.io import load_checkpoint, save_checkpoint
from blocklista.networks import ARCHITECTURES
from blocklista.training import TRAIN_STREAM, VAL_STREAM, generate_dataset, train

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk-fig2.yaml"

_REPORT: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def report():
    """``report(label, passed, detail)`` records one acceptance line."""

    def _report(label, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        print(line)
        _REPORT.append(line)
        return passed

    return _report


def _cache_key() -> str:
    h = hashlib.sha256(DESK_CONFIG.read_bytes())
    for path in sorted(Path(blocklista.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class DeskRun:
    config: object
    dictionary: object
    networks: dict
    histories: dict
    train_seconds: dict
    val_set: list
    cache_dir: Path


@pytest.fixture(scope="session")
def desk_config():
    return parse_config(yaml.safe_load(DESK_CONFIG.read_text()))


@pytest.fixture(scope="session")
def desk_run(request, desk_config) -> DeskRun:
    cfg = desk_config
    d = cfg.dictionary()
    cache = Path(request.config.cache.mkdir(f"desk-{_cache_key()}"))
    val_set = generate_dataset(d, cfg.train, cfg.train.n_val, VAL_STREAM)
    train_set = None
    networks, histories, seconds = {}, {}, {}
    for arch in ARCHITECTURES:
        ckpt_path = cache / f"{arch}.json"
        meta_path = cache / f"{arch}.history.json"
        if not (ckpt_path.exists() and meta_path.exists()):
            if train_set is None:
                train_set = generate_dataset(d, cfg.train, cfg.train.n_train, TRAIN_STREAM)
            start = time.perf_counter()
            ckpt, history = train(arch, d, cfg.train, train_set, val_set)
            save_checkpoint(ckpt, ckpt_path)
            meta_path.write_text(json.dumps({"history": history, "seconds": time.perf_counter() - start}))
        meta = json.loads(meta_path.read_text())
        networks[arch] = network_from_checkpoint(load_checkpoint(ckpt_path))
        histories[arch] = meta["history"]
        seconds[arch] = meta["seconds"]
    return DeskRun(cfg, d, networks, histories, seconds, val_set, cache)


@pytest.fixture(scope="session")
def desk_sweep(desk_run):
    path = desk_run.cache_dir / "sweep.csv"
    if not path.exists():
        cfg = desk_run.config
        methods = dict(desk_run.networks)
        methods["block_ista"] = BlockISTA(desk_run.dictionary, max_iter=1000).fit()
        methods["zeros"] = zeros_method
        export(run_sweep(methods, desk_run.dictionary, cfg.sweep), path)
    return read_sweep(path)
