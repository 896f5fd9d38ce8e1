import re

import numpy as np
import pytest
import yaml

from blocklista.cli import EXIT_CHECK, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, build_parser, main
from blocklista.evaluation import read_sweep
from blocklista.io import load_checkpoint, load_dataset
from blocklista.training import TrainConfig, initial_params

TINY = {
    "schema_version": 1,
    "seed": 3,
    "grid": {"P": 4, "Q": 8, "N": 16},
    "train": {"n_train": 128, "n_val": 32, "epochs": 2, "n_layers": 4, "k_range": [1, 3]},
    "sweep": {"snr_list_db": [10, 30], "k_list": [1, 2], "trials_per_cell": 10},
    "methods": ["adablistacp", "block_ista", "zeros"],
    "solver": {"max_iter": 200},
    "trace": {"steps": 40},
}


@pytest.fixture
def run(tmp_path):
    """``run(*args, **config_overrides)`` -> exit code, with a tiny config in tmp_path."""

    def _run(*args, config=None):
        raw = {**TINY, **(config or {})}
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(raw))
        return main([args[0], "-c", str(path), "--out", str(tmp_path / "out"), *args[1:]])

    return _run


@pytest.fixture
def out(tmp_path):
    return tmp_path / "out"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny output directory holding data and a trained CP checkpoint."""
    root = tmp_path_factory.mktemp("trained")
    path = root / "cfg.yaml"
    path.write_text(yaml.safe_dump(TINY))
    base = ["-c", str(path), "--out", str(root / "out")]
    assert main(["gen", *base]) == EXIT_OK
    assert main(["train", *base, "--arch", "adablistacp"]) == EXIT_OK
    return path, root / "out"


class TestGen:
    def test_files_and_determinism(self, run, out, capsys):
        assert run("gen") == EXIT_OK
        assert "M=32 N=16" in capsys.readouterr().out
        names = ["dictionary.json", "train.jsonl", "val.jsonl"]
        first = {n: (out / n).read_bytes() for n in names}
        d, insts = load_dataset(out / "train.jsonl")
        assert len(insts) == 128 and d.N == 16
        assert run("gen") == EXIT_OK
        assert {n: (out / n).read_bytes() for n in names} == first

    def test_n_exceeds_m(self, run, capsys):
        assert run("gen", config={"grid": {"P": 4, "Q": 8, "N": 40}}) == EXIT_VALIDATION
        assert "N <= M" in capsys.readouterr().err

    @pytest.mark.parametrize("patch", [{"schema_version": 2}, {"bogus": 1}, {"train": {"epochs": "many"}},
                                       {"methods": ["magic"]}])
    def test_invalid_config(self, run, patch):
        assert run("gen", config=patch) == EXIT_VALIDATION

    def test_set_override(self, run, out):
        assert run("gen", "--set", "train.n_val=7") == EXIT_OK
        assert len(load_dataset(out / "val.jsonl")[1]) == 7


class TestTrain:
    def test_zero_lr_keeps_init(self, run, out):
        run("gen")
        assert run("train", "--arch", "adablock", "--set", "train.learning_rate=0") == EXIT_OK
        ckpt = load_checkpoint(out / "checkpoints" / "adablock.json")
        init, _, _ = initial_params("adablock", ckpt.dictionary, TrainConfig.from_dict(ckpt.train_config))
        np.testing.assert_array_equal(ckpt.params.weights, init.weights)
        np.testing.assert_array_equal(ckpt.params.schedule.thresholds, init.schedule.thresholds)
        np.testing.assert_array_equal(ckpt.params.schedule.step_sizes, init.schedule.step_sizes)
        assert (out / "loss_adablock.csv").read_text().startswith("epoch,train_loss,val_loss,lr")

    def test_weight_counts_differ_by_q(self, run, capsys):
        run("gen")
        counts = {}
        for arch in ("adablistacp", "adablock"):
            capsys.readouterr()
            assert run("train", "--arch", arch, "--set", "train.epochs=1") == EXIT_OK
            counts[arch] = int(re.search(r"weights_real_scalars=(\d+)", capsys.readouterr().out).group(1))
        assert counts["adablock"] == 8 * counts["adablistacp"] == 8 * 2 * 16**2

    def test_missing_dataset(self, run, capsys):
        assert run("train", "--arch", "adalista") == EXIT_IO
        assert "gen" in capsys.readouterr().err

    def test_divergence_writes_history(self, run, out):
        run("gen")
        code = run("train", "--arch", "adalista", "--set", "train.learning_rate=5.0", "--set", "train.epochs=3")
        assert code == EXIT_NUMERICAL
        assert (out / "loss_adalista.csv").exists()
        assert not (out / "checkpoints" / "adalista.json").exists()


class TestSweep:
    def test_one_cell_block_ista(self, run, out):
        cfg = {"methods": ["block_ista"], "sweep": {"snr_list_db": [20], "k_list": [2], "trials_per_cell": 25}}
        assert run("sweep", config=cfg) == EXIT_OK
        res = read_sweep(out / "sweep.csv")
        assert len(res.rows) == 1 and res.rows[0]["trials"] == 25
        assert (out / "sweep.svg").exists()
        first = (out / "sweep.csv").read_bytes()
        assert run("sweep", config=cfg) == EXIT_OK
        assert (out / "sweep.csv").read_bytes() == first

    def test_untrained_method(self, run, capsys):
        assert run("sweep", config={"methods": ["adalista"]}) == EXIT_VALIDATION
        assert "untrained" in capsys.readouterr().err

    def test_dictionary_mismatch(self, trained, capsys):
        path, out = trained
        # a different global seed draws a different sampling pattern
        code = main(["sweep", "-c", str(path), "--out", str(out), "--seed", "4", "--set", "methods=[adablistacp]"])
        assert code == EXIT_VALIDATION
        assert "sampling pattern" in capsys.readouterr().err

    def test_trained_sweep_and_plot(self, trained, tmp_path):
        path, out = trained
        assert main(["sweep", "-c", str(path), "--out", str(out)]) == EXIT_OK
        res = read_sweep(out / "sweep.csv")
        assert res.methods() == ["adablistacp", "block_ista", "zeros"]
        assert "adablistacp" in res.provenance["checkpoints"]
        target = tmp_path / "p.svg"
        assert main(["plot", "-c", str(path), "--out", str(out), "--output", str(target)]) == EXIT_OK
        assert target.read_text().count("<g ") == 3


class TestTrace:
    def test_trace(self, trained, capsys):
        path, out = trained
        assert main(["trace", "-c", str(path), "--out", str(out)]) == EXIT_OK
        text = capsys.readouterr().out
        assert "Block-ISTA matches it after" in text
        lines = (out / "trace.csv").read_text().splitlines()
        assert lines[1] == "step,adablistacp,block_ista"
        assert len(lines) == 2 + 41


class TestCheck:
    def test_passes(self, run, capsys):
        assert run("check") == EXIT_OK
        text = capsys.readouterr().out
        for name in ("factorization", "coupling", "gradient"):
            assert name in text
        assert "FAIL" not in text

    def test_fault_injection(self, run, capsys):
        assert run("check", "--fault", "lambda") == EXIT_CHECK
        text = capsys.readouterr().out
        assert re.search(r"FAIL\s+factorization", text)

    def test_trained_checkpoint(self, trained, capsys):
        path, out = trained
        ckpt = out / "checkpoints" / "adablistacp.json"
        assert main(["check", "-c", str(path), "--out", str(out), "--checkpoint", str(ckpt)]) == EXIT_OK


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for code in range(5):
        assert re.search(rf"^\s+{code}\s", text, re.M)
    for cmd in ("gen", "train", "sweep", "trace", "check", "plot"):
        assert cmd in text


def test_bad_threads(run):
    assert run("gen", "--threads", "0") == EXIT_VALIDATION
