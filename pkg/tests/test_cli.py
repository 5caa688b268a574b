import csv
import os
import time
from pathlib import Path

import numpy as np
import pytest

from driu import cli, config, net
from driu.dataio import load_dataset, read_probmap, write_probmap

GOLDEN = Path(__file__).parent / "golden"
SMALL = ["--width-scale", "8"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--seed", "0", "--count", "4", "--size", "64", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    args = ["train", "--data", dataset, "--out", out / "w.driu", "--log", out / "log.csv",
            "--iterations", "50", "--log-every", "0", *SMALL]
    assert cli.main([str(a) for a in args]) == 0
    return out


class TestSynth:
    def test_manifest_and_loadable(self, dataset):
        split = load_dataset(dataset, task="vessel")
        assert len(split.train) + len(split.test) == 4
        assert len(split.train) == 2
        for s in split.train + split.test:
            assert s.second is not None and s.fov is not None
            assert set(np.unique(s.gold)) <= {0, 1}

    def test_both_tasks(self, dataset):
        v = load_dataset(dataset, task="vessel").train[0].gold
        d = load_dataset(dataset, task="disc").train[0].gold
        assert not np.array_equal(v, d)

    def test_deterministic(self, dataset, tmp_path, capsys):
        assert run(capsys, "synth", "--seed", 0, "--count", 4, "--out", tmp_path)[0] == 0
        for path in dataset.rglob("*"):
            if path.is_file():
                assert (tmp_path / path.relative_to(dataset)).read_bytes() == path.read_bytes()

    def test_too_small(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--size", 16, "--out", tmp_path)
        assert code == 2 and "size" in err

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run(capsys, "synth", "--out", blocker / "sub")[0] == 2


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "w.driu").is_file()
        rows = list(csv.reader(open(trained / "log.csv")))
        assert rows[0] == ["iteration", "lr", "loss"] and len(rows) == 51

    def test_deterministic(self, dataset, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--data", dataset, "--out", tmp_path / "w.driu",
                           "--log", tmp_path / "log.csv", "--iterations", 50, "--log-every", 0, *SMALL)
        assert code == 0 and out.startswith("final loss")
        assert (tmp_path / "log.csv").read_bytes() == (trained / "log.csv").read_bytes()
        assert (tmp_path / "w.driu").read_bytes() == (trained / "w.driu").read_bytes()

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "w.driu")
        assert code == 2 and "not found" in err
        assert not (tmp_path / "w.driu").exists()
        assert list(tmp_path.iterdir()) == []

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, dataset, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--data", dataset, "--out", tmp_path / "w.driu",
                           "--base-lr", "1e3", "--iterations", 20, "--log-every", 0, *SMALL)
        assert code == 1 and "non-finite" in err
        assert not (tmp_path / "w.driu").exists()

    def test_config_file_and_override(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# desk run\niterations = 3\nwidth_scale = 8\nlog_every = 0\n")
        code, _, _ = run(capsys, "train", "--config", cfg, "--data", dataset,
                         "--out", tmp_path / "w.driu", "--log", tmp_path / "a.csv")
        assert code == 0 and len((tmp_path / "a.csv").read_text().splitlines()) == 4
        code, _, _ = run(capsys, "train", "--config", cfg, "--iterations", 5, "--data", dataset,
                         "--out", tmp_path / "w.driu", "--log", tmp_path / "b.csv")
        assert code == 0 and len((tmp_path / "b.csv").read_text().splitlines()) == 6

    def test_unknown_config_key(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate = 0.1\n")
        code, _, err = run(capsys, "train", "--config", cfg, "--data", dataset, "--out", tmp_path / "w")
        assert code == 2 and "learning_rate" in err


class TestInfer:
    def test_single(self, dataset, trained, tmp_path, capsys):
        image = dataset / "images" / "synth0000.ppm"
        code, _, _ = run(capsys, "infer", "--weights", trained / "w.driu", "--image", image,
                         "--out", tmp_path / "p.pgm", *SMALL)
        assert code == 0
        p = read_probmap(tmp_path / "p.pgm")
        assert p.shape == (64, 64) and p.min() > 0 and p.max() < 1

    def test_both(self, dataset, trained, tmp_path, capsys):
        image = dataset / "images" / "synth0001.ppm"
        code, _, _ = run(capsys, "infer", "--weights", trained / "w.driu", "--image", image,
                         "--task", "both", "--out", tmp_path / "{task}.pgm", *SMALL)
        assert code == 0
        assert read_probmap(tmp_path / "vessel.pgm").shape == read_probmap(tmp_path / "disc.pgm").shape

    def test_architecture_mismatch(self, dataset, trained, tmp_path, capsys):
        code, _, err = run(capsys, "infer", "--weights", trained / "w.driu",
                           "--image", dataset / "images" / "synth0000.ppm", "--out", tmp_path / "p.pgm")
        assert code == 2 and "stage1.conv1.weight" in err
        assert not (tmp_path / "p.pgm").exists()

    def test_both_heads_share_base(self):
        params = net.build_network(net.NetConfig(), seed=0)
        image = np.random.default_rng(0).random((3, 64, 64)).astype(np.float32)
        means = (0.5, 0.5, 0.5)

        def best_of(tasks, reps=3):
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                cli.infer_maps(params, image, tasks, means)
                times.append(time.perf_counter() - t0)
            return min(times)

        best_of(("vessel",), 1)
        single, both = best_of(("vessel",)), best_of(net.TASKS)
        assert both < 1.6 * single, (single, both)


class TestEval:
    def _write_preds(self, dataset, out, fn):
        out.mkdir(exist_ok=True)
        for s in load_dataset(dataset, task="vessel").test:
            write_probmap(out / f"{s.id}.pgm", fn(s))

    def test_perfect(self, dataset, tmp_path, capsys):
        self._write_preds(dataset, tmp_path / "pred", lambda s: s.gold.astype(float))
        code, out, _ = run(capsys, "eval", "--pred-dir", tmp_path / "pred", "--data", dataset,
                           "--out-prefix", tmp_path / "r" / "ev")
        assert code == 0 and "ods_f = 1.000000" in out
        rows = list(csv.DictReader(open(tmp_path / "r" / "ev_pr.csv")))
        assert len(rows) == 255
        bnd = list(csv.DictReader(open(tmp_path / "r" / "ev_boundary.csv")))
        assert bnd and all(float(r["mean_boundary_error_px"]) == 0 for r in bnd)
        assert (tmp_path / "r" / "ev_human.csv").is_file()
        assert (tmp_path / "r" / "ev_summary.txt").read_text() == out

    def test_random_predictions_recall(self, dataset, tmp_path, capsys):
        rng = np.random.default_rng(1)
        self._write_preds(dataset, tmp_path / "pred", lambda s: rng.random(s.gold.shape))
        assert run(capsys, "eval", "--pred-dir", tmp_path / "pred", "--data", dataset,
                   "--out-prefix", tmp_path / "ev")[0] == 0
        first = next(csv.DictReader(open(tmp_path / "ev_pr.csv")))
        assert float(first["recall"]) > 0.98

    def test_image_average(self, dataset, tmp_path, capsys):
        rng = np.random.default_rng(3)
        self._write_preds(dataset, tmp_path / "pred", lambda s: rng.random(s.gold.shape))
        base = ["eval", "--pred-dir", tmp_path / "pred", "--data", dataset]
        assert run(capsys, *base, "--out-prefix", tmp_path / "p")[0] == 0
        assert run(capsys, *base, "--pr-average", "image", "--out-prefix", tmp_path / "i")[0] == 0
        pooled = list(csv.DictReader(open(tmp_path / "p_pr.csv")))
        image = list(csv.DictReader(open(tmp_path / "i_pr.csv")))
        assert [r["tp"] for r in pooled] == [r["tp"] for r in image]
        assert [r["precision"] for r in pooled] != [r["precision"] for r in image]

    def test_threads_same_output(self, dataset, tmp_path, capsys, monkeypatch):
        rng = np.random.default_rng(2)
        self._write_preds(dataset, tmp_path / "pred", lambda s: rng.random(s.gold.shape))
        run(capsys, "eval", "--pred-dir", tmp_path / "pred", "--data", dataset, "--out-prefix", tmp_path / "a")
        monkeypatch.setenv("DRIU_THREADS", "3")
        run(capsys, "eval", "--pred-dir", tmp_path / "pred", "--data", dataset, "--out-prefix", tmp_path / "b")
        for suffix in ("_pr.csv", "_human.csv", "_summary.txt"):
            assert Path(f"{tmp_path / 'a'}{suffix}").read_bytes() == Path(f"{tmp_path / 'b'}{suffix}").read_bytes()

    def test_missing_maps(self, dataset, tmp_path, capsys):
        (tmp_path / "pred").mkdir()
        code, _, err = run(capsys, "eval", "--pred-dir", tmp_path / "pred", "--data", dataset,
                           "--out-prefix", tmp_path / "ev")
        assert code == 2 and "synth0002" in err and "synth0003" in err


class TestGradcheck:
    def test_passes_and_is_deterministic(self, capsys):
        code, first, _ = run(capsys, "gradcheck", "--seed", 0)
        assert code == 0
        for name in ("conv2d_k3", "conv2d_k1", "relu", "maxpool2x2", "bilinear_resize",
                     "concat_channels", "balanced_bce", "end_to_end"):
            assert name in first
        assert run(capsys, "gradcheck", "--seed", 0)[1] == first

    @pytest.mark.parametrize("op", ["maxpool2x2", "end_to_end"])
    def test_corruption_detected(self, capsys, op):
        code, _, err = run(capsys, "gradcheck", "--corrupt", op)
        assert code == 1 and op in err


class TestHelp:
    COMMANDS = ("train", "infer", "eval", "synth", "gradcheck")

    def _help(self, capsys, command):
        with pytest.raises(SystemExit):
            cli.main([command, "--help"])
        return capsys.readouterr().out

    def test_every_schema_key_has_a_flag(self, capsys):
        text = "".join(self._help(capsys, c) for c in self.COMMANDS)
        for key in config.SCHEMA.values():
            assert key.flag in text, key.flag

    @pytest.mark.parametrize("command", COMMANDS)
    def test_golden(self, capsys, monkeypatch, command):
        monkeypatch.setenv("COLUMNS", "100")
        text = self._help(capsys, command)
        golden = GOLDEN / f"help_{command}.txt"
        if os.environ.get("DRIU_UPDATE_GOLDEN"):
            golden.parent.mkdir(exist_ok=True)
            golden.write_text(text)
        assert text == golden.read_text()
