import csv
import math

import numpy as np
import pytest
import yaml
from PIL import Image

from icafusion import cli, metrics
from icafusion.errors import ConfigError
from icafusion.generator import VARIANT_LABELS
from icafusion.synthetic import write_toy_dataset

TINY = {"generator": {"widths": [2, 2, 2, 2]}, "critic": {"widths": [2, 2, 2, 2]},
        "data": {"size": 16, "stride": 16, "toy_size": 16}}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({"schema_version": 1, **TINY}))
    return path


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _train(tmp_path, tiny_config, name="run", *extra):
    return cli.main(["train", "--config", str(tiny_config), "--toy", "8", "--epochs", "1", "--batch", "4",
                     "--out-dir", str(tmp_path / name), "--quiet", *extra])


class TestConfig:
    def test_defaults(self):
        cfg = cli.build_run_config({})
        assert cfg.train.batch_size == 4 and cfg.generator.encoder_widths == (16, 32, 64, 128)
        assert cfg.critic.input_size == (128, 128)

    def test_unknown_keys_rejected(self):
        for raw in ({"train": {"lr": 1}}, {"generator": {"depth": 3}}, {"critic": {"bn": True}},
                    {"data": {"path": "x"}}, {"ablate": {"all": 1}}):
            with pytest.raises(ConfigError):
                cli.build_run_config(raw)

    def test_unknown_section_and_version(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("schema_version: 1\nmodel: {}\n")
        with pytest.raises(ConfigError):
            cli.read_config_file(path)
        path.write_text("schema_version: 2\n")
        with pytest.raises(ConfigError):
            cli.read_config_file(path)

    def test_yaml_exponent_strings(self):
        cfg = cli.build_run_config({"train": {"lr_generator": "1e-4", "epochs": "3"}})
        assert cfg.train.lr_generator == 1e-4 and cfg.train.epochs == 3

    def test_echo_round_trip(self, tmp_path):
        cfg = cli.build_run_config(TINY, {"train.seed": 9, "generator.variant": "only_spatial"})
        cfg.write(tmp_path / "c.yaml")
        again = cli.build_run_config(cli.read_config_file(tmp_path / "c.yaml"))
        assert again == cfg
        assert not again.generator.use_channel

    def test_env_overrides_file_and_flag_overrides_env(self, tmp_path, tiny_config, monkeypatch):
        monkeypatch.setenv("ICAF_SEED", "5")
        args = cli.build_parser().parse_args(["train", "--config", str(tiny_config)])
        assert cli.run_config_from_args(args).train.seed == 5
        args = cli.build_parser().parse_args(["train", "--config", str(tiny_config), "--seed", "6"])
        assert cli.run_config_from_args(args).train.seed == 6

    def test_bad_env(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("ICAF_SEED", "abc")
        assert cli.main(["train", "--toy", "4", "--out-dir", str(tmp_path)]) == 2


class TestTrain:
    def test_two_steps_and_outputs(self, tmp_path, tiny_config, capsys):
        assert _train(tmp_path, tiny_config) == 0
        out = tmp_path / "run"
        assert [r[0] for r in _read_csv(out / "losses.csv")[1:]] == ["1", "2"]
        assert (out / "checkpoint.icaf").exists() and (out / "manifest.txt").exists()
        echoed = yaml.safe_load((out / "config.yaml").read_text())
        assert echoed["train"]["epochs"] == 1 and echoed["schema_version"] == 1

    def test_refuses_to_clobber(self, tmp_path, tiny_config, capsys):
        assert _train(tmp_path, tiny_config) == 0
        assert _train(tmp_path, tiny_config) == 2
        assert "--overwrite" in capsys.readouterr().err
        assert _train(tmp_path, tiny_config, "run", "--overwrite") == 0

    def test_rerun_from_echo_reproduces(self, tmp_path, tiny_config):
        assert _train(tmp_path, tiny_config) == 0
        echo = tmp_path / "run" / "config.yaml"
        assert cli.main(["train", "--config", str(echo), "--out-dir", str(tmp_path / "again"), "--quiet"]) == 0
        assert (tmp_path / "run" / "losses.csv").read_bytes() == (tmp_path / "again" / "losses.csv").read_bytes()

    def test_missing_dataset_dir(self, tmp_path, tiny_config):
        code = cli.main(["train", "--config", str(tiny_config), "--data-dir", str(tmp_path / "absent"),
                         "--out-dir", str(tmp_path / "o")])
        assert code == 3

    def test_no_data_is_config_error(self, tmp_path):
        assert cli.main(["train", "--out-dir", str(tmp_path / "o")]) == 2

    def test_from_directory_with_plot(self, tmp_path, tiny_config):
        write_toy_dataset(tmp_path / "data", n=4, size=16)
        code = cli.main(["train", "--config", str(tiny_config), "--data-dir", str(tmp_path / "data"),
                         "--epochs", "2", "--out-dir", str(tmp_path / "o"), "--quiet", "--plot"])
        assert code == 0 and (tmp_path / "o" / "losses.png").stat().st_size > 0


class TestFuse:
    @pytest.fixture
    def ckpt(self, tmp_path, tiny_config):
        assert _train(tmp_path, tiny_config) == 0
        return tmp_path / "run" / "checkpoint.icaf"

    def test_self_pair(self, tmp_path, ckpt):
        src = tmp_path / "a.png"
        Image.fromarray(np.random.default_rng(0).integers(0, 256, (20, 30), dtype=np.uint8)).save(src)
        outs = [tmp_path / "f1.png", tmp_path / "f2.png"]
        for out in outs:
            assert cli.main(["fuse", str(ckpt), "--ir", str(src), "--vis", str(src), "--out", str(out)]) == 0
        img = Image.open(outs[0])
        assert img.mode == "L" and img.size == (30, 20)
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_refuses_to_clobber(self, tmp_path, ckpt):
        src = tmp_path / "a.png"
        Image.fromarray(np.zeros((8, 8), np.uint8)).save(src)
        args = ["fuse", str(ckpt), "--ir", str(src), "--vis", str(src), "--out", str(tmp_path / "f.png")]
        assert cli.main(args) == 0
        assert cli.main(args) == 2
        assert cli.main(args + ["--overwrite"]) == 0

    def test_directory_mode(self, tmp_path, ckpt):
        write_toy_dataset(tmp_path / "pairs", n=3, size=16)
        assert cli.main(["fuse", str(ckpt), "--pairs-dir", str(tmp_path / "pairs"), "--out", str(tmp_path / "f")]) == 0
        assert sorted(p.name for p in (tmp_path / "f").iterdir()) == ["toy000.png", "toy001.png", "toy002.png"]

    def test_size_mismatch_is_data_error(self, tmp_path, ckpt):
        Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "a.png")
        Image.fromarray(np.zeros((8, 9), np.uint8)).save(tmp_path / "b.png")
        code = cli.main(["fuse", str(ckpt), "--ir", str(tmp_path / "a.png"), "--vis", str(tmp_path / "b.png"),
                         "--out", str(tmp_path / "f.png")])
        assert code == 3

    def test_damaged_checkpoint(self, tmp_path, ckpt):
        ckpt.write_bytes(ckpt.read_bytes()[:200])
        Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / "a.png")
        code = cli.main(["fuse", str(ckpt), "--ir", str(tmp_path / "a.png"), "--vis", str(tmp_path / "a.png"),
                         "--out", str(tmp_path / "f.png")])
        assert code == 3


class TestEval:
    @pytest.fixture
    def dirs(self, tmp_path):
        rng = np.random.default_rng(1)
        d = {k: tmp_path / k for k in ("fused", "ir", "vis")}
        for p in d.values():
            p.mkdir()
        for ident in ("a", "b", "c"):
            for k, p in d.items():
                Image.fromarray(rng.integers(0, 256, (24, 24), dtype=np.uint8)).save(p / f"{ident}.png")
        return d

    def _run(self, d, out, *extra):
        return cli.main(["eval", "--fused", str(d["fused"]), "--ir", str(d["ir"]), "--vis", str(d["vis"]),
                         "--out", str(out), *extra])

    def test_mean_row_matches_hand_average(self, dirs, tmp_path):
        assert self._run(dirs, tmp_path / "m.csv", "--plot") == 0
        rows = _read_csv(tmp_path / "m.csv")
        assert rows[0] == ["identifier", *metrics.METRIC_NAMES]
        assert [r[0] for r in rows[1:]] == ["a", "b", "c", "mean"]
        per = np.array([[float(v) for v in r[1:]] for r in rows[1:4]])
        mean = [float(v) for v in rows[4][1:]]
        for k in range(8):
            assert mean[k] == pytest.approx(math.fsum(per[:, k]) / 3, rel=1e-15)
        expected = metrics.evaluate(*(np.asarray(Image.open(dirs[k] / "a.png")) for k in ("fused", "ir", "vis")))
        assert [float(v) for v in rows[1][1:]] == expected.values()
        assert (tmp_path / "m.png").exists()

    def test_single_triple(self, dirs, tmp_path):
        for ident in ("b", "c"):
            (dirs["fused"] / f"{ident}.png").unlink()
        assert self._run(dirs, tmp_path / "m.csv") == 0
        assert len(_read_csv(tmp_path / "m.csv")) == 3  # header, image, mean

    def test_unmatched_warns(self, dirs, tmp_path, caplog):
        (dirs["vis"] / "b.png").unlink()
        assert self._run(dirs, tmp_path / "m.csv") == 0
        assert "b lacks" in caplog.text
        assert [r[0] for r in _read_csv(tmp_path / "m.csv")[1:]] == ["a", "c", "mean"]

    def test_nothing_matched(self, dirs, tmp_path):
        for p in dirs["fused"].iterdir():
            p.unlink()
        assert self._run(dirs, tmp_path / "m.csv") == 3


def test_ablate_table_shape_and_determinism(tmp_path, tiny_config):
    args = ["ablate", "--config", str(tiny_config), "--toy", "4", "--max-steps", "2", "--quiet"]
    assert cli.main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    rows = _read_csv(tmp_path / "a" / "ablation.csv")
    assert rows[0] == ["variant", *metrics.METRIC_NAMES]
    assert [r[0] for r in rows[1:]] == list(VARIANT_LABELS.values())
    assert all(len(r) == 9 for r in rows)
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()
    assert cli.main(args + ["--out-dir", str(tmp_path / "a")]) == 2


def test_toy_command(tmp_path):
    assert cli.main(["toy", "--out-dir", str(tmp_path / "t"), "--pairs", "3", "--size", "32"]) == 0
    assert len(list((tmp_path / "t").iterdir())) == 6
    assert cli.main(["toy", "--out-dir", str(tmp_path / "t"), "--pairs", "3", "--size", "32"]) == 2


def test_unknown_variant_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--variant", "only_magic"])
    assert exc.value.code == 2


def test_numerical_failure_exits_4(tmp_path, tiny_config, monkeypatch, capsys):
    from icafusion.errors import NumericalError

    def diverge(*args, **kwargs):
        raise NumericalError("non-finite loss at batch toy000/0")

    monkeypatch.setattr(cli, "train", diverge)
    assert _train(tmp_path, tiny_config) == 4
    assert "toy000/0" in capsys.readouterr().err


def test_resume_matches_uninterrupted(tmp_path, tiny_config):
    base = ["train", "--config", str(tiny_config), "--toy", "8", "--epochs", "2", "--batch", "4", "--quiet"]
    assert cli.main(base + ["--out-dir", str(tmp_path / "full")]) == 0
    assert cli.main(base + ["--out-dir", str(tmp_path / "part"), "--max-steps", "3"]) == 0
    assert cli.main(base + ["--out-dir", str(tmp_path / "part"), "--resume"]) == 0
    assert (tmp_path / "part" / "losses.csv").read_bytes() == (tmp_path / "full" / "losses.csv").read_bytes()
