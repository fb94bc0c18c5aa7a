"""Command-line interface: config parsing, subcommands, exit codes."""

import json

import numpy as np
import pytest

from poselab.cli import ConfigError, load_run_config, main
from poselab.denoising import NEGATIVE_KS_BAND, POSITIVE_KS_BAND

CONFIG_TOML = """
[model]
num_queries = 8
num_keypoints = 5

[optim]
lr = 0.001

[run]
seed = 0
iterations = 3
batch_size = 2
img_size = 64
"""


def _write_config(tmp_path, text=CONFIG_TOML, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _gen_data(tmp_path, seed=0, num=2):
    data = tmp_path / "data"
    rc = main(
        [
            "gen-data",
            "--out", str(data),
            "--num", str(num),
            "--seed", str(seed),
            "--img-size", "64",
            "--max-persons", "2",
        ]
    )
    assert rc == 0
    return data


class TestConfigLoading:
    def test_full_roundtrip(self, tmp_path):
        run = load_run_config(_write_config(tmp_path))
        assert run.model.num_queries == 8
        assert run.optim.lr == pytest.approx(0.001)
        assert run.seed == 0 and run.iterations == 3

    def test_preset_with_override(self, tmp_path):
        path = _write_config(
            tmp_path,
            '[model]\npreset = "s-like"\nnum_queries = 12\n\n[run]\nseed = 1\n',
        )
        run = load_run_config(path)
        assert run.model.embed_dim == 256  # from the preset
        assert run.model.num_queries == 12  # overridden

    def test_unknown_preset(self, tmp_path):
        path = _write_config(tmp_path, '[model]\npreset = "huge"\n\n[run]\nseed = 0\n')
        with pytest.raises(ConfigError, match="preset"):
            load_run_config(path)

    def test_unknown_key_named(self, tmp_path):
        path = _write_config(tmp_path, "[model]\nnum_layrs = 3\n\n[run]\nseed = 0\n")
        with pytest.raises(ConfigError, match="model.num_layrs"):
            load_run_config(path)

    def test_unknown_section_named(self, tmp_path):
        path = _write_config(tmp_path, "[trainer]\nlr = 1\n\n[run]\nseed = 0\n")
        with pytest.raises(ConfigError, match="trainer"):
            load_run_config(path)

    def test_missing_seed(self, tmp_path):
        path = _write_config(tmp_path, "[run]\niterations = 5\n")
        with pytest.raises(ConfigError, match="run.seed"):
            load_run_config(path)

    def test_invalid_toml(self, tmp_path):
        path = _write_config(tmp_path, "[run\nseed = 0\n")
        with pytest.raises(ConfigError, match="syntax"):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.toml")


class TestGenData:
    def test_writes_dataset(self, tmp_path, capsys):
        data = _gen_data(tmp_path)
        out = json.loads(capsys.readouterr().out)
        assert out == {"scenes": 2}
        assert (data / "annotations.jsonl").exists()
        assert (data / "scenes.ntc").exists()

    def test_byte_identical_regeneration(self, tmp_path):
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        for d in (d1, d2):
            rc = main(
                ["gen-data", "--out", str(d), "--num", "3", "--seed", "9", "--img-size", "64"]
            )
            assert rc == 0
        assert (d1 / "annotations.jsonl").read_bytes() == (d2 / "annotations.jsonl").read_bytes()
        assert (d1 / "scenes.ntc").read_bytes() == (d2 / "scenes.ntc").read_bytes()

    def test_different_seed_different_bytes(self, tmp_path):
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        main(["gen-data", "--out", str(d1), "--num", "1", "--seed", "0", "--img-size", "64"])
        main(["gen-data", "--out", str(d2), "--num", "1", "--seed", "1", "--img-size", "64"])
        assert (d1 / "scenes.ntc").read_bytes() != (d2 / "scenes.ntc").read_bytes()


class TestTrainEval:
    def test_train_then_eval(self, tmp_path, capsys):
        data = _gen_data(tmp_path)
        config = _write_config(tmp_path)
        run_dir = tmp_path / "run"
        rc = main(["train", "--config", str(config), "--data", str(data), "--out", str(run_dir)])
        captured = capsys.readouterr()
        assert rc == 0
        summary = json.loads(captured.out.strip().splitlines()[-1])
        assert summary["iterations"] == 3
        assert np.isfinite(summary["final_loss"])
        assert (run_dir / "checkpoint.ntc").exists()
        trace = [json.loads(l) for l in (run_dir / "trace.jsonl").read_text().splitlines()]
        assert trace and "total" in trace[0]

        rc = main(
            [
                "eval",
                "--config", str(config),
                "--data", str(data),
                "--checkpoint", str(run_dir / "checkpoint.ntc"),
            ]
        )
        captured = capsys.readouterr()
        assert rc == 0
        report = json.loads(captured.out.strip().splitlines()[-1])
        assert set(report) == {"AP", "AP50", "AP75", "AR"}
        assert all(0.0 <= v <= 1.0 for v in report.values())

    def test_train_no_dn_flag(self, tmp_path, capsys):
        data = _gen_data(tmp_path)
        config = _write_config(tmp_path)
        run_dir = tmp_path / "run"
        rc = main(
            ["train", "--config", str(config), "--data", str(data), "--out", str(run_dir), "--no-dn"]
        )
        assert rc == 0
        trace = [json.loads(l) for l in (run_dir / "trace.jsonl").read_text().splitlines()]
        assert all(rec["layer0.dn_ksvf"] == 0.0 for rec in trace)

    def test_missing_data_dir_exit_2(self, tmp_path, capsys):
        config = _write_config(tmp_path)
        rc = main(
            ["train", "--config", str(config), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
        )
        assert rc == 2

    def test_bad_config_exit_2(self, tmp_path, capsys):
        data = _gen_data(tmp_path)
        config = _write_config(tmp_path, "[run]\niterations = 1\n", name="bad.toml")
        rc = main(["train", "--config", str(config), "--data", str(data), "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_checkpoint_shape_mismatch_exit_2(self, tmp_path, capsys):
        data = _gen_data(tmp_path)
        config = _write_config(tmp_path)
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(config), "--data", str(data), "--out", str(run_dir)]) == 0
        capsys.readouterr()
        other = _write_config(
            tmp_path,
            "[model]\nnum_queries = 16\n\n[run]\nseed = 0\n",
            name="other.toml",
        )
        rc = main(
            [
                "eval",
                "--config", str(other),
                "--data", str(data),
                "--checkpoint", str(run_dir / "checkpoint.ntc"),
            ]
        )
        assert rc == 2


class TestDnSample:
    def _records(self, capsys, polarity, num=40, seed=0):
        rc = main(["dn-sample", "--num", str(num), "--seed", str(seed), "--polarity", polarity])
        assert rc == 0
        out = capsys.readouterr().out
        return [json.loads(line) for line in out.strip().splitlines()]

    def test_positive_band(self, tmp_path, capsys):
        records = self._records(capsys, "pos")
        assert len(records) == 40
        for rec in records:
            assert rec["polarity"] == "positive"
            for ks in rec["sampled_ks"]:
                assert POSITIVE_KS_BAND[0] <= ks < POSITIVE_KS_BAND[1]
            assert 0.0 <= rec["recomputed_ks"] <= 1.0

    def test_negative_band(self, tmp_path, capsys):
        records = self._records(capsys, "neg")
        for rec in records:
            assert rec["polarity"] == "negative"
            for ks in rec["sampled_ks"]:
                assert NEGATIVE_KS_BAND[0] <= ks < NEGATIVE_KS_BAND[1]

    def test_recomputed_matches_sampled_mean(self, tmp_path, capsys):
        # clamping at the border is rare at this scale; allow a loose bound
        records = self._records(capsys, "pos", num=20, seed=3)
        for rec in records:
            assert rec["recomputed_ks"] == pytest.approx(
                np.mean(rec["sampled_ks"]), abs=0.05
            )


class TestParser:
    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            main([])

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])
