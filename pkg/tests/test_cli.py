import json

import numpy as np
import pytest

from cfcinet.cli import main
from cfcinet.config import Config, apply_overrides, load_config, save_config
from cfcinet.data import load_case, load_labels, save_labels, synth_case

TINY = [
    "--set", "network.in_size=16",
    "--set", "network.widths=[4,8,16]",
    "--set", "mfci.l1=1", "--set", "mfci.l2=1", "--set", "mfci.heads=2", "--set", "mfci.embed_dim=8",
    "--set", "train.augment=false", "--set", "train.crop_size=16",
]


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 7 and "FAIL" not in out


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2


def test_infer_requires_checkpoint_flag(tmp_path):
    assert main(["infer", "--case", str(tmp_path)]) == 2


def test_infer_missing_checkpoint_file(tmp_path, capsys):
    code = main(["infer", "--case", str(tmp_path), "--checkpoint", str(tmp_path / "none.pt")])
    assert code == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_synth_writes_cases(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "2", "--size", "16", "--seed", "3"]) == 0
    case = load_case(tmp_path / "synth_001")
    assert case.shape == (16, 16, 16) and case.labels is not None


def test_evaluate_phantom_pair(tmp_path, capsys):
    labels = synth_case(np.random.default_rng(0), 16).labels
    save_labels(labels, tmp_path / "gt.nii.gz")
    shifted = np.roll(labels, 1, axis=0)
    save_labels(shifted, tmp_path / "pred.nii.gz")
    assert main(["evaluate", str(tmp_path / "gt.nii.gz"), str(tmp_path / "gt.nii.gz"),
                 "--csv", str(tmp_path / "self.csv")]) == 0
    rows = (tmp_path / "self.csv").read_text().splitlines()
    assert rows[1].startswith("WT,1.0") and len(rows) == 4
    capsys.readouterr()
    assert main(["evaluate", str(tmp_path / "pred.nii.gz"), str(tmp_path / "gt.nii.gz")]) == 0
    assert "WT" in capsys.readouterr().out


def test_train_then_infer(tmp_path):
    run = tmp_path / "run"
    code = main(["train", "--out", str(run), "--synthetic", "1", "--synthetic-val", "1",
                 "--synthetic-size", "16", "--epochs", "1", *TINY])
    assert code == 0
    assert (run / "last.pt").is_file() and (run / "metrics.csv").is_file()
    assert load_config(run / "config.yaml").network.in_size == 16
    main(["synth", "--out", str(tmp_path / "cases"), "--size", "20"])
    out = tmp_path / "pred.nii.gz"
    code = main(["infer", "--case", str(tmp_path / "cases" / "synth_000"), "--checkpoint", str(run / "last.pt"),
                 "--out", str(out), "--overlap", "0.5"])
    assert code == 0
    pred, _ = load_labels(out)
    assert pred.shape == (20, 20, 20)


def test_infer_patch_mismatch_rejected(tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", "--out", str(run), "--synthetic", "1", "--synthetic-val", "0",
          "--synthetic-size", "16", "--epochs", "1", *TINY])
    main(["synth", "--out", str(tmp_path / "cases"), "--size", "16"])
    code = main(["infer", "--case", str(tmp_path / "cases" / "synth_000"), "--checkpoint", str(run / "last.pt"),
                 "--patch-size", "32"])
    assert code == 1
    assert "does not match" in capsys.readouterr().err


class TestConfig:
    def test_round_trip_yaml(self, tmp_path):
        cfg = apply_overrides(Config(), ["mfci.alpha=0.25", "network.pairing=t1_t1ce+t2_flair"])
        save_config(cfg, tmp_path / "c.yaml")
        again = load_config(tmp_path / "c.yaml")
        assert again.to_dict() == cfg.to_dict()
        assert again.network.mfci.alpha == 0.25

    def test_json(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"epochs": 3}, "mfci": {"l2": 2}}))
        cfg = load_config(tmp_path / "c.json")
        assert cfg.train.epochs == 3 and cfg.network.mfci.l2 == 2

    @pytest.mark.parametrize("bad", ["epochs=3", "train.nope=1", "nope.epochs=1"])
    def test_bad_overrides(self, bad):
        with pytest.raises(ValueError):
            apply_overrides(Config(), [bad])

    def test_defaults(self):
        cfg = Config().validate()
        assert cfg.train.epochs == 200 and cfg.infer.overlap == 0.75 and cfg.infer.patch_size == 0
        assert cfg.network.in_size == 128
        assert cfg.network.widths == (16, 32, 64, 128)

    def test_invalid_widths(self):
        with pytest.raises(ValueError, match="double"):
            apply_overrides(Config(), ["network.widths=[4,6,8]"]).validate()
