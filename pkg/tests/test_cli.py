"""CLI contract tests: exit codes, artifact manifests, determinism, and the
profile/gradcheck subcommands."""

import json
import subprocess
import sys

import pytest

from caformer.cli import main
from caformer.tensorio import load_catm


def run_cli(*argv):
    return main(list(argv))


class TestForwardCommand:
    def test_default_run_writes_manifest(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli("forward", "--seed", "0", "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 0
        assert len(manifest["artifacts"]) >= 3
        for name in manifest["artifacts"]:
            assert (out / name).exists()
        assert "bbox:" in capsys.readouterr().out

    def test_same_seed_gives_identical_hashes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("forward", "--seed", "7", "--out", str(a)) == 0
        assert run_cli("forward", "--seed", "7", "--out", str(b)) == 0
        ha = json.loads((a / "manifest.json").read_text())["artifacts"]
        hb = json.loads((b / "manifest.json").read_text())["artifacts"]
        assert ha == hb

    def test_different_seeds_differ(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli("forward", "--seed", "0", "--out", str(a))
        run_cli("forward", "--seed", "1", "--out", str(b))
        ha = json.loads((a / "manifest.json").read_text())["artifacts"]
        hb = json.loads((b / "manifest.json").read_text())["artifacts"]
        assert ha != hb

    def test_malformed_config_exits_2_naming_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"search_sides": 32}')
        assert run_cli("forward", "--config", str(cfg), "--out",
                       str(tmp_path / "o")) == 2
        assert "search_sides" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert run_cli("forward", "--config", str(tmp_path / "nope.json"),
                       "--out", str(tmp_path / "o")) == 2

    def test_custom_config_round_trips(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "patch": 4, "channels": 16, "heads": 2, "layers": 4,
            "template_side": 8, "search_side": 16,
            "cma_layers": [4], "cte_layers": [2], "keep_ratio": 0.7, "seed": 0,
        }))
        out = tmp_path / "run"
        assert run_cli("forward", "--config", str(cfg), "--out", str(out)) == 0
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["channels"] == 16
        score = load_catm(out / "score.catm")
        assert score.shape == (4, 4)  # search grid of the custom config

    def test_score_map_artifact_matches_diagnostics(self, tmp_path):
        out = tmp_path / "run"
        run_cli("forward", "--seed", "3", "--out", str(out))
        score = load_catm(out / "score.catm")
        assert score.shape == (8, 8)
        assert (score.data >= 0).all() and (score.data <= 1).all()
        keeps = (out / "keepsets.txt").read_text().strip().splitlines()
        assert len(keeps) == 3  # default elimination schedule


class TestGradcheckCommand:
    def test_cme_scope_exits_0(self, capsys):
        assert run_cli("gradcheck", "--scope", "cme", "--seed", "0") == 0
        assert "gradcheck cme" in capsys.readouterr().out

    def test_corrupted_gradient_exits_1(self, monkeypatch, capsys):
        monkeypatch.setenv("CAFORMER_GRADCHECK_CORRUPT", "cme.w_e")
        assert run_cli("gradcheck", "--scope", "cme", "--seed", "0") == 1
        assert "cme.w_e" in capsys.readouterr().err


class TestProfileCommand:
    def test_paper_scale_reports_reference_band(self, capsys):
        assert run_cli("profile", "--scale", "paper", "--giga") == 0
        out = capsys.readouterr().out
        total = float(out.split("backbone total:")[1].split("G")[0])
        assert 58.1 <= total <= 58.4
        assert "58.43" in out

    def test_paper_scale_with_elimination(self, capsys):
        assert run_cli("profile", "--scale", "paper", "--cte", "--giga") == 0
        out = capsys.readouterr().out
        total = float(out.split("backbone total:")[1].split("G")[0])
        assert 42.5 <= total <= 43.3
        assert "42.91" in out

    def test_desk_scale_cross_check_passes(self, capsys):
        assert run_cli("profile", "--scale", "desk") == 0
        assert "measured == estimated" in capsys.readouterr().out


def test_console_entry_point_subprocess(tmp_path):
    # the installed executable must behave like the in-process main()
    result = subprocess.run(
        [sys.executable, "-m", "caformer.cli", "forward", "--seed", "0",
         "--out", str(tmp_path / "run")],
        capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
    assert (tmp_path / "run" / "manifest.json").exists()


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
