import csv

import pytest

from fedprune import report
from fedprune.cli import main
from fedprune.config import ConfigError, load_config, validate_config
from fedprune.federation import run_experiment

CFG_TEXT = """\
[model]
arch = mlp
dims = 10, 8, 3

[data]
dataset = synthetic
num_train = 300
num_test = 90
num_features = 10
num_classes = 3

[federation]
num_clients = 6
clients_per_round = 3
local_epochs = 1
batch_size = 10
warmup_rounds = 2
pruning_rounds = 6
admm_stage_rounds = 1
mode = admm
seed = 3

[pruning]
rho = 0.001
fc1 = 0.25
fc2 = 0.5
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text(CFG_TEXT)
    return p


class TestLoadConfig:
    def test_round_trip(self, cfg_file):
        cfg = load_config(cfg_file)
        assert cfg.arch == "mlp"
        assert cfg.arch_params == {"dims": (10, 8, 3)}
        assert cfg.dataset_params["num_train"] == 300
        assert cfg.num_clients == 6
        assert cfg.mode == "admm"
        assert cfg.sparsity.keep == {"fc1": 0.25, "fc2": 0.5}
        assert cfg.sparsity.rho == 0.001

    def test_overrides_win(self, cfg_file):
        cfg = load_config(cfg_file, seed=99, mode="dense", pruning_rounds=0)
        assert cfg.seed == 99
        assert cfg.mode == "dense"
        assert cfg.pruning_rounds == 0

    def test_none_overrides_ignored_by_cli_layer(self, cfg_file):
        cfg = load_config(cfg_file, seed=None)
        assert cfg.seed == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.cfg")

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("[secrets]\nx = 1\n")
        with pytest.raises(ConfigError, match="unknown config sections"):
            load_config(p)

    def test_unknown_federation_key(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("[federation]\nlearning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="unknown \\[federation\\] key"):
            load_config(p)

    def test_bad_numeric_value(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("[federation]\nnum_clients = many\n")
        with pytest.raises(ConfigError, match="bad value"):
            load_config(p)

    def test_bad_keep_fraction(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("[pruning]\nfc1 = lots\n")
        with pytest.raises(ConfigError, match="bad keep fraction"):
            load_config(p)

    def test_invalid_combination_surfaces_as_config_error(self, cfg_file):
        with pytest.raises(ConfigError):
            load_config(cfg_file, clients_per_round=50)

    def test_validate_notes(self, cfg_file):
        notes = validate_config(load_config(cfg_file))
        assert any("parameters" in n for n in notes)
        assert any("fc1" in n for n in notes)

    def test_validate_rejects_unknown_layer(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text(CFG_TEXT.replace("fc1 = 0.25", "conv9 = 0.25"))
        with pytest.raises(ConfigError, match="unknown layers"):
            validate_config(load_config(p))


class TestCli:
    def test_validate_ok(self, cfg_file, capsys):
        assert main(["validate", "--config", str(cfg_file)]) == 0
        assert "config ok" in capsys.readouterr().out

    def test_validate_bad_config(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("[federation]\nmode = bogus\n")
        assert main(["validate", "--config", str(p)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_run_writes_reports(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "results"
        rc = main(["run", "--config", str(cfg_file), "--out", str(out), "--quiet"])
        assert rc == 0
        assert (out / "rounds.csv").exists()
        assert (out / "summary.txt").exists()
        assert "final_accuracy" in capsys.readouterr().out

    def test_run_progress_lines(self, cfg_file, tmp_path, capsys):
        main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "r"),
              "--rounds", "2"])
        out = capsys.readouterr().out
        assert out.count("round ") >= 4   # 2 warmup + 2 pruning


def _run_and_rows(cfg_file, tmp_path, **overrides):
    cfg = load_config(cfg_file, **overrides)
    res = run_experiment(cfg)
    paths = report.write_report(res, tmp_path)
    with open(paths["rounds"]) as f:
        rows = list(csv.DictReader(f))
    return res, rows, paths


class TestReport:
    def test_csv_header_and_row_count(self, cfg_file, tmp_path):
        res, rows, paths = _run_and_rows(cfg_file, tmp_path)
        with open(paths["rounds"]) as f:
            header = f.readline().strip().split(",")
        assert tuple(header) == report.CSV_COLUMNS
        assert len(rows) == res.config.total_rounds()

    def test_summary_totals_match_csv(self, cfg_file, tmp_path):
        res, rows, paths = _run_and_rows(cfg_file, tmp_path)
        text = paths["summary"].read_text()
        actual = sum(int(r["bytes_up"]) + int(r["bytes_down"]) for r in rows
                     if r["phase"] in report.PRUNING_PHASES)
        assert f"pruning_phase_volume_bytes = {actual}" in text
        saving = report.saving_percent_from_rows(rows)
        assert f"communication_saving_percent = {saving:.2f}" in text
        assert saving == pytest.approx(res.ledger.saving_percent(), abs=1e-6)

    def test_dense_run_saves_nothing(self, cfg_file, tmp_path):
        _, rows, _ = _run_and_rows(cfg_file, tmp_path, mode="dense",
                                   pruning_rounds=0)
        assert report.saving_percent_from_rows(rows) == 0.0
        assert all(r["phase"] in ("warmup", "dense") for r in rows)

    def test_masked_run_reports_pruning_phase(self, cfg_file, tmp_path):
        _, rows, _ = _run_and_rows(cfg_file, tmp_path, mode="masked")
        assert any(r["phase"] == "masked_prune" for r in rows)
        # CSR index overhead beats the savings on toy-sized layers, so the
        # saving can be negative here; it just has to be accounted at all
        assert report.saving_percent_from_rows(rows) != 0.0
        prune = [r for r in rows if r["phase"] == "masked_prune"]
        assert all(int(r["bytes_up"]) != int(r["dense_bytes_up"]) for r in prune)

    def test_csv_reproducible_except_timing(self, cfg_file, tmp_path):
        _, rows_a, _ = _run_and_rows(cfg_file, tmp_path / "a")
        _, rows_b, _ = _run_and_rows(cfg_file, tmp_path / "b")
        stable = [c for c in report.CSV_COLUMNS if not c.endswith("_s")]
        for ra, rb in zip(rows_a, rows_b):
            for col in stable:
                assert ra[col] == rb[col]

    def test_partial_flag_in_summary(self, cfg_file, tmp_path):
        res, _, _ = _run_and_rows(cfg_file, tmp_path / "full")
        paths = report.write_report(res, tmp_path / "p", partial=True)
        assert "PARTIAL" in paths["summary"].read_text()

    def test_empty_result_rejected(self, cfg_file, tmp_path):
        res = run_experiment(load_config(cfg_file, pruning_rounds=0,
                                         mode="dense", warmup_rounds=1))
        object.__setattr__(res, "metrics", [])
        with pytest.raises(ValueError):
            report.write_report(res, tmp_path)
