import os

import pytest

import rbsr
from rbsr.run_config import ConfigException, load_config, parse_config


def test_defaults_are_full_scale():
    run_config = parse_config("")
    assert run_config.schedule.batch == 16
    assert run_config.schedule.crop == 128
    assert (run_config.schedule.phase1_epochs, run_config.schedule.phase2_epochs) == (1000, 3000)
    assert run_config.sr_schedule.phase1_epochs == 4000
    assert run_config.sr_schedule.lr0 == pytest.approx(1e-3)
    assert run_config.sr.n_res_blocks == 16
    assert run_config.e2e.n_res_blocks == 24
    assert run_config.generator.n_res_blocks == 8
    weights = run_config.loss.weights
    assert (weights.alpha, weights.beta, weights.gamma) == (1.0, 3.0, 1.0)
    assert run_config.paths.output_dir == os.path.join(os.getcwd(), "runs")


def test_values_are_typed():
    run_config = parse_config("[schedule]\nbatch = 8\nlr0 = 2e-4\ncopying = false\n\n[run]\ndeterministic = yes\n")
    assert run_config.schedule.batch == 8
    assert run_config.schedule.lr0 == pytest.approx(2e-4)
    assert run_config.schedule.copying is False
    assert run_config.run.deterministic is True


def test_misspelled_key_reports_line():
    with pytest.raises(ConfigException) as info:
        parse_config("[schedule]\nbatch = 8\nbacth_size = 4\n", "run.ini")
    assert info.value.lineno == 3
    assert str(info.value).startswith("run.ini:3: ")
    assert "bacth_size" in str(info.value)


def test_unknown_section_reports_line():
    with pytest.raises(ConfigException) as info:
        parse_config("[run]\nseed = 1\n\n[optimizer]\nlr = 1\n")
    assert info.value.lineno == 4


def test_invalid_value_reports_line():
    with pytest.raises(ConfigException) as info:
        parse_config("[schedule]\n\nbatch = zero\n")
    assert info.value.lineno == 3
    with pytest.raises(ConfigException) as info:
        parse_config("[loss]\nalpha = 1\nbeta = -3\n")
    assert info.value.lineno == 3


def test_syntax_errors_report_line():
    with pytest.raises(ConfigException) as info:
        parse_config("seed = 1\n")
    assert info.value.lineno == 1
    with pytest.raises(ConfigException) as info:
        parse_config("[run]\nseed = 1\nseed = 2\n")
    assert info.value.lineno == 3


def test_paths_resolve_against_config_file(tmp_path):
    path = tmp_path / "conf" / "run.ini"
    path.parent.mkdir()
    path.write_text("[paths]\nsr_manifest = ../data/sr.tsv\nsr_checkpoint = /abs/sr.ckpt\n")
    run_config = load_config(str(path))
    assert run_config.paths.sr_manifest == str(tmp_path / "data" / "sr.tsv")
    assert run_config.paths.sr_checkpoint == "/abs/sr.ckpt"
    assert run_config.paths.output_dir == str(tmp_path / "conf" / "runs")
    assert run_config.require_path("sr_manifest") == str(tmp_path / "data" / "sr.tsv")
    with pytest.raises(ConfigException) as info:
        run_config.require_path("lookalike_manifest")
    assert info.value.lineno == 1


def test_missing_paths_section_reports_first_line():
    with pytest.raises(ConfigException) as info:
        parse_config("[run]\nseed = 1\n").require_path("sr_manifest")
    assert info.value.lineno == 1
    assert "sr_manifest" in str(info.value)


def test_desk_scale_preset():
    run_config = parse_config("[schedule]\nbatch = 2\n", desk_scale=True)
    assert (run_config.generator.n_res_blocks, run_config.generator.channels) == (1, 8)
    assert run_config.sr.n_res_blocks == 2
    assert run_config.discriminator.input_size == 32
    assert run_config.schedule.batch == 2
    assert (run_config.schedule.phase1_epochs, run_config.schedule.phase2_epochs) == (30, 90)
    # the phase split and the decay period keep their full-scale proportions
    full = parse_config("")
    assert full.schedule.phase2_epochs / full.schedule.phase1_epochs == run_config.schedule.phase2_epochs / 30
    assert run_config.sr_schedule.phase1_epochs / run_config.sr_schedule.decay_every == 4


def test_schedules_carry_seed_and_weights():
    run_config = parse_config("[run]\nseed = 7\n\n[loss]\nbeta = 0.5\n")
    schedule = run_config.lookalike_schedule()
    assert schedule.seed == 7
    assert schedule.weights.beta == 0.5
    assert run_config.lookalike_schedule(seed=3).seed == 3
    assert run_config.sr_train_schedule().total_epochs == 4000


def test_config_hash_tracks_text():
    assert parse_config("[run]\nseed = 1\n").text_hash != parse_config("[run]\nseed = 2\n").text_hash
    assert parse_config("").text_hash == parse_config("").text_hash


def test_schedules_carry_config_hash():
    run_config = parse_config("[schedule]\nbatch = 2\n")
    assert len(run_config.text_hash) == 64
    assert run_config.lookalike_schedule().config_hash == run_config.text_hash
    assert run_config.sr_train_schedule(seed=4).config_hash == run_config.text_hash


def test_missing_config_file(tmp_path):
    with pytest.raises(rbsr.RbsrException):
        load_config(str(tmp_path / "absent.ini"))
    assert load_config(None).schedule.batch == 16
