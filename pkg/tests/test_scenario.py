import math

import numpy as np
import pytest

from kfcool.errors import InvalidInputError, ScenarioError
from kfcool.scenario import (LoopState, ScenarioConfig, read_psd, read_report, run_scenario,
                             schedule_lookup, sweep_delay, write_psd)
from kfcool.analysis import welch_psd

from conftest import TS, short_config


def test_default_config_validates():
    cfg = ScenarioConfig().validate()
    assert cfg.sample_period == pytest.approx(TS, rel=1e-15, abs=0)
    ns = cfg.stage_samples()
    assert ns["reference"] == ns["cooled"] >= cfg.analysis.segment_len


def test_config_text_round_trip():
    cfg = short_config(**{"run.seed": 17, "controller.enabled": False,
                          "run.pressure_schedule": ((0.0, 300.0), (1e-3, 1.0), (4e-3, 5.7e-3))})
    back = ScenarioConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.to_text() == cfg.to_text()


def test_config_comments_and_partial():
    cfg = ScenarioConfig.from_text("# header\n\nrun.seed = 9   # trailing\ncontroller.delay_samples = 4\n")
    assert cfg.run.seed == 9 and cfg.controller.delay_samples == 4
    assert cfg.filter == ScenarioConfig().filter


@pytest.mark.parametrize("text", ["run.seed 9", "seed = 9", "nope.seed = 9", "run.nope = 1",
                                  "run.seed = abc", "controller.enabled = maybe",
                                  "run.pressure_schedule = 0-300"])
def test_config_parse_errors(text):
    with pytest.raises(InvalidInputError):
        ScenarioConfig.from_text(text)


@pytest.mark.parametrize("kw", [{"run.capture_s": 1e4}, {"run.substeps": 0},
                                {"run.pressure_schedule": ((1.0, 300.0),)},
                                {"run.pressure_schedule": ((0.0, 300.0), (0.0, 1.0))},
                                {"run.capture_s": 1e-3}, {"filter.frac_bits": 40},
                                {"controller.drive_limit": 1.5}, {"detector.signal_lsb": 0.0}])
def test_config_validation(kw):
    with pytest.raises(InvalidInputError):
        ScenarioConfig().replace(**kw).validate()


def test_sample_guard():
    cfg = ScenarioConfig().replace(**{"run.capture_s": 1.2e3})
    assert cfg.duration_s * cfg.run.sample_rate > 1e9
    with pytest.raises(InvalidInputError, match="guard"):
        cfg.validate()


def test_schedule_lookup_piecewise_constant():
    at = schedule_lookup(((0.0, 300.0), (1e-3, 1.0)), 1e4, offset=5)
    assert at(0) == 300.0 and at(4) == 300.0 and at(5) == 1.0


def test_loop_state_json_round_trip():
    from kfcool.scenario import _Runner
    s = _Runner(short_config()).initial()
    back = LoopState.from_json(s.to_json())
    assert back.to_json() == s.to_json()


def test_psd_csv_round_trip(tmp_path):
    p = welch_psd(np.random.default_rng(1).standard_normal(8192), 1e5, 1024)
    write_psd(tmp_path / "p.csv", p)
    q = read_psd(tmp_path / "p.csv")
    assert np.array_equal(p.freqs, q.freqs) and np.array_equal(p.values, q.values)
    assert (tmp_path / "p.csv").read_text().startswith("freq_hz,psd_V2_per_Hz\n")


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run_a")
    return run_scenario(short_config(), out_dir=d), d


def test_artifacts_exist(short_run):
    art, _ = short_run
    for p in art.paths():
        assert p.exists() and p.stat().st_size > 0
    header = art.timeseries_csv.read_text().split("\n", 1)[0]
    assert header == "time_s,z_m,p_kgms,meas_V,est_z_m,est_v_ms,drive"
    s = read_report(art.summary_path)
    for key in ("seed", "effective_temperature_K", "final_energy_J", "adc_saturations",
                "reference.kalman_mse_m2", "reference.bandpass_mse_m2", "config.run.seed"):
        assert key in s


def test_short_run_cools_and_kalman_wins(short_run):
    s = short_run[0].summary
    # the short cooling stage is not long enough to reach the full-scenario floor
    assert s["effective_temperature_K"] < 0.01 * s["reference_effective_temperature_K"]
    assert s["reference_effective_temperature_K"] == pytest.approx(300, rel=0.25, abs=0)
    assert s["kalman_beats_bandpass"]
    assert s["fixed_point_overflows"] == 0


def test_determinism_byte_identical(short_run, tmp_path):
    art, d = short_run
    again = run_scenario(short_config(), out_dir=tmp_path)
    for a, b in zip(art.paths(), again.paths()):
        assert a.read_bytes() == b.read_bytes(), a.name


def test_resume_from_checkpoint(short_run, tmp_path):
    art, d = short_run
    resumed = run_scenario(short_config(), out_dir=tmp_path, resume_from=art.checkpoint)
    for a, b in zip(art.paths(), resumed.paths()):
        assert a.read_bytes() == b.read_bytes(), a.name


def test_different_seed_differs(short_run, tmp_path):
    other = run_scenario(short_config(**{"run.seed": 2}), out_dir=tmp_path)
    assert other.timeseries_csv.read_bytes() != short_run[0].timeseries_csv.read_bytes()


def test_feedback_off_reference_pressure(tmp_path):
    # both captures at 3 mbar and 300 K: the pipeline must return the bath temperature
    cfg = short_config(**{"controller.enabled": False, "run.pressure_schedule": ((0.0, 300.0),),
                          "run.capture_s": 32 * 4096 * TS, "run.cooling_s": 2e-3})
    art = run_scenario(cfg, out_dir=tmp_path)
    assert art.summary["temperature_K"] == pytest.approx(300.0, rel=0.10, abs=0)
    assert art.summary["effective_temperature_K"] == pytest.approx(300.0, rel=0.10, abs=0)


def test_stage_tagged_errors(tmp_path):
    with pytest.raises(ScenarioError, match=r"^\[config\]"):
        run_scenario(short_config(**{"run.substeps": 0}), out_dir=tmp_path)
    with pytest.raises(ScenarioError) as exc:
        run_scenario(short_config(**{"run.loss_threshold_m": 1e-12}), out_dir=tmp_path)
    assert exc.value.stage == "equilibrate"


def test_sweep_single_element(tmp_path):
    res = sweep_delay(short_config(), [3], out_dir=tmp_path, workers=1)
    assert len(res.table) == 1 and res.argmin == 3


def test_sweep_lost_particle_is_inf(tmp_path):
    res = sweep_delay(short_config(**{"run.loss_threshold_m": 1e-12}), [0, 1], out_dir=tmp_path, workers=1)
    assert [t for _, t in res.table] == [math.inf, math.inf]
    assert res.argmin == 0


def test_sweep_range_check():
    with pytest.raises(InvalidInputError):
        sweep_delay(short_config(), [0, 20], workers=1)
    with pytest.raises(InvalidInputError):
        sweep_delay(short_config(), [], workers=1)


def test_sweep_periodicity(tmp_path):
    # trap at rate/12: one doubled-frequency period is exactly 6 samples
    rate = 1 / TS
    cfg = short_config(**{"physical.omega": 2 * math.pi * rate / 12})
    res = sweep_delay(cfg, [2, 8], out_dir=tmp_path, workers=2)
    (_, ta), (_, tb) = res.effective
    assert ta == pytest.approx(tb, rel=0.25, abs=0)
