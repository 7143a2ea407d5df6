import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import linear_oscillator_closed_form
from pnsmc.data import (AccuracyWarning, DataError, MultisineSpec, RmseReport, TimeSeriesDataset,
                        add_noise, downsample, format_rmse_table, gen_multisine, gen_sine_sweep,
                        generate_dataset, load_dataset, rk4_simulate, rmse_per_particle,
                        save_dataset)
from pnsmc.models import ModelSpec, get_model

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"
DUFFING_TRUE = np.array([1.0, 1.0, 400.0, 4e5])
DECAY = ModelSpec("decay", 1, ("a",), lambda x, u, th: -np.asarray(th)[..., :1] * x)


# -- excitation

def test_single_line_is_cosine():
    spec = MultisineSpec(f_min=5.0, f_max=5.0, n_lines=1, amplitude=3.0, ramp_fraction=0.0)
    sig = gen_multisine(spec, 1.0, 1000.0, phases=[0.0])
    t = np.arange(1000) / 1000.0
    np.testing.assert_allclose(sig, 3.0 * np.cos(2 * np.pi * 5 * t), atol=1e-12)


def test_energy_only_on_requested_lines():
    # integer-period lines on a 10 s record: bins at 1 Hz ... 20 Hz
    spec = MultisineSpec(f_min=1.0, f_max=20.0, n_lines=20, amplitude=1.0, ramp_fraction=0.0)
    sig = gen_multisine(spec, 10.0, 200.0, rng=1)
    power = np.abs(np.fft.rfft(sig)) ** 2
    lines = np.arange(10, 201, 10)
    off = np.delete(power, lines)
    assert 10 * np.log10(off.max() / power[lines].min()) < -60


def test_bouc_wen_style_excitation():
    spec = MultisineSpec()
    assert (spec.f_min, spec.f_max, spec.n_lines, spec.amplitude, spec.ramp_fraction) == \
        (0.5, 100.0, 2000, 208.0, 0.1)
    sig = gen_multisine(spec, 3.0, 131072.0 / 32, rng=0)
    n_ramp = int(round(0.1 * len(sig)))
    assert np.max(np.abs(sig[n_ramp:])) == pytest.approx(208.0, rel=1e-12)
    assert np.max(np.abs(sig[:n_ramp])) < 208.0
    assert sig[0] == 0.0


def test_rms_scaling():
    spec = MultisineSpec(f_min=5, f_max=150, n_lines=1000, amplitude=50.0, ramp_fraction=0.0,
                         scale="rms")
    sig = gen_multisine(spec, 2.0, 750.0, rng=3)
    assert np.sqrt(np.mean(sig**2)) == pytest.approx(50.0, rel=1e-12)


def test_rms_invariant_to_phase_seed():
    # with peak scaling the RMS follows the crest factor of each phase draw,
    # so the invariant is checked on the RMS-normalised signal
    spec = MultisineSpec(f_min=0.5, f_max=100.0, n_lines=2000, amplitude=50.0, scale="rms")
    rms = [np.sqrt(np.mean(gen_multisine(spec, 1.0, 4096.0, rng=s)[410:] ** 2))
           for s in range(20)]
    np.testing.assert_allclose(rms, np.mean(rms), rtol=0.05)


def test_nyquist_and_ramp_validation():
    with pytest.raises(ValueError, match="Nyquist"):
        gen_multisine(MultisineSpec(f_min=1, f_max=600, n_lines=10), 1.0, 1000.0)
    with pytest.raises(ValueError):
        gen_multisine(MultisineSpec(ramp_fraction=1.0, f_max=10), 1.0, 1000.0)


def test_sine_sweep_frequency():
    sig = gen_sine_sweep(20.0, 50.0, 10.0 / 60.0, 40.0, 10.0, 750.0)
    assert np.max(np.abs(sig)) <= 40.0
    # instantaneous frequency near the start is 20 Hz: about 40 zero crossings per second
    crossings = np.sum(np.diff(np.sign(sig[:750])) != 0)
    assert abs(crossings - 40) <= 2


# -- RK4

def test_rk4_linear_oscillator_closed_form():
    model = get_model("linear_oscillator")
    n = 131072 + 1
    sim = rk4_simulate(model, [1.0, 0.4, 100.0], np.zeros(n), 131072.0, [0.1, 0.0], check=False)
    x, v = linear_oscillator_closed_form(sim.t, 1.0, 0.4, 100.0, 0.1, 0.0)
    assert np.max(np.abs(sim.states[:, 0] - x)) < 1e-9
    assert np.max(np.abs(sim.states[:, 1] - v)) < 1e-9


def test_rk4_exponential_decay():
    sim = rk4_simulate(DECAY, [1.0], np.zeros(1001), 1000.0, [1.0], check=False)
    np.testing.assert_allclose(sim.states[:, 0], np.exp(-sim.t), atol=1e-10, rtol=0)


def test_rk4_rest_stays_at_rest():
    sim = rk4_simulate(get_model("bouc_wen"), [2, 10, 5e4, 5e4, 1e3, 0.8, 1.1], np.zeros(500),
                       1000.0, np.zeros(3))
    assert not np.any(sim.states) and not np.any(sim.observed)


def test_rk4_fourth_order_decay():
    model = get_model("duffing")
    x0, T = np.array([0.01, 0.0]), 1000
    ref = rk4_simulate(model, DUFFING_TRUE, np.zeros(80 * T + 1), 80_000.0, x0, check=False)
    errs = []
    for k in (1, 2, 4, 8):
        s = rk4_simulate(model, DUFFING_TRUE, np.zeros(k * T + 1), 1000.0 * k, x0, check=False)
        errs.append(np.max(np.abs(s.states[-1] - ref.states[-1])))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 12) & (ratios <= 20)), ratios


def test_rk4_check_warns_when_coarse():
    model = get_model("duffing")
    with pytest.warns(AccuracyWarning):
        rk4_simulate(model, DUFFING_TRUE, np.ones(200), 50.0, [0.0, 0.0])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rk4_simulate(model, DUFFING_TRUE, np.ones(200), 4000.0, [0.0, 0.0])


def test_rk4_divergence():
    model = get_model("duffing")
    bad = [1.0, 0.0, -1e6, -1e9]
    with pytest.raises(DataError, match="step"):
        rk4_simulate(model, bad, np.zeros(2000), 100.0, [0.01, 0.0], check=False)
    sim = rk4_simulate(model, np.array([bad, DUFFING_TRUE]), np.zeros(2000), 100.0, [0.01, 0.0],
                       check=False, on_divergence="mask")
    np.testing.assert_array_equal(sim.diverged, [True, False])


def test_observed_channel_matches_rhs_on_kept_samples():
    model = get_model("bouc_wen")
    theta = np.array([2, 10, 5e4, 5e4, 1e3, 0.8, 1.1])
    u = np.repeat(np.random.default_rng(0).normal(0, 50, 64), 32)
    sim = rk4_simulate(model, theta, u, 131072.0, np.zeros(3), check=False)
    kept = slice(None, None, 32)
    acc = model.f(sim.states[kept], u[kept], theta)[:, 1]
    np.testing.assert_allclose(sim.observed[kept], acc, rtol=0, atol=1e-12 * np.max(np.abs(acc)))


# -- decimation and noise

def _fine(n=8 * 131072 // 8, rate=131072.0):
    t = np.arange(n) / rate
    return TimeSeriesDataset(t, np.sin(t), np.cos(t), rate)


def test_downsample_identity():
    ds = _fine(1000)
    out = downsample(ds, 1)
    np.testing.assert_array_equal(out.y, ds.y)
    assert out.rate_hz == ds.rate_hz


def test_downsample_bouc_wen_protocol():
    ds = _fine(3 * 131072)
    out = downsample(ds, 32)
    assert out.rate_hz == 4096.0 and len(out) == 12288
    np.testing.assert_allclose(np.diff(out.t), 1 / 4096.0, rtol=1e-9)


def test_downsample_antialias_flag():
    ds = _fine(4096)
    plain = downsample(ds, 4)
    filt = downsample(ds, 4, antialias=True)
    assert len(filt) == len(plain)
    np.testing.assert_allclose(filt.y[50:-50], plain.y[50:-50], atol=1e-3)


def test_downsample_rejects_fractional_factor():
    with pytest.raises(DataError):
        downsample(_fine(100), 2.5)


def test_noise_fraction_zero():
    sig = np.sin(np.arange(100))
    noisy, std = add_noise(sig, 0.0, 1)
    np.testing.assert_array_equal(noisy, sig)
    assert std == 0.0


def test_noise_level():
    sig = np.sqrt(2) * np.sin(np.linspace(0, 200 * np.pi, 100_000, endpoint=False))
    noisy, std = add_noise(sig, 0.05, 7)
    assert std == pytest.approx(0.05, rel=1e-12)
    assert np.std(noisy - sig) == pytest.approx(0.05, rel=0.02)


def test_noise_reproducible():
    sig = np.ones(50)
    np.testing.assert_array_equal(add_noise(sig, 0.1, 3)[0], add_noise(sig, 0.1, 3)[0])


def test_generation_deterministic():
    model = get_model("duffing")
    exc = {"kind": "multisine", "f_min": 0.5, "f_max": 20, "n_lines": 40, "amplitude": 20.0}
    a = generate_dataset(model, DUFFING_TRUE, exc, 1.0, 4000.0, 20, 0.05, 5, [0, 0])
    b = generate_dataset(model, DUFFING_TRUE, exc, 1.0, 4000.0, 20, 0.05, 5, [0, 0])
    np.testing.assert_array_equal(a[1].y, b[1].y)
    np.testing.assert_array_equal(a[1].u, b[1].u)
    assert a[1].meta["theta_true"] == {"m": 1.0, "c": 1.0, "k": 400.0, "k3": 4e5}


# -- files

def test_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    n = 50
    ds = TimeSeriesDataset(np.arange(n) / 610.35, rng.normal(size=n), rng.normal(size=n) * 1e-7,
                           610.35, "voltage", "V", "round trip", {"x0": [0.1, 0.2]})
    path = save_dataset(ds, tmp_path / "rt.csv")
    back = load_dataset(path)
    for a, b in ((ds.t, back.t), (ds.u, back.u), (ds.y, back.y)):
        assert a.tobytes() == b.tobytes()
    assert back.rate_hz == 610.35 and back.observed == "voltage" and back.units == "V"
    assert back.meta["x0"] == [0.1, 0.2]
    side = json.loads((tmp_path / "rt.meta.json").read_text())
    assert {"rate_hz", "observed", "units", "provenance"} <= set(side)


def test_three_row_fixture():
    ds = load_dataset(FIXTURES / "three_rows.csv")
    np.testing.assert_array_equal(ds.t, [0.0, 0.001, 0.002])
    np.testing.assert_array_equal(ds.u, [1.5, 2.0, -3.0])
    np.testing.assert_array_equal(ds.y, [-0.25, 0.125, 1e-3])
    assert ds.rate_hz == pytest.approx(1000.0)


def test_missing_column_named(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,u\n0,1\n1,2\n")
    with pytest.raises(DataError, match="'y'"):
        load_dataset(p)


def test_non_uniform_sampling_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,u,y\n0,1,1\n1,2,2\n2.5,3,3\n")
    with pytest.raises(DataError, match="non-uniform"):
        load_dataset(p)


def test_silverbox_and_emps_schemas(tmp_path):
    p = tmp_path / "sb.csv"
    p.write_text("V1,V2\n0.1,0.01\n0.2,0.02\n0.3,0.03\n")
    sb = load_dataset(p, "silverbox")
    assert sb.rate_hz == 610.35 and sb.observed == "voltage"
    np.testing.assert_allclose(sb.t, np.arange(3) / 610.35)
    p = tmp_path / "emps.csv"
    p.write_text("t,force,position\n0,1,0\n0.001,2,1e-5\n0.002,3,3e-5\n")
    em = load_dataset(p, "emps")
    assert em.rate_hz == 1000.0 and em.observed == "displacement"
    np.testing.assert_array_equal(em.u, [1, 2, 3])


def test_column_override(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("time,F,x\n0,1,2\n0.5,3,4\n")
    ds = load_dataset(p, columns={"time": "time", "input": "F", "output": "x"})
    np.testing.assert_array_equal(ds.y, [2, 4])
    assert ds.rate_hz == 2.0


def test_empty_dataset_round_trip(tmp_path):
    ds = TimeSeriesDataset([], [], [], 100.0)
    p = save_dataset(ds, tmp_path / "e.csv")
    assert p.read_text() == "t,u,y\n"
    assert len(load_dataset(p)) == 0


# -- scoring

def _duffing_test_record():
    model = get_model("duffing")
    exc = {"kind": "multisine", "f_min": 0.5, "f_max": 20, "n_lines": 40, "amplitude": 20.0}
    clean, _ = generate_dataset(model, DUFFING_TRUE, exc, 2.0, 4000.0, 20, 0.0, 2, [0, 0],
                                hold_input=True, check=False)
    return model, clean


def test_rmse_truth_is_exact():
    model, clean = _duffing_test_record()
    rep = rmse_per_particle(model, DUFFING_TRUE, clean, oversample=20)
    assert rep.mean < 1e-8


def test_rmse_ordering():
    model, clean = _duffing_test_record()
    rep = rmse_per_particle(model, [DUFFING_TRUE, DUFFING_TRUE * [1, 1, 1.05, 1]], clean,
                            oversample=20)
    assert rep.per_particle[0] < rep.per_particle[1]


def test_rmse_divergence_counted():
    model, clean = _duffing_test_record()
    with pytest.warns(RuntimeWarning):
        rep = rmse_per_particle(model, [DUFFING_TRUE, [1.0, 0.0, -1e6, -1e9]], clean, x1=[0.01, 0])
    assert rep.n_diverged == 1 and np.isfinite(rep.mean)
    assert set(rep.to_dict()) == {"min", "max", "mean", "n_particles", "n_diverged", "unit"}


def test_rmse_skip():
    model, clean = _duffing_test_record()
    wrong = clean.y.copy()
    wrong[:10] += 1.0
    ds = TimeSeriesDataset(clean.t, clean.u, wrong, clean.rate_hz, meta=clean.meta)
    assert rmse_per_particle(model, DUFFING_TRUE, ds, 20, skip=10).mean < 1e-8


def test_table_layout_with_published_numbers():
    cols = json.loads((FIXTURES / "published_rmse.json").read_text())
    text = format_rmse_table(cols)
    assert text + "\n" == (FIXTURES / "published_rmse_table.txt").read_text()
    lines = text.splitlines()
    assert [line.split()[0] for line in lines] == ["Case", "Unit:", "Minimum", "Maximum", "Mean"]
    assert lines[2].split()[-4:] == ["4.6313e-06", "7.1967e-07", "1.0567e-03", "2.9500e-04"]
    assert lines[4].split()[-4:] == ["5.4017e-06", "2.4772e-06", "1.8249e-03", "5.2018e-04"]


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=20))
def test_report_summary_consistent(vals):
    rep = RmseReport(np.array(vals + [np.inf]), "m")
    assert rep.min <= rep.mean <= rep.max
    assert rep.n_diverged == 1 and rep.n_particles == len(vals) + 1
