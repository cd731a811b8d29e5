import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stopsec.channel import (
    DegenerateInputError, Fading, LinkModel, NoiseModel, add_noise, awgn, link_gain,
    measure_snr_db, propagate, superpose,
)
from stopsec.ofdm import IqBlock


def test_awgn_power_and_circularity():
    w = awgn(200_000, 2.5, np.random.default_rng(0))
    assert np.mean(np.abs(w) ** 2) == pytest.approx(2.5, rel=0.02)
    assert abs(np.mean(w.real ** 2) - np.mean(w.imag ** 2)) < 0.05
    assert abs(np.mean(w)) < 0.02


@pytest.mark.parametrize("snr", [-10.0, 0.0, 12.0])
def test_snr_mode_hits_target(snr):
    rng = np.random.default_rng(1)
    x = IqBlock(np.exp(2j * np.pi * rng.random(100_000)), 1e6)
    y = add_noise(x, NoiseModel.snr(snr), rng)
    idle = add_noise(IqBlock(np.zeros(100_000), 1e6), NoiseModel.floor(-snr), rng)
    assert measure_snr_db(y.samples, idle.samples) == pytest.approx(snr, abs=0.15)


def test_ebn0_conversion():
    nm = NoiseModel.ebn0(10.0, bit_rate_hz=1e6, bandwidth_hz=2e6)
    assert nm.snr_db == pytest.approx(10 + 10 * np.log10(0.5))
    with pytest.raises(ValueError):
        NoiseModel("ebn0_db", 3.0)


def test_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        NoiseModel.snr(0).noise_power(0.0)
    with pytest.raises(DegenerateInputError):
        add_noise(IqBlock(np.zeros(0), 1.0), NoiseModel.snr(0))
    assert NoiseModel.none().noise_power(1.0) == 0.0
    assert NoiseModel.floor(-10).noise_power(123.0) == pytest.approx(0.1)


def test_noise_model_dict_round_trip():
    nm = NoiseModel.floor(-3.0, seed=4)
    assert NoiseModel.from_dict(nm.to_dict()) == nm


def test_sinusoidal_envelope():
    f = Fading.sinusoidal(5.0, 3.0, 0.0)
    env = f.envelope_db(0, 1000, 1000.0)
    assert env.max() == pytest.approx(3.0, abs=1e-3) and env.min() == pytest.approx(-3.0, abs=1e-3)
    assert env[0] == 0.0


def test_random_walk_is_clamped_and_seeded():
    f = Fading.random_walk(0.5, 2.0, step_samples=10)
    a = f.envelope_db(0, 50_000, 1.0, seed=3)
    assert np.all(np.abs(a) <= 2.0)
    assert np.array_equal(a, f.envelope_db(0, 50_000, 1.0, seed=3))
    assert not np.array_equal(a, f.envelope_db(0, 50_000, 1.0, seed=4))
    # piecewise constant over a step
    assert np.all(a[:10] == a[0])


def test_fading_validation():
    with pytest.raises(ValueError):
        Fading.sinusoidal(1.0, -1.0)
    with pytest.raises(ValueError):
        Fading.random_walk(0.1, 1.0, step_samples=0)
    with pytest.raises(ValueError):
        LinkModel(timing_offset_samples=-1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 999))
def test_chunked_propagation_matches_whole(cut):
    link = LinkModel(gain_db=-3, fading=Fading.random_walk(0.3, 2.0, 16), phase_rad=0.4,
                     cfo_hz=120.0, seed=2)
    x = np.exp(1j * np.arange(1000) * 0.1)
    whole = propagate(IqBlock(x, 1e4), link, 0).samples
    a = propagate(IqBlock(x[:cut], 1e4), link, 0).samples
    b = propagate(IqBlock(x[cut:], 1e4), link, cut).samples
    assert np.allclose(np.concatenate([a, b]), whole)


def test_link_gain_and_delay():
    link = LinkModel(gain_db=-6.0, timing_offset_samples=3)
    y = propagate(IqBlock(np.ones(4), 1.0), link)
    assert np.allclose(y.samples[:3], 0)
    assert np.allclose(np.abs(y.samples[3:]), 10 ** (-6 / 20))
    g = link_gain(LinkModel(cfo_hz=0.25), 0, 4, 1.0)
    assert np.allclose(g, [1, 1j, -1, -1j])


def test_link_dict_round_trip():
    link = LinkModel(gain_db=1.0, fading=Fading.sinusoidal(2.0, 1.0), cfo_hz=5.0)
    assert LinkModel.from_dict(link.to_dict()) == link


def test_superpose_aligns_on_absolute_time():
    a = IqBlock(np.ones(3), 1.0)
    b = IqBlock(2 * np.ones(2), 1.0)
    s = superpose([(a, 10), (b, 12)])
    assert s.start_sample == 10
    assert np.allclose(s.samples, [1, 1, 3, 2])
    with pytest.raises(ValueError):
        superpose([])
