import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stopsec.ber import (
    BerPoint, ber_crossing, data_bit_energy, packet_energy, pam_decide, pseudonym_ber_curve,
    qpsk_ber_theory, required_bits, simulate_data_ber, simulate_pseudonym_ber,
    snr_to_pseudonym_ebno, write_ber_csv,
)
from stopsec.ofdm import OfdmConfig, build_htstf_preamble
from stopsec.watermark import WatermarkScheme as W

CFG = OfdmConfig.for_fft(64)


def test_required_bits_zero_error_rule():
    # no errors in n bits bounds the BER below p at confidence c when n >= -ln(1-c)/p
    assert required_bits(1e-3) == math.ceil(-math.log(0.01) / 1e-3)
    assert required_bits(1e-3, errors=10) > required_bits(1e-3)
    with pytest.raises(ValueError):
        required_bits(0.0)
    with pytest.raises(ValueError):
        required_bits(0.1, confidence=1.0)


@given(st.floats(1e-6, 0.1), st.integers(0, 20))
def test_required_bits_monotone(p, k):
    assert required_bits(p / 2, errors=k) >= required_bits(p, errors=k)
    assert required_bits(p, errors=k + 1) > required_bits(p, errors=k)


def test_qpsk_theory_known_points():
    assert qpsk_ber_theory(0.0) == pytest.approx(0.0786496, rel=1e-5)
    assert qpsk_ber_theory(9.6) == pytest.approx(1.0e-5, rel=0.05)


def test_crossing_log_linear():
    pts = [BerPoint(0, 100, 10_000), BerPoint(2, 1, 10_000)]
    assert ber_crossing(pts) == pytest.approx(1.0)
    assert ber_crossing([BerPoint(0, 100, 10_000)]) is None
    # zero errors count as half an error
    z = ber_crossing([BerPoint(0, 20, 10_000), BerPoint(1, 0, 10_000)])
    assert 0 < z < 1


def test_packet_energy_oracle():
    pre = np.sum(np.abs(build_htstf_preamble(CFG).samples) ** 2)
    body = 100 * 52 * CFG.symbol_len / CFG.fft_size
    assert packet_energy(W.unwatermarked(), CFG) - pre == pytest.approx(body, rel=0.01)
    # pseudonym carrier: amplitude 2 on about half of the 90 covered symbols
    extra = packet_energy(W.stopsec(), CFG) - packet_energy(W.unwatermarked(), CFG)
    assert extra == pytest.approx(7.5 * 6 * 4 * CFG.symbol_len / CFG.fft_size, rel=0.05)


def test_data_bit_energy():
    assert data_bit_energy(W.stopsec(), CFG) == 0.5
    e = data_bit_energy(W.cm_fullband(0.2), CFG)
    assert e == pytest.approx(0.5 * (0.9 * 1.04 + 0.1))
    assert data_bit_energy(W.pam(0.2), CFG) == pytest.approx(0.5 * 1.04)


def test_pam_decide_clean():
    bits = np.array([0, 1] * 50)
    e = np.where(bits == 1, 1.44, 0.64)
    assert np.array_equal(pam_decide(e), bits)
    # a lone 1 among 0s clears the neighbour mean; the 0s around it stay below
    e = np.full(21, 0.64)
    e[10] = 1.44
    d = pam_decide(e)
    assert d[10] == 1 and d[6:10].sum() == 0 and d[11:15].sum() == 0


def test_data_ber_matches_theory():
    p = simulate_data_ber(W.unwatermarked(), CFG, 4.0, seed=1, n_bits=200_000)
    th = float(qpsk_ber_theory(4.0))
    sd = math.sqrt(th * (1 - th) / p.n_bits)
    assert abs(p.ber - th) < 4 * sd + 0.05 * th


def test_stopsec_data_ber_identical_to_unwatermarked():
    a = simulate_data_ber(W.unwatermarked(), CFG, 3.0, seed=2, n_bits=50_000)
    b = simulate_data_ber(W.stopsec(), CFG, 3.0, seed=2, n_bits=50_000)
    assert (a.errors, a.n_bits) == (b.errors, b.n_bits)


def test_pseudonym_ber_extremes():
    hi = snr_to_pseudonym_ebno(CFG, 20.0)
    lo = snr_to_pseudonym_ebno(CFG, -40.0)
    for s in (W.stopsec(), W.cm_fullband(0.2)):
        assert simulate_pseudonym_ber(s, CFG, hi, max_bits=256).errors == 0
        p = simulate_pseudonym_ber(s, CFG, lo, max_bits=1024, max_errors=10_000)
        assert abs(p.ber - 0.5) < 0.07
    with pytest.raises(ValueError):
        simulate_pseudonym_ber(W.unwatermarked(), CFG, hi)


def test_pam_neighbour_threshold_floor():
    # noiseless limit: error iff all 8 neighbours share the bit, then a coin flip
    p = simulate_pseudonym_ber(W.pam(0.2), CFG, snr_to_pseudonym_ebno(CFG, 30.0),
                               max_bits=20_000, max_errors=10**6, seed=3)
    floor = 2.0 ** -8 / 2
    sd = math.sqrt(floor / p.n_bits)
    assert abs(p.ber - floor) < 4 * sd


def test_curve_stops_below_target(tmp_path):
    grid = [snr_to_pseudonym_ebno(CFG, s) for s in (-20, 10, 20)]
    pts = pseudonym_ber_curve(W.stopsec(), CFG, grid, max_bits=512)
    assert len(pts) == 2
    write_ber_csv(tmp_path / "b.csv", pts)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "ebno_db,ber,n_bits" and len(lines) == 3
