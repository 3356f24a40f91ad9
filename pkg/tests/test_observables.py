import math
import warnings

import numpy as np
import pytest

from ioncav.model import (DriveParams, PreparationParams, build_absorption_model,
                          drive_amplitude, default_params)
from ioncav.observables import (DetectionModel, FitError, FitQualityWarning, Histogram,
                                NoEventsError, absorb_per_photon, accidental_coincidences,
                                chi_square_agreement, coincidence_counts,
                                coincidence_histogram, detect, detection_probability,
                                ensemble_agreement, fit_exponential, fit_saturation,
                                saturation_curve, side_peak_mean, spin_photon_correlation,
                                synthetic_saturation, time_arrival_histogram, zero_delay)
from ioncav.solver import SolverOptions, TrajectoryEnsemble


def _ensemble(jumps_per_traj, tags=("mirror_HT_sigma+", "mirror_HT_sigma-", "spont_to_S"),
              final=None, t_end=300e-9):
    """Hand-built ensemble: ``jumps_per_traj`` is a list of [(t, channel), ...]."""
    offsets = np.cumsum([0] + [len(j) for j in jumps_per_traj])
    times = [t for j in jumps_per_traj for t, _ in j]
    chans = [c for j in jumps_per_traj for _, c in j]
    n = len(jumps_per_traj)
    final = np.zeros(n, int) if final is None else final
    labels = ("D-3/2", "D-1/2", "D+1/2", "D+3/2", "E-1/2", "E+1/2", "S")
    return TrajectoryEnsemble(tags, labels, t_end, np.arange(n), offsets, times, chans, final)


def test_detection_model_validation():
    with pytest.raises(ValueError):
        DetectionModel(eta_det=1.5)
    with pytest.raises(ValueError):
        DetectionModel(background_rate=-1)
    d = DetectionModel()
    assert d.survival == pytest.approx(0.9 * 0.75 * 0.25)


def test_thinning_rate():
    ens = _ensemble([[(50e-9, 0)]] * 20000)
    ev = detect(ens, DetectionModel(eps_mode=0.5, eta_path=1.0, eta_det=1.0), seed=4)
    assert len(ev.time) / 20000 == pytest.approx(0.5, abs=0.015)
    assert set(np.unique(ev.detector)) == {0, 1}
    assert np.all(ev.polarization == 1)


def test_only_ht_jumps_are_detected():
    ens = _ensemble([[(50e-9, 2)]] * 100)
    with pytest.raises(NoEventsError):
        spin_photon_correlation(ens, DetectionModel.ideal())


def test_detection_is_seeded(small_ensemble):
    a = detect(small_ensemble, DetectionModel(), seed=7)
    b = detect(small_ensemble, DetectionModel(), seed=7)
    assert np.array_equal(a.time, b.time) and np.array_equal(a.detector, b.detector)


def test_histogram_validation():
    with pytest.raises(ValueError):
        Histogram([0, 1, 2], [1], 1)
    with pytest.raises(ValueError):
        Histogram([0, 2, 1], [1, 1], 1)


def test_time_arrival_histogram(small_ensemble):
    hist = time_arrival_histogram(small_ensemble, DetectionModel.ideal(), 2e-9)
    assert len(hist.counts) == 150
    assert hist.total == hist.meta["n_real"]
    p, err = detection_probability(hist)
    # about 6% of cycles emit into the cavity, 100/310 of them through HT
    assert p == pytest.approx(0.056 * 100 / 310, abs=0.004)


def test_background_counts_expected():
    ens = _ensemble([[]] * 20000)
    det = DetectionModel(1, 1, 1, 1, background_rate=1e5)
    hist = time_arrival_histogram(ens, det, 10e-9, seed=1)
    assert hist.total == pytest.approx(hist.background_expected.sum(), rel=0.05)
    p, err = detection_probability(hist)
    assert abs(p) < 3 * err


def test_coincidence_counts_by_hand():
    n1 = np.array([1, 0, 2, 1])
    n2 = np.array([0, 1, 1, 1])
    c = coincidence_counts(n1, n2, 2)
    # delay 0: 1*0 + 0*1 + 2*1 + 1*1
    assert c[2] == 3
    # delay +1: n1[i] n2[i+1] = 1*1 + 0*1 + 2*1
    assert c[3] == 3
    # delay -1: n1[i] n2[i-1] = 0*0 + 2*1 + 1*1
    assert c[1] == 3


def test_single_photon_source_has_no_zero_delay():
    jumps = [[(40e-9, 0)] if i % 3 == 0 else [] for i in range(3000)]
    hist = coincidence_histogram(_ensemble(jumps), DetectionModel.ideal(), max_delay=5)
    assert zero_delay(hist) == 0
    assert side_peak_mean(hist)[0] > 0


def test_poisson_source_has_zero_delay_peak():
    rng = np.random.default_rng(0)
    jumps = [[(40e-9 + 1e-9 * k, 0) for k in range(rng.poisson(0.5))] for _ in range(20000)]
    hist = coincidence_histogram(_ensemble(jumps), DetectionModel.ideal(), max_delay=5)
    side, err = side_peak_mean(hist)
    # g2(0) = 1 for coherent light
    assert zero_delay(hist) == pytest.approx(side, rel=0.1)


def test_background_only_matches_accidentals():
    ens = _ensemble([[]] * 50000)
    det = DetectionModel(1, 1, 1, 1, background_rate=1e6)
    hist = coincidence_histogram(ens, det, max_delay=3, seed=2)
    pred = accidental_coincidences(0.0, hist.meta["mu_noise_per_detector"], hist.n_cycles)
    assert zero_delay(hist) == pytest.approx(pred, rel=0.1)
    assert side_peak_mean(hist)[0] == pytest.approx(pred, rel=0.1)


def test_coincidence_window_checked(small_ensemble):
    with pytest.raises(ValueError):
        coincidence_histogram(small_ensemble, DetectionModel(), window=(0, 5e-6))


def test_spin_photon_ideal(small_ensemble):
    res = spin_photon_correlation(small_ensemble, DetectionModel.ideal(), readout_fidelity=1.0)
    assert res.p_down_given_plus > 0.98
    assert res.p_up_given_minus > 0.98
    assert 2.0 < res.ratio_plus_minus < 4.0
    d = res.to_dict()
    assert set(d["errors"]) == {"p_down_given_plus", "p_up_given_minus", "ratio_plus_minus"}


def test_spin_photon_readout_error_by_hand():
    # sigma+ heralds always end in D-3/2, sigma- heralds in D+1/2
    jumps = [[(10e-9, 0)]] * 1000 + [[(10e-9, 1)]] * 1000
    final = np.array([0] * 1000 + [2] * 1000)
    ens = _ensemble(jumps, final=final)
    res = spin_photon_correlation(ens, DetectionModel.ideal(), readout_fidelity=0.9, seed=3)
    assert res.p_down_given_plus == pytest.approx(0.9, abs=0.03)
    assert res.p_up_given_minus == pytest.approx(0.9, abs=0.03)
    assert res.ratio_plus_minus == pytest.approx(1.0)


def test_sink_reads_bright():
    jumps = [[(10e-9, 0)]] * 10 + [[(10e-9, 1)]] * 10
    ens = _ensemble(jumps, final=np.full(20, 6))
    res = spin_photon_correlation(ens, DetectionModel.ideal(), readout_fidelity=1.0,
                                  prep=PreparationParams(0.9))
    assert res.p_down_given_plus == 0.0 and res.p_up_given_minus == 1.0
    assert res.counts["heralds_in_sink"] == 20
    assert res.counts["prep_fidelity"] == 0.9


def test_readout_fidelity_validated(small_ensemble):
    with pytest.raises(ValueError):
        spin_photon_correlation(small_ensemble, DetectionModel.ideal(), readout_fidelity=1.2)


def test_empty_records():
    with pytest.raises(NoEventsError):
        detect(_ensemble([]), DetectionModel())


def _exp_hist(tau, n=200000, bin_width=2e-9, bg=0.0, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.exponential(tau, n)
    edges = np.arange(0, 300e-9 + 1e-15, bin_width)
    counts, _ = np.histogram(t, edges)
    bgv = np.full(len(counts), bg)
    counts = counts + rng.poisson(bgv)
    return Histogram(edges, counts, n, bgv)


def test_fit_exponential_recovers_tau():
    fit = fit_exponential(_exp_hist(35e-9), 25e-9)
    assert fit.tau == pytest.approx(35e-9, abs=3 * fit.tau_err)
    assert fit.tau_err < 0.01 * fit.tau


def test_fit_exponential_with_background():
    fit = fit_exponential(_exp_hist(35e-9, n=50000, bg=20.0, seed=1), 25e-9)
    assert fit.tau == pytest.approx(35e-9, abs=3 * fit.tau_err)


def test_fit_exponential_bin_width_independent():
    a = fit_exponential(_exp_hist(35e-9, bin_width=1e-9, seed=2), 25e-9)
    b = fit_exponential(_exp_hist(35e-9, bin_width=10e-9, seed=2), 25e-9)
    assert a.tau == pytest.approx(b.tau, rel=0.02)


def test_fit_exponential_needs_data():
    edges = np.arange(0, 100e-9, 2e-9)
    with pytest.raises(FitError):
        fit_exponential(Histogram(edges, np.zeros(len(edges) - 1), 100), 25e-9)


def test_saturation_curve_examples():
    assert saturation_curve(56.0, 56.0) == pytest.approx(1 - math.exp(-1))
    assert saturation_curve(0.0, 56.0) == 0.0
    pts = [(n, float(saturation_curve(n, 56.0))) for n in (30, 40, 50, 60, 70, 80)]
    fit = fit_saturation(pts)
    assert fit.n0 == pytest.approx(56.0, rel=1e-6)
    assert fit.p_abs == pytest.approx(1 / 56, rel=1e-6)


def test_synthetic_saturation_mean():
    pts = synthetic_saturation([56.0], 1 / 56, 200000, seed=0)
    assert pts[0][1] == pytest.approx(1 - math.exp(-1), abs=0.005)


def test_saturation_warns_on_falling_data():
    pts = [(30, 0.6), (40, 0.5), (50, 0.1), (60, 0.65), (70, 0.7), (80, 0.75)]
    with pytest.warns(FitQualityWarning):
        fit_saturation(pts)


def test_saturation_needs_points():
    with pytest.raises(FitError):
        fit_saturation([(30, 0.1), (40, 0.2)])
    with pytest.raises(FitError):
        fit_saturation([(30, 0.0), (40, 0.0), (50, 0.0)])


def test_absorption_selection_rule():
    p = default_params()
    eta = drive_amplitude(1e6, p.kappa)
    runs = [(th, build_absorption_model(p, DriveParams(eta, waveplate_angle=th), n_max=1,
                                        prep=PreparationParams(1.0)))
            for th in (5.0, 50.0)]
    (_, p_plus), (_, p_minus) = absorb_per_photon(runs, 1e-6, 1.0, "rate",
                                                  SolverOptions(rel_tol=1e-9, abs_tol=1e-13))
    # a perfectly prepared D-3/2 ion has no sigma- transition
    assert p_plus > 0.02
    assert p_minus < 1e-6 * p_plus


def test_absorb_per_photon_validation():
    with pytest.raises(ValueError):
        absorb_per_photon([], 0.0, 1.0)
    with pytest.raises(ValueError):
        absorb_per_photon([], 1e-6, 1.0, method="median")


def test_chi_square_agreement():
    chi2, dof, p = chi_square_agreement(np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.1, 0.0]),
                                        np.array([1.1, 1.9, 3.0]))
    assert dof == 2 and chi2 == pytest.approx(2.0)


def _populations(n, n_t, rng, shift=0.0):
    p = np.array([0.5 + shift, 0.3 - shift, 0.2])
    draws = rng.multinomial(1, p, size=(n, n_t)).astype(float)
    return draws, np.tile([0.5, 0.3, 0.2], (n_t, 1))


def test_ensemble_agreement_accepts_correct_reference():
    rng = np.random.default_rng(5)
    ps = [ensemble_agreement(*_populations(4000, 4, rng))[2] for _ in range(20)]
    assert np.mean(np.array(ps) < 0.01) <= 0.15


def test_ensemble_agreement_rejects_shifted_reference():
    rng = np.random.default_rng(6)
    chi2, dof, p = ensemble_agreement(*_populations(8000, 4, rng, shift=0.05))
    assert p < 1e-6


def test_ensemble_agreement_floor():
    rng = np.random.default_rng(7)
    samples, ref = _populations(1000, 2, rng)
    # an empty level in front: skipped while it stays empty
    ref = np.concatenate([np.zeros((2, 1)), ref], axis=1)
    samples = np.concatenate([np.zeros((1000, 2, 1)), samples], axis=2)
    assert ensemble_agreement(samples, ref)[2] > 0
    samples[:, :, 0] += 0.01
    assert ensemble_agreement(samples, ref)[2] == 0.0


def test_ensemble_agreement_detects_wrong_coupling(emission_model):
    from ioncav.hilbert import basis_state, ket_to_dm
    from ioncav.model import ExcitationPulse, build_emission_model
    from ioncav.solver import evolve_master, run_trajectories

    wrong = build_emission_model(default_params(g_bar=0.5 * default_params().g_bar),
                                 pulse=ExcitationPulse(2.7e-9))
    psi = basis_state(emission_model.space, "D-3/2")
    ts = np.linspace(0, 150e-9, 4)[1:]
    ens = run_trajectories(emission_model, psi, 150e-9,
                           SolverOptions(rel_tol=1e-6, abs_tol=1e-8, n_trajectories=6000,
                                         base_seed=8), sample_times=ts)
    w = wrong.space.atom_weights()
    rhos = evolve_master(wrong, ket_to_dm(psi), np.concatenate([[0.0], ts]),
                         SolverOptions(rel_tol=1e-9, abs_tol=1e-12))[1:]
    ref = np.array([w @ np.real(np.diag(r)) for r in rhos])
    assert ensemble_agreement(ens.samples, ref)[2] < 1e-3
