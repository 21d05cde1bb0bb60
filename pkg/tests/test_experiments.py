import math

import numpy as np
import pytest

from tbcal import experiments as E
from tbcal.oracle import predict


@pytest.mark.parametrize("make", [
    E.criterion1_run, E.exponential_gain_run, E.gaussian_pulse_run, E.misspecified_gain_run,
    E.noisy_run, E.stimulated_run, E.sweep_run, E.smoke_spontaneous, E.smoke_stimulated,
])
def test_reference_configs_validate(make):
    run = make()
    assert len(run.config_hash) == 64


def test_paired_configs_share_seed():
    assert E.exponential_gain_run().seed == E.gaussian_pulse_run().seed == E.criterion1_run().seed
    assert E.noisy_run().seed == E.criterion1_run().seed


def test_amplifier_rms_is_ten_times_shot_noise():
    run = E.noisy_run()
    pred = predict(run.source, run.detector1, run.detector2, dt=E.DT, include_noise=False)
    per_sample = run.detector1.amplifier_noise_rms / math.sqrt(E.DT)
    assert per_sample == pytest.approx(10 * math.sqrt(pred.auto1(np.zeros(1))[0]))


def test_repeat_uses_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("TBCAL_CACHE", str(tmp_path))
    run = E.criterion1_run(duration=2e-3)
    first = E.repeat(run, 2)
    assert len(list(tmp_path.rglob("*.json"))) == 2
    assert E.repeat(run, 2) == first
    monkeypatch.delenv("TBCAL_CACHE")
    assert E.repeat(run, 2) == first


def test_windowed_count_covariance_small():
    run = E.stimulated_run(duration=2e-3, seed_flux=1e8)
    cov = E.windowed_count_covariances(run, 1e-4, 20)
    m, se = E.mean_and_stderr(cov)
    assert abs(m - 2 * 0.01 * 1e8 * 1e-4) < 5 * se
