"""Synthetic recordings and window datasets for fixtures, demos and the acceptance run."""

import numpy as np

from mwcnn.eegio import EegRecording, Event
from mwcnn.preprocess import Dataset, WindowSample, zscore


def burst_dataset(n_samples=200, n_channels=8, n_timesteps=256, sampling_rate=256.0,
                  amplitude=1.5, burst_len=160, period=16, seed=0):
    """Balanced windows of white noise; class 1 (MW) adds a Hann-tapered oscillatory burst.

    The burst has a fixed spatial pattern across channels, a random onset and
    a random phase.  Windows are z-scored per channel like the real pipeline.
    """
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], [n_samples - n_samples // 2, n_samples // 2])
    X = rng.normal(size=(n_samples, n_channels, n_timesteps))
    pattern = np.linspace(1.0, 0.3, n_channels)
    t = np.arange(burst_len)
    taper = np.hanning(burst_len)
    for i in np.flatnonzero(y == 1):
        start = rng.integers(0, n_timesteps - burst_len + 1)
        wave = np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi)) * taper
        X[i, :, start : start + burst_len] += amplitude * np.outer(pattern, wave)
    samples = [WindowSample(zscore(X[i]).astype(np.float32), int(y[i]), 1, 1, 0)
               for i in range(n_samples)]
    return Dataset(samples, n_timesteps / sampling_rate, sampling_rate, n_channels)


def session_recording(presses_s, duration_s=120.0, sampling_rate=256.0, n_channels=4,
                      counting_start_s=1.0, question_s=(1.0, 6.0), subject_id=1, session_id=1,
                      seed=0):
    """A noisy multichannel recording plus its event list.

    ``presses_s`` are button-press times in seconds; each press is followed by
    a questionnaire from ``press + question_s[0]`` to ``press + question_s[1]``.
    """
    rng = np.random.default_rng([seed, subject_id, session_id])
    n = int(round(duration_s * sampling_rate))
    t = np.arange(n) / sampling_rate
    data = rng.normal(scale=10.0, size=(n_channels, n)) + 20 * np.sin(2 * np.pi * 10 * t)
    rec = EegRecording(data.astype(np.float32), sampling_rate,
                       [f"E{i + 1}" for i in range(n_channels)], subject_id, session_id)
    events = [Event(int(round(counting_start_s * sampling_rate)), "counting_start", session_id)]
    for p in presses_s:
        ps = int(round(p * sampling_rate))
        events.append(Event(ps, "button_press", session_id))
        events.append(Event(ps + int(round(question_s[0] * sampling_rate)), "question_start", session_id))
        events.append(Event(ps + int(round(question_s[1] * sampling_rate)), "question_end", session_id))
    events.sort(key=lambda e: e.sample_index)
    return rec, events
