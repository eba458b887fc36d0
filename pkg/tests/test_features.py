import math

import numpy as np
import pytest

from rxeend import features as fx
from rxeend.features import Waveform


def test_frame_count_one_second():
    frames = fx.frame_and_window(Waveform(np.ones(8000)))
    assert frames.shape == ((8000 - 200) // 80 + 1, 200) == (98, 200)


def test_single_window_boundary():
    assert fx.frame_and_window(Waveform(np.ones(200))).shape[0] == 1


def test_too_short_waveform():
    with pytest.raises(ValueError, match="shorter than one"):
        fx.frame_and_window(Waveform(np.ones(199)))


def test_zero_signal_frames_and_log_floor():
    frames = fx.frame_and_window(Waveform(np.zeros(1000)))
    assert not frames.any()
    mel = fx.log_mel(frames)
    assert mel.shape[1] == 23
    assert np.all(mel == math.log(1e-10))


def test_sine_at_filter_center_dominates_neighbours():
    centers = fx.filter_centers()
    k = 10
    t = np.arange(8000) / 8000
    w = Waveform(1000 * np.sin(2 * math.pi * centers[k] * t))
    mel = fx.log_mel(fx.frame_and_window(w)).mean(axis=0)
    assert mel[k] > mel[k - 1] and mel[k] > mel[k + 1]
    assert int(np.argmax(mel)) == k


def test_amplitude_doubling_shifts_by_log4():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 500, size=4000)
    a = fx.log_mel(fx.frame_and_window(Waveform(x)))
    b = fx.log_mel(fx.frame_and_window(Waveform(2 * x)))
    above = a > math.log(1e-10) + 1
    np.testing.assert_allclose((b - a)[above], math.log(4), atol=1e-6)


def splice_oracle(mel, context, stride):
    half = context // 2
    rows = []
    t = 0
    while t < len(mel):
        row = []
        for off in range(-half, half + 1):
            j = min(max(t + off, 0), len(mel) - 1)
            row.extend(mel[j])
        rows.append(row)
        t += stride
    return np.array(rows)


def test_splice_width_and_rows():
    mel = np.random.default_rng(1).normal(size=(100, 23))
    fm = fx.splice(mel)
    assert fm.rows.shape == (10, 345)
    assert fm.frame_step_sec == pytest.approx(0.1)
    np.testing.assert_array_equal(fm.rows, splice_oracle(mel, 15, 10))


def test_splice_constant_sequence():
    fm = fx.splice(np.tile(np.arange(23.0), (40, 1)))
    assert np.all(fm.rows == fm.rows[0])


def test_splice_too_few_frames():
    with pytest.raises(ValueError):
        fx.splice(np.zeros((14, 23)))


def test_pipeline_deterministic_and_wav_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    w = Waveform(np.round(rng.normal(0, 2000, size=16000)))
    path = tmp_path / "a.wav"
    fx.write_wav(path, w)
    back = fx.read_wav(path)
    assert back.sample_rate == 8000
    np.testing.assert_array_equal(back.samples, w.samples)
    a, b = fx.extract(back), fx.extract(fx.read_wav(path))
    assert a.rows.shape[1] == 345
    assert np.array_equal(a.rows, b.rows)


def test_matrix_text_roundtrip(tmp_path):
    m = np.random.default_rng(4).normal(size=(5, 7)).astype(np.float32)
    fx.write_matrix(tmp_path / "m.txt", m, fmt="%.9g")
    assert np.array_equal(fx.read_matrix(tmp_path / "m.txt"), m)
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert len(text) == 5 and len(text[0].split(" ")) == 7
