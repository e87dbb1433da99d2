import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyvox.audio import (LOG_FLOOR, MEL_CONFIG, StftConfig, Waveform, frame_count,
                           griffin_lim, istft, load_wav, mel_filterbank,
                           mel_spectrogram, mel_to_linear, resample, save_wav,
                           spectral_convergence, stft)
from polyvox.errors import ContractError, UnsupportedWavError, WavFormatError

from .conftest import SR, make_sine


def dft_peak_hz(w: Waveform) -> float:
    spectrum = np.abs(np.fft.rfft(w.samples))
    return np.fft.rfftfreq(w.samples.size, 1.0 / w.sample_rate)[spectrum.argmax()]


class TestWavIO:
    def test_pcm16_one_second(self, tmp_path, sine_440):
        path = tmp_path / "a.wav"
        save_wav(sine_440, path)
        back = load_wav(path)
        assert back.samples.size == 44100
        assert back.sample_rate == 44100

    def test_all_zero_payload(self, tmp_path):
        path = tmp_path / "z.wav"
        save_wav(Waveform(np.zeros(1000), SR), path)
        assert not load_wav(path).samples.any()

    def test_stereo_averages_to_zero(self, tmp_path):
        # channels carry +0.5 / -0.5 everywhere
        frames = 500
        inter = np.empty(2 * frames, dtype="<i2")
        inter[0::2] = int(0.5 * 32767)
        inter[1::2] = -int(0.5 * 32767)
        payload = inter.tobytes()
        header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
                             b"fmt ", 16, 1, 2, SR, SR * 4, 4, 16, b"data", len(payload))
        path = tmp_path / "st.wav"
        path.write_bytes(header + payload)
        assert np.all(load_wav(path).samples == 0.0)

    def test_full_scale_maps_to_32767(self, tmp_path):
        path = tmp_path / "f.wav"
        save_wav(Waveform(np.array([1.0, -1.0, 0.0]), SR), path)
        raw = np.frombuffer(path.read_bytes()[-6:], dtype="<i2")
        assert raw[0] == 32767

    def test_pcm16_roundtrip_error_bound(self, tmp_path):
        rng = np.random.default_rng(0)
        w = Waveform(rng.uniform(-1, 1, 4096), SR)
        path = tmp_path / "r.wav"
        save_wav(w, path)
        err = np.abs(load_wav(path).samples - w.samples).max()
        assert err <= 2.0**-15

    def test_float32_roundtrip_bit_exact(self, tmp_path, sine_440):
        w = Waveform(sine_440.samples.astype(np.float32).astype(np.float64), SR)
        path = tmp_path / "f32.wav"
        save_wav(w, path, fmt="float32")
        assert np.array_equal(load_wav(path).samples, w.samples)

    def test_save_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            save_wav(Waveform(np.zeros(10), SR), tmp_path)  # a directory

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"JUNKJUNKJUNKJUNK")
        with pytest.raises(WavFormatError):
            load_wav(path)

    def test_unsupported_codec(self, tmp_path):
        payload = b"\x00" * 8
        header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
                             b"fmt ", 16, 7, 1, SR, SR, 1, 8, b"data", len(payload))
        path = tmp_path / "ulaw.wav"
        path.write_bytes(header + payload)
        with pytest.raises(UnsupportedWavError):
            load_wav(path)

    def test_waveform_invariants(self):
        with pytest.raises(ContractError):
            Waveform(np.array([np.nan]), SR)
        with pytest.raises(ContractError):
            Waveform(np.zeros(4), 0)
        with pytest.raises(ContractError):
            Waveform(np.zeros(0), SR)


class TestResample:
    def test_doubles_length(self):
        w = make_sine(440.0, dur=1.0, sr=22050)
        out = resample(w, 44100)
        assert out.samples.size == 44100
        assert out.sample_rate == 44100

    def test_identity_at_equal_rate(self, sine_440):
        out = resample(sine_440, 44100)
        assert np.array_equal(out.samples, sine_440.samples)

    def test_sine_peak_preserved(self):
        w = make_sine(440.0, dur=1.0, sr=22050)
        out = resample(w, 44100)
        bin_hz = out.sample_rate / out.samples.size
        assert abs(dft_peak_hz(out) - 440.0) <= bin_hz

    def test_downsample_band_limits(self):
        # content above the target Nyquist must be attenuated, not aliased
        w = make_sine(15000.0, dur=0.5, sr=44100)
        out = resample(w, 22050)
        assert np.abs(out.samples[100:-100]).max() < 0.05

    def test_bad_rate(self, sine_440):
        with pytest.raises(ContractError):
            resample(sine_440, 0)


class TestMel:
    def test_silence_hits_log_floor(self):
        m = mel_spectrogram(Waveform(np.zeros(SR), SR))
        assert np.allclose(m.values, np.log(LOG_FLOOR))

    def test_frame_rate_100(self, sine_440):
        m = mel_spectrogram(sine_440)
        assert m.frame_rate == 100.0
        assert m.bands == 80

    def test_tone_band_matches_filterbank_center(self, sine_440):
        m = mel_spectrogram(sine_440)
        fb = mel_filterbank(SR, MEL_CONFIG.fft_size, 80)
        freqs = np.fft.rfftfreq(MEL_CONFIG.fft_size, 1.0 / SR)
        centers = np.array([freqs[fb[b].argmax()] for b in range(80)])
        expected = int(np.abs(centers - 440.0).argmin())
        assert m.values.sum(axis=0).argmax() == expected

    def test_tone_energy_concentration(self, sine_440):
        m = mel_spectrogram(sine_440)
        linear = np.exp(m.values[5:-5])
        band = linear.sum(axis=0).argmax()
        lo, hi = max(band - 2, 0), min(band + 3, 80)
        assert linear[:, lo:hi].sum() >= 0.6 * linear.sum()

    @given(st.integers(min_value=1, max_value=40000))
    @settings(max_examples=30, deadline=None)
    def test_frame_count_law(self, n):
        w = Waveform(np.zeros(max(n, 1)), SR)
        m = mel_spectrogram(w)
        assert m.frames == n // MEL_CONFIG.hop + 1

    def test_short_waveform_single_frame(self):
        m = mel_spectrogram(Waveform(np.zeros(100), SR))
        assert m.frames == 1

    def test_wrong_rate_rejected(self):
        with pytest.raises(ContractError):
            mel_spectrogram(Waveform(np.zeros(1000), 22050))


class TestStft:
    def test_istft_inverts_stft(self):
        x = np.random.default_rng(3).normal(0, 0.2, 22050)
        cfg = StftConfig()
        rec = istft(stft(x, cfg), cfg, x.size)
        assert np.abs(rec - x).max() < 1e-10

    def test_config_invariants(self):
        with pytest.raises(ContractError):
            StftConfig(fft_size=1000, hop=100)  # not a power of two
        with pytest.raises(ContractError):
            StftConfig(fft_size=1024, hop=0)


class TestGriffinLim:
    def test_tone_peak_recovered(self, sine_440):
        m = mel_spectrogram(sine_440)
        out = griffin_lim(m, iters=32)
        bin_hz = out.sample_rate / out.samples.size
        assert abs(dft_peak_hz(out) - 440.0) <= bin_hz

    def test_output_length(self, sine_440):
        m = mel_spectrogram(sine_440)
        out = griffin_lim(m, iters=2)
        assert out.samples.size == m.frames * MEL_CONFIG.hop

    def test_silence_rms(self):
        m = mel_spectrogram(Waveform(np.zeros(SR), SR))
        out = griffin_lim(m, iters=4)
        assert np.sqrt(np.mean(out.samples**2)) < 1e-3

    def test_convergence_non_increasing(self):
        w = make_sine(330.0, dur=0.5)
        w = Waveform(w.samples + 0.3 * make_sine(523.25, dur=0.5).samples, SR)
        m = mel_spectrogram(w)
        target = mel_to_linear(m)
        errors = [spectral_convergence(griffin_lim(m, iters=k).samples, target)
                  for k in (1, 2, 4, 8, 16)]
        assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))

    def test_iters_contract(self, sine_440):
        with pytest.raises(ContractError):
            griffin_lim(mel_spectrogram(sine_440), iters=0)
