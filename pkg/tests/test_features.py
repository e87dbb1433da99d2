import numpy as np
import pytest

from polyvox.audio import MelSpectrogram, Waveform, mel_spectrogram
from polyvox.cqt import compute_cqt, crop_to_vocal_range, interior_frames
from polyvox.errors import ContractError
from polyvox.features import (TIMBRE_DIM, TimbreSpace, extract_content, extract_timbre,
                              timbre_shift_augment, timbre_stats, train_timbre_space,
                              warp_spectral_envelope)
from polyvox.midi import MidiNote
from polyvox.synthgen import DEFAULT_PRESETS, Score, render_score


@pytest.fixture(scope="module")
def sung_clip():
    lead = [MidiNote(62, 0.0, 1.0), MidiNote(65, 1.0, 2.0), MidiNote(60, 2.0, 3.0)]
    wave, _ = render_score(Score(lead), DEFAULT_PRESETS[0], seed=4)
    return wave


@pytest.fixture(scope="module")
def timbre_space():
    lead = [MidiNote(60, 0.0, 0.8), MidiNote(64, 0.8, 1.6), MidiNote(62, 1.6, 2.4)]
    alt = [MidiNote(65, 0.0, 1.2), MidiNote(62, 1.2, 2.4)]
    stats, labels = [], []
    for label, preset in enumerate(DEFAULT_PRESETS[:4]):
        for seed, score in ((1, Score(lead)), (2, Score(alt)), (3, Score(lead))):
            wave, _ = render_score(score, preset, seed=seed)
            stats.append(timbre_stats(mel_spectrogram(wave)))
            labels.append(label)
    space = train_timbre_space(np.stack(stats), np.array(labels), n_classes=4, steps=300)
    return space


class TestContent:
    def test_shape(self, sung_clip):
        content = extract_content(mel_spectrogram(sung_clip))
        assert content.shape == (mel_spectrogram(sung_clip).frames, 20)

    def test_wrong_band_count(self):
        with pytest.raises(ContractError):
            extract_content(MelSpectrogram(np.zeros((10, 40)), 100.0))

    def test_gain_invariance(self, sung_clip):
        half = Waveform(sung_clip.samples * 0.5, sung_clip.sample_rate)
        a = extract_content(mel_spectrogram(sung_clip))
        b = extract_content(mel_spectrogram(half))
        assert np.abs(a - b).mean() < 0.02

    def test_more_timbre_invariant_than_mel(self):
        lead = [MidiNote(62, 0.0, 1.0), MidiNote(66, 1.0, 2.0), MidiNote(64, 2.0, 3.0)]
        score = Score(lead)
        w1, _ = render_score(score, DEFAULT_PRESETS[0], seed=1)
        w2, _ = render_score(score, DEFAULT_PRESETS[2], seed=1)
        m1, m2 = mel_spectrogram(w1), mel_spectrogram(w2)
        mel_l1 = np.abs(m1.values - m2.values).mean()
        content_l1 = np.abs(extract_content(m1) - extract_content(m2)).mean()
        assert content_l1 < 0.3 * mel_l1


class TestTimbre:
    def test_unit_norm(self, timbre_space, sung_clip):
        emb = extract_timbre(mel_spectrogram(sung_clip), timbre_space)
        assert emb.shape == (TIMBRE_DIM,)
        assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-6)

    def test_short_clip_rejected(self, timbre_space):
        with pytest.raises(ContractError):
            timbre_space.embed(MelSpectrogram(np.zeros((50, 80)), 100.0))

    def test_same_preset_high_cosine(self, timbre_space):
        s1 = [MidiNote(61, 0.0, 1.1), MidiNote(63, 1.1, 2.2)]
        s2 = [MidiNote(67, 0.0, 0.9), MidiNote(64, 0.9, 1.8), MidiNote(66, 1.8, 2.7)]
        sims, cross = [], []
        for preset in DEFAULT_PRESETS[:4]:
            w1, _ = render_score(Score(s1), preset, seed=8)
            w2, _ = render_score(Score(s2), preset, seed=9)
            e1 = timbre_space.embed(mel_spectrogram(w1))
            e2 = timbre_space.embed(mel_spectrogram(w2))
            sims.append(float(e1 @ e2))
        for other in DEFAULT_PRESETS[1:4]:
            w1, _ = render_score(Score(s1), DEFAULT_PRESETS[0], seed=8)
            w2, _ = render_score(Score(s1), other, seed=8)
            cross.append(float(timbre_space.embed(mel_spectrogram(w1))
                               @ timbre_space.embed(mel_spectrogram(w2))))
        assert min(sims) >= 0.8
        assert np.mean(sims) - np.mean(cross) >= 0.2


class TestWarp:
    def test_identity_preserves_mel(self, sung_clip):
        out = warp_spectral_envelope(sung_clip, np.zeros(3))
        a = mel_spectrogram(sung_clip).values
        b = mel_spectrogram(out).values
        assert np.abs(a - b).mean() < 1e-6

    def test_pitch_preserved(self, sung_clip):
        rng = np.random.default_rng(5)
        warped = timbre_shift_augment(sung_clip, rng)
        before = crop_to_vocal_range(compute_cqt(sung_clip))
        after = crop_to_vocal_range(compute_cqt(warped))
        rows = list(interior_frames(before.frames))
        a = before.magnitudes[rows].argmax(axis=1)
        b = after.magnitudes[rows].argmax(axis=1)
        voiced = before.magnitudes[rows].max(axis=1) > 0.01
        assert np.mean(a[voiced] == b[voiced]) >= 0.95

    def test_warp_moves_timbre_embedding(self, timbre_space, sung_clip):
        lead = [MidiNote(62, 0.0, 1.0), MidiNote(65, 1.0, 2.0), MidiNote(60, 2.0, 3.0)]
        duplicate, _ = render_score(Score(lead), DEFAULT_PRESETS[0], seed=77)
        warped = warp_spectral_envelope(sung_clip, np.array([0.12, -0.12, 0.12]))
        base = timbre_space.embed(mel_spectrogram(sung_clip))
        cos_dup = float(base @ timbre_space.embed(mel_spectrogram(duplicate)))
        cos_warp = float(base @ timbre_space.embed(mel_spectrogram(warped)))
        assert cos_warp < cos_dup

    def test_offsets_validated(self, sung_clip):
        with pytest.raises(ContractError):
            warp_spectral_envelope(sung_clip, np.array([0.3, 0.0, 0.0]))
        with pytest.raises(ContractError):
            warp_spectral_envelope(sung_clip, np.zeros(2))

    def test_augment_deterministic_given_rng(self, sung_clip):
        a = timbre_shift_augment(sung_clip, np.random.default_rng(11))
        b = timbre_shift_augment(sung_clip, np.random.default_rng(11))
        assert np.array_equal(a.samples, b.samples)
