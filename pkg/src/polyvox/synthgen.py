"""Deterministic synthetic singing generator with exact MIDI ground truth.

Clips are additive-synthesis "voices": a lead melody plus optional quieter
harmony voices at musically plausible intervals. Note times live on the SMF
tick grid (1/960 s) so the WAV / MIDI sidecars round-trip exactly, and lead
pitches map to CQT bins by construction (bin = MIDI - 24).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, save_wav
from .errors import ContractError
from .midi import MidiNote, write_smf

SAMPLE_RATE = 44100
_TICKS_PER_SECOND = 960.0  # 480 ticks/beat at 120 BPM
_RAMP_S = 0.010
_MIN_NOTE_S = 0.025

# intervals follow common backing-vocal arrangements; wider intervals are
# favored so harmony fundamentals stay resolvable after mel-domain synthesis
HARMONY_INTERVALS = (3, 4, 7, -5, 12)
HARMONY_WEIGHTS = (0.10, 0.15, 0.30, 0.20, 0.25)
HARMONY_GAIN_DB = (-12.0, -3.0)


@dataclass(frozen=True)
class SingerPreset:
    """Additive-synthesis voice: relative harmonic amplitudes shaped by three
    resonances, with vibrato and slow relative-frequency jitter."""

    id: str
    harmonic_profile: tuple[float, ...]
    formants: tuple[tuple[float, float], ...]  # (center Hz, bandwidth Hz)
    vibrato_rate: float = 5.0
    vibrato_depth: float = 20.0  # cents
    jitter: float = 0.002

    def __post_init__(self):
        if len(self.harmonic_profile) != 16:
            raise ContractError("harmonic_profile must have 16 entries")
        if self.harmonic_profile[0] != 1.0 or min(self.harmonic_profile) < 0:
            raise ContractError("harmonic amplitudes must be >= 0 with amplitude[0] = 1")
        for center, _bw in self.formants:
            if center >= SAMPLE_RATE / 2:
                raise ContractError(f"formant center {center} Hz above Nyquist")


@dataclass
class Score:
    lead: list[MidiNote]
    harmony_voices: list[tuple[int, float, list[MidiNote]]] = field(default_factory=list)

    def __post_init__(self):
        for _interval, gain_db, _notes in self.harmony_voices:
            if gain_db > 0:
                raise ContractError(f"harmony gain must be <= 0 dB, got {gain_db}")


def _rolloff_profile(alpha: float, tweaks: dict[int, float] | None = None) -> tuple[float, ...]:
    amps = [(h + 1) ** -alpha for h in range(16)]
    for h, v in (tweaks or {}).items():
        amps[h] *= v
    return tuple(a / amps[0] for a in amps)


DEFAULT_PRESETS = (
    SingerPreset("alto_warm", _rolloff_profile(1.45),
                 ((280.0, 160.0), (1250.0, 240.0), (2800.0, 360.0)), 5.0, 20.0, 0.0004),
    SingerPreset("soprano_bright", _rolloff_profile(1.1, {3: 1.5, 4: 1.35}),
                 ((305.0, 195.0), (2000.0, 360.0), (3700.0, 440.0)), 5.5, 24.0, 0.0005),
    SingerPreset("tenor_dark", _rolloff_profile(1.7),
                 ((242.0, 126.0), (1280.0, 240.0), (2350.0, 310.0)), 4.6, 17.0, 0.0004),
    SingerPreset("bass_round", _rolloff_profile(2.1),
                 ((230.0, 115.0), (950.0, 200.0), (2000.0, 280.0)), 4.2, 14.0, 0.0003),
    SingerPreset("mezzo_edge", _rolloff_profile(1.05, {2: 1.5, 5: 1.8}),
                 ((295.0, 175.0), (1700.0, 280.0), (3150.0, 400.0)), 5.2, 22.0, 0.0004),
    SingerPreset("folk_light", _rolloff_profile(1.6, {1: 0.7, 6: 1.5}),
                 ((258.0, 145.0), (1430.0, 255.0), (3900.0, 470.0)), 6.0, 24.0, 0.0005),
)


def _formant_gain(freq: np.ndarray | float, preset: SingerPreset) -> np.ndarray | float:
    gain = 0.05
    for center, bw in preset.formants:
        half = max(bw / 2.0, 1.0)
        gain = gain + 1.0 / (1.0 + ((np.asarray(freq) - center) / half) ** 2)
    return gain


def render_note(pitch: int, dur: float, preset: SingerPreset, seed: int) -> Waveform:
    """Synthesize one note: 16 formant-shaped harmonics over a vibrato- and
    jitter-modulated fundamental, 10 ms raised-cosine ramps, peak 0.5."""
    if not 24 <= pitch <= 83:
        raise ContractError(f"pitch {pitch} outside singable range 24..83")
    if dur < _MIN_NOTE_S:
        raise ContractError(f"duration {dur * 1e3:.1f} ms shorter than attack+release")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    n = int(round(dur * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = 440.0 * 2.0 ** ((pitch - 69) / 12.0)

    cents = preset.vibrato_depth * np.sin(2.0 * np.pi * preset.vibrato_rate * t)
    knots = rng.normal(0.0, preset.jitter, max(int(np.ceil(dur * 100)) + 2, 2))
    jitter = np.interp(t * 100.0, np.arange(knots.size), knots)
    f_inst = f0 * 2.0 ** (cents / 1200.0) * (1.0 + jitter)
    phase = 2.0 * np.pi * np.cumsum(f_inst) / SAMPLE_RATE

    out = np.zeros(n)
    for h, amp in enumerate(preset.harmonic_profile, start=1):
        fh = h * f0
        if fh >= 0.45 * SAMPLE_RATE or amp == 0.0:
            continue
        out += amp * _formant_gain(fh, preset) * np.sin(h * phase)

    ramp = int(_RAMP_S * SAMPLE_RATE)
    env = np.ones(n)
    fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[:ramp] = fade
    env[-ramp:] *= fade[::-1]
    out *= env
    peak = np.abs(out).max()
    if peak > 0:
        out *= 0.5 / peak
    return Waveform(out, SAMPLE_RATE)


def render_score(score: Score, preset: SingerPreset, seed: int) -> tuple[Waveform, list[MidiNote]]:
    """Mix lead and interval-shifted harmony voices; returns the mixture
    (peak 0.9) and the full polyphonic ground-truth note list."""
    voices: list[tuple[float, list[MidiNote]]] = [(1.0, list(score.lead))]
    for interval, gain_db, notes in score.harmony_voices:
        shifted = [MidiNote(n.pitch + interval, n.onset, n.offset, n.velocity) for n in notes]
        for n in shifted:
            if not 24 <= n.pitch <= 83:
                raise ContractError(f"harmony pitch {n.pitch} outside range after interval {interval}")
        voices.append((10.0 ** (gain_db / 20.0), shifted))

    truth = sorted((n for _gain, notes in voices for n in notes), key=lambda n: (n.onset, n.pitch))
    if not truth:
        return Waveform(np.zeros(4410), SAMPLE_RATE), []

    total = int(round(max(n.offset for n in truth) * SAMPLE_RATE))
    mix = np.zeros(total)
    note_idx = 0
    for gain, notes in voices:
        for note in notes:
            rendered = render_note(note.pitch, note.offset - note.onset, preset,
                                   seed * 65537 + note_idx)
            start = int(round(note.onset * SAMPLE_RATE))
            seg = rendered.samples[: total - start]
            mix[start : start + seg.size] += gain * (note.velocity / 96.0) * seg
            note_idx += 1
    peak = np.abs(mix).max()
    if peak > 0:
        mix *= 0.9 / peak
    return Waveform(mix, SAMPLE_RATE), truth


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_single: int = 10
    n_harmony: int = 10
    dur_range: tuple[float, float] = (3.0, 8.0)
    lead_range: tuple[int, int] = (55, 70)
    note_dur_range: tuple[float, float] = (0.20, 0.60)
    rest_prob: float = 0.2
    presets: tuple[SingerPreset, ...] = DEFAULT_PRESETS
    eval_fraction: float = 0.10

    def __post_init__(self):
        if len(self.presets) < 4:
            raise ContractError("preset pool must hold at least 4 presets")
        if not (0 < self.dur_range[0] <= self.dur_range[1]):
            raise ContractError("bad duration range")


def _ticks(seconds: float) -> float:
    return round(seconds * _TICKS_PER_SECOND) / _TICKS_PER_SECOND


def _random_melody(rng: np.random.Generator, cfg: SynthConfig,
                   lo: int, hi: int) -> list[MidiNote]:
    target = rng.uniform(*cfg.dur_range)
    pitch = int(rng.integers(lo, hi + 1))
    now = 0.0
    notes = []
    while now < target:
        dur = _ticks(rng.uniform(*cfg.note_dur_range))
        notes.append(MidiNote(pitch, _ticks(now), _ticks(now) + dur))
        now = _ticks(now) + dur
        if rng.random() < cfg.rest_prob:
            now += _ticks(rng.uniform(0.05, 0.15))
        step = int(rng.integers(-4, 5))
        pitch = int(np.clip(pitch + step, lo, hi))
    return notes


def make_clip_score(cfg: SynthConfig, condition: str, rng: np.random.Generator) -> Score:
    if condition == "harmony":
        interval = int(rng.choice(HARMONY_INTERVALS, p=HARMONY_WEIGHTS))
        gain_db = float(rng.uniform(*HARMONY_GAIN_DB))
        lo = max(cfg.lead_range[0], 24 - min(interval, 0))
        hi = min(cfg.lead_range[1], 83 - max(interval, 0))
        lead = _random_melody(rng, cfg, lo, hi)
        return Score(lead, [(interval, gain_db, list(lead))])
    lead = _random_melody(rng, cfg, *cfg.lead_range)
    return Score(lead)


def gen_dataset(cfg: SynthConfig, seed: int, out_dir, workers: int = 1) -> Path:
    """Write WAV + SMF + JSON sidecars plus manifest.jsonl; returns the
    manifest path. Pure function of (cfg, seed): reruns are byte-identical."""
    out = Path(out_dir)
    clips_dir = out / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)

    plans = []
    conditions = ["single"] * cfg.n_single + ["harmony"] * cfg.n_harmony
    for idx, condition in enumerate(conditions):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, idx))))
        preset = cfg.presets[int(rng.integers(len(cfg.presets)))]
        score = make_clip_score(cfg, condition, rng)
        plans.append((f"{condition}_{idx:04d}", condition, preset, score, seed * 1009 + idx))

    def render_one(plan):
        clip_id, condition, preset, score, clip_seed = plan
        wav, truth = render_score(score, preset, clip_seed)
        save_wav(wav, clips_dir / f"{clip_id}.wav")
        write_smf(truth, clips_dir / f"{clip_id}.mid")
        sidecar = {
            "id": clip_id,
            "condition": condition,
            "preset": preset.id,
            "seed": clip_seed,
            "duration_s": wav.duration,
        }
        (clips_dir / f"{clip_id}.json").write_text(json.dumps(sidecar, sort_keys=True))
        return sidecar

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            sidecars = list(pool.map(render_one, plans))
    else:
        sidecars = [render_one(p) for p in plans]

    split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5B117))))
    order = split_rng.permutation(len(plans))
    n_eval = max(1, int(round(len(plans) * cfg.eval_fraction))) if plans else 0
    eval_ids = {plans[i][0] for i in order[:n_eval]}

    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for side in sidecars:
            row = dict(side)
            row["path"] = f"clips/{side['id']}.wav"
            row["split"] = "eval" if side["id"] in eval_ids else "train"
            del row["seed"]
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(manifest_path) -> list[dict]:
    rows = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
