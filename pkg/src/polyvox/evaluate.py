"""Quantitative evaluation: CQT multipitch detection with an octave-harmonic
guard, a YIN single-pitch baseline (the failure mode the pipeline is built
around), conversion metrics against ground-truth MIDI, and report emission
with bootstrap confidence intervals.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform
from .cqt import CqtMatrix, compute_cqt, crop_to_vocal_range, F_MIN_C1
from .errors import ContractError
from .features import TimbreSpace
from .midi import MidiNote, PianoRoll, to_piano_roll


@dataclass
class MultiPitchFrame:
    frame: int
    active_bins: set[int]


@dataclass
class EvalConfig:
    threshold_db: float = -20.0
    tolerance_bins: int = 1
    bootstrap_resamples: int = 1000

    def __post_init__(self):
        if self.threshold_db >= 0:
            raise ContractError("threshold_db must be negative (relative to the frame maximum)")


def _frame_peaks(row: np.ndarray, floor: float) -> list[int]:
    """Strict interior local maxima above the threshold floor."""
    return [k for k in range(1, row.size - 1)
            if row[k] > floor and row[k] > row[k - 1] and row[k] > row[k + 1]]


def multipitch_from_cqt(m: CqtMatrix, threshold_db: float = -20.0,
                        octave_guard: bool = True) -> list[MultiPitchFrame]:
    """Per-frame sounding bins: local maxima within threshold_db of the frame
    maximum. With the guard, a peak at k is dropped when a peak also sits at
    k-12 with at least half its magnitude (the second harmonic of a strong
    fundamental lands exactly one octave up)."""
    if threshold_db >= 0:
        raise ContractError("threshold_db must be negative")
    rel = 10.0 ** (threshold_db / 20.0)
    frames = []
    for f in range(m.frames):
        row = m.magnitudes[f]
        top = row.max()
        if top <= 0:
            frames.append(MultiPitchFrame(f, set()))
            continue
        peaks = _frame_peaks(row, top * rel)
        if octave_guard:
            peak_set = set(peaks)
            peaks = [k for k in peaks
                     if not (k - 12 in peak_set and row[k - 12] >= 0.5 * row[k])]
        frames.append(MultiPitchFrame(f, set(peaks)))
    return frames


# ---------------------------------------------------------------------------
# YIN baseline
# ---------------------------------------------------------------------------


def f0_yin(w: Waveform, frame_s: float = 0.025, hop_s: float = 0.010,
           threshold: float = 0.15, f_lo: float = 60.0, f_hi: float = 1000.0) -> np.ndarray:
    """Single-pitch YIN track: cumulative-mean-normalized difference with an
    absolute threshold and parabolic interpolation. NaN marks unvoiced
    frames. One value per frame -- by construction it cannot report two
    simultaneous pitches."""
    sr = w.sample_rate
    win = int(round(frame_s * sr))
    hop = int(round(hop_s * sr))
    tau_min = max(2, int(sr / f_hi))
    tau_max = min(win, int(np.ceil(sr / f_lo)))
    x = w.samples
    n_frames = max(1, (x.size - 2 * win) // hop + 1) if x.size >= 2 * win else 1
    out = np.full(n_frames, np.nan)
    fft_n = 1 << int(np.ceil(np.log2(2 * win + 1)))

    for f in range(n_frames):
        buf = x[f * hop : f * hop + 2 * win]
        if buf.size < 2 * win:
            buf = np.pad(buf, (0, 2 * win - buf.size))
        head = buf[:win]
        spec_all = np.fft.rfft(buf, fft_n)
        spec_head = np.fft.rfft(head, fft_n)
        corr = np.fft.irfft(spec_all * np.conj(spec_head), fft_n)[: win + 1]
        sq = np.concatenate([[0.0], np.cumsum(buf * buf)])
        energy = sq[win : 2 * win + 1] - sq[: win + 1]  # energy of buf[tau : tau+win]
        diff = energy[0] + energy - 2.0 * corr
        diff = np.maximum(diff, 0.0)

        cum = np.cumsum(diff[1:])
        cmndf = np.ones(win + 1)
        nz = cum > 0
        cmndf[1:][nz] = diff[1:][nz] * np.arange(1, win + 1)[nz] / cum[nz]

        tau = None
        for cand in range(tau_min, tau_max):
            if cmndf[cand] < threshold:
                while cand + 1 < tau_max and cmndf[cand + 1] < cmndf[cand]:
                    cand += 1
                tau = cand
                break
        if tau is None or tau <= 0:
            continue
        if 1 <= tau < win:
            a, b, c = cmndf[tau - 1], cmndf[tau], cmndf[tau + 1]
            denom = a - 2 * b + c
            shift = 0.5 * (a - c) / denom if abs(denom) > 1e-12 else 0.0
            tau_star = tau + np.clip(shift, -1.0, 1.0)
        else:
            tau_star = float(tau)
        out[f] = sr / tau_star
    return out


def hz_to_cropped_bin(f0: float) -> float:
    return 12.0 * np.log2(f0 / F_MIN_C1)


# ---------------------------------------------------------------------------
# Metrics against ground truth
# ---------------------------------------------------------------------------


def _truth_bins(roll: PianoRoll) -> list[set[int]]:
    return [set(np.flatnonzero(roll.activity[f]).tolist()) for f in range(roll.frames)]


def multipitch_scores(detected: list[MultiPitchFrame], roll: PianoRoll,
                      tolerance: int = 1) -> dict[str, float]:
    """Frame-level precision/recall/F1 with +/-tolerance bin matching."""
    truth = _truth_bins(roll)
    n = min(len(detected), len(truth))
    tp_r = total_t = tp_p = total_d = 0
    for f in range(n):
        t_bins, d_bins = truth[f], detected[f].active_bins
        total_t += len(t_bins)
        total_d += len(d_bins)
        tp_r += sum(1 for t in t_bins if any(abs(d - t) <= tolerance for d in d_bins))
        tp_p += sum(1 for d in d_bins if any(abs(d - t) <= tolerance for t in t_bins))
    precision = tp_p / total_d if total_d else 0.0
    recall = tp_r / total_t if total_t else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def yin_recall(w: Waveform, roll: PianoRoll, tolerance: int = 1) -> float:
    """Recall of the single-pitch baseline against the polyphonic roll."""
    f0 = f0_yin(w)
    truth = _truth_bins(roll)
    # YIN hops at 10 ms = the roll frame interval
    n = min(f0.size, len(truth))
    hit = total = 0
    for f in range(n):
        total += len(truth[f])
        if np.isnan(f0[f]) or not truth[f]:
            continue
        b = hz_to_cropped_bin(f0[f])
        hit += sum(1 for t in truth[f] if abs(b - t) <= tolerance + 0.5)
    return hit / total if total else 0.0


def harmony_retention(m: CqtMatrix, roll: PianoRoll, threshold_db: float = -20.0,
                      tolerance: int = 1) -> float:
    """Fraction of polyphonic frames in which at least two ground-truth
    pitches survive as CQT local maxima (no octave guard: genuine octave
    harmonies must count)."""
    detected = multipitch_from_cqt(m, threshold_db, octave_guard=False)
    truth = _truth_bins(roll)
    n = min(len(detected), len(truth))
    poly = kept = 0
    for f in range(n):
        if len(truth[f]) < 2:
            continue
        poly += 1
        d_bins = detected[f].active_bins
        hits = sum(1 for t in truth[f] if any(abs(d - t) <= tolerance for d in d_bins))
        kept += int(hits >= 2)
    return kept / poly if poly else float("nan")


def evaluate_conversion(output: Waveform, source_truth: list[MidiNote],
                        ref: Waveform | None, cfg: EvalConfig,
                        timbre_space: TimbreSpace | None = None,
                        target_mel=None, output_mel=None) -> dict:
    """One report row: multipitch precision/recall/F1 of the output CQT
    against the ground-truth roll, timbre cosine to the reference (when a
    fitted timbre space is supplied), and mel L1 when a target is defined."""
    cropped = crop_to_vocal_range(compute_cqt(output))
    roll = to_piano_roll(source_truth, n_frames=cropped.frames)
    row = dict(multipitch_scores(
        multipitch_from_cqt(cropped, cfg.threshold_db), roll, cfg.tolerance_bins))
    row["harmony_retention"] = harmony_retention(cropped, roll, cfg.threshold_db,
                                                 cfg.tolerance_bins)
    if timbre_space is not None and ref is not None:
        from .audio import mel_spectrogram

        cos = float(np.dot(timbre_space.embed(mel_spectrogram(output)),
                           timbre_space.embed(mel_spectrogram(ref))))
        row["timbre_cos"] = cos
    if target_mel is not None and output_mel is not None:
        n = min(target_mel.frames, output_mel.frames)
        row["mel_l1"] = float(np.abs(target_mel.values[:n] - output_mel.values[:n]).mean())
    return row


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _aggregate(values: np.ndarray, resamples: int, rng: np.random.Generator) -> dict:
    boot = np.empty(resamples)
    for i in range(resamples):
        boot[i] = rng.choice(values, size=values.size, replace=True).mean()
    return {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "ci95": [float(np.percentile(boot, 2.5)), float(np.percentile(boot, 97.5))],
    }


def emit_report(rows: list[dict], out_dir, config_echo: dict | None = None,
                seed: int = 0, cfg: EvalConfig | None = None) -> Path:
    """Write report.json (rows + aggregates + config echo) and a flat
    report.csv; bootstrap CIs are seeded so reruns agree exactly."""
    if not rows:
        raise ContractError("cannot emit a report without rows")
    cfg = cfg or EvalConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    metrics = sorted({k for row in rows for k, v in row.items()
                      if isinstance(v, (int, float)) and not isinstance(v, bool)})
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xC1))))
    aggregates = {}
    for key in metrics:
        values = np.array([row[key] for row in rows
                           if key in row and np.isfinite(row[key])])
        if values.size:
            aggregates[key] = _aggregate(values, cfg.bootstrap_resamples, rng)

    report = {"seed": seed, "config": config_echo or {}, "rows": rows, "aggregates": aggregates}
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))

    columns = sorted({k for row in rows for k in row})
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return report_path


def write_pgm(matrix: np.ndarray, path) -> None:
    """Min-max scaled grayscale dump of a matrix as binary PGM (P5)."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    gray = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        fh.write(gray.tobytes())
