"""Deterministic stand-ins for the pretrained content and timbre encoders,
plus the pitch-preserving spectral-envelope warp used to reduce timbre
leakage into the content features during converter training.

Content: low-order mel cepstra (energy coefficient dropped, per-clip
normalized). Timbre: global mel statistics through a linear projection
trained with a singer-classification probe, then frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .audio import MEL_CONFIG, MelSpectrogram, StftConfig, Waveform, istft, stft
from .errors import ContractError
from .nn import ParamStore
from .optim import AdamW, AdamWConfig
from .tensor import Tensor

N_CONTENT = 20
TIMBRE_DIM = 192
_STATS_DIM = 164  # 80 band means + 80 band stds + 4 tilt summaries


def _dct_rows(n_out: int, n_in: int) -> np.ndarray:
    """Type-II cosine transform rows 1..n_out (row 0, the energy term, is
    deliberately absent)."""
    k = np.arange(1, n_out + 1)[:, None]
    b = np.arange(n_in)[None, :]
    return np.cos(np.pi * k * (2 * b + 1) / (2 * n_in))


def extract_content(m: MelSpectrogram) -> np.ndarray:
    """Per-frame cepstral content features, (frames, 20), per-clip normalized.

    Dropping the zeroth coefficient removes gain; mean/variance
    normalization removes the static (timbre-carrying) envelope offset.
    """
    if m.bands != 80:
        raise ContractError(f"content extraction expects 80 mel bands, got {m.bands}")
    cep = m.values @ _dct_rows(N_CONTENT, m.bands).T
    mu = cep.mean(axis=0, keepdims=True)
    sd = cep.std(axis=0, keepdims=True)
    return (cep - mu) / np.maximum(sd, 1e-6)


def timbre_stats(m: MelSpectrogram) -> np.ndarray:
    """Global spectral statistics: per-band mean, per-band std, and a
    4-value tilt summary (slope/intercept of the mean curve, centroid
    mean/std), concatenated into a 164-vector."""
    v = m.values
    band_mean = v.mean(axis=0)
    band_std = v.std(axis=0)
    x = np.linspace(-1.0, 1.0, v.shape[1])
    slope, intercept = np.polyfit(x, band_mean, 1)
    energy = np.exp(v)
    centroid = (energy * np.arange(v.shape[1])).sum(axis=1) / energy.sum(axis=1)
    tilt = np.array([slope, intercept, centroid.mean() / v.shape[1], centroid.std() / v.shape[1]])
    return np.concatenate([band_mean, band_std, tilt])


@dataclass
class TimbreSpace:
    """Frozen linear projection from standardized mel statistics to the
    unit sphere."""

    weight: np.ndarray  # (164, 192)
    mean: np.ndarray
    scale: np.ndarray

    def embed(self, m: MelSpectrogram) -> np.ndarray:
        if m.frames < int(m.frame_rate):
            raise ContractError(f"timbre embedding needs >= 1 s, got {m.frames} frames")
        v = ((timbre_stats(m) - self.mean) / self.scale) @ self.weight
        return v / max(np.linalg.norm(v), 1e-12)


def extract_timbre(m: MelSpectrogram, space: TimbreSpace) -> np.ndarray:
    """L2-normalized 192-d timbre embedding of a reference clip."""
    return space.embed(m)


def train_timbre_space(stats: np.ndarray, labels: np.ndarray, n_classes: int,
                       steps: int = 400, seed: int = 0) -> TimbreSpace:
    """Fit the projection with a cross-entropy singer-classification probe,
    then discard the classifier head."""
    if stats.shape[0] != labels.shape[0] or stats.shape[1] != _STATS_DIM:
        raise ContractError(f"bad probe inputs: stats {stats.shape}, labels {labels.shape}")
    mu = stats.mean(axis=0, keepdims=True)
    sd = np.maximum(stats.std(axis=0, keepdims=True), 1e-6)
    normed = (stats - mu) / sd

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x71B))))
    store = ParamStore(rng)
    w = store.xavier("proj", _STATS_DIM, TIMBRE_DIM)
    head = store.xavier("head", TIMBRE_DIM, n_classes)
    opt = AdamW(store.params, AdamWConfig(peak_lr=1e-2, min_lr=1e-3, total_steps=steps))
    x = Tensor(normed)
    for _ in range(steps):
        T.zero_grads(store.params.values())
        loss = T.cross_entropy(T.matmul(T.matmul(x, w), head), labels)
        T.backward(loss)
        opt.step()
    return TimbreSpace(weight=w.data.copy(), mean=mu[0], scale=sd[0])


# ---------------------------------------------------------------------------
# Timbre-shift augmentation
# ---------------------------------------------------------------------------

_LIFTER_BINS = 32
_WARP_BREAKPOINTS = np.array([0.25, 0.5, 0.75])
WARP_LIMIT = 0.12


def _envelope(log_mag: np.ndarray) -> np.ndarray:
    """Smooth per-frame spectral envelope by cepstral liftering along the
    frequency axis (keep the lowest quefrencies)."""
    n_freq = log_mag.shape[1]
    cep = np.fft.irfft(log_mag, n=2 * (n_freq - 1), axis=1)
    lift = np.zeros_like(cep)
    lift[:, :_LIFTER_BINS] = cep[:, :_LIFTER_BINS]
    lift[:, -_LIFTER_BINS + 1 :] = cep[:, -_LIFTER_BINS + 1 :]
    smooth = np.fft.rfft(lift, axis=1).real
    return np.exp(smooth)


def warp_spectral_envelope(w: Waveform, offsets: np.ndarray,
                           cfg: StftConfig = MEL_CONFIG) -> Waveform:
    """Warp only the spectral envelope along frequency by a monotone
    piecewise-linear map; the excitation (hence pitch) is untouched.
    Zero offsets reproduce the input exactly up to STFT round-off."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != _WARP_BREAKPOINTS.shape:
        raise ContractError(f"need {_WARP_BREAKPOINTS.size} breakpoint offsets")
    if np.abs(offsets).max() > WARP_LIMIT + 1e-12:
        raise ContractError(f"breakpoint offsets exceed +/-{WARP_LIMIT}")

    spec = stft(w.samples, cfg)
    mag = np.abs(spec)
    env = _envelope(np.log(np.maximum(mag, 1e-10)))
    excitation = spec / env

    knots_out = np.concatenate([[0.0], _WARP_BREAKPOINTS * (1.0 + offsets), [1.0]])
    knots_out = np.maximum.accumulate(knots_out)  # keep the map monotone
    knots_in = np.concatenate([[0.0], _WARP_BREAKPOINTS, [1.0]])
    n_freq = spec.shape[1]
    grid = np.linspace(0.0, 1.0, n_freq)
    source_pos = np.interp(grid, knots_out, knots_in) * (n_freq - 1)
    lo = np.floor(source_pos).astype(int)
    hi = np.minimum(lo + 1, n_freq - 1)
    frac = source_pos - lo
    warped_env = env[:, lo] * (1.0 - frac) + env[:, hi] * frac

    out = istft(warped_env * excitation, cfg, w.samples.size)
    return Waveform(out, w.sample_rate)


def timbre_shift_augment(w: Waveform, rng: np.random.Generator) -> Waveform:
    """Random formant-style warp used on the content-encoder input during
    converter training."""
    return warp_spectral_envelope(w, rng.uniform(-WARP_LIMIT, WARP_LIMIT, _WARP_BREAKPOINTS.size))
