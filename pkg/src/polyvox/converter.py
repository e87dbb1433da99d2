"""Flow-matching mel converter: feature fusion, linear-path velocity
training, and sway-scheduled Euler ODE inference.

Training follows the in-context prompt recipe: a random contiguous span of
the target mel is hidden from the conditioning channel and becomes the
prediction region; at inference the reference clip's mel is prepended as a
visible prompt and stripped from the output. The pitch path runs through the
frozen CQT encoder and is never updated here.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .audio import (MEL_CONFIG, PIPELINE_SAMPLE_RATE, MelSpectrogram, Waveform,
                    griffin_lim, load_wav, mel_spectrogram, resample)
from .cqt import compute_cqt, crop_to_vocal_range, transpose_pitch
from .errors import ContractError
from .features import (TIMBRE_DIM, TimbreSpace, extract_content, timbre_shift_augment,
                       timbre_stats, train_timbre_space)
from .midi import ROLL_FRAME_RATE
from .nn import (LayerNorm, Linear, MultiHeadAttention, FeedForward, ParamStore,
                 sinusoidal_positions, timestep_embedding)
from .optim import AdamW, AdamWConfig, load_checkpoint, save_checkpoint
from .pitch import PitchExtractor, log_compress
from .synthgen import load_manifest
from .tensor import Tensor

N_CONTENT = 20


# ---------------------------------------------------------------------------
# Flow path and sway schedule
# ---------------------------------------------------------------------------


def interpolate_path(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Linear transport path (1-t) * x0 + t * x1."""
    if np.shape(x0) != np.shape(x1):
        raise ContractError(f"path endpoints differ in shape: {np.shape(x0)} vs {np.shape(x1)}")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"path position t={t} outside [0, 1]")
    return (1.0 - t) * np.asarray(x0) + t * np.asarray(x1)


@dataclass(frozen=True)
class SwaySchedule:
    s: float = -1.0
    nfe: int = 32

    def __post_init__(self):
        if not -1.0 <= self.s <= 1.0:
            raise ContractError(f"sway coefficient {self.s} outside [-1, 1]")
        if self.nfe < 1:
            raise ContractError("nfe must be >= 1")


def f_sway(u, s: float):
    """Timestep warp u + s * (cos(pi*u/2) - 1 + u); fixes 0 and 1."""
    u = np.asarray(u, dtype=np.float64)
    return u + s * (np.cos(np.pi * u / 2.0) - 1.0 + u)


def sway_timesteps(sched: SwaySchedule) -> np.ndarray:
    """nfe+1 knots t_i = f_sway(i/nfe; s) spanning [0, 1]."""
    return f_sway(np.arange(sched.nfe + 1) / sched.nfe, sched.s)


def integrate_flow(v_fn, x0: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Euler integration of dx/dt = v(x, t) over the given knots: exactly
    len(knots) - 1 velocity evaluations."""
    x = np.asarray(x0, dtype=np.float64)
    for i in range(len(knots) - 1):
        x = x + (knots[i + 1] - knots[i]) * v_fn(x, float(knots[i]))
    return x


# ---------------------------------------------------------------------------
# Length regulator
# ---------------------------------------------------------------------------


def linear_resample(seq: np.ndarray, target_frames: int) -> np.ndarray:
    """Linear interpolation along the time axis to target_frames rows."""
    if target_frames < 1:
        raise ContractError("target_frames must be >= 1")
    n = seq.shape[0]
    if n == target_frames:
        return np.asarray(seq, dtype=np.float64)
    src = np.linspace(0.0, n - 1.0, target_frames)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo)[:, None]
    return seq[lo] * (1.0 - frac) + seq[hi] * frac


class LengthRegulator:
    """Interpolate to the mel frame grid, then a learnable identity-
    initialized projection."""

    def __init__(self, store: ParamStore, name: str, dim: int):
        self.proj = Linear(store, name, dim, dim, identity_init=True)

    def __call__(self, seq, target_frames: int) -> Tensor:
        data = seq.data if isinstance(seq, Tensor) else np.asarray(seq, dtype=np.float64)
        if data.ndim == 3:
            resampled = np.stack([linear_resample(s, target_frames) for s in data])
        else:
            resampled = linear_resample(data, target_frames)
        return self.proj(Tensor(resampled))


# ---------------------------------------------------------------------------
# Velocity network (DiT-style)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VelocityNetConfig:
    mel_bands: int = 80
    cond_dim: int = 377
    width: int = 256
    n_layers: int = 6
    n_heads: int = 4
    ff_mult: int = 4


class _DiTBlock:
    """Pre-norm block with adaptive layer-norm modulation from the time
    embedding; modulation projections are zero-initialized so the block
    starts as identity plus nothing."""

    def __init__(self, store: ParamStore, name: str, width: int, n_heads: int, ff_mult: int):
        self.ln1 = LayerNorm(store, f"{name}.ln1", width, affine=False)
        self.attn = MultiHeadAttention(store, f"{name}.attn", width, n_heads)
        self.ln2 = LayerNorm(store, f"{name}.ln2", width, affine=False)
        self.ff = FeedForward(store, f"{name}.ff", width, ff_mult * width)
        self.mod = Linear(store, f"{name}.mod", width, 6 * width, zero_init=True)

    def __call__(self, x: Tensor, tvec: Tensor) -> Tensor:
        width = x.shape[-1]
        mods = self.mod(tvec)
        pieces = [T.slice_(mods, (Ellipsis, slice(i * width, (i + 1) * width)))
                  for i in range(6)]
        shift1, scale1, gate1, shift2, scale2, gate2 = pieces
        h = self.ln1(x) * (scale1 + 1.0) + shift1
        x = x + gate1 * self.attn(h)
        h = self.ln2(x) * (scale2 + 1.0) + shift2
        return x + gate2 * self.ff(h)


class VelocityNet:
    """Predicts the transport velocity for a noisy mel given fused
    conditioning and the scalar flow time."""

    def __init__(self, store: ParamStore, cfg: VelocityNetConfig, name: str = "velocity"):
        self.cfg = cfg
        w = cfg.width
        self.input = Linear(store, f"{name}.input", cfg.mel_bands + cfg.cond_dim, w)
        self.time1 = Linear(store, f"{name}.time1", w, w)
        self.time2 = Linear(store, f"{name}.time2", w, w)
        self.blocks = [_DiTBlock(store, f"{name}.block{i}", w, cfg.n_heads, cfg.ff_mult)
                       for i in range(cfg.n_layers)]
        self.final_ln = LayerNorm(store, f"{name}.final_ln", w, affine=False)
        self.final_mod = Linear(store, f"{name}.final_mod", w, 2 * w, zero_init=True)
        self.head = Linear(store, f"{name}.head", w, cfg.mel_bands, zero_init=True)

    def __call__(self, psi, t, cond) -> Tensor:
        """psi: (frames, bands) or (batch, frames, bands); t: scalar flow time
        (or one per batch item); cond: fused conditioning, frame-aligned."""
        psi_t = psi if isinstance(psi, Tensor) else Tensor(psi)
        cond_t = cond if isinstance(cond, Tensor) else Tensor(cond)
        if psi_t.shape[:-1] != cond_t.shape[:-1]:
            raise ContractError(
                f"state and condition frames differ: {psi_t.shape} vs {cond_t.shape}")
        w = self.cfg.width
        x = self.input(T.concat([psi_t, cond_t], axis=-1))
        x = x + Tensor(sinusoidal_positions(x.shape[-2], w))
        if psi_t.data.ndim == 3:
            temb = np.stack([timestep_embedding(float(ti), w) for ti in np.atleast_1d(t)])
            temb = temb[:, None, :]  # (batch, 1, width)
        else:
            temb = timestep_embedding(float(t), w)[None, :]
        tvec = self.time2(T.gelu(self.time1(Tensor(temb))))
        for block in self.blocks:
            x = block(x, tvec)
        mods = self.final_mod(tvec)
        shift = T.slice_(mods, (Ellipsis, slice(0, w)))
        scale = T.slice_(mods, (Ellipsis, slice(w, 2 * w)))
        return self.head(self.final_ln(x) * (scale + 1.0) + shift)


def cfm_loss(net, x1: np.ndarray, cond, rng: np.random.Generator,
             loss_mask: np.ndarray | None = None) -> Tensor:
    """Draw x0 ~ N(0, 1) and t ~ U(0, 1) (per batch item when x1 is
    batched), form the linear path, and return the squared error between
    the predicted velocity and the path velocity x1 - x0 (t-independent).
    `loss_mask` rows weighted 1 contribute; the hidden prompt span is the
    usual choice."""
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = rng.standard_normal(x1.shape)
    if x1.ndim == 3:
        t = rng.uniform(size=x1.shape[0])
        psi = (1.0 - t[:, None, None]) * x0 + t[:, None, None] * x1
    else:
        t = float(rng.uniform())
        psi = interpolate_path(x0, x1, t)
    pred = net(psi, t, cond)
    return T.mse_loss(pred, Tensor(x1 - x0), mask=loss_mask)


def ode_sample(net, cond, sched: SwaySchedule, rng: np.random.Generator,
               frames: int | None = None, mel_bands: int = 80) -> np.ndarray:
    """Transport Gaussian noise to a mel by Euler steps over the sway knots;
    invokes the network exactly sched.nfe times."""
    cond_data = cond.data if isinstance(cond, Tensor) else np.asarray(cond, dtype=np.float64)
    n = cond_data.shape[0] if frames is None else frames
    x0 = rng.standard_normal((n, mel_bands))
    cond_t = Tensor(cond_data)

    def v_fn(x, t):
        return net(x, t, cond_t).data

    return integrate_flow(v_fn, x0, sway_timesteps(sched))


# ---------------------------------------------------------------------------
# Converter bundle
# ---------------------------------------------------------------------------


@dataclass
class ConverterConfig:
    width: int = 256
    n_layers: int = 6
    n_heads: int = 4
    ff_mult: int = 4
    mel_bands: int = 80
    window_frames: int = 200
    mask_span: tuple[float, float] = (0.3, 0.7)
    steps: int = 20000
    batch: int = 2
    peak_lr: float = 1e-3  # desk-scale default; the published schedule is 1e-4 -> 1e-5
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.01
    sway_s: float = -1.0
    nfe: int = 32
    prompt_frames: int = 200
    gl_iters: int = 32

    def __post_init__(self):
        lo, hi = self.mask_span
        if not 0.0 < lo <= hi < 1.0:
            raise ContractError(f"mask span {self.mask_span} must sit inside (0, 1)")


class ConverterModel:
    """Trained converter state: velocity net, length regulators, timbre
    space, corpus mel statistics, and the frozen pitch encoder."""

    def __init__(self, cfg: ConverterConfig, pitch: PitchExtractor, timbre: TimbreSpace,
                 mel_mean: np.ndarray, mel_std: np.ndarray, seed: int = 0):
        self.cfg = cfg
        self.pitch = pitch
        self.timbre = timbre
        self.mel_mean = mel_mean
        self.mel_std = mel_std
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xD17))))
        self.store = ParamStore(rng)
        self.pitch_dim = pitch.cfg.model_dim
        cond_dim = N_CONTENT + self.pitch_dim + TIMBRE_DIM + cfg.mel_bands + 1
        self.net = VelocityNet(self.store, VelocityNetConfig(
            mel_bands=cfg.mel_bands, cond_dim=cond_dim, width=cfg.width,
            n_layers=cfg.n_layers, n_heads=cfg.n_heads, ff_mult=cfg.ff_mult))
        self.reg_content = LengthRegulator(self.store, "reg_content", N_CONTENT)
        self.reg_pitch = LengthRegulator(self.store, "reg_pitch", self.pitch_dim)

    def standardize(self, mel_values: np.ndarray) -> np.ndarray:
        return (mel_values - self.mel_mean) / self.mel_std

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        return values * self.mel_std + self.mel_mean

    def fuse(self, content: np.ndarray, z_pitch: np.ndarray, z_timbre: np.ndarray,
             x_ref: np.ndarray, visible: np.ndarray, target_frames: int) -> Tensor:
        """Length-regulate the per-frame streams and concatenate with the
        broadcast timbre vector, the (partially hidden) reference mel
        channel, and its visibility indicator. Accepts single sequences or
        stacked batches."""
        zc = self.reg_content(content, target_frames)
        zp = self.reg_pitch(z_pitch, target_frames)
        # unit-norm timbre vectors have ~1/sqrt(dim) elements; rescale so all
        # conditioning channels enter the input projection at similar variance
        zt = np.asarray(z_timbre, dtype=np.float64) * np.sqrt(TIMBRE_DIM)
        if zc.data.ndim == 3:
            zt_full = np.broadcast_to(zt[:, None, :],
                                      (zc.shape[0], target_frames, zt.shape[-1])).copy()
        else:
            zt_full = np.broadcast_to(zt, (target_frames, zt.size)).copy()
        return T.concat([zc, zp, Tensor(zt_full), Tensor(x_ref), Tensor(visible)], axis=-1)

    def pitch_embedding(self, w: Waveform, transpose: int = 0) -> np.ndarray:
        mat = compute_cqt(w)
        if transpose:
            mat = transpose_pitch(mat, transpose)
        return self.pitch.encode_cqt(log_compress(crop_to_vocal_range(mat))).data

    def save(self, path, step: int) -> None:
        arrays = dict(self.store.arrays())
        for name, value in self.pitch.store.arrays().items():
            arrays[f"pitch.{name}"] = value
        arrays["timbre.weight"] = self.timbre.weight
        arrays["timbre.mean"] = self.timbre.mean
        arrays["timbre.scale"] = self.timbre.scale
        arrays["mel.mean"] = self.mel_mean
        arrays["mel.std"] = self.mel_std
        config = {
            "converter": _config_dict(self.cfg),
            "pitch_encoder": asdict(self.pitch.cfg),
        }
        save_checkpoint(path, arrays, step, config)

    @classmethod
    def load(cls, path) -> "ConverterModel":
        arrays, _step, header = load_checkpoint(path)
        cfg = ConverterConfig(**_config_from(header["config"]["converter"]))
        from .pitch import PitchEncoderConfig

        pitch = PitchExtractor(PitchEncoderConfig(**header["config"]["pitch_encoder"]),
                               trainable=False)
        pitch.store.load(arrays, prefix="pitch.")
        timbre = TimbreSpace(arrays["timbre.weight"], arrays["timbre.mean"],
                             arrays["timbre.scale"])
        model = cls(cfg, pitch, timbre, arrays["mel.mean"], arrays["mel.std"])
        model.store.load(arrays)
        return model


def _config_dict(cfg: ConverterConfig) -> dict:
    d = asdict(cfg)
    d["mask_span"] = list(cfg.mask_span)
    return d


def _config_from(d: dict) -> dict:
    d = dict(d)
    d["mask_span"] = tuple(d["mask_span"])
    return d


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _load_corpus(manifest_path, pitch: PitchExtractor, split: str = "train"):
    root = Path(manifest_path).parent
    corpus = []
    for row in load_manifest(manifest_path):
        if row["split"] != split:
            continue
        w = load_wav(root / row["path"])
        if w.sample_rate != PIPELINE_SAMPLE_RATE:
            w = resample(w, PIPELINE_SAMPLE_RATE)
        mel = mel_spectrogram(w)
        z_p = pitch.encode_cqt(log_compress(crop_to_vocal_range(compute_cqt(w)))).data
        corpus.append({
            "id": row["id"],
            "preset": row.get("preset", ""),
            "wave": w,
            "mel": mel,
            "z_p": z_p,
        })
    return corpus


def train_converter(manifest_path, cfg: ConverterConfig, steps: int | None,
                    pitch_ckpt, ckpt_path, log_path=None, seed: int = 0,
                    progress=None) -> Path:
    """Flow-matching training over masked windows of the train split.

    Per step and batch item: crop a window, hide a random 30-70% span of
    the target mel from the conditioning, rebuild content features from
    envelope-warped audio, embed pitch with the frozen CQT encoder and
    timbre from an unwarped window, then regress the path velocity on the
    hidden span. Writes a (step, lr, loss) CSV next to the checkpoint.
    """
    steps = cfg.steps if steps is None else steps
    pitch_ckpt = Path(pitch_ckpt)
    if not pitch_ckpt.exists():
        raise ContractError(f"pitch checkpoint {pitch_ckpt} not found")
    pitch = PitchExtractor.load(pitch_ckpt, trainable=False)
    corpus = _load_corpus(manifest_path, pitch, split="train")
    if not corpus:
        raise ContractError(f"no train clips in manifest {manifest_path}")

    all_mels = np.concatenate([c["mel"].values for c in corpus], axis=0)
    mel_mean = all_mels.mean(axis=0)
    mel_std = np.maximum(all_mels.std(axis=0), 1e-3)

    presets = sorted({c["preset"] for c in corpus})
    label_of = {p: i for i, p in enumerate(presets)}
    stats = np.stack([timbre_stats(c["mel"]) for c in corpus])
    labels = np.array([label_of[c["preset"]] for c in corpus])
    timbre = train_timbre_space(stats, labels, n_classes=max(len(presets), 2), seed=seed)

    model = ConverterModel(cfg, pitch, timbre, mel_mean, mel_std, seed=seed)
    opt = AdamW(model.store.params, AdamWConfig(
        peak_lr=cfg.peak_lr, min_lr=cfg.peak_lr * cfg.min_lr_ratio,
        weight_decay=cfg.weight_decay, total_steps=max(steps, 1)))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xCF4))))

    # one window length for the whole run so batch items stack
    win = min(cfg.window_frames, min(c["mel"].frames for c in corpus))

    rows = []
    for step in range(steps):
        T.zero_grads(model.store.params.values())
        x1s, contents, zps, zts, xrefs, visibles, hiddens = [], [], [], [], [], [], []
        for _ in range(cfg.batch):
            clip = corpus[int(rng.integers(len(corpus)))]
            n_f = clip["mel"].frames
            start = int(rng.integers(0, n_f - win + 1))
            x1 = model.standardize(clip["mel"].values[start : start + win])

            warped = timbre_shift_augment(clip["wave"], rng)
            content = extract_content(mel_spectrogram(warped))[start : start + win]

            t_win = min(120, n_f)
            t_start = int(rng.integers(0, n_f - t_win + 1))
            z_t = model.timbre.embed(MelSpectrogram(
                clip["mel"].values[t_start : t_start + t_win], clip["mel"].frame_rate))

            frac = float(rng.uniform(*cfg.mask_span))
            span = max(1, int(round(frac * win)))
            span_start = int(rng.integers(0, win - span + 1))
            hidden = np.zeros((win, 1))
            hidden[span_start : span_start + span] = 1.0

            x1s.append(x1)
            contents.append(content)
            zps.append(clip["z_p"][start : start + win])
            zts.append(z_t)
            xrefs.append(x1 * (1.0 - hidden))
            visibles.append(1.0 - hidden)
            hiddens.append(hidden)
        x1 = np.stack(x1s)
        cond = model.fuse(np.stack(contents), np.stack(zps), np.stack(zts),
                          np.stack(xrefs), np.stack(visibles), win)
        loss = cfm_loss(model.net, x1, cond, rng, loss_mask=np.stack(hiddens))
        T.backward(loss)
        lr = opt.step()
        rows.append((step, lr, float(loss.data)))
        if progress and (step % 100 == 0 or step == steps - 1):
            progress(step, float(loss.data))

    model.save(ckpt_path, step=steps)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "loss"])
            writer.writerows(rows)
    return Path(ckpt_path)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def convert(src: Waveform, ref: Waveform, model: ConverterModel | str | Path,
            sched: SwaySchedule | None = None, transpose: int = 0, seed: int = 0,
            gl_iters: int | None = None) -> tuple[Waveform, MelSpectrogram]:
    """Convert `src` to the timbre of `ref`: content and (optionally
    transposed) pitch come from the source, timbre and the mel prompt from
    the reference. Returns the waveform and the generated mel."""
    if not isinstance(model, ConverterModel):
        model = ConverterModel.load(model)
    cfg = model.cfg
    sched = sched or SwaySchedule(cfg.sway_s, cfg.nfe)

    rate = PIPELINE_SAMPLE_RATE
    if src.sample_rate != rate:
        src = resample(src, rate)
    if ref.sample_rate != rate:
        ref = resample(ref, rate)
    if src.duration < 1.0 or ref.duration < 1.0:
        raise ContractError("source and reference clips must be at least 1 s")

    mel_src = mel_spectrogram(src)
    mel_ref = mel_spectrogram(ref)
    content_src = extract_content(mel_src)
    content_ref = extract_content(mel_ref)
    z_p_src = model.pitch_embedding(src, transpose=transpose)
    z_p_ref = model.pitch_embedding(ref)
    z_t = model.timbre.embed(mel_ref)

    prompt = min(cfg.prompt_frames, mel_ref.frames)
    n_src = mel_src.frames
    total = prompt + n_src
    content = np.concatenate([content_ref[:prompt], content_src], axis=0)
    z_p = np.concatenate([z_p_ref[:prompt], z_p_src], axis=0)
    x_ref = np.concatenate(
        [model.standardize(mel_ref.values[:prompt]), np.zeros((n_src, cfg.mel_bands))], axis=0)
    visible = np.concatenate([np.ones((prompt, 1)), np.zeros((n_src, 1))], axis=0)

    cond = model.fuse(content, z_p, z_t, x_ref, visible, total).data
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x0DE))))
    sampled = ode_sample(model.net, cond, sched, rng, mel_bands=cfg.mel_bands)
    mel_out = MelSpectrogram(model.destandardize(sampled[prompt:]), ROLL_FRAME_RATE)
    wave = griffin_lim(mel_out, iters=gl_iters or cfg.gl_iters)
    return wave, mel_out
