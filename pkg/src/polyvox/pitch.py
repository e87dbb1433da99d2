"""Polyphonic pitch extractor trained by aligning CQT embeddings to MIDI
embeddings under a mean-L1 loss on randomly sampled time windows.

Two independent transformer encoders map the cropped (60-bin) CQT and the
piano roll into a shared embedding space. After training, the CQT encoder is
frozen and feeds the converter; the MIDI encoder exists only to supervise it.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .audio import load_wav, resample
from .cqt import CqtConfig, CqtMatrix, compute_cqt, crop_to_vocal_range
from .errors import ContractError
from .midi import load_smf, to_piano_roll
from .nn import ParamStore, SequenceEncoder
from .optim import AdamW, AdamWConfig, load_checkpoint, save_checkpoint
from .synthgen import load_manifest
from .tensor import Tensor


@dataclass(frozen=True)
class PitchEncoderConfig:
    input_bins: int = 60
    model_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    window_frames: int = 200  # 2 s at the 100 Hz frame rate

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ContractError("model_dim must be divisible by n_heads")
        if self.window_frames < 8:
            raise ContractError("window_frames must be >= 8")


def log_compress(m: CqtMatrix | np.ndarray) -> np.ndarray:
    """Per-clip magnitude normalization x -> log(1 + x/ref) with ref at the
    99th percentile; compresses the ~60 dB range before the L1 geometry."""
    mags = m.magnitudes if isinstance(m, CqtMatrix) else np.asarray(m, dtype=np.float64)
    ref = max(float(np.percentile(mags, 99.0)), 1e-8)
    return np.log1p(mags / ref)


class PitchExtractor:
    def __init__(self, cfg: PitchEncoderConfig, seed: int = 0, trainable: bool = True):
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xA11))))
        self.store = ParamStore(rng, trainable=trainable)
        self.cqt_encoder = SequenceEncoder(
            self.store, "cqt_encoder", cfg.input_bins, cfg.model_dim, cfg.n_layers, cfg.n_heads)
        self.midi_encoder = SequenceEncoder(
            self.store, "midi_encoder", cfg.input_bins, cfg.model_dim, cfg.n_layers, cfg.n_heads)

    def encode_cqt(self, values: np.ndarray | Tensor) -> Tensor:
        """Frame-wise pitch embedding of a log-compressed, cropped CQT."""
        x = values if isinstance(values, Tensor) else Tensor(values)
        if x.shape[-1] != self.cfg.input_bins:
            raise ContractError(f"expected {self.cfg.input_bins} bins, got {x.shape[-1]}")
        return self.cqt_encoder(x)

    def encode_midi(self, activity: np.ndarray | Tensor) -> Tensor:
        x = activity if isinstance(activity, Tensor) else Tensor(activity)
        if x.shape[-1] != self.cfg.input_bins:
            raise ContractError(f"expected {self.cfg.input_bins} pitch columns, got {x.shape[-1]}")
        return self.midi_encoder(x)

    def save(self, path, step: int = 0) -> None:
        save_checkpoint(path, self.store.arrays(), step, {"pitch_encoder": asdict(self.cfg)})

    @classmethod
    def load(cls, path, trainable: bool = False) -> "PitchExtractor":
        arrays, _step, header = load_checkpoint(path)
        cfg = PitchEncoderConfig(**header["config"]["pitch_encoder"])
        model = cls(cfg, trainable=trainable)
        model.store.load(arrays)
        return model


def rs_loss(z_cqt, z_midi) -> Tensor:
    """Mean absolute difference between the two embeddings (scale-free in
    sequence length); zero exactly when they agree."""
    a = z_cqt if isinstance(z_cqt, Tensor) else Tensor(z_cqt)
    b = z_midi if isinstance(z_midi, Tensor) else Tensor(z_midi)
    if a.shape != b.shape:
        raise ContractError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return T.l1_loss(a, b)


def sample_training_window(clip: tuple[np.ndarray, np.ndarray], rng: np.random.Generator,
                           window_frames: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniformly random aligned crop of (cqt, roll); clips shorter than the
    window come back zero-padded with a validity mask."""
    values, roll = clip
    if values.shape[0] != roll.shape[0]:
        raise ContractError("cqt and roll frame counts differ")
    n = values.shape[0]
    if n >= window_frames:
        start = int(rng.integers(0, n - window_frames + 1))
        mask = np.ones((window_frames, 1))
        return (values[start : start + window_frames],
                roll[start : start + window_frames], mask)
    pad = window_frames - n
    mask = np.concatenate([np.ones((n, 1)), np.zeros((pad, 1))])
    return (np.pad(values, ((0, pad), (0, 0))), np.pad(roll, ((0, pad), (0, 0))), mask)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class PitchTrainConfig:
    encoder: PitchEncoderConfig = PitchEncoderConfig()
    steps: int = 2000
    batch: int = 4
    peak_lr: float = 1e-3  # desk-scale default; container types default to the 1e-4/1e-5 schedule
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.01


def prepare_clip(wav_path, mid_path, cqt_cfg: CqtConfig = CqtConfig()) -> tuple[np.ndarray, np.ndarray]:
    """WAV + SMF -> (log-compressed cropped CQT, aligned piano roll)."""
    w = load_wav(wav_path)
    if w.sample_rate != cqt_cfg.sample_rate:
        w = resample(w, cqt_cfg.sample_rate)
    cropped = crop_to_vocal_range(compute_cqt(w, cqt_cfg))
    values = log_compress(cropped)
    roll = to_piano_roll(load_smf(mid_path), n_frames=cropped.frames)
    return values, roll.activity


def _manifest_clips(manifest_path, split: str | None) -> list[tuple[str, Path, Path]]:
    root = Path(manifest_path).parent
    out = []
    for row in load_manifest(manifest_path):
        if split is not None and row["split"] != split:
            continue
        wav = root / row["path"]
        out.append((row["id"], wav, wav.with_suffix(".mid")))
    return out


def train_pitch_extractor(manifest_path, cfg: PitchTrainConfig, steps: int | None,
                          ckpt_path, log_path=None, seed: int = 0,
                          progress=None) -> Path:
    """Minimize the alignment loss over random windows of the train split;
    writes a (step, lr, loss) CSV and the checkpoint. Returns the checkpoint
    path. The CQT encoder inside the checkpoint is what downstream loads."""
    steps = cfg.steps if steps is None else steps
    entries = _manifest_clips(manifest_path, split="train")
    if not entries:
        raise ContractError(f"no train clips in manifest {manifest_path}")
    clips = [prepare_clip(wav, mid) for _id, wav, mid in entries]

    model = PitchExtractor(cfg.encoder, seed=seed)
    opt = AdamW(model.store.params, AdamWConfig(
        peak_lr=cfg.peak_lr, min_lr=cfg.peak_lr * cfg.min_lr_ratio,
        weight_decay=cfg.weight_decay, total_steps=max(steps, 1)))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xB0B))))

    rows = []
    for step in range(steps):
        T.zero_grads(model.store.params.values())
        values, rolls, masks = [], [], []
        for _ in range(cfg.batch):
            idx = int(rng.integers(len(clips)))
            v, r, m = sample_training_window(clips[idx], rng, cfg.encoder.window_frames)
            values.append(v)
            rolls.append(r)
            masks.append(m)
        z_cqt = model.encode_cqt(np.stack(values))
        z_midi = model.encode_midi(np.stack(rolls))
        loss = T.l1_loss(z_cqt, z_midi, mask=np.stack(masks))
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


def retrieval_probe(model: PitchExtractor, clips: list[tuple[np.ndarray, np.ndarray]],
                    window_frames: int | None = None) -> float:
    """Top-1 accuracy of matching each clip's CQT embedding to its own MIDI
    embedding by L1 distance, over the full candidate set."""
    window = window_frames or model.cfg.window_frames
    z_cqt, z_midi = [], []
    for values, roll in clips:
        n = min(window, values.shape[0], roll.shape[0])
        z_cqt.append(model.encode_cqt(values[:n]).data)
        z_midi.append(model.encode_midi(roll[:n]).data)
    hits = 0
    for i, zc in enumerate(z_cqt):
        dists = [np.abs(zc[: zm.shape[0]] - zm[: zc.shape[0]]).mean() for zm in z_midi]
        hits += int(np.argmin(dists) == i)
    return hits / len(clips)
