"""Networks and attention machinery for instance-level emotion conversion.

Four networks: a content encoder, an emotion encoder, a two-branch
recognition head (emotion class + strength) and a mel generator. The
class-activation cue re-weights emotion features per frame; its weighted
temporal mean conditions the generator.

All normalization is GroupNorm and there is no dropout, so a forward pass
is independent of batch composition and identical in train/eval mode.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dsp import MelSpectrogram

CHECKPOINT_MAGIC = b"AINNCKPT1"


class ShapeMismatchError(ValueError):
    """Input shape incompatible with the model configuration."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint archive."""


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    d_content: int = 64
    d_emotion: int = 64
    n_emotions: int = 5
    content_downsample: int = 1
    content_width: int = 64
    emotion_width: int = 64
    generator_width: int = 128
    # global affine log-mel standardization; networks and losses operate in
    # the standardized space, inference wrappers convert back
    mel_center: float = -6.0
    mel_scale: float = 7.0
    parameter_count_target: int = 0  # informational only

    def __post_init__(self):
        if self.n_mels != 80:
            raise ValueError("n_mels is fixed at 80")
        if self.n_emotions != 5:
            raise ValueError("the corpus defines exactly 5 emotion categories")
        if self.content_downsample < 1:
            raise ValueError("content_downsample must be >= 1")
        if self.mel_scale <= 0:
            raise ValueError("mel_scale must be positive")
        for name in ("d_content", "d_emotion", "content_width", "emotion_width", "generator_width"):
            if getattr(self, name) % 8 != 0:
                raise ValueError(f"{name} must be a multiple of 8 (GroupNorm groups)")

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mel_center) / self.mel_scale

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        return frames * self.mel_scale + self.mel_center


def _conv_block(in_ch: int, out_ch: int, kernel: int = 5, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv1d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2),
        nn.GroupNorm(8, out_ch),
        nn.ReLU(),
    )


class ContentEncoder(nn.Module):
    """Mel (B, T, 80) -> content feature (B, T_c, d_content)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.content_width
        self.convs = nn.Sequential(
            _conv_block(cfg.n_mels, w),
            _conv_block(w, w),
            _conv_block(w, w, stride=cfg.content_downsample),
        )
        self.rnn = nn.LSTM(w, cfg.d_content // 2, batch_first=True, bidirectional=True)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.shape[1] < self.cfg.content_downsample:
            raise ShapeMismatchError(
                f"input of {mel.shape[1]} frames is too short for downsample "
                f"{self.cfg.content_downsample}"
            )
        h = self.convs(mel.transpose(1, 2)).transpose(1, 2)
        out, _ = self.rnn(h)
        return out


class EmotionEncoder(nn.Module):
    """Mel (B, T, 80) -> frame-aligned emotion feature (B, T, d_emotion)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.emotion_width
        blocks = [_conv_block(cfg.n_mels, w)]
        blocks += [_conv_block(w, w) for _ in range(5)]
        self.convs = nn.Sequential(*blocks)
        self.rnn = nn.LSTM(w, cfg.d_emotion, batch_first=True)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.convs(mel.transpose(1, 2)).transpose(1, 2)
        out, _ = self.rnn(h)
        return out


class RecognitionNetwork(nn.Module):
    """Frame-wise 1x1 head: K class logits + 1 strength logit per frame.

    Temporal mean pooling happens before the softmax/sigmoid so the pooled
    logits stay linear in the features. Biases start at zero, so an all-zero
    feature maps to a uniform class posterior and strength 0.5.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_emotions = cfg.n_emotions
        self.head = nn.Conv1d(cfg.d_emotion, cfg.n_emotions + 1, kernel_size=1)
        nn.init.zeros_(self.head.bias)

    @property
    def class_weights(self) -> torch.Tensor:
        """(K, d_emotion) classifier weight rows, used by the emotional cue."""
        return self.head.weight[: self.n_emotions, :, 0]

    def forward(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.head(e.transpose(1, 2)).transpose(1, 2)  # (B, T, K+1)
        pooled = logits.mean(dim=1)
        q = torch.softmax(pooled[:, : self.n_emotions], dim=-1)
        s = torch.sigmoid(pooled[:, self.n_emotions])
        return q, s


class Generator(nn.Module):
    """(content frames, calibrated emotion vector) -> mel (B, T, 80)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.generator_width
        self.convs = nn.Sequential(
            _conv_block(cfg.d_content + cfg.d_emotion, w),
            _conv_block(w, w),
            _conv_block(w, w),
        )
        self.rnn = nn.LSTM(w, w // 2, batch_first=True, bidirectional=True)
        self.out = nn.Linear(w, cfg.n_mels)

    def forward(self, c: torch.Tensor, e_star: torch.Tensor, out_frames: int) -> torch.Tensor:
        if c.shape[-1] != self.cfg.d_content or e_star.shape[-1] != self.cfg.d_emotion:
            raise ShapeMismatchError(
                f"generator got content width {c.shape[-1]} / emotion width "
                f"{e_star.shape[-1]}, config wants {self.cfg.d_content}/{self.cfg.d_emotion}"
            )
        if self.cfg.content_downsample > 1:
            c = torch.repeat_interleave(c, self.cfg.content_downsample, dim=1)
        if c.shape[1] < out_frames:  # downsampling may round length off
            pad = c[:, -1:, :].expand(-1, out_frames - c.shape[1], -1)
            c = torch.cat([c, pad], dim=1)
        c = c[:, :out_frames, :]
        cond = e_star.unsqueeze(1).expand(-1, out_frames, -1)
        h = torch.cat([c, cond], dim=-1)
        h = self.convs(h.transpose(1, 2)).transpose(1, 2)
        h, _ = self.rnn(h)
        return self.out(h)


def emotional_cue(e: torch.Tensor, theta_class: torch.Tensor) -> torch.Tensor:
    """Per-frame salience: ReLU of the class weight applied to each frame,
    max-normalized to [0, 1] over time; stays all-zero when no frame responds.

    e: (..., T, D); theta_class: (..., D) broadcast over frames.
    """
    raw = torch.relu((e * theta_class.unsqueeze(-2)).sum(dim=-1))
    peak = raw.max(dim=-1, keepdim=True).values
    return torch.where(peak > 0, raw / peak.clamp_min(1e-38), raw)


def calibrate(e: torch.Tensor, cue: torch.Tensor) -> torch.Tensor:
    """Cue-weighted temporal mean of the emotion feature: (1/T) sum_t M_t e_t."""
    if e.shape[-2] != cue.shape[-1]:
        raise ShapeMismatchError(
            f"cue length {cue.shape[-1]} does not match {e.shape[-2]} feature frames"
        )
    return (e * cue.unsqueeze(-1)).mean(dim=-2)


class ConversionModel(nn.Module):
    """The four networks plus the composed reconstruction/conversion paths."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.content_encoder = ContentEncoder(cfg)
        self.emotion_encoder = EmotionEncoder(cfg)
        self.recognition = RecognitionNetwork(cfg)
        self.generator = Generator(cfg)

    def cue_for_class(self, e: torch.Tensor, class_index: torch.Tensor) -> torch.Tensor:
        """Emotional cue of (B, T, D) features for per-sample class indices."""
        theta = self.recognition.class_weights[class_index]
        return emotional_cue(e, theta)

    def convert_batch(
        self, x: torch.Tensor, y: torch.Tensor, ref_class: torch.Tensor
    ) -> torch.Tensor:
        """z = G(content(x), calibrated emotion(y)); the reconstruction path
        is exactly this call with y = x."""
        c = self.content_encoder(x)
        e = self.emotion_encoder(y)
        cue = self.cue_for_class(e, ref_class)
        e_star = calibrate(e, cue)
        return self.generator(c, e_star, out_frames=x.shape[1])

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# Single-utterance inference wrappers (numpy in, numpy out)


@dataclass(frozen=True)
class RecognitionOutput:
    class_probs: np.ndarray  # (K,), sums to 1
    strength: float  # in [0, 1]
    class_weights: np.ndarray  # (K, d_emotion), read-only copy


def _to_tensor(m: MelSpectrogram, cfg: ModelConfig) -> torch.Tensor:
    if m.frames.shape[1] != cfg.n_mels:
        raise ShapeMismatchError(
            f"mel has {m.frames.shape[1]} bins, model expects {cfg.n_mels}"
        )
    return torch.from_numpy(cfg.normalize(m.frames).astype(np.float32)).unsqueeze(0)


def recognize(model: ConversionModel, m: MelSpectrogram) -> RecognitionOutput:
    with torch.no_grad():
        e = model.emotion_encoder(_to_tensor(m, model.cfg))
        q, s = model.recognition(e)
    return RecognitionOutput(
        class_probs=q[0].numpy().astype(np.float64),
        strength=float(s[0]),
        class_weights=model.recognition.class_weights.detach().numpy().copy(),
    )


def class_for_cue(model: ConversionModel, m: MelSpectrogram, ground_truth: int | None = None) -> int:
    """Class index driving the cue: ground truth when known (training),
    otherwise the recognizer's argmax (ties break to the lowest index)."""
    if ground_truth is not None:
        return int(ground_truth)
    q = recognize(model, m).class_probs
    return int(np.argmax(q))


def convert(
    model: ConversionModel,
    source: MelSpectrogram,
    reference: MelSpectrogram,
    reference_class: int | None = None,
) -> MelSpectrogram:
    """Render the source content under the reference's emotion."""
    ref_class = class_for_cue(model, reference, reference_class)
    with torch.no_grad():
        z = model.convert_batch(
            _to_tensor(source, model.cfg),
            _to_tensor(reference, model.cfg),
            torch.tensor([ref_class]),
        )
    frames = model.cfg.denormalize(z[0].numpy().astype(np.float64))
    frames = np.maximum(frames, np.log(source.config.log_floor))
    return MelSpectrogram(frames=frames, config=source.config)


def reconstruct(model: ConversionModel, m: MelSpectrogram, class_index: int) -> MelSpectrogram:
    """Auto-encoding path; identical code path to convert(m, m)."""
    return convert(model, m, m, reference_class=class_index)


def cue_for_mel(
    model: ConversionModel, m: MelSpectrogram, class_index: int | None = None
) -> np.ndarray:
    """Length-T emotional cue of an utterance, for plotting and probes."""
    idx = class_for_cue(model, m, class_index)
    with torch.no_grad():
        e = model.emotion_encoder(_to_tensor(m, model.cfg))
        cue = model.cue_for_class(e, torch.tensor([idx]))
    return cue[0].numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Checkpoint archive: magic, JSON header, little-endian f32 payload


def _config_dict(cfg) -> dict:
    return asdict(cfg) if cfg is not None else None


def save_checkpoint(
    path,
    model: ConversionModel | None = None,
    model_config: ModelConfig | None = None,
    train_config: dict | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """Write a named-array archive with embedded configs.

    Layout: 9-byte magic, uint32 little-endian header length, UTF-8 JSON
    header (configs, array manifest, metadata), then each array as row-major
    little-endian float32 in manifest order.
    """
    arrays: dict[str, np.ndarray] = {}
    if model is not None:
        model_config = model_config or model.cfg
        for name, tensor in model.state_dict().items():
            arrays[name] = tensor.detach().cpu().numpy().astype("<f4")
    for name, arr in (extra_arrays or {}).items():
        arrays[name] = np.asarray(arr, dtype=np.float32).astype("<f4")

    manifest = [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()]
    header = {
        "model_config": _config_dict(model_config),
        "train_config": train_config,
        "arrays": manifest,
        "meta": meta or {},
    }
    blob = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for item in manifest:
        buf.write(arrays[item["name"]].tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    model_config: ModelConfig | None
    train_config: dict | None
    arrays: dict[str, np.ndarray]
    meta: dict

    def build_model(self) -> ConversionModel:
        if self.model_config is None:
            raise CheckpointError("checkpoint carries no model config")
        model = ConversionModel(self.model_config)
        state = {}
        for name, param in model.state_dict().items():
            if name not in self.arrays:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            arr = self.arrays[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"parameter {name!r} has shape {tuple(arr.shape)}, "
                    f"model wants {tuple(param.shape)}"
                )
            state[name] = torch.from_numpy(arr.copy())
        model.load_state_dict(state)
        model.eval()
        return model


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        arrays[item["name"]] = arr.copy()
        off += count * 4
    model_config = (
        ModelConfig(**header["model_config"]) if header.get("model_config") else None
    )
    return Checkpoint(
        model_config=model_config,
        train_config=header.get("train_config"),
        arrays=arrays,
        meta=header.get("meta", {}),
    )
