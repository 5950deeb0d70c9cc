"""Two-stage training: full-network disentanglement, then generator-only
conversion adaptation with the encoders and recognition head frozen.

Runs are deterministic under a fixed seed: parameter init is seeded through
torch, all data sampling goes through one numpy Generator whose state is
checkpointed, and the forward pass uses no dropout or batch statistics.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datasets as ds
from .dsp import MelConfig, MelSpectrogram, load_wav, mel_spectrogram
from .losses import (
    StageOneWeights,
    StageTwoWeights,
    StrengthMargins,
    category_consistency_loss,
    classification_loss,
    content_consistency_loss,
    disentanglement_loss,
    frame_similarity,
    reconstruction_loss,
    stage_one_total,
    stage_two_total,
    strength_consistency_loss,
    strength_triplet_loss,
    NonFiniteLossError,
)
from .model import (
    Checkpoint,
    ConversionModel,
    ModelConfig,
    calibrate,
    load_checkpoint,
    save_checkpoint,
)

GRAD_CLIP_NORM = 1.0
FROZEN_SUBNETS = ("content_encoder", "emotion_encoder", "recognition")


class ConfigError(ValueError):
    """Malformed or incomplete training config file."""


class TrainingAbort(RuntimeError):
    """Numerical failure (non-finite loss) during a training step."""

    def __init__(self, term: str, iteration: int):
        self.term = term
        self.iteration = iteration
        super().__init__(f"non-finite loss term '{term}' at iteration {iteration}")


class FrozenParameterError(RuntimeError):
    """A stage-2 step mutated a parameter that must stay frozen."""


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    lr: float
    batch_size: int
    iterations: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_dis: float = 0.2
    lambda_str: float = 1.0
    lambda_c: float = 0.0002
    delta1: float = 0.5
    delta2: float = 0.5
    t_fixed: int = 128
    log_every: int = 50
    checkpoint_every: int = 500
    strength_loss_form: str = "printed"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (triplets need distinct samples)")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.t_fixed < 1:
            raise ConfigError("t_fixed must be >= 1")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")
        if self.strength_loss_form not in ("printed", "hinge"):
            raise ConfigError(
                f"strength_loss_form must be 'printed' or 'hinge', got "
                f"{self.strength_loss_form!r}"
            )
        for name in ("lambda_dis", "lambda_str", "lambda_c"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def stage_one_weights(self) -> StageOneWeights:
        return StageOneWeights(lambda_dis=self.lambda_dis, lambda_str=self.lambda_str)

    @property
    def stage_two_weights(self) -> StageTwoWeights:
        return StageTwoWeights(lambda_c=self.lambda_c)

    @property
    def margins(self) -> StrengthMargins:
        return StrengthMargins(delta1=self.delta1, delta2=self.delta2)


_MODEL_KEYS = {
    "n_mels": int,
    "d_content": int,
    "d_emotion": int,
    "n_emotions": int,
    "content_downsample": int,
    "content_width": int,
    "emotion_width": int,
    "generator_width": int,
    "mel_center": float,
    "mel_scale": float,
    "parameter_count_target": int,
}
_TRAIN_KEYS = {
    "stage": int,
    "lr": float,
    "batch_size": int,
    "iterations": int,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "seed": int,
    "lambda_dis": float,
    "lambda_str": float,
    "lambda_c": float,
    "delta1": float,
    "delta2": float,
    "t_fixed": int,
    "log_every": int,
    "checkpoint_every": int,
    "strength_loss_form": str,
}


def parse_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a `section.key = value` config, requiring every known key
    exactly once and rejecting unknown ones."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()

    parsed: dict[str, dict] = {"model": {}, "train": {}}
    schemas = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS}
    for key, text in values.items():
        section, _, name = key.partition(".")
        schema = schemas.get(section)
        if schema is None or name not in schema:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        caster = schema[name]
        try:
            parsed[section][name] = caster(text) if caster is not str else text
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key!r}: {text!r}") from exc

    missing = [
        f"{section}.{name}"
        for section, schema in schemas.items()
        for name in schema
        if name not in parsed[section]
    ]
    if missing:
        raise ConfigError(f"{path}: missing config keys: {', '.join(missing)}")
    try:
        model_cfg = ModelConfig(**parsed["model"])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return model_cfg, TrainConfig(**parsed["train"])


# ---------------------------------------------------------------------------
# Data plumbing


def preload_mels(
    index: ds.CorpusIndex,
    splits: tuple[str, ...],
    mel_cfg: MelConfig,
    model_cfg: ModelConfig,
) -> dict[str, np.ndarray]:
    """id -> float32 (T, 80) standardized log-mel matrix per utterance.

    Training and the in-pipeline losses operate in the model's standardized
    mel space; only the inference wrappers convert back to raw log-mels.
    """
    cache: dict[str, np.ndarray] = {}
    for u in index.utterances:
        if u.split in splits:
            mel = mel_spectrogram(load_wav(u.audio_path), mel_cfg)
            cache[u.id] = model_cfg.normalize(mel.frames).astype(np.float32)
    return cache


def _crop(frames: np.ndarray, t_fixed: int, rng: np.random.Generator, cfg: MelConfig) -> np.ndarray:
    m = MelSpectrogram(frames=frames, config=cfg)
    return ds.fixed_crop(m, t_fixed, rng).frames.astype(np.float32)


@dataclass
class StageOneBatch:
    mels: torch.Tensor  # (B, T, 80)
    labels: torch.Tensor  # (B,)
    anchor: torch.Tensor  # (B_t, T, 80)
    positive: torch.Tensor
    negative: torch.Tensor


@dataclass
class StageTwoBatch:
    source: torch.Tensor  # (B, T, 80)
    source_labels: torch.Tensor
    reference: torch.Tensor
    reference_labels: torch.Tensor


class BatchBuilder:
    """Draws training batches from the preloaded mel cache with one rng."""

    def __init__(
        self,
        index: ds.CorpusIndex,
        mels: dict[str, np.ndarray],
        cfg: TrainConfig,
        mel_cfg: MelConfig,
        split: str = "train",
    ):
        self.index = index
        self.mels = mels
        self.cfg = cfg
        self.mel_cfg = mel_cfg
        self.split = split
        self.utterances = index.split_utterances(split)
        if not self.utterances:
            raise ds.CorpusError(f"no utterances in split {split!r}")
        self.types = ds.conversion_types()

    def _cropped(self, utt: ds.Utterance, rng: np.random.Generator) -> np.ndarray:
        return _crop(self.mels[utt.id], self.cfg.t_fixed, rng, self.mel_cfg)

    def stage_one(self, rng: np.random.Generator) -> StageOneBatch:
        picks = [
            self.utterances[int(rng.integers(len(self.utterances)))]
            for _ in range(self.cfg.batch_size)
        ]
        mels = np.stack([self._cropped(u, rng) for u in picks])
        labels = np.array([u.emotion.index for u in picks], dtype=np.int64)

        n_trip = max(1, self.cfg.batch_size // 4)
        triplets = [ds.sample_triplet(self.index, rng, self.split) for _ in range(n_trip)]
        anchor = np.stack([self._cropped(t.anchor, rng) for t in triplets])
        positive = np.stack([self._cropped(t.positive, rng) for t in triplets])
        negative = np.stack([self._cropped(t.negative, rng) for t in triplets])
        return StageOneBatch(
            mels=torch.from_numpy(mels),
            labels=torch.from_numpy(labels),
            anchor=torch.from_numpy(anchor),
            positive=torch.from_numpy(positive),
            negative=torch.from_numpy(negative),
        )

    def stage_two(self, rng: np.random.Generator) -> StageTwoBatch:
        sources, src_labels, references, ref_labels = [], [], [], []
        for _ in range(self.cfg.batch_size):
            src_emo, ref_emo = self.types[int(rng.integers(len(self.types)))]
            speaker = self.index.speakers[int(rng.integers(len(self.index.speakers)))]
            src_cell = self.index.cell(speaker, src_emo, self.split)
            ref_cell = self.index.cell(speaker, ref_emo, self.split)
            if not src_cell or not ref_cell:
                raise ds.CorpusError(
                    f"empty cell for speaker={speaker} split={self.split}"
                )
            src = src_cell[int(rng.integers(len(src_cell)))]
            ref = ref_cell[int(rng.integers(len(ref_cell)))]
            sources.append(self._cropped(src, rng))
            references.append(self._cropped(ref, rng))
            src_labels.append(src.emotion.index)
            ref_labels.append(ref.emotion.index)
        return StageTwoBatch(
            source=torch.from_numpy(np.stack(sources)),
            source_labels=torch.tensor(src_labels, dtype=torch.int64),
            reference=torch.from_numpy(np.stack(references)),
            reference_labels=torch.tensor(ref_labels, dtype=torch.int64),
        )


# ---------------------------------------------------------------------------
# Freezing and checksums


def freeze_for_stage_two(model: ConversionModel) -> None:
    for name in FROZEN_SUBNETS:
        for p in getattr(model, name).parameters():
            p.requires_grad_(False)


def frozen_checksums(model: ConversionModel) -> dict[str, str]:
    """SHA-256 over the raw bytes of each frozen subnet's parameters."""
    sums = {}
    for name in FROZEN_SUBNETS:
        digest = hashlib.sha256()
        for p in getattr(model, name).parameters():
            digest.update(p.detach().numpy().tobytes())
        sums[name] = digest.hexdigest()
    return sums


def _one_hot(labels: torch.Tensor, k: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels, num_classes=k).to(torch.float32)


# ---------------------------------------------------------------------------
# Train state


@dataclass
class TrainState:
    model: ConversionModel
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    iteration: int = 0
    elapsed_s: float = 0.0
    running: dict = field(default_factory=dict)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.model.named_parameters() if p.requires_grad]


def _make_optimizer(model: ConversionModel, cfg: TrainConfig) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps
    )


def init_state(
    model_cfg: ModelConfig, cfg: TrainConfig, init_from: Checkpoint | None = None
) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = ConversionModel(model_cfg)
    if init_from is not None:
        if init_from.model_config != model_cfg:
            raise ConfigError(
                "initial checkpoint's model config does not match the run config"
            )
        model.load_state_dict(init_from.build_model().state_dict())
    if cfg.stage == 2:
        if init_from is None:
            raise ConfigError("stage 2 requires a stage-1 checkpoint to start from")
        freeze_for_stage_two(model)
    model.train()
    return TrainState(
        model=model,
        optimizer=_make_optimizer(model, cfg),
        rng=np.random.default_rng(cfg.seed),
    )


def save_train_state(path, state: TrainState, model_cfg: ModelConfig, cfg: TrainConfig) -> None:
    extra: dict[str, np.ndarray] = {}
    names = state.trainable_names()
    params = [p for p in state.model.parameters() if p.requires_grad]
    step_count = 0
    for name, p in zip(names, params):
        opt_state = state.optimizer.state.get(p, {})
        if opt_state:
            extra[f"optim.exp_avg.{name}"] = opt_state["exp_avg"].numpy()
            extra[f"optim.exp_avg_sq.{name}"] = opt_state["exp_avg_sq"].numpy()
            step_count = int(opt_state["step"])
    meta = {
        "kind": "train_state",
        "iteration": state.iteration,
        "elapsed_s": state.elapsed_s,
        "optimizer_step_count": step_count,
        "rng_state": state.rng.bit_generator.state,
        "running": state.running,
    }
    save_checkpoint(
        path,
        model=state.model,
        model_config=model_cfg,
        train_config=asdict(cfg),
        extra_arrays=extra,
        meta=meta,
    )


def load_train_state(path, model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "train_state":
        raise ConfigError(f"{path} is not a resumable training checkpoint")
    if ckpt.model_config != model_cfg:
        raise ConfigError("checkpoint model config does not match the run config")
    if ckpt.train_config != asdict(cfg):
        raise ConfigError("checkpoint training config does not match the run config")
    model = ckpt.build_model()
    if cfg.stage == 2:
        freeze_for_stage_two(model)
    model.train()
    optimizer = _make_optimizer(model, cfg)
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    params = [p for p in model.parameters() if p.requires_grad]
    step_count = ckpt.meta["optimizer_step_count"]
    if step_count:
        sd = optimizer.state_dict()
        sd["state"] = {
            i: {
                "step": torch.tensor(float(step_count)),
                "exp_avg": torch.from_numpy(ckpt.arrays[f"optim.exp_avg.{name}"].copy()),
                "exp_avg_sq": torch.from_numpy(
                    ckpt.arrays[f"optim.exp_avg_sq.{name}"].copy()
                ),
            }
            for i, name in enumerate(names)
        }
        optimizer.load_state_dict(sd)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.meta["rng_state"]
    return TrainState(
        model=model,
        optimizer=optimizer,
        rng=rng,
        iteration=int(ckpt.meta["iteration"]),
        elapsed_s=float(ckpt.meta["elapsed_s"]),
        running=dict(ckpt.meta.get("running", {})),
    )


# ---------------------------------------------------------------------------
# Steps


def _upsampled_content(model: ConversionModel, c: torch.Tensor, out_frames: int) -> torch.Tensor:
    d = model.cfg.content_downsample
    if d > 1:
        c = torch.repeat_interleave(c, d, dim=1)
        if c.shape[1] < out_frames:
            c = torch.cat([c, c[:, -1:, :].expand(-1, out_frames - c.shape[1], -1)], dim=1)
    return c[:, :out_frames, :]


def stage_one_step(state: TrainState, batch: StageOneBatch, cfg: TrainConfig) -> dict[str, float]:
    """One optimizer update on all parameters; returns the loss breakdown."""
    model = state.model
    x, labels = batch.mels, batch.labels
    e = model.emotion_encoder(x)
    c = model.content_encoder(x)
    q, _ = model.recognition(e)

    cue = model.cue_for_class(e, labels)
    sim = frame_similarity(e, _upsampled_content(model, c, x.shape[1]))
    l_dis = disentanglement_loss(cue, sim)

    e_star = calibrate(e, cue)
    x_hat = model.generator(c, e_star, out_frames=x.shape[1])
    l_rec = reconstruction_loss(x_hat, x)
    l_cls = classification_loss(q, _one_hot(labels, model.cfg.n_emotions))

    n_trip = batch.anchor.shape[0]
    stacked = torch.cat([batch.anchor, batch.positive, batch.negative])
    _, s_all = model.recognition(model.emotion_encoder(stacked))
    l_str = strength_triplet_loss(
        s_all[:n_trip],
        s_all[n_trip : 2 * n_trip],
        s_all[2 * n_trip :],
        margins=cfg.margins,
        form=cfg.strength_loss_form,
    )

    try:
        # totals in float64 so the logged breakdown recombines exactly
        total = stage_one_total(
            l_rec.double(), l_cls.double(), l_dis.double(), l_str.double(),
            cfg.stage_one_weights,
        )
    except NonFiniteLossError as exc:
        raise TrainingAbort(exc.term, state.iteration) from exc

    state.optimizer.zero_grad()
    total.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for p in model.parameters() if p.requires_grad], GRAD_CLIP_NORM
    )
    state.optimizer.step()
    state.iteration += 1
    return {
        "rec": l_rec.item(),
        "cls": l_cls.item(),
        "dis": l_dis.item(),
        "str": l_str.item(),
        "total": total.item(),
    }


def stage_two_step(state: TrainState, batch: StageTwoBatch, cfg: TrainConfig) -> dict[str, float]:
    """One generator-only update; encoders and recognition stay frozen
    (verified by checksum after the step)."""
    model = state.model
    before = frozen_checksums(model)
    x, y = batch.source, batch.reference

    c_x = model.content_encoder(x)
    e_y = model.emotion_encoder(y)
    cue_y = model.cue_for_class(e_y, batch.reference_labels)
    z = model.generator(c_x, calibrate(e_y, cue_y), out_frames=x.shape[1])

    c_z = model.content_encoder(z)
    l_cc = content_consistency_loss(c_z, c_x)

    e_z = model.emotion_encoder(z)
    q_z, s_z = model.recognition(e_z)
    q_y, s_y = model.recognition(e_y)
    l_ecc = category_consistency_loss(q_y.detach(), q_z)
    l_esc = strength_consistency_loss(s_z, s_y.detach())

    # self-reconstruction keeps the generator anchored; reuses c_x
    e_x = model.emotion_encoder(x)
    cue_x = model.cue_for_class(e_x, batch.source_labels)
    x_hat = model.generator(c_x, calibrate(e_x, cue_x), out_frames=x.shape[1])
    l_rec = reconstruction_loss(x_hat, x)

    try:
        total = stage_two_total(
            l_rec.double(), l_cc.double(), l_ecc.double(), l_esc.double(),
            cfg.stage_two_weights,
        )
    except NonFiniteLossError as exc:
        raise TrainingAbort(exc.term, state.iteration) from exc

    state.optimizer.zero_grad()
    total.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for p in model.parameters() if p.requires_grad], GRAD_CLIP_NORM
    )
    state.optimizer.step()
    state.iteration += 1

    after = frozen_checksums(model)
    if after != before:
        changed = sorted(k for k in after if after[k] != before[k])
        raise FrozenParameterError(
            f"stage-2 step mutated frozen parameters: {', '.join(changed)}"
        )
    return {
        "rec": l_rec.item(),
        "cc": l_cc.item(),
        "ecc": l_ecc.item(),
        "esc": l_esc.item(),
        "total": total.item(),
    }


# ---------------------------------------------------------------------------
# Held-out consistency probe (stage 2 trend tracking)


def heldout_category_consistency(
    model: ConversionModel,
    index: ds.CorpusIndex,
    mels: dict[str, np.ndarray],
    pairs: list[ds.PairSample],
) -> float:
    """Mean reference-vs-converted class KL over a fixed pair list."""
    total = 0.0
    with torch.no_grad():
        for pair in pairs:
            x = torch.from_numpy(mels[pair.source.id]).unsqueeze(0)
            y = torch.from_numpy(mels[pair.reference.id]).unsqueeze(0)
            z = model.convert_batch(
                x, y, torch.tensor([pair.reference.emotion.index])
            )
            q_z, _ = model.recognition(model.emotion_encoder(z))
            q_y, _ = model.recognition(model.emotion_encoder(y))
            total += float(category_consistency_loss(q_y, q_z))
    return total / max(1, len(pairs))


# ---------------------------------------------------------------------------
# Full run


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_path: Path
    iterations: int


def _metrics_line(iteration: int, terms: dict[str, float], wall_s: float) -> str:
    cols = [str(iteration)]
    for name, value in terms.items():
        cols.append(name)
        cols.append(f"{value:.6f}")
    cols.append("wall_s")
    cols.append(f"{wall_s:.3f}")
    return "\t".join(cols)


def read_metrics(path) -> list[dict[str, float]]:
    """Parse a metrics log back into one dict per logged interval."""
    rows = []
    for line in Path(path).read_text().splitlines():
        cols = line.split("\t")
        row: dict[str, float] = {"iteration": int(cols[0])}
        for name, value in zip(cols[1::2], cols[2::2]):
            row[name] = float(value)
        rows.append(row)
    return rows


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    data_root,
    out_dir,
    init_from=None,
    resume=None,
    mel_cfg: MelConfig | None = None,
    index: ds.CorpusIndex | None = None,
) -> TrainResult:
    """Run one training stage end to end.

    Stage 2 must name a stage-1 checkpoint via `init_from`. `resume` restarts
    an interrupted run from a saved train state and reproduces the remaining
    metrics log exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mel_cfg = mel_cfg or MelConfig()
    index = index or ds.index_corpus(data_root)
    mels = preload_mels(index, ("train", "val"), mel_cfg, model_cfg)
    builder = BatchBuilder(index, mels, cfg, mel_cfg)

    if resume is not None:
        state = load_train_state(resume, model_cfg, cfg)
    else:
        init_ckpt = load_checkpoint(init_from) if init_from is not None else None
        state = init_state(model_cfg, cfg, init_ckpt)

    heldout_pairs: list[ds.PairSample] = []
    if cfg.stage == 2:
        heldout_pairs = ds.make_conversion_pairs(index, (0, 1, 0), seed=cfg.seed)["val"]

    metrics_path = out_dir / f"metrics_stage{cfg.stage}.tsv"
    if resume is None and metrics_path.exists():
        metrics_path.unlink()

    accum: dict[str, float] = dict(state.running)
    start = time.monotonic() - state.elapsed_s
    with open(metrics_path, "a") as log:
        while state.iteration < cfg.iterations:
            if cfg.stage == 1:
                breakdown = stage_one_step(state, builder.stage_one(state.rng), cfg)
            else:
                breakdown = stage_two_step(state, builder.stage_two(state.rng), cfg)
            for name, value in breakdown.items():
                accum[name] = accum.get(name, 0.0) + value
            accum["_count"] = accum.get("_count", 0.0) + 1.0

            if state.iteration % cfg.log_every == 0 or state.iteration == cfg.iterations:
                n = accum.pop("_count", 1.0)
                terms = {name: value / n for name, value in accum.items()}
                if cfg.stage == 2 and heldout_pairs:
                    terms["val_ecc"] = heldout_category_consistency(
                        state.model, index, mels, heldout_pairs
                    )
                state.elapsed_s = time.monotonic() - start
                log.write(_metrics_line(state.iteration, terms, state.elapsed_s) + "\n")
                log.flush()
                accum = {}
            state.running = dict(accum)

            if state.iteration % cfg.checkpoint_every == 0 and state.iteration < cfg.iterations:
                state.elapsed_s = time.monotonic() - start
                save_train_state(
                    out_dir / f"state_{state.iteration:06d}.ckpt", state, model_cfg, cfg
                )

    final_path = out_dir / f"final_stage{cfg.stage}.ckpt"
    state.elapsed_s = time.monotonic() - start
    save_train_state(final_path, state, model_cfg, cfg)
    return TrainResult(
        final_checkpoint=final_path, metrics_path=metrics_path, iterations=state.iteration
    )
