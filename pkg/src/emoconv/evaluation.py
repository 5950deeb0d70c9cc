"""Objective evaluation: mel-cepstral distortion, emotion-classification
accuracy of converted speech under an independent judge classifier,
strength RMSE against the frozen stage-1 strength head, linear
disentanglement probes, and intensity-ranking statistics.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from scipy.stats import binomtest
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from torch import nn

from . import datasets as ds
from .dsp import MelConfig, MelSpectrogram, dtw_align, load_wav, mel_cepstrum, mel_spectrogram
from .model import (
    ConversionModel,
    ModelConfig,
    convert,
    load_checkpoint,
    recognize,
    save_checkpoint,
)
from .training import preload_mels

MCD_ORDER = 13
MCD_CONSTANT = 10.0 / math.log(10.0) * math.sqrt(2.0)


class EvaluationError(ValueError):
    pass


def worker_count() -> int:
    """Parallelism cap honoring the AINN_NUM_WORKERS environment variable."""
    cap = os.environ.get("AINN_NUM_WORKERS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


# ---------------------------------------------------------------------------
# MCD


def mcd(converted: MelSpectrogram, target: MelSpectrogram, order: int = MCD_ORDER) -> float:
    """Mel-cepstral distortion in dB after DTW alignment.

    (10 / ln 10) * sqrt(2) * mean over aligned frame pairs of the Euclidean
    distance between order-13 cepstra (c0 excluded).
    """
    ca = mel_cepstrum(converted, order)
    cb = mel_cepstrum(target, order)
    path = dtw_align(ca, cb)
    dists = [np.linalg.norm(ca.frames[i] - cb.frames[j]) for i, j in path]
    return MCD_CONSTANT * float(np.mean(dists))


# ---------------------------------------------------------------------------
# Judge classifier (independent of the conversion model)


@dataclass(frozen=True)
class JudgeConfig:
    n_mels: int = 80
    width: int = 48
    n_emotions: int = 5
    mel_center: float = -6.0
    mel_scale: float = 7.0


class JudgeClassifier(nn.Module):
    """Small conv-GRU emotion classifier used as the evaluation judge.

    Architecture is fixed so reported accuracies are reproducible: two
    strided conv blocks, a GRU, temporal mean pooling, one linear layer.
    """

    def __init__(self, cfg: JudgeConfig = JudgeConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.convs = nn.Sequential(
            nn.Conv1d(cfg.n_mels, w, 5, stride=2, padding=2),
            nn.GroupNorm(8, w),
            nn.ReLU(),
            nn.Conv1d(w, w, 5, stride=2, padding=2),
            nn.GroupNorm(8, w),
            nn.ReLU(),
        )
        self.rnn = nn.GRU(w, w, batch_first=True)
        self.out = nn.Linear(w, cfg.n_emotions)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.convs(mel.transpose(1, 2)).transpose(1, 2)
        h, _ = self.rnn(h)
        return self.out(h.mean(dim=1))

    def predict(self, m: MelSpectrogram) -> int:
        scaled = (m.frames - self.cfg.mel_center) / self.cfg.mel_scale
        with torch.no_grad():
            logits = self(torch.from_numpy(scaled.astype(np.float32)).unsqueeze(0))
        return int(np.argmax(logits[0].numpy()))


def train_judge(
    index: ds.CorpusIndex,
    mel_cfg: MelConfig | None = None,
    seed: int = 90210,
    iterations: int = 500,
    batch_size: int = 16,
    lr: float = 1e-3,
    t_fixed: int = 128,
) -> JudgeClassifier:
    """Train the judge on the train split; a separate seed and run keep it
    independent of the conversion model it scores."""
    mel_cfg = mel_cfg or MelConfig()
    torch.manual_seed(seed)
    judge = JudgeClassifier()
    rng = np.random.default_rng(seed)
    scaling = ModelConfig(mel_center=judge.cfg.mel_center, mel_scale=judge.cfg.mel_scale)
    mels = preload_mels(index, ("train",), mel_cfg, scaling)
    utts = index.split_utterances("train")
    opt = torch.optim.Adam(judge.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    for _ in range(iterations):
        picks = [utts[int(rng.integers(len(utts)))] for _ in range(batch_size)]
        batch = np.stack(
            [
                ds.fixed_crop(
                    MelSpectrogram(frames=mels[u.id], config=mel_cfg), t_fixed, rng
                ).frames.astype(np.float32)
                for u in picks
            ]
        )
        labels = torch.tensor([u.emotion.index for u in picks], dtype=torch.int64)
        logits = judge(torch.from_numpy(batch))
        loss = ce(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    judge.eval()
    return judge


def judge_accuracy(
    judge: JudgeClassifier, index: ds.CorpusIndex, split: str, mel_cfg: MelConfig | None = None
) -> float:
    """Accuracy on real utterances of a split; the sanity gate before the
    judge scores converted speech."""
    mel_cfg = mel_cfg or MelConfig()
    utts = index.split_utterances(split)
    hits = 0
    for u in utts:
        m = mel_spectrogram(load_wav(u.audio_path), mel_cfg)
        hits += judge.predict(m) == u.emotion.index
    return hits / len(utts)


def save_judge(path, judge: JudgeClassifier) -> None:
    arrays = {n: t.detach().numpy() for n, t in judge.state_dict().items()}
    save_checkpoint(path, extra_arrays=arrays, meta={"kind": "judge"})


def load_judge(path) -> JudgeClassifier:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "judge":
        raise EvaluationError(f"{path} is not a judge checkpoint")
    judge = JudgeClassifier()
    judge.load_state_dict(
        {n: torch.from_numpy(ckpt.arrays[n].copy()) for n in ckpt.arrays}
    )
    judge.eval()
    return judge


# ---------------------------------------------------------------------------
# Metrics over converted sets


def acc_cls(
    converted: list[tuple[MelSpectrogram, int]], judge: JudgeClassifier
) -> float:
    """Fraction of converted mels the judge assigns to the target emotion."""
    if not converted:
        raise EvaluationError("acc_cls needs at least one converted sample")
    hits = sum(judge.predict(m) == target for m, target in converted)
    return hits / len(converted)


class FrozenStrengthHead:
    """Strength scorer bound to a stage-1 checkpoint, never a live model."""

    def __init__(self, stage1_checkpoint_path):
        ckpt = load_checkpoint(stage1_checkpoint_path)
        if ckpt.model_config is None:
            raise EvaluationError("stage-1 checkpoint carries no model config")
        self.model = ckpt.build_model()

    def strength(self, m: MelSpectrogram) -> float:
        return recognize(self.model, m).strength


def rmse_str(
    converted_and_reference: list[tuple[MelSpectrogram, MelSpectrogram]],
    stage1_checkpoint_path,
) -> float:
    """Root-mean-square strength gap between converted and reference mels,
    scored by the frozen stage-1 strength head."""
    if not converted_and_reference:
        raise EvaluationError("rmse_str needs at least one pair")
    head = FrozenStrengthHead(stage1_checkpoint_path)
    gaps = [
        head.strength(z) - head.strength(y) for z, y in converted_and_reference
    ]
    return float(np.sqrt(np.mean(np.square(gaps))))


# ---------------------------------------------------------------------------
# Disentanglement probe


def _pooled_features(
    model: ConversionModel, mels: dict[str, np.ndarray], utts: list[ds.Utterance]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    content, emotion, labels = [], [], []
    with torch.no_grad():
        for u in utts:
            x = torch.from_numpy(mels[u.id]).unsqueeze(0)
            content.append(model.content_encoder(x)[0].mean(dim=0).numpy())
            emotion.append(model.emotion_encoder(x)[0].mean(dim=0).numpy())
            labels.append(u.emotion.index)
    return np.stack(content), np.stack(emotion), np.array(labels)


def probe_disentanglement(
    index: ds.CorpusIndex,
    model: ConversionModel,
    mel_cfg: MelConfig | None = None,
    seed: int = 0,
) -> tuple[float, float]:
    """Linear emotion probes on mean-pooled content and emotion features.

    Each probe is fit on train-split source speech and scored on the test
    split; good disentanglement shows low content-probe accuracy with high
    emotion-probe accuracy.
    """
    mel_cfg = mel_cfg or MelConfig()
    mels = preload_mels(index, ("train", "test"), mel_cfg, model.cfg)
    c_train, e_train, y_train = _pooled_features(
        model, mels, index.split_utterances("train")
    )
    c_test, e_test, y_test = _pooled_features(model, mels, index.split_utterances("test"))

    def fit_score(train_x, test_x) -> float:
        probe = make_pipeline(
            StandardScaler(),
            LogisticRegression(max_iter=2000, random_state=seed),
        )
        probe.fit(train_x, y_train)
        return float(probe.score(test_x, y_test))

    return fit_score(c_train, c_test), fit_score(e_train, e_test)


# ---------------------------------------------------------------------------
# Strength preference (intensity ranking)


@dataclass(frozen=True)
class PreferenceResult:
    accuracy: float
    n_pairs: int
    p_value: float


def intensity_pairs(index: ds.CorpusIndex) -> list[tuple[ds.Utterance, ds.Utterance]]:
    """(weaker, stronger) same-speaker same-emotion pairs with a known
    intensity order; equal-intensity pairs are excluded by construction."""
    pairs = []
    for speaker in index.speakers:
        for emotion in ds.EMOTIONS:
            if emotion == ds.NEUTRAL:
                continue
            cell = [
                u
                for split in ds.SPLITS
                for u in index.cell(speaker, emotion, split)
            ]
            annotated = []
            for u in cell:
                meta = ds.toy_sentence_and_level(u.id)
                if meta is not None:
                    annotated.append((u, meta[1]))
            for a, la in annotated:
                for b, lb in annotated:
                    if la < lb:
                        pairs.append((a, b))
    return pairs


def strength_preference(
    index: ds.CorpusIndex,
    stage1_checkpoint_path,
    mel_cfg: MelConfig | None = None,
    pairs: list[tuple[ds.Utterance, ds.Utterance]] | None = None,
) -> PreferenceResult:
    """How often the frozen strength head ranks the generator-stronger
    utterance of a known-intensity pair higher."""
    mel_cfg = mel_cfg or MelConfig()
    head = FrozenStrengthHead(stage1_checkpoint_path)
    pairs = intensity_pairs(index) if pairs is None else pairs
    if not pairs:
        raise EvaluationError("corpus provides no known-intensity pairs")
    scores: dict[str, float] = {}

    def strength_of(u: ds.Utterance) -> float:
        if u.id not in scores:
            scores[u.id] = head.strength(mel_spectrogram(load_wav(u.audio_path), mel_cfg))
        return scores[u.id]

    hits = sum(strength_of(strong) > strength_of(weak) for weak, strong in pairs)
    test = binomtest(hits, len(pairs), 0.5, alternative="greater")
    return PreferenceResult(
        accuracy=hits / len(pairs), n_pairs=len(pairs), p_value=float(test.pvalue)
    )


# ---------------------------------------------------------------------------
# Aggregate report


@dataclass
class EvalReport:
    mcd: float
    acc_cls: float
    rmse_str: float
    probe_acc_content: float
    probe_acc_emotion: float
    strength_preference_acc: float
    n_pairs: int

    def __post_init__(self):
        for name in (
            "acc_cls",
            "probe_acc_content",
            "probe_acc_emotion",
            "strength_preference_acc",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise EvaluationError(f"{name}={value} is outside [0, 1]")
        if self.mcd < 0:
            raise EvaluationError("mcd must be non-negative")


@dataclass
class PairRecord:
    pair_id: str
    conversion_type: str
    mcd: float
    predicted_class: int
    s_z: float
    s_y: float


def write_report(path, report: EvalReport, extras: dict | None = None) -> None:
    with open(path, "w") as fh:
        for f in fields(EvalReport):
            fh.write(f"{f.name} = {getattr(report, f.name)}\n")
        for key, value in (extras or {}).items():
            fh.write(f"{key} = {value}\n")


def read_report(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("=")
        out[key.strip()] = float(value.strip())
    return out


def write_pair_details(path, records: list[PairRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("pair_id\tconversion_type\tmcd\tpredicted_class\ts_z\ts_y\n")
        for r in records:
            fh.write(
                f"{r.pair_id}\t{r.conversion_type}\t{r.mcd:.6f}\t"
                f"{r.predicted_class}\t{r.s_z:.6f}\t{r.s_y:.6f}\n"
            )


def evaluate_all(
    index: ds.CorpusIndex,
    pairs: list[ds.PairSample],
    model: ConversionModel,
    stage1_checkpoint_path,
    judge: JudgeClassifier,
    out_dir,
    mel_cfg: MelConfig | None = None,
    mcd_pairing: str = "parallel",
    render_figures: bool = True,
) -> EvalReport:
    """Convert every test pair and compute the full metric suite.

    mcd_pairing "parallel" scores converted output against the same-content
    utterance in the reference emotion (toy corpus); "self" falls back to the
    self-reconstruction pair for corpora without parallel content.
    """
    if not pairs:
        raise EvaluationError("evaluate_all needs a non-empty pair list")
    if mcd_pairing not in ("parallel", "self"):
        raise EvaluationError(f"unknown mcd_pairing {mcd_pairing!r}")
    mel_cfg = mel_cfg or MelConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    head = FrozenStrengthHead(stage1_checkpoint_path)
    torch.set_num_threads(min(torch.get_num_threads(), worker_count()))

    records: list[PairRecord] = []
    converted_for_acc: list[tuple[MelSpectrogram, int]] = []
    strength_pairs: list[tuple[float, float]] = []
    mel_cache: dict[str, MelSpectrogram] = {}

    def mel_of(u: ds.Utterance) -> MelSpectrogram:
        if u.id not in mel_cache:
            mel_cache[u.id] = mel_spectrogram(load_wav(u.audio_path), mel_cfg)
        return mel_cache[u.id]

    for i, pair in enumerate(pairs):
        x = mel_of(pair.source)
        y = mel_of(pair.reference)
        z = convert(model, x, y)  # inference path: predicted reference class
        if mcd_pairing == "parallel":
            target_utt = ds.parallel_target(index, pair)
            if target_utt is None:
                raise EvaluationError(
                    f"no parallel target for pair {pair.source.id} -> "
                    f"{pair.reference.id}; use mcd_pairing='self'"
                )
            pair_mcd = mcd(z, mel_of(target_utt))
        else:
            x_hat = convert(model, x, x, reference_class=pair.source.emotion.index)
            pair_mcd = mcd(x_hat, x)
        predicted = judge.predict(z)
        s_z = head.strength(z)
        s_y = head.strength(y)
        converted_for_acc.append((z, pair.reference.emotion.index))
        strength_pairs.append((s_z, s_y))
        records.append(
            PairRecord(
                pair_id=f"{pair.source.id}->{pair.reference.id}",
                conversion_type="->".join(pair.conversion_type),
                mcd=pair_mcd,
                predicted_class=predicted,
                s_z=s_z,
                s_y=s_y,
            )
        )

    accuracy = sum(
        r.predicted_class == t for r, (_, t) in zip(records, converted_for_acc)
    ) / len(records)
    strength_rmse = float(
        np.sqrt(np.mean([(s_z - s_y) ** 2 for s_z, s_y in strength_pairs]))
    )
    probe_content, probe_emotion = probe_disentanglement(index, model, mel_cfg)
    preference = strength_preference(index, stage1_checkpoint_path, mel_cfg)

    report = EvalReport(
        mcd=float(np.mean([r.mcd for r in records])),
        acc_cls=accuracy,
        rmse_str=strength_rmse,
        probe_acc_content=probe_content,
        probe_acc_emotion=probe_emotion,
        strength_preference_acc=preference.accuracy,
        n_pairs=len(records),
    )
    extras = {
        "strength_preference_pairs": preference.n_pairs,
        "strength_preference_p_value": preference.p_value,
        "judge_real_acc": judge_accuracy(judge, index, "test", mel_cfg),
    }
    write_report(out_dir / "report.txt", report, extras)
    write_pair_details(out_dir / "pairs.tsv", records)
    if render_figures:
        from .plots import save_eval_figures

        save_eval_figures(report, records, out_dir)
    return report
