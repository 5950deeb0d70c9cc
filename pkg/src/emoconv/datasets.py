"""Corpus indexing, conversion-pair and triplet sampling, and a synthetic
toy corpus whose emotion and intensity structure is known by construction.

Corpus layout: root/<speaker>/<emotion>/<split>/<id>.wav
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import CORPUS_SAMPLE_RATE, MelSpectrogram, Waveform, save_wav

EMOTIONS = ("neutral", "happy", "sad", "angry", "surprise")
NEUTRAL = "neutral"
SPLITS = ("train", "val", "test")
N_EMOTIONS = len(EMOTIONS)


class CorpusError(ValueError):
    """Corpus layout or sampling feasibility violation."""


@dataclass(frozen=True)
class EmotionLabel:
    index: int
    name: str

    def __post_init__(self):
        if not 0 <= self.index < N_EMOTIONS or EMOTIONS[self.index] != self.name:
            raise CorpusError(f"unknown emotion {self.name!r} / index {self.index}")

    @classmethod
    def from_name(cls, name: str) -> "EmotionLabel":
        if name not in EMOTIONS:
            raise CorpusError(f"unknown emotion {name!r}, expected one of {EMOTIONS}")
        return cls(index=EMOTIONS.index(name), name=name)

    @property
    def is_neutral(self) -> bool:
        return self.name == NEUTRAL


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str
    emotion: EmotionLabel
    split: str
    audio_path: Path


@dataclass(frozen=True)
class PairSample:
    """Same-speaker (source, reference) pair with distinct emotions."""

    source: Utterance
    reference: Utterance

    def __post_init__(self):
        if self.source.speaker != self.reference.speaker:
            raise CorpusError("conversion pairs must share a speaker")
        if self.source.emotion == self.reference.emotion:
            raise CorpusError("conversion pairs need distinct emotions")

    @property
    def conversion_type(self) -> tuple[str, str]:
        return (self.source.emotion.name, self.reference.emotion.name)


@dataclass(frozen=True)
class TripletSample:
    """Anchor/positive share a non-neutral emotion; negative is neutral."""

    anchor: Utterance
    positive: Utterance
    negative: Utterance

    def __post_init__(self):
        if self.anchor.emotion.is_neutral:
            raise CorpusError("triplet anchor must be emotional")
        if self.anchor.emotion != self.positive.emotion:
            raise CorpusError("triplet positive must share the anchor emotion")
        if self.anchor.id == self.positive.id:
            raise CorpusError("triplet anchor and positive must be distinct utterances")
        if not self.negative.emotion.is_neutral:
            raise CorpusError("triplet negative must be neutral")


@dataclass(frozen=True)
class CorpusIndex:
    utterances: tuple[Utterance, ...]
    speakers: tuple[str, ...]
    seed: int = 0
    _cells: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        cells: dict[tuple[str, str, str], list[Utterance]] = {}
        for u in self.utterances:
            cells.setdefault((u.speaker, u.emotion.name, u.split), []).append(u)
        object.__setattr__(self, "_cells", cells)

    def cell(self, speaker: str, emotion: str, split: str) -> list[Utterance]:
        return self._cells.get((speaker, emotion, split), [])

    def split_utterances(self, split: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == split]

    def by_id(self, utt_id: str) -> Utterance:
        for u in self.utterances:
            if u.id == utt_id:
                return u
        raise CorpusError(f"no utterance with id {utt_id!r}")


def conversion_types() -> list[tuple[str, str]]:
    """The 20 ordered (source, reference) pairs of distinct emotions."""
    return [(a, b) for a in EMOTIONS for b in EMOTIONS if a != b]


def index_corpus(root) -> CorpusIndex:
    """Deterministically index a speaker/emotion/split tree.

    Every (speaker, emotion, split) cell must contain at least one WAV so
    pair construction never starves; the first empty cell is named in the
    error.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    speakers = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not speakers:
        raise CorpusError(f"corpus root {root} has no speaker directories")

    utterances: list[Utterance] = []
    for speaker in speakers:
        for emotion in EMOTIONS:
            for split in SPLITS:
                cell_dir = root / speaker / emotion / split
                wavs = sorted(cell_dir.glob("*.wav")) if cell_dir.is_dir() else []
                if not wavs:
                    raise CorpusError(
                        f"empty corpus cell: speaker={speaker} emotion={emotion} split={split}"
                    )
                for wav in wavs:
                    utterances.append(
                        Utterance(
                            id=wav.stem,
                            speaker=speaker,
                            emotion=EmotionLabel.from_name(emotion),
                            split=split,
                            audio_path=wav,
                        )
                    )
    utterances.sort(key=lambda u: (u.speaker, u.emotion.name, u.id))
    ids = [u.id for u in utterances]
    if len(set(ids)) != len(ids):
        raise CorpusError("utterance ids are not unique within the corpus")
    return CorpusIndex(utterances=tuple(utterances), speakers=tuple(speakers))


def make_conversion_pairs(
    index: CorpusIndex,
    per_type: tuple[int, int, int],
    seed: int,
) -> dict[str, list[PairSample]]:
    """Sample source/reference pairs per conversion type and split.

    Pairs are drawn with replacement (an utterance may appear in many
    pairs); source and reference always come from the same speaker and the
    same split. Reproducible under the seed.
    """
    rng = np.random.default_rng(seed)
    counts = dict(zip(SPLITS, per_type))
    out: dict[str, list[PairSample]] = {s: [] for s in SPLITS}
    for split in SPLITS:
        n = counts[split]
        if n < 0:
            raise CorpusError("pair counts must be non-negative")
        for src_emo, ref_emo in conversion_types():
            for _ in range(n):
                speaker = index.speakers[rng.integers(len(index.speakers))]
                src_cell = index.cell(speaker, src_emo, split)
                ref_cell = index.cell(speaker, ref_emo, split)
                if not src_cell or not ref_cell:
                    raise CorpusError(
                        f"cannot sample pairs: empty cell for speaker={speaker} "
                        f"emotion={src_emo if not src_cell else ref_emo} split={split}"
                    )
                source = src_cell[rng.integers(len(src_cell))]
                reference = ref_cell[rng.integers(len(ref_cell))]
                out[split].append(PairSample(source=source, reference=reference))
    return out


def _triplet_feasible_cells(index: CorpusIndex, split: str) -> dict[str, list[str]]:
    """emotion -> speakers with >=2 utterances of it and >=1 neutral."""
    feasible: dict[str, list[str]] = {}
    for emotion in EMOTIONS:
        if emotion == NEUTRAL:
            continue
        speakers = [
            s
            for s in index.speakers
            if len(index.cell(s, emotion, split)) >= 2
            and len(index.cell(s, NEUTRAL, split)) >= 1
        ]
        if speakers:
            feasible[emotion] = speakers
    return feasible


def sample_triplet(
    index: CorpusIndex, rng: np.random.Generator, split: str = "train"
) -> TripletSample:
    """Draw one (anchor, positive, negative) triplet from a single speaker.

    The anchor emotion is uniform over the non-neutral emotions that admit a
    valid triplet; positive shares the anchor's emotion with a different id;
    negative is a neutral utterance of the same speaker.
    """
    feasible = _triplet_feasible_cells(index, split)
    if not feasible:
        raise CorpusError(
            f"no (emotion, speaker) cell in split {split!r} supports triplet sampling"
        )
    emotions = sorted(feasible)
    emotion = emotions[rng.integers(len(emotions))]
    speakers = feasible[emotion]
    speaker = speakers[rng.integers(len(speakers))]
    cell = index.cell(speaker, emotion, split)
    i = rng.integers(len(cell))
    j = rng.integers(len(cell) - 1)
    if j >= i:
        j += 1
    neutral_cell = index.cell(speaker, NEUTRAL, split)
    negative = neutral_cell[rng.integers(len(neutral_cell))]
    return TripletSample(anchor=cell[i], positive=cell[j], negative=negative)


def fixed_crop(m: MelSpectrogram, t_fixed: int, rng: np.random.Generator) -> MelSpectrogram:
    """Uniform random contiguous crop to t_fixed frames, repeat-padding short input."""
    if t_fixed < 1:
        raise ValueError("t_fixed must be positive")
    t = m.n_frames
    if t == t_fixed:
        return m
    if t > t_fixed:
        offset = int(rng.integers(t - t_fixed + 1))
        return MelSpectrogram(frames=m.frames[offset : offset + t_fixed], config=m.config)
    reps = int(np.ceil(t_fixed / t))
    tiled = np.tile(m.frames, (reps, 1))[:t_fixed]
    return MelSpectrogram(frames=tiled, config=m.config)


def write_pair_manifest(pairs_by_split: dict[str, list[PairSample]], path) -> None:
    """Line-delimited audit record: split, type, source_id, reference_id."""
    with open(path, "w") as fh:
        for split in SPLITS:
            for p in pairs_by_split.get(split, []):
                src_emo, ref_emo = p.conversion_type
                fh.write(f"{split}\t{src_emo}->{ref_emo}\t{p.source.id}\t{p.reference.id}\n")


def write_triplet_manifest(triplets: list[TripletSample], split: str, path) -> None:
    with open(path, "w") as fh:
        for t in triplets:
            fh.write(
                f"{split}\t{t.anchor.emotion.name}\t{t.anchor.id}\t{t.positive.id}\t{t.negative.id}\n"
            )


# ---------------------------------------------------------------------------
# Toy corpus synthesis
#
# Each utterance is a short sequence of harmonic "syllables". The sentence
# index fixes content (syllable count, durations, vowel shapes, pitch steps)
# so the same sentence rendered under two emotions is a parallel pair. The
# emotion fixes a pitch-modulation signature (vibrato rate/depth, pitch
# scale, spectral tilt, tempo) applied at one of two intensity levels, so
# category is machine-classifiable and strength ordering is known.


@dataclass(frozen=True)
class EmotionSignature:
    vibrato_hz: float
    vibrato_semitones: float
    pitch_scale: float
    tilt: float  # harmonic rolloff exponent; lower = brighter
    tempo: float
    glide_semitones: float = 0.0


EMOTION_SIGNATURES: dict[str, EmotionSignature] = {
    "neutral": EmotionSignature(0.0, 0.0, 1.00, 1.1, 1.00),
    "happy": EmotionSignature(6.0, 2.6, 1.25, 0.7, 0.90),
    "sad": EmotionSignature(1.6, 1.8, 0.78, 1.8, 1.25),
    "angry": EmotionSignature(9.0, 2.2, 1.10, 0.5, 0.95),
    "surprise": EmotionSignature(4.0, 3.2, 1.38, 0.9, 1.00, glide_semitones=5.0),
}

INTENSITY_SCALES = {1: 0.45, 2: 1.0}

_VOWELS = np.array(
    [
        [1.0, 0.9, 0.5, 0.7, 0.9, 0.4, 0.2, 0.3, 0.2, 0.1, 0.1, 0.05],
        [1.0, 0.3, 0.2, 0.1, 0.3, 0.8, 0.9, 0.5, 0.2, 0.4, 0.3, 0.1],
        [0.8, 1.0, 0.9, 0.3, 0.2, 0.2, 0.5, 0.8, 0.4, 0.1, 0.2, 0.1],
        [1.0, 0.5, 0.8, 0.9, 0.4, 0.3, 0.2, 0.2, 0.6, 0.5, 0.1, 0.2],
    ]
)


@dataclass(frozen=True)
class ToyCorpusConfig:
    n_speakers: int = 2
    sentences_per_split: tuple[int, int, int] = (3, 1, 1)
    levels: tuple[int, ...] = (1, 2)
    sample_rate: int = CORPUS_SAMPLE_RATE


@dataclass(frozen=True)
class _Sentence:
    syllable_s: np.ndarray
    gap_s: np.ndarray
    pitch_steps: np.ndarray
    vowels: np.ndarray


def _speaker_f0(speaker_idx: int) -> float:
    return 105.0 + 18.0 * ((speaker_idx * 53) % 7)


def _sentence_params(seed: int, speaker_idx: int, split_idx: int, sent_idx: int) -> _Sentence:
    rng = np.random.default_rng((seed, speaker_idx, split_idx, sent_idx))
    n_syll = int(rng.integers(2, 5))
    return _Sentence(
        syllable_s=rng.uniform(0.24, 0.42, n_syll),
        gap_s=rng.uniform(0.07, 0.14, n_syll),
        pitch_steps=rng.uniform(-2.0, 2.0, n_syll),
        vowels=rng.integers(0, len(_VOWELS), n_syll),
    )


def _render_utterance(
    sentence: _Sentence,
    base_f0: float,
    sig: EmotionSignature,
    level: int,
    sample_rate: int,
    vibrato_phase: float,
) -> np.ndarray:
    scale = INTENSITY_SCALES[level]
    pitch_scale = 1.0 + (sig.pitch_scale - 1.0) * scale
    depth = sig.vibrato_semitones * scale
    glide = sig.glide_semitones * scale

    lead = int(0.06 * sample_rate)
    pieces = [np.zeros(lead)]
    total_s = float(np.sum((sentence.syllable_s + sentence.gap_s) * sig.tempo)) + 0.12
    elapsed = 0.06
    for k in range(len(sentence.syllable_s)):
        dur = sentence.syllable_s[k] * sig.tempo
        n = int(dur * sample_rate)
        t = np.arange(n) / sample_rate
        # pitch: sentence step + slow declination + emotion glide + vibrato
        semis = (
            sentence.pitch_steps[k]
            - 1.5 * (elapsed + t) / total_s
            + glide * (elapsed + t) / total_s
            + depth * np.sin(2 * np.pi * sig.vibrato_hz * (elapsed + t) + vibrato_phase)
        )
        f0 = base_f0 * pitch_scale * 2.0 ** (semis / 12.0)
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        weights = _VOWELS[sentence.vowels[k]]
        buf = np.zeros(n)
        for h, w in enumerate(weights, start=1):
            amp = w * h ** (-sig.tilt)
            harmonic = h * f0
            mask = harmonic < 0.45 * sample_rate
            buf += amp * np.sin(h * phase) * mask
        # raised-cosine attack/release, 30 ms
        edge = min(int(0.03 * sample_rate), n // 2)
        env = np.ones(n)
        ramp = 0.5 * (1 - np.cos(np.linspace(0, np.pi, edge)))
        env[:edge] = ramp
        env[-edge:] = ramp[::-1]
        pieces.append(buf * env)
        gap = int(sentence.gap_s[k] * sig.tempo * sample_rate)
        pieces.append(np.zeros(gap))
        elapsed += dur + sentence.gap_s[k] * sig.tempo
    pieces.append(np.zeros(int(0.06 * sample_rate)))
    x = np.concatenate(pieces)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.6 * x / peak
    return x


def toy_utterance_id(speaker: str, emotion: str, split: str, sent: int, level: int) -> str:
    return f"{speaker}_{emotion}_{split}_s{sent:03d}_l{level}"


_TOY_ID_RE = re.compile(r"_s(\d+)_l(\d+)$")


def toy_sentence_and_level(utt_id: str) -> tuple[int, int] | None:
    """Parse the (sentence, intensity level) encoded in a toy utterance id."""
    match = _TOY_ID_RE.search(utt_id)
    if not match:
        return None
    return int(match.group(1)), int(match.group(2))


def synth_toy_corpus(out_root, config: ToyCorpusConfig | None = None, seed: int = 0) -> Path:
    """Generate the synthetic corpus tree; same seed gives identical bytes.

    Sentence indices are assigned per split (train first) so splits never
    share content; every (emotion, level) renders every sentence, so
    parallel targets exist for conversion evaluation.
    """
    cfg = config or ToyCorpusConfig()
    out_root = Path(out_root)
    sent_base = 0
    for split_idx, split in enumerate(SPLITS):
        n_sent = cfg.sentences_per_split[split_idx]
        for spk_idx in range(cfg.n_speakers):
            speaker = f"spk{spk_idx}"
            base_f0 = _speaker_f0(spk_idx)
            for emotion in EMOTIONS:
                sig = EMOTION_SIGNATURES[emotion]
                cell_dir = out_root / speaker / emotion / split
                cell_dir.mkdir(parents=True, exist_ok=True)
                for si in range(n_sent):
                    sent = sent_base + si
                    sentence = _sentence_params(seed, spk_idx, split_idx, sent)
                    phase_rng = np.random.default_rng((seed, spk_idx, sent, 7))
                    vibrato_phase = float(phase_rng.uniform(0, 2 * np.pi))
                    for level in cfg.levels:
                        samples = _render_utterance(
                            sentence, base_f0, sig, level, cfg.sample_rate, vibrato_phase
                        )
                        uid = toy_utterance_id(speaker, emotion, split, sent, level)
                        save_wav(
                            cell_dir / f"{uid}.wav",
                            Waveform(samples=samples, sample_rate_hz=cfg.sample_rate),
                        )
        sent_base += n_sent
    return out_root


def parallel_target(index: CorpusIndex, pair: PairSample) -> Utterance | None:
    """Same-content utterance rendered in the reference's emotion, if any.

    Exists by construction in the toy corpus: same speaker and sentence as
    the source, the reference's emotion and intensity level. Returns None
    when the ids don't carry toy sentence metadata.
    """
    src_meta = toy_sentence_and_level(pair.source.id)
    ref_meta = toy_sentence_and_level(pair.reference.id)
    if src_meta is None or ref_meta is None:
        return None
    sent, _ = src_meta
    _, ref_level = ref_meta
    wanted = toy_utterance_id(
        pair.source.speaker, pair.reference.emotion.name, pair.source.split, sent, ref_level
    )
    for u in index.cell(pair.source.speaker, pair.reference.emotion.name, pair.source.split):
        if u.id == wanted:
            return u
    return None
