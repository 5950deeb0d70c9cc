"""Operator entry points: corpus synthesis, indexing, training, conversion,
evaluation and plot generation.

Exit codes are a stable scripting contract: 0 success, 2 usage/IO or config
errors, 3 numerical training aborts, 4 checkpoint/shape mismatches.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from . import datasets as ds
from .dsp import (
    AudioFormatError,
    MelCacheError,
    MelConfig,
    invert_mel,
    load_wav,
    mel_spectrogram,
    write_mel_cache,
    save_wav,
)
from .evaluation import (
    EvaluationError,
    evaluate_all,
    load_judge,
    save_judge,
    train_judge,
    judge_accuracy,
)
from .model import (
    CheckpointError,
    ShapeMismatchError,
    class_for_cue,
    convert as convert_mels,
    cue_for_mel,
    load_checkpoint,
)
from .training import (
    ConfigError,
    FrozenParameterError,
    TrainingAbort,
    parse_config_file,
    train,
)

EXIT_USAGE_IO = 2
EXIT_NUMERICAL = 3
EXIT_MISMATCH = 4

_USAGE_ERRORS = (
    AudioFormatError,
    MelCacheError,
    ds.CorpusError,
    ConfigError,
    EvaluationError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
)
_MISMATCH_ERRORS = (ShapeMismatchError, CheckpointError)
_NUMERICAL_ERRORS = (TrainingAbort, FrozenParameterError)


def _fail(code: int, exc: BaseException) -> "click.exceptions.Exit":
    click.echo(f"error: {exc}", err=True)
    return click.exceptions.Exit(code)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except _NUMERICAL_ERRORS as exc:
        raise _fail(EXIT_NUMERICAL, exc)
    except _MISMATCH_ERRORS as exc:
        raise _fail(EXIT_MISMATCH, exc)
    except _USAGE_ERRORS as exc:
        raise _fail(EXIT_USAGE_IO, exc)
    except OSError as exc:
        raise _fail(EXIT_USAGE_IO, exc)


@click.group()
def main():
    """Instance-level emotional voice conversion toolkit."""


@main.command("make-toy-corpus")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--speakers", default=2, show_default=True, type=int)
@click.option("--sentences-train", default=3, show_default=True, type=int)
@click.option("--sentences-val", default=1, show_default=True, type=int)
@click.option("--sentences-test", default=1, show_default=True, type=int)
def make_toy_corpus(out_dir, seed, speakers, sentences_train, sentences_val, sentences_test):
    """Generate the synthetic training corpus."""
    cfg = ds.ToyCorpusConfig(
        n_speakers=speakers,
        sentences_per_split=(sentences_train, sentences_val, sentences_test),
    )
    root = _guard(ds.synth_toy_corpus, out_dir, cfg, seed)
    index = _guard(ds.index_corpus, root)
    click.echo(f"wrote {len(index.utterances)} utterances under {root}")


@main.command("index")
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--manifest-out", type=click.Path(), default=None)
@click.option("--pairs-out", type=click.Path(), default=None)
@click.option("--pairs-per-type", default=1, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def index_cmd(data_root, manifest_out, pairs_out, pairs_per_type, seed):
    """Validate and summarize a corpus tree."""
    index = _guard(ds.index_corpus, data_root)
    per_split = {s: len(index.split_utterances(s)) for s in ds.SPLITS}
    click.echo(
        f"{len(index.utterances)} utterances, {len(index.speakers)} speakers "
        f"({', '.join(f'{k}={v}' for k, v in per_split.items())})"
    )
    if manifest_out:
        with open(manifest_out, "w") as fh:
            for u in index.utterances:
                fh.write(f"{u.id}\t{u.speaker}\t{u.emotion.name}\t{u.split}\n")
        click.echo(f"utterance manifest -> {manifest_out}")
    if pairs_out:
        n = pairs_per_type
        pairs = _guard(ds.make_conversion_pairs, index, (n, n, n), seed)
        ds.write_pair_manifest(pairs, pairs_out)
        click.echo(f"pair manifest -> {pairs_out}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--stage", required=True, type=click.Choice(["1", "2"]))
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--init-from", type=click.Path(), default=None, help="stage-1 checkpoint for stage 2")
@click.option("--resume", type=click.Path(), default=None)
def train_cmd(config_path, stage, data_root, out_dir, init_from, resume):
    """Run one training stage."""
    model_cfg, train_cfg = _guard(parse_config_file, config_path)
    if int(stage) != train_cfg.stage:
        raise _fail(
            EXIT_USAGE_IO,
            ConfigError(
                f"--stage {stage} disagrees with config stage {train_cfg.stage}"
            ),
        )
    if train_cfg.stage == 2 and init_from is None and resume is None:
        raise _fail(
            EXIT_USAGE_IO, ConfigError("stage 2 requires --init-from STAGE1_CKPT")
        )
    result = _guard(
        train,
        model_cfg,
        train_cfg,
        data_root,
        out_dir,
        init_from=init_from,
        resume=resume,
    )
    click.echo(
        f"stage {train_cfg.stage} done: {result.iterations} iterations, "
        f"checkpoint {result.final_checkpoint}"
    )


@main.command("convert")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--source", "source_path", required=True, type=click.Path())
@click.option("--reference", "reference_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option(
    "--vocoder",
    type=click.Choice(["internal", "external-mel-dump"]),
    default="internal",
    show_default=True,
)
@click.option("--iterations", default=32, show_default=True, type=int, help="phase-reconstruction iterations")
def convert_cmd(checkpoint_path, source_path, reference_path, out_path, vocoder, iterations):
    """Convert a source WAV toward a reference WAV's emotion."""

    def run():
        ckpt = load_checkpoint(checkpoint_path)
        model = ckpt.build_model()
        mel_cfg = MelConfig()
        x = mel_spectrogram(load_wav(source_path), mel_cfg)
        y = mel_spectrogram(load_wav(reference_path), mel_cfg)
        z = convert_mels(model, x, y)
        if vocoder == "external-mel-dump":
            write_mel_cache(out_path, z)
        else:
            save_wav(out_path, invert_mel(z, iterations=iterations))
        return z

    z = _guard(run)
    click.echo(f"converted {z.n_frames} frames -> {out_path}")


@main.command("evaluate")
@click.option("--data", "data_root", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option(
    "--stage1-checkpoint",
    "stage1_path",
    required=True,
    type=click.Path(),
    help="frozen strength head source",
)
@click.option("--judge", "judge_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--pairs-per-type", default=2, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option(
    "--mcd-pairing",
    type=click.Choice(["parallel", "self"]),
    default="parallel",
    show_default=True,
)
@click.option("--judge-iterations", default=500, show_default=True, type=int)
def evaluate_cmd(
    data_root,
    checkpoint_path,
    stage1_path,
    judge_path,
    out_dir,
    pairs_per_type,
    seed,
    mcd_pairing,
    judge_iterations,
):
    """Convert the test pairs and write the metric report plus figures."""

    def run():
        index = ds.index_corpus(data_root)
        ckpt = load_checkpoint(checkpoint_path)
        model = ckpt.build_model()
        if judge_path and Path(judge_path).exists():
            judge = load_judge(judge_path)
        else:
            judge = train_judge(index, iterations=judge_iterations)
            if judge_path:
                save_judge(judge_path, judge)
        pairs = ds.make_conversion_pairs(index, (0, 0, pairs_per_type), seed)["test"]
        return evaluate_all(
            index,
            pairs,
            model,
            stage1_path,
            judge,
            out_dir,
            mcd_pairing=mcd_pairing,
        )

    report = _guard(run)
    click.echo(
        f"mcd={report.mcd:.3f} acc_cls={report.acc_cls:.3f} "
        f"rmse_str={report.rmse_str:.3f} (report under {out_dir})"
    )


@main.command("plot-cue")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--wav", "wav_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def plot_cue_cmd(checkpoint_path, wav_path, out_path):
    """Render the emotional cue over an utterance's mel spectrogram."""

    def run():
        from .plots import save_cue_overlay

        model = load_checkpoint(checkpoint_path).build_model()
        m = mel_spectrogram(load_wav(wav_path), MelConfig())
        cls = class_for_cue(model, m)
        cue = cue_for_mel(model, m, cls)
        save_cue_overlay(m, cue, out_path, title=Path(wav_path).stem)

    _guard(run)
    click.echo(f"cue plot -> {out_path}")


@main.command("plot-pitch")
@click.option(
    "--wavs",
    required=True,
    help="1-5 comma-separated WAV paths",
)
@click.option("--out", "out_path", required=True, type=click.Path())
def plot_pitch_cmd(wavs, out_path):
    """Overlay pitch contours of up to five waveforms."""
    paths = [p.strip() for p in wavs.split(",") if p.strip()]
    if not 1 <= len(paths) <= 5:
        raise _fail(
            EXIT_USAGE_IO, ValueError(f"--wavs takes 1-5 paths, got {len(paths)}")
        )

    def run():
        from .plots import save_pitch_contours

        waves = [(Path(p).stem, load_wav(p)) for p in paths]
        save_pitch_contours(waves, out_path)

    _guard(run)
    click.echo(f"pitch plot -> {out_path}")


if __name__ == "__main__":
    main()
