"""Figure rendering: cue overlays, pitch contours, evaluation summaries.

All plots are static files written through the Agg backend; nothing here
opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dsp import MelSpectrogram, Waveform, pitch_contour


def save_cue_overlay(m: MelSpectrogram, cue: np.ndarray, path, title: str = "") -> Path:
    """Mel spectrogram image with the emotional cue drawn over it.

    The cue axis is annotated at 1.0 (its normalization ceiling); the peak
    frame is marked when the cue is not identically zero.
    """
    path = Path(path)
    fig, ax = plt.subplots(figsize=(9, 4))
    extent = (0, m.n_frames, 0, m.frames.shape[1])
    ax.imshow(m.frames.T, origin="lower", aspect="auto", extent=extent, cmap="magma")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    cue_ax = ax.twinx()
    cue_ax.plot(np.arange(len(cue)), cue, color="cyan", linewidth=1.8, label="emotional cue")
    cue_ax.set_ylim(-0.02, 1.1)
    cue_ax.set_ylabel("cue weight")
    cue_ax.axhline(1.0, color="white", linestyle=":", linewidth=0.8)
    if cue.size and cue.max() > 0:
        peak = int(np.argmax(cue))
        cue_ax.annotate(
            "max 1.0",
            xy=(peak, float(cue[peak])),
            xytext=(peak, 1.04),
            color="white",
            fontsize=8,
            ha="center",
        )
    cue_ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_pitch_contours(waves: list[tuple[str, Waveform]], path) -> Path:
    """Overlaid pitch contours (one per labeled waveform) with a legend."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(9, 4))
    for label, w in waves:
        contour = pitch_contour(w)
        frames = np.array([t for t, _ in contour], dtype=float)
        f0 = np.array([f if f is not None else np.nan for _, f in contour], dtype=float)
        ax.plot(frames, f0, linewidth=1.5, label=label)
    ax.set_xlabel("frame")
    ax.set_ylabel("f0 (Hz)")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_eval_figures(report, records, out_dir) -> list[Path]:
    """Render the evaluation report's companion figures next to the TSV."""
    out_dir = Path(out_dir)
    written = []

    # MCD distribution per conversion type
    by_type: dict[str, list[float]] = {}
    for r in records:
        by_type.setdefault(r.conversion_type, []).append(r.mcd)
    types = sorted(by_type)
    means = [float(np.mean(by_type[t])) for t in types]
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.bar(range(len(types)), means, color="steelblue")
    ax.axhline(report.mcd, color="crimson", linestyle="--", linewidth=1, label="mean")
    ax.set_xticks(range(len(types)))
    ax.set_xticklabels(types, rotation=75, fontsize=7)
    ax.set_ylabel("MCD (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "fig_mcd_by_type.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    # reference vs converted strength
    fig, ax = plt.subplots(figsize=(5, 5))
    s_y = [r.s_y for r in records]
    s_z = [r.s_z for r in records]
    ax.scatter(s_y, s_z, s=14, alpha=0.6, color="darkorange")
    ax.plot([0, 1], [0, 1], color="gray", linewidth=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("reference strength")
    ax.set_ylabel("converted strength")
    ax.set_title(f"strength RMSE {report.rmse_str:.3f}")
    fig.tight_layout()
    p = out_dir / "fig_strength_consistency.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)

    return written
