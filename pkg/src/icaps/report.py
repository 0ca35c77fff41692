"""Writing evaluation results: CSV, binary PPM grids, JSON, Markdown and PNG figures."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from icaps.evaluation import ExplanationRecord, MIEstimate, SwapResult, TraversalGrid


def write_ppm(path, image: np.ndarray) -> None:
    """Write ``[h, w]``, ``[1, h, w]`` or ``[3, h, w]`` values in [0, 1] as binary P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"cannot write image of shape {np.shape(image)} as PPM")
    h, w = img.shape[:2]
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of :func:`write_ppm` for files it wrote; returns ``[h, w, 3]`` uint8."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or len(parts) < 5:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    data = parts[4]
    return np.frombuffer(data[: w * h * 3], np.uint8).reshape(h, w, 3)


def tile(images: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile ``[rows, cols, c, h, w]`` images into one ``[c, H, W]`` canvas with a white border."""
    rows, cols, c, h, w = images.shape
    canvas = np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i in range(rows):
        for j in range(cols):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[:, y : y + h, x : x + w] = images[i, j]
    return canvas


def write_mi_csv(path, mi: MIEstimate) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["latent", "dimension", "mi_nats", "bins"])
        for name, vals in (("c", mi.c), ("r", mi.r)):
            for d, v in enumerate(vals):
                out.writerow([name, d, repr(float(v)), mi.bins])


def write_traversal(path, grid: TraversalGrid) -> None:
    write_ppm(path, tile(grid.images))


def write_swap(path, swap: SwapResult, index: int = 0) -> None:
    """One row: reconstruction i, reconstruction j, swap (c_j, r_i), swap (c_i, r_j)."""
    quad = np.stack([img[index] for img in swap.images()])[None]
    write_ppm(path, tile(quad))


def write_explanations(path, records: list[ExplanationRecord]) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=2) + "\n")


# --- matplotlib figures --------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_mi(path, mi: MIEstimate) -> None:
    """Bar chart of per-dimension MI for ``c`` and ``r``."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
    for ax, name, vals, color in zip(axes, ("c", "r"), (mi.c, mi.r), ("tab:blue", "tab:orange")):
        ax.bar(np.arange(len(vals)), vals, color=color)
        ax.set_xlabel(f"{name} element")
        ax.set_xticks(np.arange(len(vals)))
    axes[0].set_ylabel("MI with label (nats)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_grid(path, images: np.ndarray, row_labels=None, col_labels=None) -> None:
    plt = _pyplot()
    rows, cols = images.shape[:2]
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 0.9, rows * 0.9), squeeze=False)
    for i in range(rows):
        for j in range(cols):
            ax = axes[i, j]
            ax.imshow(images[i, j, 0], cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if row_labels is not None and j == 0:
                ax.set_ylabel(row_labels[i], fontsize=7)
            if col_labels is not None and i == rows - 1:
                ax.set_xlabel(col_labels[j], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_traversal(path, grid: TraversalGrid) -> None:
    plot_grid(
        path,
        grid.images,
        [f"c[{l}]" for l in grid.elements],
        [f"{v:+.2f}" for v in grid.values],
    )


def plot_swap(path, swap: SwapResult, index: int = 0) -> None:
    quad = np.stack([img[index] for img in swap.images()])[None]
    plot_grid(path, quad, None, ["ci,ri", "cj,rj", "cj,ri", "ci,rj"])


# --- report bundle --------------------------------------------------------------------


@dataclass
class ReportInputs:
    accuracy: float | None = None
    probe_accuracy: float | None = None
    chance: float | None = None
    mi: MIEstimate | None = None
    traversals: dict[int, TraversalGrid] = field(default_factory=dict)
    swaps: dict[str, SwapResult] = field(default_factory=dict)
    explanations: list[ExplanationRecord] = field(default_factory=list)
    distinctness: float | None = None


def emit_report(results: ReportInputs, out_dir, figures: bool = True) -> list[Path]:
    """Write every available result to ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written: list[Path] = []
    lines = ["# Evaluation summary", ""]
    if results.accuracy is not None:
        lines.append(f"- class-capsule accuracy: {results.accuracy:.4f}")
    if results.probe_accuracy is not None:
        lines.append(f"- residual probe accuracy: {results.probe_accuracy:.4f} (chance {results.chance:.4f})")
    if results.distinctness is not None:
        lines.append(f"- traversal distinctness (lower is better): {results.distinctness:.4f}")
    if results.mi is not None:
        p = out / "mi.csv"
        write_mi_csv(p, results.mi)
        written.append(p)
        lines.append(f"- mean MI per element: c {results.mi.mean_c:.4f} nats, r {results.mi.mean_r:.4f} nats")
        if figures:
            written.append(out / "mi.png")
            plot_mi(written[-1], results.mi)
    for sid, grid in sorted(results.traversals.items()):
        p = out / f"traverse_{sid}.ppm"
        write_traversal(p, grid)
        written.append(p)
        if figures:
            written.append(out / f"traverse_{sid}.png")
            plot_traversal(written[-1], grid)
    for key, swap in sorted(results.swaps.items()):
        p = out / f"swap_{key}.ppm"
        write_swap(p, swap)
        written.append(p)
        if figures:
            written.append(out / f"swap_{key}.png")
            plot_swap(written[-1], swap)
    if results.explanations:
        p = out / "explanations.json"
        write_explanations(p, results.explanations)
        written.append(p)
        lines += ["", "| sample | predicted | confidence |", "|---|---|---|"]
        lines += [f"| {r.sample_id} | {r.predicted} | {r.confidence:.4f} |" for r in results.explanations]
    p = out / "summary.md"
    p.write_text("\n".join(lines) + "\n")
    written.append(p)
    return written
