"""Matplotlib report figures rendered to files alongside the delimited
outputs: training curves next to the JSONL log, metric charts next to the
report JSON, and a PCA quick-look next to the embedding CSV."""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _smooth(values: list[float], window: int = 25) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size <= window:
        return arr
    kernel = np.ones(window) / window
    return np.convolve(arr, kernel, mode="valid")


def save_training_curves(rows: list[dict] | str, out_png: str) -> str:
    """Loss components vs step; accepts in-memory rows or a JSONL log path."""
    if isinstance(rows, str):
        with open(rows, "r", encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    rows = [r for r in rows if "elbo" in r]
    if not rows:
        raise ValueError("save_training_curves: no loss rows to plot")
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for key in ("elbo", "reco", "regu", "time"):
        series = [r[key] for r in rows]
        if any(v != 0 for v in series):
            sm = _smooth(series)
            ax.plot(steps[len(steps) - len(sm):], sm, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"training losses ({rows[0].get('stage', '?')})")
    ax.legend()
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_eval_figures(report: dict, out_dir: str) -> list[str]:
    """Accuracy bars plus latency histograms for a (possibly paired) report."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    latent = report.get("latent", report)
    baseline = report.get("baseline")

    tasks = sorted(latent.get("per_task_accuracy", {}))
    if tasks:
        fig, ax = plt.subplots(figsize=(6.4, 4))
        xs = np.arange(len(tasks))
        width = 0.38 if baseline else 0.6
        ax.bar(xs, [latent["per_task_accuracy"][t] for t in tasks], width, label="latent")
        if baseline:
            ax.bar(xs + width, [baseline["per_task_accuracy"].get(t, 0.0) for t in tasks],
                   width, label="baseline")
        ax.set_xticks(xs + (width / 2 if baseline else 0))
        ax.set_xticklabels(tasks)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("round accuracy")
        ax.set_title("accuracy by task")
        ax.legend()
        fig.tight_layout()
        p = os.path.join(out_dir, "accuracy_by_task.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)

    for key, title, fname in (
        ("turn_taking", "turn-taking latency (frames)", "turn_taking_latency.png"),
        ("barge_in", "barge-in latency (frames)", "barge_in_latency.png"),
    ):
        lat = latent.get(key, {}).get("latencies_frames") or []
        if not lat:
            continue
        fig, ax = plt.subplots(figsize=(6.4, 4))
        bins = np.arange(min(lat), max(lat) + 2) - 0.5
        ax.hist(lat, bins=bins, alpha=0.8, label="latent")
        if baseline:
            blat = baseline.get(key, {}).get("latencies_frames") or []
            if blat:
                ax.hist(blat, bins=bins, alpha=0.5, label="baseline")
        ax.set_xlabel("frames")
        ax.set_ylabel("count")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        p = os.path.join(out_dir, fname)
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths


def save_embedding_projection(csv_path: str, out_png: str, max_points: int = 6000) -> str:
    """2D PCA scatter of the exported embeddings, colored by row kind.
    (Projection for a quick look only; the CSV is the real deliverable.)"""
    kinds: list[str] = []
    vecs: list[list[float]] = []
    with open(csv_path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k_col = header.index("kind")
        e0 = header.index("e0")
        for row in reader:
            kinds.append(row[k_col])
            vecs.append([float(v) for v in row[e0:]])
    if not vecs:
        raise ValueError("save_embedding_projection: empty CSV")
    data = np.asarray(vecs, dtype=np.float64)
    kinds_arr = np.asarray(kinds)
    if data.shape[0] > max_points:
        keep = np.random.default_rng(0).choice(data.shape[0], max_points, replace=False)
        data, kinds_arr = data[keep], kinds_arr[keep]
    centered = data - data.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T

    fig, ax = plt.subplots(figsize=(6.4, 5.2))
    for kind, color in (("audio", "tab:blue"), ("latent", "tab:orange"), ("target_text", "tab:green")):
        sel = kinds_arr == kind
        if sel.any():
            ax.scatter(proj[sel, 0], proj[sel, 1], s=4, alpha=0.45, label=kind, color=color)
    ax.set_title("embedding projection (PCA)")
    ax.legend(markerscale=3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
