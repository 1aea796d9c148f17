"""Report files: full JSON, per-clip CSV, and plot data (CSV plus PNG renders)."""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import IoError
from .pipeline import RunReport

CSV_COLUMNS = ("clip_id", "attacked_truth", "verdict", "snr_in", "snr_out", "spike_rate", "latency_ms")


def schema() -> dict:
    return json.loads(resources.files("nase").joinpath("schemas/run_report.schema.json").read_text())


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "inf" if np.isinf(x) else repr(round(x, 6))
    return str(x)


def _open(path, mode="w"):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open(mode, newline="")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_json(doc: dict, path) -> Path:
    with _open(path) as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Path(path)


def write_csv(report: RunReport, path) -> Path:
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for o in report.outcomes:
            w.writerow([o.clip_id, _fmt(o.attacked_truth), "attacked" if o.verdict.attacked else "clean",
                        _fmt(o.snr_in_db), _fmt(o.snr_out_db), _fmt(o.spike_rate), _fmt(o.wall_latency_ms)])
    return Path(path)


def snr_histogram(report: RunReport, width_db: float = 0.5):
    """Rows of (bin_lo, bin_hi, n_attacked, n_clean) over finite input SNRs."""
    vals = [(o.snr_in_db, o.attacked_truth) for o in report.outcomes if np.isfinite(o.snr_in_db)]
    if not vals:
        return []
    snr = np.array([v for v, _ in vals])
    truth = np.array([t for _, t in vals])
    lo = np.floor(snr.min() / width_db) * width_db
    hi = np.floor(snr.max() / width_db) * width_db + width_db
    edges = np.arange(lo, hi + width_db / 2, width_db)
    a, _ = np.histogram(snr[truth], edges)
    c, _ = np.histogram(snr[~truth], edges)
    return [(float(edges[i]), float(edges[i + 1]), int(a[i]), int(c[i])) for i in range(len(a))]


def roc_sweep(report: RunReport, thresholds=None):
    """Detection rate and FPR as the threshold sweeps over the observed SNRs."""
    snr = np.array([o.verdict.snr_estimate_db for o in report.outcomes])
    truth = np.array([o.attacked_truth for o in report.outcomes], dtype=bool)
    if thresholds is None:
        finite = snr[np.isfinite(snr)]
        span = (finite.min() - 1, finite.max() + 1) if finite.size else (0.0, 20.0)
        thresholds = np.linspace(*span, 81)
    rows = []
    for tau in thresholds:
        flagged = snr < tau
        det = float(flagged[truth].mean()) if truth.any() else None
        fpr = float(flagged[~truth].mean()) if (~truth).any() else None
        rows.append((float(tau), det, fpr))
    return rows


def write_plot_data(report: RunReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = []
    with _open(out / "snr_histogram.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_lo_db", "bin_hi_db", "n_attacked", "n_clean"))
        w.writerows(snr_histogram(report))
    paths.append(out / "snr_histogram.csv")
    with _open(out / "roc.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold_db", "detection_rate", "false_positive_rate"))
        w.writerows([(round(t, 6), _fmt(d), _fmt(f)) for t, d, f in roc_sweep(report)])
    paths.append(out / "roc.csv")
    paths.extend(render_figures(report, out))
    return paths


def render_figures(report: RunReport, out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    paths = []
    hist = snr_histogram(report)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if hist:
        lo = [h[0] for h in hist]
        width = hist[0][1] - hist[0][0]
        ax.bar(lo, [h[2] for h in hist], width=width, align="edge", alpha=0.7, label="attacked")
        ax.bar(lo, [h[3] for h in hist], width=width, align="edge", alpha=0.7, label="clean")
    ax.axvline(report.config["detector"]["snr_threshold_db"], color="k", ls="--", lw=1, label="threshold")
    ax.set_xlabel("composite SNR [dB]")
    ax.set_ylabel("clips")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "snr_histogram.png", dpi=100)
    plt.close(fig)
    paths.append(out / "snr_histogram.png")

    roc = [(f, d) for _, d, f in roc_sweep(report) if d is not None and f is not None]
    fig, ax = plt.subplots(figsize=(4, 4))
    if roc:
        ax.plot([r[0] for r in roc], [r[1] for r in roc], marker=".")
    ax.plot([0, 1], [0, 1], color="0.7", lw=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("detection rate")
    fig.tight_layout()
    fig.savefig(out / "roc.png", dpi=100)
    plt.close(fig)
    paths.append(out / "roc.png")
    return paths


def summary_line(report: RunReport) -> str:
    def pct(x):
        return "n/a" if x is None else f"{x:.3f}"

    def db(x):
        return "n/a" if x is None else f"{x:.2f} dB"

    rate = "n/a" if report.mean_spike_rate is None else f"{report.mean_spike_rate:.1f} spikes/s"
    return (f"detection_rate={pct(report.detection_rate)} fpr={pct(report.false_positive_rate)} "
            f"snr_attacked={db(report.mean_snr_attacked_db)} snr_clean={db(report.mean_snr_clean_db)} "
            f"spike_rate={rate} latency={report.mean_latency_ms:.1f} ms")
