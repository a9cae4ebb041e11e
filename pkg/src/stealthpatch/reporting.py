"""Report emission: delimited output plus rendered figures.

Every report lands as report.csv (fixed columns: condition, n_all,
n_undetected, rs_percent), report.json (the full structure), and PNG plots
alongside. Aggregate rows carry float means; per-repetition rows carry the
raw integer counts.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CSV_COLUMNS = ("condition", "n_all", "n_undetected", "rs_percent")


def _write_csv(rows: list[tuple], out_dir: Path) -> Path:
    path = out_dir / "report.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    return path


def _write_json(payload: dict, out_dir: Path) -> Path:
    path = out_dir / "report.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _digital_rows(report) -> list[tuple]:
    rows = [(f"rep{i + 1:02d}", o.n_all, o.n_undetected, rs)
            for i, (o, rs) in enumerate(zip(report.outcomes, report.rs_values))]
    mean_undet = (sum(o.n_undetected for o in report.outcomes)
                  / max(len(report.outcomes), 1))
    rows.append(("mean", report.n_all, mean_undet, report.rs_mean))
    return rows


def _plot_digital(report, out_dir: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    reps = range(1, len(report.rs_values) + 1)
    ax.plot(reps, report.rs_values, "o-", label="per repetition")
    ax.axhline(report.rs_mean, color="tab:orange", ls="--",
               label=f"mean {report.rs_mean:.2f}%")
    ax.set_xlabel("repetition")
    ax.set_ylabel("attack success rate [%]")
    ax.set_ylim(-2, 102)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "digital_rs.png", dpi=130)
    plt.close(fig)


def _plot_photo(report, out_dir: Path) -> None:
    from .evaluation import attack_success_rate
    labels = [key.label() for key, _ in report.rows]
    values = [attack_success_rate(o) for _, o in report.rows]
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * len(labels) + 2), 3.4))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("attack success rate [%]")
    ax.set_ylim(0, 102)
    fig.tight_layout()
    fig.savefig(out_dir / "photo_rs.png", dpi=130)
    plt.close(fig)


def _plot_sweep(report, out_dir: Path) -> None:
    rows = [r for r in report.rows if r.error is None]
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(max(5, 0.7 * len(rows) + 2), 3.4))
    xs = range(len(rows))
    means = [r.rs_mean for r in rows]
    ax.bar(xs, means, color="tab:green")
    ax.errorbar(xs, means,
                yerr=[[r.rs_mean - r.rs_min for r in rows],
                      [r.rs_max - r.rs_mean for r in rows]],
                fmt="none", ecolor="k", capsize=3)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r.name for r in rows], rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean attack success rate [%]")
    fig.tight_layout()
    fig.savefig(out_dir / "sweep_rs.png", dpi=130)
    plt.close(fig)


def plot_history(history, out_path: str | Path, rs_series: dict | None = None) -> Path:
    """Convergence figure: per-epoch loss components, and an optional
    attack-success-over-epochs panel (min/mean/max series)."""
    from .trainer import TrainHistory
    if isinstance(history, TrainHistory):
        records = history.records
        epochs = [r.epoch for r in records]
        series = {"total": [r.total for r in records],
                  "detection": [r.detection for r in records],
                  "tv": [r.tv for r in records],
                  "nps": [r.nps for r in records]}
    else:  # rows from history.csv
        epochs = [int(r["epoch"]) for r in history]
        series = {k: [float(r[k]) for r in history]
                  for k in ("total", "detection", "tv", "nps")}
    n_panels = 2 if rs_series else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(5.2 * n_panels, 3.4), squeeze=False)
    ax = axes[0][0]
    ax.plot(epochs, series["total"], label="total", lw=1.8)
    ax.plot(epochs, series["detection"], label="detection", lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("epoch-mean loss")
    ax.legend(loc="best", fontsize=8)
    if rs_series:
        ax2 = axes[0][1]
        xs = rs_series["epoch"]
        ax2.plot(xs, rs_series["mean"], "o-", label="mean")
        if "min" in rs_series:
            ax2.fill_between(xs, rs_series["min"], rs_series["max"], alpha=0.25,
                             label="min-max")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("attack success rate [%]")
        ax2.legend(loc="best", fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def emit_report(report, out_dir: str | Path) -> dict[str, Path]:
    """Write report.csv + report.json + plots for any report object."""
    from .evaluation import DigitalReport, PhotoReport, SweepReport, attack_success_rate
    from .trainer import TrainHistory

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    if isinstance(report, DigitalReport):
        written["csv"] = _write_csv(_digital_rows(report), out)
        written["json"] = _write_json(report.to_json_dict(), out)
        _plot_digital(report, out)
        written["plot"] = out / "digital_rs.png"
    elif isinstance(report, PhotoReport):
        rows = [(key.label(), o.n_all, o.n_undetected, attack_success_rate(o))
                for key, o in report.rows]
        rows.append(("total", report.total.n_all, report.total.n_undetected,
                     attack_success_rate(report.total)))
        written["csv"] = _write_csv(rows, out)
        written["json"] = _write_json(report.to_json_dict(), out)
        _plot_photo(report, out)
        written["plot"] = out / "photo_rs.png"
    elif isinstance(report, SweepReport):
        rows = []
        for r in report.rows:
            if r.report is not None:
                rows.extend((f"{r.name}/rep{i + 1:02d}", o.n_all, o.n_undetected, rs)
                            for i, (o, rs) in enumerate(
                                zip(r.report.outcomes, r.report.rs_values)))
            rows.append((f"{r.name}/mean",
                         r.report.n_all if r.report else 0,
                         "" if r.report is None else
                         sum(o.n_undetected for o in r.report.outcomes)
                         / len(r.report.outcomes),
                         r.rs_mean))
        written["csv"] = _write_csv(rows, out)
        written["json"] = _write_json(report.to_json_dict(), out)
        _write_sweep_table(report, out)
        _plot_sweep(report, out)
        written["table"] = out / "sweep_table.csv"
        written["plot"] = out / "sweep_rs.png"
    elif isinstance(report, TrainHistory):
        report.write_csv(out / "history.csv")
        written["csv"] = out / "history.csv"
        written["plot"] = plot_history(report, out / "convergence.png")
    elif isinstance(report, dict):  # pre-serialized structure, e.g. re-rendering
        written["json"] = _write_json(report, out)
        written["csv"] = _write_csv(report.get("rows", []), out)
    else:
        raise TypeError(f"cannot emit report of type {type(report).__name__}")
    return written


def _write_sweep_table(report, out_dir: Path) -> None:
    path = out_dir / "sweep_table.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("name", "color_tag", "shape_tag", "rs_mean", "rs_min",
                         "rs_max", "detected_as", "error"))
        for r in report.rows:
            hist = ";".join(f"{k}:{v}" for k, v in sorted(r.detected_as.items()))
            writer.writerow((r.name, r.color_tag, r.shape_tag, r.rs_mean,
                             r.rs_min, r.rs_max, hist, r.error or ""))
