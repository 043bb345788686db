"""Report rendering: heatmap and trend figures plus delimited exports.

Figures use the Agg backend and a red-high/green-low ramp for scores; CSVs
sit alongside for downstream tooling.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from geoscore.geo import CountyPolygon
from geoscore.store import CountyRow, FineGrainedRow, Store

SCORE_CMAP = "RdYlGn_r"  # high scores red, low scores green


def write_cells_csv(rows: Sequence[FineGrainedRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "lat", "lon", "score", "pair_count"])
        for r in rows:
            writer.writerow([r.cell, r.lat, r.lon, r.score, r.pair_count])


def write_counties_csv(rows: Sequence[CountyRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["county_id", "period", "value", "cell_count", "task_id"])
        for r in rows:
            writer.writerow([r.county_id, r.period, r.value, r.cell_count, r.task_id])


def render_heatmap(
    rows: Sequence[FineGrainedRow],
    counties: Sequence[CountyPolygon],
    path: str | Path,
    period: str = "",
) -> None:
    fig, ax = plt.subplots(figsize=(8, 6))
    if rows:
        lons = [r.lon for r in rows]
        lats = [r.lat for r in rows]
        scores = [r.score for r in rows]
        scatter = ax.scatter(lons, lats, c=scores, cmap=SCORE_CMAP, s=36, marker="s")
        fig.colorbar(scatter, ax=ax, label="score")
    for county in counties:
        ring = list(county.open_ring()) + [county.open_ring()[0]]
        ax.plot([p.lon for p in ring], [p.lat for p in ring], color="0.4", linewidth=0.8)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title(f"cell scores {period}".strip())
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_trend(county_id: str, series: Sequence[CountyRow], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    periods = [r.period for r in series]
    values = [r.value for r in series]
    ax.plot(periods, values, marker="o")
    ax.set_xlabel("period")
    ax.set_ylabel("value")
    ax.set_title(f"predicted trend, {county_id}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_history(history: Sequence[dict], path: str | Path) -> None:
    fig, (ax_loss, ax_r2) = plt.subplots(1, 2, figsize=(10, 4))
    epochs = [row["epoch"] for row in history]
    ax_loss.plot(epochs, [row["train_mse"] for row in history], marker=".")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train MSE")
    ax_loss.grid(True, alpha=0.3)
    r2 = [(row["epoch"], row["val_r2"]) for row in history if row.get("val_r2") is not None]
    if r2:
        ax_r2.plot([e for e, _ in r2], [v for _, v in r2], marker=".", color="tab:green")
    ax_r2.set_xlabel("epoch")
    ax_r2.set_ylabel("validation R^2")
    ax_r2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def generate_report(
    store: Store,
    counties: Sequence[CountyPolygon],
    period: str,
    out_dir: str | Path,
    bbox=None,
    county_ids: Sequence[str] | None = None,
) -> list[Path]:
    """Render heatmap + per-county trend figures and the CSV exports.

    Returns the list of files written.
    """
    from geoscore.geo import BBox, GeoPoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    box = bbox or BBox(GeoPoint(-89.9, -180.0), GeoPoint(89.9, 180.0))
    cells = store.query_heatmap(box, period)
    written: list[Path] = []

    heatmap_path = out / f"heatmap-{period}.png"
    render_heatmap(cells, counties, heatmap_path, period)
    written.append(heatmap_path)
    cells_csv = out / f"cells-{period}.csv"
    write_cells_csv(cells, cells_csv)
    written.append(cells_csv)

    county_rows: list[CountyRow] = []
    wanted = set(county_ids) if county_ids else None
    for county in counties:
        if wanted is not None and county.county_id not in wanted:
            continue
        series = store.query_trend(county.county_id, "", "~")
        if not series:
            continue
        county_rows.extend(series)
        trend_path = out / f"trend-{county.county_id}.png"
        render_trend(county.county_id, series, trend_path)
        written.append(trend_path)
    counties_csv = out / "counties.csv"
    write_counties_csv(county_rows, counties_csv)
    written.append(counties_csv)
    return written
