"""Attention heatmaps: per-patch CSV and an SVG drawn on tile geometry."""

from __future__ import annotations

import csv
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as mdl
from .clustering import PhenotypeAssignment, PhenotypeTensor, build_phenotype_tensors
from .cohort import PatientBag
from .errors import DataError


@dataclass
class HeatmapRecord:
    patch_index: int
    slide_index: int
    x: int
    y: int
    cluster: int
    attention_raw: float
    attention_rescaled: float


def rescale_attention(attention, mask=None) -> np.ndarray:
    """Min-max rescale over the unmasked entries; 0.5 everywhere if they are all equal.

    Masked entries come back as NaN.
    """
    a = np.asarray(attention, dtype=np.float64)
    mask = np.ones(len(a), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("nothing to rescale")
    out = np.full(len(a), np.nan)
    lo, hi = a[mask].min(), a[mask].max()
    out[mask] = 0.5 if hi == lo else (a[mask] - lo) / (hi - lo)
    return out


def heatmap_records(trained, bag: PatientBag, assignment: PhenotypeAssignment | None) -> list[HeatmapRecord]:
    cfg: mdl.ModelConfig = trained.config
    if bag.d != cfg.d:
        raise DataError(f"bag dimension {bag.d} does not match model dimension {cfg.d}")
    if cfg.siamese:
        if assignment is None:
            raise DataError("a siamese model needs a cluster assignment")
        out = mdl.risk_forward(trained.params, cfg, build_phenotype_tensors(bag, assignment))
        scaled = rescale_attention(out.attention, out.mask)
        slot = assignment.labels
    else:
        out = mdl.risk_forward(trained.params, cfg, [PhenotypeTensor(0, bag.features, np.arange(bag.m))])
        scaled = rescale_attention(out.attention, out.mask)
        slot = np.arange(bag.m)
    cluster = assignment.labels if assignment is not None else np.full(bag.m, -1)
    return [
        HeatmapRecord(
            i, int(bag.slide_index[i]), int(bag.x[i]), int(bag.y[i]), int(cluster[i]),
            float(out.attention[slot[i]]), float(scaled[slot[i]]),
        )
        for i in range(bag.m)
    ]


def write_heatmap_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patch_index", "slide_index", "x", "y", "cluster", "attention_raw", "attention_rescaled"])
        for r in records:
            w.writerow([r.patch_index, r.slide_index, r.x, r.y, r.cluster,
                        f"{r.attention_raw:.17g}", f"{r.attention_rescaled:.17g}"])


def attention_color(value: float) -> str:
    """Blue (lowest) to red (highest), linear in RGB."""
    v = min(max(float(value), 0.0), 1.0)
    return f"#{round(255 * v):02x}00{round(255 * (1 - v)):02x}"


def write_heatmap_svg(path, records, tile=None, width=800.0, title=None) -> None:
    if not records:
        raise DataError("no patches to draw")
    xs = np.array([r.x for r in records], dtype=np.float64)
    ys = np.array([r.y for r in records], dtype=np.float64)
    slides = np.array([r.slide_index for r in records])
    if tile is None:
        steps = np.diff(np.unique(np.concatenate([xs, ys])))
        tile = float(steps[steps > 0].min()) if np.any(steps > 0) else 1.0
    # slides side by side, separated by one tile
    slide_ids = np.unique(slides)
    offsets, cursor = {}, 0.0
    for s in slide_ids:
        sel = slides == s
        offsets[s] = cursor - xs[sel].min()
        cursor += xs[sel].max() - xs[sel].min() + 2 * tile
    gx = xs + np.array([offsets[s] for s in slides])
    gy = ys - ys.min()
    total_w = max(cursor - tile, tile)
    total_h = gy.max() + tile
    scale = width / total_w
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=f"{width:.6g}",
                     height=f"{total_h * scale:.6g}", viewBox=f"0 0 {width:.6g} {total_h * scale:.6g}")
    if title:
        ET.SubElement(svg, "title").text = title
    for r, x, y in zip(records, gx, gy):
        rect = ET.SubElement(svg, "rect", x=f"{x * scale:.6g}", y=f"{y * scale:.6g}",
                             width=f"{tile * scale:.6g}", height=f"{tile * scale:.6g}",
                             fill=attention_color(r.attention_rescaled))
        ET.SubElement(rect, "title").text = f"patch {r.patch_index} cluster {r.cluster} a={r.attention_raw:.4g}"
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)


def heatmap_export(trained, bag: PatientBag, assignment, out_path, tile=None) -> tuple[Path, Path]:
    """Write ``<out_path>.csv`` and ``<out_path>.svg``; returns both paths."""
    out_path = Path(out_path)
    records = heatmap_records(trained, bag, assignment)
    csv_path, svg_path = out_path.with_suffix(".csv"), out_path.with_suffix(".svg")
    write_heatmap_csv(csv_path, records)
    write_heatmap_svg(svg_path, records, tile=tile, title=bag.patient_id)
    return csv_path, svg_path
