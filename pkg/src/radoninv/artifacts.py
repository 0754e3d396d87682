"""Dependency-free artifact writers: 16-bit PGM previews, SVG line plots, run manifests."""

from __future__ import annotations

import csv
import hashlib
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


def write_pgm16(path, image, window=None) -> tuple[float, float]:
    """Binary 16-bit PGM, min-max windowed unless ``window`` is given.

    The window goes to ``<path>.window.txt`` so the preview can be mapped
    back to image units.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM previews are 2-D")
    lo, hi = (float(img.min()), float(img.max())) if window is None else map(float, window)
    span = hi - lo
    scaled = np.zeros_like(img) if span <= 0 else (np.clip(img, lo, hi) - lo) / span
    pixels = np.round(scaled * 65535).astype(">u2")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(pixels.tobytes())
    Path(str(path) + ".window.txt").write_text(f"min {lo!r}\nmax {hi!r}\n")
    return lo, hi


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 65535:
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos + 1:], dtype=">u2").reshape(h, w)


def write_svg_plot(path, series, title: str = "", xlabel: str = "", ylabel: str = "",
                   width: int = 640, height: int = 400) -> None:
    """Line plot of ``series``: a list of (label, xs, ys)."""
    margin = 60
    xs_all = np.concatenate([np.asarray(x, float) for _, x, _ in series]) if series else []
    ys_all = np.concatenate([np.asarray(y, float) for _, _, y in series]) if series else []
    finite_y = ys_all[np.isfinite(ys_all)] if len(ys_all) else ys_all
    x0, x1 = (float(np.min(xs_all)), float(np.max(xs_all))) if len(xs_all) else (0.0, 1.0)
    y0, y1 = (float(np.min(finite_y)), float(np.max(finite_y))) if len(finite_y) else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def px(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="24" text-anchor="middle">{escape(title)}</text>',
           f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
           f'y2="{height - margin}" stroke="black"/>',
           f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
           f'stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" '
           f'text-anchor="middle">{escape(ylabel)}</text>',
           f'<text x="{margin}" y="{height - margin + 16}" text-anchor="middle">{x0:.4g}</text>',
           f'<text x="{width - margin}" y="{height - margin + 16}" '
           f'text-anchor="middle">{x1:.4g}</text>',
           f'<text x="{margin - 4}" y="{height - margin}" text-anchor="end">{y0:.4g}</text>',
           f'<text x="{margin - 4}" y="{margin}" text-anchor="end">{y1:.4g}</text>']
    for k, (label, xs, ys) in enumerate(series):
        color = colors[k % len(colors)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys)
                       if math.isfinite(y))
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" '
                       f'points="{pts}"/>')
        out.append(f'<text x="{width - margin}" y="{margin + 16 * k}" fill="{color}" '
                   f'text-anchor="end">{escape(label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """``manifest.csv`` at the run-directory root: one row per artifact.

    Files whose contents carry wall-clock timings are listed without a
    digest, so reruns leave the manifest byte-identical.
    """

    COLUMNS = ["path", "command", "bytes", "sha256"]

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / "manifest.csv"
        self.rows: dict[str, list] = {}
        if self.path.exists():
            with open(self.path, newline="") as fh:
                for row in csv.DictReader(fh):
                    self.rows[row["path"]] = [row[c] for c in self.COLUMNS]

    def record(self, path, command: str, timed: bool = False) -> None:
        path = Path(path)
        rel = path.relative_to(self.run_dir).as_posix()
        if timed:
            self.rows[rel] = [rel, command, "-", "-"]
        else:
            self.rows[rel] = [rel, command, str(path.stat().st_size), sha256_of(path)]

    def save(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(self.COLUMNS)
            for key in sorted(self.rows):
                out.writerow(self.rows[key])
