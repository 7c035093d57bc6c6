"""Feature re-use: mean |w| of the connections between every source block and conv layer."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Network, parse_block


@dataclass
class ReuseMatrix:
    sources: list[str]
    targets: list[str]
    raw: np.ndarray  # (sources, targets); NaN where no connection exists
    normalized: np.ndarray

    def entry(self, source: str, target: str, normalized=True) -> float:
        m = self.normalized if normalized else self.raw
        return float(m[self.sources.index(source), self.targets.index(target)])

    def edges(self) -> set[tuple[str, str]]:
        rows, cols = np.nonzero(~np.isnan(self.raw))
        return {(self.sources[r], self.targets[c]) for r, c in zip(rows, cols)}


def _block_order(name):
    return parse_block(name)


def reuse_matrix(net: Network) -> ReuseMatrix:
    """Per (source block, target conv layer): mean absolute weight over all output
    channels, the source's input channels and all taps; columns scaled to max 1."""
    convs = [n for n in net.nodes if n.kind == "conv"]
    targets = sorted((n.name for n in convs), key=_block_order)
    inputs = [f"s{m}L0" for m in range(1, net.spec.num_modalities + 1)]
    sources = sorted(inputs + targets, key=_block_order)
    raw = np.full((len(sources), len(targets)), np.nan)
    by_name = {n.name: n for n in convs}
    for j, t in enumerate(targets):
        node = by_name[t]
        w = np.abs(net.banks[t].weights)
        start = 0
        for src, c in zip(node.sources, node.source_channels):
            raw[sources.index(src), j] = float(w[:, start:start + c].mean())
            start += c
    return ReuseMatrix(sources, targets, raw, normalize_columns(raw))


def normalize_columns(raw: np.ndarray) -> np.ndarray:
    out = raw.copy()
    for j in range(raw.shape[1]):
        col = raw[:, j]
        top = np.nanmax(col) if np.any(~np.isnan(col)) else np.nan
        if top > 0:
            out[:, j] = col / top
    return out


def _fmt(v):
    return "" if np.isnan(v) else f"{v:.6f}"


def export_heatmap(matrix: ReuseMatrix, path) -> Path:
    """CSV (normalized values, 6 decimals, blank = no connection) or JSON by suffix."""
    path = Path(path)
    if path.suffix == ".json":
        def rows(m):
            return [[None if np.isnan(v) else round(float(v), 6) for v in r] for r in m]

        path.write_text(json.dumps({
            "sources": matrix.sources,
            "targets": matrix.targets,
            "normalized": rows(matrix.normalized),
            "raw": rows(matrix.raw),
        }, indent=1))
        return path
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source"] + matrix.targets)
        for name, row in zip(matrix.sources, matrix.normalized):
            w.writerow([name] + [_fmt(v) for v in row])
    return path


def read_heatmap(path) -> ReuseMatrix:
    """Inverse of :func:`export_heatmap`.  CSV files carry normalized values only,
    so ``raw`` is returned as a copy of them."""
    path = Path(path)
    if path.suffix == ".json":
        d = json.loads(path.read_text())

        def arr(rows):
            return np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=float)

        return ReuseMatrix(d["sources"], d["targets"], arr(d["raw"]), arr(d["normalized"]))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    targets = rows[0][1:]
    sources = [r[0] for r in rows[1:]]
    vals = np.array([[np.nan if v == "" else float(v) for v in r[1:]] for r in rows[1:]])
    return ReuseMatrix(sources, targets, vals.copy(), vals)
