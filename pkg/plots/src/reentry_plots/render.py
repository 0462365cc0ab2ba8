"""Render figures from the inference pipeline's CSV outputs.

Pure reader: every statistic shown is taken from the input files, with the
single exception of the perimeter isolines on the (a, b) scatter, which are
drawn for display using Ramanujan's closing approximation at levels spanning
the scatter's own perimeter column.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

# deterministic SVG output for identical inputs
matplotlib.rcParams["svg.hashsalt"] = "reentry-plots"

KINDS = ("likelihood_curve", "trace", "histogram", "ab_scatter", "mixing")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class PlotSpec:
    kind: str
    inputs: tuple
    output: str
    component: str = "a"  # for trace / mixing panels

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown plot kind '{self.kind}'")
        if not self.inputs:
            raise SchemaError("at least one input CSV is required")


def read_csv_columns(path, required: tuple) -> dict:
    """Header-checked CSV reader; names the first missing column."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        for col in required:
            if col not in header:
                raise SchemaError(f"{path}: missing required column '{col}'")
        rows = [line.strip().split(",") for line in f if line.strip()]
    data = {}
    for col in header:
        j = header.index(col)
        data[col] = np.array([float(r[j]) for r in rows])
    return data


def ramanujan_perimeter(a, b):
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + np.sqrt(4 - 3 * h)))


def _save(fig, output):
    if output.endswith(".svg"):
        fig.savefig(output, metadata={"Date": None})
    else:
        fig.savefig(output)
    plt.close(fig)


def render_likelihood_curve(spec: PlotSpec):
    data = read_csv_columns(spec.inputs[0], ("a", "loglik_independent", "loglik_relocation"))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(data["a"], data["loglik_independent"], "o-", ms=3, lw=0.8,
            label="independent meshing")
    ax.plot(data["a"], data["loglik_relocation"], "s-", ms=3, lw=0.8,
            label="node relocation (fixed base)")
    ax.set_xlabel("long radius a [mm]")
    ax.set_ylabel("log-likelihood")
    ax.legend()
    fig.tight_layout()
    _save(fig, spec.output)


def render_trace(spec: PlotSpec):
    data = read_csv_columns(spec.inputs[0], ("iter", "a", "b", "phi"))
    if spec.component not in ("a", "b", "phi"):
        raise SchemaError(f"unknown component '{spec.component}'")
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(data["iter"], data[spec.component], lw=0.7)
    ax.set_xlabel("iteration")
    ax.set_ylabel(spec.component)
    fig.tight_layout()
    _save(fig, spec.output)


def render_histogram(spec: PlotSpec):
    data = read_csv_columns(spec.inputs[0], ("bin_left", "bin_right", "count"))
    fig, ax = plt.subplots(figsize=(5, 4))
    widths = data["bin_right"] - data["bin_left"]
    ax.bar(data["bin_left"], data["count"], width=widths, align="edge",
           edgecolor="black", linewidth=0.3)
    ax.set_ylabel("samples per bin")
    fig.tight_layout()
    _save(fig, spec.output)


def render_ab_scatter(spec: PlotSpec) -> float:
    """Scatter with perimeter isolines; returns the printed (a,b) correlation."""
    data = read_csv_columns(spec.inputs[0], ("a", "b", "perimeter"))
    a, b = data["a"], data["b"]
    corr = float(np.corrcoef(a, b)[0, 1])
    fig, ax = plt.subplots(figsize=(5.5, 5))
    pad_a = max(0.3, 0.15 * (a.max() - a.min() + 1e-9))
    pad_b = max(0.3, 0.15 * (b.max() - b.min() + 1e-9))
    ga = np.linspace(a.min() - pad_a, a.max() + pad_a, 120)
    gb = np.linspace(b.min() - pad_b, b.max() + pad_b, 120)
    A, B = np.meshgrid(ga, gb)
    P = ramanujan_perimeter(A, B)
    levels = np.linspace(data["perimeter"].min(), data["perimeter"].max(), 7)
    cs = ax.contour(A, B, P, levels=sorted(set(np.round(levels, 2))),
                    colors="gray", linewidths=0.6)
    ax.clabel(cs, fontsize=7, fmt="%.1f")
    ax.plot(a, b, "x", color="black", ms=4, mew=0.8)
    ax.set_xlabel("a [mm]")
    ax.set_ylabel("b [mm]")
    ax.set_title(f"corr(a, b) = {corr:.17g}", fontsize=9)
    fig.tight_layout()
    _save(fig, spec.output)
    print(f"ab_scatter correlation: {corr:.17g}")
    return corr


def render_mixing(spec: PlotSpec):
    if len(spec.inputs) != 2:
        raise SchemaError("mixing plots need exactly two chain CSVs")
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    for ax, path, label in zip(axes, spec.inputs, ("chain 1", "chain 2")):
        data = read_csv_columns(path, ("iter", "a", "b", "phi"))
        if spec.component not in data:
            raise SchemaError(f"{path}: missing required column '{spec.component}'")
        ax.plot(data["iter"], data[spec.component], lw=0.6)
        ax.set_xlabel("iteration")
        ax.set_title(label, fontsize=9)
    axes[0].set_ylabel(spec.component)
    fig.tight_layout()
    _save(fig, spec.output)


RENDERERS = {
    "likelihood_curve": render_likelihood_curve,
    "trace": render_trace,
    "histogram": render_histogram,
    "ab_scatter": render_ab_scatter,
    "mixing": render_mixing,
}


def render(spec: PlotSpec):
    """Dispatch a plot spec to its renderer; returns the renderer's value."""
    return RENDERERS[spec.kind](spec)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="reentry-plots",
                                 description="Render figures from inference CSV outputs")
    ap.add_argument("kind", choices=KINDS)
    ap.add_argument("inputs", nargs="+", help="input CSV file(s)")
    ap.add_argument("--out", required=True, help="output image (.svg or .png)")
    ap.add_argument("--component", default="a", help="chain component for trace/mixing")
    args = ap.parse_args(argv)
    try:
        render(PlotSpec(kind=args.kind, inputs=tuple(args.inputs), output=args.out,
                        component=args.component))
    except (SchemaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
