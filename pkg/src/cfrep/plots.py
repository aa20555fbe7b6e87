"""Density figures for factual vs counterfactual prediction histograms."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import DensityData


def density_figure(path, label: str, density: DensityData) -> None:
    """Render one method's paired histograms to a PNG.

    Metadata is pinned so identical inputs give identical bytes.
    """
    edges = density.bin_edges
    centers = (edges[:-1] + edges[1:]) / 2.0
    width = edges[1] - edges[0] if len(edges) > 1 else 1.0
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(centers, density.factual_counts, width=width, alpha=0.55,
           label="factual", color="#3b6ea5")
    ax.bar(centers, density.counterfactual_counts, width=width, alpha=0.55,
           label="counterfactual", color="#c4562e")
    ax.set_xlabel("prediction")
    ax.set_ylabel("count")
    ax.set_title(label)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": "cfrep"})
    plt.close(fig)
