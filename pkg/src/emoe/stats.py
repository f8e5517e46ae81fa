"""Usage and efficiency metrics for expert-split layers.

Activation ratios answer "of the neurons this input activated, how many
live inside the selected experts"; a neuron counts as activated when its
pre-activation is positive. The weighted variant uses post-activation
score mass instead of neuron counts and sums over activated neurons
only, which keeps it in [0, 1] for both ReLU and tanh-GELU.

FLOPs are counted as per-token multiply-accumulates: 2*h*d for the
dense layer, h*N for the gate, and 2*h*d*(k/N) + h*N for the sparse
path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import Partition
from .errors import ConstraintError
from .ffn import FfnLayer, pre_activations
from .moe import EmoeLayer, SelectionPolicy, emoe_forward
from .numerics import apply_activation


@dataclass
class ActivationRatios:
    plain: float
    weighted: float
    activated_total: int
    activated_selected: int


@dataclass
class UsageHistogram:
    counts: np.ndarray  # (N,) selection counts
    tokens_seen: int
    window: int | None = None


@dataclass
class FlopsReport:
    dense_macs: int
    sparse_macs: int
    gate_macs: int
    ratio: float


def activation_ratios(
    layer: FfnLayer,
    partition: Partition,
    x: np.ndarray,
    selected: np.ndarray,
) -> ActivationRatios:
    """Share of activated neurons (and of activation mass) that falls in
    the selected experts. Both ratios are 0 when nothing is activated."""
    if partition.d != layer.d:
        raise ConstraintError(
            f"partition covers {partition.d} neurons but layer has d={layer.d}"
        )
    pre = pre_activations(layer, x)
    activated = pre > 0
    in_selected = np.isin(partition.assignment, np.asarray(selected, dtype=np.int64))
    total = int(np.count_nonzero(activated))
    sel = int(np.count_nonzero(activated & in_selected))
    plain = sel / total if total > 0 else 0.0

    scores = apply_activation(layer.activation, pre)
    mass_total = float(scores[activated].sum())
    mass_sel = float(scores[activated & in_selected].sum())
    weighted = mass_sel / mass_total if mass_total > 0 else 0.0
    return ActivationRatios(
        plain=plain,
        weighted=weighted,
        activated_total=total,
        activated_selected=sel,
    )


def usage_histogram(
    emoe: EmoeLayer,
    inputs: np.ndarray,
    policy: SelectionPolicy,
    k: int | None = None,
    window: int | None = None,
) -> UsageHistogram:
    """Count how often each expert is selected across a batch of inputs."""
    inputs = np.atleast_2d(np.asarray(inputs))
    if inputs.shape[0] == 0:
        raise ValueError("inputs must be nonempty")
    counts = np.zeros(emoe.n_experts, dtype=np.int64)
    for x in inputs:
        _, selected = emoe_forward(emoe, x, policy, k)
        counts[selected] += 1
    return UsageHistogram(counts=counts, tokens_seen=inputs.shape[0], window=window)


def export_heatmap(named: list[tuple[str, UsageHistogram]]) -> list[tuple[str, np.ndarray]]:
    """Rows of per-task selection frequencies (counts / tokens seen); a
    row sums to k under top-k selection."""
    if not named:
        raise ConstraintError("heatmap needs at least one histogram")
    n = named[0][1].counts.shape[0]
    rows = []
    for name, hist in named:
        if hist.counts.shape[0] != n:
            raise ConstraintError("histograms disagree on the number of experts")
        rows.append((name, hist.counts / hist.tokens_seen))
    return rows


def format_heatmap_csv(named: list[tuple[str, UsageHistogram]]) -> str:
    rows = export_heatmap(named)
    n = rows[0][1].shape[0]
    lines = ["task," + ",".join(f"expert_{i}" for i in range(n))]
    for name, freq in rows:
        lines.append(name + "," + ",".join(repr(float(f)) for f in freq))
    return "\n".join(lines) + "\n"


def format_histogram_csv(named: list[tuple[str, UsageHistogram]]) -> str:
    """Raw selection counts, one row per task."""
    if not named:
        raise ConstraintError("need at least one histogram")
    n = named[0][1].counts.shape[0]
    lines = ["task," + ",".join(f"expert_{i}" for i in range(n))]
    for name, hist in named:
        if hist.counts.shape[0] != n:
            raise ConstraintError("histograms disagree on the number of experts")
        lines.append(name + "," + ",".join(str(int(c)) for c in hist.counts))
    return "\n".join(lines) + "\n"


def flops_report(h: int, d: int, n_experts: int, k: int) -> FlopsReport:
    """Per-token MAC counts for dense vs sparse evaluation of one layer."""
    if h < 1 or d < 1 or n_experts < 1 or k < 1:
        raise ValueError("all parameters must be positive")
    if k > n_experts:
        raise ValueError(f"k={k} exceeds n_experts={n_experts}")
    if d % n_experts != 0:
        raise ValueError(f"d={d} is not divisible by n_experts={n_experts}")
    dense = 2 * h * d
    gate = h * n_experts
    sparse = 2 * h * d * k // n_experts + gate
    return FlopsReport(
        dense_macs=dense,
        sparse_macs=sparse,
        gate_macs=gate,
        ratio=sparse / dense,
    )
