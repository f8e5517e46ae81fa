"""Expert-split view of a dense FFN layer.

``split`` regroups the d neurons of a dense layer into N sub-FFNs
according to a balanced partition; the gate column for expert i is the
arithmetic mean of that expert's key columns, so the gate adds no
parameters and its score equals (N/d) times the sum of the expert's
pre-activations. ``merge`` writes the expert blocks back to their
original neuron positions and is bit-exact.

Two gate modes:
  * AVG_K   - binary unit gates over the top-k scores; with k == N the
              forward output equals the dense layer's output.
  * LEARNED - the gate matrix starts as the avg-k gate but is treated
              as an independent parameter; selected experts are
              weighted by a softmax over their scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .clustering import Partition
from .errors import ConstraintError, ShapeError
from .ffn import FfnLayer
from .numerics import ActivationKind, apply_activation, make_rng, topk_indices


class GateMode(Enum):
    AVG_K = "avgk"
    LEARNED = "learned"


class SelectionKind(Enum):
    TOP_K = "top"
    BOTTOM_K = "bottom"
    NOT_TOP_K = "nottop"
    RANDOM_K = "random"
    ALL = "all"


@dataclass
class SelectionPolicy:
    kind: SelectionKind
    rng: np.random.Generator | None = None  # consumed only by RANDOM_K

    @classmethod
    def top_k(cls) -> "SelectionPolicy":
        return cls(SelectionKind.TOP_K)

    @classmethod
    def bottom_k(cls) -> "SelectionPolicy":
        return cls(SelectionKind.BOTTOM_K)

    @classmethod
    def not_top_k(cls) -> "SelectionPolicy":
        return cls(SelectionKind.NOT_TOP_K)

    @classmethod
    def random_k(cls, seed: int) -> "SelectionPolicy":
        return cls(SelectionKind.RANDOM_K, rng=make_rng(seed))

    @classmethod
    def all_experts(cls) -> "SelectionPolicy":
        return cls(SelectionKind.ALL)


@dataclass
class Expert:
    neuron_indices: np.ndarray  # original neuron ids, ascending
    k_sub: np.ndarray  # (h, d/N)
    v_sub: np.ndarray  # (d/N, h)
    b_k_sub: np.ndarray  # (d/N,)


@dataclass
class EmoeLayer:
    experts: list[Expert]
    gate: np.ndarray  # (h, N)
    activation: ActivationKind
    n_experts: int
    top_k: int
    gate_mode: GateMode = GateMode.AVG_K
    gate_bias: np.ndarray | None = field(default=None)  # (N,)
    b_v: np.ndarray | None = field(default=None)  # (h,)

    def __post_init__(self) -> None:
        n = self.n_experts
        if len(self.experts) != n or n < 1:
            raise ConstraintError(f"expected {n} experts, got {len(self.experts)}")
        h = self.experts[0].k_sub.shape[0]
        m = self.experts[0].k_sub.shape[1]
        seen: list[np.ndarray] = []
        for e in self.experts:
            e.neuron_indices = np.asarray(e.neuron_indices, dtype=np.int64)
            if e.k_sub.shape != (h, m) or e.v_sub.shape != (m, h):
                raise ConstraintError("experts must have equal-size key/value blocks")
            if e.b_k_sub.shape != (m,):
                raise ConstraintError("expert bias block has wrong length")
            if e.neuron_indices.shape != (m,) or np.any(np.diff(e.neuron_indices) <= 0):
                raise ConstraintError("expert neuron indices must be strictly ascending")
            seen.append(e.neuron_indices)
        all_idx = np.concatenate(seen)
        if not np.array_equal(np.sort(all_idx), np.arange(n * m)):
            raise ConstraintError("expert neuron indices do not partition [0, d)")
        if self.gate.shape != (h, n):
            raise ShapeError(f"gate must be (h, N) = ({h}, {n}), got {self.gate.shape}")
        if not 1 <= self.top_k <= n:
            raise ValueError(f"top_k={self.top_k} out of range for N={n}")
        if self.gate_bias is None:
            self.gate_bias = np.zeros(n, dtype=self.gate.dtype)
        if self.b_v is None:
            self.b_v = np.zeros(h, dtype=self.gate.dtype)
        if self.gate_mode is GateMode.AVG_K:
            tied = _avg_k_gate(self.experts)
            if not np.array_equal(tied[0], self.gate) or not np.array_equal(
                tied[1], self.gate_bias
            ):
                raise ConstraintError("avg-k gate is not the mean of the expert keys")

    @property
    def h(self) -> int:
        return self.gate.shape[0]

    @property
    def d(self) -> int:
        return self.n_experts * self.experts[0].k_sub.shape[1]

    def refresh_gate(self) -> None:
        """Recompute the tied gate from the current expert keys. Must be
        called after any in-place key mutation in AVG_K mode; a no-op in
        LEARNED mode, where the gate is an independent parameter."""
        if self.gate_mode is GateMode.AVG_K:
            self.gate, self.gate_bias = _avg_k_gate(self.experts)

    def partition(self) -> Partition:
        assignment = np.empty(self.d, dtype=np.int64)
        for i, e in enumerate(self.experts):
            assignment[e.neuron_indices] = i
        return Partition(assignment=assignment, n_experts=self.n_experts)


def _avg_k_gate(experts: list[Expert]) -> tuple[np.ndarray, np.ndarray]:
    gate = np.stack([e.k_sub.mean(axis=1) for e in experts], axis=1)
    bias = np.array([e.b_k_sub.mean() for e in experts], dtype=gate.dtype)
    return gate, bias


def split(
    layer: FfnLayer,
    partition: Partition,
    top_k: int,
    gate_mode: GateMode = GateMode.AVG_K,
) -> EmoeLayer:
    """Regroup a dense layer's neurons into experts along a partition.

    Expert i holds the neurons of group i in ascending original order;
    parameter values are copied bit-for-bit.
    """
    if partition.d != layer.d:
        raise ConstraintError(
            f"partition covers {partition.d} neurons but layer has d={layer.d}"
        )
    experts = []
    for i in range(partition.n_experts):
        idx = partition.members(i)
        experts.append(
            Expert(
                neuron_indices=idx,
                k_sub=layer.k[:, idx].copy(),
                v_sub=layer.v[idx, :].copy(),
                b_k_sub=layer.b_k[idx].copy(),
            )
        )
    gate, gate_bias = _avg_k_gate(experts)
    return EmoeLayer(
        experts=experts,
        gate=gate,
        activation=layer.activation,
        n_experts=partition.n_experts,
        top_k=top_k,
        gate_mode=gate_mode,
        gate_bias=gate_bias,
        b_v=layer.b_v.copy(),
    )


def merge(emoe: EmoeLayer) -> FfnLayer:
    """Reassemble the dense layer; inverse of split, bit-exact."""
    h, d = emoe.h, emoe.d
    dtype = emoe.experts[0].k_sub.dtype
    k = np.empty((h, d), dtype=dtype)
    v = np.empty((d, h), dtype=dtype)
    b_k = np.empty(d, dtype=dtype)
    for e in emoe.experts:
        k[:, e.neuron_indices] = e.k_sub
        v[e.neuron_indices, :] = e.v_sub
        b_k[e.neuron_indices] = e.b_k_sub
    return FfnLayer(k=k, v=v, activation=emoe.activation, b_k=b_k, b_v=emoe.b_v.copy())


def gate_scores(emoe: EmoeLayer, x: np.ndarray) -> np.ndarray:
    """Per-expert scores x @ G + gate bias; in avg-k mode this equals
    (N/d) times the sum of each expert's pre-activations."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != emoe.h:
        raise ShapeError(f"input must be a vector of length {emoe.h}, got shape {x.shape}")
    return x @ emoe.gate + emoe.gate_bias


def select_experts(scores: np.ndarray, policy: SelectionPolicy, k: int) -> np.ndarray:
    """Expert ids picked by the policy, ascending.

    TOP_K / BOTTOM_K return exactly k ids, NOT_TOP_K the N-k complement
    of the top-k, RANDOM_K k ids drawn without replacement from the
    policy's stream, ALL every id.
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    if policy.kind is SelectionKind.ALL:
        return np.arange(n)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for N={n}")
    if policy.kind is SelectionKind.TOP_K:
        return topk_indices(scores, k)
    if policy.kind is SelectionKind.BOTTOM_K:
        return topk_indices(-scores, k)
    if policy.kind is SelectionKind.NOT_TOP_K:
        if k >= n:
            raise ValueError("NOT_TOP_K needs k <= N-1 for a nonempty complement")
        return np.setdiff1d(np.arange(n), topk_indices(scores, k))
    if policy.kind is SelectionKind.RANDOM_K:
        if policy.rng is None:
            raise ValueError("RANDOM_K policy requires a seeded generator")
        return np.sort(policy.rng.choice(n, size=k, replace=False))
    raise ValueError(f"unknown selection kind {policy.kind}")


def expert_forward(emoe: EmoeLayer, i: int, x: np.ndarray) -> np.ndarray:
    """Output of expert i alone, without the layer-level output bias."""
    e = emoe.experts[i]
    return apply_activation(emoe.activation, x @ e.k_sub + e.b_k_sub) @ e.v_sub


def emoe_forward(
    emoe: EmoeLayer,
    x: np.ndarray,
    policy: SelectionPolicy | None = None,
    k: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sparse forward pass; returns (output, selected expert ids).

    Selected experts are summed in ascending expert order. AVG_K mode
    uses unit weights; LEARNED mode weights each selected expert by a
    softmax over the selected scores.
    """
    policy = policy or SelectionPolicy.top_k()
    k = emoe.top_k if k is None else k
    scores = gate_scores(emoe, x)
    selected = select_experts(scores, policy, k)
    if emoe.gate_mode is GateMode.LEARNED:
        sel_scores = scores[selected]
        w = np.exp(sel_scores - sel_scores.max())
        w /= w.sum()
    else:
        w = np.ones(selected.shape[0], dtype=x.dtype)
    y = np.zeros(emoe.h, dtype=np.result_type(x.dtype, emoe.gate.dtype))
    for weight, i in zip(w, selected):
        y = y + weight * expert_forward(emoe, int(i), x)
    return y + emoe.b_v, selected


def prune(emoe: EmoeLayer, keep: np.ndarray) -> EmoeLayer:
    """Keep only the given experts; neuron ids are re-indexed to the rank
    of each kept neuron so the result is a self-contained layer with
    d' = len(keep) * (d/N). top_k is clamped to the new expert count."""
    keep = np.unique(np.asarray(keep, dtype=np.int64))
    if keep.size == 0:
        raise ValueError("keep must name at least one expert")
    if keep.min() < 0 or keep.max() >= emoe.n_experts:
        raise ValueError(f"keep contains expert ids out of range for N={emoe.n_experts}")
    kept_neurons = np.sort(np.concatenate([emoe.experts[i].neuron_indices for i in keep]))
    rank = {int(orig): new for new, orig in enumerate(kept_neurons)}
    experts = []
    for i in keep:
        e = emoe.experts[i]
        experts.append(
            Expert(
                neuron_indices=np.array([rank[int(j)] for j in e.neuron_indices]),
                k_sub=e.k_sub.copy(),
                v_sub=e.v_sub.copy(),
                b_k_sub=e.b_k_sub.copy(),
            )
        )
    gate = emoe.gate[:, keep].copy()
    gate_bias = emoe.gate_bias[keep].copy()
    return EmoeLayer(
        experts=experts,
        gate=gate,
        activation=emoe.activation,
        n_experts=int(keep.size),
        top_k=min(emoe.top_k, int(keep.size)),
        gate_mode=emoe.gate_mode,
        gate_bias=gate_bias,
        b_v=emoe.b_v.copy(),
    )
