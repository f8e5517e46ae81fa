"""Deterministic toy fine-tuning harness with manual reverse-mode gradients.

The model is intentionally small: a linear input projection (optionally
carrying a low-rank adapter), a stack of FFN or expert-split blocks, and
a linear classification head. It exists to exercise the workflow of
training with expert masking and deploying dense:

    build dense -> (pretrain) -> split into experts -> train with a
    selection policy -> merge back -> evaluate dense

Gradients are computed by hand. Expert selection is treated as a
constant during the backward pass (straight-through), so parameters of
unselected experts receive exactly zero gradient for that sample. In
avg-k mode the gate is tied to the expert keys and is refreshed after
every optimizer step that touches them; the binary gate weights are
piecewise constant, so no gradient flows through the gate scores. In
learned mode the gate matrix is an independent trainable parameter and
the softmax weighting over the selected experts does carry gradient.

The expert-split block forward is evaluated in a masked-dense form:
pre-activations for all neurons, activations scaled per neuron by the
selection weight of its expert (0 for unselected), then the value
matrix. With unit gates this is algebraically the per-expert sum and
numerically within normal float tolerance of it.

Everything is a pure function of seeds: same config, same dataset, same
init seed give a bitwise-identical run.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .clustering import Partition, balanced_kmeans
from .errors import ConstraintError, ShapeError, TrainingError
from .ffn import FfnLayer
from .io import read_tensors, write_tensors
from .moe import (
    EmoeLayer,
    Expert,
    GateMode,
    SelectionPolicy,
    select_experts,
    split,
)
from .numerics import ActivationKind, activation_grad, apply_activation, make_rng
from .stats import UsageHistogram

ALL_GROUPS = ("input_proj", "adapter", "ffn", "gate", "head")


@dataclass
class Adapter:
    a: np.ndarray  # (rank, h_in)
    b: np.ndarray  # (h, rank)
    rank: int
    scale: float


@dataclass
class Block:
    layer: FfnLayer | EmoeLayer
    residual: bool = True

    @property
    def is_emoe(self) -> bool:
        return isinstance(self.layer, EmoeLayer)


@dataclass
class ToyModel:
    input_proj: np.ndarray  # (h, h_in)
    blocks: list[Block]
    head: np.ndarray  # (n_classes, h)
    adapter: Adapter | None = None
    trainable: frozenset[str] = frozenset(ALL_GROUPS)

    @property
    def h(self) -> int:
        return self.input_proj.shape[0]

    @property
    def h_in(self) -> int:
        return self.input_proj.shape[1]

    @property
    def n_classes(self) -> int:
        return self.head.shape[0]

    def effective_input_proj(self) -> np.ndarray:
        if self.adapter is None:
            return self.input_proj
        ad = self.adapter
        return self.input_proj + (ad.scale / ad.rank) * (ad.b @ ad.a)


@dataclass
class ToyTaskSpec:
    n_clusters: int
    h_in: int
    n_classes: int
    noise_sigma: float
    samples_per_cluster: int
    seed: int


@dataclass
class ToyDataset:
    x: np.ndarray  # (n, h_in)
    labels: np.ndarray  # (n,)
    cluster_ids: np.ndarray  # (n,)


@dataclass
class TrainConfig:
    steps: int
    batch_size: int
    learning_rate: float
    seed: int
    optimizer: str = "adam"  # "sgd" or "adam"
    policy: SelectionPolicy = field(default_factory=SelectionPolicy.top_k)
    k: int | None = None
    log_window: int = 100


@dataclass
class TrainLog:
    losses: list[float]
    histograms: list[UsageHistogram]
    train_accuracy: float
    test_accuracy: float


def make_toy_dataset(spec: ToyTaskSpec) -> ToyDataset:
    """Gaussian clusters around centroids drawn on a sphere of radius
    4*noise_sigma; the label is the cluster id modulo n_classes."""
    if spec.n_clusters < 1 or spec.samples_per_cluster < 1 or spec.n_classes < 1:
        raise ValueError("counts must be positive")
    if spec.h_in < 1:
        raise ValueError("h_in must be positive")
    rng = make_rng(spec.seed)
    raw = rng.normal(size=(spec.n_clusters, spec.h_in))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    centroids = raw / norms * (4.0 * spec.noise_sigma)
    xs, labels, cluster_ids = [], [], []
    for c in range(spec.n_clusters):
        noise = rng.normal(0.0, spec.noise_sigma, size=(spec.samples_per_cluster, spec.h_in))
        xs.append(centroids[c] + noise)
        labels.append(np.full(spec.samples_per_cluster, c % spec.n_classes))
        cluster_ids.append(np.full(spec.samples_per_cluster, c))
    return ToyDataset(
        x=np.concatenate(xs),
        labels=np.concatenate(labels).astype(np.int64),
        cluster_ids=np.concatenate(cluster_ids).astype(np.int64),
    )


def build_toy_model(
    h_in: int,
    h: int,
    d: int,
    n_classes: int,
    seed: int,
    n_blocks: int = 1,
    activation: ActivationKind = ActivationKind.RELU,
    residual: bool = True,
    adapter_rank: int = 0,
    adapter_scale: float = 16.0,
    trainable: frozenset[str] | set[str] | None = None,
    dtype=np.float64,
) -> ToyModel:
    """Seeded gaussian init, 1/sqrt(fan-in) scaled. The adapter's b
    matrix starts at zero so the adapter is initially a no-op."""
    rng = make_rng(seed)
    input_proj = rng.normal(0, 1.0 / np.sqrt(h_in), size=(h, h_in)).astype(dtype)
    blocks = []
    for _ in range(n_blocks):
        k = rng.normal(0, 1.0 / np.sqrt(h), size=(h, d)).astype(dtype)
        v = rng.normal(0, 1.0 / np.sqrt(d), size=(d, h)).astype(dtype)
        blocks.append(Block(layer=FfnLayer(k=k, v=v, activation=activation), residual=residual))
    head = rng.normal(0, 1.0 / np.sqrt(h), size=(n_classes, h)).astype(dtype)
    adapter = None
    if adapter_rank > 0:
        adapter = Adapter(
            a=rng.normal(0, 1.0 / np.sqrt(h_in), size=(adapter_rank, h_in)).astype(dtype),
            b=np.zeros((h, adapter_rank), dtype=dtype),
            rank=adapter_rank,
            scale=adapter_scale,
        )
    groups = frozenset(trainable) if trainable is not None else frozenset(ALL_GROUPS)
    return ToyModel(
        input_proj=input_proj, blocks=blocks, head=head, adapter=adapter, trainable=groups
    )


def clone_model(model: ToyModel) -> ToyModel:
    return copy.deepcopy(model)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class _BlockCache:
    inp: np.ndarray  # (B, h)
    u: np.ndarray  # (B, d) pre-activations, expert-major order for emoe
    s: np.ndarray  # activation(u)
    out: np.ndarray  # (B, h) block output before the residual add
    k_cat: np.ndarray | None = None  # emoe: concatenated keys (h, d)
    v_cat: np.ndarray | None = None
    w_expert: np.ndarray | None = None  # (B, N) selection weights
    selected: list[np.ndarray] | None = None  # per-sample expert ids


@dataclass
class _ModelCache:
    x: np.ndarray  # (B, h_in)
    z0: np.ndarray  # (B, h)
    blocks: list[_BlockCache]
    z_final: np.ndarray  # (B, h)


def _emoe_concat(layer: EmoeLayer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    k_cat = np.concatenate([e.k_sub for e in layer.experts], axis=1)
    v_cat = np.concatenate([e.v_sub for e in layer.experts], axis=0)
    b_cat = np.concatenate([e.b_k_sub for e in layer.experts])
    return k_cat, v_cat, b_cat


def _selection_weights(
    layer: EmoeLayer,
    scores: np.ndarray,
    policy: SelectionPolicy,
    k: int,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-sample expert weights (B, N): unit weights for avg-k gating,
    softmax over the selected scores for a learned gate; zero for
    unselected experts either way."""
    batch = scores.shape[0]
    w = np.zeros_like(scores)
    selected_per_sample = []
    for b in range(batch):
        selected = select_experts(scores[b], policy, k)
        selected_per_sample.append(selected)
        if layer.gate_mode is GateMode.LEARNED:
            sel_scores = scores[b, selected]
            e = np.exp(sel_scores - sel_scores.max())
            w[b, selected] = e / e.sum()
        else:
            w[b, selected] = 1.0
    return w, selected_per_sample


def forward_batch(
    model: ToyModel,
    x: np.ndarray,
    policy: SelectionPolicy | None = None,
    k: int | None = None,
) -> tuple[np.ndarray, _ModelCache]:
    """Batched forward pass; returns (logits (B, C), cache for backward)."""
    policy = policy or SelectionPolicy.top_k()
    x = np.atleast_2d(np.asarray(x))
    if x.shape[1] != model.h_in:
        raise ShapeError(f"inputs must have {model.h_in} features, got {x.shape[1]}")
    z = x @ model.effective_input_proj().T
    z0 = z
    caches = []
    for block in model.blocks:
        layer = block.layer
        if block.is_emoe:
            k_cat, v_cat, b_cat = _emoe_concat(layer)
            scores = z @ layer.gate + layer.gate_bias
            w, selected = _selection_weights(layer, scores, policy, layer.top_k if k is None else k)
            u = z @ k_cat + b_cat
            s = apply_activation(layer.activation, u)
            m = layer.d // layer.n_experts
            out = (s * np.repeat(w, m, axis=1)) @ v_cat + layer.b_v
            caches.append(
                _BlockCache(
                    inp=z, u=u, s=s, out=out,
                    k_cat=k_cat, v_cat=v_cat, w_expert=w, selected=selected,
                )
            )
        else:
            u = z @ layer.k + layer.b_k
            s = apply_activation(layer.activation, u)
            out = s @ layer.v + layer.b_v
            caches.append(_BlockCache(inp=z, u=u, s=s, out=out))
        z = z + out if block.residual else out
    logits = z @ model.head.T
    return logits, _ModelCache(x=x, z0=z0, blocks=caches, z_final=z)


def model_forward(
    model: ToyModel,
    x: np.ndarray,
    policy: SelectionPolicy | None = None,
    k: int | None = None,
) -> tuple[np.ndarray, _ModelCache]:
    """Single-sample forward; returns (logits (C,), cache)."""
    logits, cache = forward_batch(model, np.asarray(x)[None, :], policy, k)
    return logits[0], cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels]).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def trainable_parameters(model: ToyModel) -> list[tuple[str, np.ndarray]]:
    """Flat (name, array) registry of every trainable array, in a fixed
    order. Arrays are the live model buffers; optimizers update in place."""
    params: list[tuple[str, np.ndarray]] = []
    if "input_proj" in model.trainable:
        params.append(("input_proj", model.input_proj))
    if "adapter" in model.trainable and model.adapter is not None:
        params.append(("adapter.a", model.adapter.a))
        params.append(("adapter.b", model.adapter.b))
    for i, block in enumerate(model.blocks):
        layer = block.layer
        if block.is_emoe:
            if "ffn" in model.trainable:
                for j, e in enumerate(layer.experts):
                    params.append((f"blocks.{i}.experts.{j}.k", e.k_sub))
                    params.append((f"blocks.{i}.experts.{j}.v", e.v_sub))
            if "gate" in model.trainable and layer.gate_mode is GateMode.LEARNED:
                params.append((f"blocks.{i}.gate", layer.gate))
        elif "ffn" in model.trainable:
            params.append((f"blocks.{i}.k", layer.k))
            params.append((f"blocks.{i}.v", layer.v))
    if "head" in model.trainable:
        params.append(("head", model.head))
    return params


def model_backward(
    model: ToyModel,
    cache: _ModelCache,
    dlogits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of the scalar loss for every trainable array, given
    d(loss)/d(logits) from a matching forward."""
    dlogits = np.atleast_2d(dlogits)
    if dlogits.shape != (cache.x.shape[0], model.n_classes):
        raise ConstraintError(
            f"dlogits shape {dlogits.shape} does not match cache batch "
            f"{cache.x.shape[0]} and {model.n_classes} classes"
        )
    grads = {name: np.zeros_like(arr) for name, arr in trainable_parameters(model)}

    if "head" in grads:
        grads["head"] += dlogits.T @ cache.z_final
    dz = dlogits @ model.head

    for i in reversed(range(len(model.blocks))):
        block = model.blocks[i]
        layer = block.layer
        bc = cache.blocks[i]
        d_out = dz  # gradient w.r.t. the block output
        if block.is_emoe:
            m = layer.d // layer.n_experts
            wn = np.repeat(bc.w_expert, m, axis=1)
            d_sw = d_out @ bc.v_cat.T
            d_s = d_sw * wn
            d_u = d_s * activation_grad(layer.activation, bc.u)
            d_inp = d_u @ bc.k_cat.T
            if f"blocks.{i}.experts.0.k" in grads:
                d_kcat = bc.inp.T @ d_u
                d_vcat = (bc.s * wn).T @ d_out
                for j in range(layer.n_experts):
                    grads[f"blocks.{i}.experts.{j}.k"] += d_kcat[:, j * m : (j + 1) * m]
                    grads[f"blocks.{i}.experts.{j}.v"] += d_vcat[j * m : (j + 1) * m, :]
            if layer.gate_mode is GateMode.LEARNED:
                # softmax weights carry gradient; selection itself is constant
                d_w = (d_sw * bc.s).reshape(bc.s.shape[0], layer.n_experts, m).sum(axis=2)
                w = bc.w_expert
                d_scores = w * (d_w - (d_w * w).sum(axis=1, keepdims=True))
                if f"blocks.{i}.gate" in grads:
                    grads[f"blocks.{i}.gate"] += bc.inp.T @ d_scores
                d_inp = d_inp + d_scores @ layer.gate.T
        else:
            d_s = d_out @ layer.v.T
            d_u = d_s * activation_grad(layer.activation, bc.u)
            d_inp = d_u @ layer.k.T
            if f"blocks.{i}.k" in grads:
                grads[f"blocks.{i}.k"] += bc.inp.T @ d_u
                grads[f"blocks.{i}.v"] += bc.s.T @ d_out
        dz = d_inp + d_out if block.residual else d_inp

    if "input_proj" in grads or "adapter.a" in grads:
        d_w_eff = dz.T @ cache.x
        if "input_proj" in grads:
            grads["input_proj"] += d_w_eff
        if "adapter.a" in grads:
            ad = model.adapter
            grads["adapter.b"] += (ad.scale / ad.rank) * (d_w_eff @ ad.a.T)
            grads["adapter.a"] += (ad.scale / ad.rank) * (ad.b.T @ d_w_eff)
    return grads


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, learning_rate: float):
        self.lr = learning_rate

    def step(self, params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        for name, arr in params:
            arr -= self.lr * grads[name]


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, arr in params:
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(arr))
            v = self.v.setdefault(name, np.zeros_like(arr))
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            arr -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _refresh_tied_gates(model: ToyModel) -> None:
    if "ffn" not in model.trainable:
        return
    for block in model.blocks:
        if block.is_emoe:
            block.layer.refresh_gate()


# ---------------------------------------------------------------------------
# training loop


def evaluate_accuracy(
    model: ToyModel,
    x: np.ndarray,
    labels: np.ndarray,
    policy: SelectionPolicy | None = None,
    k: int | None = None,
) -> float:
    logits, _ = forward_batch(model, x, policy, k)
    return float((logits.argmax(axis=1) == labels).mean())


def train(model: ToyModel, dataset: ToyDataset, config: TrainConfig) -> tuple[ToyModel, TrainLog]:
    """Minibatch training on an 80/20 split of the dataset (split drawn
    from config.seed). Returns the trained model and a log with the loss
    curve, per-window usage histograms of the first expert-split block,
    and final train/test accuracy."""
    if config.steps < 0 or config.batch_size < 1 or config.log_window < 1:
        raise ValueError("steps, batch_size and log_window must be positive")
    if config.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    n = dataset.x.shape[0]
    rng = make_rng(config.seed)
    perm = rng.permutation(n)
    n_test = max(1, n // 5)
    test_idx = perm[:n_test]
    train_idx = np.sort(perm[n_test:])
    opt = Sgd(config.learning_rate) if config.optimizer == "sgd" else Adam(config.learning_rate)

    emoe_block = next((i for i, b in enumerate(model.blocks) if b.is_emoe), None)
    n_experts = model.blocks[emoe_block].layer.n_experts if emoe_block is not None else 0
    losses: list[float] = []
    histograms: list[UsageHistogram] = []
    window_counts = np.zeros(n_experts, dtype=np.int64)
    window_tokens = 0

    def flush_window(window_id: int) -> None:
        nonlocal window_counts, window_tokens
        if emoe_block is None or window_tokens == 0:
            return
        histograms.append(
            UsageHistogram(counts=window_counts, tokens_seen=window_tokens, window=window_id)
        )
        window_counts = np.zeros(n_experts, dtype=np.int64)
        window_tokens = 0

    batch_size = min(config.batch_size, train_idx.shape[0])
    for step in range(config.steps):
        batch = np.sort(rng.choice(train_idx, size=batch_size, replace=False))
        logits, cache = forward_batch(model, dataset.x[batch], config.policy, config.k)
        loss, dlogits = softmax_cross_entropy(logits, dataset.labels[batch])
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        losses.append(loss)
        grads = model_backward(model, cache, dlogits)
        opt.step(trainable_parameters(model), grads)
        _refresh_tied_gates(model)
        if emoe_block is not None:
            for selected in cache.blocks[emoe_block].selected:
                window_counts[selected] += 1
            window_tokens += batch_size
        if (step + 1) % config.log_window == 0:
            flush_window(step // config.log_window)
    if config.steps > 0:
        flush_window((config.steps - 1) // config.log_window)

    train_acc = evaluate_accuracy(
        model, dataset.x[train_idx], dataset.labels[train_idx], config.policy, config.k
    )
    test_acc = evaluate_accuracy(
        model, dataset.x[test_idx], dataset.labels[test_idx], config.policy, config.k
    )
    return model, TrainLog(
        losses=losses,
        histograms=histograms,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
    )


def format_train_log_csv(log: TrainLog) -> str:
    lines = ["step,loss"]
    for step, loss in enumerate(log.losses):
        lines.append(f"{step},{loss!r}")
    if log.histograms:
        n = log.histograms[0].counts.shape[0]
        lines.append("")
        lines.append("window," + ",".join(f"expert_{i}" for i in range(n)))
        for hist in log.histograms:
            lines.append(f"{hist.window}," + ",".join(str(int(c)) for c in hist.counts))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dense <-> expert-split conversions


def cluster_partitions(model: ToyModel, n_experts: int, seed: int) -> list[Partition]:
    """Balanced clustering of each dense block's key columns; block i
    uses seed + i."""
    partitions = []
    for i, block in enumerate(model.blocks):
        if block.is_emoe:
            raise ConstraintError("model already has expert-split blocks")
        partition, _ = balanced_kmeans(block.layer.k.T, n_experts, seed=seed + i)
        partitions.append(partition)
    return partitions


def convert_lora2emoe(
    model: ToyModel,
    partitions: list[Partition] | Partition,
    k: int,
    gate_mode: GateMode = GateMode.AVG_K,
) -> ToyModel:
    """Split every dense block along the given partitions (one per block,
    or one shared). Parameter values are preserved bit-for-bit."""
    if any(b.is_emoe for b in model.blocks):
        raise ConstraintError("model already has expert-split blocks")
    if isinstance(partitions, Partition):
        partitions = [partitions] * len(model.blocks)
    if len(partitions) != len(model.blocks):
        raise ConstraintError(
            f"got {len(partitions)} partitions for {len(model.blocks)} blocks"
        )
    for block, partition in zip(model.blocks, partitions):
        block.layer = split(block.layer, partition, k, gate_mode)
    return model


def convert_emoe2lora(model: ToyModel) -> ToyModel:
    """Merge every expert-split block back into a dense layer,
    bit-for-bit."""
    from .moe import merge

    if any(not b.is_emoe for b in model.blocks):
        raise ConstraintError("model already has dense blocks")
    for block in model.blocks:
        block.layer = merge(block.layer)
    return model


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(
    model: ToyModel,
    batch: tuple[np.ndarray, np.ndarray],
    epsilon: float,
    policy: SelectionPolicy | None = None,
    k: int | None = None,
) -> float:
    """Max relative error between central-difference and analytic
    gradients over every trainable scalar. Requires a float64 model.

    The expert selection observed at the unperturbed point must be
    stable within +/- epsilon for the comparison to be meaningful; use
    kink_margins to vet the batch.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = trainable_parameters(model)
    for name, arr in params:
        if arr.dtype != np.float64:
            raise ValueError(f"finite_diff_check needs float64 parameters; {name} is {arr.dtype}")
    x, labels = batch

    def loss_value() -> float:
        logits, _ = forward_batch(model, x, policy, k)
        return softmax_cross_entropy(logits, labels)[0]

    logits, cache = forward_batch(model, x, policy, k)
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads = model_backward(model, cache, dlogits)

    worst = 0.0
    for name, arr in params:
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for j in range(flat.shape[0]):
            orig = flat[j]
            flat[j] = orig + epsilon
            f_plus = loss_value()
            flat[j] = orig - epsilon
            f_minus = loss_value()
            flat[j] = orig
            fd = (f_plus - f_minus) / (2 * epsilon)
            denom = max(abs(fd), abs(g[j]), 1e-12)
            worst = max(worst, abs(fd - g[j]) / denom)
    return worst


def kink_margins(
    model: ToyModel,
    x: np.ndarray,
    policy: SelectionPolicy | None = None,
    k: int | None = None,
) -> tuple[float, float]:
    """(min |pre-activation|, min score gap at the selection boundary)
    across the batch; both should be comfortably above the perturbation
    size before running a finite-difference comparison."""
    _, cache = forward_batch(model, x, policy, k)
    min_pre = float("inf")
    min_gap = float("inf")
    for block, bc in zip(model.blocks, cache.blocks):
        min_pre = min(min_pre, float(np.abs(bc.u).min()))
        if block.is_emoe:
            layer = block.layer
            kk = layer.top_k if k is None else k
            if kk < layer.n_experts:
                scores = bc.inp @ layer.gate + layer.gate_bias
                ordered = -np.sort(-scores, axis=1)
                min_gap = min(min_gap, float((ordered[:, kk - 1] - ordered[:, kk]).min()))
    return min_pre, min_gap


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path: str, model: ToyModel) -> None:
    items: list[tuple[str, np.ndarray]] = []
    adapter_rank = model.adapter.rank if model.adapter else 0
    adapter_scale = model.adapter.scale if model.adapter else 0.0
    items.append(
        (
            "meta",
            np.array(
                [1, model.h_in, model.h, model.n_classes, len(model.blocks),
                 adapter_rank, adapter_scale],
                dtype=np.float64,
            ),
        )
    )
    items.append(("input_proj", model.input_proj))
    items.append(("head", model.head))
    if model.adapter:
        items.append(("adapter.a", model.adapter.a))
        items.append(("adapter.b", model.adapter.b))
    from .io import _CODE_FOR_KIND, _GATE_MODE_CODES  # shared code tables

    for i, block in enumerate(model.blocks):
        layer = block.layer
        if block.is_emoe:
            meta = [1, int(block.residual), _CODE_FOR_KIND[layer.activation],
                    layer.n_experts, layer.top_k, _GATE_MODE_CODES[layer.gate_mode]]
            items.append((f"block{i}.meta", np.array(meta, dtype=np.float64)))
            items.append((f"block{i}.assignment",
                          layer.partition().assignment.astype(np.float64)))
            items.append((f"block{i}.G", layer.gate))
            items.append((f"block{i}.gate_bias", layer.gate_bias))
            items.append((f"block{i}.b_v", layer.b_v))
            for j, e in enumerate(layer.experts):
                items.append((f"block{i}.expert{j}.K", e.k_sub))
                items.append((f"block{i}.expert{j}.V", e.v_sub))
                items.append((f"block{i}.expert{j}.b_k", e.b_k_sub))
        else:
            meta = [0, int(block.residual), _CODE_FOR_KIND[layer.activation], 0, 0, 0]
            items.append((f"block{i}.meta", np.array(meta, dtype=np.float64)))
            items.append((f"block{i}.K", layer.k))
            items.append((f"block{i}.V", layer.v))
            items.append((f"block{i}.b_k", layer.b_k))
            items.append((f"block{i}.b_v", layer.b_v))
    write_tensors(path, items)


def load_model(path: str) -> ToyModel:
    from .errors import FormatError
    from .io import _GATE_MODE_FOR_CODE, _KIND_FOR_CODE

    tensors = read_tensors(path)
    if "meta" not in tensors or tensors["meta"].shape != (7,):
        raise FormatError(f"{path}: missing or malformed model meta")
    version, h_in, h, n_classes, n_blocks, adapter_rank, adapter_scale = tensors["meta"]
    if int(version) != 1:
        raise FormatError(f"{path}: unsupported model version {version}")
    adapter = None
    if int(adapter_rank) > 0:
        adapter = Adapter(
            a=tensors["adapter.a"],
            b=tensors["adapter.b"],
            rank=int(adapter_rank),
            scale=float(adapter_scale),
        )
    blocks = []
    for i in range(int(n_blocks)):
        meta = tensors[f"block{i}.meta"]
        kind, residual, act_code, n_experts, top_k, mode_code = (int(v) for v in meta[:6])
        activation = _KIND_FOR_CODE[act_code]
        if kind == 0:
            layer: FfnLayer | EmoeLayer = FfnLayer(
                k=tensors[f"block{i}.K"],
                v=tensors[f"block{i}.V"],
                activation=activation,
                b_k=tensors[f"block{i}.b_k"],
                b_v=tensors[f"block{i}.b_v"],
            )
        else:
            assignment = tensors[f"block{i}.assignment"].astype(np.int64)
            partition = Partition(assignment=assignment, n_experts=n_experts)
            experts = []
            for j in range(n_experts):
                experts.append(
                    Expert(
                        neuron_indices=partition.members(j),
                        k_sub=tensors[f"block{i}.expert{j}.K"],
                        v_sub=tensors[f"block{i}.expert{j}.V"],
                        b_k_sub=tensors[f"block{i}.expert{j}.b_k"],
                    )
                )
            gate_mode = _GATE_MODE_FOR_CODE[mode_code]
            if gate_mode is GateMode.AVG_K:
                from .moe import _avg_k_gate

                gate, gate_bias = _avg_k_gate(experts)  # tied gate, recomputed
                layer = EmoeLayer(
                    experts=experts,
                    gate=gate,
                    activation=activation,
                    n_experts=n_experts,
                    top_k=top_k,
                    gate_mode=gate_mode,
                    gate_bias=gate_bias,
                    b_v=tensors[f"block{i}.b_v"],
                )
            else:
                layer = EmoeLayer(
                    experts=experts,
                    gate=tensors[f"block{i}.G"],
                    activation=activation,
                    n_experts=n_experts,
                    top_k=top_k,
                    gate_mode=gate_mode,
                    gate_bias=tensors[f"block{i}.gate_bias"],
                    b_v=tensors[f"block{i}.b_v"],
                )
        blocks.append(Block(layer=layer, residual=bool(residual)))
    return ToyModel(
        input_proj=tensors["input_proj"],
        blocks=blocks,
        head=tensors["head"],
        adapter=adapter,
    )
