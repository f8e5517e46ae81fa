"""Command-line interface.

Every subcommand prints the fully resolved configuration as
``# key=value`` lines before doing any work, so runs can be reproduced
from their own output. Data goes to stdout; diagnostics go to stderr
and are controlled by EMOE_LOG={error,info,debug}.

Exit codes: 0 success, 1 usage error, 2 validation/format error,
3 numeric/training error.

A ``--config FILE`` with ``key = value`` lines may supply any flag's
value; explicit flags win. Stochastic subcommands refuse to run without
a seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import io as eio
from . import stats as estats
from . import train as etrain
from .errors import ConstraintError, FormatError, ShapeError, TrainingError
from .ffn import ffn_forward
from .moe import GateMode, SelectionKind, SelectionPolicy, emoe_forward, merge, prune, split
from .numerics import ActivationKind

log = logging.getLogger("emoe")

_POLICY_NAMES = {
    "top": SelectionKind.TOP_K,
    "bottom": SelectionKind.BOTTOM_K,
    "nottop": SelectionKind.NOT_TOP_K,
    "random": SelectionKind.RANDOM_K,
    "all": SelectionKind.ALL,
}


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("EMOE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        stream=sys.stderr,
        level=levels.get(level, logging.ERROR),
        format="emoe %(levelname)s: %(message)s",
    )


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _resolve(args: argparse.Namespace, casts: dict[str, type]) -> dict:
    """Merge config-file values under explicit flags and print the header."""
    fromfile = _read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, cast in casts.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in fromfile:
            raw = fromfile[key]
            resolved[key] = (raw.lower() in ("1", "true", "yes")) if cast is bool else cast(raw)
        else:
            resolved[key] = None
    for key in sorted(resolved):
        print(f"# {key}={resolved[key]}")
    return resolved


def _require(resolved: dict, *keys: str) -> None:
    for key in keys:
        if resolved.get(key) is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")


def _policy_from(resolved: dict) -> SelectionPolicy:
    kind = _POLICY_NAMES[resolved["policy"]]
    if kind is SelectionKind.RANDOM_K:
        if resolved.get("seed") is None:
            raise UsageError("--policy random requires --seed")
        return SelectionPolicy.random_k(resolved["seed"])
    return SelectionPolicy(kind)


def _load_any_layer(path: str):
    """A layer file is dense when it has a 'K' entry, expert-split when
    it has 'K_0'."""
    names = eio.read_tensors(path).keys()
    if "K" in names:
        return eio.read_ffn(path)
    if "K_0" in names:
        return eio.read_emoe(path)
    raise FormatError(f"{path}: neither a dense nor an expert-split layer file")


def _input_rows(path: str) -> list[tuple[str, np.ndarray]]:
    tensors = eio.read_tensors(path)
    usable = [(n, t) for n, t in tensors.items() if n != "meta"]
    if not usable:
        raise FormatError(f"{path}: no input tensors")
    return [(n, np.atleast_2d(t)) for n, t in usable]


def _fmt_vec(v: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in v)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_cluster(args) -> int:
    r = _resolve(args, {"ffn": str, "experts": int, "seed": int, "max_iter": int, "out": str})
    _require(r, "ffn", "experts", "seed", "out")
    from .clustering import balanced_kmeans

    layer = eio.read_ffn(r["ffn"])
    partition, report = balanced_kmeans(
        layer.k.T, r["experts"], seed=r["seed"], max_iter=r["max_iter"] or 100
    )
    eio.write_partition(r["out"], partition)
    print(f"iterations: {report.iterations}")
    print(f"objective: {report.objective_per_iteration[-1]!r}")
    print(f"converged: {report.converged}")
    log.info("wrote partition to %s", r["out"])
    return 0


def _cmd_split(args) -> int:
    r = _resolve(args, {"ffn": str, "partition": str, "topk": int, "gate": str, "out": str})
    _require(r, "ffn", "partition", "topk", "out")
    layer = eio.read_ffn(r["ffn"])
    partition = eio.read_partition(r["partition"])
    mode = GateMode.LEARNED if r["gate"] == "learned" else GateMode.AVG_K
    emoe = split(layer, partition, r["topk"], mode)
    eio.write_emoe(r["out"], emoe)
    print(f"experts: {emoe.n_experts}")
    print(f"neurons_per_expert: {emoe.d // emoe.n_experts}")
    return 0


def _cmd_merge(args) -> int:
    r = _resolve(args, {"emoe": str, "out": str})
    _require(r, "emoe", "out")
    layer = merge(eio.read_emoe(r["emoe"]))
    eio.write_ffn(r["out"], layer)
    print(f"h: {layer.h}")
    print(f"d: {layer.d}")
    return 0


def _cmd_prune(args) -> int:
    r = _resolve(args, {"emoe": str, "keep": str, "out": str})
    _require(r, "emoe", "keep", "out")
    try:
        keep = np.array([int(s) for s in r["keep"].split(",") if s.strip() != ""])
    except ValueError as exc:
        raise UsageError(f"--keep must be a comma-separated id list: {exc}") from exc
    pruned = prune(eio.read_emoe(r["emoe"]), keep)
    eio.write_emoe(r["out"], pruned)
    print(f"experts: {pruned.n_experts}")
    print(f"top_k: {pruned.top_k}")
    return 0


def _cmd_forward(args) -> int:
    r = _resolve(
        args,
        {"layer": str, "input": str, "policy": str, "topk": int, "seed": int, "format": str},
    )
    _require(r, "layer", "input")
    layer = _load_any_layer(r["layer"])
    rows = _input_rows(r["input"])
    dense = not hasattr(layer, "experts")
    csv = r["format"] == "csv"
    if csv:
        print("name,row,selected,output")
    policy = _policy_from(r) if not dense and r["policy"] else SelectionPolicy.top_k()
    for name, block in rows:
        for idx, x in enumerate(block):
            x = x.astype(layer.k.dtype if dense else layer.gate.dtype)
            if dense:
                y = ffn_forward(layer, x)
                selected: list[int] = []
            else:
                y, sel = emoe_forward(layer, x, policy, r["topk"])
                selected = [int(i) for i in sel]
            if csv:
                sel_txt = ";".join(str(i) for i in selected)
                print(f"{name},{idx},{sel_txt}," + ";".join(repr(float(v)) for v in y))
            else:
                print(f"input: {name}[{idx}]")
                if not dense:
                    print("selected: " + ",".join(str(i) for i in selected))
                print("output: " + _fmt_vec(y))
    return 0


def _cmd_stats(args) -> int:
    r = _resolve(
        args,
        {"emoe": str, "inputs": str, "policy": str, "topk": int, "seed": int,
         "heatmap_out": str, "counts_out": str},
    )
    _require(r, "emoe", "inputs", "policy")
    layer = eio.read_emoe(r["emoe"])
    named = []
    for name, block in _input_rows(r["inputs"]):
        policy = _policy_from(r)  # fresh stream per task for random policies
        hist = estats.usage_histogram(
            layer, block.astype(layer.gate.dtype), policy, r["topk"]
        )
        named.append((name, hist))
    print(estats.format_histogram_csv(named), end="")
    if r["heatmap_out"]:
        with open(r["heatmap_out"], "w") as f:
            f.write(estats.format_heatmap_csv(named))
        log.info("wrote heatmap to %s", r["heatmap_out"])
    if r["counts_out"]:
        with open(r["counts_out"], "w") as f:
            f.write(estats.format_histogram_csv(named))
    return 0


def _cmd_flops(args) -> int:
    r = _resolve(args, {"h": int, "d": int, "experts": int, "topk": int})
    _require(r, "h", "d", "experts", "topk")
    report = estats.flops_report(r["h"], r["d"], r["experts"], r["topk"])
    print(f"dense_macs: {report.dense_macs}")
    print(f"sparse_macs: {report.sparse_macs}")
    print(f"gate_macs: {report.gate_macs}")
    print(f"ratio: {report.ratio!r}")
    return 0


def _cmd_train_toy(args) -> int:
    casts = {
        "mode": str, "out": str, "log": str, "seed": int,
        "clusters": int, "h_in": int, "classes": int, "noise": float,
        "samples_per_cluster": int, "h": int, "d": int, "blocks": int,
        "experts": int, "topk": int, "policy": str, "steps": int,
        "batch_size": int, "learning_rate": float, "optimizer": str,
        "log_window": int, "residual": bool, "activation": str,
    }
    r = _resolve(args, casts)
    _require(r, "mode", "seed")
    defaults = {
        "clusters": 8, "h_in": 16, "classes": 8, "noise": 0.25,
        "samples_per_cluster": 40, "h": 16, "d": 64, "blocks": 1,
        "experts": 8, "topk": 2, "policy": "top", "steps": 500,
        "batch_size": 16, "learning_rate": 0.01, "optimizer": "adam",
        "log_window": 100, "residual": True, "activation": "relu",
    }
    for key, value in defaults.items():
        if r[key] is None:
            r[key] = value

    task = etrain.ToyTaskSpec(
        n_clusters=r["clusters"], h_in=r["h_in"], n_classes=r["classes"],
        noise_sigma=r["noise"], samples_per_cluster=r["samples_per_cluster"],
        seed=r["seed"],
    )
    dataset = etrain.make_toy_dataset(task)
    activation = ActivationKind.GELU_TANH if r["activation"] == "gelu" else ActivationKind.RELU
    model = etrain.build_toy_model(
        h_in=r["h_in"], h=r["h"], d=r["d"], n_classes=r["classes"],
        n_blocks=r["blocks"], seed=r["seed"] + 1, residual=r["residual"],
        activation=activation,
    )
    if r["mode"] in ("emoe", "emoe-learn"):
        partitions = etrain.cluster_partitions(model, r["experts"], seed=r["seed"] + 2)
        gate = GateMode.LEARNED if r["mode"] == "emoe-learn" else GateMode.AVG_K
        etrain.convert_lora2emoe(model, partitions, r["topk"], gate)
    elif r["mode"] != "dense":
        raise UsageError(f"unknown mode {r['mode']!r}")

    policy = _policy_from(r)
    config = etrain.TrainConfig(
        steps=r["steps"], batch_size=r["batch_size"], learning_rate=r["learning_rate"],
        seed=r["seed"] + 3, optimizer=r["optimizer"], policy=policy,
        k=r["topk"] if r["mode"] != "dense" else None, log_window=r["log_window"],
    )
    model, train_log = etrain.train(model, dataset, config)
    print(f"final_loss: {train_log.losses[-1]!r}" if train_log.losses else "final_loss: nan")
    print(f"train_accuracy: {train_log.train_accuracy!r}")
    print(f"test_accuracy: {train_log.test_accuracy!r}")
    if r["out"]:
        etrain.save_model(r["out"], model)
    if r["log"]:
        with open(r["log"], "w") as f:
            f.write(etrain.format_train_log_csv(train_log))
    return 0


def _cmd_convert(args) -> int:
    r = _resolve(args, {"model": str, "direction": str, "partition": str,
                        "topk": int, "out": str})
    _require(r, "model", "direction", "out")
    model = etrain.load_model(r["model"])
    if r["direction"] == "lora2emoe":
        _require(r, "partition", "topk")
        paths = [p for p in r["partition"].split(",") if p]
        partitions = [eio.read_partition(p) for p in paths]
        if len(partitions) == 1:
            etrain.convert_lora2emoe(model, partitions[0], r["topk"])
        else:
            etrain.convert_lora2emoe(model, partitions, r["topk"])
    elif r["direction"] == "emoe2lora":
        etrain.convert_emoe2lora(model)
    else:
        raise UsageError(f"unknown direction {r['direction']!r}")
    etrain.save_model(r["out"], model)
    print(f"blocks: {len(model.blocks)}")
    print(f"direction: {r['direction']}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emoe",
        description="Split dense FFN layers into sparse experts, analyze them, merge back.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn, flags: list[str]) -> None:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        for flag in flags:
            if flag in ("residual",):
                p.add_argument(f"--{flag.replace('_', '-')}", default=None,
                               type=lambda s: s.lower() in ("1", "true", "yes"))
            elif flag in ("experts", "topk", "seed", "max_iter", "h", "d", "clusters",
                          "h_in", "classes", "samples_per_cluster", "blocks", "steps",
                          "batch_size", "log_window"):
                p.add_argument(f"--{flag.replace('_', '-')}", default=None, type=int, dest=flag)
            elif flag in ("noise", "learning_rate"):
                p.add_argument(f"--{flag.replace('_', '-')}", default=None, type=float, dest=flag)
            else:
                p.add_argument(f"--{flag.replace('_', '-')}", default=None, dest=flag)
        p.set_defaults(fn=fn)

    add("cluster", _cmd_cluster, ["ffn", "experts", "seed", "max_iter", "out"])
    add("split", _cmd_split, ["ffn", "partition", "topk", "gate", "out"])
    add("merge", _cmd_merge, ["emoe", "out"])
    add("prune", _cmd_prune, ["emoe", "keep", "out"])
    add("forward", _cmd_forward, ["layer", "input", "policy", "topk", "seed", "format"])
    add("stats", _cmd_stats, ["emoe", "inputs", "policy", "topk", "seed",
                              "heatmap_out", "counts_out"])
    add("flops", _cmd_flops, ["h", "d", "experts", "topk"])
    add("train-toy", _cmd_train_toy, ["mode", "out", "log", "seed", "clusters", "h_in",
                                      "classes", "noise", "samples_per_cluster", "h", "d",
                                      "blocks", "experts", "topk", "policy", "steps",
                                      "batch_size", "learning_rate", "optimizer",
                                      "log_window", "residual", "activation"])
    add("convert", _cmd_convert, ["model", "direction", "partition", "topk", "out"])
    return parser


def run(argv: list[str]) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except UsageError as exc:
        log.error("%s", exc)
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ShapeError, ConstraintError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
