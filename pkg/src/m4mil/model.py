"""Variant assembly: experts, gates and towers wired into one model.

Four variants are supported. ``AMIL_single`` is the single-task
baseline protocol: one independent attention model plus tower per task.
``MMoE_AMIL`` and ``MMoE_MPAMIL`` share experts across tasks and mix
them with one softmax gate per task. ``M4`` uses multi-proxy experts
and per-segment gates: each task mixes every channel segment of the
expert outputs with its own expert-weight row.

Parameters serialise to the "MPR1" binary format: the magic bytes, then
for each named tensor a u16 name length, the utf-8 name, a u32 rank,
u32 dimensions and the float64 values, all little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .errors import (
    BadMagicError,
    ConfigError,
    EmptyBagError,
    ShapeError,
    TruncatedFileError,
)
from .layers import SEGMENTS

VARIANTS = ("AMIL_single", "MMoE_AMIL", "MMoE_MPAMIL", "M4")

PARAMS_MAGIC = b"MPR1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters for one variant.

    ``tower_hidden`` defaults to half the expert width. Desk-scale runs
    use d=64, d_f=32, d_1=32, attn_width=16.
    """

    d: int
    tasks: int
    d_f: int = 512
    d_1: int = 256
    attn_width: int = 128
    experts: int = 5
    tower_hidden: int | None = None
    variant: str = "M4"
    shape_mode: str = "preserve"
    seed: int = 0

    def __post_init__(self):
        if self.tower_hidden is None:
            self.tower_hidden = max(1, self.d_f // 2)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.shape_mode not in layers.SHAPE_MODES:
            raise ConfigError(
                f"shape_mode must be one of {layers.SHAPE_MODES}, got {self.shape_mode!r}"
            )
        for name in ("d", "tasks", "d_f", "d_1", "attn_width", "experts", "tower_hidden"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_f % SEGMENTS != 0:
            raise ConfigError(f"d_f must be divisible by {SEGMENTS}, got {self.d_f}")
        if self.d_1 % SEGMENTS != 0:
            raise ConfigError(f"d_1 must be divisible by {SEGMENTS}, got {self.d_1}")


@dataclass
class ModelOutput:
    """Everything one forward pass produces, as plain arrays.

    ``expert_attention`` has one row per expert (per task head for
    AMIL_single) and every row sums to 1. ``gates`` is tasks x 4 x E for
    M4, tasks x E for the simple-gate variants, and an identity matrix
    for AMIL_single (task t reads its own head). ``logit_nodes`` are the
    live graph tensors behind ``logits``; feed them to the loss to train.
    """

    logits: np.ndarray
    probs: np.ndarray
    expert_attention: np.ndarray
    gates: np.ndarray
    tower_inputs: np.ndarray
    logit_nodes: list[Tensor] = field(repr=False, default_factory=list)


@dataclass
class M4Model:
    config: ModelConfig
    experts: list
    gates: list | None
    towers: list[layers.TowerParams]

    def named_parameters(self):
        for i, expert in enumerate(self.experts):
            yield from expert.named_parameters(f"expert{i}")
        if self.gates is not None:
            for t, gate in enumerate(self.gates):
                if isinstance(gate, layers.MPGateParams):
                    yield from gate.named_parameters(f"gate{t}")
                else:
                    yield f"gate{t}.w", gate
        for t, tower in enumerate(self.towers):
            yield from tower.named_parameters(f"tower{t}")

    def parameters(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]


def build(config: ModelConfig) -> M4Model:
    """Allocate and deterministically initialise one model from its seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    cfg = config
    if cfg.variant == "AMIL_single":
        experts = [init_expert(rng, cfg, plain=True) for _ in range(cfg.tasks)]
        gates = None
    elif cfg.variant == "MMoE_AMIL":
        experts = [init_expert(rng, cfg, plain=True) for _ in range(cfg.experts)]
        gates = [layers.init_simple_gate(rng, cfg.d, cfg.experts) for _ in range(cfg.tasks)]
    elif cfg.variant == "MMoE_MPAMIL":
        experts = [init_expert(rng, cfg, plain=False) for _ in range(cfg.experts)]
        gates = [layers.init_simple_gate(rng, cfg.d, cfg.experts) for _ in range(cfg.tasks)]
    else:  # M4
        experts = [init_expert(rng, cfg, plain=False) for _ in range(cfg.experts)]
        gates = [layers.init_mp_gate(rng, cfg.d, cfg.d_1, cfg.experts) for _ in range(cfg.tasks)]
    towers = [layers.init_tower(rng, cfg.d_f, cfg.tower_hidden) for _ in range(cfg.tasks)]
    return M4Model(config=cfg, experts=experts, gates=gates, towers=towers)


def init_expert(rng, cfg: ModelConfig, plain: bool):
    if plain:
        return layers.init_amil(rng, cfg.d, cfg.d_f, cfg.attn_width)
    return layers.init_mp_amil(rng, cfg.d, cfg.d_f, cfg.attn_width)


def _expert_forward(h: Tensor, expert, cfg: ModelConfig):
    if isinstance(expert, layers.MPAmilParams):
        return layers.mp_amil_forward(h, expert, cfg.shape_mode)
    return layers.amil_forward(h, expert)


def _bag_features(bag) -> np.ndarray:
    return np.asarray(getattr(bag, "features", bag), dtype=np.float64)


def forward(model: M4Model, bag) -> ModelOutput:
    """Run one bag (a Bag or an N x d array) through the model."""
    cfg = model.config
    feats = _bag_features(bag)
    if feats.ndim != 2:
        raise ShapeError(f"bag features must be N x d, got shape {feats.shape}")
    n_instances, width = feats.shape
    if n_instances < 1:
        raise EmptyBagError("bag has no instances")
    if width != cfg.d:
        raise ShapeError(f"bag feature width {width} does not match model d={cfg.d}")
    h = Tensor(feats)

    logit_nodes: list[Tensor] = []
    tower_inputs = np.empty((cfg.tasks, cfg.d_f))

    if cfg.variant == "AMIL_single":
        attention = np.empty((cfg.tasks, n_instances))
        for t in range(cfg.tasks):
            pooled, attn = layers.amil_forward(h, model.experts[t])
            logit_nodes.append(layers.tower_forward(pooled, model.towers[t]))
            attention[t] = attn.values[0]
            tower_inputs[t] = pooled.values[0]
        gates_np = np.eye(cfg.tasks)
    else:
        pooled_list = []
        attention = np.empty((cfg.experts, n_instances))
        for e, expert in enumerate(model.experts):
            pooled, attn = _expert_forward(h, expert, cfg)
            pooled_list.append(pooled)
            attention[e] = attn.values[0]

        if cfg.variant == "M4":
            gates_np = np.empty((cfg.tasks, SEGMENTS, cfg.experts))
            expert_segments = [ad.split_channels(p, SEGMENTS) for p in pooled_list]
            segment_stacks = [
                ad.concat_rows([expert_segments[e][s] for e in range(cfg.experts)])
                for s in range(SEGMENTS)
            ]
            for t in range(cfg.tasks):
                gate = layers.mp_gate_forward(h, model.gates[t])
                gates_np[t] = gate.values
                rows = ad.split_rows(gate, SEGMENTS)
                parts = [ad.matmul(rows[s], segment_stacks[s]) for s in range(SEGMENTS)]
                tower_in = ad.concat_channels(parts)
                tower_inputs[t] = tower_in.values[0]
                logit_nodes.append(layers.tower_forward(tower_in, model.towers[t]))
        else:
            gates_np = np.empty((cfg.tasks, cfg.experts))
            stack = ad.concat_rows(pooled_list)
            for t in range(cfg.tasks):
                gate = layers.simple_gate_forward(h, model.gates[t])
                gates_np[t] = gate.values[0]
                tower_in = ad.matmul(gate, stack)
                tower_inputs[t] = tower_in.values[0]
                logit_nodes.append(layers.tower_forward(tower_in, model.towers[t]))

    logits = np.array([node.item() for node in logit_nodes])
    return ModelOutput(
        logits=logits,
        probs=ad.sigmoid_array(logits),
        expert_attention=attention,
        gates=gates_np,
        tower_inputs=tower_inputs,
        logit_nodes=logit_nodes,
    )


def multi_task_loss(output: ModelOutput, labels, mask=None) -> Tensor:
    """Mean over tasks of per-task binary cross-entropy, on the logit scale.

    ``labels`` holds {0, 1} with NaN marking a missing label; ``mask``
    may exclude tasks explicitly. Masked-out tasks contribute zero while
    the 1/n factor stays the total task count.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = len(output.logit_nodes)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if mask is None:
        mask = ~np.isnan(labels)
    else:
        mask = np.asarray(mask, dtype=bool) & ~np.isnan(labels)
    if not mask.any():
        raise ConfigError("all tasks are masked out; nothing to optimise")
    total: Tensor | None = None
    for i in range(n):
        if not mask[i]:
            continue
        term = ad.bce_with_logits(output.logit_nodes[i], labels[i]) * (1.0 / n)
        total = term if total is None else total + term
    return total


def task_heatmap(output: ModelOutput, t: int) -> np.ndarray:
    """Per-instance score for task t: gate-weighted mean of expert attention.

    Expert weights are the task's gate row (averaged over segments for
    per-segment gates), so the result is a convex combination of
    normalised attention rows and itself sums to 1.
    """
    n_tasks = output.gates.shape[0]
    if not 0 <= t < n_tasks:
        raise IndexError(f"task index {t} out of range for {n_tasks} tasks")
    weights = output.gates[t]
    if weights.ndim == 2:
        weights = weights.mean(axis=0)
    return weights @ output.expert_attention


def expert_heatmap(output: ModelOutput, e: int) -> np.ndarray:
    """Attention row of expert e (a task head for AMIL_single)."""
    n_rows = output.expert_attention.shape[0]
    if not 0 <= e < n_rows:
        raise IndexError(f"expert index {e} out of range for {n_rows} experts")
    return output.expert_attention[e].copy()


def save_params(model: M4Model, path) -> None:
    """Write every named parameter to ``path`` in the MPR1 format."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        for name, tensor in model.named_parameters():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            arr = np.ascontiguousarray(tensor.values, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"parameter file ends inside {what}")
    return data


def read_params(path) -> dict[str, np.ndarray]:
    """Read an MPR1 file into a name -> float64 array mapping."""
    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(PARAMS_MAGIC))
        if magic != PARAMS_MAGIC:
            raise BadMagicError(f"expected magic {PARAMS_MAGIC!r}, found {magic!r}")
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise TruncatedFileError("parameter file ends inside a name length")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "a tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "a tensor rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dimensions"))
            count = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 8 * count, f"values of {name!r}")
            entries[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    return entries


def load_params(model: M4Model, path) -> M4Model:
    """Fill ``model`` from an MPR1 file; names and shapes must match exactly."""
    entries = read_params(path)
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(entries))
    extra = sorted(set(entries) - set(expected))
    if missing or extra:
        raise ConfigError(
            "saved parameters do not match the configured model"
            + (f"; missing {missing[:3]}" if missing else "")
            + (f"; unexpected {extra[:3]}" if extra else "")
        )
    for name, tensor in expected.items():
        if entries[name].shape != tensor.values.shape:
            raise ConfigError(
                f"parameter {name!r} has shape {entries[name].shape} in the file, "
                f"expected {tensor.values.shape}"
            )
        tensor.values[...] = entries[name]
    return model
