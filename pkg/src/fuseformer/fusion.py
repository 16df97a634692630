"""Per-task bottleneck adapters, the attention layer that fuses frozen
adapters, freeze-group management, and parameter accounting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import Batch
from .encoder import (ModelConfig, encode, encoder_param_shapes,
                      init_encoder_params, init_parameter)
from .errors import ConfigError, ContractError
from .losses import head_forward, head_param_shapes, init_head_params
from .tensor import ParameterStore, Tensor

ADAPTER_UP_INIT_STD = 1e-4  # near-identity at attach time


def adapter_param_shapes(config: ModelConfig, task: str) -> Iterator[tuple[str, tuple[int, ...]]]:
    h, k = config.hidden_size, config.bottleneck
    for i in range(config.num_layers):
        p = f"adapters.{task}.{i}"
        yield f"{p}.down.weight", (h, k)
        yield f"{p}.down.bias", (k,)
        yield f"{p}.up.weight", (k, h)
        yield f"{p}.up.bias", (h,)


def fusion_param_shapes(config: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    h = config.hidden_size
    for i in range(config.num_layers):
        p = f"fusion.{i}"
        yield f"{p}.query", (h, h)
        yield f"{p}.key", (h, h)
        yield f"{p}.value", (h, h)


def init_adapter_params(config: ModelConfig, store: ParameterStore, task: str,
                        rng: np.random.Generator) -> None:
    for name, shape in adapter_param_shapes(config, task):
        std = ADAPTER_UP_INIT_STD if ".up.weight" in name else None
        if std is None:
            init_parameter(store, name, shape, rng)
        else:
            init_parameter(store, name, shape, rng, std=std)


def init_fusion_params(config: ModelConfig, store: ParameterStore,
                       rng: np.random.Generator) -> None:
    for name, shape in fusion_param_shapes(config):
        init_parameter(store, name, shape, rng)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def adapter_forward(config: ModelConfig, params: ParameterStore, task: str,
                    layer_idx: int, h_ff: Tensor) -> Tensor:
    """relu bottleneck with a residual connection around it."""
    b, l, hidden = h_ff.shape
    p = f"adapters.{task}.{layer_idx}"
    flat = T.reshape(h_ff, (b * l, hidden))
    u = T.relu(T.add_bias(T.matmul(flat, params[f"{p}.down.weight"]),
                          params[f"{p}.down.bias"]))
    a = T.add_bias(T.matmul(u, params[f"{p}.up.weight"]), params[f"{p}.up.bias"])
    return T.add(h_ff, T.reshape(a, (b, l, hidden)))


def fusion_forward(config: ModelConfig, params: ParameterStore,
                   tasks: Sequence[str], layer_idx: int, h_ff: Tensor,
                   adapter_outputs: Sequence[Tensor]) -> tuple[Tensor, np.ndarray]:
    """Per-token attention over adapter outputs.

    Query comes from the FF-sublayer output, keys/values from each adapter
    output; the mixture is added back onto the residual stream. Returns the
    output and the attention weights [B, L, T] for inspection.
    """
    if len(adapter_outputs) == 0:
        raise ContractError("fusion requires at least one adapter output")
    if len(adapter_outputs) != len(tasks):
        raise ContractError("one adapter output per task expected")
    b, l, hidden = h_ff.shape
    p = f"fusion.{layer_idx}"
    flat = T.reshape(h_ff, (b * l, hidden))
    q = T.reshape(T.matmul(flat, params[f"{p}.query"]), (b * l, 1, hidden))
    keys, values = [], []
    for a_t in adapter_outputs:
        a_flat = T.reshape(a_t, (b * l, hidden))
        keys.append(T.reshape(T.matmul(a_flat, params[f"{p}.key"]), (b * l, 1, hidden)))
        values.append(T.reshape(T.matmul(a_flat, params[f"{p}.value"]), (b * l, 1, hidden)))
    k = T.concat(keys, axis=1)     # [B*L, T, H]
    v = T.concat(values, axis=1)
    scores = T.batched_matmul(q, T.transpose(k, (0, 2, 1)))  # [B*L, 1, T]
    alpha = T.softmax(scores, axis=2)
    mixed = T.reshape(T.batched_matmul(alpha, v), (b, l, hidden))
    out = T.add(h_ff, mixed)
    return out, alpha.data.reshape(b, l, len(tasks))


# ---------------------------------------------------------------------------
# slots
# ---------------------------------------------------------------------------

class SingleAdapterSlot:
    def __init__(self, config: ModelConfig, params: ParameterStore, task: str):
        self.config = config
        self.params = params
        self.task = task

    def apply(self, h_ff: Tensor, layer_idx: int) -> Tensor:
        return adapter_forward(self.config, self.params, self.task, layer_idx, h_ff)


class FusionSlot:
    """Runs every task adapter, then the fusion attention; keeps the last
    forward's attention weights per layer for inspection."""

    def __init__(self, config: ModelConfig, params: ParameterStore,
                 tasks: Sequence[str]):
        self.config = config
        self.params = params
        self.tasks = list(tasks)
        self.last_weights: dict[int, np.ndarray] = {}

    def apply(self, h_ff: Tensor, layer_idx: int) -> Tensor:
        outs = [adapter_forward(self.config, self.params, t, layer_idx, h_ff)
                for t in self.tasks]
        out, alpha = fusion_forward(self.config, self.params, self.tasks,
                                    layer_idx, h_ff, outs)
        self.last_weights[layer_idx] = alpha
        return out


# ---------------------------------------------------------------------------
# freeze groups
# ---------------------------------------------------------------------------

@dataclass
class FreezeGroups:
    """Partition of all parameter names with a trainable flag per group."""
    groups: dict[str, list[str]]
    trainable: dict[str, bool]

    def trainable_names(self) -> list[str]:
        out = []
        for g, names in self.groups.items():
            if self.trainable[g]:
                out.extend(names)
        return out

    def frozen_names(self) -> list[str]:
        out = []
        for g, names in self.groups.items():
            if not self.trainable[g]:
                out.extend(names)
        return out


def group_of(name: str) -> str:
    if name.startswith("adapters."):
        return "adapters." + name.split(".")[1]
    if name.startswith("fusion."):
        return "fusion"
    if name.startswith("heads."):
        return "heads." + name.split(".")[1]
    return "encoder"


def build_freeze_groups(store: ParameterStore) -> FreezeGroups:
    groups: dict[str, list[str]] = {}
    for name in store.names():
        groups.setdefault(group_of(name), []).append(name)
    return FreezeGroups(groups=groups, trainable={g: True for g in groups})


# ---------------------------------------------------------------------------
# assembled model
# ---------------------------------------------------------------------------

class AdapterBank:
    """Encoder, per-task adapters, optional fusion layer, and task heads in
    one named parameter store with freeze groups and a slot mode."""

    def __init__(self, config: ModelConfig, heads: dict[str, int],
                 adapter_tasks: Sequence[str] = (), with_fusion: bool = False,
                 seed: int = 0):
        self.config = config
        self.head_labels = dict(heads)
        self.adapter_tasks = list(adapter_tasks)
        self.with_fusion = with_fusion
        self.params = ParameterStore()
        rng = np.random.default_rng(seed)
        init_encoder_params(config, self.params, rng)
        for task in self.adapter_tasks:
            init_adapter_params(config, self.params, task, rng)
        if with_fusion:
            init_fusion_params(config, self.params, rng)
        for task, num_labels in self.head_labels.items():
            init_head_params(config, self.params, task, num_labels, rng)
        self.groups = build_freeze_groups(self.params)
        self.slot: SingleAdapterSlot | FusionSlot | None = None
        self.slot_mode: tuple = ("none",)

    # -- slots ---------------------------------------------------------
    def attach(self, mode: str, tasks: str | Sequence[str] | None = None) -> None:
        """Set the slot wiring used by every encoder layer.

        mode "none" | "single" (one task name) | "fusion" (task list).
        """
        if mode == "none":
            self.slot = None
            self.slot_mode = ("none",)
            return
        if mode == "single":
            if not isinstance(tasks, str):
                raise ConfigError("single-adapter mode takes one task name")
            if tasks not in self.adapter_tasks:
                raise ConfigError(f"unknown adapter task {tasks!r}")
            self.slot = SingleAdapterSlot(self.config, self.params, tasks)
            self.slot_mode = ("single", tasks)
            return
        if mode == "fusion":
            if not self.with_fusion:
                raise ConfigError("bank was built without fusion parameters")
            task_list = list(tasks or ())
            if not task_list:
                raise ConfigError("fusion mode needs at least one task")
            for t in task_list:
                if t not in self.adapter_tasks:
                    raise ConfigError(f"unknown adapter task {t!r}")
            self.slot = FusionSlot(self.config, self.params, task_list)
            self.slot_mode = ("fusion", tuple(task_list))
            return
        raise ConfigError(f"unknown slot mode {mode!r}")

    # -- freezing ------------------------------------------------------
    def set_trainable(self, stage: str, task: str | None = None) -> None:
        """stage "adapter": adapter + head of ``task`` train; "fusion":
        fusion + head of ``task`` train; "finetune": encoder + head train;
        everything else is frozen."""
        if stage not in ("adapter", "fusion", "finetune"):
            raise ConfigError(f"unknown stage {stage!r}")
        if stage in ("adapter", "fusion", "finetune") and task is None:
            raise ConfigError("stage needs a target task")
        if task not in self.head_labels:
            raise ConfigError(f"no head for task {task!r}")
        flags = {g: False for g in self.groups.groups}
        flags[f"heads.{task}"] = True
        if stage == "adapter":
            if f"adapters.{task}" not in self.groups.groups:
                raise ConfigError(f"no adapter parameters for task {task!r}")
            flags[f"adapters.{task}"] = True
        elif stage == "fusion":
            if "fusion" not in self.groups.groups:
                raise ConfigError("no fusion parameters in this bank")
            flags["fusion"] = True
        else:
            flags["encoder"] = True
        self.groups.trainable = flags
        for g, names in self.groups.groups.items():
            self.params.set_requires_grad(names, flags[g])

    # -- forward -------------------------------------------------------
    def forward(self, batch: Batch, task: str) -> Tensor:
        _, cls_state = encode(self.config, self.params, batch, self.slot)
        return head_forward(self.config, self.params, task, cls_state)

    def fusion_weights(self) -> dict[int, np.ndarray]:
        if isinstance(self.slot, FusionSlot):
            return self.slot.last_weights
        return {}


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def _count(shapes: Iterator[tuple[str, tuple[int, ...]]]) -> int:
    return sum(int(np.prod(shape)) for _, shape in shapes)


def count_parameters(config: ModelConfig, mode: str, num_tasks: int = 1,
                     num_labels: int = 6) -> dict[str, int]:
    """Exact {total, trainable} counts for a configured model, by shape
    enumeration only (no weight allocation)."""
    if mode not in ("finetune", "adapter", "fusion"):
        raise ConfigError(f"unknown counting mode {mode!r}")
    if num_tasks < 1:
        raise ContractError("num_tasks must be at least 1")
    enc = _count(encoder_param_shapes(config))
    adapter = _count(adapter_param_shapes(config, "t"))
    head = _count(head_param_shapes(config, "t", num_labels))
    fusion = _count(fusion_param_shapes(config))
    if mode == "finetune":
        total = enc + head
        trainable = total
    elif mode == "adapter":
        total = enc + adapter + head
        trainable = adapter + head
    else:
        total = enc + num_tasks * adapter + fusion + head
        trainable = fusion + head
    return {"total": total, "trainable": trainable}


def adapter_parameter_count(config: ModelConfig) -> int:
    """Size of one task adapter; the Fusion(T+2) - Fusion(T) total step."""
    return _count(adapter_param_shapes(config, "t"))
