"""Backbone network: CNN stages interleaved with multimodal memory layers.

The controller maps a normalized RGB observation plus a symbolic mode to a
steering/velocity pair. Memory layers sit after the early backbone stages so
history is integrated at several spatial scales; each can be disabled for
ablation studies, and the multimodal flag switches between one memory bank
per mode and a single shared bank (mode then enters as a one-hot feature
concatenated to the pooled vector ahead of the dense head).
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .memory import (
    MODES,
    CellMasks,
    MemoryCellParams,
    Mode,
    MultimodalLayer,
    MultimodalLayerState,
    group_count,
    sample_cell_masks,
)
from .tensor import ConfigError, Tensor


@dataclass
class Action:
    """Steering rate (rad/s) and forward velocity (m/s); clamped by the simulator."""

    steering: float
    velocity: float

    def finite(self) -> bool:
        return bool(np.isfinite(self.steering) and np.isfinite(self.velocity))


ABLATION_VARIANTS = ("full", "no-mem", "L1-only", "L3-only", "no-multimodal")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    input_hw: int = 112
    stage_widths: tuple[int, ...] = (8, 16, 32, 64)
    stage_kernels: tuple[int, ...] = (5, 3, 3, 3)
    stage_strides: tuple[int, ...] = (4, 2, 2, 2)
    memory_after: tuple[int, ...] = (0, 1, 2)
    memory_enabled: tuple[bool, ...] = (True, True, True)
    multimodal: bool = True
    cell_kernel: int = 3
    dropout_rate: float = 0.1
    groups_cap: int = 32
    head_hidden: int = 64
    action_dim: int = 2
    precision: str = "float64"

    def __post_init__(self):
        n = len(self.stage_widths)
        if not (len(self.stage_kernels) == len(self.stage_strides) == n):
            raise ConfigError("stage widths/kernels/strides must have equal length")
        if list(self.memory_after) != sorted(set(self.memory_after)):
            raise ConfigError("memory layer positions must be strictly increasing")
        if any(p >= n for p in self.memory_after):
            raise ConfigError("memory layer position beyond last backbone stage")
        if len(self.memory_enabled) != len(self.memory_after):
            raise ConfigError("memory_enabled must align with memory_after")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def spatial_schedule(self) -> list[int]:
        """Feature-map side length after each backbone stage."""
        size = self.input_hw
        out = []
        for k, s in zip(self.stage_kernels, self.stage_strides):
            size = (size + 2 * (k // 2) - k) // s + 1
            out.append(size)
        return out

    def enabled_memory_stages(self) -> list[int]:
        return [p for p, on in zip(self.memory_after, self.memory_enabled) if on]

    @property
    def pooled_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def head_in_dim(self) -> int:
        return self.pooled_dim + (0 if self.multimodal else len(MODES))

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, s: str) -> "NetworkConfig":
        d = json.loads(s)
        for key in ("stage_widths", "stage_kernels", "stage_strides",
                    "memory_after", "memory_enabled"):
            d[key] = tuple(d[key])
        return cls(**d)


def build_ablation(config: NetworkConfig, variant: str) -> NetworkConfig:
    """Derive an ablated configuration; only layer presence / the multimodal
    flag change, never widths or other hyperparameters."""
    n = len(config.memory_after)
    if variant == "full":
        return replace(config, memory_enabled=(True,) * n, multimodal=True)
    if variant == "no-mem":
        return replace(config, memory_enabled=(False,) * n)
    if variant == "L1-only":
        return replace(config, memory_enabled=tuple(i == 0 for i in range(n)))
    if variant == "L3-only":
        return replace(config, memory_enabled=tuple(i == n - 1 for i in range(n)))
    if variant == "no-multimodal":
        return replace(config, memory_enabled=(True,) * n, multimodal=False)
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")


@dataclass
class NetworkMasks:
    """Channel keep-masks for every enabled memory layer, fixed for one sequence."""

    per_layer: list[CellMasks]
    seed: Optional[int] = None


def _one_hot_modes(modes: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros((len(modes), len(MODES)), dtype=dtype)
    out[np.arange(len(modes)), modes] = 1.0
    return out


class Network:
    """The assembled controller. Owns parameters; recurrent state is external."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        dt = config.dtype
        self.stages: list[tuple[Tensor, Tensor]] = []
        c_in = config.in_channels
        for w, k in zip(config.stage_widths, config.stage_kernels):
            std = (1.0 / (c_in * k * k)) ** 0.5
            kernel = Tensor(rng.normal(0.0, std, (w, c_in, k, k)), requires_grad=True, dtype=dt)
            bias = Tensor(np.zeros(w), requires_grad=True, dtype=dt)
            self.stages.append((kernel, bias))
            c_in = w

        self.memory_layers: list[MultimodalLayer] = []
        self._memory_stage: list[int] = []
        for pos, on in zip(config.memory_after, config.memory_enabled):
            if not on:
                continue
            self.memory_layers.append(MultimodalLayer.create(
                config.stage_widths[pos], config.cell_kernel, config.multimodal,
                rng, config.groups_cap, dt))
            self._memory_stage.append(pos)

        def dense_init(m, n):
            std = (1.0 / n) ** 0.5
            w = Tensor(rng.normal(0.0, std, (m, n)), requires_grad=True, dtype=dt)
            b = Tensor(np.zeros(m), requires_grad=True, dtype=dt)
            return w, b

        self.head1 = dense_init(config.head_hidden, config.head_in_dim)
        self.head2 = dense_init(config.action_dim, config.head_hidden)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (k, b) in enumerate(self.stages):
            yield f"stage{i}.kernel", k
            yield f"stage{i}.bias", b
        for layer, pos in zip(self.memory_layers, self._memory_stage):
            yield from layer.named(f"mem{pos}.")
        yield "head1.weight", self.head1[0]
        yield "head1.bias", self.head1[1]
        yield "head2.weight", self.head2[0]
        yield "head2.bias", self.head2[1]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    # -- state and masks ----------------------------------------------------

    def reset_state(self, batch: Optional[int] = None) -> list[MultimodalLayerState]:
        """Zero-filled (c, h) for every enabled memory layer at the spatial sizes
        induced by the configured input resolution. Idempotent."""
        sched = self.config.spatial_schedule()
        return [layer.zero_layer_state(sched[pos], sched[pos], batch, self.config.dtype)
                for layer, pos in zip(self.memory_layers, self._memory_stage)]

    def sample_masks(self, rng: np.random.Generator,
                     batch: Optional[int] = None) -> NetworkMasks:
        rate = self.config.dropout_rate
        return NetworkMasks(
            per_layer=[sample_cell_masks(layer.channels, rate, rng, batch)
                       for layer in self.memory_layers],
            seed=None,
        )

    # -- forward ------------------------------------------------------------

    def step(self, obs: Tensor, modes: Union[Mode, int, np.ndarray],
             state: Sequence[MultimodalLayerState],
             masks: Optional[NetworkMasks] = None,
             return_features: bool = False):
        """One control step. obs is (3,H,W) or (B,3,H,W); modes a Mode or an
        int array of per-row modes. Returns (action tensor, new state[,
        pooled features])."""
        batched = obs.ndim == 4
        if batched:
            mode_arr = np.asarray(modes, dtype=np.int64)
            if mode_arr.ndim == 0:
                mode_arr = np.full(obs.shape[0], int(mode_arr), dtype=np.int64)
        else:
            mode_arr = None
            mode = Mode(int(modes))
        if len(state) != len(self.memory_layers):
            raise ConfigError(
                f"state holds {len(state)} layer entries, network has {len(self.memory_layers)}")

        exp_hw = (self.config.in_channels, self.config.input_hw, self.config.input_hw)
        got = obs.shape[1:] if batched else obs.shape
        if tuple(got) != exp_hw:
            raise T.ShapeError(f"observation shape {tuple(got)} != expected {exp_hw}")

        new_states: list[MultimodalLayerState] = []
        x = obs
        mem_idx = 0
        for si, (kernel, bias) in enumerate(self.stages):
            x = T.tanh(T.conv2d(x, kernel, bias, stride=self.config.stage_strides[si],
                                padding=self.config.stage_kernels[si] // 2))
            if mem_idx < len(self._memory_stage) and self._memory_stage[mem_idx] == si:
                layer = self.memory_layers[mem_idx]
                cm = masks.per_layer[mem_idx] if masks is not None else None
                if batched:
                    x, ns = layer.step_batched(x, mode_arr, state[mem_idx], cm)
                else:
                    x, ns = layer.step(x, mode, state[mem_idx], cm)
                new_states.append(ns)
                mem_idx += 1

        pooled = T.global_avg_pool(x)
        feats = pooled
        if not self.config.multimodal:
            if batched:
                onehot = Tensor(_one_hot_modes(mode_arr, self.config.dtype))
            else:
                onehot = Tensor(_one_hot_modes(np.array([int(mode)]), self.config.dtype)[0])
            pooled = T.concat([pooled, onehot], axis=-1)
        hidden = T.tanh(T.dense(pooled, *self.head1))
        action = T.dense(hidden, *self.head2)
        if return_features:
            return action, new_states, feats
        return action, new_states

    def act(self, obs: Tensor, mode: Mode, state, masks=None):
        """Single-observation convenience wrapper returning an Action."""
        out, new_state = self.step(obs, mode, state, masks)
        a = Action(steering=float(out.data[0]), velocity=float(out.data[1]))
        return a, new_state


def forward(net: Network, obs: Tensor, mode, state, masks=None):
    """Functional alias for Network.step."""
    return net.step(obs, mode, state, masks)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: Network, extra: Optional[dict] = None):
    """Versioned container: config JSON + named parameter arrays (+ optional
    JSON-serializable extras such as normalization statistics)."""
    arrays = {f"param/{name}": t.data for name, t in net.named_parameters()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": json.loads(net.config.to_json()),
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> tuple[Network, dict]:
    with np.load(path) as z:
        if "__meta__" not in z:
            raise CheckpointError(f"{path}: not a controller checkpoint")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        config = NetworkConfig.from_json(json.dumps(meta["config"]))
        net = Network(config, np.random.default_rng(0))
        names = {name for name, _ in net.named_parameters()}
        stored = {k[len("param/"):] for k in z.files if k.startswith("param/")}
        if names != stored:
            missing = names - stored
            surplus = stored - names
            raise CheckpointError(
                f"{path}: parameter names mismatch (missing={sorted(missing)[:3]}, "
                f"surplus={sorted(surplus)[:3]})")
        for name, t in net.named_parameters():
            arr = z[f"param/{name}"]
            if arr.shape != t.data.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            t.data = arr.astype(config.dtype, copy=True)
        return net, meta["extra"]
