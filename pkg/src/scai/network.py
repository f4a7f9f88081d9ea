"""Early-exit residual network over 1-D spectral curves.

Architecture: a stem convolution lifts the 1-channel curve to the first
block's channel count; L residual blocks follow, each closed by a
classifier head (channel-pooled features through a linear layer and
softmax). Between consecutive blocks a transfer convolution (kernel 3,
stride 2, doubling channels by default) runs alongside a stride-2 1x1
projection shortcut, and their sum feeds the next block, so every depth
keeps a direct path to shallow information.

Blocks run either as plain residual stacks or position-adaptively (one
halting branch per unit except the last). Cost accounting counts
convolution and linear multiply-accumulates only; adaptive blocks count
just the active positions of each unit, and the static table for an
adaptive model includes the halting branch at every unit so the realized
cost of a sample can never exceed it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from scai.halting import HaltingParams, HaltingTrace, pa_block_forward
from scai.tensor import ShapeError, Tensor, conv1d, global_avg_pool, linear, no_grad, relu, softmax

CHECKPOINT_MAGIC = b"SCAI-CHECKPOINT-1\n"


@dataclass
class ScaiConfig:
    """Architecture, halting, and training hyperparameters."""

    blocks: int = 4
    units_per_block: tuple[int, ...] = (4, 4, 4, 4)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    input_width: int = 400
    classes: int = 12
    epsilon: float = 0.02
    gamma: float = 1e-5
    pa_enabled: bool = True
    distill_enabled: bool = True
    seed: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 50
    # Ablation switches, both off by default: intermediate exits can also
    # receive a hard-label loss, and the distillation teacher can be the
    # next exit instead of the deepest one.
    intermediate_hard_labels: bool = False
    stepwise_teacher: bool = False

    def validate(self) -> None:
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if len(self.units_per_block) != self.blocks:
            raise ValueError(
                f"units_per_block has {len(self.units_per_block)} entries for {self.blocks} blocks"
            )
        if len(self.channels) != self.blocks:
            raise ValueError(f"channels has {len(self.channels)} entries for {self.blocks} blocks")
        if any(s < 1 for s in self.units_per_block):
            raise ValueError("every block needs at least one unit")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel counts must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.input_width < 2:
            raise ValueError(f"input_width must be >= 2, got {self.input_width}")
        if min(block_widths(self)) < 2:
            raise ValueError("input_width too small: a block would shrink below width 2")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScaiConfig":
        kwargs = dict(data)
        for key in ("units_per_block", "channels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def block_widths(config: ScaiConfig) -> list[int]:
    """Feature-map width of each block (stride-2 transfers halve widths)."""
    widths = [config.input_width]
    for _ in range(config.blocks - 1):
        w = widths[-1]
        widths.append((w - 1) // 2 + 1)
    return widths


@dataclass
class UnitParams:
    weight: Tensor  # [C, C, 3]
    bias: Tensor    # [C]


@dataclass
class TransferParams:
    weight: Tensor       # [C_next, C, 3] stride-2 transfer
    bias: Tensor         # [C_next]
    proj_weight: Tensor  # [C_next, C, 1] stride-2 projection shortcut
    proj_bias: Tensor    # [C_next]


@dataclass
class HeadParams:
    weight: Tensor  # [classes, C]
    bias: Tensor    # [classes]


@dataclass
class BlockParams:
    units: list[UnitParams]
    halts: list[HaltingParams]


@dataclass
class ScaiModel:
    config: ScaiConfig
    stem: UnitParams = field(repr=False, default=None)  # type: ignore[assignment]
    blocks: list[BlockParams] = field(repr=False, default_factory=list)
    transfers: list[TransferParams] = field(repr=False, default_factory=list)
    heads: list[HeadParams] = field(repr=False, default_factory=list)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Canonical (name, tensor) pairs in deterministic build order."""
        yield "stem.conv.weight", self.stem.weight
        yield "stem.conv.bias", self.stem.bias
        for l, block in enumerate(self.blocks, start=1):
            for s, unit in enumerate(block.units, start=1):
                yield f"block{l}.unit{s}.conv.weight", unit.weight
                yield f"block{l}.unit{s}.conv.bias", unit.bias
            for s, halt in enumerate(block.halts, start=1):
                yield f"block{l}.unit{s}.halt.conv.weight", halt.conv_weight
                yield f"block{l}.unit{s}.halt.global.weight", halt.global_weight
                yield f"block{l}.unit{s}.halt.bias", halt.bias
            yield f"head{l}.linear.weight", self.heads[l - 1].weight
            yield f"head{l}.linear.bias", self.heads[l - 1].bias
            if l <= len(self.transfers):
                t = self.transfers[l - 1]
                yield f"transfer{l}.conv.weight", t.weight
                yield f"transfer{l}.conv.bias", t.bias
                yield f"transfer{l}.proj.weight", t.proj_weight
                yield f"transfer{l}.proj.bias", t.proj_bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, gain: float = 2.0) -> Tensor:
    std = np.sqrt(gain / (c_in * k))
    return Tensor(rng.normal(0.0, std, size=(c_out, c_in, k)), requires_grad=True)


def _he_linear(rng: np.random.Generator, o: int, d: int, gain: float = 2.0) -> Tensor:
    std = np.sqrt(gain / d)
    return Tensor(rng.normal(0.0, std, size=(o, d)), requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def build_model(config: ScaiConfig, rng: np.random.Generator | None = None) -> ScaiModel:
    """Construct a model with He-style fan-in initialization, zero biases.

    Parameters are drawn in canonical order from a generator seeded by
    ``config.seed``, so two builds with the same config are
    byte-identical. Halting branches are always allocated (even with
    ``pa_enabled=False``) so plain and adaptive variants of one seed
    share every other weight.

    All weights use fan-in scaling; the gains are depth-aware so that
    activation variance stays near constant through the residual stacks
    (there are no normalization layers to absorb drift): residual-branch
    convolutions are damped by the total unit count, and the transfer /
    projection pair each carry half a unit of gain so their sum
    preserves scale.
    """
    config.validate()
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0]))
    total_units = sum(config.units_per_block)
    unit_gain = 2.0 / total_units
    model = ScaiModel(config=config)
    model.stem = UnitParams(
        weight=_he_conv(rng, config.channels[0], 1, 3, gain=1.0),
        bias=_zeros(config.channels[0]),
    )
    for l in range(config.blocks):
        ch = config.channels[l]
        units = [
            UnitParams(weight=_he_conv(rng, ch, ch, 3, gain=unit_gain), bias=_zeros(ch))
            for _ in range(config.units_per_block[l])
        ]
        halts = [
            HaltingParams(
                conv_weight=_he_conv(rng, 1, ch, 3, gain=1.0),
                global_weight=_he_linear(rng, 1, ch, gain=1.0),
                bias=_zeros(1),
            )
            for _ in range(config.units_per_block[l] - 1)
        ]
        model.blocks.append(BlockParams(units=units, halts=halts))
        model.heads.append(HeadParams(weight=_he_linear(rng, config.classes, ch), bias=_zeros(config.classes)))
        if l + 1 < config.blocks:
            ch_next = config.channels[l + 1]
            model.transfers.append(TransferParams(
                weight=_he_conv(rng, ch_next, ch, 3, gain=0.5),
                bias=_zeros(ch_next),
                proj_weight=_he_conv(rng, ch_next, ch, 1, gain=0.5),
                proj_bias=_zeros(ch_next),
            ))
    return model


# -- forward -------------------------------------------------------------


def plain_block_forward(x: Tensor, block: BlockParams) -> Tensor:
    """Straight residual stack: x_s = F_s(x_{s-1}) + x_{s-1}, no halting."""
    cur = x
    for unit in block.units:
        cur = _unit_fn(unit)(cur) + cur
    return cur


def _unit_fn(unit: UnitParams):
    # Pre-activation residual function: F(x) = conv3(relu(x)).
    def fn(t: Tensor) -> Tensor:
        return conv1d(relu(t), unit.weight, unit.bias, stride=1, padding=1)
    return fn


def classifier_head(x: Tensor, head: HeadParams) -> Tensor:
    """Channel-pooled features -> linear -> softmax class distribution."""
    return softmax(linear(global_avg_pool(x), head.weight, head.bias))


def conv_macs(c_out: int, c_in: int, k: int, w_out: int) -> int:
    """Multiply-accumulates of a convolution producing ``w_out`` positions."""
    return int(c_out) * int(c_in) * int(k) * int(w_out)


@dataclass
class ExitStage:
    """One classifier exit during a forward pass (live tensors for training)."""

    exit_index: int
    probs: Tensor
    features: Tensor
    trace: HaltingTrace | None
    flops: int


@dataclass
class ExitOutcome:
    """Inference-facing snapshot of an exit."""

    exit_index: int
    probs: np.ndarray
    confidence: float
    flops_used: int
    traces: list[HaltingTrace]
    over_budget: bool = False


def iter_exit_stages(
    model: ScaiModel,
    values: np.ndarray,
    *,
    mode: str | None = None,
    start_block: int = 0,
    features: np.ndarray | None = None,
    flops_base: int = 0,
) -> Iterator[ExitStage]:
    """Lazily yield exits block by block; breaking early skips deeper compute.

    ``mode`` is 'adaptive', 'plain', or 'forced' (adaptive machinery with
    halting suppressed: every position runs every unit). Defaults to the
    config's ``pa_enabled``. ``start_block=l`` resumes from block-l
    boundary features (used by the offload path); ``flops_base`` seeds
    the cost accumulator for resumed runs.
    """
    cfg = model.config
    if mode is None:
        mode = "adaptive" if cfg.pa_enabled else "plain"
    if mode not in ("adaptive", "plain", "forced"):
        raise ValueError(f"unknown forward mode {mode!r}")
    if not 0 <= start_block < cfg.blocks:
        raise ValueError(f"start_block must lie in [0, {cfg.blocks}), got {start_block}")
    widths = block_widths(cfg)
    flops = int(flops_base)

    if start_block == 0:
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (cfg.input_width,):
            raise ShapeError(f"expected input of shape ({cfg.input_width},), got {arr.shape}")
        x = conv1d(Tensor(arr[None, :]), model.stem.weight, model.stem.bias, stride=1, padding=1)
        flops += conv_macs(cfg.channels[0], 1, 3, widths[0])
    else:
        arr = np.asarray(features, dtype=np.float64)
        expected = (cfg.channels[start_block - 1], widths[start_block - 1])
        if arr.shape != expected:
            raise ShapeError(f"resume features must have shape {expected}, got {arr.shape}")
        x = Tensor(arr)

    for l in range(start_block, cfg.blocks):
        if l > 0:
            t = model.transfers[l - 1]
            main = conv1d(x, t.weight, t.bias, stride=2, padding=1)
            short = conv1d(x, t.proj_weight, t.proj_bias, stride=2, padding=0)
            x = main + short
            flops += conv_macs(t.weight.data.shape[0], t.weight.data.shape[1], 3, widths[l])
            flops += conv_macs(t.proj_weight.data.shape[0], t.proj_weight.data.shape[1], 1, widths[l])
        block = model.blocks[l]
        ch = cfg.channels[l]
        unit_fns = [_unit_fn(u) for u in block.units]
        trace: HaltingTrace | None
        if mode == "plain":
            x = plain_block_forward(x, block)
            trace = None
            flops += len(block.units) * conv_macs(ch, ch, 3, widths[l])
        else:
            x, trace = pa_block_forward(
                x, unit_fns, block.halts, cfg.epsilon, force_full=(mode == "forced")
            )
            n_units = len(block.units)
            for s in range(n_units):
                active = int(trace.active[s].sum())
                if active == 0:
                    continue
                flops += conv_macs(ch, ch, 3, active)
                if mode == "adaptive" and s < n_units - 1:
                    flops += conv_macs(1, ch, 3, active) + ch
        probs = classifier_head(x, model.heads[l])
        flops += ch * cfg.classes
        yield ExitStage(exit_index=l + 1, probs=probs, features=x, trace=trace, flops=flops)


def _outcome_from_stage(stage: ExitStage, traces: list[HaltingTrace]) -> ExitOutcome:
    probs = stage.probs.data.copy()
    return ExitOutcome(
        exit_index=stage.exit_index,
        probs=probs,
        confidence=float(probs.max()),
        flops_used=stage.flops,
        traces=list(traces),
    )


def forward_to_exit(model: ScaiModel, values: np.ndarray, exit_index: int) -> ExitOutcome:
    """Run the network up to one exit and snapshot its outcome."""
    if not 1 <= exit_index <= model.config.blocks:
        raise ValueError(
            f"exit index {exit_index} out of range [1, {model.config.blocks}]"
        )
    traces: list[HaltingTrace] = []
    with no_grad():
        for stage in iter_exit_stages(model, values):
            if stage.trace is not None:
                traces.append(stage.trace)
            if stage.exit_index == exit_index:
                return _outcome_from_stage(stage, traces)
    raise AssertionError("unreachable: exit index validated above")


def forward_all_outcomes(model: ScaiModel, values: np.ndarray) -> list[ExitOutcome]:
    """Evaluate every exit in one pass (shared prefix computation)."""
    outcomes: list[ExitOutcome] = []
    traces: list[HaltingTrace] = []
    with no_grad():
        for stage in iter_exit_stages(model, values):
            if stage.trace is not None:
                traces.append(stage.trace)
            outcomes.append(_outcome_from_stage(stage, traces))
    return outcomes


# -- static cost table -----------------------------------------------------


def static_cost_table(config: ScaiConfig) -> np.ndarray:
    """Cumulative worst-case multiply-accumulates through each exit.

    For a position-adaptive config the halting branch is charged at
    every unit with all positions active, which makes the realized cost
    of any sample a subset of this table's operations.
    """
    config.validate()
    widths = block_widths(config)
    costs = np.zeros(config.blocks, dtype=np.int64)
    running = conv_macs(config.channels[0], 1, 3, widths[0])
    heads = 0
    for l in range(config.blocks):
        ch = config.channels[l]
        w = widths[l]
        if l > 0:
            running += conv_macs(ch, config.channels[l - 1], 3, w)
            running += conv_macs(ch, config.channels[l - 1], 1, w)
        running += config.units_per_block[l] * conv_macs(ch, ch, 3, w)
        if config.pa_enabled:
            running += (config.units_per_block[l] - 1) * (conv_macs(1, ch, 3, w) + ch)
        heads += ch * config.classes
        costs[l] = running + heads
    return costs


def write_cost_table_csv(config: ScaiConfig, path: str) -> None:
    import csv as _csv

    costs = static_cost_table(config)
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(["exit_index", "static_flops"])
        for l, c in enumerate(costs, start=1):
            writer.writerow([l, int(c)])


# -- checkpoint format -----------------------------------------------------


def save_checkpoint(model: ScaiModel, path: str) -> None:
    """Write magic line, JSON header (config + parameter manifest), raw blobs.

    Parameter arrays are stored row-major as little-endian float64 in
    manifest order. The format contains no timestamps, so identical
    models serialize to identical bytes.
    """
    names: list[dict] = []
    blobs: list[bytes] = []
    for name, tensor in model.named_parameters():
        names.append({"name": name, "shape": list(tensor.data.shape)})
        blobs.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    header = json.dumps({"config": model.config.to_dict(), "params": names}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header.encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> ScaiModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        config = ScaiConfig.from_dict(header["config"])
        model = build_model(config)
        params = dict(model.named_parameters())
        for entry in header["params"]:
            name = entry["name"]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint at parameter {name}")
            if name not in params:
                raise ValueError(f"{path}: unknown parameter {name}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            if params[name].data.shape != arr.shape:
                raise ValueError(
                    f"{path}: parameter {name} has shape {arr.shape}, model expects "
                    f"{params[name].data.shape}"
                )
            params[name].data = arr.copy()
        extra = fh.read(1)
        if extra:
            raise ValueError(f"{path}: trailing bytes after last parameter")
    return model


def clone_config(config: ScaiConfig, **overrides) -> ScaiConfig:
    cfg = replace(config, **overrides)
    cfg.validate()
    return cfg
