"""Staged encoder: stem, block1..4, projector, optional predictor.

Stages are small MLPs described by layer tuples ``("linear", in, out)``,
``("bn",)`` and ``("relu",)``. The staged decomposition is the unit at
which momentum policies, telemetry and forward accounting operate, so
stage boundaries are explicit everywhere: forwards record one output
tensor per stage and can restart mid-network (:func:`forward_from`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import core
from .core import Tensor
from .errors import ConfigError, DimensionError

STAGE_ORDER = ("stem", "block1", "block2", "block3", "block4", "projector", "predictor")
BLOCK_STAGES = ("block1", "block2", "block3", "block4")
BACKBONE_STAGES = ("stem", "block1", "block2", "block3", "block4")

# Parameter-name suffixes that receive gradients; running statistics do not.
TRAINABLE_SUFFIXES = ("w", "b", "gamma", "beta")


def linear(in_dim: int, out_dim: int) -> tuple:
    return ("linear", int(in_dim), int(out_dim))


def bn() -> tuple:
    return ("bn",)


def relu_layer() -> tuple:
    return ("relu",)


def parse_layer(text: str) -> tuple:
    """Parse the config-file layer syntax: ``linear(8,16)``, ``bn``, ``relu``."""
    s = text.strip().lower()
    if s == "bn":
        return bn()
    if s == "relu":
        return relu_layer()
    if s.startswith("linear(") and s.endswith(")"):
        inner = s[len("linear("):-1]
        parts = inner.split(",")
        if len(parts) == 2:
            try:
                return linear(int(parts[0]), int(parts[1]))
            except ValueError:
                pass
    raise ConfigError(f"unrecognized layer descriptor: {text!r}")


@dataclass(frozen=True)
class StageSpec:
    """One stage: an ordered layer list plus an optional BN on its output."""

    name: str
    layers: tuple
    output_bn: bool = False

    def walk_width(self, in_width: int) -> int:
        """Output width for a given input width; validates the dim chain."""
        w = in_width
        for layer in self.layers:
            if layer[0] == "linear":
                if layer[1] != w:
                    raise ConfigError(
                        f"stage '{self.name}': linear expects width {layer[1]}, chain carries {w}"
                    )
                w = layer[2]
        return w


@dataclass(frozen=True)
class EncoderConfig:
    """Ordered stages with the input width and the initialization seed.

    ``residual`` adds the stage input to the stage output for block1..4
    (requires equal in/out widths).
    """

    input_dim: int
    stages: tuple
    seed: int = 0
    residual: bool = False

    def __post_init__(self):
        names = tuple(s.name for s in self.stages)
        required = STAGE_ORDER[:6]
        if names != required and names != STAGE_ORDER:
            raise ConfigError(
                f"stage order must be {required} with optional trailing 'predictor', got {names}"
            )
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        widths = self.stage_input_dims()  # validates the chain
        if self.residual:
            for s in self.stages:
                if s.name in BLOCK_STAGES:
                    if s.walk_width(widths[s.name]) != widths[s.name]:
                        raise ConfigError(
                            f"residual blocks need equal in/out widths, stage '{s.name}' differs"
                        )
        if self.has_predictor:
            proj_out = widths["predictor"]
            pred_out = self.stage_map["predictor"].walk_width(proj_out)
            if pred_out != proj_out:
                raise ConfigError(
                    f"predictor must preserve the projector width {proj_out}, produces {pred_out}"
                )

    @property
    def stage_map(self) -> dict:
        return {s.name: s for s in self.stages}

    @property
    def has_predictor(self) -> bool:
        return any(s.name == "predictor" for s in self.stages)

    def stage_input_dims(self) -> dict:
        dims = {}
        w = self.input_dim
        for s in self.stages:
            dims[s.name] = w
            w = s.walk_width(w)
        return dims

    def stage_output_dims(self) -> dict:
        dims = {}
        w = self.input_dim
        for s in self.stages:
            w = s.walk_width(w)
            dims[s.name] = w
        return dims


def default_stages(
    input_dim: int = 32,
    width: int = 64,
    proj_hidden: int = 128,
    out_dim: int = 32,
    predictor: bool = True,
    viz: bool = False,
    bn1: bool = False,
    bn2: bool = False,
) -> tuple:
    """The paper-shaped reference layout at desk scale.

    ``viz=True`` narrows the projector hidden width to 2 so the final
    linear's filters are 2-d and can be recorded as trajectories. ``bn1``
    and ``bn2`` insert BN after block4 and after the projector.
    """
    hidden = 2 if viz else proj_hidden
    block = (linear(width, width), bn(), relu_layer(), linear(width, width), bn(), relu_layer())
    stages = [
        StageSpec("stem", (linear(input_dim, width), bn(), relu_layer())),
        StageSpec("block1", block),
        StageSpec("block2", block),
        StageSpec("block3", block),
        StageSpec("block4", block, output_bn=bn1),
        StageSpec(
            "projector",
            (linear(width, hidden), bn(), relu_layer(), linear(hidden, out_dim)),
            output_bn=bn2,
        ),
    ]
    if predictor:
        stages.append(
            StageSpec(
                "predictor",
                (linear(out_dim, proj_hidden), bn(), relu_layer(), linear(proj_hidden, out_dim)),
            )
        )
    return tuple(stages)


def default_encoder_config(seed: int = 0, **kwargs) -> EncoderConfig:
    input_dim = kwargs.pop("input_dim", 32)
    residual = kwargs.pop("residual", False)
    return EncoderConfig(
        input_dim=input_dim,
        stages=default_stages(input_dim=input_dim, **kwargs),
        seed=seed,
        residual=residual,
    )


class ParamSet:
    """Per-stage named parameter tensors for one network copy.

    Trainable entries (``w``, ``b``, ``gamma``, ``beta``) require grad;
    BN running statistics (``rm``, ``rv``) are plain state mutated in
    place by training-mode forwards.
    """

    def __init__(self, config: EncoderConfig, stages: dict):
        self.config = config
        self.stages = stages  # stage name -> {param name -> Tensor}

    def stage_names(self) -> tuple:
        return tuple(s.name for s in self.config.stages)

    def named_parameters(self, trainable_only: bool = True) -> Iterator:
        for stage, params in self.stages.items():
            for name, t in params.items():
                if trainable_only and not t.requires_grad:
                    continue
                yield stage, name, t

    def param_count(self, stage: str) -> int:
        """Number of trainable scalars in a stage (running stats excluded)."""
        return sum(t.size for t in self.stages[stage].values() if t.requires_grad)

    def stage_bytes(self, stage: str) -> int:
        """Storage bytes for a stage, running statistics included."""
        return sum(t.data.nbytes for t in self.stages[stage].values())

    def total_bytes(self, exclude: tuple = ()) -> int:
        return sum(self.stage_bytes(s) for s in self.stages if s not in exclude)

    def copy_stage_values(self, stage: str) -> dict:
        out = {}
        for name, t in self.stages[stage].items():
            out[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out

    def snapshot(self) -> dict:
        """Plain dict of copied arrays, for bitwise comparisons in tests."""
        return {
            f"{stage}/{name}": t.data.copy()
            for stage, params in self.stages.items()
            for name, t in params.items()
        }


def _init_stage(spec: StageSpec, in_width: int, rng: np.random.Generator) -> dict:
    params: dict = {}
    w = in_width
    for i, layer in enumerate(spec.layers):
        if layer[0] == "linear":
            fan_in, out = layer[1], layer[2]
            std = np.sqrt(2.0 / fan_in)
            params[f"l{i}.w"] = Tensor(rng.normal(0.0, std, size=(fan_in, out)), requires_grad=True)
            params[f"l{i}.b"] = Tensor(np.zeros(out), requires_grad=True)
            w = out
        elif layer[0] == "bn":
            params[f"l{i}.gamma"] = Tensor(np.ones(w), requires_grad=True)
            params[f"l{i}.beta"] = Tensor(np.zeros(w), requires_grad=True)
            params[f"l{i}.rm"] = Tensor(np.zeros(w))
            params[f"l{i}.rv"] = Tensor(np.ones(w))
    if spec.output_bn:
        params["out.gamma"] = Tensor(np.ones(w), requires_grad=True)
        params["out.beta"] = Tensor(np.zeros(w), requires_grad=True)
        params["out.rm"] = Tensor(np.zeros(w))
        params["out.rv"] = Tensor(np.ones(w))
    return params


def build_encoder(config: EncoderConfig) -> ParamSet:
    """Initialize parameters: fan-in-scaled Gaussians for linear weights,
    zeros for biases, identity BN affine. Deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    in_dims = config.stage_input_dims()
    stages = {s.name: _init_stage(s, in_dims[s.name], rng) for s in config.stages}
    return ParamSet(config, stages)


@dataclass
class StageActivations:
    """Stage-name -> output tensor for one forward pass of one view."""

    network: str
    entries: dict = field(default_factory=dict)

    def __getitem__(self, stage: str) -> Tensor:
        return self.entries[stage]

    def __contains__(self, stage: str) -> bool:
        return stage in self.entries

    def stages(self) -> tuple:
        return tuple(self.entries)

    @property
    def final(self) -> Tensor:
        return list(self.entries.values())[-1]


def _run_stage(
    spec: StageSpec,
    params: dict,
    x: Tensor,
    training: bool,
    update_stats: bool,
    residual: bool,
) -> Tensor:
    h = x
    for i, layer in enumerate(spec.layers):
        if layer[0] == "linear":
            h = core.add_bias(core.matmul(h, params[f"l{i}.w"]), params[f"l{i}.b"])
        elif layer[0] == "bn":
            h = core.batch_norm(
                h,
                params[f"l{i}.gamma"],
                params[f"l{i}.beta"],
                running_mean=params[f"l{i}.rm"].data,
                running_var=params[f"l{i}.rv"].data,
                training=training,
                update_stats=update_stats,
            )
        elif layer[0] == "relu":
            h = core.relu(h)
    if residual and spec.name in BLOCK_STAGES:
        h = core.add(h, x)
    if spec.output_bn:
        h = core.batch_norm(
            h,
            params["out.gamma"],
            params["out.beta"],
            running_mean=params["out.rm"].data,
            running_var=params["out.rv"].data,
            training=training,
            update_stats=update_stats,
        )
    return h


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def forward_stages(
    params: ParamSet,
    x: Tensor,
    mode: str = "train",
    update_stats: bool = True,
    network: str = "online",
) -> StageActivations:
    """Run every stage in order, recording each stage output."""
    training = _check_mode(mode)
    cfg = params.config
    if len(x.shape) != 2 or x.shape[1] != cfg.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match [batch, {cfg.input_dim}]")
    acts = StageActivations(network=network)
    h = x
    for spec in cfg.stages:
        h = _run_stage(spec, params.stages[spec.name], h, training, update_stats and training, cfg.residual)
        acts.entries[spec.name] = h
    return acts


def forward_from(
    params: ParamSet,
    start_stage: str,
    input_tensor: Tensor,
    mode: str = "train",
    update_stats: bool = True,
    stop_after: Optional[str] = None,
    network: str = "online",
) -> StageActivations:
    """Run only the stages from ``start_stage`` onward.

    Used to rebuild the target path after a shared prefix; ``stop_after``
    truncates the run (the target path never enters the predictor).
    """
    training = _check_mode(mode)
    cfg = params.config
    names = [s.name for s in cfg.stages]
    if start_stage not in names:
        raise ConfigError(f"unknown stage {start_stage!r}")
    in_dims = cfg.stage_input_dims()
    want = in_dims[start_stage]
    if len(input_tensor.shape) != 2 or input_tensor.shape[1] != want:
        raise DimensionError(
            f"input shape {input_tensor.shape} does not match stage '{start_stage}' width {want}"
        )
    acts = StageActivations(network=network)
    h = input_tensor
    for spec in cfg.stages[names.index(start_stage):]:
        h = _run_stage(spec, params.stages[spec.name], h, training, update_stats and training, cfg.residual)
        acts.entries[spec.name] = h
        if stop_after is not None and spec.name == stop_after:
            break
    return acts
