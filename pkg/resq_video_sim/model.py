"""Convolutional model description and its on-disk form.

A model is an ordered stack of stride-1 convolution layers.  Each layer carries
its own quantizer slots: keyframe weight/activation and residual
weight/activation, the residual activation optionally a pool for the
dynamic policy.

On disk a model is ``m.json`` plus one Raw Tensor File per weight (and bias);
calibrated quantizer sets live in a separate ``calib.json``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from resq_video_sim._compat import StrEnum
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from resq_video_sim.errors import DimensionError, QuantParamsError
from resq_video_sim.quantizer import (
    QuantizerPool,
    QuantParams,
    activation_params_from_dict,
    fake_quantize,
)
from resq_video_sim.tensor_core import Tensor, _freeze, as_tensor, read_rtf, write_rtf

logger = logging.getLogger(__name__)


class Nonlinearity(StrEnum):
    NONE = "none"
    RELU = "relu"


class WeightSet(StrEnum):
    """Which quantizer set a forward pass uses."""

    KEYFRAME = "keyframe"
    RESIDUAL = "residual"


@dataclass(frozen=True)
class LayerQuantConfig:
    """Keyframe and residual quantizers of one layer."""

    keyframe_weight: QuantParams
    keyframe_act: QuantParams
    residual_weight: QuantParams
    residual_act: QuantParams | QuantizerPool

    @classmethod
    def full_precision(cls) -> LayerQuantConfig:
        off = QuantParams.disabled()
        return cls(off, off, off, off)

    @property
    def residual_act_static(self) -> QuantParams:
        """Residual activation quantizer for the static modes (pool maximum)."""
        if isinstance(self.residual_act, QuantizerPool):
            return self.residual_act.highest
        return self.residual_act

    def weight_params(self, which: WeightSet) -> QuantParams:
        if which is WeightSet.KEYFRAME:
            return self.keyframe_weight
        return self.residual_weight

    def act_params(self, which: WeightSet) -> QuantParams:
        if which is WeightSet.KEYFRAME:
            return self.keyframe_act
        return self.residual_act_static

    def to_dict(self) -> dict[str, Any]:
        return {
            "keyframe_weight": self.keyframe_weight.to_dict(),
            "keyframe_act": self.keyframe_act.to_dict(),
            "residual_weight": self.residual_weight.to_dict(),
            "residual_act": self.residual_act.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LayerQuantConfig:
        return cls(
            keyframe_weight=QuantParams.from_dict(data["keyframe_weight"]),
            keyframe_act=QuantParams.from_dict(data["keyframe_act"]),
            residual_weight=QuantParams.from_dict(data["residual_weight"]),
            residual_act=activation_params_from_dict(data["residual_act"]),
        )


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """One convolution layer.

    A bias is folded into the weights as an extra always-one input channel
    whose only non-zero tap is the kernel centre; the folded channel is
    never activation-quantized and its residual is identically zero.
    """

    weight: Tensor
    padding: int = 0
    nonlinearity: Nonlinearity = Nonlinearity.NONE
    quant: LayerQuantConfig | None = None
    bias: Tensor | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.weight.ndim != 4:
            raise DimensionError(f"Layer weight needs 4 extents, got {self.weight.shape}")
        if self.padding < 0:
            raise DimensionError(f"Padding must be non-negative, got {self.padding}")
        if self.bias is not None:
            if self.bias.shape != (self.out_channels,):
                raise DimensionError(
                    f"Bias {self.bias.shape} does not match {self.out_channels} outputs"
                )
            kh, kw = self.kernel_size
            if kh % 2 == 0 or kw % 2 == 0:
                raise DimensionError("Folded bias needs an odd kernel with a centre tap")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def same_padding(self) -> bool:
        kh, kw = self.kernel_size
        return kh == kw and 2 * self.padding == kh - 1

    @cached_property
    def folded_weight(self) -> Tensor:
        """Weights with the bias channel appended (the plain weights when unbiased)."""
        if self.bias is None:
            return self.weight
        kh, kw = self.kernel_size
        bias_tap = np.zeros((self.out_channels, 1, kh, kw), dtype=np.float32)
        bias_tap[:, 0, kh // 2, kw // 2] = self.bias
        return _freeze(np.concatenate([self.weight, bias_tap], axis=1))

    @cached_property
    def _quantized_weights(self) -> dict[WeightSet, Tensor]:
        quant = self.require_quant()
        return {
            which: fake_quantize(self.folded_weight, quant.weight_params(which))
            for which in WeightSet
        }

    def quantized_weight(self, which: WeightSet) -> Tensor:
        return self._quantized_weights[which]

    def require_quant(self) -> LayerQuantConfig:
        if self.quant is None:
            raise QuantParamsError(f"Layer {self.name!r} has no quantizers configured")
        return self.quant

    def fold_input(self, x: np.ndarray, *, residual: bool = False) -> np.ndarray:
        """Append the bias channel (ones, or zeros for a residual input)."""
        if self.bias is None:
            return x
        fill = np.zeros if residual else np.ones
        extra = fill(x.shape[:-3] + (1,) + x.shape[-2:], dtype=np.float32)
        return np.concatenate([x, extra], axis=-3)

    def activate(self, z: np.ndarray) -> Tensor:
        if self.nonlinearity is Nonlinearity.RELU:
            return _freeze(np.maximum(z, 0.0))
        return _freeze(z)

    def output_shape(self, in_hw: tuple[int, int]) -> tuple[int, int, int]:
        kh, kw = self.kernel_size
        return (
            self.out_channels,
            in_hw[0] + 2 * self.padding - kh + 1,
            in_hw[1] + 2 * self.padding - kw + 1,
        )


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[ConvLayer, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise DimensionError("A model needs at least one layer")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if nxt.in_channels != prev.out_channels:
                raise DimensionError(
                    f"Layer {i + 1} expects {nxt.in_channels} channels, "
                    f"layer {i} produces {prev.out_channels}"
                )

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def is_quantized(self) -> bool:
        return all(layer.quant is not None for layer in self.layers)

    def require_quantized(self) -> None:
        for layer in self.layers:
            layer.require_quant()

    def with_layer_quant(self, index: int, config: LayerQuantConfig) -> ModelSpec:
        layers = list(self.layers)
        layers[index] = dataclasses.replace(layers[index], quant=config)
        return ModelSpec(tuple(layers))

    def with_quant(self, configs: list[LayerQuantConfig]) -> ModelSpec:
        if len(configs) != len(self.layers):
            raise DimensionError(
                f"{len(configs)} quantizer configs for {len(self.layers)} layers"
            )
        return ModelSpec(
            tuple(
                dataclasses.replace(layer, quant=cfg)
                for layer, cfg in zip(self.layers, configs)
            )
        )

    def full_precision(self) -> ModelSpec:
        return self.with_quant([LayerQuantConfig.full_precision()] * len(self.layers))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_model(model: ModelSpec, path: str | Path) -> None:
    """Write ``path`` (JSON) plus one RTF per layer weight/bias next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(model.layers):
        weight_file = f"{path.stem}_layer_{i:02d}.rtf"
        write_rtf(path.parent / weight_file, layer.weight)
        bias_file = None
        if layer.bias is not None:
            bias_file = f"{path.stem}_layer_{i:02d}_bias.rtf"
            write_rtf(path.parent / bias_file, layer.bias)
        layers.append(
            {
                "name": layer.name,
                "padding": layer.padding,
                "nonlinearity": layer.nonlinearity.value,
                "weight": weight_file,
                "bias": bias_file,
            }
        )
    path.write_text(json.dumps({"layers": layers}, indent=2))
    logger.info("Saved %d-layer model to %s", len(layers), path)


def load_model(path: str | Path) -> ModelSpec:
    path = Path(path)
    doc = json.loads(path.read_text())
    layers = []
    for entry in doc["layers"]:
        bias = entry.get("bias")
        layers.append(
            ConvLayer(
                weight=read_rtf(path.parent / entry["weight"]),
                padding=int(entry.get("padding", 0)),
                nonlinearity=Nonlinearity(entry.get("nonlinearity", "none")),
                bias=read_rtf(path.parent / bias) if bias else None,
                name=entry.get("name", ""),
            )
        )
    return ModelSpec(tuple(layers))


def save_calibration(model: ModelSpec, path: str | Path) -> None:
    model.require_quantized()
    doc = {
        "layers": [
            {"name": layer.name, **layer.quant.to_dict()} for layer in model.layers
        ]
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


def load_calibration(model: ModelSpec, path: str | Path) -> ModelSpec:
    """Attach the quantizer sets stored at ``path`` to ``model``."""
    doc = json.loads(Path(path).read_text())
    entries = doc["layers"]
    if len(entries) != len(model.layers):
        raise QuantParamsError(
            f"Calibration has {len(entries)} layers, model has {len(model.layers)}"
        )
    return model.with_quant([LayerQuantConfig.from_dict(e) for e in entries])


def conv_layer(
    weight: Any,
    padding: int = 0,
    nonlinearity: str = "none",
    bias: Any = None,
    name: str = "",
) -> ConvLayer:
    """Convenience constructor from array-likes."""
    return ConvLayer(
        weight=as_tensor(weight),
        padding=padding,
        nonlinearity=Nonlinearity(nonlinearity),
        bias=None if bias is None else as_tensor(bias),
        name=name,
    )
