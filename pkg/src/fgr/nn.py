"""The two fixed architectures ("mlp", "tinyconv") and their parameters.

Every parameter belongs to either the ``backbone`` or the ``head`` partition;
the head is always the final dense layer named ``head``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHS = ("mlp", "tinyconv")
BACKBONE, HEAD = "backbone", "head"


class ShapeError(ValueError):
    """Input does not fit a layer; ``layer`` names the offender."""

    def __init__(self, layer: str, expected, got):
        super().__init__(f"layer {layer!r}: expected input {expected}, got {got}")
        self.layer = layer
        self.expected = expected
        self.got = got


@dataclass
class ModelParams:
    """Named parameter tensors plus their backbone/head partition."""

    tensors: dict[str, Tensor]
    partition: dict[str, str]

    def __post_init__(self):
        if set(self.tensors) != set(self.partition):
            raise ValueError("every parameter needs exactly one partition flag")
        bad = {p for p in self.partition.values()} - {BACKBONE, HEAD}
        if bad:
            raise ValueError(f"unknown partition(s): {sorted(bad)}")

    def names(self, part: str | None = None) -> list[str]:
        return sorted(n for n in self.tensors if part is None or self.partition[n] == part)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n].data for n in self.names()}

    def tracked(self, trainable: Iterable[str] | None = None) -> "ModelParams":
        """Copy whose ``trainable`` tensors (default: all) require gradients."""
        train = set(self.names() if trainable is None else trainable)
        return ModelParams(
            {n: Tensor(t.data, requires_grad=n in train, name=n) for n, t in self.tensors.items()},
            dict(self.partition),
        )

    def replace(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        tensors = dict(self.tensors)
        for n, a in arrays.items():
            if a.shape != tensors[n].shape:
                raise ValueError(f"{n}: shape {a.shape} != {tensors[n].shape}")
            tensors[n] = Tensor(a, name=n)
        return ModelParams(tensors, dict(self.partition))

    def num_params(self, part: str | None = None) -> int:
        return sum(self.tensors[n].size for n in self.names(part))


@dataclass(frozen=True)
class Model:
    """Architecture description; parameters live separately in ModelParams."""

    arch: str
    input_shape: tuple[int, ...]  # (C, H, W) for tinyconv, (D,) for mlp
    num_classes: int
    hidden: int = 64
    channels: tuple[int, int] = field(default=(16, 32))

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; choose from {ARCHS}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.arch == "tinyconv":
            if len(self.input_shape) != 3:
                raise ValueError("tinyconv input_shape is (C, H, W)")
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ValueError("tinyconv needs H and W divisible by 4")
        elif len(self.input_shape) != 1:
            raise ValueError("mlp input_shape is (D,)")

    @property
    def feature_dim(self) -> int:
        if self.arch == "mlp":
            return self.hidden
        _, h, w = self.input_shape
        return self.channels[1] * (h // 4) * (w // 4)

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], str]]:
        k = self.num_classes
        if self.arch == "mlp":
            (d,) = self.input_shape
            hdim = self.hidden
            shapes = {
                "fc1.weight": (hdim, d),
                "fc1.bias": (hdim,),
                "fc2.weight": (hdim, hdim),
                "fc2.bias": (hdim,),
            }
        else:
            c = self.input_shape[0]
            c1, c2 = self.channels
            shapes = {
                "conv1.weight": (c1, c, 3, 3),
                "conv1.bias": (c1,),
                "conv2.weight": (c2, c1, 3, 3),
                "conv2.bias": (c2,),
            }
        out = {n: (s, BACKBONE) for n, s in shapes.items()}
        out["head.weight"] = ((k, self.feature_dim), HEAD)
        out["head.bias"] = ((k,), HEAD)
        return out

    def init(self, seed: int) -> ModelParams:
        """He-normal weights, zero biases; deterministic in ``seed``."""
        rng = np.random.default_rng(seed)
        tensors, part = {}, {}
        for name in sorted(self.param_shapes()):
            shape, p = self.param_shapes()[name]
            if name.endswith(".bias"):
                arr = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            tensors[name] = Tensor(arr, name=name)
            part[name] = p
        return ModelParams(tensors, part)

    def zeros(self) -> ModelParams:
        shapes = self.param_shapes()
        return ModelParams(
            {n: Tensor(np.zeros(s), name=n) for n, (s, _) in shapes.items()},
            {n: p for n, (_, p) in shapes.items()},
        )

    # forward passes

    def features(self, params: ModelParams, x) -> Tensor:
        """Backbone output, flattened to (B, feature_dim)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.arch == "mlp":
            if x.ndim != 2 or x.shape[1] != self.input_shape[0]:
                raise ShapeError("fc1", ("B",) + self.input_shape, x.shape)
            h = ad.relu(_dense(x, params["fc1.weight"], params["fc1.bias"]))
            return ad.relu(_dense(h, params["fc2.weight"], params["fc2.bias"]))
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError("conv1", ("B",) + self.input_shape, x.shape)
        h = ad.permute(x, (0, 2, 3, 1))
        h = ad.maxpool2(ad.relu(ad.conv2d(h, params["conv1.weight"], params["conv1.bias"])))
        h = ad.maxpool2(ad.relu(ad.conv2d(h, params["conv2.weight"], params["conv2.bias"])))
        # flatten in (C, H, W) order
        h = ad.permute(h, (0, 3, 1, 2))
        return h.reshape(h.shape[0], -1)

    def head(self, params: ModelParams, feats) -> Tensor:
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        if feats.ndim != 2 or feats.shape[1] != self.feature_dim:
            raise ShapeError("head", ("B", self.feature_dim), feats.shape)
        return _dense(feats, params["head.weight"], params["head.bias"])

    def forward(self, params: ModelParams, x) -> Tensor:
        """Logits of shape (B, K)."""
        return self.head(params, self.features(params, x))

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        return cls(
            arch=d["arch"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            hidden=int(d.get("hidden", 64)),
            channels=tuple(d.get("channels", (16, 32))),
        )


def _dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.matmul(x, ad.transpose(weight)) + bias
