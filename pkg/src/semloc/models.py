"""Network assembly: shared feature extractor plus regression and
classification heads.

The extractor is four conv blocks (3x3 same conv -> batch norm -> 2x2
max pool -> ReLU); its flattened output is the shared feature vector,
nonnegative because the block ends in ReLU.  Each head is an MLP whose
hidden blocks are linear -> 1-D batch norm -> ReLU; the regressor's
final layer is a bare linear map, the classifier's final layer feeds a
softmax.  For two classes the softmax over a logit pair coincides with
a sigmoid on the logit difference, so softmax is used throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import ShapeMismatch, Tensor


@dataclass
class ArchConfig:
    conv_channels: list = field(default_factory=lambda: [16, 32, 32, 64])
    mlp_widths_reg: list = field(default_factory=lambda: [256, 128, 3])
    mlp_widths_cls: list = field(default_factory=lambda: [256, 128, 3])
    n_classes: int = 3
    input_kind: str = "adp"
    input_shape: tuple = (1, 64, 64)  # (channels, H, W)

    def __post_init__(self):
        if self.mlp_widths_reg[-1] != 3:
            raise ValueError("regressor must end in width 3")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        self.mlp_widths_cls = list(self.mlp_widths_cls[:-1]) + [self.n_classes]
        c, h, w = self.input_shape
        down = 2 ** len(self.conv_channels)
        if h % down or w % down:
            raise ShapeMismatch(
                f"input {h}x{w} must be divisible by {down} for "
                f"{len(self.conv_channels)} pooling stages")

    def feature_dim(self):
        _, h, w = self.input_shape
        down = 2 ** len(self.conv_channels)
        return self.conv_channels[-1] * (h // down) * (w // down)

    def to_dict(self):
        return {"conv_channels": list(self.conv_channels),
                "mlp_widths_reg": list(self.mlp_widths_reg),
                "mlp_widths_cls": list(self.mlp_widths_cls),
                "n_classes": self.n_classes,
                "input_kind": self.input_kind,
                "input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


@dataclass
class ModelOutputs:
    features: Tensor   # [B, F], post-ReLU (nonnegative)
    coords: Tensor     # [B, 3]
    logits: Tensor     # [B, n_classes]
    probs: Tensor      # [B, n_classes], rows sum to 1


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """Parameter store plus forward pass; exclusively owned while training."""

    def __init__(self, arch, seed=0):
        self.arch = arch
        self.params = {}       # name -> Tensor (trainable)
        self.running = {}      # name -> numpy array (batch-norm stats)
        rng = np.random.default_rng(seed)

        c_in = arch.input_shape[0]
        for i, c_out in enumerate(arch.conv_channels):
            self._add_conv(rng, f"theta1.conv{i}", c_in, c_out)
            c_in = c_out

        self._add_mlp(rng, "theta2", arch.feature_dim(), arch.mlp_widths_reg)
        self._add_mlp(rng, "theta3", arch.feature_dim(), arch.mlp_widths_cls)

    def _add_conv(self, rng, name, c_in, c_out):
        fan = 9 * c_in, 9 * c_out
        self.params[f"{name}.w"] = Tensor(
            _glorot(rng, (c_out, c_in, 3, 3), *fan), requires_grad=True)
        # no conv bias: batch norm's mean-centering would cancel it exactly
        self._add_bn(name, c_out)

    def _add_mlp(self, rng, prefix, in_dim, widths):
        for i, out_dim in enumerate(widths):
            name = f"{prefix}.lin{i}"
            self.params[f"{name}.w"] = Tensor(
                _glorot(rng, (in_dim, out_dim), in_dim, out_dim),
                requires_grad=True)
            if i < len(widths) - 1:  # hidden blocks: batch norm, no bias
                self._add_bn(name, out_dim)
            else:                    # output heads keep a plain bias
                self.params[f"{name}.b"] = Tensor(np.zeros(out_dim),
                                                  requires_grad=True)
            in_dim = out_dim

    def _add_bn(self, name, channels):
        self.params[f"{name}.bn.gamma"] = Tensor(np.ones(channels),
                                                 requires_grad=True)
        self.params[f"{name}.bn.beta"] = Tensor(np.zeros(channels),
                                                requires_grad=True)
        self.running[f"{name}.bn.mean"] = np.zeros(channels)
        self.running[f"{name}.bn.var"] = np.ones(channels)

    # -- forward ---------------------------------------------------------
    def _bn(self, x, name, train):
        return engine.batch_norm(
            x, self.params[f"{name}.bn.gamma"], self.params[f"{name}.bn.beta"],
            self.running[f"{name}.bn.mean"], self.running[f"{name}.bn.var"],
            training=train)

    def _mlp(self, x, prefix, widths, train):
        for i in range(len(widths)):
            name = f"{prefix}.lin{i}"
            x = engine.matmul(x, self.params[f"{name}.w"])
            if i < len(widths) - 1:
                x = engine.relu(self._bn(x, name, train))
            else:
                x = x + self.params[f"{name}.b"]
        return x

    def extract(self, x, train=False):
        """Shared features from a fingerprint batch [B, C, H, W]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ShapeMismatch(
                f"batch shape {x.shape} does not match input {self.arch.input_shape}")
        for i in range(len(self.arch.conv_channels)):
            name = f"theta1.conv{i}"
            x = engine.conv2d(x, self.params[f"{name}.w"], padding="same")
            x = self._bn(x, name, train)
            x = engine.max_pool2d(x)
            x = engine.relu(x)
        return x.reshape(x.shape[0], -1)

    def forward(self, x, train=False):
        omega = self.extract(x, train)
        coords = self._mlp(omega, "theta2", self.arch.mlp_widths_reg, train)
        logits = self._mlp(omega, "theta3", self.arch.mlp_widths_cls, train)
        return ModelOutputs(features=omega, coords=coords, logits=logits,
                            probs=engine.softmax(logits))

    # -- bookkeeping -------------------------------------------------------
    def param_count(self):
        return sum(p.data.size for p in self.params.values())

    def state_dict(self):
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: v.copy() for k, v in self.running.items()})
        return out

    def load_state_dict(self, state):
        for k, p in self.params.items():
            p.data = np.asarray(state[k], np.float64).reshape(p.data.shape).copy()
        for k in self.running:
            self.running[k] = np.asarray(state[k], np.float64).reshape(
                self.running[k].shape).copy()

    def describe(self):
        """Human-readable layer table."""
        lines, c_in = [], self.arch.input_shape[0]
        _, h, w = self.arch.input_shape
        for i, c_out in enumerate(self.arch.conv_channels):
            h, w = h // 2, w // 2
            lines.append(f"theta1.conv{i}: conv3x3 {c_in}->{c_out}, bn, "
                         f"pool -> [{c_out},{h},{w}], relu")
            c_in = c_out
        lines.append(f"flatten -> features [{self.arch.feature_dim()}]")
        for prefix, widths in (("theta2", self.arch.mlp_widths_reg),
                               ("theta3", self.arch.mlp_widths_cls)):
            d = self.arch.feature_dim()
            for i, width in enumerate(widths):
                act = "" if i == len(widths) - 1 else ", bn, relu"
                lines.append(f"{prefix}.lin{i}: linear {d}->{width}{act}")
                d = width
        lines.append(f"total parameters: {self.param_count()}")
        return "\n".join(lines)


def build(arch, seed=0):
    return Model(arch, seed=seed)
