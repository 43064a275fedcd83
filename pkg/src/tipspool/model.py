"""The desk-scale CNN classifier used by every experiment.

Layout: one or more conv stages of 3x3 conv + ReLU blocks, a pooling layer
of the configured kind between consecutive stages, then global average
pooling and a dense classifier. The "gap" pooling kind drops all
intermediate pooling and relies on the terminal global average pool alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autodiff import Node, constant, no_grad, relu
from .pooling import (
    ApsSpec,
    BlurSpec,
    TipsParams,
    aps_pool,
    avg_pool,
    blur_pool,
    depthwise_blur,
    init_tips_params,
    max_pool,
    tips_pool,
)
from .rng import INIT, stream

POOL_KINDS = ("max", "avg", "blur", "aps", "tips", "gap")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (6, 12, 24)
    blocks_per_stage: int = 1
    pooling_kind: str = "tips"
    lpf: int = 0  # 0 = no low-pass filter; 3 or 5 selects the binomial size
    num_classes: int = 4
    in_channels: int = 1
    padding_mode: str = "circular"
    pool_stride: int = 2
    aps_p: float = 2.0
    psi_shared: bool = True

    def __post_init__(self):
        if self.pooling_kind not in POOL_KINDS:
            raise ValueError(f"pooling_kind must be one of {POOL_KINDS}, got {self.pooling_kind!r}")
        if self.lpf not in (0, 3, 5):
            raise ValueError(f"lpf must be 0, 3 or 5, got {self.lpf}")
        if self.lpf and self.pooling_kind not in ("blur", "aps", "tips"):
            raise ValueError(f"lpf is only meaningful for blur/aps/tips, not {self.pooling_kind}")
        if self.pooling_kind == "blur" and self.lpf == 0:
            raise ValueError("blur pooling needs lpf = 3 or 5")
        if len(self.channels) < 1 or self.blocks_per_stage < 1:
            raise ValueError("need at least one stage and one block per stage")
        if self.padding_mode not in ("zero", "circular"):
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")

    @property
    def num_pooling_layers(self):
        return 0 if self.pooling_kind == "gap" else len(self.channels) - 1


@dataclass
class ForwardResult:
    logits: Node
    taus: list = field(default_factory=list)  # tau node per TIPS layer
    psi_outs: list = field(default_factory=list)  # psi trunk node per TIPS layer
    psi_ins: list = field(default_factory=list)  # layer input values (for undo targets)
    pool_io: list = field(default_factory=list)  # (input value, output value, stride)


class CnnClassifier:
    """Named-parameter CNN with pluggable pooling."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.stages = []  # list of lists of Conv2dParams
        self.pools = []  # per pooling site: TipsParams for tips, else None
        self.fc_w = None
        self.fc_b = None

    @classmethod
    def build(cls, cfg: ModelConfig, seed, dtype=np.float32):
        model = cls(cfg, dtype)
        rng = stream(seed, INIT)
        in_ch = cfg.in_channels
        for ch in cfg.channels:
            convs = []
            for _ in range(cfg.blocks_per_stage):
                convs.append(nn.make_conv(rng, in_ch, ch, 3, cfg.padding_mode, model.dtype))
                in_ch = ch
            model.stages.append(convs)
        for site in range(cfg.num_pooling_layers):
            ch = cfg.channels[site]
            if cfg.pooling_kind == "tips":
                model.pools.append(
                    init_tips_params(
                        rng, ch, cfg.pool_stride, cfg.padding_mode, model.dtype,
                        shared_head=cfg.psi_shared,
                    )
                )
            else:
                model.pools.append(None)
        fan_in = cfg.channels[-1]
        model.fc_w = Node(nn.kaiming_normal(rng, (cfg.num_classes, fan_in), fan_in, model.dtype),
                          requires_grad=True)
        model.fc_b = Node(np.zeros(cfg.num_classes, dtype=model.dtype), requires_grad=True)
        return model

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self):
        out = {}
        for si, convs in enumerate(self.stages):
            for bi, conv in enumerate(convs):
                out[f"stage{si}.conv{bi}.w"] = conv.weight
                out[f"stage{si}.conv{bi}.b"] = conv.bias
        for pi, pool in enumerate(self.pools):
            if isinstance(pool, TipsParams):
                out[f"pool{pi}.psi.w"] = pool.psi.weight
                out[f"pool{pi}.psi.b"] = pool.psi.bias
                if pool.head is not None:
                    out[f"pool{pi}.head.w"] = pool.head.weight
                    out[f"pool{pi}.head.b"] = pool.head.bias
                out[f"pool{pi}.proj.w"] = pool.proj_w
                out[f"pool{pi}.proj.b"] = pool.proj_b
        out["fc.w"] = self.fc_w
        out["fc.b"] = self.fc_b
        return out

    def parameters(self):
        return [node for _, node in sorted(self.named_parameters().items())]

    def param_count(self):
        return int(sum(n.value.size for n in self.parameters()))

    def state_dict(self):
        return {name: node.value.copy() for name, node in self.named_parameters().items()}

    def load_state(self, tensors):
        params = self.named_parameters()
        for name in params:
            if name not in tensors:
                raise ValueError(f"checkpoint is missing tensor {name!r}")
        for name in tensors:
            if name not in params:
                raise ValueError(f"checkpoint has unexpected tensor {name!r}")
        for name, node in params.items():
            arr = np.asarray(tensors[name], dtype=self.dtype)
            if arr.shape != node.value.shape:
                raise ValueError(
                    f"tensor {name!r} has shape {arr.shape}, model expects {node.value.shape}"
                )
            node.value = arr.copy()

    # -- forward -------------------------------------------------------------

    def _pool_site(self, x, site, result: ForwardResult, collect_io):
        cfg = self.cfg
        if collect_io:
            x_in_value = x.value
        if cfg.lpf and cfg.pooling_kind in ("aps", "tips"):
            x = depthwise_blur(x, BlurSpec(cfg.lpf), cfg.padding_mode)
        kind = cfg.pooling_kind
        s = cfg.pool_stride
        if kind == "max":
            out = max_pool(x, s)
        elif kind == "avg":
            out = avg_pool(x, s)
        elif kind == "blur":
            out = blur_pool(x, BlurSpec(cfg.lpf), s, cfg.padding_mode)
        elif kind == "aps":
            out = aps_pool(x, ApsSpec(cfg.aps_p), s)
        elif kind == "tips":
            tp = self.pools[site]
            out, tau, psi_out = tips_pool(x, tp)
            result.taus.append(tau)
            result.psi_outs.append(psi_out)
            result.psi_ins.append(x.value)
        else:  # pragma: no cover - guarded by ModelConfig
            raise ValueError(f"unexpected pooling kind {kind!r}")
        if collect_io:
            result.pool_io.append((x_in_value, out.value, s))
        return out

    def forward(self, images, collect_io=False):
        """Run the network; images is an (n,c,h,w) or (c,h,w) array."""
        cfg = self.cfg
        x = constant(np.asarray(images, dtype=self.dtype))
        result = ForwardResult(logits=None)
        for si, convs in enumerate(self.stages):
            for conv in convs:
                x = relu(nn.conv2d(x, conv))
            if si < len(self.stages) - 1 and cfg.pooling_kind != "gap":
                x = self._pool_site(x, si, result, collect_io)
        feats = nn.global_avg_pool(x)
        result.logits = nn.linear(feats, self.fc_w, self.fc_b)
        return result

    def logits(self, images):
        with no_grad():
            return self.forward(images).logits.value

    def predict(self, images, batch_size=256):
        """Class predictions; argmax ties break toward the lowest index."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        preds = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                lv = self.forward(images[start:start + batch_size]).logits.value
                preds.append(np.argmax(lv, axis=1))
        return np.concatenate(preds)

    def pool_io(self, images):
        """(input, output, stride) values of every pooling layer on one batch."""
        with no_grad():
            result = self.forward(np.asarray(images, dtype=self.dtype), collect_io=True)
        return result.pool_io
