"""U-Net assembled from the layers in ``fedseg.nn``.

Topology for ``depth = D``:

* encoder blocks ``enc1..encD``; each is preceded by a 2x2 max-pool, so
  ``enc_i`` runs at ``H / 2**i`` with ``base * 2**(i-1)`` channels;
* ``bridge`` at ``H / 2**D`` with ``base * 2**D`` channels (no pool);
* decoder blocks ``dec1..decD``; ``dec_j`` upsamples x2 to level
  ``k = D - j`` and, for ``k >= 1``, concatenates ``enc_k``. Its width is
  ``base * 2**(k-1)`` (``base`` at full resolution, where no encoder output
  exists to concatenate);
* ``head``: 1x1 convolution to one channel followed by a sigmoid.

Every block is conv -> ReLU -> batch-norm, twice. Parameter names enumerate
in exactly that order: for each block ``conv1.weight, conv1.bias,
bn1.gamma, bn1.beta, bn1.running_mean, bn1.running_var`` and the same for
``conv2``/``bn2``; ``head.weight, head.bias`` come last. Batch-norm running
statistics live in the parameter set so that they travel with the weights.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .params import ParameterSet
from .tensor import Rng, rng_normal

RUNNING_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    depth: int = 2
    base_channels: int = 16
    kernel_size: int = 3

    def __post_init__(self):
        for name in ("in_channels", "depth", "base_channels", "kernel_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")

    def check_input(self, h, w):
        step = 2 ** self.depth
        if h % step or w % step:
            raise ConfigError(
                f"input {h}x{w} is not divisible by 2**depth = {step} (depth {self.depth})")

    def to_dict(self):
        return asdict(self)


def is_trainable(name: str) -> bool:
    return not name.endswith(RUNNING_SUFFIXES)


def block_layout(config: UNetConfig):
    """List of ``(block_name, in_channels, out_channels)`` in canonical order."""
    d, b = config.depth, config.base_channels
    blocks = []
    prev = config.in_channels
    for i in range(1, d + 1):
        out = b * 2 ** (i - 1)
        blocks.append((f"enc{i}", prev, out))
        prev = out
    blocks.append(("bridge", prev, b * 2 ** d))
    prev = b * 2 ** d
    for j in range(1, d + 1):
        k = d - j
        skip = b * 2 ** (k - 1) if k >= 1 else 0
        out = b * 2 ** (k - 1) if k >= 1 else b
        blocks.append((f"dec{j}", prev + skip, out))
        prev = out
    return blocks


def parameter_shapes(config: UNetConfig):
    """Ordered ``(name, shape)`` pairs for the whole model."""
    k = config.kernel_size
    shapes = []
    for blk, cin, cout in block_layout(config):
        for i, c_in in ((1, cin), (2, cout)):
            shapes += [
                (f"{blk}.conv{i}.weight", (cout, c_in, k, k)),
                (f"{blk}.conv{i}.bias", (cout,)),
                (f"{blk}.bn{i}.gamma", (cout,)),
                (f"{blk}.bn{i}.beta", (cout,)),
                (f"{blk}.bn{i}.running_mean", (cout,)),
                (f"{blk}.bn{i}.running_var", (cout,)),
            ]
    last = block_layout(config)[-1][2]
    shapes += [("head.weight", (1, last, 1, 1)), ("head.bias", (1,))]
    return shapes


class UNet:
    def __init__(self, config: UNetConfig, params: ParameterSet):
        template = ParameterSet((n, np.zeros(s)) for n, s in parameter_shapes(config))
        template.check_aligned(params)
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params["head.bias"].dtype

    @classmethod
    def build(cls, config: UNetConfig, rng: Rng, dtype=np.float32) -> "UNet":
        items = []
        for name, shape in parameter_shapes(config):
            if name.endswith(".weight"):
                fan_in = shape[1] * shape[2] * shape[3]
                t = rng_normal(rng, shape, 0.0, np.sqrt(2.0 / fan_in), dtype)
            elif name.endswith((".gamma", ".running_var")):
                t = np.ones(shape, dtype)
            else:
                t = np.zeros(shape, dtype)
            items.append((name, t))
        return cls(config, ParameterSet(items))

    def with_params(self, params: ParameterSet) -> "UNet":
        return UNet(self.config, params)

    def trainable_names(self):
        return [n for n in self.params.names() if is_trainable(n)]

    # --- forward / backward -------------------------------------------

    def _block(self, name, x, mode, caches, stats):
        p = self.params
        for i in (1, 2):
            x, caches[f"{name}.conv{i}"] = nn.conv2d_forward(
                x, p[f"{name}.conv{i}.weight"], p[f"{name}.conv{i}.bias"])
            x, caches[f"{name}.relu{i}"] = nn.relu_forward(x)
            bn = f"{name}.bn{i}"
            x, caches[bn], new = nn.batchnorm_forward(
                x, p[f"{bn}.gamma"], p[f"{bn}.beta"],
                p[f"{bn}.running_mean"], p[f"{bn}.running_var"], mode)
            stats[f"{bn}.running_mean"], stats[f"{bn}.running_var"] = new
        return x

    def forward(self, x, mode="train"):
        """Returns ``(pred, caches)``; ``caches['_stats']`` holds the new running stats."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
        cfg.check_input(x.shape[2], x.shape[3])
        x = np.asarray(x, dtype=self.dtype)
        caches, stats = {}, {}
        skips = {}
        for i in range(1, cfg.depth + 1):
            x, caches[f"pool{i}"] = nn.maxpool2_forward(x)
            x = self._block(f"enc{i}", x, mode, caches, stats)
            skips[i] = x
        x = self._block("bridge", x, mode, caches, stats)
        for j in range(1, cfg.depth + 1):
            k = cfg.depth - j
            x, caches[f"up{j}"] = nn.upsample2_forward(x)
            if k >= 1:
                x, caches[f"cat{j}"] = nn.concat_channels(x, skips[k])
            x = self._block(f"dec{j}", x, mode, caches, stats)
        x, caches["head"] = nn.conv2d_forward(x, self.params["head.weight"], self.params["head.bias"])
        pred, caches["sigmoid"] = nn.sigmoid_forward(x)
        caches["_stats"] = stats
        return pred, caches

    def _block_backward(self, name, dx, caches, grads):
        for i in (2, 1):
            bn = f"{name}.bn{i}"
            dx, grads[f"{bn}.gamma"], grads[f"{bn}.beta"] = nn.batchnorm_backward(caches[bn], dx)
            dx = nn.relu_backward(caches[f"{name}.relu{i}"], dx)
            dx, grads[f"{name}.conv{i}.weight"], grads[f"{name}.conv{i}.bias"] = \
                nn.conv2d_backward(caches[f"{name}.conv{i}"], dx)
        return dx

    def backward(self, caches, dpred):
        """Gradients of all trainable parameters, in canonical order, plus the input gradient."""
        cfg = self.config
        grads = {}
        dx = nn.sigmoid_backward(caches["sigmoid"], dpred)
        dx, grads["head.weight"], grads["head.bias"] = nn.conv2d_backward(caches["head"], dx)
        dskips = {}
        for j in range(cfg.depth, 0, -1):
            k = cfg.depth - j
            dx = self._block_backward(f"dec{j}", dx, caches, grads)
            if k >= 1:
                dx, dskips[k] = nn.concat_backward(caches[f"cat{j}"], dx)
            dx = nn.upsample2_backward(caches[f"up{j}"], dx)
        dx = self._block_backward("bridge", dx, caches, grads)
        for i in range(cfg.depth, 0, -1):
            if i in dskips:
                dx = dx + dskips[i]
            dx = self._block_backward(f"enc{i}", dx, caches, grads)
            dx = nn.maxpool2_backward(caches[f"pool{i}"], dx)
        ordered = {n: grads[n] for n in self.trainable_names()}
        return ordered, dx

    def loss(self, x, y, mode="train"):
        pred, _ = self.forward(x, mode)
        return nn.bce_loss(pred, y)[0]

    def predict(self, x, batch_size=8):
        outs = [self.forward(x[i:i + batch_size], "eval")[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)


def train_step(model: UNet, batch, masks, state: nn.AdamState):
    """One forward/backward/Adam step. Returns ``(pre_update_loss, new_model, new_state)``."""
    pred, caches = model.forward(batch, "train")
    loss, dpred = nn.bce_loss(pred, np.asarray(masks, dtype=pred.dtype))
    grads, _ = model.backward(caches, dpred)
    trainable = {n: model.params[n] for n in grads}
    updated, state = nn.adam_step(trainable, grads, state)
    stats = caches["_stats"]
    new = ParameterSet(
        (n, updated[n] if n in updated else stats.get(n, t)) for n, t in model.params.items())
    return loss, model.with_params(new), state


def save_checkpoint(model_or_params, path):
    params = model_or_params.params if isinstance(model_or_params, UNet) else model_or_params
    params.save(path)


def load_checkpoint(path, config: UNetConfig | None = None) -> UNet:
    params = ParameterSet.load(path)
    return UNet(config or infer_config(params), params)


def infer_config(params: ParameterSet) -> UNetConfig:
    """Recover the ``UNetConfig`` a parameter set was built from."""
    try:
        w = params["enc1.conv1.weight"]
        depth = sum(1 for n in params if n.startswith("enc") and n.endswith(".conv1.weight"))
        config = UNetConfig(in_channels=int(w.shape[1]), depth=depth,
                            base_channels=int(w.shape[0]), kernel_size=int(w.shape[2]))
    except (KeyError, IndexError) as e:
        raise ShapeError(f"parameter set does not describe a U-Net: {e}") from e
    UNet(config, params)
    return config
