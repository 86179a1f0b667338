"""Configurable grid detector: conv/BN/activation/pool stages plus a prediction head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn import Activation, BatchNorm2d, Conv2d, Layer, MaxPool2d, ShapeError, activation_gain
from .tensorio import load_tensor, save_tensor

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 160
    grid_size: int = 10
    boxes_per_cell: int = 1
    num_classes: int = 32
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    use_batchnorm: bool = True
    activation: str = "leaky_relu"
    alpha: float = 0.1
    seed: int = 0

    @property
    def head_channels(self) -> int:
        return 5 * self.boxes_per_cell + self.num_classes

    def validate(self) -> None:
        if self.num_classes < 1 or self.boxes_per_cell < 1:
            raise ConfigError("num_classes and boxes_per_cell must be >= 1")
        if not self.stage_channels:
            raise ConfigError("at least one stage is required")
        extent = self.input_size
        for i, _ in enumerate(self.stage_channels):
            if extent % 2:
                raise ConfigError(f"stage {i}: extent {extent} is not divisible by the 2x2 pool")
            extent //= 2
        if extent != self.grid_size:
            raise ConfigError(
                f"stage {len(self.stage_channels) - 1}: {self.input_size}/2^{len(self.stage_channels)} = "
                f"{extent} does not match grid_size {self.grid_size}"
            )


@dataclass
class Model:
    config: ModelConfig
    layers: list[Layer] = field(default_factory=list)

    @property
    def num_params(self) -> int:
        return count_params(self)

    def forward(self, images: np.ndarray, train: bool = False) -> np.ndarray:
        """``[N, 3, H, W]`` images -> ``[N, S, S, B*5 + C]`` raw grid predictions."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (3, cfg.input_size, cfg.input_size):
            raise ShapeError(f"expected [N,3,{cfg.input_size},{cfg.input_size}], got {list(images.shape)}")
        x = np.ascontiguousarray(images.transpose(0, 2, 3, 1), dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dpred: np.ndarray) -> None:
        g = np.ascontiguousarray(dpred, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)

    @property
    def dtype(self):
        return self.layers[0].params["weight"].dtype

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield i, name, p

    def state(self):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name, p in store.items():
                    yield i, layer.kind, name, store

    def astype(self, dtype) -> "Model":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def copy(self) -> "Model":
        m = build_model(self.config)
        m.astype(self.dtype)
        for (_, _, name, dst), (_, _, _, src) in zip(m.state(), self.state()):
            dst[name] = src[name].copy()
        return m


def build_model(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    gain = activation_gain(config.activation, config.alpha)
    layers: list[Layer] = []

    def block(cin, cout, kernel):
        layers.append(Conv2d(cin, cout, kernel, rng=rng, gain=gain))
        if config.use_batchnorm:
            layers.append(BatchNorm2d(cout))
        layers.append(Activation(config.activation, config.alpha, inplace=True))

    cin = 3
    for c in config.stage_channels:
        block(cin, c, 3)
        layers.append(MaxPool2d(2, 2))
        cin = c
    block(cin, cin, 3)
    head = Conv2d(cin, config.boxes_per_cell * 5 + config.num_classes, 1, rng=rng, gain=1.0)
    layers.append(head)
    layers[0].needs_input_grad = False
    return Model(config, layers)


def count_params(model_or_layers) -> int:
    layers = model_or_layers.layers if isinstance(model_or_layers, Model) else model_or_layers
    return sum(layer.num_params() for layer in layers)


def forward(model: Model, images: np.ndarray) -> np.ndarray:
    return model.forward(images, train=False)


# ---------------------------------------------------------------- checkpoints

def config_to_manifest(cfg: ModelConfig) -> dict[str, str]:
    out = {}
    for k, v in asdict(cfg).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        out[k] = str(v)
    return out


def config_from_manifest(kv: dict[str, str]) -> ModelConfig:
    return ModelConfig(
        input_size=int(kv["input_size"]),
        grid_size=int(kv["grid_size"]),
        boxes_per_cell=int(kv["boxes_per_cell"]),
        num_classes=int(kv["num_classes"]),
        stage_channels=tuple(int(x) for x in kv["stage_channels"].split(",")),
        use_batchnorm=kv["use_batchnorm"] == "True",
        activation=kv["activation"],
        alpha=float(kv["alpha"]),
        seed=int(kv["seed"]),
    )


def read_kv(path: Path) -> dict[str, str]:
    kv = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    return kv


def save_checkpoint(model: Model, path: str | Path) -> Path:
    """Write ``manifest.txt`` plus one PSKT file per tensor into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for stale in root.glob("*.pskt"):
        stale.unlink()
    kv = {"format_version": str(CHECKPOINT_VERSION), **config_to_manifest(model.config)}
    names = []
    for i, kind, name, store in model.state():
        fname = f"{i:03d}_{kind}_{name}.pskt"
        save_tensor(root / fname, store[name])
        names.append(fname)
    kv["tensors"] = ",".join(names)
    (root / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in kv.items()))
    return root


def load_checkpoint(path: str | Path) -> Model:
    root = Path(path)
    kv = read_kv(root / "manifest.txt")
    if int(kv.get("format_version", -1)) != CHECKPOINT_VERSION:
        raise ConfigError(f"{root}: unsupported checkpoint version {kv.get('format_version')}")
    model = build_model(config_from_manifest(kv))
    for i, kind, name, store in model.state():
        t = load_tensor(root / f"{i:03d}_{kind}_{name}.pskt")
        if t.shape != store[name].shape:
            raise ConfigError(f"{root}: tensor {i}/{name} has shape {t.shape}, expected {store[name].shape}")
        store[name] = t
    return model


def param_bytes(model: Model) -> int:
    return 4 * count_params(model)
