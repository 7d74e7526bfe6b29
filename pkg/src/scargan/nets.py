"""Declarative network topologies and their torch instantiation.

Three families are built here: a U-Net generator (strided 4x4 down/up
sampling, 3x3 within-block convolutions, batch norm, ReLU, dropout after
every nonlinearity), a shallow whole-image discriminator (4 strided blocks
with leaky ReLU 0.2 and a linear scalar head, no output nonlinearity), and a
two-headed segmentation U-Net (96 initial filters, 4 stages, 3 convolutions
per block).

Builders are pure; training loops live elsewhere. Snapshots serialize every
state tensor as named float32 arrays in a single portable file:

    magic "WSNAP001" | uint32 LE header length | header JSON | raw tensors

The header carries the topology, tag, step and a tensor table (name, shape)
sorted by name; raw data is little-endian float32 in table order. Tensor
names are the module paths of the torch state dict (for the U-Net:
``enc_blocks.<i>.<j>.*``, ``downs.<i>.*``, ``bottleneck.<j>.*``,
``ups.<i>.*``, ``dec_blocks.<i>.<j>.*``, ``head.*``, ``aux_head.*``; for
the discriminator: ``blocks.<i>.*``, ``head.*``), including batch-norm
running statistics, so snapshots interchange across runs and processes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

WTS_MAGIC = b"WSNAP001"


class SnapshotMismatchError(ValueError):
    """Snapshot parameters do not fit the requested topology."""


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative topology of one network."""

    kind: str  # generator | discriminator | segnet
    in_channels: int
    out_channels: int
    initial_filters: int
    depth: int
    convs_per_block: int
    dropout_p: float
    output_nonlinearity: str  # softmax | sigmoid | linear | none
    norm: str = "batch"
    activation: str = "relu"  # relu | leaky_relu
    leaky_alpha: float = 0.2
    input_size: int = 192
    aux_channels: int = 0
    aux_nonlinearity: str = "none"

    def validate(self) -> None:
        if self.kind not in ("generator", "discriminator", "segnet"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.in_channels < 1 or self.initial_filters < 1 or self.depth < 1:
            raise ValueError("channel counts, filters and depth must be positive")
        if self.output_nonlinearity not in ("softmax", "sigmoid", "linear", "none"):
            raise ValueError(f"unknown output nonlinearity {self.output_nonlinearity!r}")
        if self.input_size % (2**self.depth) != 0:
            raise ValueError(
                f"input size {self.input_size} must be divisible by 2^depth = {2 ** self.depth}"
            )


def build_generator(
    in_channels: int,
    out_channels: int,
    output_nonlinearity: str,
    initial_filters: int = 64,
    depth: int = 4,
    convs_per_block: int = 1,
    dropout_p: float = 0.25,
    input_size: int = 192,
) -> NetworkSpec:
    """U-Net generator with skip connections and dropout noise."""
    if in_channels < 1 or out_channels < 1:
        raise ValueError("channel counts must be at least 1")
    spec = NetworkSpec(
        kind="generator",
        in_channels=in_channels,
        out_channels=out_channels,
        initial_filters=initial_filters,
        depth=depth,
        convs_per_block=convs_per_block,
        dropout_p=dropout_p,
        output_nonlinearity=output_nonlinearity,
        input_size=input_size,
    )
    spec.validate()
    return spec


def build_discriminator(
    in_channels: int,
    initial_filters: int = 64,
    depth: int = 4,
    input_size: int = 192,
) -> NetworkSpec:
    """Shallow whole-image discriminator: strided conv blocks, scalar linear head."""
    if in_channels < 1:
        raise ValueError("in_channels must be at least 1")
    spec = NetworkSpec(
        kind="discriminator",
        in_channels=in_channels,
        out_channels=1,
        initial_filters=initial_filters,
        depth=depth,
        convs_per_block=0,
        dropout_p=0.0,
        output_nonlinearity="none",
        activation="leaky_relu",
        input_size=input_size,
    )
    spec.validate()
    return spec


def build_segnet(
    in_channels: int = 1,
    main_classes: int = 4,
    initial_filters: int = 96,
    depth: int = 4,
    convs_per_block: int = 3,
    dropout_p: float = 0.0,
    input_size: int = 192,
) -> NetworkSpec:
    """Segmentation U-Net: softmax ventricular head plus sigmoid scar head."""
    spec = NetworkSpec(
        kind="segnet",
        in_channels=in_channels,
        out_channels=main_classes,
        initial_filters=initial_filters,
        depth=depth,
        convs_per_block=convs_per_block,
        dropout_p=dropout_p,
        output_nonlinearity="softmax",
        input_size=input_size,
        aux_channels=1,
        aux_nonlinearity="sigmoid",
    )
    spec.validate()
    return spec


def _activation(spec: NetworkSpec) -> nn.Module:
    if spec.activation == "leaky_relu":
        return nn.LeakyReLU(spec.leaky_alpha)
    return nn.ReLU()


def _conv_block(spec: NetworkSpec, c_in: int, c_out: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    c = c_in
    for _ in range(spec.convs_per_block):
        layers.append(nn.Conv2d(c, c_out, kernel_size=3, stride=1, padding=1))
        layers.append(nn.BatchNorm2d(c_out))
        layers.append(_activation(spec))
        if spec.dropout_p > 0:
            layers.append(nn.Dropout(spec.dropout_p))
        c = c_out
    return nn.Sequential(*layers)


def _output_layer(kind: str):
    if kind == "softmax":
        return lambda x: torch.softmax(x, dim=1)
    if kind == "sigmoid":
        return torch.sigmoid
    return lambda x: x  # linear / none


class UNetGenerator(nn.Module):
    """Encoder/decoder with skip connections; spatial size is preserved."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        f = spec.initial_filters
        enc_ch = [f * 2**i for i in range(spec.depth)]
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        c = spec.in_channels
        for ch in enc_ch:
            self.enc_blocks.append(_conv_block(spec, c, ch))
            self.downs.append(nn.Conv2d(ch, ch, kernel_size=4, stride=2, padding=1))
            c = ch
        self.bottleneck = _conv_block(spec, enc_ch[-1], enc_ch[-1])
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            ch = enc_ch[i]
            out_ch = enc_ch[i - 1] if i > 0 else f
            self.ups.append(nn.ConvTranspose2d(ch, ch, kernel_size=4, stride=2, padding=1))
            self.dec_blocks.append(_conv_block(spec, 2 * ch, out_ch))
        self.head = nn.Conv2d(f, spec.out_channels, kernel_size=3, stride=1, padding=1)
        self._out = _output_layer(spec.output_nonlinearity)
        if spec.aux_channels:
            self.aux_head = nn.Conv2d(f, spec.aux_channels, kernel_size=3, stride=1, padding=1)
            self._aux_out = _output_layer(spec.aux_nonlinearity)

    def forward(self, x):
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            s = block(x)
            skips.append(s)
            x = down(s)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            x = up(x)
            x = block(torch.cat([x, skip], dim=1))
        main = self._out(self.head(x))
        if self.spec.aux_channels:
            return main, self._aux_out(self.aux_head(x))
        return main


class WholeImageDiscriminator(nn.Module):
    """Strided conv blocks followed by a flatten and a single linear score."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        f = spec.initial_filters
        layers: list[nn.Module] = []
        c = spec.in_channels
        for i in range(spec.depth):
            ch = f * 2**i
            layers.append(nn.Conv2d(c, ch, kernel_size=4, stride=2, padding=1))
            layers.append(nn.BatchNorm2d(ch))
            layers.append(_activation(spec))
            c = ch
        self.blocks = nn.Sequential(*layers)
        side = spec.input_size // (2**spec.depth)
        self.head = nn.Linear(c * side * side, 1)

    def forward(self, x):
        h = self.blocks(x)
        return self.head(h.flatten(1)).squeeze(1)


def _init_weights(module: nn.Module, seed: int | None) -> None:
    # Zero-mean Gaussian (sigma 0.02) for conv/linear weights; batch norm
    # scales around 1. Deterministic when a seed is given.
    gen = torch.Generator()
    if seed is not None:
        gen.manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.normal_(1.0, 0.02, generator=gen)
            m.bias.data.zero_()


def instantiate(
    spec: NetworkSpec, seed: int | None = None, dtype: torch.dtype = torch.float32
) -> nn.Module:
    """Build a torch module for a spec, freshly initialized."""
    spec.validate()
    if spec.kind == "discriminator":
        module: nn.Module = WholeImageDiscriminator(spec)
    else:
        module = UNetGenerator(spec)
    _init_weights(module, seed)
    return module.to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class WeightSnapshot:
    """A serialized parameter set tagged with its training-step count."""

    spec: NetworkSpec
    parameters: dict[str, np.ndarray]
    step: int
    tag: str

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be non-negative")

    @property
    def name(self) -> str:
        """File stem; unique per (tag, step) and used as provenance id."""
        return f"{self.tag}_step{self.step:05d}"

    @staticmethod
    def from_module(spec: NetworkSpec, module: nn.Module, step: int, tag: str) -> "WeightSnapshot":
        params = {
            k: v.detach().cpu().to(torch.float32).numpy().copy()
            for k, v in module.state_dict().items()
        }
        return WeightSnapshot(spec=spec, parameters=params, step=step, tag=tag)

    def to_module(self, module: nn.Module) -> nn.Module:
        """Load parameters into a compatible module (shape-checked)."""
        state = module.state_dict()
        if set(state.keys()) != set(self.parameters.keys()):
            missing = set(state.keys()) ^ set(self.parameters.keys())
            raise SnapshotMismatchError(f"snapshot/topology mismatch: differing keys {sorted(missing)[:4]}")
        new_state = {}
        for k, current in state.items():
            arr = self.parameters[k]
            if tuple(arr.shape) != tuple(current.shape):
                raise SnapshotMismatchError(
                    f"snapshot/topology mismatch: {k} has shape {arr.shape}, expected {tuple(current.shape)}"
                )
            new_state[k] = torch.from_numpy(arr).to(current.dtype)
        module.load_state_dict(new_state)
        return module

    def instantiate_module(self, dtype: torch.dtype = torch.float32) -> nn.Module:
        module = instantiate(self.spec, seed=0, dtype=dtype)
        return self.to_module(module)

    def save(self, dir: Path) -> Path:
        """Write ``<tag>_step<NNNNN>.wts``: JSON manifest + raw little-endian float32."""
        dir = Path(dir)
        dir.mkdir(parents=True, exist_ok=True)
        names = sorted(self.parameters.keys())
        header = {
            "tag": self.tag,
            "step": self.step,
            "spec": asdict(self.spec),
            "tensors": [{"name": n, "shape": list(self.parameters[n].shape)} for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        path = dir / f"{self.name}.wts"
        with open(path, "wb") as f:
            f.write(WTS_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for n in names:
                f.write(self.parameters[n].astype("<f4").tobytes())
        return path

    @staticmethod
    def load(path: Path) -> "WeightSnapshot":
        path = Path(path)
        buf = path.read_bytes()
        if buf[: len(WTS_MAGIC)] != WTS_MAGIC:
            raise SnapshotMismatchError(f"{path}: not a weight snapshot file")
        (hlen,) = struct.unpack_from("<I", buf, len(WTS_MAGIC))
        start = len(WTS_MAGIC) + 4
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
        spec = NetworkSpec(**header["spec"])
        pos = start + hlen
        params: dict[str, np.ndarray] = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            nbytes = count * 4
            arr = np.frombuffer(buf[pos : pos + nbytes], dtype="<f4")
            if arr.size != count:
                raise SnapshotMismatchError(f"{path}: truncated tensor {t['name']}")
            params[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
            pos += nbytes
        return WeightSnapshot(spec=spec, parameters=params, step=header["step"], tag=header["tag"])


def spec_with_size(spec: NetworkSpec, input_size: int) -> NetworkSpec:
    """Same topology at a different input size (generators are size-agnostic)."""
    return replace(spec, input_size=input_size)
