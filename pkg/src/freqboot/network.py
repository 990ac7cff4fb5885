"""Network modules and the online/target network pair."""

from __future__ import annotations

import copy
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class NetworkStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    kernel_sizes: tuple[int, ...] = (25, 8, 8)
    channels_per_block: tuple[int, ...] = (32, 64, 128)
    pool_size: int = 2
    dropout: float = 0.35

    def __post_init__(self):
        if len(self.kernel_sizes) != len(self.channels_per_block):
            raise ValueError("kernel_sizes and channels_per_block must have one entry per block")
        if not self.kernel_sizes:
            raise ValueError("encoder needs at least one block")
        if any(k < 1 for k in self.kernel_sizes) or any(c < 1 for c in self.channels_per_block):
            raise ValueError("kernel sizes and channel counts must be positive")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def blocks(self):
        return len(self.kernel_sizes)


@dataclass(frozen=True)
class TCNHeadConfig:
    kernel_size: int = 3
    dilations: tuple[int, ...] = (4, 8)
    hidden_dim: int = 128
    out_dim: int = 128

    def __post_init__(self):
        if not self.dilations:
            raise ValueError("TCN head needs at least one layer")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ValueError(f"dilations must be strictly increasing, got {self.dilations}")
        if self.kernel_size < 1 or min(self.dilations) < 1:
            raise ValueError("kernel_size and dilations must be positive")
        if self.hidden_dim < 1 or self.out_dim < 1:
            raise ValueError("TCN dims must be positive")

    @property
    def layers(self):
        return len(self.dilations)

    def ordering_ok(self, encoder_cfg):
        """True when the kernel is below the smallest encoder kernel and
        every dilation exceeds the TCN kernel."""
        return self.kernel_size < min(encoder_cfg.kernel_sizes) and min(self.dilations) > self.kernel_size


@dataclass(frozen=True)
class MLPHeadConfig:
    hidden_dim: int = 256
    out_dim: int = 128

    def __post_init__(self):
        if self.hidden_dim < 1 or self.out_dim < 1:
            raise ValueError("MLP dims must be positive")


def receptive_field(cfg, convs_per_block=1):
    return 1 + sum((cfg.kernel_size - 1) * d * convs_per_block for d in cfg.dilations)


def encoded_length(length, cfg):
    for _ in range(cfg.blocks):
        length //= cfg.pool_size
    return length


class SameConv1d(nn.Conv1d):
    """Stride-1 convolution whose output length equals its input length."""

    def __init__(self, in_ch, out_ch, kernel_size, bias=False):
        super().__init__(in_ch, out_ch, kernel_size, bias=bias)
        self.pad = ((kernel_size - 1) // 2, kernel_size // 2)

    def forward(self, x):
        return super().forward(F.pad(x, self.pad))


class EncoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel_size, pool_size, dropout):
        super().__init__()
        self.conv = SameConv1d(in_ch, out_ch, kernel_size)
        self.bn = nn.BatchNorm1d(out_ch)
        self.pool = nn.MaxPool1d(pool_size, pool_size)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.pool(F.relu(self.bn(self.conv(x)))))


class Encoder(nn.Module):
    """Stack of conv -> batchnorm -> ReLU -> max-pool -> dropout blocks.

    Kernels longer than the temporal length entering a block are capped to
    that length, so short series still pass through "large" kernels.
    """

    def __init__(self, in_channels, length, cfg=EncoderConfig()):
        super().__init__()
        min_len = cfg.pool_size ** cfg.blocks
        if length < min_len:
            raise ValueError(
                f"series length {length} is shorter than the total pooling reduction "
                f"{cfg.pool_size}^{cfg.blocks}={min_len}"
            )
        self.cfg = cfg
        self.in_channels = in_channels
        self.length = length
        blocks = []
        cur_len, cur_ch = length, in_channels
        self.effective_kernels = []
        for k, ch in zip(cfg.kernel_sizes, cfg.channels_per_block):
            k_eff = min(k, cur_len)
            self.effective_kernels.append(k_eff)
            blocks.append(EncoderBlock(cur_ch, ch, k_eff, cfg.pool_size, cfg.dropout))
            cur_len //= cfg.pool_size
            cur_ch = ch
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = cur_ch
        self.out_length = cur_len

    @property
    def out_features(self):
        return self.out_channels * self.out_length

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.in_channels or x.shape[2] != self.length:
            raise ValueError(
                f"expected input [B, {self.in_channels}, {self.length}], got {tuple(x.shape)}"
            )
        return self.blocks(x)


class CausalConv1d(nn.Conv1d):
    def __init__(self, in_ch, out_ch, kernel_size, dilation, bias=True):
        super().__init__(in_ch, out_ch, kernel_size, dilation=dilation, bias=bias)
        self.left_pad = (kernel_size - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left_pad, 0)))


class TCNBlock(nn.Module):
    """Pre-activation residual block: batchnorm -> ReLU -> dilated causal conv."""

    def __init__(self, in_ch, out_ch, kernel_size, dilation):
        super().__init__()
        self.bn = nn.BatchNorm1d(in_ch)
        self.conv = CausalConv1d(in_ch, out_ch, kernel_size, dilation)
        self.skip = nn.Conv1d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        return self.skip(x) + self.conv(F.relu(self.bn(x)))


class TCNHead(nn.Module):
    def __init__(self, in_channels, cfg=TCNHeadConfig()):
        super().__init__()
        self.cfg = cfg
        chans = [in_channels] + [cfg.hidden_dim] * cfg.layers
        self.blocks = nn.Sequential(*[
            TCNBlock(chans[i], chans[i + 1], cfg.kernel_size, d) for i, d in enumerate(cfg.dilations)
        ])
        self.proj = nn.Linear(cfg.hidden_dim, cfg.out_dim)

    def features(self, z):
        """Per-timestep features ``[B, hidden, T]`` before the final projection."""
        return self.blocks(z)

    def forward(self, z):
        return self.proj(self.features(z)[:, :, -1])


class MLP(nn.Module):
    """linear -> batchnorm -> ReLU -> linear"""

    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.bn = nn.BatchNorm1d(hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        return self.fc2(F.relu(self.bn(self.fc1(x.flatten(1)))))


def mlp_head(in_features, cfg=MLPHeadConfig()):
    return MLP(in_features, cfg.hidden_dim, cfg.out_dim)


def predictor(dim, hidden_dim):
    """Predictor for either branch: MLP-shaped, output dim equals input dim."""
    return MLP(dim, hidden_dim, dim)


class HeadOutputs(NamedTuple):
    z: torch.Tensor
    t: torch.Tensor | None
    m: torch.Tensor | None
    q_t: torch.Tensor | None = None
    q_m: torch.Tensor | None = None


class Branch(nn.Module):
    """Encoder plus whichever projection heads are enabled."""

    def __init__(self, in_channels, length, enc_cfg, tcn_cfg, mlp_cfg, use_tcn=True, use_mlp=True):
        super().__init__()
        self.encoder = Encoder(in_channels, length, enc_cfg)
        self.tcn = TCNHead(self.encoder.out_channels, tcn_cfg) if use_tcn else None
        self.mlp = mlp_head(self.encoder.out_features, mlp_cfg) if use_mlp else None

    def forward(self, x):
        z = self.encoder(x)
        t = self.tcn(z) if self.tcn is not None else None
        m = self.mlp(z) if self.mlp is not None else None
        return HeadOutputs(z, t, m)


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int
    length: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tcn: TCNHeadConfig = field(default_factory=TCNHeadConfig)
    mlp: MLPHeadConfig = field(default_factory=MLPHeadConfig)
    predictor_hidden: int = 256
    use_tcn: bool = True
    use_mlp: bool = True
    tau: float = 0.996

    def __post_init__(self):
        if not (self.use_tcn or self.use_mlp):
            raise ValueError("at least one of the TCN and MLP heads must be enabled")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")


class DualNetwork(nn.Module):
    """Online branch with predictors and an EMA-tracked target branch.

    The target branch never requires gradients and its batchnorm layers do
    not update running statistics on forward; both parameters and running
    statistics move only through :meth:`ema_update`.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.online = Branch(cfg.in_channels, cfg.length, cfg.encoder, cfg.tcn, cfg.mlp,
                             cfg.use_tcn, cfg.use_mlp)
        self.tcn_predictor = predictor(cfg.tcn.out_dim, cfg.predictor_hidden) if cfg.use_tcn else None
        self.mlp_predictor = predictor(cfg.mlp.out_dim, cfg.predictor_hidden) if cfg.use_mlp else None
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        for mod in self.target.modules():
            if isinstance(mod, nn.modules.batchnorm._BatchNorm):
                mod.momentum = 0.0

    @property
    def encoder(self):
        return self.online.encoder

    def online_parameters(self):
        """Everything the optimizer may touch: online branch plus predictors."""
        return [p for name, p in self.named_parameters() if not name.startswith("target.")]

    def forward_online(self, x):
        out = self.online(x)
        q_t = self.tcn_predictor(out.t) if out.t is not None else None
        q_m = self.mlp_predictor(out.m) if out.m is not None else None
        return out._replace(q_t=q_t, q_m=q_m)

    def forward_target(self, x):
        with torch.no_grad():
            out = self.target(x)
        return HeadOutputs(*(v.detach() if v is not None else None for v in out))

    @torch.no_grad()
    def ema_update(self, tau=None):
        ema_update(self.target, self.online, self.cfg.tau if tau is None else tau)

    @torch.no_grad()
    def embed(self, x, batch_size=512):
        """Flattened online-encoder representation in eval mode."""
        was_training = self.training
        self.eval()
        try:
            outs = [self.online.encoder(x[i:i + batch_size]).flatten(1) for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return torch.cat(outs)


@torch.no_grad()
def ema_update(target, online, tau):
    """``target <- tau * target + (1 - tau) * online`` for every parameter and
    floating-point buffer."""
    if not 0.0 <= tau <= 1.0:
        raise NetworkStateError(f"tau must be in [0, 1], got {tau}")
    t_state = dict(target.named_parameters()) | {k: v for k, v in target.named_buffers() if v.is_floating_point()}
    o_state = dict(online.named_parameters()) | {k: v for k, v in online.named_buffers() if v.is_floating_point()}
    if t_state.keys() != o_state.keys():
        raise NetworkStateError("online and target trees have different structure")
    for name, t in t_state.items():
        o = o_state[name]
        if t.shape != o.shape:
            raise NetworkStateError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(o.shape)}")
        if tau == 1.0:
            continue
        if tau == 0.0:
            t.copy_(o)
        else:
            t.mul_(tau).add_(o, alpha=1.0 - tau)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _to_jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _to_jsonable(getattr(obj, k)) for k in obj.__dataclass_fields__}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def network_config_from_dict(d):
    d = dict(d)
    d["encoder"] = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["encoder"].items()})
    d["tcn"] = TCNHeadConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["tcn"].items()})
    d["mlp"] = MLPHeadConfig(**d["mlp"])
    return NetworkConfig(**d)


def save_checkpoint(path, net, config=None, epoch=0, rng_state=None, extra=None):
    """Write one ``.npz`` archive holding both parameter trees and metadata.

    Floating tensors are stored little-endian float32 under their state-dict
    names (``online.*``, ``target.*``, ``*_predictor.*``); a JSON entry holds
    the config and training state. The file is written to a temporary name
    first and renamed into place.
    """
    path = Path(path)
    arrays = {}
    shapes = {}
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        arr = arr.astype("<f4") if arr.dtype.kind == "f" else arr.astype("<i8")
        arrays[name] = arr
        shapes[name] = list(arr.shape)
    meta = {
        "network": _to_jsonable(net.cfg),
        "config": config if config is not None else {},
        "epoch": int(epoch),
        "shapes": shapes,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    if rng_state is not None:
        arrays["__rng_state__"] = np.asarray(rng_state, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


class Checkpoint(NamedTuple):
    network: DualNetwork
    config: dict
    epoch: int
    rng_state: np.ndarray | None
    extra: dict


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode())
        net = DualNetwork(network_config_from_dict(meta["network"]))
        own = net.state_dict()
        if set(own) != set(meta["shapes"]):
            raise NetworkStateError(f"checkpoint {path} does not match the network structure")
        state = {}
        for name, ref in own.items():
            arr = archive[name]
            if list(arr.shape) != list(ref.shape):
                raise NetworkStateError(f"{name}: stored shape {arr.shape} != expected {tuple(ref.shape)}")
            state[name] = torch.from_numpy(arr.astype(np.float32 if ref.is_floating_point() else np.int64))
        net.load_state_dict(state)
        rng = archive["__rng_state__"].copy() if "__rng_state__" in archive.files else None
    return Checkpoint(net, meta["config"], meta["epoch"], rng, meta["extra"])
