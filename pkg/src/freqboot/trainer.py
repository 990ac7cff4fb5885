"""Self-supervised pretraining loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .augmentations import AugmentationConfig, views_for
from .network import (
    DualNetwork,
    EncoderConfig,
    MLPHeadConfig,
    NetworkConfig,
    TCNHeadConfig,
    save_checkpoint,
)
from .objective import full_loss

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "l_lfb", "l_hfb", "l_total", "wallclock_s"]


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, norms=None):
        super().__init__(message)
        self.norms = norms or {}


# TCN kernel/dilation pairs for the two orderings compared in the kernel ablation
KERNEL_VARIANTS = {
    "(K1<K2,D>K1)-K2": {"kernel_size": 3, "dilations": (4, 8)},
    "(K1>K2,D<K1)-K2": {"kernel_size": 9, "dilations": (1, 2)},
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 3e-4
    weight_decay: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 0.996
    lam: float = 0.51
    seed: int = 0
    dataset: str = "HAR"
    downstream_epochs: int = 40
    downstream_batch_size: int = 128
    predictor_hidden: int = 256
    symmetric_loss: bool = False
    disable_tcn_head: bool = False
    disable_mlp_head: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tcn: TCNHeadConfig = field(default_factory=TCNHeadConfig)
    mlp: MLPHeadConfig = field(default_factory=MLPHeadConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if self.disable_tcn_head and self.disable_mlp_head:
            raise ConfigError("disable_tcn_head and disable_mlp_head cannot both be set")
        if self.downstream_epochs < 1 or self.downstream_batch_size < 2:
            raise ConfigError("downstream_epochs must be >= 1 and downstream_batch_size >= 2")

    @property
    def dropout(self):
        return self.encoder.dropout

    def network_config(self, in_channels, length):
        return NetworkConfig(
            in_channels=in_channels,
            length=length,
            encoder=self.encoder,
            tcn=self.tcn,
            mlp=self.mlp,
            predictor_hidden=self.predictor_hidden,
            use_tcn=not self.disable_tcn_head,
            use_mlp=not self.disable_mlp_head,
            tau=self.tau,
        )

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self):
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_SUBCONFIGS = {
    "encoder": EncoderConfig,
    "tcn": TCNHeadConfig,
    "mlp": MLPHeadConfig,
    "augmentation": AugmentationConfig,
}


def _build(cls, data, where):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(data, base=None):
    """Build a :class:`TrainConfig` from plain data, rejecting unknown keys.

    Keys missing from ``data`` fall back to ``base`` (default: ``TrainConfig()``);
    sub-config dicts are merged key by key.
    """
    base = base or TrainConfig()
    data = dict(data)
    merged = {}
    for name, cls in _SUBCONFIGS.items():
        if name in data:
            sub = data.pop(name)
            if not isinstance(sub, dict):
                raise ConfigError(f"{name} must be an object")
            current = asdict(getattr(base, name))
            current.update(sub)
            merged[name] = _build(cls, current, name)
    flat = {k: v for k, v in asdict(base).items() if k not in _SUBCONFIGS}
    unknown = set(data) - set(flat)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    flat.update(data)
    flat.update({k: getattr(base, k) for k in _SUBCONFIGS if k not in merged})
    flat.update(merged)
    try:
        return TrainConfig(**flat)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if "preset" in data:
        data = dict(data)
        base = preset(data.pop("preset"))
    return config_from_dict(data, base)


# pretrain/downstream epochs and batch sizes per dataset
PRESETS = {
    "HAR": {"epochs": 40, "downstream_epochs": 40, "batch_size": 128, "downstream_batch_size": 128},
    "Epilepsy": {"epochs": 40, "downstream_epochs": 40, "batch_size": 128, "downstream_batch_size": 128},
    "Sleep-EDF": {"epochs": 20, "downstream_epochs": 40, "batch_size": 150, "downstream_batch_size": 150},
    "ECG-MEDH": {"epochs": 50, "downstream_epochs": 50, "batch_size": 150, "downstream_batch_size": 150},
    "IMU": {"epochs": 100, "downstream_epochs": 100, "batch_size": 32, "downstream_batch_size": 32},
    "synthetic": {
        "epochs": 20, "downstream_epochs": 30, "batch_size": 64, "downstream_batch_size": 64,
        "lr": 1e-3, "tau": 0.99,
        "encoder": {"channels_per_block": [16, 32, 32], "kernel_sizes": [25, 8, 8]},
        "tcn": {"hidden_dim": 32, "out_dim": 64},
        "mlp": {"hidden_dim": 128, "out_dim": 64},
        "predictor_hidden": 128,
    },
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    cfg = config_from_dict({"dataset": name, **PRESETS[name]})
    return config_from_dict(overrides, cfg) if overrides else cfg


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def configure_threads(strict=False):
    n = os.environ.get("FREQBOOT_NUM_THREADS")
    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif n:
        torch.set_num_threads(max(1, int(n)))


def build_network(cfg, in_channels, length):
    return DualNetwork(cfg.network_config(in_channels, length))


def make_optimizer(net, cfg):
    return torch.optim.AdamW(
        net.online_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


def _norm_snapshot(net):
    return {name: float(p.detach().norm()) for name, p in net.named_parameters()}


def train_step(batch, net, optimizer, cfg, seed):
    """One update: views, online/target forward, backward, optimizer, EMA.

    ``seed`` drives the augmentation streams for this batch.
    """
    x1, x2 = views_for(np.asarray(batch), cfg.augmentation, seed)
    x1 = torch.as_tensor(x1, dtype=torch.float32)
    x2 = torch.as_tensor(x2, dtype=torch.float32)
    net.train()
    losses = full_loss(net.forward_online(x1), net.forward_target(x2), cfg.lam)
    total = losses.l_total
    if cfg.symmetric_loss:
        swapped = full_loss(net.forward_online(x2), net.forward_target(x1), cfg.lam)
        total = total + swapped.l_total
    if not torch.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss {float(total.detach())}", _norm_snapshot(net))
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    net.ema_update(cfg.tau)
    return losses


def iterate_batches(n, batch_size, rng):
    """Shuffled index batches; a trailing batch of one sample is dropped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            break
        yield idx


def steps_per_epoch(n, batch_size):
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def _check_train_split(ds):
    if ds.split not in (None, "train"):
        raise ConfigError(f"pretraining only consumes the train split, got split={ds.split!r}")


def pretrain(cfg, ds, out_dir=None, strict=False, net=None):
    """Pretrain on ``ds`` (train split) and return the trained network.

    When ``out_dir`` is given, writes ``last.ckpt`` every epoch, ``best.ckpt``
    at the lowest epoch-mean loss and appends to ``train_log.csv``. In strict
    mode wall-clock times are logged as 0 so logs are byte-reproducible.
    """
    _check_train_split(ds)
    configure_threads(strict)
    torch.manual_seed(cfg.seed)
    net = net if net is not None else build_network(cfg, ds.channels, ds.length)
    optimizer = make_optimizer(net, cfg)
    x_all = np.asarray(ds.samples, dtype=np.float32)
    writer = None
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        new = not log_path.exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_HEADER)
    history = []
    best = math.inf
    step = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            totals = []
            for idx in iterate_batches(len(x_all), cfg.batch_size, rng):
                losses = train_step(x_all[idx], net, optimizer, cfg, seed=[cfg.seed, epoch, step])
                l_lfb, l_hfb, l_total = losses.as_floats()
                totals.append(l_total)
                wall = 0.0 if strict else time.perf_counter() - t0
                history.append({"epoch": epoch, "step": step, "l_lfb": l_lfb, "l_hfb": l_hfb,
                                "l_total": l_total, "wallclock_s": wall})
                if writer is not None:
                    writer.writerow([epoch, step, repr(l_lfb), repr(l_hfb), repr(l_total), f"{wall:.6f}"])
                step += 1
            mean = float(np.mean(totals))
            log.info("epoch %d  mean loss %.5f", epoch, mean)
            if out_dir is not None:
                fh.flush()
                meta = {"config_hash": cfg.config_hash(), "epoch_mean_loss": mean}
                rng_state = torch.get_rng_state().numpy()
                save_checkpoint(out_dir / "last.ckpt", net, cfg.to_dict(), epoch + 1, rng_state, meta)
                if mean < best:
                    save_checkpoint(out_dir / "best.ckpt", net, cfg.to_dict(), epoch + 1, rng_state, meta)
            best = min(best, mean)
    finally:
        if fh is not None:
            fh.close()
    net.history_ = history
    net.best_checkpoint_ = out_dir / "best.ckpt" if out_dir is not None else None
    return net


def epoch_means(history):
    by_epoch = {}
    for row in history:
        by_epoch.setdefault(row["epoch"], []).append(row["l_total"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
