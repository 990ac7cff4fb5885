"""Downstream evaluation protocols with their metrics and report files."""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import subsample_labels
from .network import DualNetwork, load_checkpoint
from .trainer import TrainConfig, build_network, config_from_dict, iterate_batches

PROTOCOLS = ("linear", "semisup", "supervised_baseline", "random_init_baseline")


class EvaluationConfigError(ValueError):
    pass


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    label_fraction: float
    seed: int
    config_hash: str
    method: str = ""
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not self.method:
            self.method = self.protocol

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def compute_metrics(preds, labels, num_classes):
    """Accuracy, macro-F1 and per-class F1 over all ``num_classes`` classes.

    A class with no true and no predicted samples gets F1 = 0 and still
    counts toward the macro average.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ValueError("preds and labels must be non-empty and of equal length")
    if labels.min() < 0 or labels.max() >= num_classes or preds.min() < 0 or preds.max() >= num_classes:
        raise ValueError(f"labels and predictions must lie in [0, {num_classes})")
    cm = np.bincount(labels * num_classes + preds, minlength=num_classes * num_classes)
    cm = cm.reshape(num_classes, num_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    accuracy = float(tp.sum() / labels.size)
    return accuracy, float(f1.mean()), f1.tolist()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _resolve(model, cfg):
    """Accept a checkpoint path or an in-memory network."""
    if isinstance(model, DualNetwork):
        net = model
    else:
        ckpt = load_checkpoint(model)
        net = ckpt.network
        if cfg is None and ckpt.config:
            cfg = config_from_dict(ckpt.config)
    return net, cfg or TrainConfig()


def _check_classes(train, test, strict=True):
    missing = sorted(set(np.unique(test.labels)) - set(np.unique(train.labels)))
    if missing and strict:
        raise EvaluationConfigError(f"classes {missing} appear in the test split but not in training labels")
    return [f"class {c} absent from training labels" for c in missing]


def _tensor(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def _optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def _fit(model, x, y, cfg, seed):
    """Cross-entropy training of ``model`` on (x, y) with the shared optimizer
    settings and the downstream epoch/batch budget."""
    torch.manual_seed(seed)
    opt = _optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    y = torch.as_tensor(y, dtype=torch.long)
    for epoch in range(cfg.downstream_epochs):
        rng = np.random.default_rng([seed, epoch, 7])
        model.train()
        for idx in iterate_batches(len(x), cfg.downstream_batch_size, rng):
            idx = torch.as_tensor(idx)
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def _predict(model, x, batch_size=512):
    model.eval()
    return torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)]).numpy()


def _report(protocol, preds, test, fraction, seed, cfg, method, warnings):
    acc, mf1, per_class = compute_metrics(preds, test.labels, test.num_classes)
    return EvalReport(protocol, acc, mf1, per_class, fraction, seed, cfg.config_hash(), method, list(warnings))


class EncoderClassifier(nn.Module):
    def __init__(self, encoder, num_classes):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.out_features, num_classes)

    def forward(self, x):
        return self.head(self.encoder(x).flatten(1))


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def linear_probe(net, train, test, cfg, seed=0, protocol="linear", method=None):
    """Train one linear layer on frozen, eval-mode encoder features."""
    warnings = _check_classes(train, test)
    torch.manual_seed(seed)
    x_train = net.embed(_tensor(train.samples))
    x_test = net.embed(_tensor(test.samples))
    clf = nn.Linear(x_train.shape[1], test.num_classes)
    _fit(clf, x_train, train.labels, cfg, seed)
    return _report(protocol, _predict(clf, x_test), test, 1.0, seed, cfg, method or protocol, warnings)


def linear_evaluate(model, train, test, cfg=None, seed=0):
    """Linear evaluation of a pretrained checkpoint (path or network)."""
    net, cfg = _resolve(model, cfg)
    return linear_probe(net, train, test, cfg, seed, "linear")


def fine_tune(encoder, train, test, cfg, seed, protocol, fraction, method=None, warnings=()):
    model = EncoderClassifier(encoder, test.num_classes)
    _fit(model, _tensor(train.samples), train.labels, cfg, seed)
    preds = _predict(model, _tensor(test.samples))
    return _report(protocol, preds, test, fraction, seed, cfg, method or protocol, warnings)


def finetune_semisupervised(model, train, test, fraction, seed=0, cfg=None):
    """Fine-tune a copy of the online encoder plus a linear layer on a
    stratified ``fraction`` of the training labels."""
    net, cfg = _resolve(model, cfg)
    subset = subsample_labels(train, fraction, seed)
    warnings = list(subset.warnings) + _check_classes(subset, test, strict=False)
    encoder = copy.deepcopy(net.online.encoder)
    for p in encoder.parameters():
        p.requires_grad_(True)
    return fine_tune(encoder, subset, test, cfg, seed, "semisup", fraction, warnings=warnings)


def run_supervised_baseline(cfg, train, test, seed=0, protocol="supervised", fraction=1.0):
    """Randomly initialized baselines.

    ``protocol="supervised"`` trains encoder and classifier end to end;
    ``protocol="random"`` fits a linear probe on the frozen random encoder.
    """
    torch.manual_seed(seed)
    net = build_network(cfg, train.channels, train.length)
    if protocol == "random":
        return linear_probe(net, train, test, cfg, seed, "random_init_baseline")
    if protocol != "supervised":
        raise EvaluationConfigError(f"unknown baseline {protocol!r}; expected 'supervised' or 'random'")
    subset = subsample_labels(train, fraction, seed) if fraction < 1.0 else train
    warnings = list(subset.warnings) + _check_classes(subset, test, strict=fraction == 1.0)
    return fine_tune(net.online.encoder, subset, test, cfg, seed, "supervised_baseline", fraction,
                     warnings=warnings)


def export_embeddings(model, ds, out_path):
    """Write frozen encoder features of ``ds`` as ``index,label,e_0..e_{d-1}``."""
    net, _ = _resolve(model, None)
    emb = net.embed(_tensor(ds.samples)).numpy()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"] + [f"e_{j}" for j in range(emb.shape[1])])
        for i, (label, row) in enumerate(zip(ds.labels, emb)):
            writer.writerow([i, int(label)] + [repr(float(v)) for v in row])
    tmp.replace(out_path)
    return out_path


# ---------------------------------------------------------------------------
# report persistence
# ---------------------------------------------------------------------------

TABLE_HEADER = ["method", "protocol", "label_fraction", "n_seeds", "acc_mean", "acc_std",
                "mf1_mean", "mf1_std", "ACC", "MF1", "config_hash"]


def summarize(reports):
    """Group reports by (method, protocol, label fraction) into table rows with
    mean and population std in percent over seeds."""
    groups = {}
    for r in reports:
        groups.setdefault((r.method, r.protocol, r.label_fraction), []).append(r)
    rows = []
    for (method, protocol, fraction), rs in groups.items():
        acc = 100 * np.array([r.accuracy for r in rs])
        mf1 = 100 * np.array([r.macro_f1 for r in rs])
        rows.append({
            "method": method, "protocol": protocol, "label_fraction": fraction, "n_seeds": len(rs),
            "acc_mean": round(float(acc.mean()), 4), "acc_std": round(float(acc.std()), 4),
            "mf1_mean": round(float(mf1.mean()), 4), "mf1_std": round(float(mf1.std()), 4),
            "ACC": f"{acc.mean():.2f}±{acc.std():.2f}", "MF1": f"{mf1.mean():.2f}±{mf1.std():.2f}",
            "config_hash": ";".join(sorted({r.config_hash for r in rs})),
        })
    return rows


def write_table(rows, path, header=TABLE_HEADER):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def record_report(report, out_dir, name=None):
    """Write ``report`` as JSON, append it to ``reports.jsonl`` and rebuild
    ``results_table.csv`` from every report recorded in ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or f"report_{report.method}_seed{report.seed}_frac{report.label_fraction:g}.json"
    (out_dir / name).write_text(report.to_json())
    with open(out_dir / "reports.jsonl", "a") as fh:
        fh.write(json.dumps(asdict(report), sort_keys=True) + "\n")
    reports = [EvalReport.from_dict(json.loads(line))
               for line in (out_dir / "reports.jsonl").read_text().splitlines() if line.strip()]
    write_table(summarize(reports), out_dir / "results_table.csv")
    return out_dir / name
