"""Acceptance suite.

Criteria 1-7 are property checks without datasets, 8-11 run the desk-scale
synthetic experiments on CPU, and 12-13 need converted HAR data whose
directory is given by ``FREQBOOT_HAR_DATA`` (skipped otherwise). A summary
line per criterion is printed at the end of the session.
"""

import os
from pathlib import Path

import numpy as np
import pytest
import torch

from freqboot.augmentations import (
    AugmentationConfig,
    make_view_pair,
    permute_segments,
    rotate,
)
from freqboot.data import (
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_splits,
    split_dataset,
    zscore_splits,
)
from freqboot.evaluation import (
    compute_metrics,
    finetune_semisupervised,
    linear_evaluate,
    run_supervised_baseline,
)
from freqboot.network import (
    DualNetwork,
    EncoderConfig,
    MLPHeadConfig,
    NetworkConfig,
    TCNHead,
    TCNHeadConfig,
    receptive_field,
)
from freqboot.objective import full_loss, normalized_regression_loss
from freqboot.trainer import make_optimizer, preset, pretrain

DESK_SEEDS = (0, 1, 2)
HAR_DIR = os.environ.get("FREQBOOT_HAR_DATA")


def acceptance(number, title):
    return pytest.mark.acceptance(number, title)


# ---------------------------------------------------------------------------
# property suite
# ---------------------------------------------------------------------------

@acceptance(1, "loss-form identity over 1000 pairs (d=128) within 1e-6")
def test_c01_loss_form_identity(record_property):
    rng = np.random.default_rng(2024)
    q = rng.normal(size=(1000, 128))
    g = rng.normal(size=(1000, 128)) * rng.uniform(0.01, 100, size=(1000, 1))
    cos = np.sum(q * g, axis=1) / (np.linalg.norm(q, axis=1) * np.linalg.norm(g, axis=1))
    qt, gt = torch.as_tensor(q), torch.as_tensor(g)
    worst = 0.0
    for i in range(1000):
        value = float(normalized_regression_loss(qt[i:i + 1], gt[i:i + 1]))
        worst = max(worst, abs(value - (2 - 2 * cos[i])))
    record_property("max_abs_err", f"{worst:.2e}")
    assert worst < 1e-6


def _net(seed, **kw):
    torch.manual_seed(seed)
    cfg = NetworkConfig(
        in_channels=3, length=32,
        encoder=EncoderConfig(kernel_sizes=(7, 4, 4), channels_per_block=(4, 6, 8), dropout=0.0),
        tcn=TCNHeadConfig(kernel_size=3, dilations=(1, 2), hidden_dim=6, out_dim=8),
        mlp=MLPHeadConfig(hidden_dim=10, out_dim=8), predictor_hidden=6, **kw)
    return DualNetwork(cfg)


@acceptance(2, "EMA algebra for tau in {0, 0.5, 0.996, 1}")
@pytest.mark.parametrize("tau", [0.0, 0.5, 0.996, 1.0])
def test_c02_ema_algebra(tau):
    net = _net(0)
    with torch.no_grad():
        for p in net.online.parameters():
            p.add_(torch.randn_like(p))
    old = [p.clone() for p in net.target.parameters()]
    online = [p.clone() for p in net.online.parameters()]
    net.ema_update(tau)
    for eps_old, theta, eps_new in zip(old, online, net.target.parameters()):
        assert torch.all(eps_new >= torch.minimum(eps_old, theta))
        assert torch.all(eps_new <= torch.maximum(eps_old, theta))
        if tau == 1.0:
            assert torch.equal(eps_new, eps_old)
        elif tau == 0.0:
            assert torch.equal(eps_new, theta)
        else:
            expected = tau * eps_old.double() + (1 - tau) * theta.double()
            torch.testing.assert_close(eps_new.double(), expected, rtol=1e-6, atol=1e-7)
    for before, after in zip(online, net.online.parameters()):
        assert torch.equal(before, after)


def _random_config(rng):
    blocks = int(rng.integers(1, 4))
    length = int(rng.integers(2 ** blocks * 2, 64))
    use_tcn = bool(rng.integers(0, 2))
    use_mlp = True if not use_tcn else bool(rng.integers(0, 2))
    d0 = int(rng.integers(1, 4))
    return NetworkConfig(
        in_channels=int(rng.integers(1, 5)), length=length,
        encoder=EncoderConfig(kernel_sizes=tuple(int(k) for k in rng.integers(1, 10, blocks)),
                              channels_per_block=tuple(int(c) for c in rng.integers(2, 9, blocks)),
                              dropout=float(rng.uniform(0, 0.5))),
        tcn=TCNHeadConfig(kernel_size=int(rng.integers(1, 6)), dilations=(d0, d0 * 2),
                          hidden_dim=int(rng.integers(2, 9)), out_dim=int(rng.integers(2, 9))),
        mlp=MLPHeadConfig(hidden_dim=int(rng.integers(2, 17)), out_dim=int(rng.integers(2, 9))),
        predictor_hidden=int(rng.integers(2, 9)), use_tcn=use_tcn, use_mlp=use_mlp)


@acceptance(3, "stop-gradient: zero target gradients over 20 random configs, optimizer excludes target")
def test_c03_stop_gradient():
    rng = np.random.default_rng(7)
    for trial in range(20):
        cfg = _random_config(rng)
        torch.manual_seed(trial)
        net = DualNetwork(cfg).train()
        # let gradients reach the target if anything failed to sever them
        for p in net.target.parameters():
            p.requires_grad_(True)
        n = int(rng.integers(2, 7))
        x1, x2 = torch.randn(n, cfg.in_channels, cfg.length), torch.randn(n, cfg.in_channels, cfg.length)
        out = full_loss(net.forward_online(x1), net.forward_target(x2), float(rng.uniform(0, 1)))
        out.l_total.backward()
        for name, p in net.target.named_parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, (trial, name)
        opt_ids = {id(p) for group in make_optimizer(net, preset("synthetic")).param_groups for p in group["params"]}
        assert not opt_ids & {id(p) for p in net.target.parameters()}
        assert any(p.grad is not None and torch.count_nonzero(p.grad) > 0 for p in net.online.parameters())


def _support(head, length=96):
    mask = np.zeros(length, dtype=bool)
    for trial in range(3):
        torch.manual_seed(trial)
        z = torch.randn(1, head.blocks[0].bn.num_features, length, dtype=torch.float64, requires_grad=True)
        (grad,) = torch.autograd.grad(head.features(z)[0, :, -1].sum(), z)
        mask |= (grad[0].abs().sum(0) > 0).numpy()
    return np.flatnonzero(mask)


@acceptance(4, "TCN receptive field equals impulse-response extent; future perturbations change nothing")
@pytest.mark.parametrize("k", [2, 3, 5])
@pytest.mark.parametrize("dilations", [(1,), (2, 4), (4, 8)])
def test_c04_tcn_causality_and_receptive_field(k, dilations):
    cfg = TCNHeadConfig(kernel_size=k, dilations=dilations, hidden_dim=6, out_dim=4)
    torch.manual_seed(0)
    head = TCNHead(5, cfg).double().eval()
    support = _support(head)
    assert support[-1] == 95
    assert support[-1] - support[0] + 1 == receptive_field(cfg)
    z = torch.randn(2, 5, 40, dtype=torch.float64)
    base = head.features(z)
    for t in (0, 17, 39):
        z2 = z.clone()
        z2[:, :, t:] += torch.randn(2, 5, 40 - t, dtype=torch.float64)
        assert torch.equal(head.features(z2)[:, :, :t], base[:, :, :t])


@acceptance(5, "full-loss gradients match central differences (float64, h=1e-4) within 1e-3")
def test_c05_gradient_check(record_property):
    net = _net(3).double().train()
    rng = np.random.default_rng(11)
    x1 = torch.as_tensor(rng.normal(size=(6, 3, 32)))
    x2 = torch.as_tensor(rng.normal(size=(6, 3, 32)))
    target = net.forward_target(x2)

    def loss():
        return full_loss(net.forward_online(x1), target, 0.51).l_total

    net.zero_grad()
    loss().backward()
    params = [p for p in net.online_parameters()]
    worst = 0.0
    for _ in range(10):
        p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + 1e-4
            up = float(loss())
            p[idx] = orig - 1e-4
            down = float(loss())
            p[idx] = orig
        numeric = (up - down) / 2e-4
        # biases feeding batch norm have an exactly zero gradient; the floor sits
        # above float64 difference noise (~eps * |L| / h) so those compare on scale
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    record_property("max_rel_err", f"{worst:.2e}")
    assert worst < 1e-3


@acceptance(6, "augmentation invariants: multiset, isometry, identities, determinism")
def test_c06_augmentation_invariants():
    rng = np.random.default_rng(5)
    for trial in range(50):
        x = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 7)), int(rng.integers(8, 64))))
        m = int(rng.integers(1, 9))
        out = permute_segments(x, m, seed=trial)
        np.testing.assert_array_equal(np.sort(out, axis=-1), np.sort(x, axis=-1))
        angle = float(rng.uniform(-360, 360))
        r = rotate(x, angle)
        for c in range(0, x.shape[1] - 1, 2):
            np.testing.assert_allclose(np.hypot(r[:, c], r[:, c + 1]), np.hypot(x[:, c], x[:, c + 1]),
                                       rtol=1e-6, atol=1e-12)
        if x.shape[1] % 2:
            np.testing.assert_array_equal(r[:, -1], x[:, -1])
        identity = AugmentationConfig(jitter_sigma=0.0, max_segments=1, rotation_deg_online=0.0,
                                      rotation_deg_target=0.0)
        views = make_view_pair(x, identity, seed=trial)
        np.testing.assert_array_equal(views.online, x)
        np.testing.assert_array_equal(views.target, x)
        cfg = AugmentationConfig(max_segments=min(8, x.shape[-1]))
        a, b = make_view_pair(x, cfg, seed=trial), make_view_pair(x, cfg, seed=trial)
        assert a.online.tobytes() == b.online.tobytes() and a.target.tobytes() == b.target.tobytes()


@acceptance(7, "metrics equal a brute-force confusion matrix on 1000 random instances")
def test_c07_metrics_oracle():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        k = int(rng.integers(1, 10))
        n = int(rng.integers(1, 200))
        preds, labels = rng.integers(0, k, n), rng.integers(0, k, n)
        cm = [[0] * k for _ in range(k)]
        for p, y in zip(preds.tolist(), labels.tolist()):
            cm[y][p] += 1
        f1 = []
        for c in range(k):
            tp = cm[c][c]
            fp = sum(cm[r][c] for r in range(k)) - tp
            fn = sum(cm[c]) - tp
            f1.append(2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0)
        acc = sum(cm[c][c] for c in range(k)) / n
        got = compute_metrics(preds, labels, k)
        assert got[0] == acc
        assert got[2] == f1
        assert got[1] == float(np.mean(f1))


# ---------------------------------------------------------------------------
# desk-scale empirical suite
# ---------------------------------------------------------------------------

DESK_VARIANTS = {
    "full": {},
    "no_tcn": {"disable_tcn_head": True},
    "no_mlp": {"disable_mlp_head": True},
    "lambda_0.5": {"lam": 0.5},
    "lambda_500": {"lam": 500.0},
}


@pytest.fixture(scope="module")
def desk_results():
    """Macro-F1 (percent) per variant and seed on the synthetic task."""
    scores = {}
    spec = SyntheticSpec()  # 4 classes x 200 = 800 series
    for seed in DESK_SEEDS:
        ds = generate_synthetic(spec, seed=100 + seed)
        train, _, test = zscore_splits(*split_dataset(ds, SplitSpec(seed=seed)))
        base = preset("synthetic", seed=seed)
        scores.setdefault("random_init", []).append(
            run_supervised_baseline(base, train, test, seed, "random").macro_f1)
        scores.setdefault("random_init_10pct", []).append(
            run_supervised_baseline(base, train, test, seed, "supervised", fraction=0.1).macro_f1)
        for name, overrides in DESK_VARIANTS.items():
            cfg = preset("synthetic", seed=seed, **overrides)
            net = pretrain(cfg, train)
            scores.setdefault(name, []).append(linear_evaluate(net, train, test, cfg, seed).macro_f1)
            if name == "full":
                scores.setdefault("pretrained_10pct", []).append(
                    finetune_semisupervised(net, train, test, 0.1, seed, cfg).macro_f1)
    return {k: 100 * float(np.mean(v)) for k, v in scores.items()}


@pytest.mark.slow
@acceptance(8, "complementarity: full >= best single head - 2; each single head >= random init + 10")
def test_c08_complementarity(desk_results, record_property):
    r = desk_results
    for key in ("full", "no_tcn", "no_mlp", "random_init"):
        record_property(key, f"{r[key]:.2f}")
    assert r["full"] >= max(r["no_tcn"], r["no_mlp"]) - 2.0
    assert r["no_tcn"] >= r["random_init"] + 10.0
    assert r["no_mlp"] >= r["random_init"] + 10.0


@pytest.mark.slow
@acceptance(9, "lambda sensitivity: lambda=0.5 beats lambda=500 by >= 2 macro-F1 points")
def test_c09_lambda_direction(desk_results, record_property):
    r = desk_results
    record_property("lambda_0.5", f"{r['lambda_0.5']:.2f}")
    record_property("lambda_500", f"{r['lambda_500']:.2f}")
    assert r["lambda_0.5"] - r["lambda_500"] >= 2.0


@pytest.mark.slow
@acceptance(10, "10% labels: pretrained fine-tuning beats random-init fine-tuning by >= 3 points")
def test_c10_semisupervised_direction(desk_results, record_property):
    r = desk_results
    record_property("pretrained", f"{r['pretrained_10pct']:.2f}")
    record_property("random_init", f"{r['random_init_10pct']:.2f}")
    assert r["pretrained_10pct"] - r["random_init_10pct"] >= 3.0


@pytest.mark.slow
@acceptance(11, "strict-mode pretraining runs produce identical train_log.csv")
def test_c11_determinism(tmp_path):
    ds = generate_synthetic(SyntheticSpec(), seed=100)
    train, _, _ = zscore_splits(*split_dataset(ds, SplitSpec(seed=0)))
    cfg = preset("synthetic", epochs=3, seed=0)
    for name in ("a", "b"):
        pretrain(cfg, train, tmp_path / name, strict=True)
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()


# ---------------------------------------------------------------------------
# full-scale reproduction (needs converted HAR data)
# ---------------------------------------------------------------------------

needs_har = pytest.mark.skipif(not HAR_DIR, reason="set FREQBOOT_HAR_DATA to a converted HAR dataset directory")


@pytest.fixture(scope="module")
def har_results():
    splits = load_splits(Path(HAR_DIR))
    train, test = splits["train"], splits["test"]
    out = {"same": [], "different": []}
    for seed in DESK_SEEDS:
        for family, key in (("jitter_permute_rotate", "same"), ("jitter_scale", "different")):
            cfg = preset("HAR", seed=seed, augmentation={"family": family})
            net = pretrain(cfg, train)
            out[key].append(linear_evaluate(net, train, test, cfg, seed))
    return out


@needs_har
@pytest.mark.slow
@acceptance(12, "HAR linear evaluation: accuracy >= 91.0 and macro-F1 >= 90.5 over 3 seeds")
def test_c12_har_linear(har_results, record_property):
    reports = har_results["same"]
    acc = 100 * np.mean([r.accuracy for r in reports])
    mf1 = 100 * np.mean([r.macro_f1 for r in reports])
    record_property("accuracy", f"{acc:.2f}")
    record_property("macro_f1", f"{mf1:.2f}")
    assert acc >= 91.0 and mf1 >= 90.5


@needs_har
@pytest.mark.slow
@acceptance(13, "HAR augmentation ablation: same family beats different family by >= 8 macro-F1 points")
def test_c13_har_augmentation_family(har_results, record_property):
    same = 100 * np.mean([r.macro_f1 for r in har_results["same"]])
    diff = 100 * np.mean([r.macro_f1 for r in har_results["different"]])
    record_property("same", f"{same:.2f}")
    record_property("different", f"{diff:.2f}")
    assert same - diff >= 8.0
