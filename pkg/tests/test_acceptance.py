"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Criteria 8 and 9 train models end to end and take several minutes each.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dltm.data import SYNTH_META_SCHEMA, synth_generate, write_dataset
from dltm.gradcheck import analytic_grads, directional_derivative, numeric_grad, relative_error
from dltm.metrics import ClassCounts, auc_trapezoid, precision_recall_f1
from dltm.model import (CROSS_LEAD, LEAD_INTERNAL, ModelConfig, forward, init_params, make_groups,
                        multi_head_attention, param_count, patch_coordinates, prepare_meta, transformer_block)
from dltm.optim import EMA, SAM, AdamW, WarmupPlateauSchedule, bce_with_logits, compute_grads
from dltm.tensor import Tensor
from dltm.train import BEST, LAST, LOG, Trainer, evaluate_split, load_model, parse_run_config, read_log

import oracles


def report(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def randomized_params(config, seed, scale):
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    for name, p in params.items():
        base = 1.0 if name.endswith("weight") and "norm" in name else 0.0
        p.data = base + rng.normal(scale=scale, size=p.shape)
    return params


def test_01_gradient_suite():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    params = randomized_params(cfg, 0, 0.1)
    x = rng.normal(size=(2, 12, 250))
    meta = prepare_meta([{"age": 0.3, "sex": "male", "height": None, "weight": 1.1},
                         {"age": -1.0, "sex": "female", "height": 0.5}], cfg)
    y = rng.integers(0, 2, size=(2, cfg.num_classes)).astype(float)

    def loss_fn():
        return bce_with_logits(forward(x, meta, params, cfg), y) * y.size

    names = list(params)
    grads = dict(zip(names, analytic_grads(loss_fn, [params[n] for n in names])))
    worst, worst_name, zero_ok = 0.0, "", True
    for name in names:
        p, g = params[name], grads[name]
        d = rng.normal(size=p.shape)
        d /= np.linalg.norm(d)
        along = directional_derivative(loss_fn, p, d, 1e-5)
        coords = rng.choice(p.size, size=min(p.size, 2), replace=False)
        num = numeric_grad(loss_fn, p, 1e-5, coords).reshape(-1)[coords]
        if name.endswith("attn.bk"):
            # softmax ignores a per-row shift: the key-bias gradient is exactly zero
            zero_ok &= np.abs(g).max() < 1e-12 and abs(along) < 1e-7 and np.abs(num).max() < 1e-7
            continue
        err = max(relative_error(np.vdot(g, d), along, floor=1e-6),
                  relative_error(g.reshape(-1)[coords], num, floor=1e-6))
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-4 and zero_ok and elapsed < 300,
           f"{len(names)} tensors, max rel err {worst:.2e} ({worst_name}), key-bias grads zero: {zero_ok}, "
           f"{elapsed:.0f}s")


def test_02_group_attention_oracle():
    small = ModelConfig(embed_dim=20, hidden_dim=24, num_heads=2, num_ortho_blocks=1, num_msa_blocks=1)
    worst = 0.0
    for seed in range(50):
        params = randomized_params(small, seed, 0.3)
        x = np.random.default_rng(seed + 1000).normal(size=(2, small.num_patch_tokens, small.embed_dim))
        for mode in (LEAD_INTERNAL, CROSS_LEAD):
            for convention in ("figure_intuitive", "paper_text"):
                groups = make_groups(patch_coordinates(small), mode, convention)
                mask = oracles.group_mask(groups, x.shape[1])
                got = multi_head_attention(Tensor(x), params, "ortho.0.lead_internal.attn", 2, groups).data
                want = oracles.masked_mha(x, params, "ortho.0.lead_internal.attn", 2, mask)
                worst = max(worst, float(np.abs(got - want).max()))
    report(2, worst <= 1e-10, f"50 seeds x 2 modes x 2 conventions, max abs diff {worst:.1e}")


def test_03_lead_locality():
    cfg = ModelConfig(embed_dim=20, hidden_dim=24, num_heads=2)
    coords = patch_coordinates(cfg)
    ok = True
    for seed, lead in enumerate(range(cfg.num_leads)):
        params = randomized_params(cfg, seed, 0.3)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, cfg.num_patch_tokens, cfg.embed_dim))
        groups = make_groups(coords, LEAD_INTERNAL)
        y = x.copy()
        j = coords.lead_index == lead
        y[:, j] += rng.normal(scale=10.0, size=y[:, j].shape)
        for fn in (lambda t: multi_head_attention(t, params, "ortho.0.lead_internal.attn", 2, groups),
                   lambda t: transformer_block(t, params, "ortho.0.lead_internal", 2, groups)):
            a, b = fn(Tensor(x)).data, fn(Tensor(y)).data
            ok &= a[:, ~j].tobytes() == b[:, ~j].tobytes()
    report(3, ok, "other leads bit-identical after perturbing each lead in turn")


def test_04_parameter_count():
    n = param_count(init_params(ModelConfig(), 0))
    report(4, 2_340_000 <= n <= 2_860_000, f"{n:,} trainable parameters (target 2.34M-2.86M)")


def test_05_token_geometry():
    cfg = ModelConfig(embed_dim=20, hidden_dim=24, num_heads=2, num_classes=3)
    trace = forward(np.random.default_rng(0).normal(size=(2, 12, 250)),
                    prepare_meta([{"age": 1.0}, {}], cfg), randomized_params(cfg, 0, 0.3), cfg,
                    return_trace=True)
    kinds = patch_coordinates(ModelConfig()).kind
    fine, coarse = kinds.count("fine_patch"), kinds.count("coarse_patch")
    seq = trace.sequence.shape[1]
    gap = float(np.abs(trace.class_token.data - trace.patch_features.data.mean(axis=1)).max())
    ok = (fine, coarse) == (60, 12) and seq == 73 + cfg.num_meta_tokens and gap <= 1e-12
    report(5, ok, f"{fine} fine + {coarse} coarse tokens, MSA length {seq} = 73 + {cfg.num_meta_tokens}, "
                  f"class-token gap {gap:.1e}")


def test_06_optimizer_suite():
    rng = np.random.default_rng(0)
    params = {"w": Tensor(rng.normal(size=(4, 3)), requires_grad=True),
              "b": Tensor(rng.normal(size=3), requires_grad=True)}
    x = Tensor(rng.normal(size=(6, 4)))

    def loss_fn():
        h = x @ params["w"] + params["b"]
        return (h * h).mean()

    sam = SAM(0.05)
    sam.step(params, lambda: compute_grads(loss_fn, params), lambda g: None)
    norm_err = abs(sam.last_perturbation_norm - 0.05)

    def quad(ps):
        return lambda: compute_grads(lambda: ((ps["p"] - 3.0) * (ps["p"] - 3.0)).sum() / 2, ps)

    a = {"p": Tensor(rng.normal(size=5), requires_grad=True)}
    b = {"p": Tensor(a["p"].data.copy(), requires_grad=True)}
    oa, ob, sam0 = AdamW(), AdamW(), SAM(0.0)
    for _ in range(100):
        sam0.step(a, quad(a), lambda g: oa.step(a, g, 0.01))
        ob.step(b, quad(b)()[1], 0.01)
    bitwise = a["p"].data.tobytes() == b["p"].data.tobytes()

    s0 = rng.normal(size=7)
    ema = EMA(0.998, {"p": s0.copy()})
    const = {"p": Tensor(np.full(7, 1.5))}
    for _ in range(100):
        ema.update(const)
    closed = s0 * 0.998 ** 100 + 1.5 * (1 - 0.998 ** 100)
    ema_err = float(np.abs(ema.shadow["p"] - closed).max())

    sched = WarmupPlateauSchedule()
    trace = [sched.step(e) for e in range(20)]
    warm_ok = trace == [0.003 * (e + 1) / 20 for e in range(20)] and trace[-1] == 0.003

    ok = norm_err <= 1e-12 and bitwise and ema_err <= 1e-12 and warm_ok
    report(6, ok, f"|eps|-rho {norm_err:.1e}; rho=0 bitwise {bitwise}; EMA err {ema_err:.1e}; warmup exact {warm_ok}")


def test_07_metric_suite():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = (0, 1)
        scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        num, den = oracles.pair_count_auc(scores, labels)
        mismatches += auc_trapezoid(scores, labels) != num / den
    p, _, _ = precision_recall_f1(ClassCounts(tp=3, fp=1))
    _, r, _ = precision_recall_f1(ClassCounts(tp=3, fn=2))
    _, _, f1 = precision_recall_f1(ClassCounts(tp=3, fp=1, fn=2))
    ok = mismatches == 0 and p == 0.75 and r == 0.6 and abs(f1 - 2 / 3) < 1e-15
    report(7, ok, f"1000 AUC instances, {mismatches} mismatches; P={p} R={r} F1={f1:.15f}")


@pytest.fixture(scope="module")
def synth32(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth32")
    records, names = synth_generate(1, 32)
    write_dataset(root, records, names, SYNTH_META_SCHEMA)
    return root


@pytest.mark.slow
def test_08_end_to_end_overfit(synth32, tmp_path):
    train_folds = list(range(1, 9))
    run = parse_run_config({
        "model": {"embed_dim": 32, "hidden_dim": 96, "num_heads": 4, "num_ortho_blocks": 1, "num_msa_blocks": 1},
        "data": {"path": str(synth32), "batch_size": 8, "val_folds": train_folds},
        "optim": {"epochs": 300, "plateau_metric": "val_loss"},
        "output_dir": str(tmp_path / "run"),
    })
    t0 = time.perf_counter()
    Trainer(run).fit()
    elapsed = time.perf_counter() - t0
    log = read_log(tmp_path / "run" / LOG)
    model = load_model(tmp_path / "run" / LAST)
    from dltm.data import load_dataset
    auc = evaluate_split(model, load_dataset(synth32), train_folds).macro_auc
    loss = log[-1]["train_loss"]
    ok = len(log) <= 300 and loss < 0.05 and auc == 1.0 and elapsed < 900
    report(8, ok, f"{len(log)} epochs, final train loss {loss:.4f}, train macro-AUC {auc}, {elapsed / 60:.1f} min")


@pytest.fixture(scope="module")
def synth256(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth256")
    records, names = synth_generate(2, 256)
    write_dataset(root, records, names, SYNTH_META_SCHEMA)
    return root


GENERALIZATION_EPOCHS = 30


def _generalization_run(dataset, out, enable_meta):
    run = parse_run_config({
        "model": {"embed_dim": 64, "hidden_dim": 192, "num_heads": 4},
        "data": {"path": str(dataset), "batch_size": 32},
        "optim": {"epochs": GENERALIZATION_EPOCHS},
        "ablation": {"enable_meta": enable_meta},
        "output_dir": str(out),
    })
    Trainer(run).fit()
    from dltm.data import load_dataset
    return evaluate_split(load_model(out / BEST), load_dataset(dataset), run.data.test_folds)


@pytest.mark.slow
def test_09_generalization_and_meta_path(synth256, tmp_path):
    t0 = time.perf_counter()
    with_meta = _generalization_run(synth256, tmp_path / "meta", True)
    without = _generalization_run(synth256, tmp_path / "nometa", False)
    k = with_meta.class_names.index("elderly")
    drop = with_meta.per_class_auc[k] - without.per_class_auc[k]
    ok = with_meta.macro_auc >= 0.9 and drop >= 0.05
    per_class = ", ".join(f"{n} {a:.3f}" for n, a in zip(with_meta.class_names, with_meta.per_class_auc))
    report(9, ok, f"held-out macro-AUC {with_meta.macro_auc:.3f} ({per_class}); elderly AUC "
                  f"{with_meta.per_class_auc[k]:.3f} -> {without.per_class_auc[k]:.3f} without meta "
                  f"(drop {drop:.3f}); {(time.perf_counter() - t0) / 60:.1f} min")


ABLATION_ROWS = [  # (lead independence, dual scale, multiple attention, meta information)
    (False, False, False, False),
    (True, False, False, False),
    (True, True, False, False),
    (True, False, True, False),
    (True, True, True, False),
    (True, True, True, True),
]


def test_10_ablation_flags(synth32, tmp_path):
    from dltm.data import load_dataset
    dataset = load_dataset(synth32)
    aucs = []
    for i, (lead, dual, multi, meta) in enumerate(ABLATION_ROWS):
        run = parse_run_config({
            "data": {"path": str(synth32)},
            "optim": {"epochs": 1},
            "ablation": {"enable_lead_separation": lead, "enable_dual_scale": dual,
                         "enable_ortho_attention": multi, "enable_meta": meta},
            "output_dir": str(tmp_path / f"row{i}"),
        })
        logs = Trainer(run, dataset).fit()
        result = evaluate_split(load_model(tmp_path / f"row{i}" / BEST), dataset, run.data.test_folds)
        aucs.append(result.macro_auc)
        assert np.isfinite(logs[0].train_loss)
    base = param_count(init_params(ModelConfig(), 0))
    flat = param_count(init_params(ModelConfig(ortho_attention=False), 0))
    ratio = flat / base
    ok = len(aucs) == 6 and abs(ratio - 1) <= 0.15
    report(10, ok, f"6 flag rows trained 1 epoch and evaluated; full-attention variant "
                   f"{flat:,} vs {base:,} parameters (ratio {ratio:.3f})")
