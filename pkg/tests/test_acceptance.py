"""Acceptance criteria, each checked at its stated tolerance.

Every criterion prints one ``[criterion N] PASS|FAIL`` line (visible even
under output capture) before asserting.  The training-based criteria share
one set of runs: baseline, MixNet-II and MixNet-IV on the default synthetic
config for seeds 41, 42 and 43.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import json
import time

import numpy as np
import pytest

from mixnet.analysis import fisher_ratio, tap_layer
from mixnet.cli import main as cli_main
from mixnet.features import generalized_eigh
from mixnet.layers import (
    Affine,
    ContextualMoELayer,
    EigenMoELayer,
    GatedMoELayer,
    Relu,
    SoftmaxCrossEntropy,
    grad_check,
    softmax,
)
from mixnet.linalg import BandedMatrix, Matrix, band_mask, banded_param_count, make_rng
from mixnet.synth import SynthConfig, generate
from mixnet.training import (
    ModelConfig,
    TrainConfig,
    build_collapse_reference,
    build_model,
    contextual_moe_param_count,
    copy_collapse_params,
    evaluate,
    fit_pipeline,
    model_inputs,
    nearest_mean_accuracy,
    pretrain_aux,
    train,
)

SEEDS = (41, 42, 43)
VARIANTS = ("baseline", "mixnet2", "mixnet4")


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {title}: {detail}")
        assert ok, f"criterion {n} failed: {detail}"
    return report


def _train_one(variant, seed, data):
    tr, cv, te = data
    t0 = time.perf_counter()
    tc = TrainConfig(seed=seed)
    model = fit_pipeline(build_model(ModelConfig.preset(variant), seed), tr)
    aux_report = None
    if model.aux is not None:
        model, aux_report = pretrain_aux(model, tr, cv, tc)
    model, _ = train(model, tr, cv, tc)
    return {"model": model, "aux_report": aux_report, "test": evaluate(model, te).accuracy,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def runs():
    out = {}
    for seed in SEEDS:
        data = generate(SynthConfig(seed=seed))
        out[seed] = {"data": data}
        for v in VARIANTS:
            out[seed][v] = _train_one(v, seed, data)
    return out


# 1 ---------------------------------------------------------------------------

def _ce_check(rng, tol):
    head = SoftmaxCrossEntropy(6)
    z = 3 * rng.standard_normal((4, 6))
    y = rng.integers(0, 6, 4)
    _, _, grad = head.forward(z, y)
    worst = 0.0
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += 1e-5
        zm[idx] -= 1e-5
        cd = (head.forward(zp, y)[0] - head.forward(zm, y)[0]) / 2e-5
        worst = max(worst, abs(cd - grad[idx]) / max(1.0, abs(cd), abs(grad[idx])))
    return worst


def _layer_zoo(rng):
    return {
        "affine": Affine(6, 5, rng),
        "relu": Relu(7),
        "contextual_moe": ContextualMoELayer(3, 1, 3, 5, rng),
        "gated_moe_dense": GatedMoELayer(4, 6, rng=rng),
        "gated_moe_lowrank": GatedMoELayer(4, 8, 4, "lowrank", rng=rng),
        "gated_moe_banded": GatedMoELayer(4, 8, structure="banded", band=2, rng=rng),
        "eigen_moe": EigenMoELayer(3, 6, 5, rng),
    }


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(20):
        rng = make_rng(1000 + seed)
        for name, layer in _layer_zoo(rng).items():
            for key, p in layer.params.items():
                if key in ("b", "f", "g"):
                    layer.set_params(**{key: 0.5 * rng.standard_normal(p.shape)})
            rep = grad_check(layer, rng, tolerance=1e-6)
            worst[name] = max(worst.get(name, 0.0), rep.worst_error)
        worst["softmax_ce"] = max(worst.get("softmax_ce", 0.0), _ce_check(rng, 1e-6))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-6 and elapsed < 60
    verdict(1, "gradient suite, 8 layer types x 20 seeds", ok,
            f"worst rel err {max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_collapse_equivalence(verdict):
    worst = 0.0
    for variant, structure in (("mixnet2", "lowrank"), ("mixnet4", "full")):
        cfg = ModelConfig.preset(variant, n_gate_classes=1, n_output_experts=1, expert_structure=structure)
        mix = build_model(cfg, 5).stack
        ref = build_collapse_reference(cfg)
        copy_collapse_params(mix, ref)
        rng = make_rng(6)
        for _ in range(100):
            x = rng.standard_normal((32, cfg.input_dim))
            y = rng.integers(0, cfg.n_classes, 32)
            a = mix.forward(x, y, np.ones((32, 1)))[0]
            b = ref.forward(x, y)[0]
            worst = max(worst, abs(a - b))
    verdict(2, "single-expert MixNet equals baseline plus two affine layers", worst <= 1e-12,
            f"max |loss diff| over 2x100 batches = {worst:.2e}")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_parameter_parity(verdict):
    first = contextual_moe_param_count(3, 1, 143)
    layer_first = ContextualMoELayer(3, 1, 143, 143).param_count
    banded = banded_param_count(1024, 15)
    counts = {v: build_model(ModelConfig.preset(v)).param_count
              for v in ("baseline", "mixnet2", "mixnet3", "mixnet4")}
    ok = (first == layer_first == 185328 and banded == 31504
          and all(counts[v] <= counts["baseline"] for v in ("mixnet2", "mixnet3", "mixnet4")))
    verdict(3, "parameter parity", ok,
            f"first MoE {layer_first}, banded 1024/15 expert {banded}, desk counts {counts}")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_separation(runs, verdict):
    j_in, j_moe = [], []
    for seed in SEEDS:
        model = runs[seed]["mixnet4"]["model"]
        test = runs[seed]["data"][2]
        x, broad, _ = tap_layer(model, test, 0)
        y, _, _ = tap_layer(model, test, 1)
        j_in.append(fisher_ratio(x, broad))
        j_moe.append(fisher_ratio(y, broad))
    minutes = sum(runs[s]["mixnet4"]["seconds"] for s in SEEDS) / 60
    ok = np.median(j_moe) > np.median(j_in) and minutes < 10
    verdict(4, "broad-class Fisher ratio after first MoE exceeds input", ok,
            f"median J_in {np.median(j_in):.3f}, J_moe {np.median(j_moe):.3f} "
            f"(per seed {[round(v, 3) for v in j_in]} -> {[round(v, 3) for v in j_moe]}), "
            f"MixNet-IV training {minutes:.1f} min")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_accuracy_ordering(runs, verdict):
    acc = {v: [runs[s][v]["test"] for s in SEEDS] for v in VARIANTS}
    med = {v: float(np.median(a)) for v, a in acc.items()}
    minutes = sum(runs[s][v]["seconds"] for s in SEEDS for v in VARIANTS) / 60
    beats_baseline = med["mixnet4"] >= med["baseline"] + 0.005
    beats_lowrank = med["mixnet4"] >= med["mixnet2"]
    detail = (f"median test acc baseline {med['baseline']:.4f}, II {med['mixnet2']:.4f}, "
              f"IV {med['mixnet4']:.4f}; IV >= baseline+0.5pt {beats_baseline}, IV >= II {beats_lowrank}; "
              f"per seed {json.dumps({v: [round(a, 4) for a in acc[v]] for v in VARIANTS})}; "
              f"{minutes:.1f} min")
    verdict(5, "accuracy ordering", beats_baseline and beats_lowrank and minutes < 30, detail)


# 6 ---------------------------------------------------------------------------

def test_criterion_6_aux_classifier(runs, verdict):
    run = runs[42]["mixnet4"]
    model, (tr, cv, _) = run["model"], runs[42]["data"]
    acc = run["aux_report"].final_cv_accuracy
    _, _, x_tr = model_inputs(model, tr)
    _, _, x_cv = model_inputs(model, cv)
    oracle = nearest_mean_accuracy(x_tr, tr.subclass, x_cv, tr.hierarchy.sub_to_broad, cv.broad)
    ok = acc >= 0.90 and acc >= oracle - 0.02
    verdict(6, "aux broad-class classifier (seed 42)", ok,
            f"cv broad accuracy {acc:.4f}, nearest-mean oracle {oracle:.4f}")


# 7 ---------------------------------------------------------------------------

def _pipeline_bytes(tmp_path, name):
    cfg = {"seed": 3, "synth": {"n_train": 20, "n_cv": 4, "n_test": 4},
           "model": {"variant": "mixnet4"}, "train": {"epochs": 2, "aux_epochs": 1}}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    for cmd in ("synth", "pretrain-aux", "train"):
        assert cli_main([cmd, "--config", str(path), "--out-dir", str(out)]) == 0
    assert cli_main(["eval", "--config", str(path), "--out-dir", str(out), "--checkpoint", str(out / "model.ckpt")]) == 0
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_7_invariances(runs, verdict, tmp_path):
    rng = make_rng(77)
    checks = {}

    # gate simplex on trained gates
    model = runs[42]["mixnet4"]["model"]
    X, alpha, _ = model_inputs(model, runs[42]["data"][2])
    gated = next(layer for layer in model.stack.layers if isinstance(layer, GatedMoELayer))
    h = X
    for layer in model.stack.layers:
        if layer is gated:
            break
        h, _ = layer.forward(h, alpha if layer.needs_gate else None)
    beta = gated.gate(h)
    drift = max(np.abs(alpha.sum(1) - 1).max(), np.abs(beta.sum(1) - 1).max())
    checks["simplex"] = (drift <= 1e-9 and alpha.min() >= 0 and beta.min() >= 0, f"sum drift {drift:.1e}")

    # identical experts
    B = rng.standard_normal((8, 8))
    layer = GatedMoELayer.from_experts([Matrix(B)] * 5, np.tile(rng.standard_normal(8), (5, 1)))
    x = rng.standard_normal((200, 8))
    base = layer.forward(x)[0]
    diff = 0.0
    for _ in range(20):
        layer.set_params(G=10 * rng.standard_normal((5, 8)), g=rng.standard_normal(5))
        diff = max(diff, np.abs(layer.forward(x)[0] - base).max())
        diff = max(diff, np.abs(layer.forward(x, rng.dirichlet(np.ones(5), 200))[0] - base).max())
    cmoe = ContextualMoELayer(3, 1, 4, 4, rng)
    cmoe.set_params(A=np.stack([cmoe.params["A"][0]] * 3))
    xc = rng.standard_normal((200, 12))
    ref = cmoe.forward(xc, np.tile([1.0, 0, 0], (200, 1)))[0]
    for _ in range(20):
        diff = max(diff, np.abs(cmoe.forward(xc, rng.dirichlet(np.ones(3), 200))[0] - ref).max())
    checks["gate invariance"] = (diff < 1e-12, f"max diff {diff:.1e}")

    # banded vs masked dense
    exact = True
    for n, b in ((8, 0), (8, 2), (16, 7), (128, 7)):
        dense = np.where(band_mask(n, b), rng.standard_normal((n, n)), 0.0)
        bm = BandedMatrix.from_dense(dense, b)
        v = rng.standard_normal(n)
        exact &= np.array_equal(bm.apply(v), Matrix(dense).apply(v))
        G = rng.standard_normal((3, n))
        l1 = GatedMoELayer.from_experts([bm] * 3, None, G, np.zeros(3))
        l2 = GatedMoELayer.from_experts([Matrix(dense)] * 3, None, G, np.zeros(3))
        xs = rng.standard_normal((50, n))
        exact &= np.array_equal(l1.forward(xs)[0], l2.forward(xs)[0])
    checks["banded == masked dense"] = (bool(exact), "bit-exact" if exact else "mismatch")

    # Fisher invariance
    y = rng.integers(0, 3, 600)
    Xf = rng.standard_normal((600, 5)) + 2 * rng.standard_normal((3, 5))[y]
    j0 = fisher_ratio(Xf, y)
    jd = max(abs(fisher_ratio(Xf @ (rng.standard_normal((5, 5)) + 3 * np.eye(5)).T, y) - j0) for _ in range(10))
    checks["fisher invariance"] = (jd <= 1e-9, f"max |dJ| {jd:.1e}")

    # seeded pipeline reproducibility
    first = _pipeline_bytes(tmp_path, "a")
    second = _pipeline_bytes(tmp_path, "a")
    checks["pipeline reproducible"] = (first == second, f"{len(first)} files identical" if first == second
                                       else "outputs differ")

    ok = all(v[0] for v in checks.values())
    verdict(7, "invariance suite", ok, "; ".join(f"{k}: {v[1]}" for k, v in checks.items()))


# 8 ---------------------------------------------------------------------------

def test_criterion_8_lda(verdict):
    rng = make_rng(8)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(2, 12))
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        within = (q * np.geomspace(0.1, 100, d)) @ q.T
        M = rng.standard_normal((d, d))
        between = M @ M.T
        lam, V, _ = generalized_eigh(between, within)
        for k in range(d):
            worst = max(worst, np.linalg.norm(between @ V[:, k] - lam[k] * within @ V[:, k]))
    within = np.diag([1.0, 4.0])
    mu = np.array([[1.0, 0.0], [-1.0, 0.0]])
    _, V, _ = generalized_eigh(sum(0.5 * np.outer(m, m) for m in mu), within)
    oracle = np.linalg.solve(within, mu[0] - mu[1])
    cos = abs(V[:, 0] @ oracle) / (np.linalg.norm(V[:, 0]) * np.linalg.norm(oracle))
    verdict(8, "LDA generalized eigenproblem", worst < 1e-8 and cos > 1 - 1e-9,
            f"max residual {worst:.1e} on 20 random SPD pairs, 2-class cosine 1-{1 - cos:.1e}")


def test_softmax_is_simplex_valued():
    p = softmax(make_rng(0).standard_normal((100, 7)) * 50)
    assert np.abs(p.sum(1) - 1).max() <= 1e-9
