"""Acceptance suite: one test per exit criterion, at pinned tolerances.

Each test prints a PASS line on success; the conftest summary hook repeats
one line per criterion at the end of the run. Criteria touch every module:
metric arithmetic against published confusion matrices, gradient and
attention integrity, SVM optimality, AUC equivalence, end-to-end learning
on synthetic data through the CLI, transfer-learning mechanics, artifact
determinism and the callback contract.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from stressvit.attention_maps import compute_attention_scores
from stressvit.autodiff import OptimizerConfig, Tape, backward, optimizer_step, softmax_rows, Tensor
from stressvit.cli import main
from stressvit.metrics import ConfusionMatrix, auc, classification_metrics, roc_curve
from stressvit.svm import (
    KernelSpec,
    SvmTrainConfig,
    decision_function,
    decision_scores,
    dual_objective,
    kernel_eval,
    predict_many,
    read_features,
    train as svm_train,
    write_features,
)
from stressvit.training import (
    PlateauController,
    ScenarioConfig,
    bce_loss,
    checkpoint_load,
    checkpoint_save,
    kfold_evaluate,
    run_training,
)
from stressvit.vit import (
    PRESETS,
    FreezeSpec,
    ViTConfig,
    ViTModel,
    set_trainable,
    vit_forward,
)

from helpers import finite_difference_grads, max_relative_error


def _report(name, detail):
    print(f"[{name}] PASS: {detail}")


# ---------------------------------------------------------------------------
# criterion 1: metric oracle


# Published confusion rows for the eleven fine-tuning scenarios and the
# test-accuracy column they accompany.
TABLE_ROWS = [
    (647, 379, 22, 87, 0.9039),
    (661, 370, 31, 73, 0.9083),
    (650, 378, 23, 84, 0.9057),
    (638, 379, 22, 96, 0.8960),
    (617, 384, 17, 117, 0.8819),
    (639, 382, 19, 95, 0.8995),
    (663, 373, 28, 71, 0.9127),
    (661, 379, 22, 73, 0.9162),
    (645, 390, 11, 89, 0.9119),
    (638, 392, 9, 96, 0.9075),
    (637, 378, 23, 97, 0.8942),
]


def test_criterion_1_metric_oracle():
    """Scenario-8 confusion counts reproduce the published per-class metrics.

    The printed source values carry arithmetic slop: six of the eleven
    accuracies are truncated rather than rounded (for scenario 8 the exact
    value is 0.9162996, printed 0.9162, off by 9.96e-5), and the printed F1
    scores cannot be produced from the confusion matrix by any rounding
    (stressed exact 0.9329570 vs printed 0.9328; healthy exact 0.8886284 vs
    printed 0.8883). Precision and recall are asserted at the stated
    +/-5e-5; accuracies at 1e-4 and F1s at 5e-4, the printing slop; and
    every metric is additionally pinned to its exact fraction at 1e-12.
    """
    start = time.perf_counter()
    report = classification_metrics(ConfusionMatrix(661, 379, 22, 73))

    # exact-fraction oracle, computed independently of the implementation
    p_s, r_s = 661 / 683, 661 / 734
    p_h, r_h = 379 / 452, 379 / 401
    assert report.accuracy == pytest.approx(1040 / 1135, abs=1e-12)
    assert report.stressed.precision == pytest.approx(p_s, abs=1e-12)
    assert report.stressed.recall == pytest.approx(r_s, abs=1e-12)
    assert report.stressed.f1 == pytest.approx(2 * p_s * r_s / (p_s + r_s), abs=1e-12)
    assert report.healthy.precision == pytest.approx(p_h, abs=1e-12)
    assert report.healthy.recall == pytest.approx(r_h, abs=1e-12)
    assert report.healthy.f1 == pytest.approx(2 * p_h * r_h / (p_h + r_h), abs=1e-12)

    # published digits
    assert report.stressed.precision == pytest.approx(0.9678, abs=5e-5)
    assert report.stressed.recall == pytest.approx(0.9005, abs=5e-5)
    assert report.healthy.precision == pytest.approx(0.8385, abs=5e-5)
    assert report.healthy.recall == pytest.approx(0.9451, abs=5e-5)
    assert report.accuracy == pytest.approx(0.9162, abs=1e-4)
    assert report.stressed.f1 == pytest.approx(0.9328, abs=5e-4)
    assert report.healthy.f1 == pytest.approx(0.8883, abs=5e-4)

    for tp, tn, fp, fn, printed in TABLE_ROWS:
        row = classification_metrics(ConfusionMatrix(tp, tn, fp, fn))
        assert row.accuracy == pytest.approx((tp + tn) / (tp + tn + fp + fn), abs=1e-12)
        assert abs(row.accuracy - printed) < 1e-4

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _report("criterion 1", f"scenario-8 metrics and all 11 accuracy rows in {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# criterion 2: gradient correctness


def test_criterion_2_gradient_correctness():
    """Every TINY parameter passes central finite differences (h=1e-5)."""
    start = time.perf_counter()
    model = ViTModel(PRESETS["tiny"], 2024)
    params = model.parameters()
    batch = np.random.default_rng(0).random((2, 3, 32, 32))
    labels = np.array([1.0, 0.0])

    tape = Tape()
    with tape:
        logits, _ = vit_forward(batch, model)
        loss = bce_loss(logits, labels)
    backward(loss, tape)

    def forward_loss():
        logits, _ = vit_forward(batch, model)
        return bce_loss(logits, labels).item()

    numeric = finite_difference_grads(forward_loss, params, h=1e-5)
    worst = max(max_relative_error(p.grad.data, n) for p, n in zip(params, numeric))
    elapsed = time.perf_counter() - start
    assert worst < 1e-4, f"max relative error {worst:.3e}"
    assert elapsed < 60.0
    _report("criterion 2",
            f"{sum(p.value.size for p in params)} parameters, max rel err "
            f"{worst:.2e} in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: attention integrity


def test_criterion_3_attention_integrity():
    """Row-stochastic attention, faithful recomputation, 12 records for B/16."""
    start = time.perf_counter()
    rng = np.random.default_rng(7)

    # per-head rows sum to 1 within 1e-12 on random captures
    model = ViTModel(PRESETS["tiny"], 3)
    for trial in range(5):
        img = rng.random((1, 3, 32, 32))
        _, records = vit_forward(img, model, capture=True)
        for record, block in zip(records, model.blocks):
            scores = compute_attention_scores(record)
            np.testing.assert_allclose(scores.sum(axis=-1), 1.0, atol=1e-12)

            # recomputed scores equal the forward-time softmax output
            q, k = record.query, record.key
            d_k = q.shape[-1]
            logits = Tensor._wrap(
                np.matmul(q.data, np.swapaxes(k.data, -1, -2)) / math.sqrt(d_k))
            forward_attn = softmax_rows(logits).data[0]
            np.testing.assert_allclose(scores, forward_attn, atol=1e-12)

            # and applying them to V reproduces the captured sublayer output
            ctx = np.matmul(scores, record.value.data[0])
            merged = np.transpose(ctx, (1, 0, 2)).reshape(ctx.shape[1], -1)
            expected = merged @ block.wo.value.data + block.bo.value.data
            np.testing.assert_allclose(record.attn_output.data[0], expected, atol=1e-12)

    b16 = ViTModel(PRESETS["b16"], 0)
    img = rng.random((1, 3, 224, 224))
    _, records = vit_forward(img, b16, capture=True)
    assert len(records) == 12
    assert [r.layer_index for r in records] == list(range(12))
    from stressvit.vit import pooled_representation

    assert pooled_representation(img[0], b16).shape == (768,)

    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    _report("criterion 3", f"stochastic rows, exact recomputation, "
                           f"12 B/16 records in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: SVM oracles


def _random_instance(rng):
    n = int(rng.integers(10, 36))
    d = int(rng.integers(2, 6))
    separation = float(rng.choice([4.0, 1.0, 0.3]))
    half = n // 2
    X = np.vstack([rng.normal(-separation / 2, 1.0, size=(half, d)),
                   rng.normal(separation / 2, 1.0, size=(n - half, d))])
    y = np.array([0] * half + [1] * (n - half))
    perm = rng.permutation(n)
    return X[perm], y[perm]


def _kkt_violation(X, y, model, C):
    yy = np.where(y == 1, 1.0, -1.0)
    margins = yy * decision_scores(model, X)
    alpha = np.zeros(len(X))
    for sv, coef in zip(model.support_vectors, model.dual_coef):
        alpha[np.flatnonzero((X == sv).all(axis=1))[0]] = abs(coef)
    worst = 0.0
    for a, m in zip(alpha, margins):
        if a < 1e-8:
            worst = max(worst, 1.0 - m)
        elif a > C - 1e-8:
            worst = max(worst, m - 1.0)
        else:
            worst = max(worst, abs(m - 1.0))
    return worst


def test_criterion_4_svm_oracles():
    """Analytic two-point case, XOR, KKT on 50 instances, grid-checked dual."""
    start = time.perf_counter()

    X2 = np.array([[1.0, 1.0], [-1.0, -1.0]])
    model = svm_train(X2, [1, 0], SvmTrainConfig(C=10.0, tol=1e-6,
                                                 kernel=KernelSpec("linear")))
    w = model.dual_coef @ model.support_vectors
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-6)
    assert abs(model.bias) < 1e-6
    assert abs(decision_function(model, np.zeros(2))) < 1e-6

    X_xor = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y_xor = np.array([0, 0, 1, 1])
    xor_model = svm_train(X_xor, y_xor,
                          SvmTrainConfig(C=10.0, kernel=KernelSpec("rbf", 1.0)))
    np.testing.assert_array_equal(predict_many(xor_model, X_xor), y_xor)
    assert xor_model.support_vectors.shape[0] == 4

    rng = np.random.default_rng(44)
    for trial in range(50):
        X, y = _random_instance(rng)
        C = float(rng.choice([0.5, 1.0, 10.0]))
        kernel = KernelSpec("linear") if trial % 2 else KernelSpec("rbf", "scale")
        cfg = SvmTrainConfig(C=C, tol=1e-3, kernel=kernel)
        m = svm_train(X, y, cfg)
        assert abs(m.dual_coef.sum()) < 1e-10
        alphas = np.abs(m.dual_coef)
        assert np.all(alphas > 0) and np.all(alphas <= C + 1e-12)
        assert _kkt_violation(X, y, m, C) <= cfg.tol + 1e-9

    for n, seed in ((4, 0), (5, 1), (6, 2)):
        rng_g = np.random.default_rng(seed)
        C = 2.0
        Xg = rng_g.normal(size=(n, 2))
        yg = np.array(([0, 1] * n)[:n])
        spec = KernelSpec("rbf", 0.8)
        mg = svm_train(Xg, yg, SvmTrainConfig(C=C, tol=1e-8, kernel=spec))
        coef = np.zeros(n)
        for sv, c in zip(mg.support_vectors, mg.dual_coef):
            coef[np.flatnonzero((Xg == sv).all(axis=1))[0]] = c
        achieved = dual_objective(Xg, yg, coef, spec)

        yy = np.where(yg == 1, 1, -1)
        K = np.array([[kernel_eval(a, b, spec) for b in Xg] for a in Xg])
        grid = np.stack(np.meshgrid(*([np.arange(11)] * n), indexing="ij"))
        grid = grid.reshape(n, -1).T
        feasible = grid[(grid @ yy) == 0] * (C / 10.0)
        signed = feasible * yy
        best = float(np.max(feasible.sum(axis=1)
                            - 0.5 * np.einsum("ij,jk,ik->i", signed, K, signed)))
        assert achieved >= best - 1e-4

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _report("criterion 4", f"analytic, XOR, 50 KKT instances, grid duals in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 5: AUC equivalence


def _auc_by_pairs(scores, truth):
    pos = scores[truth == 1][:, None]
    neg = scores[truth == 0][None, :]
    wins = np.sum(pos > neg) + 0.5 * np.sum(pos == neg)
    return wins / (pos.shape[0] * neg.shape[1])


def test_criterion_5_auc_equivalence():
    """Trapezoidal AUC equals the pair-counting statistic on 100 instances."""
    start = time.perf_counter()
    assert auc(roc_curve([0.9, 0.8, 0.1], [1, 1, 0])) == 1.0
    assert auc(roc_curve([0.1, 0.2, 0.9], [1, 1, 0])) == 0.0

    rng = np.random.default_rng(5)
    for trial in range(100):
        n = int(rng.integers(4, 201))
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # induce ties
        truth = rng.integers(0, 2, size=n)
        if truth.min() == truth.max():
            truth[0] = 1 - truth[0]
        got = auc(roc_curve(scores, truth))
        want = _auc_by_pairs(scores, truth)
        assert abs(got - want) < 1e-12

    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    _report("criterion 5", f"100 instances, perfect/inverted endpoints in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 6: end-to-end learning


def test_criterion_6_end_to_end_learning(tmp_path):
    """Synthetic 200-window run: fine-tune, hold out, and the SVM pipeline."""
    start = time.perf_counter()
    train_dir = tmp_path / "train_data"
    test_dir = tmp_path / "test_data"
    assert main(["synth", "--out", str(train_dir), "--images", "40", "--seed", "0"]) == 0
    assert main(["synth", "--out", str(test_dir), "--images", "8", "--seed", "5000"]) == 0

    run_dir = tmp_path / "run"
    scenario_path = Path(__file__).resolve().parent.parent / "scenarios" / "tiny.json"
    assert main(["train", "--scenario", str(scenario_path), "--data", str(train_dir),
                 "--out", str(run_dir)]) == 0
    log = json.loads((run_dir / "trainlog.json").read_text())
    assert len(log["epochs"]) <= 200
    best_train_acc = max(e["train_acc"] for e in log["epochs"])
    assert best_train_acc >= 0.95

    eval_dir = tmp_path / "eval"
    ckpt = run_dir / "model.ckpt"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(test_dir),
                 "--out", str(eval_dir)]) == 0
    held_out = json.loads((eval_dir / "eval_report.json").read_text())
    assert held_out["accuracy"] >= 0.90

    features_path = tmp_path / "features.csv"
    assert main(["extract-features", "--checkpoint", str(ckpt),
                 "--data", str(train_dir), "--out", str(features_path)]) == 0
    svm_path = tmp_path / "svm.json"
    assert main(["svm-train", "--features", str(features_path),
                 "--out", str(svm_path)]) == 0
    svm_eval_dir = tmp_path / "svm_eval"
    assert main(["svm-eval", "--model", str(svm_path), "--features", str(features_path),
                 "--out", str(svm_eval_dir)]) == 0
    svm_report = json.loads((svm_eval_dir / "eval_report.json").read_text())
    assert svm_report["accuracy"] >= 0.90

    cv_dir = tmp_path / "cv"
    assert main(["kfold", "--checkpoint", str(ckpt), "--data", str(train_dir),
                 "--out", str(cv_dir), "--k", "5", "--seed", "0"]) == 0
    cv = json.loads((cv_dir / "cv_report.json").read_text())
    assert cv["mean_accuracy"] >= 0.90
    assert cv["mean_auc"] >= 0.95

    elapsed = time.perf_counter() - start
    assert elapsed < 600.0
    _report("criterion 6",
            f"train acc {best_train_acc:.3f}, held-out {held_out['accuracy']:.3f}, "
            f"cv acc {cv['mean_accuracy']:.3f}, cv auc {cv['mean_auc']:.3f} "
            f"in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 7: transfer-learning mechanics


def test_criterion_7_transfer_learning(tmp_path):
    """Freezing the leading blocks pins their bytes; the head still learns."""
    start = time.perf_counter()
    config = ViTConfig(image_size=32, patch_size=8, channels=3, hidden_dim=32,
                       num_layers=4, num_heads=4, mlp_dim=64)
    pretrained = ViTModel(config, 77)
    ckpt_path = tmp_path / "pretrained.ckpt"
    checkpoint_save(pretrained, ckpt_path)

    model = checkpoint_load(ckpt_path, config)
    batch = np.random.default_rng(1).random((4, 3, 32, 32))
    labels = np.array([1.0, 0.0, 1.0, 0.0])
    before, _ = vit_forward(batch, model)
    set_trainable(model, FreezeSpec(trainable_blocks=2))
    after, _ = vit_forward(batch, model)
    assert before.data.tobytes() == after.data.tobytes()

    reference = checkpoint_load(ckpt_path, config)
    rng = np.random.default_rng(2)
    opt = OptimizerConfig(kind="adamw", lr=0.01)
    for _ in range(10):
        for p in model.parameters():
            p.zero_grad()
        tape = Tape()
        with tape:
            logits, _ = vit_forward(batch, model, training=True, rng=rng)
            loss = bce_loss(logits, labels)
        backward(loss, tape)
        optimizer_step(model.parameters(), opt)

    frozen = (model.embedding_parameters()
              + model.blocks[0].parameters() + model.blocks[1].parameters())
    frozen_ref = (reference.embedding_parameters()
                  + reference.blocks[0].parameters() + reference.blocks[1].parameters())
    for p, q in zip(frozen, frozen_ref):
        assert p.value.data.tobytes() == q.value.data.tobytes(), p.name

    trainable = (model.blocks[2].parameters() + model.blocks[3].parameters()
                 + [model.final_gamma, model.final_beta, model.head_w, model.head_b])
    trainable_ref = (reference.blocks[2].parameters() + reference.blocks[3].parameters()
                     + [reference.final_gamma, reference.final_beta,
                        reference.head_w, reference.head_b])
    changed = sum(p.value.data.tobytes() != q.value.data.tobytes()
                  for p, q in zip(trainable, trainable_ref))
    assert changed == len(trainable)

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _report("criterion 7", f"frozen bytes pinned, {changed} trainable tensors "
                           f"updated in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 8: determinism and formats


def _run_workflow(root: Path, data_dir: Path, scenario: Path):
    run = root / "run"
    assert main(["train", "--scenario", str(scenario), "--data", str(data_dir),
                 "--out", str(run)]) == 0
    ckpt = run / "model.ckpt"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir),
                 "--out", str(root / "eval")]) == 0
    assert main(["extract-features", "--checkpoint", str(ckpt), "--data", str(data_dir),
                 "--out", str(root / "features.csv")]) == 0
    assert main(["svm-train", "--features", str(root / "features.csv"),
                 "--out", str(root / "svm.json")]) == 0
    assert main(["svm-eval", "--model", str(root / "svm.json"),
                 "--features", str(root / "features.csv"),
                 "--out", str(root / "svm_eval")]) == 0
    image = sorted((data_dir / "images").glob("*.ppm"))[0]
    assert main(["attn", "--checkpoint", str(ckpt), "--image", str(image),
                 "--out", str(root / "attn")]) == 0
    assert main(["kfold", "--checkpoint", str(ckpt), "--data", str(data_dir),
                 "--out", str(root / "cv"), "--k", "3", "--seed", "0"]) == 0
    return ["run/model.ckpt", "run/trainlog.json", "eval/eval_report.json",
            "eval/roc.csv", "features.csv", "svm.json", "svm_eval/eval_report.json",
            "svm_eval/roc.csv", "attn/attn_layer_00.ppm", "attn/attn_layer_01.ppm",
            "cv/cv_report.json"]


def test_criterion_8_determinism_and_formats(tmp_path):
    """Two identical CLI runs agree byte for byte; round trips are exact."""
    start = time.perf_counter()
    data_dir = tmp_path / "data"
    assert main(["synth", "--out", str(data_dir), "--images", "8", "--seed", "11"]) == 0
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({
        "model": "tiny", "trainable_blocks": "all", "optimizer": "adamw",
        "lr": 0.001, "patience": 5, "factor": 0.2, "batch_size": 16,
        "attn_dropout": 0.1, "mlp_dropout": 0.1, "max_epochs": 3, "seed": 4}))

    roots = [tmp_path / "first", tmp_path / "second"]
    artifact_lists = [_run_workflow(root, data_dir, scenario) for root in roots]
    assert artifact_lists[0] == artifact_lists[1]
    for rel in artifact_lists[0]:
        a = (roots[0] / rel).read_bytes()
        b = (roots[1] / rel).read_bytes()
        assert a == b, f"artifact {rel} differs between identical runs"

    # manifests record identical artifact hashes (timestamps may differ)
    for sub in ("run", "eval", "svm_eval", "attn", "cv"):
        ma = json.loads((roots[0] / sub / "run_manifest.json").read_text())
        mb = json.loads((roots[1] / sub / "run_manifest.json").read_text())
        assert sorted(ma["outputs"].values()) == sorted(mb["outputs"].values())

    # checkpoint round trip: load then save reproduces the file exactly
    ckpt = roots[0] / "run" / "model.ckpt"
    model = checkpoint_load(ckpt, PRESETS["tiny"])
    resaved = tmp_path / "resaved.ckpt"
    checkpoint_save(model, resaved)
    assert resaved.read_bytes() == ckpt.read_bytes()

    # feature CSV round trip: read then write reproduces the file exactly
    features = roots[0] / "features.csv"
    X, y = read_features(features)
    rewritten = tmp_path / "rewritten.csv"
    write_features(X, y, rewritten)
    assert rewritten.read_bytes() == features.read_bytes()

    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    _report("criterion 8", f"{len(artifact_lists[0])} artifacts byte-identical, "
                           f"round trips exact in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 9: callback semantics


def test_criterion_9_callback_semantics():
    """Patience 5 / factor 0.2 / lr 0.001: reduce at 5, stop at 10, resets work."""
    start = time.perf_counter()
    ctrl = PlateauController(lr=0.001, patience=5, factor=0.2, baseline=0.7)
    history = []
    for epoch in range(1, 100):
        improved, stop = ctrl.update(0.7)
        history.append((epoch, ctrl.lr, stop))
        if stop:
            break
    lr_by_epoch = {e: lr for e, lr, _ in history}
    assert lr_by_epoch[4] == pytest.approx(0.001)
    assert lr_by_epoch[5] == pytest.approx(0.0002)
    assert history[-1][0] == 10 and history[-1][2]

    ctrl = PlateauController(lr=0.001, patience=5, factor=0.2, baseline=0.7)
    for _ in range(4):
        ctrl.update(0.7)
    improved, stop = ctrl.update(0.5)
    assert improved and not stop
    assert ctrl.plateau_count == 0 and ctrl.stall_count == 0
    assert ctrl.lr == pytest.approx(0.001)
    for i in range(10):
        improved, stop = ctrl.update(0.5)
        assert not improved
        assert stop == (i == 9)  # a fresh ten-epoch stall after the reset

    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    _report("criterion 9", f"reduction at 5, stop at 10, counter resets in {elapsed:.2f}s")
