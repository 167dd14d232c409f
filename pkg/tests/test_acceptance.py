"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Criteria 3 and 5-9 run on the shipped golden scenario (configs/golden.json),
produced once per session through the command-line pipeline.
"""

import hashlib
import json
import time

import numpy as np
from conftest import ACCEPTANCE, GOLDEN_CONFIG
from oracles import gram_eigh_pca, mgs_basis, span_distance

from mrplab.cli import load_run_config, workspace
from mrplab.evalkit import read_csv_rows
from mrplab.linalg import (
    ProjectionBasis,
    apply_projection,
    materialize_projection,
    pca_top_k,
    qr_orthobasis,
    subspace_residual,
)
from mrplab.mrp import (
    MrpConfig,
    composite_value_and_grad,
    continual_unlearn,
    extract_hidden_states,
    init_projection,
    trainable_param_count,
)
from mrplab.nanomodel.checkpoint import load_checkpoint
from mrplab.nanomodel.model import BaseModel, Batch, HookedModel, ModelConfig, forward
from mrplab.taskgen import generate_corpus, read_jsonl, to_batch


def record(n: int, checks: dict):
    """``checks`` maps a description to ``(ok, measured)``; all must hold."""
    ok = all(c for c, _ in checks.values())
    detail = "; ".join(f"{k}: {v}{'' if c else ' (FAIL)'}" for k, (c, v) in checks.items())
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def reports(out, method):
    return [json.loads((out / "reports" / f"{method}_stage{i}.json").read_text()) for i in range(1, 5)]


def topic_acc(report, topic):
    return next(t["acc"] for t in report["topics"] if t["topic"] == topic)


def trace_column(path, column="unlearn_test_acc"):
    rows = read_csv_rows(path)
    i = rows[0].index(column)
    return [float(r[i]) for r in rows[1:]]


def checksum(base: BaseModel) -> str:
    h = hashlib.sha256()
    for k in sorted(base.params):
        h.update(base.params[k].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- 1. projection algebra


def test_criterion_1_projection_algebra():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {"idempotent": 0.0, "symmetric": 0.0, "contraction": 0.0, "annihilation": 0.0}
    for i in range(1000):
        d = (4, 64)[i % 2]
        r = int(rng.integers(1, d + 1))
        basis = qr_orthobasis(rng.standard_normal((r, d)))
        x = rng.standard_normal(d) * 10.0 ** rng.uniform(-3, 3)
        p = materialize_projection(basis)
        px = apply_projection(basis, x)
        worst["idempotent"] = max(worst["idempotent"], np.max(np.abs(p @ p - p)))
        worst["symmetric"] = max(worst["symmetric"], np.max(np.abs(p - p.T)))
        worst["contraction"] = max(worst["contraction"], np.linalg.norm(px) - np.linalg.norm(x))
        worst["annihilation"] = max(worst["annihilation"], np.max(np.abs(basis.rows @ px)) / np.linalg.norm(x))
    elapsed = time.perf_counter() - t0
    checks = {k: (v <= 1e-10, f"{v:.2e}") for k, v in worst.items()}
    checks["runtime"] = (elapsed < 5.0, f"{elapsed:.2f}s")
    record(1, checks)


# ---------------------------------------------------------------- 2. decomposition oracles


def test_criterion_2_decomposition_oracles():
    rng = np.random.default_rng(202)
    worst_span, worst_moment = 0.0, 0.0
    for _ in range(100):
        m, d = (int(v) for v in rng.integers(1, 21, size=2))
        x = rng.standard_normal((m, d))
        worst_span = max(worst_span, span_distance(qr_orthobasis(x).rows, mgs_basis(x)))
        k = int(rng.integers(1, min(m, d) + 1))
        comps = pca_top_k(x, k)
        _, ref_vals = gram_eigh_pca(x, k)
        captured = float(np.sum((x @ comps.T) ** 2))
        worst_moment = max(worst_moment, abs(captured - ref_vals.sum()) / ref_vals.sum())
    record(2, {"QR span vs MGS": (worst_span <= 1e-8, f"{worst_span:.2e}"),
               "PCA second moment vs Gram eigh": (worst_moment <= 1e-8, f"{worst_moment:.2e}")})


# ---------------------------------------------------------------- 3. initialization guarantees


def test_criterion_3_initialization_guarantees(golden):
    cfg = load_run_config(GOLDEN_CONFIG, out=golden.out)
    base = load_checkpoint(golden.out / "checkpoints" / "pretrained.ckpt")[0].base
    ws = workspace(cfg, read_jsonl(golden.out / "corpus.jsonl"))
    K = cfg.mrp.init_samples
    worst_annihilation = 0.0
    for h in cfg.mrp.hooked_layers:
        ret = extract_hidden_states(base, ws.retain_train, h, K)
        unl = extract_hidden_states(base, ws.unlearn[0][1].split("train"), h, K)
        _, q_init = init_projection(ProjectionBasis.empty(base.config.d_model), ret, unl, cfg.mrp.dims_per_task)
        rel = np.abs(ret @ q_init.T) / np.linalg.norm(ret, axis=1, keepdims=True)
        worst_annihilation = max(worst_annihilation, float(rel.max()))
    stages = [load_checkpoint(golden.out / "checkpoints" / f"mrp_stage{i}.ckpt")[0] for i in range(1, 5)]
    worst_residual = 0.0
    for i, earlier in enumerate(stages):
        for later in stages[i + 1:]:
            for h, b in earlier.hooks.items():
                worst_residual = max(worst_residual, subspace_residual(later.hooks[h], b.rows))
    record(3, {f"retain annihilation (K={K})": (worst_annihilation <= 1e-8, f"{worst_annihilation:.2e}"),
               "earlier rows in later basis": (worst_residual <= 1e-8, f"{worst_residual:.2e}")})


# ---------------------------------------------------------------- 4. gradient check


def test_criterion_4_gradient_check():
    cfg = ModelConfig(vocab=96, d_model=16, n_blocks=1, n_heads=2, context_len=16, mlp_expansion=2)
    corpus = generate_corpus(3, topics=2, entities_per_topic=3, examples_per_split={"train": 8, "test": 4},
                             vocab=cfg.vocab)
    base = BaseModel.init(cfg, seed=4, std=0.3)
    rng = np.random.default_rng(404)
    q = qr_orthobasis(rng.standard_normal((3, 16))).rows.copy()
    model = HookedModel(base, {0: ProjectionBasis(q)})
    bu, br = to_batch(corpus[0].split("train")[:4]), to_batch(corpus[1].split("train")[:4])

    def loss():
        return composite_value_and_grad(model, bu, br, 1.2, None, scope="both")[0].total

    _, g = composite_value_and_grad(model, bu, br, 1.2, None, scope="both")
    rows = model.hooks[0].rows
    worst, checked = 0.0, 0
    for name in ["hooks.0", *base.params]:
        arr = rows if name == "hooks.0" else base.params[name]
        for fi in rng.choice(arr.size, min(arr.size, 6), replace=False):
            idx = np.unravel_index(fi, arr.shape)
            old = arr[idx]
            arr[idx] = old + 1e-5
            lp = loss()
            arr[idx] = old - 1e-5
            lm = loss()
            arr[idx] = old
            fd = (lp - lm) / 2e-5
            worst = max(worst, abs(fd - g[name][idx]) / max(abs(fd), abs(g[name][idx]), 1e-6))
            checked += 1
    record(4, {f"max relative error over {checked} entries (Q and {len(base.params)} weight tensors)":
               (worst <= 1e-4, f"{worst:.2e}")})


# ---------------------------------------------------------------- 5-7. golden desk scenario


def test_criterion_5_continual_unlearning(golden):
    mrp, ga = reports(golden.out, "mrp"), reports(golden.out, "ga")
    final = mrp[-1]
    checks = {}
    for t in final["topics"]:
        if t["role"] == "unlearned":
            gap = abs(t["acc"] - t["acc_low"])
            checks[f"{t['topic']} |acc - random|"] = (gap <= 0.10, f"{gap:.3f}")
        elif t["role"] == "retain":
            drift = abs(t["acc"] - t["acc_up"])
            checks[f"{t['topic']} |acc - pre|"] = (drift <= 0.05, f"{drift:.3f}")
    first = mrp[0]["topics"][[t["role"] for t in mrp[0]["topics"]].index("unlearned")]["topic"]

    def rebound(rs):
        accs = [topic_acc(r, first) for r in rs]
        return max(0.0, max(accs[1:]) - accs[0]), accs

    r_mrp, a_mrp = rebound(mrp)
    r_ga, a_ga = rebound(ga)
    checks[f"MRP {first} rebound (stages {a_mrp})"] = (r_mrp <= 0.05, f"{r_mrp:.3f}")
    checks[f"GA {first} rebound (stages {a_ga}) >= 2x MRP"] = (r_ga >= 2 * r_mrp, f"{r_ga:.3f}")
    elapsed = sum(golden.seconds[k] for k in ("gen-mrp", "pretrain-mrp", "unlearn-mrp"))
    checks["gen+pretrain+unlearn runtime"] = (elapsed < 600, f"{elapsed:.0f}s")
    record(5, checks)


def test_criterion_6_relearn_attack(golden):
    mrp = trace_column(golden.out / "traces" / "mrp_attack.csv")
    ga = trace_column(golden.out / "traces" / "ga_attack.csv")
    inc_mrp, inc_ga = mrp[-1] - mrp[0], ga[-1] - ga[0]
    record(6, {f"MRP increase {mrp[0]:.3f}->{mrp[-1]:.3f} <= 0.5 x GA increase {ga[0]:.3f}->{ga[-1]:.3f}":
               (inc_mrp <= 0.5 * inc_ga, f"{inc_mrp:+.3f} vs {inc_ga:+.3f}"),
               "GA post-attack > post-unlearn": (ga[-1] > ga[0], f"{ga[-1]:.3f} vs {ga[0]:.3f}")})


def test_criterion_7_gradient_conflict(golden):
    rows = read_csv_rows(golden.out / "traces" / "ga_conflict.csv")[1:]
    cos = [float(c) for _, c in rows if c != "undefined"]
    med = float(np.median(cos))
    record(7, {f"median block cosine of {[round(c, 3) for c in cos]}": (med < 0, f"{med:+.4f}")})


# ---------------------------------------------------------------- 8. parameter accounting


def test_criterion_8_parameter_accounting(golden):
    cfg = load_run_config(GOLDEN_CONFIG, out=golden.out)
    base = load_checkpoint(golden.out / "checkpoints" / "pretrained.ckpt")[0].base
    exact = all(
        trainable_param_count(m) == sum(b.rank * b.dim for b in m.hooks.values())
        for m in (load_checkpoint(golden.out / "checkpoints" / f"mrp_stage{i}.ckpt")[0] for i in range(1, 5))
    )
    ws = workspace(cfg, read_jsonl(golden.out / "corpus.jsonl"))
    before = checksum(base)
    # library defaults except K, which must stay below d_model (see README)
    default = MrpConfig(init_samples=32)
    final, _ = continual_unlearn(base, [(n, u.split("train"), ws.retain_train) for n, u, _ in ws.unlearn], default)
    count = trainable_param_count(final)
    record(8, {"count == sum rank*d on golden stages": (exact, exact),
               "default config after 4 tasks": (count == 2 * 8 * 64, count),
               "base checksum unchanged": (checksum(base) == before, before[:12])})


# ---------------------------------------------------------------- 9. determinism


def test_criterion_9_determinism(golden, golden_repeat):
    def files(root):
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a, b = files(golden.out), files(golden_repeat.out)
    differing = sorted(str(k) for k in set(a) | set(b) if a.get(k) != b.get(k))
    kinds = {s: sum(1 for k in a if k.suffix == s) for s in (".ckpt", ".json", ".csv", ".jsonl")}
    record(9, {f"byte-identical files {kinds}": (not differing and len(a) > 0, differing or len(a))})


# ---------------------------------------------------------------- 10. hook identity


def test_criterion_10_hook_identity(golden):
    base = load_checkpoint(golden.out / "checkpoints" / "pretrained.ckpt")[0].base
    cfg = base.config
    rng = np.random.default_rng(1010)
    empty_everywhere = {h: ProjectionBasis.empty(cfg.d_model) for h in range(cfg.n_blocks)}
    mismatches = 0
    for _ in range(100):
        n, length = int(rng.integers(1, 6)), int(rng.integers(1, cfg.context_len + 1))
        tokens = rng.integers(0, cfg.vocab, size=(n, length))
        batch = Batch(tokens, np.zeros_like(tokens), np.zeros(tokens.shape, dtype=bool))
        ref = forward(base, batch)[0]
        for hooks in ({}, empty_everywhere):
            mismatches += not np.array_equal(forward(HookedModel(base, hooks), batch)[0], ref)
    record(10, {"bit mismatches over 100 batches (no hooks, rank-0 hooks)": (mismatches == 0, mismatches)})
