"""Acceptance gates for the package.

Nine end-to-end checks: optimizer update rules against hand-unrolled
recurrences, Newton-Schulz quality against the SVD oracle, exact
gradients against finite differences, ranking-metric oracles, the hybrid
parameter partition, the headline two-stage tuning result (MuonRec
converges in no more steps than tuned AdamW at comparable NDCG), the
learning-rate stability boundary, bit-level determinism, and comparison
arithmetic.

Each test prints one `[criterion N] name: PASS/FAIL` line directly to
the terminal (bypassing capture) so a full run reads as a checklist.
The training-based gates share the module-level dataset cache; the whole
file is sized to finish well inside 30 minutes on one laptop CPU core.
"""

import dataclasses
import json
import statistics
import subprocess
import sys
import time

import numpy as np

from helpers import ns_test_ensemble
from orthorec import linalg as la
from orthorec.harness import (DatasetConfig, RunConfig, compare, lr_sweep,
                              metrics_csv_text, run_experiment,
                              two_stage_sweep)
from orthorec.metrics import (EVAL_KS, ConvergenceSpec, rank_of_target,
                              recall_ndcg)
from orthorec.model import (Batch, ModelKind, ModelSpec, Role, forward,
                            init_model, loss_and_backward, softmax_xent)
from orthorec.optim import (AdamSpec, AdamState, Group, MuonSpec, adam_step,
                            classify_params)

# Shared scale for the training gates: small enough for a laptop core,
# large enough that ranking metrics separate the optimizers.
TRAIN_DIM = 32
TRAIN_LEN = 30
TRAIN_BATCH = 128

# Reduced tuning grids (3 lrs x 2 wds per stage) bracketing the observed
# optima on the default synthetic dataset.
C6_ADAM_GRID = {"lrs": (1e-3, 3e-3, 1e-2), "wds": (1e-5, 1e-4)}
C6_MUON_GRID = {"lrs": (3e-3, 1e-2, 3e-2), "wds": (1e-5, 1e-4)}
# Per-kind training budget (max_steps, patience): sasrec-lite saturates by
# step 80, poolrec's tuned-adam baseline only starts improving after a long
# plateau and needs the longer horizon.
C6_BUDGET = {"sasrec_lite": (80, 6), "poolrec": (200, 12)}

C7_LRS = (1e-4, 1e-3, 1e-2, 1e-1)
# Flatter popularity than the default: with temperature 3 the lr bell for
# sasrec-lite peaks at 1e-2 and genuinely collapses at 1e-1. At the default
# sharpness both models keep improving at 1e-1, so there is no boundary for
# the sweep to find inside the pinned rate set.
C7_SYNTH = {"temperature": 3.0}


def _gate(capsys, num, name, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {num}] {name}: "
              f"{'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


def _train_config(kind, optimizer, adam, muon=None, seed=0, max_steps=150,
                  patience=5, synth=None):
    return RunConfig(
        dataset=DatasetConfig(synthetic=synth or {}),
        model_kind=kind, optimizer=optimizer, adam=adam, muon=muon,
        embed_dim=TRAIN_DIM, max_len=TRAIN_LEN, batch_size=TRAIN_BATCH,
        max_steps=max_steps,
        convergence=ConvergenceSpec(eval_every=10, patience=patience),
        seed=seed)


class TestCriterion1AdamOracle:
    def test_adam_matches_hand_unrolled_recurrence(self, capsys):
        worst = 0.0
        for eta, wd, grads in [
            (0.1, 0.0, (0.3, -0.2, 0.05)),
            (0.01, 0.004, (1.0, 1.0, -2.0)),
        ]:
            spec = AdamSpec(eta=eta, beta1=0.9, beta2=0.999, epsilon=1e-8,
                            weight_decay=wd)
            theta = np.array([[0.5]])
            state = AdamState(m=np.zeros((1, 1)), v=np.zeros((1, 1)))
            # independent scalar unroll of the standard update equations
            x, m, v = 0.5, 0.0, 0.0
            for t, g in enumerate(grads, start=1):
                adam_step(theta, np.array([[g]]), state, spec)
                m = spec.beta1 * m + (1 - spec.beta1) * g
                v = spec.beta2 * v + (1 - spec.beta2) * g * g
                mhat = m / (1 - spec.beta1 ** t)
                vhat = v / (1 - spec.beta2 ** t)
                x = x - eta * mhat / (np.sqrt(vhat) + spec.epsilon) \
                    - eta * wd * x
                worst = max(worst, abs(float(theta[0, 0]) - x))
        assert worst <= 1e-12

        # zero gradient: AdamW must follow pure decoupled decay, i.e.
        # theta_t = theta_0 * (1 - eta*lambda)^t with no epsilon leakage
        spec = AdamSpec(eta=0.05, weight_decay=0.1)
        theta = np.array([[2.0]])
        state = AdamState(m=np.zeros((1, 1)), v=np.zeros((1, 1)))
        expected = 2.0
        decay_exact = True
        for t in range(1, 51):
            adam_step(theta, np.zeros((1, 1)), state, spec)
            expected = expected - spec.eta * (spec.weight_decay * expected)
            decay_exact = (decay_exact and float(theta[0, 0]) == expected
                           and abs(expected - 2.0 * (1.0 - spec.eta
                                   * spec.weight_decay) ** t) <= 1e-12)
        _gate(capsys, 1, "adam/adamw oracle equivalence",
              worst <= 1e-12 and decay_exact,
              f"max |step diff| {worst:.2e} <= 1e-12; zero-grad decay "
              f"follows theta0*(1 - eta*lambda)^t")


class TestCriterion2NewtonSchulz:
    def test_ensemble_against_svd_oracle(self, capsys):
        t0 = time.monotonic()
        matrices = ns_test_ensemble()
        max_rel, sv_lo, sv_hi = 0.0, np.inf, 0.0
        max_scale, max_sign = 0.0, 0.0
        for m in matrices:
            o = la.newton_schulz(m)
            ref = la.ortho_oracle(m)
            max_rel = max(max_rel,
                          float(np.linalg.norm(o - ref)
                                / np.linalg.norm(ref)))
            sv = np.linalg.svd(o, compute_uv=False)
            sv_lo = min(sv_lo, float(sv.min()))
            sv_hi = max(sv_hi, float(sv.max()))
            denom = float(np.linalg.norm(o))
            max_scale = max(max_scale,
                            float(np.linalg.norm(la.newton_schulz(3.0 * m)
                                                 - o)) / denom)
            max_sign = max(max_sign,
                           float(np.linalg.norm(la.newton_schulz(-m) + o))
                           / denom)
        elapsed = time.monotonic() - t0
        ok = (len(matrices) == 100 and max_rel <= 0.35
              and 0.5 <= sv_lo and sv_hi <= 1.5
              and max_scale <= 1e-8 and max_sign <= 1e-8
              and elapsed < 10.0)
        _gate(capsys, 2, "newton-schulz vs svd oracle", ok,
              f"rel err {max_rel:.3f} <= 0.35, singulars "
              f"[{sv_lo:.2f}, {sv_hi:.2f}] in [0.5, 1.5], scale/sign "
              f"{max(max_scale, max_sign):.1e} <= 1e-8, {elapsed:.1f}s < 10s")


class TestCriterion3Gradients:
    def test_finite_difference_check_both_models(self, capsys):
        t0 = time.monotonic()
        inputs = np.array([[0, 0, 3, 4, 5], [1, 2, 3, 4, 5]])
        targets = np.array([[0, 0, 4, 0, 6], [2, 3, 4, 5, 9]])
        batch = Batch(inputs, targets)
        h = 1e-5
        worst = {}
        for kind in (ModelKind.SASREC_LITE, ModelKind.POOLREC):
            spec = ModelSpec(kind, vocab_size=10, embed_dim=4, max_len=5,
                             ffn_dim=8 if kind is ModelKind.SASREC_LITE
                             else 0, seed=0)
            params = init_model(spec)
            # jitter away from relu kinks so central differences are valid
            jit = np.random.default_rng(5)
            for p in params:
                p.value = p.value + jit.normal(0.0, 0.05, p.value.shape)
            params[0].value[0] = 0.0
            _, cache = forward(params, spec, batch)
            for key in ("a1", "a2"):
                if key in cache:
                    assert np.abs(cache[key]).min() > 1e-4
            loss_and_backward(params, spec, batch)
            analytic = {p.name: p.grad.copy() for p in params}
            for p in params:
                worst_entry = 0.0
                it = np.nditer(p.value, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    if p.name == "embedding" and idx[0] == 0:
                        continue
                    orig = p.value[idx]
                    p.value[idx] = orig + h
                    lp, _ = softmax_xent(
                        forward(params, spec, batch)[0], batch.targets)
                    p.value[idx] = orig - h
                    lm, _ = softmax_xent(
                        forward(params, spec, batch)[0], batch.targets)
                    p.value[idx] = orig
                    fd = (lp - lm) / (2.0 * h)
                    a = float(analytic[p.name][idx])
                    rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                    worst_entry = max(worst_entry, rel)
                worst[f"{kind.value}/{p.name}"] = worst_entry
        elapsed = time.monotonic() - t0
        bad = {k: v for k, v in worst.items() if v > 1e-4}
        ok = not bad and elapsed < 30.0
        _gate(capsys, 3, "exact gradients vs finite differences", ok,
              f"max class rel err {max(worst.values()):.1e} <= 1e-4 over "
              f"{len(worst)} parameter classes, {elapsed:.1f}s < 30s"
              + (f"; FAILED {bad}" if bad else ""))


class TestCriterion4MetricOracles:
    def test_rank_and_closed_forms(self, capsys):
        rng = np.random.default_rng(42)
        mismatches = 0
        for _ in range(1000):
            n = int(rng.integers(5, 60))
            scores = rng.normal(size=n)
            target = int(rng.integers(1, n))
            # brute force: sort candidate ids by (-score, id)
            order = sorted(range(1, n), key=lambda i: (-scores[i], i))
            brute = order.index(target) + 1
            if rank_of_target(scores, target) != brute:
                mismatches += 1
        r1 = recall_ndcg([1])
        r3 = recall_ndcg([3])
        closed = (r1.recall[1] == 1.0 and r1.ndcg[1] == 1.0
                  and r1.ndcg[10] == 1.0 and r3.recall[1] == 0.0
                  and r3.ndcg[10] == 0.5)
        _gate(capsys, 4, "metric oracles", mismatches == 0 and closed,
              f"{mismatches}/1000 rank mismatches; rank1 -> 1.0 and "
              f"rank3 -> ndcg@10 = 0.5 exactly")


class TestCriterion5HybridPartition:
    def test_partition_and_empty_muon_group(self, capsys):
        spec = ModelSpec(ModelKind.SASREC_LITE, vocab_size=20, embed_dim=8,
                         max_len=6, ffn_dim=16, seed=0)
        groups = {a.param_name: a.group
                  for a in classify_params(init_model(spec))}
        muon_names = {n for n, g in groups.items() if g is Group.MUON}
        expected = {"w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_w2"}
        partition_ok = (muon_names == expected
                        and all(g is Group.ADAM for n, g in groups.items()
                                if n not in expected))

        # a model with no hidden matrix: muonrec must reduce to the adam run
        dataset = {"num_users": 150, "num_items": 120, "seed": 9}
        common = dict(
            dataset=DatasetConfig(synthetic=dataset),
            model_kind="embed_only", adam=AdamSpec(eta=1e-3),
            embed_dim=8, max_len=10, batch_size=64, max_steps=30,
            convergence=ConvergenceSpec(eval_every=10, patience=3), seed=4)
        rec_adam = run_experiment(RunConfig(optimizer="adamw", **common))
        rec_muon = run_experiment(
            RunConfig(optimizer="muonrec", muon=MuonSpec(), **common))
        same_rows = (metrics_csv_text(rec_adam, EVAL_KS)
                     == metrics_csv_text(rec_muon, EVAL_KS))
        same_result = (
            rec_adam.summary["converged_step"]
            == rec_muon.summary["converged_step"]
            and rec_adam.summary["test_ndcg"] == rec_muon.summary["test_ndcg"]
            and rec_adam.summary["test_recall"]
            == rec_muon.summary["test_recall"])
        _gate(capsys, 5, "hybrid parameter partition",
              partition_ok and same_rows and same_result,
              f"muon group == {sorted(expected)}; empty-muon-group run "
              f"bit-identical to adam (metrics rows byte-equal)")


class TestCriterion6TwoStageHeadline:
    def test_muonrec_converges_no_slower_at_comparable_ndcg(self, capsys):
        t0 = time.monotonic()
        details = []
        all_ok = True
        for kind in ("sasrec_lite", "poolrec"):
            max_steps, patience = C6_BUDGET[kind]
            base = _train_config(kind, "muonrec", AdamSpec(eta=1e-3),
                                 muon=MuonSpec(), max_steps=max_steps,
                                 patience=patience)
            report = two_stage_sweep(base, adam_grid=C6_ADAM_GRID,
                                     muon_grid=C6_MUON_GRID)
            w1 = report["stage1"]["winner"]
            w2 = report["stage2"]["winner"]
            adam_cfg = dataclasses.replace(
                base, optimizer="adamw", muon=None,
                adam=AdamSpec(eta=w1["lr"], weight_decay=w1["wd"]))
            muon_cfg = dataclasses.replace(
                base, optimizer="muonrec",
                adam=AdamSpec(eta=w1["lr"], weight_decay=w1["wd"]),
                muon=MuonSpec(eta=w2["lr"], weight_decay=w2["wd"]))
            medians = {}
            for label, cfg in (("adam", adam_cfg), ("muon", muon_cfg)):
                steps, n10s = [], []
                for seed in (0, 1, 2):
                    s = run_experiment(
                        dataclasses.replace(cfg, seed=seed)).summary
                    steps.append(s["converged_step"])
                    n10s.append(s["test_ndcg"]["10"])
                medians[label] = (statistics.median(steps),
                                  statistics.median(n10s))
            a_step, a_n10 = medians["adam"]
            m_step, m_n10 = medians["muon"]
            kind_ok = m_step <= a_step and m_n10 >= 0.98 * a_n10
            all_ok = all_ok and kind_ok
            details.append(
                f"{kind}: muon {m_step} steps/n10 {m_n10:.4f} vs "
                f"adam {a_step}/{a_n10:.4f}")
        elapsed = time.monotonic() - t0
        all_ok = all_ok and elapsed < 1800.0
        _gate(capsys, 6, "two-stage tuning headline", all_ok,
              "; ".join(details) + f"; {elapsed:.0f}s < 1800s")


class TestCriterion7LrBoundary:
    def test_highest_rate_regresses_while_smaller_improve(self, capsys):
        ok_seeds = 0
        details = []
        for seed in (0, 1, 2):
            base = _train_config("sasrec_lite", "muonrec",
                                 AdamSpec(eta=1e-3), muon=MuonSpec(),
                                 seed=seed, max_steps=120, synth=C7_SYNTH)
            rows = lr_sweep(base, list(C7_LRS))
            top = rows[-1]
            flagged = bool(top["diverged"] or top["regressed"])
            improves = any(
                r["status"] == "ok"
                and r["final_train_loss"] < r["initial_train_loss"]
                for r in rows[:-1])
            ok_seeds += flagged and improves
            details.append(f"seed {seed}: lr 1e-1 "
                           f"{'flagged' if flagged else 'not flagged'}")
        _gate(capsys, 7, "learning-rate divergence boundary", ok_seeds >= 2,
              f"{ok_seeds}/3 seeds flag lr=1e-1 with a smaller lr improving"
              f" ({'; '.join(details)})")


class TestCriterion8Determinism:
    def test_train_and_sweep_reproducibility(self, capsys, tmp_path):
        config = {
            "dataset": {"synthetic": {"num_users": 200, "num_items": 150,
                                      "seed": 11}},
            "model": {"kind": "poolrec", "embed_dim": 16, "max_len": 20},
            "optimizer": "adamw",
            "adam": {"eta": 1e-3, "weight_decay": 1e-4},
            "batch_size": 64, "max_steps": 30,
            "convergence": {"eval_every": 10, "patience": 3},
            "seed": 7,
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / run
            proc = subprocess.run(
                [sys.executable, "-m", "orthorec.cli", "train",
                 "--config", str(cfg_path), "--out", str(out)],
                capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            blobs.append((out / "metrics.csv").read_bytes())
        train_ok = blobs[0] == blobs[1]

        base = RunConfig(
            dataset=DatasetConfig(synthetic=config["dataset"]["synthetic"]),
            model_kind="poolrec", optimizer="muonrec",
            adam=AdamSpec(eta=1e-3), muon=MuonSpec(eta=5e-3),
            embed_dim=16, max_len=20, batch_size=64, max_steps=20,
            convergence=ConvergenceSpec(eval_every=10, patience=3), seed=7)
        grid_a = {"lrs": (3e-4, 1e-3), "wds": (1e-4,)}
        grid_m = {"lrs": (5e-3,), "wds": (1e-4,)}
        serial = two_stage_sweep(base, grid_a, grid_m, parallelism=1)
        forked = two_stage_sweep(base, grid_a, grid_m, parallelism=4)
        sweep_ok = serial == forked
        _gate(capsys, 8, "determinism", train_ok and sweep_ok,
              "train metrics.csv byte-identical across invocations; "
              "sweep reports identical at parallelism 1 and 4")


class TestCriterion9CompareArithmetic:
    def test_published_table_values(self, capsys):
        def summary(optimizer, step, n10):
            ks = ["1", "3", "5", "10"]
            return {"optimizer": optimizer, "model_kind": "sasrec_lite",
                    "seed": 0, "converged_step": step,
                    "test_recall": {k: 0.1 for k in ks},
                    "test_ndcg": {k: n10 for k in ks},
                    "dataset_fingerprint": "f" * 64}

        table = compare([summary("adam", 110, 0.0761),
                         summary("muonrec", 44, 0.0855)])
        imp = table["improvements"][0]
        step_red = imp["step_reduction_pct"]
        n10_imp = imp["ndcg@10_improvement_pct"]
        ok = abs(step_red - 60.0) <= 0.1 and abs(n10_imp - 12.4) <= 0.1
        _gate(capsys, 9, "compare arithmetic", ok,
              f"steps 110 -> 44 gives {step_red:.2f}% (published 60.0); "
              f"ndcg@10 0.0761 -> 0.0855 gives +{n10_imp:.2f}% "
              f"(published +12.4)")
