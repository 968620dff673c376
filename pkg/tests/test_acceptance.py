"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line through the ``criterion`` fixture;
the lines are repeated in the pytest terminal summary.
"""
import csv
import statistics
import time

import numpy as np
import pytest
from scipy import integrate, stats

from federa import adapters as ad
from federa import experiment as ex
from federa.cli import main
from federa.data import SynthConfig, synth_generate
from federa.fedsim import ClientUpdate, FedConfig, aggregate, run
from federa.linalg import frobenius_norm, make_rng, svd
from federa.model import ModelConfig, forward, gradient_check, init_params, train_epochs, trainable_view
from federa.partition import ClientShard, PartitionConfig, dirichlet_log_pdf, dirichlet_sample, heterogeneity_matrix, partition

ROBERTA = ModelConfig(vocab_size=50265, seq_len=514, embed_dim=768, ffn_dim=3072, num_blocks=12, num_classes=2)
SWEEP_MODES = ["fedft", "fedap", "fedlr", "federa"]
SWEEP_ALPHAS = [0.1, 100.0]
SWEEP_SEEDS = [0, 1, 2]


def test_svd_correctness(criterion):
    shapes = [(8, 8), (64, 48), (48, 64), (1, 16), (32, 1)]
    worst_rec = worst_orth = 0.0
    t0 = time.perf_counter()
    for i in range(100):
        shape = shapes[i % len(shapes)]
        w = make_rng(i, "acceptance-svd").standard_normal(shape)
        res = svd(w)
        p = min(shape)
        worst_rec = max(worst_rec, frobenius_norm(w - res.reconstruct()) / frobenius_norm(w))
        worst_orth = max(
            worst_orth,
            np.abs(res.u.T @ res.u - np.eye(p)).max(),
            np.abs(res.v_rows @ res.v_rows.T - np.eye(p)).max(),
        )
    elapsed = time.perf_counter() - t0
    ok = worst_rec < 1e-10 and worst_orth < 1e-10 and elapsed < 10
    criterion("SVD correctness", ok, f"max reconstruction {worst_rec:.2e}, max orthogonality defect {worst_orth:.2e}, {elapsed:.2f}s")
    assert ok


def test_federa_truncation_oracle(criterion):
    worst = 0.0
    for shape in [(8, 8), (64, 48), (48, 64), (16, 32)]:
        w = make_rng(shape[0] * 1000 + shape[1], "acceptance-trunc").standard_normal(shape)
        u, s, vt = np.linalg.svd(w, full_matrices=True)
        for r in (1, 8, min(shape)):
            ref = (u[:, :r] * s[:r]) @ vt[:r]
            a, b = ad.federa_factors(w, r)
            worst = max(worst, frobenius_norm(b @ a - ref) / frobenius_norm(ref))
    ok = worst < 1e-9
    criterion("FeDeRA truncation oracle", ok, f"max relative Frobenius error {worst:.2e}")
    assert ok


def test_output_preservation(criterion):
    cfg = ModelConfig(vocab_size=50, seq_len=8, embed_dim=16, ffn_dim=32, num_blocks=2, num_classes=5)
    worst = 0.0
    for draw in range(20):
        rng = make_rng(draw, "acceptance-preserve")
        tokens = rng.integers(0, cfg.vocab_size, (6, cfg.seq_len))
        for mode in (ad.FeDeRA(4), ad.LoRA(4), ad.Bottleneck(6)):
            params = init_params(cfg, draw, std=float(rng.uniform(0.05, 0.5)))
            ref, _ = forward(params, None, tokens)
            aset = ad.attach(params, mode, rng)
            out, _ = forward(params, aset, tokens)
            worst = max(worst, float(np.abs(out - ref).max()))
    ok = worst < 1e-9
    criterion("Output preservation", ok, f"max logit change {worst:.2e} over 20 draws x 3 modes")
    assert ok


def test_gradient_fidelity(criterion):
    cfg = ModelConfig(vocab_size=16, seq_len=4, embed_dim=8, ffn_dim=12, num_blocks=1, num_classes=3)
    t0 = time.perf_counter()
    worst = gradient_check(cfg, seed=0, eps=1e-5)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    criterion("Gradient fidelity", ok, f"max relative error {worst:.2e} (d=8, all modes), {elapsed:.1f}s")
    assert ok


def test_aggregation_oracle(criterion):
    worst = 0.0
    for trial in range(50):
        rng = make_rng(trial, "acceptance-agg")
        k = int(rng.integers(1, 10))
        ups = [ClientUpdate(c, {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(3)}, int(rng.integers(1, 100))) for c in range(k)]
        out = aggregate(ups)
        total = sum(u.num_samples for u in ups)
        for name in ("w", "b"):
            ref = sum((u.num_samples / total) * u.trainables[name] for u in ups)
            worst = max(worst, float(np.abs(out[name] - ref).max()))

    synth = SynthConfig(num_classes=4, samples_per_class=25, vocab_size=64, seq_len=6, signal_tokens_per_class=3)
    ds = synth_generate(synth)
    mcfg = ModelConfig(vocab_size=64, seq_len=6, embed_dim=8, ffn_dim=12, num_blocks=1, num_classes=4)
    params = init_params(mcfg, 1)
    adapters = ad.attach(params, ad.FeDeRA(2), make_rng(1, "a"))
    shard = ClientShard(0, np.arange(len(ds)), np.full(4, 0.25))
    fed = FedConfig(rounds=1, num_clients=1, clients_per_round=1, lr=0.1, seed=1)
    result = run(ds, ds, [shard], fed, params, adapters)
    p_ref, a_ref, _ = train_epochs(params, adapters, ds.tokens, ds.labels, np.arange(len(ds)), epochs=1,
                                   batch_size=fed.batch_size, lr=fed.lr, rng=make_rng(1, "local-train", 1, 0))
    ref = trainable_view(p_ref, a_ref)
    identical = all(result.state.trainables[k].tobytes() == ref[k].tobytes() for k in ref)
    ok = worst < 1e-12 and identical
    criterion("Aggregation oracle", ok, f"max deviation {worst:.2e}; M=S=1 bit-identical to centralized epoch: {identical}")
    assert ok


def test_parameter_count(criterion):
    lora = ad.trainable_parameters(ad.LoRA(32), ROBERTA)
    full = ex.comm_cost(ad.FullFT(), ROBERTA, 1)
    ratio = ex.comm_cost(ad.LoRA(32), ROBERTA, 1) / full
    ok = lora["adapter_count"] == 1_179_648 and ratio < 0.01
    criterion("Parameter count", ok, f"LoRA scalars {lora['adapter_count']:,} (plus {lora['count'] - lora['adapter_count']:,} head); LoRA/FullFT bytes {ratio:.5f}")
    assert ok


def test_dirichlet_sampler(criterion):
    worst_tv = 0.0
    for alpha in (0.1, 1.0, 100.0):
        m = make_rng(int(alpha * 10), "acceptance-m").random(20) + 0.1
        m /= m.sum()
        draws = dirichlet_sample(alpha * m, make_rng(7, "acceptance-dir", client=int(alpha * 10)), size=100_000)
        worst_tv = max(worst_tv, 0.5 * float(np.abs(draws.mean(axis=0) - m).sum()))
    u = np.array([2.0, 3.0])
    x1 = dirichlet_sample(u, make_rng(8, "acceptance-chi"), size=100_000)[:, 0]
    edges = np.linspace(0.0, 1.0, 26)
    observed, _ = np.histogram(x1, edges)
    pdf = lambda t: float(np.exp(dirichlet_log_pdf([t, 1.0 - t], u)))
    probs = np.array([integrate.quad(pdf, max(lo, 1e-12), min(hi, 1 - 1e-12))[0] for lo, hi in zip(edges[:-1], edges[1:])])
    pvalue = stats.chisquare(observed, probs / probs.sum() * len(x1)).pvalue
    ok = worst_tv < 0.01 and pvalue > 0.01
    criterion("Dirichlet sampler", ok, f"max TV of empirical mean {worst_tv:.4f}; chi-square p={pvalue:.3f} for u=(2,3)")
    assert ok


def test_js_heterogeneity_ordering(criterion):
    medians = []
    for alpha in (0.1, 1.0, 100.0):
        means = []
        for seed in range(20):
            ds = synth_generate(SynthConfig(seed=seed))
            means.append(heterogeneity_matrix(partition(ds, PartitionConfig(20, alpha, seed)))[1])
        medians.append(statistics.median(means))
    ok = medians[0] > medians[1] > medians[2]
    criterion("JS heterogeneity ordering", ok, "median mean-pairwise JS " + ", ".join(f"alpha={a:g}: {m:.4f}" for a, m in zip((0.1, 1, 100), medians)))
    assert ok


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = ex.apply_overrides(ex.ExperimentConfig(), {
        "out": str(out),
        "sweep.modes": SWEEP_MODES,
        "sweep.alphas": SWEEP_ALPHAS,
        "sweep.seeds": SWEEP_SEEDS,
    }).validate()
    t0 = time.perf_counter()
    report = ex.cmd_sweep(cfg)
    elapsed = time.perf_counter() - t0
    acc = {(m, a): ex.median_final_accuracy(report / "comparison.csv", m, a) for m in SWEEP_MODES for a in SWEEP_ALPHAS}
    return {"root": out, "report": report, "acc": acc, "seconds": elapsed}


def _acc_table(acc, alpha):
    return ", ".join(f"{m} {acc[(m, alpha)]:.3f}" for m in SWEEP_MODES)


def test_comparison_a_federa_beats_lora_under_skew(sweep, criterion):
    acc = sweep["acc"]
    margin = acc[("federa", 0.1)] - acc[("fedlr", 0.1)]
    ok = margin >= 0.02
    criterion("Method comparison (a)", ok, f"alpha=0.1 FeDeRA - FedLR = {margin:+.3f} (need >= +0.02); medians: {_acc_table(acc, 0.1)}")
    assert ok


def test_comparison_b_federa_gap_to_full(sweep, criterion):
    acc = sweep["acc"]
    gaps = {a: (acc[("fedft", a)] - acc[("federa", a)], acc[("fedft", a)] - acc[("fedlr", a)]) for a in SWEEP_ALPHAS}
    ok = all(g_federa <= g_lora for g_federa, g_lora in gaps.values())
    detail = "; ".join(f"alpha={a:g}: FeDeRA gap {g[0]:.3f} vs FedLR gap {g[1]:.3f}" for a, g in gaps.items())
    criterion("Method comparison (b)", ok, detail)
    assert ok


def test_comparison_c_all_methods_reach_085_when_iid(sweep, criterion):
    acc = sweep["acc"]
    ok = all(acc[(m, 100.0)] >= 0.85 for m in SWEEP_MODES)
    criterion("Method comparison (c)", ok, f"alpha=100 medians: {_acc_table(acc, 100.0)}")
    assert ok


def test_comparison_runtime(sweep, criterion):
    ok = sweep["seconds"] < 15 * 60
    criterion("Method comparison runtime", ok, f"{len(SWEEP_MODES) * len(SWEEP_ALPHAS) * len(SWEEP_SEEDS)} runs incl. pretraining in {sweep['seconds']:.0f}s")
    assert ok


def test_drift_analogue(sweep, criterion):
    pairs = []
    for seed in SWEEP_SEEDS:
        runs = sweep["root"] / f"seed{seed}" / "runs"
        pairs.append((
            ex.mean_early_direction_drift(runs / "fedlr-alpha0.1"),
            ex.mean_early_direction_drift(runs / "federa-alpha0.1"),
        ))
    lora = statistics.median(p[0] for p in pairs)
    federa = statistics.median(p[1] for p in pairs)
    ok = lora > federa
    criterion("Drift analogue", ok, f"median mean delta_d of lora_b over rounds 1-10: FedLR {lora:.4f} vs FeDeRA {federa:.2e}")
    assert ok


def test_determinism_across_threads(tmp_path, criterion):
    outputs = []
    for threads in (1, 4):
        out = tmp_path / f"threads{threads}"
        common = ["--out", str(out), "--seed", "11", "--threads", str(threads), "--rounds", "10"]
        for cmd in ("generate", "pretrain", "partition", "run"):
            assert main([cmd, *common]) == 0
        run_dir = out / "runs" / "federa-alpha0.1"
        assert main(["drift", str(run_dir)]) == 0
        outputs.append(((run_dir / "rounds.csv").read_bytes(), (run_dir / "drift.csv").read_bytes()))
    same_rounds = outputs[0][0] == outputs[1][0]
    same_drift = outputs[0][1] == outputs[1][1]
    ok = same_rounds and same_drift
    criterion("Determinism", ok, f"--threads 1 vs 4: rounds.csv identical {same_rounds}, drift.csv identical {same_drift}")
    assert ok
