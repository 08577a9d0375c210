"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s -v``.  Criteria 6-8 share
one run of the shipped default pipeline (about five minutes on one core).
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from compgrpo.abstraction import descriptor_for, extract_primitives, extract_skeleton
from compgrpo.cli import main
from compgrpo.corpus import Example, load_tsv
from compgrpo.evaluation import (
    build_trigram_table,
    copying_score,
    evaluate,
    pass_at_k_from_samples,
)
from compgrpo.grpo import (
    GrpoConfig,
    RolloutGroup,
    clipped_surrogate,
    compute_advantages,
    grpo_objective,
    kl_term,
    make_rollout_groups,
    reference_logprobs,
)
from compgrpo.policy import EOS, ArchConfig, Vocab, greedy_decode, init_policy, load_checkpoint
from compgrpo.reward import RewardBreakdown, RewardWeights, composite_reward, composition_reward, primitive_reward
from compgrpo.sft import sft_objective

from .test_policy import fd_check

pytestmark = pytest.mark.slow


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def read_metric(path: Path, key: str) -> float:
    with path.open(encoding="utf-8") as fh:
        return float(dict(csv.reader(fh))[key])


def read_pass_at_k(path: Path) -> dict[int, float]:
    with path.open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return {int(k): float(v) for k, v in rows}


# ---------------------------------------------------------------------------


def test_criterion_1_reward_oracles(capsys):
    scan = descriptor_for("SCAN")
    gold = "JUMP JUMP LTURN".split()
    checks = {
        "prim 1.0": (primitive_reward("JUMP LTURN".split(), gold, scan), 1.0),
        "prim 0.5": (primitive_reward("JUMP JUMP".split(), gold, scan), 0.5),
        "comp 1.0": (composition_reward(gold, "RUN RUN LOOK".split(), scan), 1.0),
        "comp 1/3": (composition_reward("JUMP LTURN".split(), gold, scan), 1 / 3),
        "total 0.3": (composite_reward(gold, gold, scan, RewardWeights(0.1, 0.2, False)).total, 0.3),
        "total 1.3": (composite_reward(gold, gold, scan, RewardWeights(0.1, 0.2, True)).total, 1.3),
    }
    report = evaluate([tuple("JUMP LTURN".split())], [tuple(gold)], scan)
    checks["eval em"] = (report.exact_match, 0.0)
    checks["eval prim"] = (report.prim_accuracy, 1.0)
    checks["eval comp"] = (report.comp_accuracy, 1 / 3)
    table = build_trigram_table([("A", "B", "C", "D")])
    checks["trigram ABC"] = (table[("A", "B", "C")], 0.5)
    checks["trigram BCD"] = (table[("B", "C", "D")], 0.5)
    checks["copying 0.25"] = (copying_score([("A", "B", "C", "E")], [("A", "B", "X")], table).mean_freq, 0.25)
    pk = pass_at_k_from_samples([[("A",), ("C",)], [("C",), ("C",)]], [("A",), ("B",)], [1, 2])
    checks["pass@1"] = (pk[1], 0.5)
    checks["pass@2"] = (pk[2], 0.5)
    bad = [name for name, (got, want) in checks.items() if abs(got - want) > 1e-9]
    verdict(capsys, 1, not bad, f"{len(checks) - len(bad)}/{len(checks)} oracle values within 1e-9 {bad or ''}")


def test_criterion_2_abstraction_rows(capsys):
    rows = [
        ("SCAN", "JUMP JUMP LTURN", {"JUMP", "LTURN"}, "V(x1) V(x1) V(x2)"),
        (
            "COGS",
            "* cake ( x _ 4 ) ; hedgehog ( x _ 1 ) AND eat . agent ( x _ 2 , x _ 1 ) AND eat . theme ( x _ 2 , x _ 4 )",
            {"hedgehog", "cake", "eat.agent", "eat.theme"},
            "N(x1) ∧ N(x2) ∧ V.agent(x3, x2) ∧ V.theme(x3, x1)",
        ),
        ("FUNQL", "answer state next_to stateid texas", {"texas", "next_to"}, "N(x1) ∧ R(x2, x1)"),
        (
            "SPARQL",
            "SELECT DISTINCT ?x0 WHERE { ?x0 a ns:people.person . ?x0 ns:film.director.film m.0gwm_wy . }",
            {"ns:people.person", "m.0gwm_wy", "ns:film.director.film"},
            "N(x1) ∧ R(x1, x2)",
        ),
    ]
    failures = []
    for formalism, target, prims, skeleton in rows:
        d = descriptor_for(formalism)
        got_prims = {p.name for p in extract_primitives(target.split(), d)}
        got_skel = str(extract_skeleton(target.split(), d))
        if got_prims != prims or got_skel != skeleton:
            failures.append(f"{formalism}: {sorted(got_prims)} / {got_skel}")
    verdict(capsys, 2, not failures, f"{4 - len(failures)}/4 rows reproduced {failures or ''}")


def test_criterion_3_advantage_invariants(capsys):
    rng = np.random.default_rng(0)
    worst_mean = worst_std = 0.0
    for _ in range(1000):
        kind = rng.integers(3)
        rewards = (rng.integers(0, 2, 8) if kind == 0 else rng.random(8) if kind == 1 else rng.normal(0, 3, 8))
        adv = compute_advantages(rewards)
        if np.std(rewards) < 1e-8:
            assert not adv.any()
            continue
        worst_mean = max(worst_mean, abs(adv.mean()))
        worst_std = max(worst_std, abs(adv.std() - 1.0))
    flat_ok = all(not compute_advantages([c] * 8).any() for c in (0.0, 1.0, 0.37))
    worked = compute_advantages([1, 0, 0, 0, 0, 0, 0, 1])
    worked_ok = np.allclose(worked[[0, 7]], 1.7321, atol=1e-4) and np.allclose(worked[1:7], -0.5774, atol=1e-4)
    ok = worst_mean < 1e-9 and worst_std < 1e-9 and flat_ok and worked_ok
    verdict(capsys, 3, ok, f"max |mean|={worst_mean:.2e}, max |std-1|={worst_std:.2e}, "
                           f"degenerate->0: {flat_ok}, worked case: {worked_ok}")


def test_criterion_4_surrogate_and_kl(capsys):
    def reference(r, a, e):
        unclipped = r * a
        clipped = (1 - e if r < 1 - e else 1 + e if r > 1 + e else r) * a
        return unclipped if unclipped < clipped else clipped

    grid = [(r, a, e) for r in (0.3, 0.8, 1.0, 1.15, 1.9) for a in (-2.0, -0.5, 0.0, 0.7, 3.0)
            for e in (0.1, 0.2, 0.3, 0.5)]
    assert len(grid) == 100
    mismatches = sum(clipped_surrogate(r, a, e) != reference(r, a, e) for r, a, e in grid)
    rng = np.random.default_rng(1)
    negatives = sum(kl_term([c], [r]) < 0 for c, r in rng.uniform(-15, 0, (10_000, 2)))
    shift = kl_term([-1.2], [-1.2 + math.log(2)])
    shift_ok = abs(shift - (2 - math.log(2) - 1)) < 1e-9
    verdict(capsys, 4, mismatches == 0 and negatives == 0 and shift_ok,
            f"grid mismatches {mismatches}/100, negative KL {negatives}/10000, ln2 shift {shift:.12f}")


def test_criterion_5_gradient_checks(capsys):
    pairs = [("jump twice", "JUMP JUMP"), ("walk and run", "WALK RUN"), ("look after turn left", "LTURN LOOK")]
    examples = [Example.from_text(s, t) for s, t in pairs]
    vocab = Vocab.build({w for s, t in pairs for w in (s + " " + t).split()})
    params = init_policy(vocab, ArchConfig(embedding_dim=4, hidden_dim=8, context_window=3, max_source_len=4), 0)
    rng = np.random.default_rng(3)
    params = params.replace(params.vector + rng.normal(0, 0.5, params.vector.size))
    start = time.perf_counter()
    sft_err = fd_check(params, sft_objective([(e.source, e.target + (EOS,)) for e in examples]), 120, seed=0)

    cfg = GrpoConfig(group_size=4, temperature=1.0, kl_beta=0.2, clip_epsilon=0.2, learning_rate=0.1)
    sampled = make_rollout_groups(params, examples[:2], cfg, [(0, 0), (0, 1)])
    groups = []
    for g, rewards in zip(sampled, ([1, 0, 0, 1], [0.0, 0.5, 1.0, 0.2])):
        adv = tuple(float(a) for a in compute_advantages(rewards))
        groups.append(RolloutGroup(g.source, g.gold, g.samples,
                                   tuple(RewardBreakdown(0, 0.0, 0.0, r) for r in rewards), adv))
    ref = params.replace(params.vector + rng.normal(0, 0.1, params.vector.size))
    current = params.replace(params.vector + rng.normal(0, 0.3, params.vector.size))
    stats: dict = {}
    grpo_err = fd_check(current, grpo_objective(groups, reference_logprobs(ref, groups), cfg, stats), 120, seed=1)
    elapsed = time.perf_counter() - start
    ok = sft_err < 1e-4 and grpo_err < 1e-4 and elapsed < 60
    verdict(capsys, 5, ok, f"120 coords each: SFT max rel err {sft_err:.2e}, GRPO max rel err {grpo_err:.2e} "
                           f"(clip fraction {stats['clip_fraction']:.2f}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# shipped default pipeline, shared by criteria 6-8


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_run")
    timings = {}
    assert main(["gen-data", "--out", str(root / "data")]) == 0
    paths = ["--train", str(root / "data" / "train.tsv"), "--test", str(root / "data" / "test.tsv")]
    t0 = time.perf_counter()
    assert main(["train", "--mode", "sft", "--out", str(root / "sft")] + paths) == 0
    timings["sft"] = time.perf_counter() - t0
    sft_ckpt = root / "sft" / "checkpoints" / "sft.ckpt"
    t0 = time.perf_counter()
    assert main(["train", "--mode", "grpo", "--reward", "binary", "--checkpoint", str(sft_ckpt),
                 "--out", str(root / "grpo")] + paths) == 0
    timings["grpo"] = time.perf_counter() - t0
    for name in ("sft", "grpo"):
        ckpt = root / name / "checkpoints" / f"{name}.ckpt"
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(root / f"eval_{name}"),
                     "--pass-k", "1,2,5,10"] + paths) == 0
    return root, timings


def test_criterion_6_sft_warmup(capsys, default_run):
    root, timings = default_run
    train = load_tsv(root / "data" / "train.tsv", "SCAN")
    params = load_checkpoint(root / "sft" / "checkpoints" / "sft.ckpt")
    preds = greedy_decode(params, train.sources())
    train_em = float(np.mean([p == t for p, t in zip(preds, train.targets())]))
    test_em = read_metric(root / "eval_sft" / "reports" / "metrics.csv", "exact_match")
    ok = train_em >= 0.95 and test_em < train_em and timings["sft"] < 300
    verdict(capsys, 6, ok, f"train EM {train_em:.4f}, held-out EM {test_em:.4f}, sft {timings['sft']:.0f}s")


def test_criterion_7_grpo_improves_heldout(capsys, default_run):
    root, timings = default_run
    sft_em = read_metric(root / "eval_sft" / "reports" / "metrics.csv", "exact_match")
    grpo_em = read_metric(root / "eval_grpo" / "reports" / "metrics.csv", "exact_match")
    gain = 100 * (grpo_em - sft_em)
    ok = gain >= 2.0 and timings["grpo"] < 900
    verdict(capsys, 7, ok, f"held-out EM {sft_em:.4f} -> {grpo_em:.4f} ({gain:+.2f} pp), grpo {timings['grpo']:.0f}s")


def test_criterion_8_pass_at_k_trend(capsys, default_run):
    root, _ = default_run
    sft = read_pass_at_k(root / "eval_sft" / "reports" / "pass_at_k.csv")
    grpo = read_pass_at_k(root / "eval_grpo" / "reports" / "pass_at_k.csv")
    for scores in (sft, grpo):
        values = [scores[k] for k in sorted(scores)]
        assert values == sorted(values), f"pass@k not monotone: {scores}"
    sft_gap, grpo_gap = sft[10] - sft[1], grpo[10] - grpo[1]
    ok = sft_gap >= grpo_gap and grpo[1] >= sft[1]
    verdict(capsys, 8, ok, f"SFT pass@1 {sft[1]:.4f} pass@10 {sft[10]:.4f} (gap {sft_gap:.4f}); "
                           f"GRPO pass@1 {grpo[1]:.4f} pass@10 {grpo[10]:.4f} (gap {grpo_gap:.4f})")


# ---------------------------------------------------------------------------


def test_criterion_9_end_to_end_determinism(capsys, tmp_path):
    small = ["--set", "data.max_depth=1", "--set", "data.threshold=4", "--set", "arch.hidden_dim=32",
             "--epochs", "5", "--steps", "20", "--pass-k", "1,5", "--set", "grpo.dump_rollouts=true"]
    for run in ("a", "b"):
        assert main(["pipeline", "--out", str(tmp_path / run), "--seed", "3"] + small) == 0
    artifacts = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                       if p.is_file() and p.suffix in (".csv", ".ckpt", ".jsonl", ".tsv"))
    differing = [str(p) for p in artifacts if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    kinds = {p.suffix for p in artifacts}
    ok = not differing and {".csv", ".ckpt"} <= kinds
    verdict(capsys, 9, ok, f"{len(artifacts) - len(differing)}/{len(artifacts)} artifacts byte-identical "
                           f"(traces, checkpoints, reports) {differing or ''}")
