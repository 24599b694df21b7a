"""Acceptance criteria, one test each; every test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline; a
summary block is printed at the end of every pytest run as well.
"""
import csv
import time

import numpy as np
from conftest import full_gradcheck, make_table, random_trajs, small_corpus

from citymob import synth
from citymob.autodiff import Tensor
from citymob.cli import main as cli_main
from citymob.data import (CityData, MultiCityCorpus, Trajectory, discretize, load_corpus,
                          pad_batch, preprocess_city, time_slot, window_split)
from citymob.evaluation import compare_joint_vs_separate, markov_baseline
from citymob.geo import N_POI, poi_vector, popularity_rank, rank_bucket
from citymob.metrics import acc_at_k
from citymob.model import DualTower, ModelConfig, score
from citymob.train import (TrainConfig, aggregate_loss, corpus_digest, evaluate, evaluate_split,
                           load_checkpoint, train_loop)
from citymob.trajtower import MoELayer, NoisyTopKGate

RESULTS = {}
TITLES = {
    1: "gradient correctness",
    2: "architectural invariants",
    3: "preprocessing conformance",
    4: "metric and baseline oracles",
    5: "overfit smoke test",
    6: "joint vs separate training",
    7: "determinism and persistence",
    8: "untrained-model sanity",
}


def verdict(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {TITLES[n]}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    errs = full_gradcheck(seed=0)
    worst = max(errs, key=errs.get)
    dt = time.perf_counter() - t0
    verdict(1, errs[worst] < 1e-4 and dt < 60,
            f"max rel error {errs[worst]:.2e} ({worst}) over {len(errs)} tensors, {dt:.1f}s")


def test_criterion_2_architectural_invariants():
    rng = np.random.default_rng(0)
    checks = {}
    # gate: exactly k non-zeros per row, rows sum to 1
    gate = NoisyTopKGate(16, 4, 2, rng)
    w, _ = gate(Tensor(rng.standard_normal((500, 16))), np.random.default_rng(1))
    checks["gate k-sparse"] = float(np.abs((w.data > 0).sum(-1) - 2).max())
    checks["gate simplex"] = float(np.abs(w.data.sum(-1) - 1).max())
    # sparse MoE vs dense masked oracle
    moe = MoELayer(16, 4, 2, 32, rng)
    x = Tensor(rng.standard_normal((4, 7, 16)))
    checks["moe sparse vs dense"] = float(np.abs(moe(x)[0].data - moe.dense(x).data).max())
    # causal and padding invariance through the whole model
    cfg = ModelConfig(d=16, layers=2, heads=2, experts=4, top_k=2, max_seq_len=12)
    m = DualTower(cfg, 0)
    table = make_table(15)
    a, b = random_trajs(table, 2, 9, seed=3)
    b.points = a.points[:5] + b.points[5:]
    ia = m.intent(pad_batch([a], table, 12)).data
    ib = m.intent(pad_batch([b], table, 12)).data
    checks["causal"] = float(np.abs(ia[0, :5] - ib[0, :5]).max())
    short = random_trajs(table, 1, 4, seed=7)[0]
    alone = m.intent(pad_batch([short], table, 5)).data
    batch = pad_batch([short, a], table, 12)
    batch.poi[0, 5:] = 1e3
    batch.geo[0, 5:] = -1e3
    checks["padding"] = float(np.abs(alone[0, :4] - m.intent(batch).data[0, :4]).max())
    # encoder block layout d/2 + d/4 + d/4
    enc = m.loc.encoder
    e = enc(table.poi, table.geo, table.rank).data
    p = table.poi.copy()
    p[:, :N_POI] = np.log1p(p[:, :N_POI])
    blocks = [p @ enc.poi.weight.data + enc.poi.bias.data,
              table.geo @ enc.geo.weight.data + enc.geo.bias.data,
              enc.rank.data[table.rank]]
    assert [blk.shape[1] for blk in blocks] == [8, 4, 4]
    checks["encoder layout"] = float(np.abs(e - np.concatenate(blocks, 1)).max())
    # score vs scalar loop
    I, L = rng.standard_normal((2, 3, 4)), rng.standard_normal((5, 4))
    s = score(Tensor(I), Tensor(L)).data
    ref = np.array([[[sum(I[bb, t, i] * L[n, i] for i in range(4)) for n in range(5)]
                     for t in range(3)] for bb in range(2)])
    checks["score oracle"] = float(np.abs(s - ref).max())
    # parameters do not depend on the number or size of cities
    counts = set()
    for n_cities in (1, 2, 3):
        corpus = small_corpus(users=(8,) * n_cities, rows=(6, 7, 8)[:n_cities], days=3)
        model = DualTower(cfg, 0)
        for cid, cd in corpus.cities.items():
            model.candidates(cd.table)
        counts.add(model.n_parameters())
    checks["param count spread"] = float(len(counts) - 1)
    worst = max(checks.values())
    verdict(2, worst <= 1e-12, ", ".join(f"{k} {v:.1e}" for k, v in checks.items()))


def test_criterion_3_preprocessing_conformance():
    t0 = time.perf_counter()
    ok = {}
    ok["poi fractions"] = (poi_vector([3, 1] + [0] * 12)[N_POI:N_POI + 2].tolist() == [0.75, 0.25]
                           and not poi_vector([0] * 14).any()
                           and np.all(poi_vector([1] * 14)[N_POI:] == 1 / 14))
    ok["rank buckets"] = (
        rank_bucket(1, 1000) == 0 and rank_bucket(500, 1000) == 5
        and [rank_bucket(p, 100) for p in (1, 2, 5, 6, 10, 11, 20, 21, 40, 41, 60, 61, 80, 81, 100)]
        == [0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7]
        and popularity_rank(np.full(10, 3)).tolist() == [2, 3, 4, 4, 5, 5, 6, 6, 7, 7])
    ok["slots"] = (time_slot(49620) == 28 and time_slot(0) == 0 and time_slot(85560) == 0
                   and time_slot(900) == 1 and discretize(0, 85560) == (1, 0))
    week = Trajectory("u", "c", [(1, s, d) for d in range(7) for s in (10, 20)])
    ok["windows"] = (len(window_split(week, 3, min_points=0)) == 5
                     and len(window_split(week, 3, min_points=5)) == 5
                     and window_split(Trajectory("u", "c", [(1, s, 0) for s in range(4)]), 3) == [])
    table = make_table(10)
    raw = [Trajectory(f"u{i}", "c", [(int(table.location_ids[(i + j) % 10]), 2 * j, d)
                                     for d in range(3) for j in range(3)]) for i in range(50)]
    cd = preprocess_city(table, raw, n_days=3)
    users = {s: {t.user_id for t in cd.split(s)} for s in ("train", "val", "test")}
    ok["6:2:2 split"] = ([len(users[s]) for s in ("train", "val", "test")] == [30, 10, 10]
                         and not (users["train"] & users["val"] or users["train"] & users["test"]
                                  or users["val"] & users["test"]))
    dt = time.perf_counter() - t0
    verdict(3, all(ok.values()) and dt < 10,
            ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in ok.items()) + f", {dt:.2f}s")


def sort_oracle(scores, targets, k):
    return np.mean([t in sorted(range(len(r)), key=lambda i: (-r[i], i))[:k]
                    for r, t in zip(scores, targets)])


def test_criterion_4_metric_and_baseline_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n, N = int(rng.integers(1, 10)), int(rng.integers(1, 12))
        scores = rng.integers(0, 5, (n, N)).astype(float)
        targets = rng.integers(0, N, n)
        k = int(rng.integers(1, N + 1))
        mismatches += acc_at_k(scores, targets, k) != sort_oracle(scores, targets, k)
    gaps = []
    for seed in (0, 1, 2):
        res = synth.generate(synth.SynthSpec([synth.CitySpec("a", 10, 10, 250, 7),
                                              synth.CitySpec("b", 12, 14, 250, 7)], seed=seed))
        corpus = MultiCityCorpus({n: preprocess_city(c.table, c.trajectories, n_days=c.n_days)
                                  for n, c in res.cities.items()})
        for city, cd in corpus.cities.items():
            acc = markov_baseline(cd.train, cd.test, cd.table).get(city, "markov").acc[1]
            gaps.append(abs(acc - synth.markov_oracle(corpus, city).best_acc1))
    dt = time.perf_counter() - t0
    verdict(4, mismatches == 0 and max(gaps) <= 0.02 and dt < 120,
            f"acc_at_k mismatches {mismatches}/1000, max |markov - oracle| {max(gaps):.4f} "
            f"over {len(gaps)} cities, {dt:.1f}s")


def test_criterion_5_overfit():
    t0 = time.perf_counter()
    res = synth.generate(synth.SynthSpec([synth.CitySpec("solo", 8, 8, users=40, days=3)], seed=3))
    co = res.cities["solo"]
    trajs = [w[0] for w in (window_split(tr, 3, 5) for tr in co.trajectories) if w][:32]
    assert len(trajs) == 32
    T = max(len(t) for t in trajs) + 1
    corpus = MultiCityCorpus({"solo": CityData(co.table, trajs, trajs, [])})
    cfg = ModelConfig(d=32, layers=2, heads=4, experts=4, top_k=2, max_seq_len=T)
    model = DualTower(cfg, 0)
    out = train_loop(model, corpus, TrainConfig(seed=0, lr=3e-4, epochs=200, patience=200,
                                                batch_size=8))
    m = evaluate_split(model, corpus.cities["solo"], "train")
    dt = time.perf_counter() - t0
    verdict(5, m.acc[1] >= 0.9 and m.loss < 0.5 and dt < 300,
            f"train Acc@1 {m.acc[1]:.3f}, loss {m.loss:.3f} after {out.epochs_run} epochs "
            f"({m.n} targets), {dt:.0f}s")


def test_criterion_6_joint_vs_separate():
    t0 = time.perf_counter()
    spec = synth.SynthSpec(seed=0, cities=[synth.CitySpec("small", 8, 8, users=24, days=7),
                                           synth.CitySpec("mid", 12, 16, users=110, days=7),
                                           synth.CitySpec("large", 16, 16, users=140, days=7)])
    res = synth.generate(spec)
    corpus = MultiCityCorpus({n: preprocess_city(c.table, c.trajectories, max_seq_len=40,
                                                 n_days=c.n_days) for n, c in res.cities.items()})
    points = {n: sum(len(t) for s in ("train", "val", "test") for t in cd.split(s))
              for n, cd in corpus.cities.items()}
    share = points["small"] / sum(points.values())
    assert share <= 0.10, share
    cmp = compare_joint_vs_separate(corpus, ModelConfig(d=32, layers=2, heads=4, experts=4,
                                                        top_k=2, max_seq_len=40),
                                    TrainConfig(seed=0, epochs=10, patience=10), [0, 1, 2])
    joint, sep = cmp.mean_acc1("joint", "small"), cmp.mean_acc1("separate", "small")
    wins = sum(cmp.curve(s, "joint", "small")[4] <= cmp.curve(s, "separate", "small")[4]
               for s in (0, 1, 2))
    dt = time.perf_counter() - t0
    verdict(6, joint >= sep and wins >= 2 and dt < 1800,
            f"smallest city ({share:.1%} of data) Acc@1 joint {joint:.4f} vs separate {sep:.4f}; "
            f"epoch-5 val loss joint <= separate in {wins}/3 seeds, {dt:.0f}s")


def test_criterion_7_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    corpus = small_corpus(users=(20, 30), days=4)
    cfg = ModelConfig(d=16, layers=2, heads=2, experts=4, top_k=2, max_seq_len=40)
    tc = TrainConfig(seed=11, epochs=3, batch_size=8)
    train_loop(DualTower(cfg, 11), corpus, tc, log_path=tmp_path / "a.csv")
    model = DualTower(cfg, 11)
    out = train_loop(model, corpus, tc, log_path=tmp_path / "b.csv",
                     checkpoint_path=tmp_path / "ck.bin")
    same_logs = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    restored = load_checkpoint(tmp_path / "ck.bin", cfg, corpus_digest(corpus)).model
    before = aggregate_loss(evaluate(model, corpus, "val"))
    after = aggregate_loss(evaluate(restored, corpus, "val"))
    dt = time.perf_counter() - t0
    verdict(7, same_logs and before == after == out.best_val and dt < 300,
            f"metrics logs identical: {same_logs}; val loss {before!r} -> {after!r} after "
            f"checkpoint round trip, {dt:.1f}s")


def test_criterion_8_untrained_sanity(tmp_path):
    spec = tmp_path / "u.toml"
    spec.write_text('seed = 5\nkernel_kind = "uniform_cells"\n'
                    '[cities.flat]\nrows = 8\ncols = 8\nusers = 400\ndays = 7\n')
    assert cli_main(["synth", "--spec", str(spec), "--out", str(tmp_path / "corpus")]) == 0
    common = ["--corpus", str(tmp_path / "corpus"), "--seed", "0"]
    assert cli_main(["train", "--init-only", "--out", str(tmp_path / "run")] + common) == 0
    assert cli_main(["eval", "--checkpoint", str(tmp_path / "run/checkpoint.bin"),
                     "--out", str(tmp_path / "eval")] + common) == 0
    row = next(r for r in csv.DictReader(open(tmp_path / "eval/report.csv")) if r["city"] == "flat")
    acc = float(row["acc1"])
    test = load_corpus(tmp_path / "corpus").cities["flat"].test
    n_targets = sum(len(t) - 1 for t in test)
    N = 64
    sigma = np.sqrt((1 / N) * (1 - 1 / N) / n_targets)
    verdict(8, abs(acc - 1 / N) <= 3 * sigma,
            f"Acc@1 {acc:.4f} vs 1/N {1 / N:.4f} (3 sigma {3 * sigma:.4f}, {n_targets} targets)")
