"""Reports, Markov and linear baselines, joint-vs-separate comparison, and exports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import N_SLOTS, CityData, MultiCityCorpus
from .geo import N_POI, N_RANKS
from .layers import Linear
from .metrics import AccCounter
from .model import DualTower, ModelConfig, cross_entropy, named_rng
from .train import LOG_HEADER, AdamW, TrainConfig, evaluate_split, train_loop

KS = (1, 3, 5)


@dataclass
class ReportRow:
    city: str
    method: str
    n: int
    loss: float
    acc: dict


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add(self, city, method, n, loss, acc):
        self.rows.append(ReportRow(city, method, n, loss, dict(acc)))

    def get(self, city, method="model") -> ReportRow:
        for r in self.rows:
            if r.city == city and r.method == method:
                return r
        raise KeyError((city, method))

    def add_overall(self, method="model"):
        """Pooled over every evaluated position of ``method``."""
        rows = [r for r in self.rows if r.method == method and r.city != "all" and r.n]
        n = sum(r.n for r in rows)
        if not n:
            return
        acc = {k: sum(r.acc[k] * r.n for r in rows) / n for k in KS}
        loss = sum(r.loss * r.n for r in rows) / n
        self.add("all", method, n, loss, acc)

    def write_csv(self, path, method="model", epoch=0, split="test"):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for r in self.rows:
                if r.method == method:
                    w.writerow([epoch, split, r.city, repr(float(r.loss))]
                               + [repr(float(r.acc[k])) for k in KS])

    def text(self) -> str:
        lines = [f"{'city':<14}{'method':<10}{'n':>8}{'loss':>9}{'Acc@1':>8}{'Acc@3':>8}{'Acc@5':>8}"]
        for r in self.rows:
            lines.append(f"{r.city:<14}{r.method:<10}{r.n:>8}{r.loss:>9.4f}"
                         + "".join(f"{r.acc[k]:>8.4f}" for k in KS))
        for k, v in self.provenance.items():
            lines.append(f"# {k}: {v}")
        return "\n".join(lines)


def evaluate_model(model: DualTower, corpus: MultiCityCorpus, split="test",
                   report: EvalReport | None = None) -> EvalReport:
    report = report or EvalReport()
    for cid, cd in corpus.cities.items():
        m = evaluate_split(model, cd, split)
        report.add(cid, "model", m.n, m.loss, m.acc)
    report.add_overall("model")
    return report


def transitions(trajs, table):
    """(context index, next index, slot of context) for every consecutive pair."""
    ctx, nxt, slot = [], [], []
    for tr in trajs:
        idx = [table.index_of[p[0]] for p in tr.points]
        ctx.extend(idx[:-1])
        nxt.extend(idx[1:])
        slot.extend(p[1] for p in tr.points[:-1])
    return np.array(ctx, dtype=np.int64), np.array(nxt, dtype=np.int64), np.array(slot, dtype=np.int64)


# ---------------------------------------------------------------------------
# Markov baseline
# ---------------------------------------------------------------------------

class MarkovPredictor:
    """First-order transition counts with add-one smoothing; unseen contexts fall back to
    add-one-smoothed location frequencies."""

    def __init__(self, n_locations: int):
        self.n = n_locations
        self.counts = np.zeros((n_locations, n_locations))
        self.freq = np.zeros(n_locations)

    def fit(self, trajs, table):
        for tr in trajs:
            idx = [table.index_of[p[0]] for p in tr.points]
            np.add.at(self.freq, idx, 1.0)
            if len(idx) > 1:
                np.add.at(self.counts, (idx[:-1], idx[1:]), 1.0)
        return self

    def seen(self, ctx):
        return self.counts[ctx].sum(axis=-1) > 0

    def probs(self, ctx) -> np.ndarray:
        ctx = np.asarray(ctx, dtype=np.int64)
        rows = self.counts[ctx]
        smoothed = (rows + 1.0) / (rows.sum(axis=1, keepdims=True) + self.n)
        fallback = (self.freq + 1.0) / (self.freq.sum() + self.n)
        return np.where(self.seen(ctx)[:, None], smoothed, fallback[None, :])

    def top1_hits(self, ctx, nxt) -> int:
        """Own count of argmax hits (np.argmax resolves ties to the lowest index)."""
        return int((np.argmax(self.probs(ctx), axis=1) == np.asarray(nxt)).sum())


def markov_baseline(train, test, table, city=None, report: EvalReport | None = None) -> EvalReport:
    report = report or EvalReport()
    mk = MarkovPredictor(len(table)).fit(train, table)
    ctx, nxt, _ = transitions(test, table)
    counter = AccCounter(KS)
    loss = float("nan")
    if len(nxt):
        p = mk.probs(ctx)
        counter.update(p, nxt)
        loss = float(-np.mean(np.log(p[np.arange(len(nxt)), nxt])))
    report.add(city or table.city_id, "markov", counter.n, loss, counter.result())
    return report


# ---------------------------------------------------------------------------
# Linear baseline
# ---------------------------------------------------------------------------

def linear_features(table, ctx, slot) -> np.ndarray:
    """[log1p counts, fractions, normalized lat/lon, one-hot rank, one-hot slot]."""
    p = table.poi[ctx].copy()
    p[:, :N_POI] = np.log1p(p[:, :N_POI])
    rank = np.eye(N_RANKS)[table.rank[ctx]]
    slots = np.eye(N_SLOTS)[slot]
    return np.concatenate([p, table.geo[ctx], rank, slots], axis=1)


class LinearBaseline:
    def __init__(self, n_locations: int, seed: int = 0):
        n_in = 2 * N_POI + 2 + N_RANKS + N_SLOTS
        self.layer = Linear(n_in, n_locations, named_rng(seed, "linear-init"))

    def logits(self, x):
        return self.layer(Tensor(x))

    def fit(self, x, y, lr=1e-2, epochs=200, batch_size=256, seed=0, weight_decay=0.01):
        params = self.layer.parameters()
        opt = AdamW(params, lr, weight_decay=weight_decay)
        rng = named_rng(seed, "linear-schedule")
        for _ in range(epochs):
            perm = rng.permutation(len(y))
            for i in range(0, len(y), batch_size):
                sel = perm[i:i + batch_size]
                loss = cross_entropy(self.logits(x[sel]), y[sel])
                self.layer.zero_grad()
                loss.backward()
                opt.step()
        return self


def linear_baseline(train, test, table, city=None, seed=0, lr=1e-2, epochs=200,
                    report: EvalReport | None = None) -> EvalReport:
    report = report or EvalReport()
    ctx, nxt, slot = transitions(train, table)
    model = LinearBaseline(len(table), seed)
    if len(nxt):
        model.fit(linear_features(table, ctx, slot), nxt, lr=lr, epochs=epochs, seed=seed)
    ctx, nxt, slot = transitions(test, table)
    counter = AccCounter(KS)
    loss = float("nan")
    if len(nxt):
        with ad.no_grad():
            lg = model.logits(linear_features(table, ctx, slot))
            loss = cross_entropy(lg, nxt).item()
        counter.update(lg.data, nxt)
    report.add(city or table.city_id, "linear", counter.n, loss, counter.result())
    return report


# ---------------------------------------------------------------------------
# joint vs separate
# ---------------------------------------------------------------------------

@dataclass
class CompareResult:
    deltas: list = field(default_factory=list)  # dicts per (seed, city)
    curves: list = field(default_factory=list)  # (seed, arm, city, epoch, val_loss)

    def curve(self, seed, arm, city):
        return [c[4] for c in self.curves if c[0] == seed and c[1] == arm and c[2] == city]

    def mean_acc1(self, arm, city):
        vals = [d[f"{arm}_acc1"] for d in self.deltas if d["city"] == city]
        return float(np.mean(vals))

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = ["seed", "city", "n"] + [f"{a}_acc{k}" for a in ("joint", "separate") for k in KS] \
            + [f"delta_acc{k}" for k in KS]
        with open(out / "compare_delta.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, keys, lineterminator="\n")
            w.writeheader()
            for d in self.deltas:
                w.writerow({k: d[k] for k in keys})
        for arm in ("joint", "separate"):
            with open(out / f"curves_{arm}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["seed", "city", "epoch", "val_loss"])
                for c in self.curves:
                    if c[1] == arm:
                        w.writerow([c[0], c[2], c[3], repr(float(c[4]))])

    def text(self):
        cities = list(dict.fromkeys(d["city"] for d in self.deltas))
        lines = [f"{'city':<14}{'joint@1':>9}{'sep@1':>9}{'delta@1':>9}{'delta@3':>9}{'delta@5':>9}"]
        for c in cities:
            ds = [d for d in self.deltas if d["city"] == c]
            m = {k: np.mean([d[k] for d in ds]) for k in ds[0] if k not in ("city", "seed")}
            lines.append(f"{c:<14}{m['joint_acc1']:>9.4f}{m['separate_acc1']:>9.4f}"
                         f"{m['delta_acc1']:>9.4f}{m['delta_acc3']:>9.4f}{m['delta_acc5']:>9.4f}")
        return "\n".join(lines)


def _val_curves(history, city):
    return [(r[0], r[3]) for r in history if r[1] == "val" and r[2] == city]


def compare_joint_vs_separate(corpus: MultiCityCorpus, model_cfg: ModelConfig,
                              train_cfg: TrainConfig, seeds=(0, 1, 2)) -> CompareResult:
    """One joint model and one model per city, same seeds, epochs and test sets."""
    if len(corpus.cities) < 2:
        raise ValueError("comparison needs at least two cities")
    out = CompareResult()
    for seed in seeds:
        tcfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
        joint = DualTower(model_cfg, seed)
        res = train_loop(joint, corpus, tcfg)
        sep_results = {}
        for cid in corpus.city_ids:
            model = DualTower(model_cfg, seed)
            sres = train_loop(model, corpus.subset([cid]), tcfg)
            sep_results[cid] = (model, sres)
        for cid, cd in corpus.cities.items():
            jm = evaluate_split(joint, cd, "test")
            sm = evaluate_split(sep_results[cid][0], cd, "test")
            row = {"seed": seed, "city": cid, "n": jm.n}
            for k in KS:
                row[f"joint_acc{k}"] = jm.acc[k]
                row[f"separate_acc{k}"] = sm.acc[k]
                row[f"delta_acc{k}"] = jm.acc[k] - sm.acc[k]
            out.deltas.append(row)
            for ep, loss in _val_curves(res.history, cid):
                out.curves.append((seed, "joint", cid, ep, loss))
            for ep, loss in _val_curves(sep_results[cid][1].history, cid):
                out.curves.append((seed, "separate", cid, ep, loss))
    return out


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def expert_usage(model: DualTower, corpus: MultiCityCorpus, split="test") -> list:
    """(layer, city, expert, mean gate weight over REAL tokens), noise off."""
    rows = []
    for cid, cd in corpus.cities.items():
        log = []
        evaluate_split(model, cd, split, gate_log=log)
        if not log:
            continue
        for layer in range(model.cfg.layers):
            w = np.concatenate([g[layer][m] for m, g in log])
            for e, v in enumerate(w.mean(axis=0)):
                rows.append((layer, cid, e, float(v)))
    return rows


def write_expert_usage(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "city", "expert", "mean_gate_weight"])
        for layer, city, e, v in rows:
            w.writerow([layer, city, e, repr(v)])


def location_embeddings(model: DualTower, cd: CityData):
    with ad.no_grad():
        pre, post = model.loc.embed(cd.table.poi, cd.table.geo, cd.table.rank)
    return pre.data, post.data


def export_embeddings(model: DualTower, corpus: MultiCityCorpus, out_dir) -> list:
    """One CSV per city with ``pre`` (encoder) and ``post`` (after DCN) rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    d = model.cfg.d
    for cid, cd in corpus.cities.items():
        pre, post = location_embeddings(model, cd)
        path = out / f"embeddings_{cid}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["city", "location_id", "stage"] + [f"v_{i}" for i in range(d)])
            for stage, mat in (("pre", pre), ("post", post)):
                for i, lid in enumerate(cd.table.location_ids):
                    w.writerow([cid, int(lid), stage] + [repr(float(x)) for x in mat[i]])
        paths.append(path)
    return paths


def read_embeddings(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            out[(row[0], int(row[1]), row[2])] = np.array([float(x) for x in row[3:]])
    return out
