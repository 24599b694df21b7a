"""Joint multi-city training: AdamW, early stopping, metrics log and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import MultiCityCorpus, format_trajectory, pad_batch, sample_schedule, SPLITS
from .metrics import AccCounter, supervised_rows
from .model import DualTower, ModelConfig, cross_entropy, named_rng, score

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "split", "city", "loss", "acc1", "acc3", "acc5"]


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int
    lr: float = 3e-4
    epochs: int = 50
    patience: int = 3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0  # <= 0 disables clipping

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a seed is required")
        if self.lr < 0 or self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("lr >= 0, epochs/patience/batch_size >= 1 required")


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# evaluation passes
# ---------------------------------------------------------------------------

@dataclass
class SplitMetrics:
    loss: float
    acc: dict
    n: int


def evaluate_split(model: DualTower, city_data, split: str, batch_size: int = 64,
                   gate_log=None) -> SplitMetrics:
    """Noise-free loss (mean over supervised positions) and Acc@1/3/5."""
    trajs = city_data.split(split)
    if not trajs:
        return SplitMetrics(float("nan"), {1: float("nan"), 3: float("nan"), 5: float("nan")}, 0)
    T = model.cfg.max_seq_len
    counter = AccCounter()
    nll = 0.0
    with ad.no_grad():
        cands = model.candidates(city_data.table)
        for i in range(0, len(trajs), batch_size):
            b = pad_batch(trajs[i:i + batch_size], city_data.table, T)
            glog = [] if gate_log is not None else None
            lg = score(model.intent(b, None, glog), cands)
            rows, tg = supervised_rows(lg.data, b.targets)
            if len(tg):
                nll += cross_entropy(lg, b.targets).item() * len(tg)
            counter.update(rows, tg)
            if gate_log is not None:
                gate_log.append((b.mask.reshape(-1), glog))
    if counter.n == 0:
        return SplitMetrics(float("nan"), counter.result(), 0)
    return SplitMetrics(nll / counter.n, counter.result(), counter.n)


def evaluate(model, corpus: MultiCityCorpus, split: str = "val", batch_size: int = 64) -> dict:
    return {cid: evaluate_split(model, cd, split, batch_size) for cid, cd in corpus.cities.items()}


def aggregate_loss(per_city: dict) -> float:
    """Unweighted mean of per-city mean losses."""
    vals = [m.loss for m in per_city.values() if m.n]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_epoch: int
    best_val: float
    epochs_run: int
    history: list = field(default_factory=list)  # metrics-log rows
    optimizer: AdamW | None = None


def _row(epoch, split, city, loss, acc):
    return [epoch, split, city, loss, acc[1], acc[3], acc[5]]


def write_metrics_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], r[2]] + [repr(float(x)) for x in r[3:]])


def read_metrics_log(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def train_step(model, opt, batch, table, noise_rng, clip_norm):
    logits = model.logits(batch, table, noise_rng)
    loss = cross_entropy(logits, batch.targets)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite training loss {value} on city {batch.city_id}")
    model.zero_grad()
    loss.backward()
    clip_grad_norm(opt.params, clip_norm)
    opt.step()
    return value, logits.data


def train_loop(model: DualTower, corpus: MultiCityCorpus, cfg: TrainConfig,
               log_path=None, checkpoint_path=None, on_epoch=None) -> TrainResult:
    """Train on every city's training split; keep the best-validation parameters.

    Each epoch visits every training batch of every city once, in seeded random
    order. Stops early after ``patience`` epochs without validation improvement,
    then restores the best parameters.
    """
    params = model.parameters()
    opt = AdamW(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    noise_rng = named_rng(cfg.seed, "gate-noise")
    sched_rng = named_rng(cfg.seed, "schedule")
    T = model.cfg.max_seq_len
    history = []
    best_val, best_epoch, best_state, bad = math.inf, 0, None, 0
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        schedule = sample_schedule(corpus, cfg.batch_size, int(sched_rng.integers(2 ** 63)))
        counter = AccCounter()
        total, count = 0.0, 0
        for cid, idxs in schedule:
            cd = corpus.cities[cid]
            trajs = [cd.train[i] for i in idxs]
            batch = pad_batch(trajs, cd.table, T)
            n = batch.n_supervised
            if n == 0:
                continue
            value, logits = train_step(model, opt, batch, cd.table, noise_rng, cfg.clip_norm)
            total += value * n
            count += n
            counter.update(*supervised_rows(logits, batch.targets))
        if count == 0:
            raise ValueError("no supervised training positions in corpus")
        history.append(_row(epoch, "train", "all", total / count, counter.result()))
        per_city = evaluate(model, corpus, "val")
        for cid, m in per_city.items():
            history.append(_row(epoch, "val", cid, m.loss, m.acc))
        val = aggregate_loss(per_city)
        mean_acc = {k: float(np.nanmean([m.acc[k] for m in per_city.values()])) for k in (1, 3, 5)}
        history.append(_row(epoch, "val", "all", val, mean_acc))
        log.info("epoch %d train %.4f val %.4f", epoch, total / count, val)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        if log_path is not None:
            write_metrics_log(log_path, history)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if val < best_val:
            best_val, best_epoch, bad = val, epoch, 0
            best_state = ([p.data.copy() for p in params], [m.copy() for m in opt.m],
                          [v.copy() for v in opt.v], opt.t)
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if best_state is not None:
        for p, a in zip(params, best_state[0]):
            p.data[...] = a
        opt.m, opt.v, opt.t = best_state[1], best_state[2], best_state[3]
    result = TrainResult(best_epoch, best_val, epoch, history, opt)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, opt, best_epoch, corpus_digest(corpus))
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CMOBCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sI32s32sIIQ")


def corpus_digest(corpus: MultiCityCorpus) -> bytes:
    h = hashlib.sha256()
    for cid in sorted(corpus.cities):
        cd = corpus.cities[cid]
        h.update(cid.encode())
        h.update(np.ascontiguousarray(cd.table.location_ids, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(cd.table.poi, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(cd.table.geo, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(cd.table.rank, dtype="<i8").tobytes())
        for s in SPLITS:
            h.update(s.encode())
            for tr in cd.split(s):
                h.update(format_trajectory(tr).encode())
    return h.digest()


def _manifest_path(path):
    return Path(str(path) + ".manifest")


def save_checkpoint(path, model: DualTower, opt: AdamW | None, epoch: int,
                    corpus_hash: bytes = b"\0" * 32):
    """Little-endian header, then parameter blobs, then Adam first/second moments."""
    named = list(model.named_parameters())
    path = Path(path)
    step = opt.t if opt is not None else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, model.cfg.digest(), corpus_hash, epoch,
                              len(named), step))
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        for i in range(len(named)):
            fh.write(np.ascontiguousarray(opt.m[i] if opt else np.zeros_like(named[i][1].data),
                                          dtype="<f8").tobytes())
        for i in range(len(named)):
            fh.write(np.ascontiguousarray(opt.v[i] if opt else np.zeros_like(named[i][1].data),
                                          dtype="<f8").tobytes())
    with open(_manifest_path(path), "w", encoding="utf-8") as fh:
        fh.write(f"# config {json.dumps(asdict(model.cfg), sort_keys=True)}\n")
        fh.write(f"# config_sha256 {model.cfg.digest().hex()}\n")
        fh.write(f"# corpus_sha256 {corpus_hash.hex()}\n")
        fh.write(f"# epoch {epoch}\n")
        for name, p in named:
            fh.write(f"{name}\t{'x'.join(str(s) for s in p.shape) or 'scalar'}\n")


@dataclass
class Checkpoint:
    model: DualTower
    m: list
    v: list
    step: int
    epoch: int
    corpus_hash: bytes


def read_manifest_config(path) -> ModelConfig:
    with open(_manifest_path(path), encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# config "):
                return ModelConfig(**json.loads(line[len("# config "):]))
    raise CheckpointError(f"{_manifest_path(path)}: no config line")


def load_checkpoint(path, cfg: ModelConfig | None = None, corpus_hash: bytes | None = None) -> Checkpoint:
    """Rebuild a model from disk; refuses a config (or corpus) whose hash differs."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    if cfg is None:
        cfg = read_manifest_config(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, cfg_hash, c_hash, epoch, n, step = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r}, version {version})")
    if cfg_hash != cfg.digest():
        raise CheckpointError(f"{path}: config hash mismatch; checkpoint was written under "
                              f"a different model configuration")
    if corpus_hash is not None and c_hash != corpus_hash:
        raise CheckpointError(f"{path}: corpus manifest hash mismatch")
    model = DualTower(cfg, 0)
    named = list(model.named_parameters())
    if n != len(named):
        raise CheckpointError(f"{path}: {n} tensors stored, model has {len(named)}")
    off = _HEADER.size
    arrays = []
    for _ in range(3):
        group = []
        for _, p in named:
            size = p.data.size * 8
            if off + size > len(raw):
                raise CheckpointError(f"{path}: truncated payload")
            group.append(np.frombuffer(raw, dtype="<f8", count=p.data.size, offset=off)
                         .reshape(p.shape).astype(np.float64))
            off += size
        arrays.append(group)
    for (_, p), a in zip(named, arrays[0]):
        p.data[...] = a
    return Checkpoint(model, arrays[1], arrays[2], step, epoch, c_hash)


def optimizer_from_checkpoint(ck: Checkpoint, cfg: TrainConfig) -> AdamW:
    opt = AdamW(ck.model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    opt.m, opt.v, opt.t = [m.copy() for m in ck.m], [v.copy() for v in ck.v], ck.step
    return opt
