"""Training loop with deterministic data-parallel replicas.

K replicas each process a disjoint batch per step; gradients are averaged
in rank order (fixed-order reduction, so floating-point sums are
deterministic) and the same SGD-with-momentum update is applied to every
replica.  Replicas therefore stay parameter-identical; this is checked with
a hash every step.  Batch-norm running statistics are per-replica and are
excluded from the hash; evaluation uses rank 0.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .net import (
    Model,
    ModelConfig,
    backward,
    build_model,
    forward,
    save_checkpoint,
    softmax_cross_entropy,
)
from .store import LABELS, CorpusManifest, read_pgm


@dataclass
class Hyperparams:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 50
    val_fraction: float = 0.2
    seed: int = 0
    freeze_batchnorm: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def from_json(cls, path) -> "Hyperparams":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class Partition:
    rank: int
    world_size: int
    indices: np.ndarray


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    wall_time_s: float = 0.0
    samples_per_s: float = 0.0
    world_size: int = 1
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "val_loss": self.val_loss,
            "val_acc": self.val_acc,
            "wall_time_s": self.wall_time_s,
            "samples_per_s": self.samples_per_s,
            "world_size": self.world_size,
            "checkpoint_path": self.checkpoint_path,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def save_csv(self, path) -> None:
        lines = ["epoch,train_loss,train_acc,val_acc"]
        for i, (tl, ta, va) in enumerate(zip(self.train_loss, self.train_acc, self.val_acc), 1):
            lines.append(f"{i},{tl:.6f},{ta:.6f},{va:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def split_train_val(manifest: CorpusManifest, val_fraction: float, seed: int):
    """Stratified seeded split of manifest records; returns (train, val)."""
    if not manifest.records:
        raise ValueError("manifest is empty")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_records, val_records = [], []
    for label in LABELS:
        records = [r for r in manifest.records if r[1] == label]
        if not records:
            continue
        n_val = int(round(val_fraction * len(records)))
        if n_val == 0 or n_val == len(records):
            raise ValueError(
                f"val_fraction {val_fraction} leaves an empty side for label {label!r}"
            )
        order = rng.permutation(len(records))
        val_records += [records[i] for i in order[:n_val]]
        train_records += [records[i] for i in order[n_val:]]
    return train_records, val_records


def partition(indices, world_size: int, rank: int, epoch_seed: int) -> Partition:
    """Seeded shuffle + strided assignment; disjoint union across ranks."""
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    if not 0 <= rank < world_size:
        raise ValueError(f"rank {rank} out of range for world size {world_size}")
    indices = np.asarray(indices)
    rng = np.random.default_rng(epoch_seed)
    shuffled = indices[rng.permutation(indices.size)]
    return Partition(rank=rank, world_size=world_size, indices=shuffled[rank::world_size])


def load_corpus(manifest: CorpusManifest):
    """Load all manifest images; returns (X uint8 [N,1,T,T], y int64 [N])."""
    t = manifest.tile_size
    n = len(manifest.records)
    x = np.empty((n, 1, t, t), dtype=np.uint8)
    y = np.empty(n, dtype=np.int64)
    root = Path(manifest.root)
    for i, (rel, label) in enumerate(manifest.records):
        x[i, 0] = read_pgm(root / rel)
        y[i] = LABELS.index(label)
    return x, y


def param_hash(model: Model) -> str:
    """SHA-256 over the trainable parameters in manifest order."""
    digest = hashlib.sha256()
    for name in model.param_names():
        digest.update(model.params[name].tobytes())
    return digest.hexdigest()


def init_momentum_state(model: Model) -> dict:
    return {name: np.zeros_like(model.params[name]) for name in model.param_names()}


def sgd_momentum_update(model: Model, grads: dict, state: dict,
                        learning_rate: float, momentum: float) -> None:
    """v = momentum * v + g;  p -= lr * v (classic momentum SGD)."""
    for name in model.param_names():
        v = state[name]
        v *= momentum
        v += grads[name]
        model.params[name] -= learning_rate * v


def _replica_pass(model: Model, x: np.ndarray, y: np.ndarray, freeze_bn: bool):
    logits = forward(model, x, mode="train", freeze_bn=freeze_bn)
    loss, dlogits = softmax_cross_entropy(logits, y)
    grads = backward(model, dlogits)
    correct = int((np.argmax(logits, axis=1) == y).sum())
    return loss, grads, correct


def train_step(replicas: list, batches: list, hyperparams: Hyperparams,
               states: list, executor: ThreadPoolExecutor | None = None):
    """One synchronized data-parallel step across all replicas.

    Each replica computes gradients on its own (x, y) batch; the rank-ordered
    mean gradient is applied identically everywhere.  Returns
    (mean loss, total correct, total samples).  Raises on replica parameter
    divergence.
    """
    world = len(replicas)
    if len(batches) != world or len(states) != world:
        raise ValueError("need one batch and one optimizer state per replica")
    freeze = hyperparams.freeze_batchnorm
    if executor is not None and world > 1:
        results = list(executor.map(
            lambda args: _replica_pass(args[0], args[1][0], args[1][1], freeze),
            zip(replicas, batches),
        ))
    else:
        results = [_replica_pass(m, x, y, freeze) for m, (x, y) in zip(replicas, batches)]

    names = replicas[0].param_names()
    mean_grads = {name: results[0][1][name].copy() for name in names}
    for _, grads, _ in results[1:]:
        for name in names:
            mean_grads[name] += grads[name]
    if world > 1:
        for name in names:
            mean_grads[name] /= world

    for model, state in zip(replicas, states):
        sgd_momentum_update(model, mean_grads, state,
                            hyperparams.learning_rate, hyperparams.momentum)

    if world > 1:
        hashes = {param_hash(m) for m in replicas}
        if len(hashes) != 1:
            raise RuntimeError("replica divergence detected (parameter hash mismatch)")

    loss = float(np.mean([r[0] for r in results]))
    correct = sum(r[2] for r in results)
    seen = sum(len(b[1]) for b in batches)
    return loss, correct, seen


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 64):
    """Eval-mode (loss, accuracy); argmax ties break toward the lower index."""
    if len(y) == 0:
        raise ValueError("empty dataset")
    losses = []
    correct = 0
    for start in range(0, len(y), batch_size):
        xb = _to_unit_float(x[start : start + batch_size])
        yb = y[start : start + batch_size]
        logits = forward(model, xb, mode="eval")
        loss, _ = softmax_cross_entropy(logits, yb)
        losses.append(loss * len(yb))
        correct += int((np.argmax(logits, axis=1) == yb).sum())
    return float(np.sum(losses) / len(y)), correct / len(y)


def _to_unit_float(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.uint8:
        return x.astype(np.float32) / 255.0
    return x


def train(manifest: CorpusManifest, config: ModelConfig, hyperparams: Hyperparams,
          world_size: int = 1, out_dir=None) -> TrainReport:
    """Train on an exported corpus; deterministic given seeds and world size."""
    x_all, y_all = load_corpus(manifest)
    train_records, val_records = split_train_val(
        manifest, hyperparams.val_fraction, hyperparams.seed)
    index_of = {rec: i for i, rec in enumerate(manifest.records)}
    train_idx = np.array([index_of[r] for r in train_records])
    val_idx = np.array([index_of[r] for r in val_records])
    x_val, y_val = x_all[val_idx], y_all[val_idx]

    base = build_model(config)
    replicas = [base] + [base.copy() for _ in range(world_size - 1)]
    states = [init_momentum_state(m) for m in replicas]
    executor = ThreadPoolExecutor(max_workers=world_size) if world_size > 1 else None

    report = TrainReport(world_size=world_size)
    t_start = time.perf_counter()
    train_samples = 0
    try:
        for epoch in range(hyperparams.epochs):
            epoch_seed = np.random.SeedSequence([hyperparams.seed, epoch]).generate_state(1)[0]
            parts = [partition(train_idx, world_size, rank, epoch_seed)
                     for rank in range(world_size)]
            n_steps = min(p.indices.size for p in parts) // hyperparams.batch_size
            if n_steps == 0:
                raise ValueError(
                    f"batch_size {hyperparams.batch_size} too large for "
                    f"{min(p.indices.size for p in parts)} samples per rank"
                )
            losses = []
            correct = 0
            seen = 0
            for step in range(n_steps):
                batches = []
                for p in parts:
                    sel = p.indices[step * hyperparams.batch_size
                                    : (step + 1) * hyperparams.batch_size]
                    batches.append((_to_unit_float(x_all[sel]), y_all[sel]))
                loss, c, s = train_step(replicas, batches, hyperparams, states, executor)
                losses.append(loss)
                correct += c
                seen += s
            train_samples += seen
            val_loss, val_acc = evaluate(replicas[0], x_val, y_val)
            report.train_loss.append(float(np.mean(losses)))
            report.train_acc.append(correct / seen)
            report.val_loss.append(val_loss)
            report.val_acc.append(val_acc)
    finally:
        if executor is not None:
            executor.shutdown()

    report.wall_time_s = time.perf_counter() - t_start
    report.samples_per_s = train_samples / report.wall_time_s if report.wall_time_s else 0.0
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(replicas[0], ckpt, epoch=hyperparams.epochs,
                        history={"train_loss": report.train_loss,
                                 "val_acc": report.val_acc})
        report.checkpoint_path = str(ckpt)
        report.save_json(out_dir / "train_report.json")
        report.save_csv(out_dir / "train_curves.csv")
    return report


def throughput_benchmark(config: ModelConfig, world_sizes, n_steps: int = 10,
                         batch_size: int = 32, seed: int = 0) -> dict:
    """Samples/s of synchronized training steps for each world size.

    Reports throughput and the fraction of ideal scaling,
    throughput_w / (w * throughput_1).  BLAS pools are limited to one
    thread during the measurement so worker threads scale by themselves.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    s = config.input_size
    results = {"world_sizes": list(world_sizes), "samples_per_s": [], "fraction_of_ideal": []}
    hp = Hyperparams(batch_size=batch_size, epochs=1)
    with threadpool_limits(limits=1):
        base_throughput = None
        for world in world_sizes:
            replicas = [build_model(config) for _ in range(world)]
            states = [init_momentum_state(m) for m in replicas]
            batches = [
                (rng.random((batch_size, config.in_channels, s, s), dtype=np.float32),
                 rng.integers(0, config.num_classes, batch_size))
                for _ in range(world)
            ]
            executor = ThreadPoolExecutor(max_workers=world) if world > 1 else None
            try:
                train_step(replicas, batches, hp, states, executor)  # warm-up
                t0 = time.perf_counter()
                for _ in range(n_steps):
                    train_step(replicas, batches, hp, states, executor)
                elapsed = time.perf_counter() - t0
            finally:
                if executor is not None:
                    executor.shutdown()
            throughput = world * batch_size * n_steps / elapsed
            if base_throughput is None:
                base_throughput = throughput / world  # first entry defines ideal
            results["samples_per_s"].append(throughput)
            results["fraction_of_ideal"].append(throughput / (world * base_throughput))
    return results
