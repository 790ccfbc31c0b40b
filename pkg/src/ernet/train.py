"""Adam training loop, evaluation metrics, and the latency benchmark.

The default TrainConfig is the full recipe: Adam at lr 0.001 decayed by
0.95 every 5 epochs, batches of 64, 100 iterations per epoch (6400 images),
200 epochs, L2 1e-4 on convolution/dense weights. Validation average
accuracy is computed each epoch and the best-scoring parameters are kept.
"""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import models
from .errors import ArgumentError, EvalError, ShapeError, TrainingDiverged
from .ops import softmax_cross_entropy_backward, softmax_cross_entropy_forward
from .tensor import make_rng


@dataclass
class TrainConfig:
    epochs: int = 200
    iters_per_epoch: int = 100
    batch_size: int = 64
    lr0: float = 0.001
    decay_factor: float = 0.95
    decay_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    l2_lambda: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        positives = {
            "epochs": self.epochs, "iters_per_epoch": self.iters_per_epoch,
            "batch_size": self.batch_size, "lr0": self.lr0,
            "decay_every": self.decay_every, "adam_epsilon": self.adam_epsilon,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ArgumentError(f"{name} must be positive, got {value}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ArgumentError(f"decay_factor must lie in (0,1), got {self.decay_factor}")
        for name, value in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= value < 1.0:
                raise ArgumentError(f"{name} must lie in [0,1), got {value}")
        if self.l2_lambda < 0:
            raise ArgumentError(f"l2_lambda must be non-negative, got {self.l2_lambda}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepped decay: lr0 * decay_factor^floor(epoch/decay_every)."""
    if epoch < 0:
        raise ArgumentError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def init_adam(graph: models.ModelGraph) -> AdamState:
    trainable = [k for k in graph.params if k not in graph.non_trainable]
    return AdamState(
        m={k: np.zeros_like(graph.params[k]) for k in trainable},
        v={k: np.zeros_like(graph.params[k]) for k in trainable},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to the parameters in place."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for key in state.m:
        g = grads[key]
        if g.shape != params[key].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[key].shape} for {key}")
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        params[key] -= lr * (m / bc1) / (np.sqrt(v / bc2) + epsilon)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _l2_penalty(graph: models.ModelGraph, lam: float) -> float:
    if lam == 0.0:
        return 0.0
    return lam * float(sum(np.sum(np.square(graph.params[k])) for k in graph.l2_keys))


def train(
    graph: models.ModelGraph,
    batches: Iterable,
    cfg: TrainConfig,
    val_batches_fn: Optional[Callable[[], Iterable]] = None,
    callbacks: tuple = (),
    early_stop_val_acc: Optional[float] = None,
) -> list:
    """Run the recipe; returns per-epoch history records.

    `batches` is an endless stream of Batch values; `val_batches_fn`, when
    given, produces a fresh evaluation iterator per epoch and the graph is
    left holding the parameters of the best validation epoch.
    """
    cfg.validate()
    drop_rng = make_rng(cfg.seed)
    state = init_adam(graph)
    stream = iter(batches)
    history = []
    best_acc = -1.0
    best_snapshot = None
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        losses = np.empty(cfg.iters_per_epoch, dtype=np.float64)
        for it in range(cfg.iters_per_epoch):
            batch = next(stream)
            logits, cache = models.forward(graph, batch.images, phase="train", rng=drop_rng)
            data_loss, _, loss_cache = softmax_cross_entropy_forward(logits, batch.labels)
            loss = data_loss + _l2_penalty(graph, cfg.l2_lambda)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch=epoch, iteration=it, lr=lr, loss=loss)
            losses[it] = loss
            grads = models.backward(graph, cache, softmax_cross_entropy_backward(loss_cache),
                                    l2_lambda=cfg.l2_lambda)
            adam_step(graph.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
        record = {"epoch": epoch, "lr": lr, "train_loss": float(losses.mean())}
        if val_batches_fn is not None:
            report = evaluate(graph, val_batches_fn())
            record["val_avg_acc"] = report.avg_acc
            if report.avg_acc > best_acc:
                best_acc = report.avg_acc
                best_snapshot = models.clone_params(graph)
                record["checkpoint"] = True
        history.append(record)
        for cb in callbacks:
            cb(record)
        if (
            early_stop_val_acc is not None
            and record.get("val_avg_acc", -1.0) >= early_stop_val_acc
        ):
            break
    if best_snapshot is not None:
        models.restore_params(graph, best_snapshot)
    return history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    confusion: np.ndarray          # (K, K) counts, rows are the true class
    per_class_acc: np.ndarray
    avg_acc: float
    plain_acc: float
    model_bytes: int = 0
    latency_ms: Optional[dict] = None
    fps: Optional[float] = None


def report_from_confusion(confusion: np.ndarray, model_bytes: int = 0) -> EvalReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ArgumentError(f"confusion matrix must be square, got {confusion.shape}")
    row_sums = confusion.sum(axis=1)
    if np.any(row_sums == 0):
        missing = int(np.argmin(row_sums))
        raise EvalError(f"class {missing} has no evaluation items")
    per_class = confusion.diagonal() / row_sums
    return EvalReport(
        confusion=confusion,
        per_class_acc=per_class,
        avg_acc=float(per_class.mean()),
        plain_acc=float(confusion.trace() / confusion.sum()),
        model_bytes=model_bytes,
    )


def evaluate(graph: models.ModelGraph, batches: Iterable) -> EvalReport:
    """Infer-phase pass over labeled batches; argmax prediction."""
    k = graph.class_count
    confusion = np.zeros((k, k), dtype=np.int64)
    seen = 0
    for batch in batches:
        logits, _ = models.forward(graph, batch.images)
        preds = logits.argmax(axis=1)
        np.add.at(confusion, (batch.class_ids, preds), 1)
        seen += len(preds)
    if seen == 0:
        raise EvalError("no evaluation batches were produced")
    return report_from_confusion(confusion, model_bytes=models.payload_bytes(graph))


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": os.environ.get("ERNET_THREADS", "unset"),
    }


def benchmark(graph: models.ModelGraph, warmup: int = 5, runs: int = 30, rng=None) -> dict:
    """Batch-1 infer latency over `runs` timed forwards, after `warmup`."""
    if runs < 10:
        raise ArgumentError(f"need at least 10 timed runs, got {runs}")
    if warmup < 0:
        raise ArgumentError(f"warmup must be >= 0, got {warmup}")
    if rng is None:
        rng = make_rng(0)
    x = rng.uniform(0.0, 1.0, size=(1,) + graph.input_shape).astype(graph.dtype)
    for _ in range(warmup):
        models.forward(graph, x)
    samples = np.empty(runs, dtype=np.float64)
    for i in range(runs):
        t0 = time.perf_counter()
        models.forward(graph, x)
        samples[i] = (time.perf_counter() - t0) * 1000.0
    mean = float(samples.mean())
    return {
        "mean_ms": mean,
        "p50_ms": float(np.percentile(samples, 50)),
        "p95_ms": float(np.percentile(samples, 95)),
        "fps": 1000.0 / mean,
        "runs": runs,
        "input_shape": tuple(graph.input_shape),
    }


def bench_models(named_graphs, warmup: int = 5, runs: int = 30,
                 baseline: str = "basenet", rng=None) -> dict:
    """Benchmark several models and report speedups against `baseline`."""
    items = list(named_graphs.items()) if isinstance(named_graphs, dict) else list(named_graphs)
    if not items:
        raise ArgumentError("no models to benchmark")
    names = [name for name, _ in items]
    if baseline not in names:
        raise ArgumentError(f"baseline {baseline!r} not among benchmarked models {names}")
    rows = []
    for name, graph in items:
        stats = benchmark(graph, warmup=warmup, runs=runs, rng=rng)
        stats["model"] = name
        stats["model_bytes"] = models.payload_bytes(graph)
        rows.append(stats)
    base_mean = next(r["mean_ms"] for r in rows if r["model"] == baseline)
    for r in rows:
        r["speedup"] = base_mean / r["mean_ms"]
    return {"rows": rows, "baseline": baseline, "machine": machine_descriptor()}


# ---------------------------------------------------------------------------
# plain-text rendering
# ---------------------------------------------------------------------------

def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def history_table(history) -> str:
    rows = [
        [h["epoch"], f"{h['lr']:.6g}", f"{h['train_loss']:.5f}",
         f"{h['val_avg_acc']:.4f}" if "val_avg_acc" in h else "-",
         "*" if h.get("checkpoint") else ""]
        for h in history
    ]
    return _table(["epoch", "lr", "train_loss", "val_avg_acc", "best"], rows)


def history_kv(history) -> str:
    lines = []
    for h in history:
        for key, value in h.items():
            lines.append(f"epoch_{h['epoch']}.{key}={value}")
    return "\n".join(lines) + "\n"


def report_table(report: EvalReport, class_names=None) -> str:
    k = report.confusion.shape[0]
    names = list(class_names) if class_names else [f"class_{i}" for i in range(k)]
    rows = [
        [names[i]] + [int(c) for c in report.confusion[i]] + [f"{report.per_class_acc[i]:.4f}"]
        for i in range(k)
    ]
    out = _table(["true\\pred"] + names + ["acc"], rows)
    out += f"avg_acc     {report.avg_acc:.4f}\n"
    out += f"plain_acc   {report.plain_acc:.4f}\n"
    out += f"model_bytes {report.model_bytes}\n"
    if report.latency_ms is not None:
        out += f"latency_ms  mean={report.latency_ms['mean']:.3f} p50={report.latency_ms['p50']:.3f} p95={report.latency_ms['p95']:.3f}\n"
    if report.fps is not None:
        out += f"fps         {report.fps:.2f}\n"
    return out


def report_kv(report: EvalReport) -> str:
    lines = [
        f"avg_acc={report.avg_acc!r}",
        f"plain_acc={report.plain_acc!r}",
        f"model_bytes={report.model_bytes}",
    ]
    for i, acc in enumerate(report.per_class_acc):
        lines.append(f"per_class_acc_{i}={float(acc)!r}")
    k = report.confusion.shape[0]
    for i in range(k):
        lines.append(f"confusion_{i}=" + ",".join(str(int(c)) for c in report.confusion[i]))
    if report.latency_ms is not None:
        for key, value in report.latency_ms.items():
            lines.append(f"latency_{key}_ms={value!r}")
    if report.fps is not None:
        lines.append(f"fps={report.fps!r}")
    return "\n".join(lines) + "\n"


def bench_table(result: dict) -> str:
    rows = [
        [r["model"], f"{r['mean_ms']:.3f}", f"{r['p50_ms']:.3f}", f"{r['p95_ms']:.3f}",
         f"{r['fps']:.2f}", f"{r['speedup']:.3f}", r["model_bytes"]]
        for r in result["rows"]
    ]
    out = _table(["model", "mean_ms", "p50_ms", "p95_ms", "fps", "speedup", "payload_bytes"], rows)
    out += f"baseline    {result['baseline']}\n"
    for key, value in result["machine"].items():
        out += f"machine.{key} {value}\n"
    return out
