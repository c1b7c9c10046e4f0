"""Multi-task training: cross-entropy plus ``lambda``-weighted reconstruction MSE.

Determinism: parameter init uses the model seed, data order uses a separate
counter-based (Philox) stream keyed on ``(seed, epoch)``. Reordering or
skipping epochs therefore never shifts the batches of another epoch, which is
what makes mid-run resume bit-exact.
"""
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import checkpoint_load, checkpoint_save
from .eval import evaluate
from .model import model_forward

REPORT_COLUMNS = ("epoch", "train_loss", "loss_c", "loss_r", "val_accuracy",
                  "val_nmse_db", "lr", "wall_time")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1.5e-6
    batch_size: int = 512
    epochs: int = 300
    loss_weight: float = 50.0
    seed: int = 0
    checkpoint_every: int = 0   # epochs between periodic checkpoints; 0 = final only
    eval_batch_size: int = 64
    grad_clip: float = 0.0      # global gradient-norm ceiling; 0 disables clipping
    optimizer: str = "sgd"      # "sgd" (momentum) or "adam" (momentum = beta1)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"TrainConfig.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"TrainConfig.epochs must be >= 1, got {self.epochs}")
        if self.loss_weight < 0:
            raise ValueError(f"TrainConfig.loss_weight must be >= 0, got {self.loss_weight}")
        if self.learning_rate < 0:
            raise ValueError(f"TrainConfig.learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in nx.optim.METHODS:
            raise ValueError(f"TrainConfig.optimizer must be one of {nx.optim.METHODS}, "
                             f"got {self.optimizer!r}")
        if self.grad_clip < 0:
            raise ValueError(f"TrainConfig.grad_clip must be >= 0, got {self.grad_clip}")
        if self.checkpoint_every < 0:
            raise ValueError("TrainConfig.checkpoint_every must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainReport:
    """Per-epoch history (all lists share one length) plus per-step losses.

    ``lr`` is the learning rate of the epoch's first step.
    """
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    loss_c: list = field(default_factory=list)
    loss_r: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_nmse_db: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.epoch)

    def append(self, **row):
        for name in REPORT_COLUMNS:
            getattr(self, name).append(row[name])

    def rows(self):
        return [dict(zip(REPORT_COLUMNS, vals))
                for vals in zip(*(getattr(self, c) for c in REPORT_COLUMNS))]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows())
        return path

    def summary(self):
        best = best_epoch_index(self.val_accuracy, self.val_nmse_db)
        return {
            "epochs": len(self),
            "steps": len(self.step_loss),
            "final_train_loss": self.train_loss[-1] if self else None,
            "best_epoch": self.epoch[best] if best is not None else None,
            "best_val_accuracy": self.val_accuracy[best] if best is not None else None,
            "best_val_nmse_db": self.val_nmse_db[best] if best is not None else None,
            "wall_time": float(sum(self.wall_time)),
            **self.metadata,
        }

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.summary(), indent=2, default=_json_default))
        return path


def _json_default(value):
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def total_loss(logits, labels, H, H_hat, lam):
    """``cross_entropy(logits, labels) + lam * mse(H, H_hat)``; returns (L, L_c, L_r)."""
    if lam < 0:
        raise ValueError(f"loss weight must be >= 0, got {lam}")
    l_c = nx.cross_entropy(logits, labels)
    l_r = nx.mse(H, H_hat)
    return l_c + l_r * lam, l_c, l_r


def epoch_order(seed, epoch, n):
    """Permutation of ``range(n)`` for ``epoch``, from a Philox stream keyed on the pair."""
    key = np.array([seed % 2**64, epoch], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def batches(n, batch_size):
    """Number of mini-batches per epoch; the trailing short batch is kept."""
    return math.ceil(n / batch_size)


def clip_gradients(grads, max_norm):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train_step(model, x, y, lam, state, lr, grad_clip=0.0):
    """One forward/backward/update. Returns python floats (L, L_c, L_r)."""
    recon, logits, _ = model_forward(x, model, training=True)
    loss, l_c, l_r = total_loss(logits, y, x, recon, lam)
    for p in model.params.values():
        p.grad = None
    nx.backward(loss)
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    if grad_clip:
        clip_gradients(grads, grad_clip)
    nx.optimizer_step(state, model.params, grads, lr=lr)
    return loss.item(), l_c.item(), l_r.item()


def _save(path, model, state, best, cfg, report, progress):
    meta = {"train_config": cfg.to_dict(), "report": report.to_dict(), "progress": progress}
    return checkpoint_save(path, model, state, meta=meta, best_model=best)


def best_epoch_index(accuracy, nmse):
    """Index of the highest accuracy; ties go to the lowest NMSE, then the earliest epoch."""
    if not accuracy:
        return None
    return min(range(len(accuracy)), key=lambda i: (-accuracy[i], nmse[i], i))


def train(model, split, config=None, checkpoint_dir=None, resume_from=None,
          stop_after_steps=None, log=None):
    """Train ``model`` on a normalised ``split``.

    Returns ``(best_model, report)`` where ``best_model`` is the snapshot with
    the highest validation accuracy (lowest validation NMSE on ties). ``resume_from``
    continues a checkpoint written by this function; ``stop_after_steps``
    halts after that many optimizer steps in total and writes ``partial.rsck``,
    mid-epoch if need be.
    """
    config = config or TrainConfig()
    if split.stats is None:
        raise ValueError("train: split is not normalised (no stats); call data.normalize first")
    data = split.train
    n = len(data)
    if n == 0:
        raise ValueError("train: empty training set")
    steps_per_epoch = batches(n, config.batch_size)
    total_steps = steps_per_epoch * config.epochs

    if resume_from is not None:
        model, state, meta, best = checkpoint_load(resume_from, dtype=np.float32)
        report = TrainReport.from_dict(meta["report"])
        progress = meta["progress"]
        if TrainConfig.from_dict(meta["train_config"]) != config:
            raise ValueError("train: resume config differs from the checkpoint's")
    else:
        state = nx.OptimizerState(config.learning_rate, config.momentum, config.weight_decay,
                                  total_steps=total_steps, method=config.optimizer)
        report = TrainReport(metadata={"loss_weight": config.loss_weight, "seed": config.seed,
                                       "train_config": config.to_dict(),
                                       "model_config": model.config.to_dict(),
                                       "backend": nx.get_backend()})
        best = None
        progress = {"sums": [0.0, 0.0, 0.0], "best_val_accuracy": -1.0,
                    "best_val_nmse_db": math.inf, "epoch_time": 0.0}

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    step = state.step_index
    while step < total_steps:
        epoch, pos = divmod(step, steps_per_epoch)
        order = epoch_order(config.seed, epoch, n)
        sums = progress["sums"]
        if pos == 0:
            sums[:] = [0.0, 0.0, 0.0]
            progress["epoch_time"] = 0.0
            progress["epoch_lr"] = nx.cosine_lr(step, total_steps, config.learning_rate)
        t0 = time.perf_counter()
        while pos < steps_per_epoch:
            idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
            x = nx.Tensor(data.amplitudes[idx], dtype=model.dtype)
            lr = nx.cosine_lr(step, total_steps, config.learning_rate)
            try:
                loss, l_c, l_r = train_step(model, x, data.labels[idx], config.loss_weight,
                                            state, lr, config.grad_clip)
            except FloatingPointError as exc:
                raise nx.NonFiniteError(f"non-finite value at step {step} "
                                        f"(epoch {epoch}, batch {pos}): {exc}") from exc
            if not math.isfinite(loss):
                raise nx.NonFiniteError(f"non-finite loss {loss} at step {step}")
            report.step_loss.append(loss)
            # sample-weighted so the epoch mean is independent of the short batch
            for k, v in enumerate((loss, l_c, l_r)):
                sums[k] += v * len(idx)
            step += 1
            pos += 1
            if stop_after_steps is not None and step >= stop_after_steps and step < total_steps:
                progress["epoch_time"] += time.perf_counter() - t0
                _save((ckpt_dir or Path(".")) / "partial.rsck", model, state, best,
                      config, report, progress)
                return (best or model), report
        progress["epoch_time"] += time.perf_counter() - t0

        result = evaluate(model, split.val, batch_size=config.eval_batch_size)
        report.append(epoch=epoch + 1, train_loss=sums[0] / n, loss_c=sums[1] / n,
                      loss_r=sums[2] / n, val_accuracy=result.accuracy,
                      val_nmse_db=result.nmse_db, lr=progress["epoch_lr"],
                      wall_time=progress["epoch_time"])
        key = (result.accuracy, -result.nmse_db)
        if key > (progress["best_val_accuracy"], -progress["best_val_nmse_db"]):
            progress["best_val_accuracy"] = result.accuracy
            progress["best_val_nmse_db"] = result.nmse_db
            best = model.copy()
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} loss {sums[0] / n:.4f} "
                f"L_c {sums[1] / n:.4f} L_r {sums[2] / n:.4f} "
                f"val acc {result.accuracy:.3f} nmse {result.nmse_db:.2f} dB "
                f"({progress['epoch_time']:.1f}s)")
        if ckpt_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _save(ckpt_dir / f"epoch_{epoch + 1:04d}.rsck", model, state, best, config,
                  report, progress)

    if ckpt_dir is not None:
        _save(ckpt_dir / "final.rsck", model, state, best, config, report, progress)
    return (best or model), report
