"""Reconstruction and recognition metrics, batched evaluation and embedding export."""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import denormalize
from .model import flops_count, model_forward


def nmse_db(H_set, H_hat_set):
    """``10 log10`` of the mean over samples of ``||H - H_hat||^2 / ||H||^2``.

    A perfect reconstruction returns ``-inf``. Any all-zero reference sample
    is rejected.
    """
    ratios = _nmse_ratios(H_set, H_hat_set)
    m = ratios.mean()
    return -math.inf if m == 0 else 10.0 * math.log10(m)


def nmse_db_pooled(H_set, H_hat_set):
    """Ratio-of-sums variant: ``sum ||H - H_hat||^2 / sum ||H||^2`` in dB."""
    H, E = _flat_pair(H_set, H_hat_set)
    num = ((H - E) ** 2).sum()
    return -math.inf if num == 0 else 10.0 * math.log10(num / (H ** 2).sum())


def _flat_pair(H_set, H_hat_set):
    H = np.asarray(H_set, dtype=np.float64)
    E = np.asarray(H_hat_set, dtype=np.float64)
    if H.shape != E.shape:
        raise ValueError(f"nmse: shape mismatch {H.shape} vs {E.shape}")
    if H.ndim == 0 or len(H) == 0:
        raise ValueError("nmse: empty sample set")
    return H.reshape(len(H), -1), E.reshape(len(E), -1)


def _nmse_ratios(H_set, H_hat_set):
    H, E = _flat_pair(H_set, H_hat_set)
    energy = (H ** 2).sum(axis=1)
    if (energy == 0).any():
        raise ValueError(f"nmse: sample {int(np.argmin(energy))} has zero energy")
    return ((H - E) ** 2).sum(axis=1) / energy


def predict(logits):
    """Argmax per row; ties resolve to the lowest class id."""
    return np.argmax(np.asarray(logits), axis=-1)


def accuracy(logits_set, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy: empty label set")
    return float((predict(logits_set) == labels).mean())


def confusion(pred, labels, n_classes):
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (np.asarray(labels), np.asarray(pred)), 1)
    return out


@dataclass
class EvalResult:
    accuracy: float
    nmse_db: float
    nmse_db_pooled: float
    confusion: np.ndarray
    flops: dict
    config: dict
    nmse_db_raw: float | None = None
    extra: dict = field(default_factory=dict)

    def row(self):
        return {"accuracy": self.accuracy, "nmse_db": self.nmse_db,
                "nmse_db_pooled": self.nmse_db_pooled, "nmse_db_raw": self.nmse_db_raw,
                **{f"flops_{k}": v for k, v in self.flops.items()},
                "flops_total": sum(self.flops.values())}


def run_model(model, amplitudes, batch_size=64):
    """Inference over a stacked sample array; returns (reconstructions, logits)."""
    recon, logits = [], []
    for lo in range(0, len(amplitudes), batch_size):
        x = nx.Tensor(amplitudes[lo:lo + batch_size], dtype=model.dtype)
        r, z, _ = model_forward(x, model, training=False)
        recon.append(r.data)
        logits.append(z.data)
    return np.concatenate(recon), np.concatenate(logits)


def evaluate(model, samples, stats=None, batch_size=64):
    """Accuracy and NMSE of ``model`` on a normalised :class:`SampleSet`.

    NMSE is computed on the normalised values; with ``stats`` the raw-amplitude
    NMSE is reported too.
    """
    recon, logits = run_model(model, samples.amplitudes, batch_size)
    pred = predict(logits)
    raw = None
    if stats is not None:
        raw = nmse_db(denormalize(samples.amplitudes, stats), denormalize(recon, stats))
    return EvalResult(
        accuracy=float((pred == samples.labels).mean()),
        nmse_db=nmse_db(samples.amplitudes, recon),
        nmse_db_pooled=nmse_db_pooled(samples.amplitudes, recon),
        confusion=confusion(pred, samples.labels, model.config.n_classes),
        flops=flops_count(model.config),
        config=model.config.to_dict(),
        nmse_db_raw=raw,
    )


EMBEDDING_STAGES = ("raw", "compressed", "recurrent", "classifier")


def export_embeddings(model, samples, out_path, batch_size=64):
    """Write one CSV row per (stage, sample): raw CSI, compressed windows,
    LSTM outputs and penultimate classifier activations, each flattened."""
    rows = {stage: [] for stage in EMBEDDING_STAGES}
    for lo in range(0, len(samples), batch_size):
        x = samples.amplitudes[lo:lo + batch_size]
        _, _, emb = model_forward(nx.Tensor(x, dtype=model.dtype), model, training=False)
        rows["raw"].append(x.reshape(len(x), -1))
        rows["compressed"].append(emb.compressed.data.reshape(len(x), -1))
        rows["recurrent"].append(emb.recurrent.data.reshape(len(x), -1))
        rows["classifier"].append(emb.classifier.data.reshape(len(x), -1))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    width = max(np.concatenate(v).shape[1] for v in rows.values())
    with out_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "sample_id", "label", "dims"] + [f"v{k}" for k in range(width)])
        for stage in EMBEDDING_STAGES:
            mat = np.concatenate(rows[stage])
            for i, vec in enumerate(mat):
                writer.writerow([stage, i, int(samples.labels[i]), mat.shape[1]]
                                + [repr(float(v)) for v in vec])
    return out_path


def read_embeddings(path):
    """Parse an embedding CSV back into ``{stage: (ids, labels, matrix)}``."""
    out = {}
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        next(reader)
        acc = {}
        for row in reader:
            stage, sid, label, dims = row[0], int(row[1]), int(row[2]), int(row[3])
            acc.setdefault(stage, []).append((sid, label, [float(v) for v in row[4:4 + dims]]))
    for stage, items in acc.items():
        ids = np.array([i for i, _, _ in items])
        labels = np.array([lab for _, lab, _ in items])
        out[stage] = (ids, labels, np.array([v for _, _, v in items]))
    return out
