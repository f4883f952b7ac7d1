"""Metrics: accuracy, one-vs-rest AUC, prediction confidence, aggregation.

AUC uses the rank statistic (Mann-Whitney with average ranks), which equals
exhaustive pair counting with ties worth 0.5 — exactly, since both reduce
to the same sums of half-integers in float64.
"""

import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import AllOneClass, DegenerateClassWarning, EmptyGroup, EmptyTestSet

CSV_HEADER = ("encoder,model,data_seed,model_seed,n_test,"
              "accuracy,auc,confidence,epochs_trained")


@dataclass
class PredictionRecord:
    slide_id: str
    label: int
    probabilities: np.ndarray

    @property
    def predicted(self):
        return int(np.argmax(self.probabilities))


@dataclass
class RunMetrics:
    accuracy: float
    auc: float
    confidence: float
    n_test: int
    data_seed: int
    model_seed: int
    model: str
    encoder_id: str
    epochs_trained: int = 0

    def csv_row(self):
        return (f"{self.encoder_id},{self.model},{self.data_seed},"
                f"{self.model_seed},{self.n_test},{self.accuracy!r},"
                f"{self.auc!r},{self.confidence!r},{self.epochs_trained}")


def accuracy(records):
    """Fraction of records whose argmax probability hits the true label.

    Argmax ties resolve to the lowest class index.
    """
    if not records:
        raise EmptyTestSet("no prediction records")
    hits = sum(1 for r in records if r.predicted == r.label)
    return hits / len(records)


def _binary_auc(scores, positives):
    """Rank-based AUC for one class; exact pair counting with ties = 0.5."""
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    rank_sum = ranks[positives].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc(records, average="macro"):
    """One-vs-rest AUC over the test set.

    Class c is scored by probabilities[c]. Classes absent from the test set
    (or covering it entirely) are skipped with a DegenerateClassWarning;
    AllOneClass is raised when nothing is scoreable. average= "macro" (mean
    of per-class AUCs) or "micro" (all one-vs-rest pairs pooled).
    """
    if not records:
        raise EmptyTestSet("no prediction records")
    labels = np.array([r.label for r in records])
    probs = np.stack([np.asarray(r.probabilities, dtype=np.float64)
                      for r in records])
    n_classes = probs.shape[1]

    if average == "micro":
        onehot = np.zeros_like(probs, dtype=bool)
        onehot[np.arange(labels.size), labels] = True
        value = _binary_auc(probs.ravel(), onehot.ravel())
        if value is None:
            raise AllOneClass("micro AUC needs both positives and negatives")
        return float(value)
    if average != "macro":
        raise ValueError(f"average must be 'macro' or 'micro', got {average!r}")

    per_class = []
    for c in range(n_classes):
        value = _binary_auc(probs[:, c], labels == c)
        if value is None:
            warnings.warn(f"class {c} is degenerate in the test set; skipped",
                          DegenerateClassWarning, stacklevel=2)
            continue
        per_class.append(value)
    if not per_class:
        raise AllOneClass("no class pair is scoreable")
    return float(np.mean(per_class))


def confidence(records):
    """Mean over all records of the predicted class's probability."""
    if not records:
        raise EmptyTestSet("no prediction records")
    return float(np.mean([np.max(r.probabilities) for r in records]))


def run_metrics(records, *, data_seed, model_seed, model, encoder_id,
                epochs_trained=0):
    """Bundle the three metrics for one finished run."""
    return RunMetrics(
        accuracy=accuracy(records),
        auc=auc(records),
        confidence=confidence(records),
        n_test=len(records),
        data_seed=data_seed,
        model_seed=model_seed,
        model=model,
        encoder_id=encoder_id,
        epochs_trained=epochs_trained,
    )


@dataclass
class MetricSummary:
    mean: float
    std: float   # sample std (ddof=1); 0.0 when n == 1
    n: int


METRIC_NAMES = ("accuracy", "auc", "confidence")


def aggregate(runs, keys=("model", "encoder_id")):
    """Group runs by keys; mean and sample std per metric.

    Returns:
        dict group-tuple -> dict metric name -> MetricSummary.
    """
    groups = {}
    for run in runs:
        group = tuple(getattr(run, k) for k in keys)
        groups.setdefault(group, []).append(run)
    if not groups:
        raise EmptyGroup("no runs to aggregate")
    out = {}
    for group, members in sorted(groups.items()):
        summary = {}
        for metric in METRIC_NAMES:
            values = np.array([getattr(m, metric) for m in members])
            std = float(values.std(ddof=1)) if values.size > 1 else 0.0
            summary[metric] = MetricSummary(mean=float(values.mean()),
                                            std=std, n=values.size)
        out[group] = summary
    return out


def format_mean_std(summary, percent=True):
    """Table-style cell: "95.86 (± 1.80)"."""
    scale = 100.0 if percent else 1.0
    return f"{summary.mean * scale:.2f} (± {summary.std * scale:.2f})"


def metrics_to_csv(runs):
    """Per-run CSV, sorted for byte-stable output."""
    ordered = sorted(runs, key=lambda r: (r.encoder_id, r.model,
                                          r.data_seed, r.model_seed))
    lines = [CSV_HEADER]
    lines.extend(r.csv_row() for r in ordered)
    return "\n".join(lines) + "\n"


def aggregate_to_csv(grouped, keys=("model", "encoder_id")):
    lines = [",".join(keys) + ",n,"
             + ",".join(f"{m}_mean,{m}_std" for m in METRIC_NAMES)]
    for group, summary in sorted(grouped.items()):
        n = summary[METRIC_NAMES[0]].n
        cells = list(map(str, group)) + [str(n)]
        for metric in METRIC_NAMES:
            cells.append(repr(summary[metric].mean))
            cells.append(repr(summary[metric].std))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def aggregate_to_text(grouped, keys=("model", "encoder_id")):
    """Aligned table with "mean (± std)" cells, percent scale."""
    header = list(keys) + ["n"] + [m for m in METRIC_NAMES]
    rows = []
    for group, summary in sorted(grouped.items()):
        row = list(map(str, group))
        row.append(str(summary[METRIC_NAMES[0]].n))
        row.extend(format_mean_std(summary[m]) for m in METRIC_NAMES)
        rows.append(row)
    widths = [max(len(header[i]), *(len(r[i]) for r in rows))
              for i in range(len(header))]
    buf = io.StringIO()
    buf.write("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    buf.write("\n")
    for row in rows:
        buf.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        buf.write("\n")
    return buf.getvalue()
