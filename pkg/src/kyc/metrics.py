"""Metrics, paired significance testing, and diagnostic reports.

Everything is a pure function of predictions and gold labels. The Student-t
tail needed by the paired t-test is computed here via the regularized
incomplete beta continued fraction, so the package needs no statistics
dependency; the test suite cross-checks it against an independent oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Params, instance_scores
from .sketch import ClientCorpus

predict_scores = instance_scores


class MetricError(ValueError):
    pass


def accuracy(preds, golds) -> float:
    if len(preds) != len(golds):
        raise MetricError("preds and golds differ in length")
    if len(preds) == 0:
        raise MetricError("empty input")
    return sum(int(p == g) for p, g in zip(preds, golds)) / len(preds)


def token_f1(
    preds, golds, n_classes: int, exclude_class: int | None = None
) -> tuple[dict[int, tuple[float, float, float]], float]:
    """Token-level per-class (precision, recall, F1) and the unweighted
    macro-F1. Classes absent from both preds and golds are skipped; the
    excluded class (conventionally the "O" tag) never enters the macro."""
    if len(preds) != len(golds):
        raise MetricError("misaligned sequences")
    tp = np.zeros(n_classes, dtype=np.int64)
    fp = np.zeros(n_classes, dtype=np.int64)
    fn = np.zeros(n_classes, dtype=np.int64)
    for p, g in zip(preds, golds):
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    per_class: dict[int, tuple[float, float, float]] = {}
    macro_terms = []
    for c in range(n_classes):
        if tp[c] + fp[c] + fn[c] == 0:
            continue
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] > 0 else 0.0
        rec = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class[c] = (prec, rec, f1)
        if c != exclude_class:
            macro_terms.append(f1)
    macro = float(np.mean(macro_terms)) if macro_terms else 0.0
    return per_class, macro


def perplexity(
    params: Params, cfg: ModelConfig, instances: list[np.ndarray], g
) -> float:
    """exp of the mean token negative log-likelihood over a corpus."""
    if not instances:
        raise MetricError("empty corpus")
    total = 0.0
    n_tokens = 0
    for ids in instances:
        scores = instance_scores(params, cfg, ids, g)
        p = np.maximum(scores[np.arange(ids.shape[0]), ids], 1e-300)
        total += float(-np.log(p).sum())
        n_tokens += ids.shape[0]
    return float(math.exp(total / n_tokens))


# ---------------------------------------------------------------------------
# Paired t-test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SignificanceResult:
    mean_a: float
    std_a: float
    mean_b: float
    std_b: float
    t_statistic: float
    degrees_of_freedom: int
    p_value: float  # one-sided, alternative: b > a


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b), accurate to ~1e-12."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: int) -> float:
    """Upper-tail probability P(T >= t) for Student's t."""
    if df < 1:
        raise MetricError("degrees of freedom must be >= 1")
    x = df / (df + t * t)
    half_tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return half_tail if t >= 0 else 1.0 - half_tail


def paired_t_test(runs_a: list[float], runs_b: list[float]) -> SignificanceResult:
    """One-sided paired t-test of B > A over runs paired by seed. A
    zero-variance difference degenerates to t = +/-inf with p in {0, 1}."""
    if len(runs_a) != len(runs_b):
        raise MetricError("unequal run counts")
    n = len(runs_a)
    if n < 2:
        raise MetricError("need at least two paired runs")
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    d = b - a
    sd = float(d.std(ddof=1))
    mean_d = float(d.mean())
    df = n - 1
    if sd == 0.0:
        if mean_d > 0:
            t, p = math.inf, 0.0
        elif mean_d < 0:
            t, p = -math.inf, 1.0
        else:
            t, p = 0.0, 0.5
    else:
        t = mean_d / (sd / math.sqrt(n))
        p = student_t_sf(t, df)
    return SignificanceResult(
        mean_a=float(a.mean()),
        std_a=float(a.std(ddof=1)),
        mean_b=float(b.mean()),
        std_b=float(b.std(ddof=1)),
        t_statistic=t,
        degrees_of_freedom=df,
        p_value=p,
    )


def format_mean_std(values: list[float], scale: float = 1.0) -> str:
    """"mean(std)" cell formatting, standard deviation in parenthesis."""
    arr = np.asarray(values, dtype=np.float64) * scale
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return f"{float(arr.mean()):.1f}({std:.2f})"


# ---------------------------------------------------------------------------
# Diagnostic reports
# ---------------------------------------------------------------------------

def label_proportions(labels, n_labels: int) -> np.ndarray:
    counts = np.zeros(n_labels, dtype=np.float64)
    for x in labels:
        counts[x] += 1
    total = counts.sum()
    if total == 0:
        raise MetricError("no labels")
    return counts / total


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def label_proportion_report(
    golds,
    preds_by_model: dict[str, list],
    n_labels: int,
    label_names: list[str],
) -> tuple[list[dict], dict[str, float]]:
    """Per-label gold and predicted proportions plus each model's total
    variation distance from the gold proportions."""
    if not preds_by_model:
        raise MetricError("need at least one model's predictions")
    gold_p = label_proportions(golds, n_labels)
    model_p = {tag: label_proportions(p, n_labels) for tag, p in preds_by_model.items()}
    rows = []
    for i, name in enumerate(label_names):
        row = {"label": name, "gold": float(gold_p[i])}
        for tag, p in model_p.items():
            row[tag] = float(p[i])
        rows.append(row)
    tvs = {tag: tv_distance(gold_p, p) for tag, p in model_p.items()}
    return rows, tvs


def least_squares_line(xs: list[float], ys: list[float]) -> tuple[float, float, bool]:
    """Ordinary least squares fit; returns (slope, intercept, degenerate).
    All-equal x values are degenerate: slope 0, intercept mean(y)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 2:
        raise MetricError("need at least two points")
    var = float(((x - x.mean()) ** 2).sum())
    if var == 0.0:
        return 0.0, float(y.mean()), True
    slope = float(((x - x.mean()) * (y - y.mean())).sum() / var)
    return slope, float(y.mean() - slope * x.mean()), False


def length_bias_report(
    points: list[tuple[str, float, float, str]],
) -> tuple[list[dict], dict[str, dict]]:
    """Scatter rows (client, mean_length, frac_positive, model) and one OLS
    line per model tag."""
    rows = [
        {"client": c, "mean_length": x, "frac_positive": y, "model": tag}
        for c, x, y, tag in points
    ]
    lines: dict[str, dict] = {}
    for tag in sorted({tag for _, _, _, tag in points}):
        xs = [x for _, x, _, t in points if t == tag]
        ys = [y for _, _, y, t in points if t == tag]
        slope, intercept, degenerate = least_squares_line(xs, ys)
        lines[tag] = {"slope": slope, "intercept": intercept, "degenerate": degenerate}
    return rows, lines


def ambiguous_token_report(
    corpora: list[ClientCorpus], label_names: list[str], min_count: int = 2
) -> list[dict]:
    """Tokens whose per-client majority tag disagrees with their global
    majority tag, with both tag distributions, sorted by how far the most
    divergent client strays from the global distribution."""
    n_labels = len(label_names)
    global_counts: dict[str, np.ndarray] = {}
    client_counts: dict[str, dict[str, np.ndarray]] = {}
    for corpus in corpora:
        if corpus.labels is None:
            raise MetricError("ambiguous_token_report needs tagged corpora")
        counts = client_counts.setdefault(corpus.client_id, {})
        for inst, tags in zip(corpus.instances, corpus.labels):
            for tok, tag in zip(inst, tags):
                if tok not in global_counts:
                    global_counts[tok] = np.zeros(n_labels, dtype=np.int64)
                global_counts[tok][tag] += 1
                if tok not in counts:
                    counts[tok] = np.zeros(n_labels, dtype=np.int64)
                counts[tok][tag] += 1
    report = []
    for tok in sorted(global_counts):
        g_counts = global_counts[tok]
        if g_counts.sum() < min_count:
            continue
        g_dist = g_counts / g_counts.sum()
        g_major = int(g_counts.argmax())
        divergent = {}
        worst = 0.0
        for cid in sorted(client_counts):
            counts = client_counts[cid].get(tok)
            if counts is None or counts.sum() < min_count:
                continue
            c_major = int(counts.argmax())
            if c_major != g_major:
                c_dist = counts / counts.sum()
                divergent[cid] = label_names[c_major]
                worst = max(worst, tv_distance(c_dist, g_dist))
        if divergent:
            report.append(
                {
                    "token": tok,
                    "global_majority": label_names[g_major],
                    "global_distribution": {
                        label_names[i]: float(g_dist[i]) for i in range(n_labels)
                    },
                    "client_majorities": divergent,
                    "divergence": worst,
                }
            )
    report.sort(key=lambda r: (-r["divergence"], r["token"]))
    return report
