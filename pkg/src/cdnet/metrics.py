"""Ranking metrics over grouped candidate scores.

A run is a list of groups; each group holds the candidate scores and
binary relevance labels for one dialogue context. Candidates are ranked
by descending score with ties broken toward the lower candidate index,
which makes every metric deterministic and lets tests compare against a
brute-force oracle exactly.

Group-level values:

    recall_at_k   positives among the top k, over total positives
    reciprocal_rank   1 / rank of the first positive (0 when none)
    average_precision mean of precision@rank over positive ranks
    precision_at_1    label of the top-ranked candidate

Run-level values are unweighted means over retained groups. Groups
without any positive either contribute 0 (default) or are dropped when
``filter_no_positive`` is set (the Douban evaluation convention).
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RankedRun:
    groups: list = field(default_factory=list)  # of (scores, labels)

    def add_group(self, scores, labels):
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise ValueError("scores and labels must be equal-length vectors")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.groups.append((scores, labels))

    @classmethod
    def from_flat(cls, scores, labels, group_size):
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if len(scores) % group_size:
            raise ValueError(f"{len(scores)} rows do not divide into groups "
                             f"of {group_size}")
        run = cls()
        for i in range(0, len(scores), group_size):
            run.add_group(scores[i:i + group_size], labels[i:i + group_size])
        return run


def ranking(scores):
    """Candidate indices from best to worst; ties to the lower index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def recall_at_k(scores, labels, k):
    """Fraction of the group's positives ranked in the top k."""
    labels = np.asarray(labels)
    n = len(labels)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for group of {n}")
    total = labels.sum()
    if total == 0:
        return 0.0
    top = ranking(scores)[:k]
    return float(labels[top].sum() / total)


def reciprocal_rank(scores, labels):
    labels = np.asarray(labels)
    order = ranking(scores)
    hits = np.nonzero(labels[order])[0]
    return 0.0 if hits.size == 0 else 1.0 / (hits[0] + 1)


def average_precision(scores, labels):
    labels = np.asarray(labels)
    order = ranking(scores)
    rel = labels[order]
    hits = np.nonzero(rel)[0]
    if hits.size == 0:
        return 0.0
    precisions = [rel[:r + 1].sum() / (r + 1) for r in hits]
    return float(sum(precisions) / len(precisions))


def precision_at_1(scores, labels):
    labels = np.asarray(labels)
    return float(labels[ranking(scores)[0]])


def evaluate_run(run, ks=(1, 2, 5), filter_no_positive=False):
    """All metrics for a run: {'R_n@k': .., 'MAP': .., 'MRR': .., 'P@1': ..}."""
    groups = run.groups
    if filter_no_positive:
        groups = [(s, l) for s, l in groups if l.sum() > 0]
    if not groups:
        raise ValueError("no groups to evaluate")
    n = len(groups[0][1])
    ks = [k for k in ks if k <= min(len(l) for _, l in groups)]
    out = {}
    for k in ks:
        out[f"R_{n}@{k}"] = float(np.mean([recall_at_k(s, l, k) for s, l in groups]))
    out["MAP"] = float(np.mean([average_precision(s, l) for s, l in groups]))
    out["MRR"] = float(np.mean([reciprocal_rank(s, l) for s, l in groups]))
    out["P@1"] = float(np.mean([precision_at_1(s, l) for s, l in groups]))
    return out


def format_report(results):
    """Aligned two-line table of a metrics dict."""
    keys = list(results)
    cells = [f"{results[k]:.4f}" for k in keys]
    widths = [max(len(k), len(c)) for k, c in zip(keys, cells)]
    header = "  ".join(k.rjust(w) for k, w in zip(keys, widths))
    row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return header + "\n" + row
