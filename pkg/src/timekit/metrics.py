"""Top-K recommendation and Recall@K / NDCG@K."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from timekit.cf import EmbeddingSnapshot
from timekit.data import PeriodedDataset, cumulative_interactions, period_items_by_user


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    recall_at_k: float
    ndcg_at_k: float
    k: int
    num_evaluated_users: int


@dataclass(frozen=True)
class RankedLists:
    lists: list[np.ndarray]
    short: np.ndarray  # users whose list has fewer than k items


def top_k_recommend(snapshot: EmbeddingSnapshot, k: int, exclusion: list[set[int]] | None = None, users=None, chunk: int = 512) -> RankedLists:
    """Per-user top-k items by dot-product, excluded items removed.

    Ties go to the lower item index.
    """
    ue, ie = snapshot.user_embeddings, snapshot.item_embeddings
    users = np.arange(len(ue)) if users is None else np.asarray(users)
    n_items = len(ie)
    lists, short = [], []
    for s in range(0, len(users), chunk):
        block = users[s : s + chunk]
        scores = ue[block] @ ie.T
        if exclusion is not None:
            for row, u in enumerate(block):
                ex = exclusion[u]
                if ex:
                    scores[row, list(ex)] = -np.inf
        # stable sort on negated scores keeps ascending item index among ties
        order = np.argsort(-scores, axis=1, kind="stable")
        for row, u in enumerate(block):
            allowed = n_items - (len(exclusion[u]) if exclusion is not None else 0)
            take = min(k, allowed)
            lists.append(order[row, :take])
            if take < k:
                short.append(u)
    return RankedLists(lists, np.array(short, dtype=np.int64))


def _lists(ranked) -> list:
    return ranked.lists if isinstance(ranked, RankedLists) else ranked


def _evaluable(truth):
    return [u for u, t in enumerate(truth) if t]


def recall_per_user(ranked, truth: list[set[int]], k: int) -> dict[int, float]:
    lists = _lists(ranked)
    return {u: len(set(np.asarray(lists[u][:k]).tolist()) & truth[u]) / len(truth[u]) for u in _evaluable(truth)}


def recall_at_k(ranked, truth: list[set[int]], k: int) -> float:
    per = recall_per_user(ranked, truth, k)
    if not per:
        raise MetricError("no evaluable users (every ground-truth set is empty)")
    return float(np.mean(list(per.values())))


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_per_user(ranked, truth: list[set[int]], k: int) -> dict[int, float]:
    lists = _lists(ranked)
    disc = _discounts(k)
    out = {}
    for u in _evaluable(truth):
        top = np.asarray(lists[u][:k]).tolist()
        dcg = sum(disc[r] for r, v in enumerate(top) if v in truth[u])
        idcg = disc[: min(k, len(truth[u]))].sum()
        out[u] = dcg / idcg
    return out


def ndcg_at_k(ranked, truth: list[set[int]], k: int) -> float:
    per = ndcg_per_user(ranked, truth, k)
    if not per:
        raise MetricError("no evaluable users (every ground-truth set is empty)")
    return float(np.mean(list(per.values())))


def holdout_protocol(dataset: PeriodedDataset) -> tuple[list[set[int]], list[set[int]]]:
    """Exclusion sets (items seen in periods 1..M) and truth (new items in M+1)."""
    m1 = dataset.num_periods
    u, v = cumulative_interactions(dataset, m1 - 1)
    exclusion: list[set[int]] = [set() for _ in range(dataset.num_users)]
    for a, b in zip(u.tolist(), v.tolist()):
        exclusion[a].add(b)
    test = period_items_by_user(dataset.periods[m1 - 1], dataset.num_users)
    truth = [t - ex for t, ex in zip(test, exclusion)]
    return exclusion, truth


def evaluate_snapshot(snapshot: EmbeddingSnapshot, exclusion, truth, k: int) -> EvalResult:
    users = np.array(_evaluable(truth), dtype=np.int64)
    if len(users) == 0:
        raise MetricError("no evaluable users (every ground-truth set is empty)")
    ranked = top_k_recommend(snapshot, k, exclusion, users=users)
    lists = {int(u): lst for u, lst in zip(users, ranked.lists)}
    sub_truth = [truth[u] if u in lists else set() for u in range(len(truth))]
    full = [lists.get(u, np.empty(0, dtype=np.int64)) for u in range(len(truth))]
    return EvalResult(recall_at_k(full, sub_truth, k), ndcg_at_k(full, sub_truth, k), k, len(users))


def improvement_pct(original: float, forecast: float) -> float:
    if original == 0:
        return 0.0 if forecast == 0 else math.inf
    return (forecast - original) / original * 100.0


def evaluate_run(original: EmbeddingSnapshot, forecast: EmbeddingSnapshot, dataset: PeriodedDataset, k: int = 20):
    exclusion, truth = holdout_protocol(dataset)
    a = evaluate_snapshot(original, exclusion, truth, k)
    b = evaluate_snapshot(forecast, exclusion, truth, k)
    return a, b, {"recall": improvement_pct(a.recall_at_k, b.recall_at_k), "ndcg": improvement_pct(a.ndcg_at_k, b.ndcg_at_k)}


# ---------------------------------------------------------------------------
# results files

RESULT_COLUMNS = ["dataset", "base_alg", "forecaster", "k", "recall", "ndcg", "improvement_recall_pct", "improvement_ndcg_pct"]


def result_rows(dataset: str, base: str, original: EvalResult, forecasts: dict[str, EvalResult]) -> list[dict]:
    rows = [dict(dataset=dataset, base_alg=base, forecaster="original", k=original.k, recall=original.recall_at_k,
                 ndcg=original.ndcg_at_k, improvement_recall_pct=0.0, improvement_ndcg_pct=0.0)]
    for name, res in forecasts.items():
        rows.append(dict(dataset=dataset, base_alg=base, forecaster=name, k=res.k, recall=res.recall_at_k, ndcg=res.ndcg_at_k,
                         improvement_recall_pct=improvement_pct(original.recall_at_k, res.recall_at_k),
                         improvement_ndcg_pct=improvement_pct(original.ndcg_at_k, res.ndcg_at_k)))
    return rows


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["k"] = int(r["k"])
        for c in RESULT_COLUMNS[4:]:
            r[c] = float(r[c])
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'dataset':<16}{'base':<10}{'forecaster':<12}{'k':>4}{'Recall':>10}{'NDCG':>10}{'dRecall%':>10}{'dNDCG%':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['dataset']:<16}{r['base_alg']:<10}{r['forecaster']:<12}{r['k']:>4}{r['recall']:>10.4f}{r['ndcg']:>10.4f}"
            f"{r['improvement_recall_pct']:>10.2f}{r['improvement_ndcg_pct']:>10.2f}"
        )
    return "\n".join(lines) + "\n"
