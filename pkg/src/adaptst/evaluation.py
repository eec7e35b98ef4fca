"""Corpus BLEU over native toy tokens and paired bootstrap resampling."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class EvalPair:
    hypothesis: tuple
    reference: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "hypothesis", tuple(self.hypothesis))
        object.__setattr__(self, "reference", tuple(self.reference))
        if not self.reference:
            raise ValueError("reference must be non-empty")


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def sentence_stats(hyp: Sequence, ref: Sequence, max_n: int = 4) -> np.ndarray:
    """[matches_1..N, totals_1..N, hyp_len, ref_len] for one sentence."""
    row = np.zeros(2 * max_n + 2, dtype=np.int64)
    for n in range(1, max_n + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        row[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        row[max_n + n - 1] = max(len(hyp) - n + 1, 0)
    row[-2], row[-1] = len(hyp), len(ref)
    return row


def bleu_from_stats(stats: np.ndarray, max_n: int = 4) -> np.ndarray:
    """BLEU (0-100) for summed statistics; works on (..., 2N+2) arrays."""
    stats = np.asarray(stats, dtype=np.float64)
    matches = stats[..., :max_n]
    totals = stats[..., max_n : 2 * max_n]
    hyp_len, ref_len = stats[..., -2], stats[..., -1]
    ok = (matches > 0).all(axis=-1) & (hyp_len > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_p = np.where(ok[..., None], np.log(np.where(matches > 0, matches, 1)) - np.log(np.where(totals > 0, totals, 1)), 0.0)
        bp = np.minimum(0.0, 1.0 - ref_len / np.where(hyp_len > 0, hyp_len, 1))
    return np.where(ok, 100.0 * np.exp(log_p.mean(axis=-1) + bp), 0.0)


def corpus_bleu(pairs: Sequence[EvalPair], max_n: int = 4) -> float:
    """Corpus-level BLEU: clipped n-gram counts are summed before taking precisions."""
    if not pairs:
        raise ValueError("corpus_bleu needs at least one pair")
    stats = sum(sentence_stats(p.hypothesis, p.reference, max_n) for p in pairs)
    return float(bleu_from_stats(stats, max_n))


@dataclass(frozen=True)
class SignificanceReport:
    delta: float
    p_value: float
    n_resamples: int
    seed: int
    bleu_a: float
    bleu_b: float

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "p_value": self.p_value,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "bleu_a": self.bleu_a,
            "bleu_b": self.bleu_b,
        }


def paired_bootstrap(system_a, system_b, refs, n_resamples: int = 1000, seed: int = 0, max_n: int = 4) -> SignificanceReport:
    """Fraction of resampled test sets on which ``system_b`` scores at least ``system_a``.

    Ties count against ``system_a``; a small p-value means a beats b.
    """
    if not (len(system_a) == len(system_b) == len(refs)):
        raise ValueError(f"length mismatch: {len(system_a)} / {len(system_b)} / {len(refs)}")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    if not refs:
        raise ValueError("nothing to compare")
    sa = np.stack([sentence_stats(h, r, max_n) for h, r in zip(system_a, refs)])
    sb = np.stack([sentence_stats(h, r, max_n) for h, r in zip(system_b, refs)])
    bleu_a = float(bleu_from_stats(sa.sum(0), max_n))
    bleu_b = float(bleu_from_stats(sb.sum(0), max_n))
    rng = np.random.default_rng(seed)
    N = len(refs)
    wins_b = 0
    chunk = 200
    for s in range(0, n_resamples, chunk):
        k = min(chunk, n_resamples - s)
        idx = rng.integers(0, N, size=(k, N))
        ba = bleu_from_stats(sa[idx].sum(axis=1), max_n)
        bb = bleu_from_stats(sb[idx].sum(axis=1), max_n)
        wins_b += int((bb >= ba).sum())
    return SignificanceReport(bleu_a - bleu_b, wins_b / n_resamples, n_resamples, seed, bleu_a, bleu_b)


def star(report: SignificanceReport) -> str:
    return "*" if report.significant else ""


def bleu_of(hyps, refs) -> float:
    return corpus_bleu([EvalPair(h, r) for h, r in zip(hyps, refs)])


__all__ = ["EvalPair", "corpus_bleu", "paired_bootstrap", "SignificanceReport", "sentence_stats", "bleu_from_stats", "bleu_of", "star"]
