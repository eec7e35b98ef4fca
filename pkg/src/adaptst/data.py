"""Synthetic one-to-many "speech" translation corpus.

Source sentences are strings over a 30-symbol alphabet.  Each toy target
language applies a fixed bijection to the source (copy, reverse, a shift
cipher, or an even/odd interleave).  The "audio" for a sentence is a run of
noisy copies of a per-symbol prototype vector.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .vocab import MASK, SPECIALS, SYMBOLS, Vocab

Transform = Literal["copy", "reverse", "shift", "interleave"]


class ToyLanguage(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    key: str
    transform: Transform
    shift: int = 0
    data_fraction: float = 1.0

    def apply(self, toks: list[str]) -> list[str]:
        if self.transform == "copy":
            return list(toks)
        if self.transform == "reverse":
            return list(reversed(toks))
        if self.transform == "shift":
            n = len(SYMBOLS)
            return [SYMBOLS[(SYMBOLS.index(t) + self.shift) % n] for t in toks]
        return list(toks[0::2]) + list(toks[1::2])

    def invert(self, toks: list[str]) -> list[str]:
        if self.transform == "copy":
            return list(toks)
        if self.transform == "reverse":
            return list(reversed(toks))
        if self.transform == "shift":
            n = len(SYMBOLS)
            return [SYMBOLS[(SYMBOLS.index(t) - self.shift) % n] for t in toks]
        half = (len(toks) + 1) // 2
        out: list[str] = [None] * len(toks)  # type: ignore[list-item]
        out[0::2], out[1::2] = toks[:half], toks[half:]
        return out


# Fractions follow the imbalanced split: 100% es/fr, 50% ru/it, 20% nl/ro, 10% de/pt.
DEFAULT_LANGUAGES = (
    ToyLanguage(key="es", transform="copy", data_fraction=1.0),
    ToyLanguage(key="fr", transform="shift", shift=3, data_fraction=1.0),
    ToyLanguage(key="ru", transform="reverse", data_fraction=0.5),
    ToyLanguage(key="it", transform="shift", shift=7, data_fraction=0.5),
    ToyLanguage(key="nl", transform="interleave", data_fraction=0.2),
    ToyLanguage(key="ro", transform="shift", shift=11, data_fraction=0.2),
    ToyLanguage(key="de", transform="shift", shift=1, data_fraction=0.1),
    ToyLanguage(key="pt", transform="shift", shift=5, data_fraction=0.1),
)


class CorpusSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    languages: list[ToyLanguage] = list(DEFAULT_LANGUAGES)
    n_train: int = 400
    n_dev: int = 40
    n_test: int = 40
    seed: int = 0
    feat_dim: int = 16
    frames_per_token: int = 4
    jitter: int = 1
    noise: float = 0.1
    min_len: int = 3
    max_len: int = 12


@dataclass
class Utterance:
    frames: np.ndarray  # (T, feat_dim) float32
    source: list[str]
    targets: dict[str, list[str]]

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class Corpus:
    spec: CorpusSpec
    prototypes: np.ndarray
    splits: dict[str, list[Utterance]]
    train_sizes: dict[str, int] = field(default_factory=dict)

    @property
    def languages(self) -> list[str]:
        return [l.key for l in self.spec.languages]

    def language(self, key: str) -> ToyLanguage:
        for l in self.spec.languages:
            if l.key == key:
                return l
        raise KeyError(f"language {key!r} not in corpus")

    def vocab(self) -> Vocab:
        return Vocab.multilingual(self.languages)

    def pairs(self, split: str, lang: str) -> list[Utterance]:
        """Utterances usable for ``lang`` (the train split honours data_fraction)."""
        utts = self.splits[split]
        if split == "train":
            return utts[: self.train_sizes[lang]]
        return utts


def make_prototypes(feat_dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 1]).standard_normal((len(SYMBOLS), feat_dim)).astype(np.float32)


def render_frames(
    tokens: list[str],
    seed,
    prototypes: np.ndarray,
    frames_per_token: int = 4,
    jitter: int = 1,
    noise: float = 0.1,
) -> np.ndarray:
    """Each token emits ``frames_per_token`` (+/- seeded jitter) noisy copies of its prototype."""
    if not tokens:
        raise ValueError("cannot render an empty token sequence")
    rng = np.random.default_rng(seed)
    counts = np.full(len(tokens), frames_per_token)
    if jitter:
        counts = counts + rng.integers(-jitter, jitter + 1, size=len(tokens))
    counts = np.maximum(counts, 1)
    idx = np.repeat([SYMBOLS.index(t) for t in tokens], counts)
    frames = prototypes[idx]
    if noise:
        frames = frames + rng.normal(0.0, noise, frames.shape).astype(np.float32)
    return frames.astype(np.float32)


def gen_corpus(spec: CorpusSpec | None = None, **overrides) -> Corpus:
    """Sample disjoint train/dev/test sentence sets and render them."""
    spec = (spec or CorpusSpec()).model_copy(update=overrides) if overrides else (spec or CorpusSpec())
    rng = np.random.default_rng([spec.seed, 0])
    prototypes = make_prototypes(spec.feat_dim, spec.seed)
    total = spec.n_train + spec.n_dev + spec.n_test
    seen: set[tuple[str, ...]] = set()
    sources: list[list[str]] = []
    while len(sources) < total:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        toks = tuple(SYMBOLS[i] for i in rng.integers(0, len(SYMBOLS), size=n))
        if toks not in seen:
            seen.add(toks)
            sources.append(list(toks))
    utts = []
    for i, src in enumerate(sources):
        frames = render_frames(src, [spec.seed, 2, i], prototypes, spec.frames_per_token, spec.jitter, spec.noise)
        utts.append(Utterance(frames, src, {l.key: l.apply(src) for l in spec.languages}))
    a, b = spec.n_train, spec.n_train + spec.n_dev
    splits = {"train": utts[:a], "dev": utts[a:b], "test": utts[b:]}
    sizes = {l.key: math.floor(spec.n_train * l.data_fraction + 1e-9) for l in spec.languages}
    return Corpus(spec, prototypes, splits, sizes)


def filter_long(corpus: Corpus, max_frames: int) -> tuple[Corpus, int]:
    """Drop utterances longer than ``max_frames``; returns the new corpus and the dropped count."""
    dropped = 0
    splits = {}
    sizes = dict(corpus.train_sizes)
    for name, utts in corpus.splits.items():
        kept = [u for u in utts if u.n_frames <= max_frames]
        dropped += len(utts) - len(kept)
        if name == "train":
            for lang, k in corpus.train_sizes.items():
                sizes[lang] = sum(1 for u in utts[:k] if u.n_frames <= max_frames)
        splits[name] = kept
    return Corpus(corpus.spec, corpus.prototypes, splits, sizes), dropped


def span_mask(tokens: list[str], rate: float, rng: np.random.Generator, mean_span: float = 3.0) -> tuple[list[str], int]:
    """Replace spans covering ``rate`` of the tokens (in expectation) by single ``<mask>`` tokens.

    Returns the corrupted sequence and the number of original tokens hidden.
    """
    n = len(tokens)
    target = min(n, int(math.floor(rate * n + rng.random())))
    masked = np.zeros(n, dtype=bool)
    remaining = target
    while remaining > 0:
        span = int(min(remaining, max(1, rng.poisson(mean_span))))
        starts = [s for s in range(n - span + 1) if not masked[s : s + span].any()]
        if not starts:
            free = np.nonzero(~masked)[0]
            masked[free[int(rng.integers(len(free)))]] = True
            remaining -= 1
            continue
        s = starts[int(rng.integers(len(starts)))]
        masked[s : s + span] = True
        remaining -= span
    out: list[str] = []
    for i, t in enumerate(tokens):
        if not masked[i]:
            out.append(t)
        elif i == 0 or not masked[i - 1]:
            out.append(SPECIALS[MASK])
    return out, int(masked.sum())


@dataclass
class PretrainData:
    asr: list[tuple[np.ndarray, list[str]]]
    denoise: list[tuple[list[str], list[str], str]]


def pretrain_tasks(corpus: Corpus, split: str = "train", mask_rate: float = 0.3, seed: int = 0) -> PretrainData:
    """ASR pairs (frames -> source tokens) and denoising triples (corrupted, original, lang)."""
    utts = corpus.splits[split]
    asr = [(u.frames, list(u.source)) for u in utts]
    rng = np.random.default_rng([seed, 3])
    denoise = []
    for lang in corpus.languages:
        for u in corpus.pairs(split, lang):
            tgt = u.targets[lang]
            noisy, _ = span_mask(tgt, mask_rate, rng)
            denoise.append((noisy, list(tgt), lang))
    return PretrainData(asr, denoise)


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json, <split>.frames.bin, <split>.src.txt, <split>.<lang>.txt


def save_corpus(corpus: Corpus, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "adaptst-corpus/1",
        "spec": corpus.spec.model_dump(mode="json"),
        "train_sizes": corpus.train_sizes,
        "splits": {},
    }
    np.asarray(corpus.prototypes, dtype="<f4").tofile(d / "prototypes.bin")
    for name, utts in corpus.splits.items():
        frames = np.concatenate([u.frames for u in utts]) if utts else np.zeros((0, corpus.spec.feat_dim))
        np.asarray(frames, dtype="<f4").tofile(d / f"{name}.frames.bin")
        manifest["splits"][name] = {"n": len(utts), "n_frames": [u.n_frames for u in utts]}
        _write_lines(d / f"{name}.src.txt", [u.source for u in utts])
        for lang in corpus.languages:
            _write_lines(d / f"{name}.{lang}.txt", [u.targets[lang] for u in utts])
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    spec = CorpusSpec.model_validate(manifest["spec"])
    F = spec.feat_dim
    prototypes = np.fromfile(d / "prototypes.bin", dtype="<f4").reshape(-1, F)
    splits = {}
    for name, info in manifest["splits"].items():
        flat = np.fromfile(d / f"{name}.frames.bin", dtype="<f4").reshape(-1, F)
        bounds = np.cumsum([0] + info["n_frames"])
        src = read_lines(d / f"{name}.src.txt")
        tgts = {l.key: read_lines(d / f"{name}.{l.key}.txt") for l in spec.languages}
        splits[name] = [
            Utterance(flat[bounds[i] : bounds[i + 1]].astype(np.float32), src[i], {k: v[i] for k, v in tgts.items()})
            for i in range(info["n"])
        ]
    return Corpus(spec, prototypes, splits, {k: int(v) for k, v in manifest["train_sizes"].items()})


def _write_lines(path: Path, seqs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in seqs:
            fh.write(" ".join(s) + "\n")


def read_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def corpus_path_ok(path) -> bool:
    return os.path.isfile(os.path.join(path, "manifest.json"))
