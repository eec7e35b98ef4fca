"""Training examples, padding, and length-bucketed batching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Corpus, PretrainData
from .vocab import EOS, PAD, Vocab


@dataclass(frozen=True)
class Example:
    src: np.ndarray  # (T, feat) frames or (L,) token ids
    target: tuple[int, ...]  # reference ids, no start/EOS
    start: int
    lang: str | None  # adapter bank key (None: bare backbone)

    @property
    def src_len(self) -> int:
        return int(self.src.shape[0])


@dataclass
class Batch:
    src: np.ndarray
    src_len: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    lang: str | None
    size: int


def st_examples(corpus: Corpus, split: str, lang: str, vocab: Vocab, adapter_lang: str | None = "auto") -> list[Example]:
    """Speech-translation examples for one target language.

    ``adapter_lang="auto"`` tags each example with ``lang`` so that any adapter
    bank for that language is used; pass ``None`` for the bare backbone.
    """
    start = vocab.start_id(lang)
    key = lang if adapter_lang == "auto" else adapter_lang
    return [Example(u.frames, tuple(vocab.encode(u.targets[lang])), start, key) for u in corpus.pairs(split, lang)]


def asr_examples(data: PretrainData, vocab: Vocab) -> list[Example]:
    start = vocab.start_id(None)
    return [Example(frames, tuple(vocab.encode(src)), start, None) for frames, src in data.asr]


def denoise_examples(data: PretrainData, src_vocab: Vocab, tgt_vocab: Vocab) -> list[Example]:
    return [
        Example(np.asarray(src_vocab.encode(noisy), dtype=np.int64), tuple(tgt_vocab.encode(clean)), tgt_vocab.start_id(lang), None)
        for noisy, clean, lang in data.denoise
    ]


def collate(examples: list[Example]) -> Batch:
    B = len(examples)
    lens = np.array([e.src_len for e in examples], dtype=np.int64)
    first = examples[0].src
    if first.ndim == 2:
        src = np.zeros((B, lens.max(), first.shape[1]), dtype=np.float32)
    else:
        src = np.full((B, lens.max()), PAD, dtype=np.int64)
    L = max(len(e.target) for e in examples) + 1
    dec_in = np.full((B, L), PAD, dtype=np.int64)
    dec_out = np.full((B, L), PAD, dtype=np.int64)
    for i, e in enumerate(examples):
        src[i, : lens[i]] = e.src
        n = len(e.target)
        dec_in[i, 0] = e.start
        dec_in[i, 1 : n + 1] = e.target
        dec_out[i, :n] = e.target
        dec_out[i, n] = EOS
    langs = {e.lang for e in examples}
    if len(langs) > 1:
        raise ValueError(f"a batch cannot mix adapter languages {sorted(map(str, langs))}")
    return Batch(src, lens, dec_in, dec_out, langs.pop(), B)


def make_batches(examples: list[Example], batch_size: int, rng: np.random.Generator, by_language: bool = True) -> list[list[Example]]:
    """Shuffle, stable-sort by source length, chunk, then shuffle the chunks.

    With ``by_language`` every batch holds a single adapter language.
    """
    groups: dict = {}
    for e in examples:
        groups.setdefault(e.lang if by_language else None, []).append(e)
    batches = []
    for key in sorted(groups, key=lambda k: (k is None, k or "")):
        grp = groups[key]
        order = rng.permutation(len(grp))
        order = sorted(order, key=lambda i: grp[i].src_len)
        for s in range(0, len(order), batch_size):
            batches.append([grp[i] for i in order[s : s + batch_size]])
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]
