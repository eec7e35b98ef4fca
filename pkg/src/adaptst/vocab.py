"""Closed toy vocabularies: shared specials, optional per-language start tags."""

from __future__ import annotations

import string
from dataclasses import dataclass

PAD, EOS, BOS, MASK = 0, 1, 2, 3
SPECIALS = ("<pad>", "</s>", "<s>", "<mask>")
SYMBOLS = tuple(string.ascii_lowercase + "0123")


def lang_tag(lang: str) -> str:
    return f"<2{lang}>"


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    languages: tuple[str, ...] = ()

    @classmethod
    def multilingual(cls, languages, symbols=SYMBOLS) -> "Vocab":
        languages = tuple(languages)
        return cls(SPECIALS + tuple(lang_tag(l) for l in languages) + tuple(symbols), languages)

    @classmethod
    def monolingual(cls, symbols=SYMBOLS) -> "Vocab":
        return cls(SPECIALS + tuple(symbols))

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_special(self) -> int:
        return len(SPECIALS) + len(self.languages)

    def start_id(self, lang: str | None) -> int:
        if not self.languages:
            return BOS
        if lang not in self.languages:
            raise KeyError(f"no start tag for language {lang!r}")
        return self._index[lang_tag(lang)]

    def encode(self, toks) -> list[int]:
        try:
            return [self._index[t] for t in toks]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "languages": list(self.languages)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tuple(d["tokens"]), tuple(d.get("languages", ())))
