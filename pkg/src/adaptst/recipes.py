"""Tuning recipes as freeze plans, parameter accounting, vocabulary specialization, transfer assembly."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .adapters import AdapterSpec, inject
from .model import Model, ModelConfig
from .tensor import Parameter, Tensor
from .vocab import SPECIALS, Vocab

RecipeKind = Literal[
    "adapters-only",
    "full-finetune",
    "decoder-only-finetune",
    "encoder-only-finetune",
    "LNA-E",
    "LNA-D",
    "LNA-ED",
    "xattn-only",
    "xattn-plus-adapters",
    "specialize",
]
BANK_KINDS = ("adapters-only", "xattn-plus-adapters")
EMBED_PATHS = ("decoder/embed_tokens/weight", "decoder/output_projection/weight")

_NORM = re.compile(r"/(self_attn|cross_attn|ffn)_norm/")
_ATTN = re.compile(r"/(self_attn|cross_attn)/")
_XATTN = re.compile(r"/cross_attn/")


class Recipe(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: RecipeKind
    language: str | None = None


@dataclass(frozen=True)
class FreezePlan:
    trainable_paths: frozenset[str]
    frozen_paths: frozenset[str]

    def __post_init__(self) -> None:
        if self.trainable_paths & self.frozen_paths:
            raise ValueError("freeze plan is not a partition")


def _is_bank(path: str) -> bool:
    return "/adapters/" in path


def _lna(path: str, stack: str) -> bool:
    return path.startswith(stack + "/") and not _is_bank(path) and bool(_NORM.search(path) or _ATTN.search(path))


def _xattn(path: str) -> bool:
    return (path.startswith("decoder/") and not _is_bank(path) and bool(_XATTN.search(path))) or path.startswith("bridge/")


def build_freeze_plan(model: Model, recipe: Recipe) -> FreezePlan:
    """Resolve ``recipe`` to the exact set of trainable parameter paths of ``model``."""
    paths = list(model.params)
    kind, lang = recipe.kind, recipe.language
    if lang is not None and kind in BANK_KINDS and lang not in model.banks:
        raise KeyError(f"recipe {kind} needs an adapter bank for {lang!r}")
    if kind in BANK_KINDS and not model.banks:
        raise KeyError(f"recipe {kind} needs injected adapters")
    if kind == "specialize" and lang is not None and model.banks and lang not in model.banks:
        raise KeyError(f"no adapter bank for {lang!r}")

    def bank(p):
        if not _is_bank(p):
            return False
        return lang is None or f"/adapters/{lang}/" in p

    if kind == "adapters-only":
        sel = bank
    elif kind == "full-finetune":
        sel = lambda p: True
    elif kind == "decoder-only-finetune":
        sel = lambda p: p.startswith("decoder/") and not _is_bank(p)
    elif kind == "encoder-only-finetune":
        sel = lambda p: p.startswith("encoder/") and not _is_bank(p)
    elif kind == "LNA-E":
        sel = lambda p: _lna(p, "encoder")
    elif kind == "LNA-D":
        sel = lambda p: _lna(p, "decoder")
    elif kind == "LNA-ED":
        sel = lambda p: _lna(p, "encoder") or _lna(p, "decoder")
    elif kind == "xattn-only":
        sel = _xattn
    elif kind == "xattn-plus-adapters":
        sel = lambda p: _xattn(p) or bank(p)
    elif kind == "specialize":
        sel = bank
    else:  # pragma: no cover - pydantic rejects other kinds
        raise ValueError(f"unknown recipe {kind!r}")
    trainable = {p for p in paths if sel(p)}
    if model.specialized is not None:
        trainable |= set(EMBED_PATHS)
    return FreezePlan(frozenset(trainable), frozenset(p for p in paths if p not in trainable))


def apply_plan(model: Model, plan: FreezePlan) -> None:
    for path, prm in model.params.items():
        prm.trainable = path in plan.trainable_paths


# ---------------------------------------------------------------------------
# parameter accounting


def millions(n: int) -> str:
    """One decimal in millions, rounding half up."""
    return str((Decimal(n) / Decimal(10**6)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _group(path: str) -> str:
    if _is_bank(path):
        return "adapters"
    return path.split("/", 1)[0]


@dataclass
class TrainableReport:
    trainable_count: int
    total_count: int
    groups: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def frozen_count(self) -> int:
        return self.total_count - self.trainable_count

    def fraction(self) -> str:
        return f"{millions(self.trainable_count)}/{millions(self.total_count)}"

    def table(self) -> str:
        rows = [("group", "trainable", "total")]
        rows += [(g, f"{t:,}", f"{n:,}") for g, (t, n) in self.groups.items()]
        rows.append(("all", f"{self.trainable_count:,}", f"{self.total_count:,}"))
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"{r[0]:<{w[0]}}  {r[1]:>{w[1]}}  {r[2]:>{w[2]}}" for r in rows]
        lines.append(f"# params (M) trainable/total: {self.fraction()}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "trainable": self.trainable_count,
            "total": self.total_count,
            "frozen": self.frozen_count,
            "display": self.fraction(),
            "groups": {g: {"trainable": t, "total": n} for g, (t, n) in self.groups.items()},
        }


def trainable_report(model: Model, plan: FreezePlan) -> TrainableReport:
    groups: dict[str, list[int]] = {}
    for path, prm in model.params.items():
        g = groups.setdefault(_group(path), [0, 0])
        g[1] += prm.size
        if path in plan.trainable_paths:
            g[0] += prm.size
    t = sum(v[0] for v in groups.values())
    n = sum(v[1] for v in groups.values())
    return TrainableReport(t, n, {k: (v[0], v[1]) for k, v in groups.items()})


# ---------------------------------------------------------------------------
# structural recipes


def specialize_vocab(model: Model, new_vocab: int | Vocab, language: str, seed: int = 0) -> Model:
    """Copy of ``model`` whose target embedding and output projection are replaced.

    The new matrices have one row (column) per token of the monolingual vocabulary,
    start from a normal with std D^-1/2, and stay trainable under every recipe.
    """
    size = len(new_vocab) if isinstance(new_vocab, Vocab) else int(new_vocab)
    if size < len(SPECIALS):
        raise ValueError(f"new vocabulary of {size} tokens cannot hold the {len(SPECIALS)} special tokens")
    if "decoder/embed_tokens/weight" not in model.params:
        raise ValueError("model has no decoder vocabulary")
    D = model.config.D
    out = model.clone()
    out.config = model.config.model_copy(update={"vocab_size": size})
    out.vocab = new_vocab if isinstance(new_vocab, Vocab) else None
    rng = np.random.default_rng([seed, 7])
    std = D**-0.5
    shapes = {"decoder/embed_tokens/weight": (size, D), "decoder/output_projection/weight": (D, size)}
    for path, shape in shapes.items():
        arr = (rng.standard_normal(shape) * std).astype(out.dtype)
        out.params[path] = Parameter(path, Tensor(arr, requires_grad=True, dtype=out.dtype))
    out.specialized = language
    return out


def _load_checkpoint(ck):
    from .checkpoint import Checkpoint, read_checkpoint

    return ck if isinstance(ck, Checkpoint) else read_checkpoint(ck)


def assemble_transfer(encoder_ckpt, decoder_ckpt, spec: AdapterSpec | None = None, seed: int = 0, task_vocab: Vocab | None = None) -> Model:
    """Glue an ASR-pretrained encoder to a denoising-pretrained decoder.

    Cross-attention projections are freshly initialized; a linear bridge is
    added when the two hidden sizes differ.
    """
    enc_ck = _load_checkpoint(encoder_ckpt)
    dec_ck = _load_checkpoint(decoder_ckpt)
    ec, dc = enc_ck.config, dec_ck.config
    if ec.frontend != "conv":
        raise ValueError("encoder checkpoint must come from a speech (conv front-end) model")
    if ec.n_heads != dc.n_heads or ec.ffn_dim != dc.ffn_dim:
        raise ValueError("encoder and decoder checkpoints must share n_heads and ffn_dim")
    if task_vocab is not None:
        if dec_ck.vocab is None or dec_ck.vocab.tokens != task_vocab.tokens:
            raise ValueError("decoder checkpoint vocabulary does not match the task vocabulary")
    E = ec.encoder_dim
    cfg = ModelConfig(
        D=dc.D,
        ffn_dim=dc.ffn_dim,
        n_heads=dc.n_heads,
        enc_layers=ec.enc_layers,
        dec_layers=dc.dec_layers,
        feat_dim=ec.feat_dim,
        vocab_size=dc.vocab_size,
        max_frames=ec.max_frames,
        dropout=dc.dropout,
        conv_channels=ec.conv_channels,
        conv_kernel=ec.conv_kernel,
        enc_D=None if E == dc.D else E,
    )
    model = Model(cfg, seed=seed, vocab=dec_ck.vocab)
    state = {}
    for path in model.params:
        if path.startswith("encoder/"):
            src = enc_ck.backbone
        elif path.startswith("decoder/") and not _XATTN.search(path):
            src = dec_ck.backbone
        else:
            continue
        if path not in src:
            raise KeyError(f"checkpoint is missing {path}")
        state[path] = src[path]
    model.load_state_dict(state, strict=False)
    if spec is not None:
        inject(model, spec, seed=seed)
    return model


__all__ = [
    "Recipe",
    "FreezePlan",
    "build_freeze_plan",
    "apply_plan",
    "trainable_report",
    "TrainableReport",
    "millions",
    "specialize_vocab",
    "assemble_transfer",
]
