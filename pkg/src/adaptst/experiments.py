"""Toy-scale refinement and transfer experiments built from the library pieces."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict

from .adapters import AdapterSpec, inject
from .batches import Example, asr_examples, denoise_examples, st_examples
from .checkpoint import Checkpoint
from .data import Corpus, CorpusSpec, gen_corpus, pretrain_tasks
from .model import Model, ModelConfig
from .recipes import Recipe, assemble_transfer, build_freeze_plan, trainable_report
from .training import ScheduleConfig, TrainConfig, dev_bleu, grid_search, train
from .vocab import Vocab

log = logging.getLogger(__name__)


def multilingual_examples(corpus: Corpus, split: str, vocab: Vocab, adapters: bool = False) -> list[Example]:
    out: list[Example] = []
    for lang in corpus.languages:
        out += st_examples(corpus, split, lang, vocab, "auto" if adapters else None)
    return out


def train_backbone(corpus: Corpus, model_cfg: dict | None = None, schedule=None, cfg=None, seed: int = 0) -> Model:
    vocab = corpus.vocab()
    model = Model(ModelConfig(vocab_size=len(vocab), feat_dim=corpus.spec.feat_dim, **(model_cfg or {})), seed=seed, vocab=vocab)
    plan = build_freeze_plan(model, Recipe(kind="full-finetune"))
    train(
        model,
        plan,
        multilingual_examples(corpus, "train", vocab),
        multilingual_examples(corpus, "dev", vocab),
        schedule or ScheduleConfig(),
        cfg or TrainConfig(max_steps=3000, eval_every=500, seed=seed),
    )
    return model


def language_bleu(model: Model, corpus: Corpus, lang: str, split: str = "dev", use_adapters: bool = True) -> float:
    ex = st_examples(corpus, split, lang, model.vocab, "auto" if use_adapters and lang in model.banks else None)
    return dev_bleu(model, ex)


class RefinementSetup(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    corpus: CorpusSpec = CorpusSpec(n_train=2000, n_dev=60, n_test=30)
    model: dict = {}
    backbone_steps: int = 18000
    backbone_eval_every: int = 1000
    adapter_d: int = 8
    tune_steps: int = 1500
    eval_every: int = 100
    select_by: Literal["loss", "bleu", "last"] = "bleu"
    adapter_eta: float = 2e-3
    # full grid (2e-3, 2e-4, 2e-5) does not fit the CPU budget; 2e-4 won offline probes
    finetune_etas: tuple[float, ...] = (2e-4,)
    warmup_steps: int = 200
    seed: int = 0


@dataclass
class RefinementResult:
    baseline: dict[str, float] = field(default_factory=dict)
    adapters: dict[str, float] = field(default_factory=dict)
    finetune: dict[str, float] = field(default_factory=dict)
    finetune_eta: dict[str, float] = field(default_factory=dict)
    adapter_trainable: int = 0
    finetune_trainable: int = 0

    @staticmethod
    def _mean(d):
        return float(np.mean(list(d.values())))

    def summary(self) -> dict:
        return {
            "baseline_mean": self._mean(self.baseline),
            "adapters_mean": self._mean(self.adapters),
            "finetune_mean": self._mean(self.finetune),
            "adapter_trainable": self.adapter_trainable,
            "finetune_trainable": self.finetune_trainable,
            "per_language": {
                l: {"baseline": self.baseline[l], "adapters": self.adapters[l], "finetune": self.finetune[l]}
                for l in self.baseline
            },
        }


def run_refinement(setup: RefinementSetup = RefinementSetup()) -> RefinementResult:
    """Multilingual backbone, then per-language adapters versus per-language full fine-tuning."""
    corpus = gen_corpus(setup.corpus)
    backbone = train_backbone(
        corpus,
        setup.model,
        ScheduleConfig(warmup_steps=setup.warmup_steps),
        TrainConfig(
            max_steps=setup.backbone_steps, eval_every=setup.backbone_eval_every, seed=setup.seed, select_by=setup.select_by
        ),
        setup.seed,
    )
    res = RefinementResult()
    tune = TrainConfig(max_steps=setup.tune_steps, eval_every=setup.eval_every, seed=setup.seed, select_by=setup.select_by)
    vocab = backbone.vocab
    for lang in corpus.languages:
        res.baseline[lang] = language_bleu(backbone, corpus, lang, use_adapters=False)

        adapted = backbone.clone()
        inject(adapted, AdapterSpec(d=setup.adapter_d, languages=[lang]), seed=setup.seed)
        plan = build_freeze_plan(adapted, Recipe(kind="adapters-only", language=lang))
        res.adapter_trainable = trainable_report(adapted, plan).trainable_count
        train(
            adapted,
            plan,
            st_examples(corpus, "train", lang, vocab),
            st_examples(corpus, "dev", lang, vocab),
            ScheduleConfig(eta_max=setup.adapter_eta, warmup_steps=setup.warmup_steps),
            tune,
        )
        res.adapters[lang] = language_bleu(adapted, corpus, lang)

        tr = st_examples(corpus, "train", lang, vocab, None)
        dv = st_examples(corpus, "dev", lang, vocab, None)
        models = {}

        def run(eta):
            m = backbone.clone()
            models[eta] = m
            p = build_freeze_plan(m, Recipe(kind="full-finetune", language=lang))
            res.finetune_trainable = trainable_report(m, p).trainable_count
            return train(m, p, tr, dv, ScheduleConfig(eta_max=eta, warmup_steps=setup.warmup_steps), tune)

        best, _ = grid_search(run, setup.finetune_etas)
        res.finetune_eta[lang] = best
        res.finetune[lang] = language_bleu(models[best], corpus, lang, use_adapters=False)
        log.info("%s baseline %.1f adapters %.1f finetune %.1f", lang, res.baseline[lang], res.adapters[lang], res.finetune[lang])
    return res


# ---------------------------------------------------------------------------
# transfer


class TransferSetup(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    corpus: CorpusSpec = CorpusSpec(n_train=2000, n_dev=60, n_test=30)
    model: dict = {}
    asr_steps: int = 1500
    denoise_steps: int = 1500
    st_steps: int = 1000
    adapter_d: int = 32
    st_language: str = "es"
    adapters_in_encoder: bool = False
    eta: float = 2e-3
    warmup_steps: int = 200
    seed: int = 0


@dataclass
class TransferResult:
    asr_dev_loss: float = 0.0
    asr_reload_dev_loss: float = 0.0
    bleu_xattn_adapters: float = 0.0
    bleu_adapters_only: float = 0.0
    loss_xattn_adapters: float = 0.0
    loss_adapters_only: float = 0.0
    trainable: dict[str, int] = field(default_factory=dict)


def _ckpt(model: Model) -> Checkpoint:
    return Checkpoint(model.config, model.vocab, model.state_dict(model.backbone_paths()))


def pretrain_asr(corpus: Corpus, model_cfg: dict, steps: int, seed: int = 0, warmup: int = 200):
    vocab = Vocab.monolingual()
    data = pretrain_tasks(corpus, "train", seed=seed)
    dev = pretrain_tasks(corpus, "dev", seed=seed)
    model = Model(ModelConfig(vocab_size=len(vocab), feat_dim=corpus.spec.feat_dim, **model_cfg), seed=seed, vocab=vocab)
    res = train(
        model,
        build_freeze_plan(model, Recipe(kind="full-finetune")),
        asr_examples(data, vocab),
        asr_examples(dev, vocab),
        ScheduleConfig(warmup_steps=warmup),
        TrainConfig(max_steps=steps, eval_every=250, seed=seed),
    )
    return model, res, asr_examples(dev, vocab)


def pretrain_denoise(corpus: Corpus, model_cfg: dict, steps: int, seed: int = 0, warmup: int = 200):
    tgt_vocab = corpus.vocab()
    src_vocab = tgt_vocab
    data = pretrain_tasks(corpus, "train", seed=seed)
    dev = pretrain_tasks(corpus, "dev", seed=seed)
    cfg = ModelConfig(
        vocab_size=len(tgt_vocab),
        feat_dim=corpus.spec.feat_dim,
        frontend="embed",
        src_vocab_size=len(src_vocab),
        **model_cfg,
    )
    model = Model(cfg, seed=seed + 1, vocab=tgt_vocab)
    res = train(
        model,
        build_freeze_plan(model, Recipe(kind="full-finetune")),
        denoise_examples(data, src_vocab, tgt_vocab),
        denoise_examples(dev, src_vocab, tgt_vocab),
        ScheduleConfig(warmup_steps=warmup),
        TrainConfig(max_steps=steps, eval_every=250, seed=seed),
    )
    return model, res


def run_transfer(setup: TransferSetup = TransferSetup()) -> TransferResult:
    """ASR encoder + denoising decoder, tuned with and without cross-attention."""
    from .training import dev_loss

    corpus = gen_corpus(setup.corpus)
    out = TransferResult()
    asr, asr_res, asr_dev = pretrain_asr(corpus, setup.model, setup.asr_steps, setup.seed, setup.warmup_steps)
    out.asr_dev_loss = asr_res.best_dev_loss
    den, _ = pretrain_denoise(corpus, setup.model, setup.denoise_steps, setup.seed, setup.warmup_steps)
    enc_ck, dec_ck = _ckpt(asr), _ckpt(den)

    lang = setup.st_language
    vocab = den.vocab
    tr = st_examples(corpus, "train", lang, vocab)
    dv = st_examples(corpus, "dev", lang, vocab)
    spec = AdapterSpec(d=setup.adapter_d, apply_to_encoder=setup.adapters_in_encoder, languages=[lang])
    tune = TrainConfig(max_steps=setup.st_steps, eval_every=100, seed=setup.seed)
    sched = ScheduleConfig(eta_max=setup.eta, warmup_steps=setup.warmup_steps)
    for kind in ("xattn-plus-adapters", "adapters-only"):
        model = assemble_transfer(enc_ck, dec_ck, spec, seed=setup.seed, task_vocab=vocab)
        plan = build_freeze_plan(model, Recipe(kind=kind, language=lang))
        out.trainable[kind] = trainable_report(model, plan).trainable_count
        res = train(model, plan, tr, dv, sched, tune)
        bleu = language_bleu(model, corpus, lang)
        if kind == "xattn-plus-adapters":
            out.bleu_xattn_adapters, out.loss_xattn_adapters = bleu, res.best_dev_loss
            # the assembled encoder is the ASR encoder: re-attach the ASR decoder and re-score
            probe = asr.clone()
            probe.load_state_dict({p: model.params[p].data for p in model.backbone_paths() if p.startswith("encoder/")}, strict=False)
            out.asr_reload_dev_loss = dev_loss(probe, asr_dev)
        else:
            out.bleu_adapters_only, out.loss_adapters_only = bleu, res.best_dev_loss
    return out
