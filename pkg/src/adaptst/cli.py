"""Command-line experiment runner.

Subcommands: ``gen-data``, ``pretrain``, ``train``, ``eval``, ``count-params``, ``compare``.
Data goes to stdout, diagnostics to stderr.  Every artifact lands under the
output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .adapters import AdapterSpec, inject
from .batches import asr_examples, denoise_examples, st_examples
from .checkpoint import add_banks, load_checkpoint, save_checkpoint
from .data import CorpusSpec, gen_corpus, load_corpus, pretrain_tasks, read_lines, save_corpus
from .evaluation import bleu_of, paired_bootstrap, star
from .model import Model, ModelConfig
from .recipes import Recipe, assemble_transfer, build_freeze_plan, millions, specialize_vocab, trainable_report
from .training import NonFiniteLossError, ScheduleConfig, TrainConfig, decode_examples, dev_bleu, grid_search, train
from .vocab import Vocab

log = logging.getLogger("adaptst")


class ConfigError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# experiment config


class DataSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    path: str | None = None
    generate: CorpusSpec | None = None

    @model_validator(mode="after")
    def _one(self) -> "DataSection":
        if (self.path is None) == (self.generate is None):
            raise ValueError("data needs exactly one of 'path' or 'generate'")
        return self


class InitSection(BaseModel):
    """Where the starting weights come from (nothing: random init)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    backbone: str | None = None
    encoder: str | None = None
    decoder: str | None = None

    @model_validator(mode="after")
    def _check(self) -> "InitSection":
        if (self.encoder is None) != (self.decoder is None):
            raise ValueError("transfer init needs both 'encoder' and 'decoder'")
        if self.backbone is not None and self.encoder is not None:
            raise ValueError("give either 'backbone' or 'encoder'/'decoder', not both")
        return self


class AdapterSection(BaseModel):
    """Adapter cell settings; the language list defaults to the languages being trained."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    d: int
    placement: Literal["serial-FFN", "par-TL", "par-SA", "par-XA"] = "serial-FFN"
    h: int | None = None
    apply_to_encoder: bool = True
    apply_to_decoder: bool = True
    languages: list[str] = []

    @model_validator(mode="after")
    def _check(self) -> "AdapterSection":
        self.spec(self.languages or ["xx"])
        return self

    def spec(self, languages) -> AdapterSpec:
        return AdapterSpec(**dict(self.model_dump(), languages=list(languages)))


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    task: Literal["st", "asr", "denoise"] = "st"
    model: dict[str, Any] = {}
    adapter: AdapterSection | None = None
    recipe: Recipe = Recipe(kind="full-finetune")
    schedule: ScheduleConfig = ScheduleConfig()
    train: TrainConfig = TrainConfig()
    data: DataSection | None = None
    init: InitSection = InitSection()
    languages: list[str] | None = None
    mode: Literal["joint", "per-language"] = "joint"
    lr_grid: list[float] | None = None
    n_languages: int = 8
    specialize_vocab_size: int = 8000
    seed: int = 0
    output_dir: str = "runs/default"

    @field_validator("model")
    @classmethod
    def _model(cls, v: dict) -> dict:
        # surface model field errors at parse time; vocab_size is resolved later
        ModelConfig(**{"vocab_size": 8, **v})
        return v

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if self.recipe.kind in ("adapters-only", "xattn-plus-adapters") and self.adapter is None and self.init.backbone is None:
            raise ValueError(f"recipe {self.recipe.kind} needs an 'adapter' section")
        if self.recipe.kind in ("xattn-only", "xattn-plus-adapters") and self.init.encoder is None:
            raise ValueError(f"recipe {self.recipe.kind} needs init.encoder and init.decoder")
        if self.lr_grid is not None and self.recipe.kind in ("adapters-only",):
            raise ValueError("adapter recipes use a fixed peak rate; drop 'lr_grid'")
        return self

    def check_paths(self) -> None:
        for name in ("backbone", "encoder", "decoder"):
            p = getattr(self.init, name)
            if p is not None and not (Path(p) / "backbone.json").is_file():
                raise ConfigError(f"init.{name}: no checkpoint at {p}")
        if self.data is not None and self.data.path is not None and not (Path(self.data.path) / "manifest.json").is_file():
            raise ConfigError(f"data.path: no corpus at {self.data.path}")


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        lines = [f"{path}: invalid config"]
        for err in e.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "<root>"
            lines.append(f"  {loc}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from e


# ---------------------------------------------------------------------------
# helpers


def _corpus(cfg: ExperimentConfig):
    if cfg.data is None:
        raise ConfigError("this command needs a 'data' section")
    if cfg.data.path is not None:
        return load_corpus(cfg.data.path)
    return gen_corpus(cfg.data.generate)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _backbone_hash(directory) -> dict[str, str]:
    d = Path(directory)
    return {f: _sha256(d / f) for f in ("backbone.json", "backbone.bin")}


def _start_model(cfg: ExperimentConfig, vocab: Vocab, feat_dim: int, lang: str | None, langs: list[str]) -> Model:
    init = cfg.init
    bank_langs = [lang] if lang else (cfg.adapter.languages or langs if cfg.adapter else [])
    if init.encoder is not None:
        spec = cfg.adapter.spec(bank_langs) if cfg.adapter else None
        return assemble_transfer(init.encoder, init.decoder, spec, seed=cfg.seed, task_vocab=vocab)
    if init.backbone is not None:
        model = load_checkpoint(init.backbone, languages=[])
    else:
        mc = dict(cfg.model)
        mc.setdefault("feat_dim", feat_dim)
        if cfg.task == "denoise":
            mc.update(frontend="embed", src_vocab_size=len(vocab))
        model = Model(ModelConfig(vocab_size=len(vocab), **mc), seed=cfg.seed, vocab=vocab)
    if cfg.recipe.kind == "specialize":
        model = specialize_vocab(model, Vocab.monolingual(), lang, seed=cfg.seed)
    if cfg.adapter is not None:
        inject(model, cfg.adapter.spec(bank_langs), seed=cfg.seed)
    return model


def _vocab_for(cfg: ExperimentConfig, corpus, lang: str | None) -> Vocab:
    if cfg.task == "asr":
        return Vocab.monolingual()
    if cfg.recipe.kind == "specialize":
        return Vocab.monolingual()
    if cfg.init.backbone is not None:
        ck_vocab = load_checkpoint(cfg.init.backbone, languages=[]).vocab
        if ck_vocab is not None:
            return ck_vocab
    return corpus.vocab()


def _examples(cfg: ExperimentConfig, corpus, split: str, langs: list[str], vocab: Vocab, use_banks: bool):
    if cfg.task == "asr":
        return asr_examples(pretrain_tasks(corpus, split, seed=cfg.seed), vocab)
    if cfg.task == "denoise":
        return denoise_examples(pretrain_tasks(corpus, split, seed=cfg.seed), vocab, vocab)
    out = []
    for lang in langs:
        out += st_examples(corpus, split, lang, vocab, "auto" if use_banks else None)
    return out


def _run_one(cfg: ExperimentConfig, corpus, langs: list[str], lang_key: str | None, out_dir: Path) -> dict:
    """Train one model (joint: all ``langs``; per-language: ``lang_key``)."""
    vocab = _vocab_for(cfg, corpus, lang_key)
    use_banks = cfg.adapter is not None

    def fresh():
        return _start_model(cfg, vocab, corpus.spec.feat_dim, lang_key, langs)

    tr = _examples(cfg, corpus, "train", langs, vocab, use_banks)
    dv = _examples(cfg, corpus, "dev", langs, vocab, use_banks)
    recipe = cfg.recipe.model_copy(update={"language": lang_key}) if lang_key else cfg.recipe
    tcfg = cfg.train.model_copy(update={"seed": cfg.seed})
    models: dict[float, Model] = {}

    def run(eta: float):
        m = fresh()
        models[eta] = m
        plan = build_freeze_plan(m, recipe)
        return train(m, plan, tr, dv, cfg.schedule.model_copy(update={"eta_max": eta}), tcfg, out_dir / f"train.{eta:g}.jsonl")

    etas = cfg.lr_grid or [cfg.schedule.eta_max]
    best_eta, results = grid_search(run, etas)
    model = models[best_eta]
    res = results[best_eta]
    plan = build_freeze_plan(model, recipe)
    report = {
        "eta_max": best_eta,
        "best_step": res.best_step,
        "best_dev_loss": res.best_dev_loss,
        "steps": res.steps,
        "params": trainable_report(model, plan).to_dict(),
        "dev_bleu": {},
    }
    if cfg.task == "st":
        for lang in langs:
            ex = _examples(cfg, corpus, "dev", [lang], vocab, use_banks)
            report["dev_bleu"][lang] = dev_bleu(model, ex, tcfg.max_decode_len)
    report["_model"] = model
    return report


def cmd_train(cfg: ExperimentConfig, allowed_tasks=("st",)) -> int:
    if cfg.task not in allowed_tasks:
        raise ConfigError(f"task {cfg.task!r} is not handled by this subcommand (expected {allowed_tasks})")
    cfg.check_paths()
    t0 = time.perf_counter()
    corpus = _corpus(cfg)
    langs = cfg.languages or corpus.languages
    for l in langs:
        corpus.language(l)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dumps(cfg.model_dump(mode="json")), encoding="utf-8")
    before = _backbone_hash(cfg.init.backbone) if cfg.init.backbone else None
    report: dict = {"recipe": cfg.recipe.kind, "task": cfg.task, "seed": cfg.seed, "runs": {}}
    shared = cfg.recipe.kind == "adapters-only" and cfg.init.backbone is not None

    units = [(l, [l]) for l in langs] if cfg.mode == "per-language" else [(None, langs)]
    for key, unit_langs in units:
        name = key or "all"
        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        r = _run_one(cfg, corpus, unit_langs, key, run_dir)
        model = r.pop("_model")
        if shared:
            # only the bank is new; the backbone stays where it is
            save_checkpoint(model, out / "checkpoint", backbone=False, languages=[key] if key else None)
        else:
            save_checkpoint(model, run_dir / "checkpoint")
        report["runs"][name] = r
        log.info("%s: %s", name, {k: round(v, 2) for k, v in r["dev_bleu"].items()})
    if shared:
        (out / "checkpoint" / "base.json").write_text(
            _dumps({"backbone": os.path.abspath(cfg.init.backbone), "sha256": before}), encoding="utf-8"
        )
    if before is not None and _backbone_hash(cfg.init.backbone) != before:
        raise RuntimeError("backbone checkpoint changed during training")
    bleu = {l: v for r in report["runs"].values() for l, v in r["dev_bleu"].items()}
    report["dev_bleu"] = bleu
    if bleu:
        report["mean_dev_bleu"] = sum(bleu.values()) / len(bleu)
    (out / "report.json").write_text(_dumps(report), encoding="utf-8")
    (out / "timing.json").write_text(_dumps({"wall_seconds": time.perf_counter() - t0}), encoding="utf-8")
    print(_dumps({k: report[k] for k in ("recipe", "dev_bleu") if k in report}), end="")
    return 0


def resolve_checkpoint(directory, languages=None) -> Model:
    """Load a checkpoint directory, following ``base.json`` to a shared backbone."""
    d = Path(directory)
    base = d / "base.json"
    if (d / "backbone.json").is_file():
        return load_checkpoint(d, languages)
    if not base.is_file():
        raise FileNotFoundError(f"{d}: neither backbone.json nor base.json")
    ref = json.loads(base.read_text(encoding="utf-8"))
    if _backbone_hash(ref["backbone"]) != ref["sha256"]:
        raise ValueError(f"{ref['backbone']}: backbone differs from the one the adapters were trained on")
    model = load_checkpoint(ref["backbone"], languages=[])
    return add_banks(model, d, languages)


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    langs = _split_langs(args.languages) or corpus.languages
    model = resolve_checkpoint(args.checkpoint)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = model.vocab
    if vocab is None:
        raise ValueError("checkpoint carries no vocabulary")
    result = {"split": args.split, "bleu": {}}
    for lang in langs:
        corpus.language(lang)
        if model.banks and lang not in model.banks:
            raise KeyError(f"checkpoint has adapter banks {sorted(model.banks)} but none for {lang!r}")
        ex = st_examples(corpus, args.split, lang, vocab, "auto" if lang in model.banks else None)
        hyps = decode_examples(model, ex, args.max_len)
        text = [" ".join(vocab.decode(h)) for h in hyps]
        (out / f"hyp.{args.split}.{lang}.txt").write_text("".join(t + "\n" for t in text), encoding="utf-8")
        result["bleu"][lang] = bleu_of(hyps, [e.target for e in ex])
    (out / f"bleu.{args.split}.json").write_text(_dumps(result), encoding="utf-8")
    if args.json:
        print(_dumps(result), end="")
    else:
        for lang, b in result["bleu"].items():
            print(f"{lang}\t{b:.2f}")
    return 0


def count_lines(cfg: ExperimentConfig, n_languages: int) -> dict:
    """Trainable/total accounting for one language plus the N-language display."""
    vocab_size = cfg.model.get("vocab_size")
    if vocab_size is None:
        raise ConfigError("count-params needs model.vocab_size")
    model = Model(ModelConfig(**cfg.model), seed=None)
    lang = "xx"
    if cfg.recipe.kind == "specialize":
        model = specialize_vocab(model, cfg.specialize_vocab_size, lang, seed=0)
    if cfg.adapter is not None:
        inject(model, cfg.adapter.spec([lang]), seed=0)
    recipe = cfg.recipe.model_copy(update={"language": lang if model.banks else None})
    rep = trainable_report(model, build_freeze_plan(model, recipe))
    N = n_languages
    pre = f"{N}×" if N > 1 else ""
    shared = cfg.recipe.kind in ("adapters-only",)
    if shared:
        bank = sum(model.params[p].size for p in model.bank_paths(lang))
        total = rep.total_count - bank + N * bank
        display = f"{pre}{millions(rep.trainable_count)}/{millions(total)}"
    else:
        total = N * rep.total_count
        display = f"{pre}{millions(rep.trainable_count)}/{pre}{millions(rep.total_count)}"
    return {
        "recipe": cfg.recipe.kind,
        "n_languages": N,
        "shared_backbone": shared,
        "trainable_per_language": rep.trainable_count,
        "total_per_model": rep.total_count,
        "total_all_languages": total,
        "display": display,
    }


def cmd_count(cfg: ExperimentConfig, n_languages: int | None, as_json: bool) -> int:
    out = count_lines(cfg, n_languages or cfg.n_languages)
    if as_json:
        print(_dumps(out), end="")
    else:
        print(
            f"{out['display']}\ttrainable={out['trainable_per_language']}\t"
            f"total={out['total_all_languages']}\tper_model={out['total_per_model']}"
        )
    return 0


def cmd_compare(args) -> int:
    a, b, r = read_lines(args.hyp_a), read_lines(args.hyp_b), read_lines(args.refs)
    if not (len(a) == len(b) == len(r)):
        raise ValueError(f"line counts differ: {len(a)}, {len(b)}, {len(r)}")
    rep = paired_bootstrap(a, b, r, n_resamples=args.n_resamples, seed=args.seed)
    if args.json:
        print(_dumps(dict(rep.to_dict(), star=star(rep))), end="")
    else:
        print(f"bleu_a={rep.bleu_a:.2f}\tbleu_b={rep.bleu_b:.2f}\tdelta={rep.delta:+.2f}\tp={rep.p_value:.4f}\t{star(rep)}".rstrip())
    return 0


def cmd_gen_data(args) -> int:
    spec = CorpusSpec()
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if "data" in raw:
            raw = (raw["data"] or {}).get("generate") or {}
        spec = CorpusSpec.model_validate(raw)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    corpus = gen_corpus(spec)
    out = save_corpus(corpus, args.output_dir)
    print(_dumps({"output_dir": str(out), "train_sizes": corpus.train_sizes, "splits": {k: len(v) for k, v in corpus.splits.items()}}), end="")
    return 0


def _split_langs(s: str | None) -> list[str] | None:
    return [x for x in s.split(",") if x] if s else None


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptst", description="Adapter tuning experiments on toy speech translation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def exp(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--output-dir")
        s.add_argument("--languages", help="comma-separated subset of corpus languages")
        return s

    exp("train", "train a speech-translation model or adapters")
    exp("pretrain", "train an ASR encoder-decoder or a denoising decoder")

    s = sub.add_parser("count-params", help="trainable/total parameter accounting")
    s.add_argument("--config", required=True)
    s.add_argument("--languages", type=int, help="number of language pairs N")
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("eval", help="greedy-decode a split and score it")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="dev")
    s.add_argument("--languages")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--max-len", type=int, default=24)
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("compare", help="paired bootstrap significance test")
    s.add_argument("hyp_a")
    s.add_argument("hyp_b")
    s.add_argument("refs")
    s.add_argument("--n-resamples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("gen-data", help="write a synthetic corpus")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--output-dir", required=True)
    return p


def _thread_limit():
    n = os.environ.get("ADAPTST_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            if args.cmd in ("train", "pretrain"):
                cfg = load_config(args.config, args.seed, args.output_dir)
                langs = _split_langs(args.languages)
                if langs:
                    cfg = cfg.model_copy(update={"languages": langs})
                tasks = ("st",) if args.cmd == "train" else ("asr", "denoise")
                return cmd_train(cfg, tasks)
            if args.cmd == "count-params":
                return cmd_count(load_config(args.config), args.languages, args.json)
            if args.cmd == "eval":
                return cmd_eval(args)
            if args.cmd == "compare":
                return cmd_compare(args)
            if args.cmd == "gen-data":
                return cmd_gen_data(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NonFiniteLossError as e:
        print(f"error: {e}; partial artifacts kept", file=sys.stderr)
        return 3
    except (OSError, KeyError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 1  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
