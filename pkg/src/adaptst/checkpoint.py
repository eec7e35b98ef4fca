"""On-disk checkpoints: a JSON manifest plus a raw little-endian float32 payload.

A checkpoint directory holds ``backbone.json``/``backbone.bin`` and one
``adapters.<lang>.json``/``adapters.<lang>.bin`` pair per language bank.
Manifest entries list ``path``, ``shape``, ``dtype`` and byte ``offset`` in
payload order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AdapterSpec, inject
from .model import Model, ModelConfig
from .vocab import Vocab

FORMAT = "adaptst-ckpt/1"


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _file(stem: Path, ext: str) -> Path:
    # not with_suffix: "adapters.es" would lose its language key
    return stem.parent / (stem.name + ext)


def write_tensors(stem: Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    offset = 0
    with open(_file(stem, ".bin"), "wb") as fh:
        for path, arr in arrays.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"path": path, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
            fh.write(buf)
            offset += len(buf)
    manifest = dict(meta, format=FORMAT, tensors=entries)
    _file(stem, ".json").write_text(_dumps(manifest), encoding="utf-8")


def read_tensors(stem: Path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest = json.loads(_file(stem, ".json").read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{stem}: unsupported checkpoint format {manifest.get('format')!r}")
    payload = _file(stem, ".bin").read_bytes()
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["path"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return manifest, arrays


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocab | None
    backbone: dict[str, np.ndarray]
    banks: dict[str, tuple[AdapterSpec, dict[str, np.ndarray]]] = field(default_factory=dict)
    specialized: str | None = None


def save_checkpoint(model: Model, directory, backbone: bool = True, languages=None) -> Path:
    """Write the backbone and/or the listed language banks (default: all) to ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if backbone:
        meta = {
            "kind": "backbone",
            "config": model.config.model_dump(mode="json"),
            "vocab": model.vocab.to_dict() if model.vocab is not None else None,
            "specialized": getattr(model, "specialized", None),
        }
        write_tensors(d / "backbone", model.state_dict(model.backbone_paths()), meta)
    langs = list(model.banks) if languages is None else list(languages)
    for lang in langs:
        bank = model.banks[lang]
        spec = model.adapter_spec.model_copy(update={"languages": [lang]})
        meta = {"kind": "adapters", "language": lang, "spec": spec.model_dump(mode="json")}
        write_tensors(d / f"adapters.{lang}", model.state_dict(bank.paths()), meta)
    return d


def read_checkpoint(directory, languages=None) -> Checkpoint:
    d = Path(directory)
    if not (d / "backbone.json").is_file():
        raise FileNotFoundError(f"{d}: no backbone.json")
    manifest, arrays = read_tensors(d / "backbone")
    vocab = Vocab.from_dict(manifest["vocab"]) if manifest.get("vocab") else None
    ck = Checkpoint(ModelConfig.model_validate(manifest["config"]), vocab, arrays, specialized=manifest.get("specialized"))
    for f in sorted(d.glob("adapters.*.json")):
        lang = f.name[len("adapters.") : -len(".json")]
        if languages is not None and lang not in languages:
            continue
        m, a = read_tensors(f.parent / f.name[: -len(".json")])
        ck.banks[lang] = (AdapterSpec.model_validate(m["spec"]), a)
    if languages is not None:
        missing = [l for l in languages if l not in ck.banks]
        if missing:
            raise FileNotFoundError(f"{d}: no adapter bank for {missing}")
    return ck


def model_from_checkpoint(ck: Checkpoint) -> Model:
    model = Model(ck.config, seed=None, vocab=ck.vocab)
    model.specialized = ck.specialized
    model.load_state_dict(ck.backbone)
    for lang, (spec, arrays) in ck.banks.items():
        inject(model, spec)
        model.load_state_dict(arrays, strict=False)
    return model


def load_checkpoint(directory, languages=None) -> Model:
    return model_from_checkpoint(read_checkpoint(directory, languages))


def add_banks(model: Model, directory, languages=None) -> Model:
    """Inject and load adapter banks stored in ``directory`` into an existing model."""
    d = Path(directory)
    for f in sorted(d.glob("adapters.*.json")):
        lang = f.name[len("adapters.") : -len(".json")]
        if languages is not None and lang not in languages:
            continue
        m, arrays = read_tensors(f.parent / f.name[: -len(".json")])
        inject(model, AdapterSpec.model_validate(m["spec"]))
        model.load_state_dict(arrays, strict=False)
    return model
