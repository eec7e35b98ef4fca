import json

import numpy as np
import pytest

from adaptst.adapters import AdapterSpec, inject
from adaptst.checkpoint import add_banks, load_checkpoint, read_checkpoint, save_checkpoint
from adaptst.model import Model, ModelConfig
from adaptst.recipes import specialize_vocab
from adaptst.vocab import Vocab

TOY = dict(D=16, ffn_dim=32, n_heads=2, enc_layers=2, dec_layers=2, feat_dim=6, conv_channels=8)


def model_with_banks(seed=0):
    v = Vocab.multilingual(["de", "es"])
    m = Model(ModelConfig(vocab_size=len(v), **TOY), seed=seed, vocab=v)
    inject(m, AdapterSpec(d=4, languages=["de", "es"], placement="par-TL", h=2), seed=seed)
    for p in m.bank_paths():
        m.params[p].data[...] = np.random.default_rng(seed).standard_normal(m.params[p].shape)
    return m


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_save_load_save_byte_identical(tmp_path):
    m = model_with_banks()
    a = files(save_checkpoint(m, tmp_path / "a"))
    assert set(a) == {"backbone.json", "backbone.bin", "adapters.de.json", "adapters.de.bin", "adapters.es.json", "adapters.es.bin"}
    b = files(save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b"))
    assert a == b


def test_round_trip_preserves_values_and_outputs(tmp_path):
    m = model_with_banks()
    save_checkpoint(m, tmp_path)
    r = load_checkpoint(tmp_path)
    assert set(r.params) == set(m.params) and r.vocab == m.vocab
    for p in m.params:
        assert r.params[p].data.tobytes() == m.params[p].data.tobytes()
    frames = np.random.default_rng(0).standard_normal((1, 12, 6)).astype(np.float32)
    start = m.vocab.start_id("de")
    for lang in ("de", "es", None):
        assert r.greedy_decode(frames, None, lang, 5, start) == m.greedy_decode(frames, None, lang, 5, start)


def test_manifest_layout(tmp_path):
    m = model_with_banks()
    save_checkpoint(m, tmp_path)
    man = json.loads((tmp_path / "backbone.json").read_text())
    offsets = [e["offset"] for e in man["tensors"]]
    sizes = [4 * int(np.prod(e["shape"])) for e in man["tensors"]]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))
    assert (tmp_path / "backbone.bin").stat().st_size == sum(sizes)
    assert all(e["dtype"] == "float32" for e in man["tensors"])
    raw = np.fromfile(tmp_path / "backbone.bin", dtype="<f4", count=sizes[0] // 4)
    assert raw.tobytes() == m.params[man["tensors"][0]["path"]].data.astype("<f4").tobytes()
    bank = json.loads((tmp_path / "adapters.de.json").read_text())
    assert bank["language"] == "de" and bank["spec"]["languages"] == ["de"]
    assert all("/adapters/de/" in e["path"] for e in bank["tensors"])


def test_language_subset_and_missing_bank(tmp_path):
    save_checkpoint(model_with_banks(), tmp_path)
    assert set(read_checkpoint(tmp_path, ["de"]).banks) == {"de"}
    assert read_checkpoint(tmp_path, []).banks == {}
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path, ["pt"])
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "nope")


def test_bank_only_save_and_add_banks(tmp_path):
    m = model_with_banks()
    save_checkpoint(m, tmp_path / "base", languages=[])
    save_checkpoint(m, tmp_path / "banks", backbone=False, languages=["es"])
    assert sorted(p.name for p in (tmp_path / "banks").iterdir()) == ["adapters.es.bin", "adapters.es.json"]
    r = add_banks(load_checkpoint(tmp_path / "base"), tmp_path / "banks")
    assert set(r.banks) == {"es"}
    for p in m.bank_paths("es"):
        assert r.params[p].data.tobytes() == m.params[p].data.tobytes()


def test_specialized_flag_survives(tmp_path):
    v = Vocab.multilingual(["de"])
    m = specialize_vocab(Model(ModelConfig(vocab_size=len(v), **TOY), seed=0, vocab=v), Vocab.monolingual(), "de")
    save_checkpoint(m, tmp_path)
    r = load_checkpoint(tmp_path)
    assert r.specialized == "de" and r.vocab == Vocab.monolingual()


def test_bad_format_rejected(tmp_path):
    save_checkpoint(model_with_banks(), tmp_path)
    man = json.loads((tmp_path / "backbone.json").read_text())
    man["format"] = "other/9"
    (tmp_path / "backbone.json").write_text(json.dumps(man))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)
