import numpy as np
import pytest

from adaptst.adapters import AdapterSpec, adapter_param_count, inject
from adaptst.checkpoint import Checkpoint
from adaptst.model import Model, ModelConfig
from adaptst.recipes import Recipe, apply_plan, assemble_transfer, build_freeze_plan, millions, specialize_vocab, trainable_report
from adaptst.training import Adam, dev_loss
from adaptst.batches import Example
from adaptst.vocab import Vocab

D, F, V, NE, ND, FEAT, C, K = 16, 32, 11, 3, 2, 6, 8, 5
TOY = dict(D=D, ffn_dim=F, n_heads=2, enc_layers=NE, dec_layers=ND, feat_dim=FEAT, conv_channels=C)
KINDS = [
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


def toy(seed=0, **kw):
    return Model(ModelConfig(vocab_size=V, **dict(TOY, **kw)), seed=seed)


def with_bank(seed=0, d=4, langs=("de",)):
    m = toy(seed)
    inject(m, AdapterSpec(d=d, languages=list(langs)), seed=seed)
    return m


# closed-form element counts per parameter class (oracle written from the layer layout)
ATTN = 4 * (D * D + D)
NORM = 2 * D
FFN = 2 * D * F + F + D
FRONT = K * FEAT * C + C + K * C * D + D
BANK = adapter_param_count(D, 4, NE + ND)
EXPECTED = {
    "adapters-only": BANK,
    "full-finetune": NE * (ATTN + FFN + 2 * NORM) + ND * (2 * ATTN + FFN + 3 * NORM) + FRONT + 2 * V * D + BANK,
    "decoder-only-finetune": ND * (2 * ATTN + FFN + 3 * NORM) + 2 * V * D,
    "encoder-only-finetune": NE * (ATTN + FFN + 2 * NORM) + FRONT,
    "LNA-E": NE * (ATTN + 2 * NORM),
    "LNA-D": ND * (2 * ATTN + 3 * NORM),
    "LNA-ED": NE * (ATTN + 2 * NORM) + ND * (2 * ATTN + 3 * NORM),
    "xattn-only": ND * ATTN,
    "xattn-plus-adapters": ND * ATTN + BANK,
    "specialize": BANK,
}


@pytest.mark.parametrize("kind", KINDS)
def test_counts_match_closed_form(kind):
    m = with_bank()
    plan = build_freeze_plan(m, Recipe(kind=kind, language="de"))
    rep = trainable_report(m, plan)
    assert rep.trainable_count == EXPECTED[kind]
    assert rep.trainable_count + rep.frozen_count == rep.total_count == m.parameter_count()
    assert plan.trainable_paths | plan.frozen_paths == set(m.params)
    assert not plan.trainable_paths & plan.frozen_paths


def test_adapters_only_is_exactly_the_bank():
    m = with_bank(langs=("de", "pt"))
    plan = build_freeze_plan(m, Recipe(kind="adapters-only", language="de"))
    assert plan.trainable_paths == set(m.bank_paths("de"))
    allb = build_freeze_plan(m, Recipe(kind="adapters-only"))
    assert allb.trainable_paths == set(m.bank_paths())


def test_plan_determinism():
    a = build_freeze_plan(with_bank(0), Recipe(kind="LNA-ED"))
    b = build_freeze_plan(with_bank(1), Recipe(kind="LNA-ED"))
    assert a == b


def test_subset_chain():
    m = with_bank()
    sets = [build_freeze_plan(m, Recipe(kind=k, language="de")).trainable_paths for k in ("LNA-D", "decoder-only-finetune", "full-finetune")]
    assert sets[0] < sets[1] < sets[2]
    lna = build_freeze_plan(m, Recipe(kind="LNA-D")).trainable_paths
    assert "decoder/embed_tokens/weight" not in lna
    assert not any("/ffn/" in p for p in lna)


def test_missing_bank_errors():
    with pytest.raises(KeyError):
        build_freeze_plan(toy(), Recipe(kind="adapters-only", language="de"))
    with pytest.raises(KeyError):
        build_freeze_plan(with_bank(), Recipe(kind="xattn-plus-adapters", language="pt"))


def test_report_format():
    m = with_bank()
    rep = trainable_report(m, build_freeze_plan(m, Recipe(kind="full-finetune")))
    assert rep.trainable_count == rep.total_count
    assert rep.fraction() == f"{millions(rep.total_count)}/{millions(rep.total_count)}"
    d = rep.to_dict()
    assert d["trainable"] + d["frozen"] == d["total"]
    assert sum(g["total"] for g in d["groups"].values()) == d["total"]
    assert "trainable/total" in rep.table()


def test_millions_rounding_half_up():
    assert millions(14_550_000) == "14.6"
    assert millions(14_549_999) == "14.5"
    assert millions(201_600) == "0.2"
    assert millions(50_000) == "0.1"


FULL_SMALL = dict(D=256, ffn_dim=2048, n_heads=4, enc_layers=12, dec_layers=6, feat_dim=80, conv_channels=1024, vocab_size=10000)


def full_report(kind, adapter=None, D_=256, specialize=False):
    cfg = dict(FULL_SMALL, D=D_, n_heads=4 if D_ == 256 else 8)
    m = Model(ModelConfig(**cfg), seed=None)
    if specialize:
        m = specialize_vocab(m, 8000, "de")
    if adapter is not None:
        inject(m, adapter)
    return trainable_report(m, build_freeze_plan(m, Recipe(kind=kind, language="de" if adapter else None)))


def test_full_scale_counts():
    assert millions(full_report("decoder-only-finetune").trainable_count) == "14.6"
    assert millions(full_report("decoder-only-finetune", D_=512).trainable_count) == "35.5"
    rep = full_report("adapters-only", AdapterSpec(d=64, languages=["de"]))
    assert rep.trainable_count == 604_800
    spec = full_report("specialize", AdapterSpec(d=64, apply_to_encoder=False, languages=["de"]), specialize=True)
    assert spec.trainable_count == 2 * 8000 * 256 + 201_600
    assert spec.fraction() == "4.3/31.3"


# ---------------------------------------------------------------------------
# freeze enforcement


def random_batch(r, B=3, Tn=12, L=4):
    frames = r.standard_normal((B, Tn, FEAT)).astype(np.float32)
    lengths = np.array([Tn] + [Tn - 2] * (B - 1))
    tgt = r.integers(4, V, size=(B, L))
    dec_in = np.concatenate([np.full((B, 1), 2), tgt[:, :-1]], axis=1)
    return frames, lengths, dec_in, tgt


@pytest.mark.parametrize("kind", KINDS)
def test_freeze_enforcement(kind):
    m = with_bank(langs=("de", "pt"))
    for p in m.bank_paths():
        if p.endswith("up/weight"):  # let gradients reach the down-projections too
            m.params[p].data[...] = 0.01
    plan = build_freeze_plan(m, Recipe(kind=kind, language="de"))
    apply_plan(m, plan)
    snap = m.state_dict()
    opt = Adam(list(m.params.values()))
    assert opt.state_size() == 2 * trainable_report(m, plan).trainable_count
    r = np.random.default_rng(0)
    moved_grad = set()
    for _ in range(3):
        f, l, di, do = random_batch(r)
        loss = m.loss(f, l, di, do, lang="de")
        from adaptst.tensor import backward

        backward(loss)
        moved_grad |= {p for p in plan.trainable_paths if m.params[p].grad is not None and np.abs(m.params[p].grad).max() > 0}
        opt.step(1e-3)
        m.zero_grad()
    for p in plan.frozen_paths:
        assert m.params[p].data.tobytes() == snap[p].tobytes(), p
    for p in moved_grad:
        assert m.params[p].data.tobytes() != snap[p].tobytes(), p


# ---------------------------------------------------------------------------
# specialization


def test_specialize_swaps_only_vocab_matrices():
    m = toy()
    s = specialize_vocab(m, Vocab.monolingual(), "de", seed=1)
    assert s.params["decoder/embed_tokens/weight"].shape == (len(Vocab.monolingual()), D)
    assert s.params["decoder/output_projection/weight"].shape == (D, len(Vocab.monolingual()))
    assert m.params["decoder/embed_tokens/weight"].shape == (V, D)  # original untouched
    f, l, _, _ = random_batch(np.random.default_rng(0))
    assert m.encode(f, l).states.data.tobytes() == s.encode(f, l).states.data.tobytes()
    for p in m.params:
        if "embed_tokens" not in p and "output_projection" not in p:
            assert m.params[p].data.tobytes() == s.params[p].data.tobytes()
    w = s.params["decoder/embed_tokens/weight"].data
    assert abs(w.std() - D**-0.5) < 0.05


def test_specialize_alone_trains_only_embeddings():
    s = specialize_vocab(toy(), 20, "de")
    plan = build_freeze_plan(s, Recipe(kind="specialize", language="de"))
    assert plan.trainable_paths == {"decoder/embed_tokens/weight", "decoder/output_projection/weight"}
    plan = build_freeze_plan(s, Recipe(kind="LNA-E"))
    assert "decoder/embed_tokens/weight" in plan.trainable_paths


def test_specialize_rejects_tiny_vocab():
    with pytest.raises(ValueError):
        specialize_vocab(toy(), 3, "de")


# ---------------------------------------------------------------------------
# transfer assembly


def ckpt(model):
    return Checkpoint(model.config, model.vocab, model.state_dict(model.backbone_paths()))


def asr_and_denoiser(enc_D=D):
    mono = Vocab.monolingual()
    multi = Vocab.multilingual(["es", "de"])
    asr = Model(ModelConfig(vocab_size=len(mono), **dict(TOY, D=enc_D)), seed=1, vocab=mono)
    den = Model(ModelConfig(vocab_size=len(multi), frontend="embed", src_vocab_size=len(multi), **TOY), seed=2, vocab=multi)
    return asr, den


def test_assemble_same_dims_copies_weights_and_fresh_xattn():
    asr, den = asr_and_denoiser()
    m = assemble_transfer(ckpt(asr), ckpt(den), seed=3)
    assert not any(p.startswith("bridge/") for p in m.params)
    for p in m.params:
        if p.startswith("encoder/"):
            assert m.params[p].data.tobytes() == asr.params[p].data.tobytes()
        elif "/cross_attn/" in p:
            if p.endswith("weight"):
                assert m.params[p].data.tobytes() != den.params[p].data.tobytes()
        else:
            assert m.params[p].data.tobytes() == den.params[p].data.tobytes(), p


def test_assemble_bridge_and_recipes():
    asr, den = asr_and_denoiser(enc_D=24)
    m = assemble_transfer(ckpt(asr), ckpt(den), AdapterSpec(d=4, apply_to_encoder=False, languages=["es"]))
    assert {"bridge/weight", "bridge/bias"} <= set(m.params)
    xo = build_freeze_plan(m, Recipe(kind="xattn-only")).trainable_paths
    xa = build_freeze_plan(m, Recipe(kind="xattn-plus-adapters", language="es")).trainable_paths
    ad = build_freeze_plan(m, Recipe(kind="adapters-only", language="es")).trainable_paths
    assert xa == xo | ad and not xo & ad
    assert all("/cross_attn/" in p or p.startswith("bridge/") for p in xo)


def test_assemble_errors():
    asr, den = asr_and_denoiser()
    broken = ckpt(den)
    del broken.backbone["decoder/layers/0/ffn/fc1/weight"]
    with pytest.raises(KeyError):
        assemble_transfer(ckpt(asr), broken)
    with pytest.raises(ValueError):
        assemble_transfer(ckpt(asr), ckpt(den), task_vocab=Vocab.multilingual(["fr"]))
    with pytest.raises(ValueError):
        assemble_transfer(ckpt(den), ckpt(den))  # encoder must come from a speech model


def test_assembled_encoder_reproduces_asr_dev_loss():
    asr, den = asr_and_denoiser()
    r = np.random.default_rng(0)
    dev = [Example(r.standard_normal((10, FEAT)).astype(np.float32), tuple(r.integers(4, 30, 3)), 2, None) for _ in range(6)]
    before = dev_loss(asr, dev)
    m = assemble_transfer(ckpt(asr), ckpt(den))
    probe = asr.clone()
    probe.load_state_dict({p: m.params[p].data for p in m.params if p.startswith("encoder/")}, strict=False)
    assert dev_loss(probe, dev) == before


def test_bank_isolation_during_training():
    m = with_bank(langs=("de", "pt"))
    plan = build_freeze_plan(m, Recipe(kind="adapters-only", language="de"))
    apply_plan(m, plan)
    snap = m.state_dict()
    opt = Adam(list(m.params.values()))
    from adaptst.tensor import backward

    f, l, di, do = random_batch(np.random.default_rng(1))
    backward(m.loss(f, l, di, do, lang="de"))
    opt.step(1e-2)
    changed = {p for p in m.params if m.params[p].data.tobytes() != snap[p].tobytes()}
    assert changed and changed <= set(m.bank_paths("de"))
