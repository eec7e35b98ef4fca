"""Speech-style Transformer encoder-decoder with addressable parameters.

Layers are post-norm: each sub-layer computes ``LN(x + sublayer(x))``.  The
encoder front-end is either two stride-2 convolutions over feature frames
(speech) or a token embedding (used only by the toy denoising pre-training).
Every weight lives in ``Model.params`` under a slash-separated path.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import tensor as T
from .tensor import Parameter, Tensor
from .vocab import BOS, EOS, PAD, Vocab

NEG_INF = -1e9


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    D: int = 64
    ffn_dim: int = 256
    n_heads: int = 4
    enc_layers: int = 3
    dec_layers: int = 2
    feat_dim: int = 16
    vocab_size: int
    max_frames: int = 3000
    dropout: float = 0.0
    conv_channels: int = 64
    conv_kernel: int = 5
    frontend: Literal["conv", "embed"] = "conv"
    src_vocab_size: int | None = None
    enc_D: int | None = None

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.D % self.n_heads:
            raise ValueError(f"D={self.D} not divisible by n_heads={self.n_heads}")
        if self.enc_D is not None and self.enc_D % self.n_heads:
            raise ValueError(f"enc_D={self.enc_D} not divisible by n_heads={self.n_heads}")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("enc_layers and dec_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.frontend == "embed" and not self.src_vocab_size:
            raise ValueError("embed frontend needs src_vocab_size")
        return self

    @property
    def encoder_dim(self) -> int:
        return self.enc_D or self.D


def subsampled_length(T_in: int, n_convs: int = 2) -> int:
    """Output length of ``n_convs`` stride-2 convolutions (kernel 5, padding 2)."""
    for _ in range(n_convs):
        T_in = -(-T_in // 2)
    return T_in


def sinusoidal_positions(T_len: int, D: int) -> np.ndarray:
    """Interleaved table: column 2i is sin(t / 10000^(2i/D)), column 2i+1 the cosine."""
    if D % 2:
        raise ValueError("sinusoidal positions need an even dimension")
    t = np.arange(T_len, dtype=np.float64)[:, None]
    inv = 10000.0 ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    table = np.empty((T_len, D), dtype=np.float64)
    table[:, 0::2] = np.sin(t * inv)
    table[:, 1::2] = np.cos(t * inv)
    return table


def backbone_param_count(cfg: ModelConfig) -> int:
    """Closed-form element count of the adapter-free backbone.

    attention block    4 (D^2 + D)
    FFN block          2 D F + F + D
    layer norm         2 D
    encoder layer      attention + FFN + 2 norms
    decoder layer      2 attention + FFN + 3 norms
    conv front-end     K f C + C + K C E + E    (f feat dim, C channels, E encoder dim)
    embed front-end    S E                       (S source vocab)
    decoder vocab      2 V D                     (untied embedding and output projection)
    bridge             E D + D                   (only when E != D)
    """
    D, F, V = cfg.D, cfg.ffn_dim, cfg.vocab_size
    E = cfg.encoder_dim

    def attn(n):
        return 4 * (n * n + n)

    def ffn(n):
        return 2 * n * F + F + n

    enc = cfg.enc_layers * (attn(E) + ffn(E) + 4 * E)
    dec = cfg.dec_layers * (2 * attn(D) + ffn(D) + 6 * D)
    if cfg.frontend == "conv":
        K, C = cfg.conv_kernel, cfg.conv_channels
        front = K * cfg.feat_dim * C + C + K * C * E + E
    else:
        front = cfg.src_vocab_size * E
    bridge = E * D + D if E != D else 0
    return enc + dec + front + 2 * V * D + bridge


@dataclass
class EncoderOutput:
    states: Tensor  # (B, T', D)
    lengths: np.ndarray  # (B,)

    @property
    def key_mask(self) -> np.ndarray:
        """Additive (B, 1, 1, T') mask hiding padded encoder positions."""
        Tk = self.states.shape[1]
        valid = np.arange(Tk)[None, :] < self.lengths[:, None]
        return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_mask(L: int) -> np.ndarray:
    return np.triu(np.full((L, L), NEG_INF), k=1)[None, None]


def multi_head_attention(
    prm: dict[str, Parameter],
    prefix: str,
    xq: Tensor,
    xkv: Tensor,
    n_heads: int,
    mask: np.ndarray | None,
    p_drop: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    B, Tq, D = xq.shape
    Tk = xkv.shape[1]
    dh = D // n_heads

    def proj(name, x):
        return T.linear(x, prm[f"{prefix}/{name}/weight"].tensor, prm[f"{prefix}/{name}/bias"].tensor)

    q = proj("q_proj", xq).reshape(B, Tq, n_heads, dh).transpose(0, 2, 1, 3)
    k = proj("k_proj", xkv).reshape(B, Tk, n_heads, dh).transpose(0, 2, 3, 1)
    v = proj("v_proj", xkv).reshape(B, Tk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = T.matmul(q, k) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    probs = T.dropout(T.softmax(scores, axis=-1), p_drop, rng)
    ctx = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
    return proj("o_proj", ctx)


class Model:
    """Encoder-decoder backbone plus any injected per-language adapter banks."""

    def __init__(self, config: ModelConfig, seed: int | None = 0, vocab: Vocab | None = None) -> None:
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} tokens but vocab_size={config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.params: dict[str, Parameter] = {}
        self.banks: dict = {}
        self.adapter_spec = None
        self.specialized: str | None = None
        self.training = False
        self.dropout_rng: np.random.Generator | None = None
        self._dtype = T.get_dtype()
        self._init_rng = None if seed is None else np.random.default_rng(seed)
        self._build()
        self._init_rng = None

    # -- construction -------------------------------------------------------

    def _new(self, path: str, shape, kind: str, std: float = 0.0) -> Parameter:
        if path in self.params:
            raise KeyError(f"duplicate parameter path {path}")
        rng = self._init_rng
        if kind == "ones":
            arr = np.ones(shape, dtype=self._dtype)
        elif kind == "zeros" or rng is None:
            arr = np.zeros(shape, dtype=self._dtype)
        else:
            arr = (rng.standard_normal(shape) * std).astype(self._dtype)
        p = Parameter(path, Tensor(arr, requires_grad=True, dtype=self._dtype))
        self.params[path] = p
        return p

    def _linear(self, prefix: str, n_in: int, n_out: int, bias: bool = True) -> None:
        self._new(f"{prefix}/weight", (n_in, n_out), "normal", math.sqrt(2.0 / (n_in + n_out)))
        if bias:
            self._new(f"{prefix}/bias", (n_out,), "zeros")

    def _norm(self, prefix: str, n: int) -> None:
        self._new(f"{prefix}/gain", (n,), "ones")
        self._new(f"{prefix}/bias", (n,), "zeros")

    def _attention(self, prefix: str, n: int) -> None:
        for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
            self._linear(f"{prefix}/{name}", n, n)

    def _ffn(self, prefix: str, n: int) -> None:
        self._linear(f"{prefix}/fc1", n, self.config.ffn_dim)
        self._linear(f"{prefix}/fc2", self.config.ffn_dim, n)

    def _build(self) -> None:
        cfg = self.config
        E, D = cfg.encoder_dim, cfg.D
        if cfg.frontend == "conv":
            K, C = cfg.conv_kernel, cfg.conv_channels
            self._new("encoder/subsample/conv1/weight", (K, cfg.feat_dim, C), "normal", math.sqrt(2.0 / (K * cfg.feat_dim)))
            self._new("encoder/subsample/conv1/bias", (C,), "zeros")
            self._new("encoder/subsample/conv2/weight", (K, C, E), "normal", math.sqrt(1.0 / (K * C)))
            self._new("encoder/subsample/conv2/bias", (E,), "zeros")
        else:
            self._new("encoder/embed_tokens/weight", (cfg.src_vocab_size, E), "normal", E ** -0.5)
        for i in range(cfg.enc_layers):
            p = f"encoder/layers/{i}"
            self._attention(f"{p}/self_attn", E)
            self._norm(f"{p}/self_attn_norm", E)
            self._ffn(f"{p}/ffn", E)
            self._norm(f"{p}/ffn_norm", E)
        if E != D:
            self._linear("bridge", E, D)
        self._new("decoder/embed_tokens/weight", (cfg.vocab_size, D), "normal", D ** -0.5)
        for i in range(cfg.dec_layers):
            p = f"decoder/layers/{i}"
            self._attention(f"{p}/self_attn", D)
            self._norm(f"{p}/self_attn_norm", D)
            self._attention(f"{p}/cross_attn", D)
            self._norm(f"{p}/cross_attn_norm", D)
            self._ffn(f"{p}/ffn", D)
            self._norm(f"{p}/ffn_norm", D)
        self._new("decoder/output_projection/weight", (D, cfg.vocab_size), "normal", D ** -0.5)

    # -- bookkeeping -------------------------------------------------------

    @property
    def dtype(self) -> np.dtype:
        return self._dtype

    def named_parameters(self):
        return self.params.items()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def bank_paths(self, lang: str | None = None) -> list[str]:
        langs = [lang] if lang is not None else list(self.banks)
        return [path for l in langs for path in self.banks[l].paths()]

    def backbone_paths(self) -> list[str]:
        banked = set(self.bank_paths())
        return [p for p in self.params if p not in banked]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def train(self, seed_or_rng=None) -> "Model":
        self.training = True
        if seed_or_rng is not None:
            self.dropout_rng = np.random.default_rng(seed_or_rng)
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def state_dict(self, paths=None) -> dict[str, np.ndarray]:
        paths = self.params if paths is None else paths
        return {p: self.params[p].data.copy() for p in paths}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = [p for p in self.params if p not in state]
            if missing:
                raise KeyError(f"state is missing {len(missing)} paths, e.g. {missing[0]}")
        for path, arr in state.items():
            prm = self.params.get(path)
            if prm is None:
                if strict:
                    raise KeyError(f"unknown parameter path {path}")
                continue
            if prm.data.shape != arr.shape:
                raise T.DimensionError(f"{path}: expected {prm.data.shape}, got {arr.shape}")
            prm.tensor.data[...] = arr

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        self._dtype = np.dtype(dtype)
        for p in self.params.values():
            p.tensor.data = p.tensor.data.astype(self._dtype)
            p.tensor.grad = None
        return self

    def start_id(self, lang: str | None) -> int:
        return self.vocab.start_id(lang) if self.vocab is not None else BOS

    # -- forward -----------------------------------------------------------

    def _t(self, path: str) -> Tensor:
        return self.params[path].tensor

    def _drop(self, x: Tensor) -> Tensor:
        if self.training and self.config.dropout > 0:
            return T.dropout(x, self.config.dropout, self.dropout_rng)
        return x

    def _sites(self, lang: str | None) -> dict:
        if lang is None or not self.banks:
            return {}
        if lang not in self.banks:
            raise KeyError(f"no adapter bank for language {lang!r}; have {sorted(self.banks)}")
        return self.banks[lang].sites

    def _mha(self, prefix, xq, xkv, mask):
        p = self.config.dropout if self.training else 0.0
        return multi_head_attention(self.params, prefix, xq, xkv, self.config.n_heads, mask, p, self.dropout_rng)

    def _ffn_fwd(self, prefix: str, x: Tensor) -> Tensor:
        h = T.relu(T.linear(x, self._t(f"{prefix}/fc1/weight"), self._t(f"{prefix}/fc1/bias")))
        return T.linear(self._drop(h), self._t(f"{prefix}/fc2/weight"), self._t(f"{prefix}/fc2/bias"))

    def _norm_fwd(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self._t(f"{prefix}/gain"), self._t(f"{prefix}/bias"))

    def _conv_frontend(self, frames: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        B, T_in, F = frames.shape
        if F != self.config.feat_dim:
            raise T.DimensionError(f"frames have {F} features, model expects {self.config.feat_dim}")
        if T_in == 0 or (lengths <= 0).any():
            raise ValueError("cannot subsample an empty utterance")
        valid = np.arange(T_in)[None, :] < lengths[:, None]
        x = Tensor(np.where(valid[..., None], frames, 0.0), dtype=self._dtype)
        pad = self.config.conv_kernel // 2
        h = T.conv1d(x, self._t("encoder/subsample/conv1/weight"), self._t("encoder/subsample/conv1/bias"), 2, pad)
        len1 = -(-lengths // 2)
        keep = (np.arange(h.shape[1])[None, :] < len1[:, None])[..., None].astype(self._dtype)
        h = T.relu(h) * keep
        h = T.conv1d(h, self._t("encoder/subsample/conv2/weight"), self._t("encoder/subsample/conv2/bias"), 2, pad)
        return h, -(-len1 // 2)

    def encode(self, src, lengths=None, lang: str | None = None) -> EncoderOutput:
        """Encode a padded batch ``src`` (B, T, feat) of frames or (B, L) of token ids.

        A 2-D frame array is treated as a single utterance.  ``lang`` selects the
        active adapter bank; ``None`` runs the bare backbone.
        """
        cfg = self.config
        src = np.asarray(src)
        if cfg.frontend == "conv" and src.ndim == 2:
            src = src[None]
        if cfg.frontend == "embed" and src.ndim == 1:
            src = src[None]
        B = src.shape[0]
        lengths = np.full(B, src.shape[1], dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
        sites = self._sites(lang)
        E = cfg.encoder_dim
        if cfg.frontend == "conv":
            x, out_len = self._conv_frontend(src, lengths)
        else:
            x = T.embedding(self._t("encoder/embed_tokens/weight"), src) * math.sqrt(E)
            out_len = lengths
        Tp = x.shape[1]
        x = self._drop(x + sinusoidal_positions(Tp, E).astype(self._dtype))
        enc = EncoderOutput(x, out_len)
        mask = enc.key_mask
        for i in range(cfg.enc_layers):
            x = self._encoder_layer(i, x, mask, sites.get(f"encoder/layers/{i}"))
        if E != cfg.D:
            x = T.linear(x, self._t("bridge/weight"), self._t("bridge/bias"))
        return EncoderOutput(x, out_len)

    def _encoder_layer(self, i: int, x: Tensor, mask, site) -> Tensor:
        p = f"encoder/layers/{i}"
        sa = self._mha(f"{p}/self_attn", x, x, mask)
        if site is not None and site.placement == "par-SA":
            sa = site.parallel(x, sa, mask)
        h = self._norm_fwd(f"{p}/self_attn_norm", x + self._drop(sa))
        y = self._norm_fwd(f"{p}/ffn_norm", h + self._drop(self._ffn_fwd(f"{p}/ffn", h)))
        if site is not None:
            if site.placement == "serial-FFN":
                y = site.serial(y)
            elif site.placement == "par-TL":
                y = site.parallel(x, y, mask)
        return y

    def _decoder_layer(self, i: int, x: Tensor, enc: EncoderOutput, self_mask, cross_mask, site) -> Tensor:
        p = f"decoder/layers/{i}"
        sa = self._mha(f"{p}/self_attn", x, x, self_mask)
        if site is not None and site.placement == "par-SA":
            sa = site.parallel(x, sa, self_mask)
        h1 = self._norm_fwd(f"{p}/self_attn_norm", x + self._drop(sa))
        xa = self._mha(f"{p}/cross_attn", h1, enc.states, cross_mask)
        if site is not None and site.placement == "par-XA":
            xa = site.parallel(h1, xa, self_mask)
        h2 = self._norm_fwd(f"{p}/cross_attn_norm", h1 + self._drop(xa))
        y = self._norm_fwd(f"{p}/ffn_norm", h2 + self._drop(self._ffn_fwd(f"{p}/ffn", h2)))
        if site is not None:
            if site.placement == "serial-FFN":
                y = site.serial(y)
            elif site.placement == "par-TL":
                y = site.parallel(x, y, self_mask)
        return y

    def decode_forward(self, enc: EncoderOutput, prefix, lang: str | None = None) -> Tensor:
        """Logits (B, L, V) for every position of the decoder input ``prefix``."""
        ids = np.asarray(prefix, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[-1] == 0:
            raise ValueError("decoder prefix must contain at least the start token")
        sites = self._sites(lang)
        B, L = ids.shape
        D = self.config.D
        x = T.embedding(self._t("decoder/embed_tokens/weight"), ids) * math.sqrt(D)
        x = self._drop(x + sinusoidal_positions(L, D).astype(self._dtype))
        self_mask = causal_mask(L)
        cross_mask = enc.key_mask
        for i in range(self.config.dec_layers):
            x = self._decoder_layer(i, x, enc, self_mask, cross_mask, sites.get(f"decoder/layers/{i}"))
        return T.matmul(x, self._t("decoder/output_projection/weight"))

    def loss(self, src, src_lengths, dec_in, dec_out, lang: str | None = None) -> Tensor:
        enc = self.encode(src, src_lengths, lang)
        logits = self.decode_forward(enc, dec_in, lang)
        V = logits.shape[-1]
        return T.softmax_cross_entropy(logits.reshape(-1, V), np.asarray(dec_out).reshape(-1), ignore_index=PAD)

    def greedy_decode(self, src, lengths=None, lang: str | None = None, max_len: int = 32, start_id: int | None = None) -> list[list[int]]:
        """Argmax decoding until EOS or ``max_len`` tokens; ties go to the lowest id."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        was_training = self.training
        self.training = False
        try:
            with T.no_grad():
                enc = self.encode(src, lengths, lang)
                B = enc.states.shape[0]
                start = self.start_id(lang) if start_id is None else start_id
                seqs = np.full((B, 1), start, dtype=np.int64)
                out: list[list[int]] = [[] for _ in range(B)]
                done = np.zeros(B, dtype=bool)
                for _ in range(max_len):
                    logits = self.decode_forward(enc, seqs, lang).data[:, -1]
                    nxt = logits.argmax(axis=-1)
                    for b in np.nonzero(~done)[0]:
                        if nxt[b] == EOS:
                            done[b] = True
                        else:
                            out[b].append(int(nxt[b]))
                    if done.all():
                        break
                    seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        finally:
            self.training = was_training
        return out
