"""Serial and parallel adapter cells and per-language adapter banks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import tensor as T
from .tensor import Parameter, Tensor

if TYPE_CHECKING:
    from .model import Model

Placement = Literal["serial-FFN", "par-TL", "par-SA", "par-XA"]
DOWN_STD = 1e-2


class AdapterSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    d: int
    placement: Placement = "serial-FFN"
    h: int | None = None
    apply_to_encoder: bool = True
    apply_to_decoder: bool = True
    languages: list[str]

    @model_validator(mode="after")
    def _check(self) -> "AdapterSpec":
        if self.d < 1:
            raise ValueError("adapter bottleneck d must be >= 1")
        if self.is_parallel:
            if not self.h or self.d % self.h:
                raise ValueError(f"parallel adapters need h heads dividing d={self.d}")
        if self.placement == "par-XA":
            if not self.apply_to_decoder:
                raise ValueError("par-XA adapters require apply_to_decoder")
            if self.apply_to_encoder:
                raise ValueError("par-XA adapters cannot be placed in the encoder (no cross-attention)")
        if not (self.apply_to_encoder or self.apply_to_decoder):
            raise ValueError("adapter spec selects neither encoder nor decoder")
        if len(set(self.languages)) != len(self.languages) or not self.languages:
            raise ValueError("languages must be a non-empty list of unique keys")
        return self

    @property
    def is_parallel(self) -> bool:
        return self.placement != "serial-FFN"


def serial_adapter_forward(x: Tensor, params: dict[str, Parameter]) -> Tensor:
    """``x + W_up relu(W_down LN(x))`` with a site-local layer norm."""
    t = {k: v.tensor for k, v in params.items()}
    if x.shape[-1] != t["down/weight"].shape[0]:
        raise T.DimensionError(f"adapter expects last dim {t['down/weight'].shape[0]}, got {x.shape}")
    z = T.layer_norm(x, t["norm/gain"], t["norm/bias"])
    z = T.relu(T.linear(z, t["down/weight"], t["down/bias"]))
    return x + T.linear(z, t["up/weight"], t["up/bias"])


def parallel_adapter_forward(
    x: Tensor, f_out: Tensor, params: dict[str, Parameter], n_heads: int, mask: np.ndarray | None = None
) -> Tensor:
    """``f_out + W_up MHA_h(W_down LN(x))``: attention runs in the bottleneck width."""
    from .model import multi_head_attention

    if x.shape != f_out.shape:
        raise T.DimensionError(f"parallel adapter: input {x.shape} vs wrapped output {f_out.shape}")
    t = {k: v.tensor for k, v in params.items()}
    z = T.layer_norm(x, t["norm/gain"], t["norm/bias"])
    z = T.linear(z, t["down/weight"], t["down/bias"])
    z = multi_head_attention(params, "attn", z, z, n_heads, mask)
    return f_out + T.linear(z, t["up/weight"], t["up/bias"])


@dataclass
class AdapterSite:
    path: str  # e.g. "decoder/layers/3"
    stack: str
    lang: str
    placement: str
    h: int | None
    params: dict[str, Parameter] = field(default_factory=dict)

    def serial(self, x: Tensor) -> Tensor:
        return serial_adapter_forward(x, self.params)

    def parallel(self, x: Tensor, f_out: Tensor, mask=None) -> Tensor:
        if self.placement == "par-XA" and self.stack != "decoder":
            raise ValueError(f"par-XA adapter at {self.path}: only decoder layers have cross-attention")
        return parallel_adapter_forward(x, f_out, self.params, self.h, mask)


@dataclass
class AdapterBank:
    lang: str
    sites: dict[str, AdapterSite] = field(default_factory=dict)

    def paths(self) -> list[str]:
        return [p.path for s in self.sites.values() for p in s.params.values()]

    def parameters(self) -> list[Parameter]:
        return [p for s in self.sites.values() for p in s.params.values()]

    def size(self) -> int:
        return sum(p.size for p in self.parameters())


def site_paths(n_enc: int, n_dec: int, spec: AdapterSpec) -> list[str]:
    sites = []
    if spec.apply_to_encoder:
        sites += [f"encoder/layers/{i}" for i in range(n_enc)]
    if spec.apply_to_decoder:
        sites += [f"decoder/layers/{i}" for i in range(n_dec)]
    return sites


def adapter_param_count(D: int, d: int, n_sites: int) -> int:
    """Serial cell: layer norm (2D) + down (Dd + d) + up (dD + D), per site."""
    return n_sites * (2 * D + (D * d + d) + (d * D + D))


def parallel_adapter_param_count(D: int, d: int, n_sites: int) -> int:
    """Parallel cell: serial cell plus four d x d attention projections with biases."""
    return adapter_param_count(D, d, n_sites) + n_sites * 4 * (d * d + d)


def bank_param_count(D: int, spec: AdapterSpec, n_sites: int) -> int:
    fn = parallel_adapter_param_count if spec.is_parallel else adapter_param_count
    return fn(D, spec.d, n_sites)


def inject(model: "Model", spec: AdapterSpec, seed: int = 0) -> "Model":
    """Attach one adapter per (language, site) to ``model`` in place.

    Up-projections start at zero, so the model's outputs are unchanged until an
    optimizer touches the bank.  A second injection is allowed only for new
    languages with an identical cell configuration.
    """
    if spec.placement not in ("serial-FFN", "par-TL", "par-SA", "par-XA"):
        raise ValueError(f"unknown adapter placement {spec.placement!r}")
    if model.adapter_spec is not None:
        prev = model.adapter_spec
        same_cell = prev.model_dump(exclude={"languages"}) == spec.model_dump(exclude={"languages"})
        if not same_cell:
            raise ValueError("model already carries adapters with a different configuration")
    dup = [l for l in spec.languages if l in model.banks]
    if dup:
        raise ValueError(f"adapters already injected for {dup}")
    if model.config.encoder_dim != model.config.D and spec.apply_to_encoder:
        raise ValueError("encoder adapters on a bridged model are not supported")

    cfg = model.config
    D, d = cfg.D, spec.d
    rng = np.random.default_rng(seed)
    dtype = model.dtype

    def new(path, shape, kind):
        if kind == "ones":
            arr = np.ones(shape, dtype=dtype)
        elif kind == "zeros":
            arr = np.zeros(shape, dtype=dtype)
        elif kind == "down":
            arr = (rng.standard_normal(shape) * DOWN_STD).astype(dtype)
        else:
            arr = (rng.standard_normal(shape) * math.sqrt(2.0 / sum(shape))).astype(dtype)
        return Parameter(path, Tensor(arr, requires_grad=True, dtype=dtype))

    for lang in spec.languages:
        bank = AdapterBank(lang)
        for site in site_paths(cfg.enc_layers, cfg.dec_layers, spec):
            base = f"{site}/adapters/{lang}"
            layout = [
                ("norm/gain", (D,), "ones"),
                ("norm/bias", (D,), "zeros"),
                ("down/weight", (D, d), "down"),
                ("down/bias", (d,), "zeros"),
            ]
            if spec.is_parallel:
                for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
                    layout += [(f"attn/{proj}/weight", (d, d), "xavier"), (f"attn/{proj}/bias", (d,), "zeros")]
            layout += [("up/weight", (d, D), "zeros"), ("up/bias", (D,), "zeros")]
            params = {}
            for name, shape, kind in layout:
                prm = new(f"{base}/{name}", shape, kind)
                if prm.path in model.params:
                    raise KeyError(f"duplicate parameter path {prm.path}")
                model.params[prm.path] = prm
                params[name] = prm
            bank.sites[site] = AdapterSite(site, site.split("/")[0], lang, spec.placement, spec.h, params)
        model.banks[lang] = bank
    langs = (model.adapter_spec.languages if model.adapter_spec else []) + list(spec.languages)
    model.adapter_spec = spec.model_copy(update={"languages": langs})
    return model
