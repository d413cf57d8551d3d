"""Transformer denoiser over latent tokens, plus its conditioning variants.

The backbone is a pre-norm residual attention stack over a sequence of
[text token; time token; latent tokens] with learned positional encodings.
Conditioning on a guidance latent is grafted on by build_variant:

* ``spice``        query-side cross-entity attention behind a zero conv
* ``k_cross``      the same graft on the keys
* ``v_cross``      the same graft on the values
* ``qc_only``      queries come from the guidance stream alone
* ``no_zeroconv``  query graft without the zero conv (leaks at init)
* ``controlnet3d`` frozen trunk + trainable clone injecting residuals
* ``shap_e_ft``    plain text-only backbone, all weights trainable

Zero convs are per-token linear maps with weight and bias starting at zero;
together with a zero-initialized graft bias they make every grafted variant
(except no_zeroconv, deliberately) an exact functional copy of the backbone
at finetune start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Rng, Tensor

__all__ = [
    "BackboneConfig",
    "Denoiser",
    "VARIANT_KINDS",
    "attention",
    "init_backbone",
    "build_variant",
    "sinusoidal_features",
]

VARIANT_KINDS = (
    "spice", "shap_e_ft", "controlnet3d", "sdedit3d",
    "no_zeroconv", "k_cross", "v_cross", "qc_only",
)
# sdedit3d is a sampler policy over a shap_e_ft checkpoint, not a module
_GRAFT_KINDS = ("spice", "no_zeroconv", "k_cross", "v_cross", "qc_only")
_CONDITIONAL_KINDS = _GRAFT_KINDS + ("controlnet3d",)


@dataclass(frozen=True)
class BackboneConfig:
    vocab: tuple[str, ...]
    n_blocks: int = 6
    n_heads: int = 4
    d_model: int = 32
    mlp_ratio: int = 4
    s_latent: int = 64
    n_prepend: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def seq_len(self) -> int:
        return self.s_latent + self.n_prepend


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes (one head)."""
    d = q.data.shape[-1]
    scores = (q @ nc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    return nc.softmax_rows(scores) @ v


def sinusoidal_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos features of integer timesteps, shape (..., dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)


class Denoiser:
    """kind + config + named parameter table; forward() predicts z0."""

    def __init__(self, config: BackboneConfig, kind: str, params: dict[str, Tensor]):
        if kind not in VARIANT_KINDS or kind == "sdedit3d":
            raise ValueError(f"unknown variant kind {kind!r}")
        self.config = config
        self.kind = kind
        self.params = params
        self._word_index = {w: i + 1 for i, w in enumerate(config.vocab)}  # 0 = null

    # -- parameter bookkeeping ------------------------------------------------

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- token assembly --------------------------------------------------------

    def _token_indices(self, prompt: str) -> np.ndarray:
        if prompt == "":
            return np.array([0], dtype=np.int64)
        idx = []
        for word in prompt.split():
            if word not in self._word_index:
                raise ValueError(f"word {word!r} not in model vocabulary")
            idx.append(self._word_index[word])
        return np.asarray(idx, dtype=np.int64)

    def text_embed(self, prompts: list[str]) -> Tensor:
        """(B, d_model): mean word embedding through a linear map."""
        p = self.params
        rows = [nc.tmean(nc.take_rows(p["embed.vocab"], self._token_indices(s)), axis=0)
                for s in prompts]
        e = nc.stack(rows, axis=0)
        return e @ p["proj.text.W"] + p["proj.text.b"]

    def time_embed(self, t: np.ndarray) -> Tensor:
        feats = Tensor(sinusoidal_features(t, self.config.d_model))
        return feats @ self.params["proj.time.W"] + self.params["proj.time.b"]

    def _prepended(self, prompts: list[str], t: np.ndarray) -> tuple[Tensor, Tensor]:
        txt = nc.reshape(self.text_embed(prompts), (len(prompts), 1, self.config.d_model))
        tim = nc.reshape(self.time_embed(t), (len(prompts), 1, self.config.d_model))
        return txt, tim

    def _sequence(self, z: Tensor, txt: Tensor, tim: Tensor, proj_prefix: str) -> Tensor:
        p = self.params
        zp = z @ p[f"{proj_prefix}.W"] + p[f"{proj_prefix}.b"]
        seq = nc.concat([txt, tim, zp], axis=1)
        return seq + p["embed.pos"]

    def assemble_tokens(self, z_t: Tensor, prompts: list[str], t: np.ndarray) -> Tensor:
        txt, tim = self._prepended(prompts, t)
        return self._sequence(z_t, txt, tim, "proj.in")

    def guidance_stream(self, z_c: Tensor, prompts: list[str], t: np.ndarray) -> Tensor:
        """Guidance features: own input projection, same prepends/positions.

        Computed once per forward pass and shared by all blocks.
        """
        txt, tim = self._prepended(prompts, t)
        return self._sequence(z_c, txt, tim, "cond.proj")

    # -- blocks ----------------------------------------------------------------

    def _heads(self, x: Tensor) -> Tensor:
        b, s, d = x.data.shape
        h = self.config.n_heads
        return nc.swapaxes(nc.reshape(x, (b, s, h, d // h)), 1, 2)

    def _merge(self, x: Tensor) -> Tensor:
        b, h, s, dh = x.data.shape
        return nc.reshape(nc.swapaxes(x, 1, 2), (b, s, h * dh))

    def _graft(self, prefix: str, phi_c: Tensor | None, name: str) -> Tensor | None:
        """f_*c(Z(phi_c)) for the grafted kinds; None when kind has no graft."""
        if phi_c is None:
            return None
        p = self.params
        if self.kind == "no_zeroconv":
            inner = phi_c
        else:
            inner = phi_c @ p[f"{prefix}.zc.W"] + p[f"{prefix}.zc.b"]
        return inner @ p[f"{prefix}.{name}.W"] + p[f"{prefix}.{name}.b"]

    def _block(self, i: int, x: Tensor, phi_c: Tensor | None, prefix: str = "block") -> Tensor:
        p = self.params
        pre = f"{prefix}{i}"
        h = nc.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = h @ p[f"{pre}.q.W"] + p[f"{pre}.q.b"]
        k = h @ p[f"{pre}.k.W"] + p[f"{pre}.k.b"]
        v = h @ p[f"{pre}.v.W"] + p[f"{pre}.v.b"]
        if phi_c is not None and prefix == "block":
            if self.kind in ("spice", "no_zeroconv"):
                q = q + self._graft(pre, phi_c, "qc")
            elif self.kind == "qc_only":
                q = self._graft(pre, phi_c, "qc")
            elif self.kind == "k_cross":
                k = k + self._graft(pre, phi_c, "kc")
            elif self.kind == "v_cross":
                v = v + self._graft(pre, phi_c, "vc")
        att = self._merge(attention(self._heads(q), self._heads(k), self._heads(v)))
        x = x + (att @ p[f"{pre}.o.W"] + p[f"{pre}.o.b"])
        h2 = nc.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        m = nc.gelu(h2 @ p[f"{pre}.mlp1.W"] + p[f"{pre}.mlp1.b"])
        return x + (m @ p[f"{pre}.mlp2.W"] + p[f"{pre}.mlp2.b"])

    def _zconv(self, j: int, x: Tensor) -> Tensor:
        p = self.params
        return x @ p[f"ctrl.z{j}.W"] + p[f"ctrl.z{j}.b"]

    # -- forward ---------------------------------------------------------------

    def forward(self, z_t, t, prompts: list[str], z_c=None) -> Tensor:
        """Predict z0. z_t/z_c: (B, S, D) arrays or Tensors; t: (B,) ints."""
        cfg = self.config
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z_t.data.ndim != 3 or z_t.data.shape[1:] != (cfg.s_latent, cfg.d_model):
            raise ValueError(f"bad latent shape {z_t.data.shape}")
        if self.kind in _CONDITIONAL_KINDS:
            if z_c is None:
                raise ValueError(f"variant {self.kind!r} requires a guidance latent")
            z_c = z_c if isinstance(z_c, Tensor) else Tensor(z_c)
        else:
            z_c = None  # text-only backbone ignores guidance

        t = np.asarray(t)
        x = self.assemble_tokens(z_t, prompts, t)
        phi_c = None
        if z_c is not None:
            phi_c = self.guidance_stream(z_c, prompts, t)

        if self.kind == "controlnet3d":
            y = self._block(0, self._zconv(0, phi_c) + x, None, prefix="ctrl.block")
            for i in range(cfg.n_blocks):
                x = self._block(i, x, None) + self._zconv(i + 1, y)
                if i + 1 < cfg.n_blocks:
                    y = self._block(i + 1, y, None, prefix="ctrl.block")
        else:
            for i in range(cfg.n_blocks):
                x = self._block(i, x, phi_c)

        p = self.params
        h = nc.layer_norm(x, p["out.ln.g"], p["out.ln.b"])
        out = h @ p["out.W"] + p["out.b"]
        return nc.tslice(out, (slice(None), slice(cfg.n_prepend, None), slice(None)))

    __call__ = forward


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _linear(rng: Rng, params: dict, name: str, fan_in: int, fan_out: int) -> None:
    w, b = nc.linear_init(rng, fan_in, fan_out)
    params[f"{name}.W"] = w
    params[f"{name}.b"] = b


def _zero_linear(params: dict, name: str, d: int) -> None:
    params[f"{name}.W"] = nc.param(np.zeros((d, d), dtype=np.float32))
    params[f"{name}.b"] = nc.param(np.zeros(d, dtype=np.float32))


def _ln(params: dict, name: str, d: int) -> None:
    params[f"{name}.g"] = nc.param(np.ones(d, dtype=np.float32))
    params[f"{name}.b"] = nc.param(np.zeros(d, dtype=np.float32))


def init_backbone(config: BackboneConfig, rng: Rng) -> Denoiser:
    """Fresh text-conditional backbone (the pretraining target)."""
    d = config.d_model
    params: dict[str, Tensor] = {}
    params["embed.vocab"] = nc.embedding_init(rng, len(config.vocab) + 1, d)
    params["embed.pos"] = nc.embedding_init(rng, config.seq_len, d)
    _linear(rng, params, "proj.text", d, d)
    _linear(rng, params, "proj.time", d, d)
    _linear(rng, params, "proj.in", d, d)
    for i in range(config.n_blocks):
        pre = f"block{i}"
        _ln(params, f"{pre}.ln1", d)
        for nm in ("q", "k", "v", "o"):
            _linear(rng, params, f"{pre}.{nm}", d, d)
        _ln(params, f"{pre}.ln2", d)
        _linear(rng, params, f"{pre}.mlp1", d, d * config.mlp_ratio)
        _linear(rng, params, f"{pre}.mlp2", d * config.mlp_ratio, d)
    _ln(params, "out.ln", d)
    _linear(rng, params, "out", d, d)
    return Denoiser(config, "shap_e_ft", params)


def _clone_params(params: dict[str, Tensor], requires_grad: bool) -> dict[str, Tensor]:
    out = {}
    for k, v in params.items():
        t = Tensor(v.data.copy())
        t.requires_grad = requires_grad
        out[k] = t
    return out


_GRAFT_NAME = {"spice": "qc", "no_zeroconv": "qc", "qc_only": "qc",
               "k_cross": "kc", "v_cross": "vc"}


def build_variant(kind: str, pretrained: Denoiser, rng: Rng) -> Denoiser:
    """Wrap a pretrained backbone in a conditioning variant.

    New parameters are randomly initialized except every zero conv (weight
    and bias zero) and every graft bias, so the guidance path is silent at
    start for spice and controlnet3d.
    """
    cfg = pretrained.config
    d = cfg.d_model
    if kind == "shap_e_ft":
        return Denoiser(cfg, kind, _clone_params(pretrained.params, True))
    if kind in _GRAFT_KINDS:
        params = _clone_params(pretrained.params, True)
        _linear(rng, params, "cond.proj", d, d)
        name = _GRAFT_NAME[kind]
        for i in range(cfg.n_blocks):
            if kind != "no_zeroconv":
                _zero_linear(params, f"block{i}.zc", d)
            w, _ = nc.linear_init(rng, d, d)
            params[f"block{i}.{name}.W"] = w
            params[f"block{i}.{name}.b"] = nc.param(np.zeros(d, dtype=np.float32))
        return Denoiser(cfg, kind, params)
    if kind == "controlnet3d":
        params = _clone_params(pretrained.params, False)  # frozen trunk
        for i in range(cfg.n_blocks):
            for key in list(pretrained.params):
                if key.startswith(f"block{i}."):
                    t = Tensor(pretrained.params[key].data.copy())
                    t.requires_grad = True
                    params["ctrl." + key] = t
        for j in range(cfg.n_blocks + 1):
            _zero_linear(params, f"ctrl.z{j}", d)
        _linear(rng, params, "cond.proj", d, d)
        return Denoiser(cfg, kind, params)
    raise ValueError(f"unknown variant kind {kind!r}")
