import numpy as np
import pytest

import shapediff.numcore as nc
from shapediff.model import (
    BackboneConfig,
    attention,
    build_variant,
    init_backbone,
    sinusoidal_features,
)
from shapediff.numcore import Rng, Tensor
from shapediff.shapegen import VOCAB


def _cfg(**kw):
    base = dict(vocab=VOCAB, n_blocks=2, n_heads=2, d_model=8,
                mlp_ratio=2, s_latent=4, n_prepend=2)
    base.update(kw)
    return BackboneConfig(**base)


def _backbone(seed=0, **kw):
    return init_backbone(_cfg(**kw), Rng(seed))


def _inputs(cfg, seed=1, batch=2, prompt="a red table with four short thin "
            "legs and a small squared thin top"):
    rng = Rng(seed)
    z_t = rng.normal((batch, cfg.s_latent, cfg.d_model))
    z_c = rng.normal((batch, cfg.s_latent, cfg.d_model))
    t = rng.integers(1, 129, (batch,))
    return z_t, t, [prompt] * batch, z_c


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _attention_brute(q, k, v):
    s, d = q.shape
    out = np.zeros_like(v)
    for i in range(s):
        logits = np.array([np.dot(q[i], k[j]) / np.sqrt(d) for j in range(s)])
        w = np.exp(logits - logits.max())
        w = w / w.sum()
        for j in range(s):
            out[i] += w[j] * v[j]
    return out


def test_attention_matches_brute_force():
    for seed in range(20):
        rng = Rng(seed)
        s = int(rng.integers(1, 9))
        d = int(rng.integers(1, 9))
        q = rng.normal((s, d), dtype=np.float64)
        k = rng.normal((s, d), dtype=np.float64)
        v = rng.normal((s, d), dtype=np.float64)
        got = attention(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.max(np.abs(got - _attention_brute(q, k, v))) <= 1e-6


def test_attention_single_token_returns_v():
    rng = Rng(3)
    q, k, v = (rng.normal((1, 5), dtype=np.float64) for _ in range(3))
    assert np.allclose(attention(Tensor(q), Tensor(k), Tensor(v)).data, v, atol=1e-12)


def test_attention_zero_query_is_mean_of_v():
    rng = Rng(4)
    k = rng.normal((6, 4), dtype=np.float64)
    v = rng.normal((6, 4), dtype=np.float64)
    q = np.zeros((6, 4))
    got = attention(Tensor(q), Tensor(k), Tensor(v)).data
    assert np.allclose(got, np.broadcast_to(v.mean(axis=0), (6, 4)), atol=1e-12)


# ---------------------------------------------------------------------------
# embeddings and token assembly
# ---------------------------------------------------------------------------

def test_text_embed_deterministic_and_null():
    m = _backbone()
    a = m.text_embed(["a red table with four short thin legs and a small squared thin top"])
    b = m.text_embed(["a red table with four short thin legs and a small squared thin top"])
    assert np.array_equal(a.data, b.data)
    null = m.text_embed([""])
    assert not np.allclose(null.data, a.data)


def test_text_embed_rejects_oov():
    m = _backbone()
    with pytest.raises(ValueError, match="vocabulary"):
        m.text_embed(["a burgundy table"])


def test_time_embed_varies():
    m = _backbone()
    e0 = m.time_embed(np.array([0]))
    eT = m.time_embed(np.array([128]))
    assert np.linalg.norm(e0.data - eT.data) > 0.0


def test_sinusoidal_shape_and_range():
    f = sinusoidal_features(np.arange(5), 8)
    assert f.shape == (5, 8)
    assert np.all(np.abs(f) <= 1.0)


def test_assemble_tokens():
    m = _backbone()
    cfg = m.config
    z = Rng(2).normal((1, cfg.s_latent, cfg.d_model))
    seq = m.assemble_tokens(Tensor(z), ["a red lamp with a small base a short "
                                        "pole and a small square shallow shade"],
                            np.array([5]))
    assert seq.data.shape == (1, cfg.seq_len, cfg.d_model)
    # positional encodings make token order matter
    zp = z[:, ::-1, :].copy()
    seq2 = m.assemble_tokens(Tensor(zp), ["a red lamp with a small base a short "
                                          "pole and a small square shallow shade"],
                             np.array([5]))
    assert not np.allclose(seq.data[0, 2:], seq2.data[0, 2:])
    # zero latent still has nonzero prepends
    seq3 = m.assemble_tokens(Tensor(np.zeros_like(z)), [""], np.array([5]))
    assert np.linalg.norm(seq3.data) > 0.0


def test_guidance_stream_independent_of_noisy_latent():
    m = build_variant("spice", _backbone(), Rng(9))
    cfg = m.config
    z_c = Rng(3).normal((1, cfg.s_latent, cfg.d_model))
    t = np.array([7])
    a = m.guidance_stream(Tensor(z_c), [""], t)
    b = m.guidance_stream(Tensor(z_c), [""], t)
    assert np.array_equal(a.data, b.data)
    assert a.data.shape == (1, cfg.seq_len, cfg.d_model)


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

def test_forward_shape_and_determinism():
    m = _backbone()
    z_t, t, prompts, _ = _inputs(m.config)
    a = m.forward(z_t, t, prompts).data
    b = m.forward(z_t, t, prompts).data
    assert a.shape == (2, m.config.s_latent, m.config.d_model)
    assert np.array_equal(a, b)


def test_conditional_requires_guidance():
    base = _backbone()
    for kind in ("spice", "controlnet3d", "k_cross", "v_cross", "qc_only", "no_zeroconv"):
        m = build_variant(kind, base, Rng(1))
        z_t, t, prompts, _ = _inputs(m.config)
        with pytest.raises(ValueError, match="guidance"):
            m.forward(z_t, t, prompts)


def test_backbone_ignores_guidance():
    m = _backbone()
    z_t, t, prompts, z_c = _inputs(m.config)
    a = m.forward(z_t, t, prompts).data
    b = m.forward(z_t, t, prompts, z_c).data
    assert np.array_equal(a, b)


def test_zero_init_invariance():
    base = _backbone(seed=5)
    z_t, t, prompts, z_c = _inputs(base.config, seed=6)
    ref = base.forward(z_t, t, prompts).data
    for kind in ("spice", "controlnet3d", "k_cross", "v_cross"):
        m = build_variant(kind, base, Rng(11))
        out = m.forward(z_t, t, prompts, z_c).data
        assert np.max(np.abs(out - ref)) <= 1e-6, kind


def test_no_zeroconv_and_qc_only_leak_at_init():
    base = _backbone(seed=5)
    z_t, t, prompts, z_c = _inputs(base.config, seed=6)
    ref = base.forward(z_t, t, prompts).data
    for kind in ("no_zeroconv", "qc_only"):
        m = build_variant(kind, base, Rng(11))
        out = m.forward(z_t, t, prompts, z_c).data
        assert np.max(np.abs(out - ref)) > 1e-3, kind


def test_spice_at_init_equals_shap_e_ft():
    base = _backbone(seed=8)
    ft = build_variant("shap_e_ft", base, Rng(1))
    sp = build_variant("spice", base, Rng(2))
    z_t, t, prompts, z_c = _inputs(base.config, seed=9)
    a = ft.forward(z_t, t, prompts).data
    b = sp.forward(z_t, t, prompts, z_c).data
    assert np.max(np.abs(a - b)) <= 1e-6


def test_spice_new_parameter_audit():
    base = _backbone()
    sp = build_variant("spice", base, Rng(0))
    new = set(sp.params) - set(base.params)
    want = {"cond.proj.W", "cond.proj.b"}
    for i in range(base.config.n_blocks):
        want |= {f"block{i}.zc.W", f"block{i}.zc.b", f"block{i}.qc.W", f"block{i}.qc.b"}
    assert new == want
    # zero convs and graft biases start silent
    for i in range(base.config.n_blocks):
        assert np.all(sp.params[f"block{i}.zc.W"].data == 0.0)
        assert np.all(sp.params[f"block{i}.zc.b"].data == 0.0)
        assert np.all(sp.params[f"block{i}.qc.b"].data == 0.0)
        assert np.any(sp.params[f"block{i}.qc.W"].data != 0.0)


def test_controlnet_trainable_split():
    base = _backbone()
    cn = build_variant("controlnet3d", base, Rng(0))
    trainable = set(cn.trainable())
    # trunk, embeddings and head frozen; clone + zero convs + guidance proj train
    assert all(not k.startswith(("ctrl.", "cond.")) for k in set(cn.params) - trainable)
    assert any(k.startswith("ctrl.block") for k in trainable)
    assert f"ctrl.z{base.config.n_blocks}.W" in trainable
    assert "cond.proj.W" in trainable
    assert "embed.vocab" not in trainable
    assert "block0.q.W" not in trainable


def test_variant_unknown_kind():
    base = _backbone()
    with pytest.raises(ValueError):
        build_variant("sdedit3d", base, Rng(0))
    with pytest.raises(ValueError):
        build_variant("lora", base, Rng(0))


def test_gradient_reaches_zero_convs():
    base = _backbone()
    sp = build_variant("spice", base, Rng(3))
    z_t, t, prompts, z_c = _inputs(sp.config, seed=4)
    out = sp.forward(z_t, t, prompts, z_c)
    loss = nc.tmean(out * out)
    nc.backward(loss)
    g = sp.params["block0.zc.W"].grad
    assert g is not None and np.any(g != 0.0)


def test_full_forward_finite_diff():
    # gradient of a scalar loss through the whole spice forward, one
    # parameter tensor of each kind, double precision
    base = init_backbone(_cfg(n_blocks=1), Rng(2))
    sp = build_variant("spice", base, Rng(3))
    for name in ("block0.q.W", "block0.zc.W", "embed.pos", "out.ln.g", "cond.proj.W"):
        p = sp.params[name]
        p.data = p.data.astype(np.float64)
        z_t, t, prompts, z_c = _inputs(sp.config, seed=5, batch=1)
        z_t = z_t.astype(np.float64)
        z_c = z_c.astype(np.float64)

        def loss_fn(tensor):
            old = sp.params[name]
            sp.params[name] = tensor
            out = sp.forward(z_t, t, prompts, z_c)
            sp.params[name] = old
            return nc.tmean(out * out)

        rel = nc.finite_diff_check(loss_fn, p)
        assert rel <= 1e-4, (name, rel)
