import numpy as np
import pytest

from rsvlm import autodiff as ad
from rsvlm import numerics as num
from rsvlm import prompter as pr
from rsvlm.errors import ShapeError
from rsvlm.numerics import Rng


def _cfg(n_agg=4, dim=8, levels=2, heads=2, level_dims=None):
    return pr.PrompterConfig(n_agg, dim, levels, heads, level_dims or [])


def _params(cfg, seed=0):
    return pr.init_prompter(cfg, Rng(seed))


def _layer_norm_ref(x, eps=1e-5):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _mha_ref(block, q_in, ctx, heads):
    """Independent multi-head composition from numerics.scaled_dot_attention."""
    q = q_in @ block.wq.value
    k = ctx @ block.wk.value
    v = ctx @ block.wv.value
    d = q.shape[1]
    dk = d // heads
    outs = [
        num.scaled_dot_attention(q[:, h * dk:(h + 1) * dk], k[:, h * dk:(h + 1) * dk],
                                 v[:, h * dk:(h + 1) * dk])
        for h in range(heads)
    ]
    return np.concatenate(outs, axis=1) @ block.wo.value


def test_config_validation():
    with pytest.raises(ShapeError):
        _cfg(n_agg=0)
    with pytest.raises(ShapeError):
        _cfg(dim=7, heads=2)
    with pytest.raises(ShapeError):
        pr.PrompterConfig(2, 8, 2, 2, [8])


def test_aggregate_query_shapes():
    cfg = _cfg(n_agg=4, dim=8)
    params = _params(cfg)
    f_user = Rng(1).normal((3, 8))
    z1 = pr.aggregate_query(params, f_user)
    assert z1.shape == (4, 8)
    # the intermediate concat is (4+3) x 8; dim mismatch raises
    with pytest.raises(ShapeError):
        pr.aggregate_query(params, Rng(1).normal((3, 9)))


def test_attention_convexity_with_identity_projections():
    cfg = _cfg(n_agg=3, dim=4, heads=1)
    params = _params(cfg)
    eye = np.eye(4)
    block = pr.AttnBlockParams(*(ad.const(eye.copy()) for _ in range(4)))
    x = Rng(2).normal((5, 4))
    out = pr.attention_output(block, ad.const(x), ad.const(x), heads=1).value
    lo, hi = x.min(axis=0), x.max(axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_aggregate_query_matches_per_head_oracle():
    cfg = _cfg(n_agg=4, dim=8, heads=2)
    params = _params(cfg, seed=3)
    f_user = Rng(4).normal((5, 8))
    f_in = np.concatenate([params.f_agg.value, f_user], axis=0)
    expected = (f_in + _mha_ref(params.self_attn, _layer_norm_ref(f_in), f_in, 2))[:4]
    got = pr.aggregate_query(params, f_user)
    assert np.max(np.abs(got - expected)) < 1e-10


def test_attend_semantics_single_row_pre_residual():
    cfg = _cfg(n_agg=3, dim=8, heads=2)
    params = _params(cfg, seed=5)
    z1 = Rng(6).normal((3, 8))
    f_sem = Rng(7).normal((1, 8))
    pre = pr.attention_output(params.sem_attn, ad.const(_layer_norm_ref(z1)),
                              ad.const(f_sem), heads=2).value
    # softmax over one key is 1 regardless of query: all rows equal the
    # projected semantic row
    projected = (f_sem @ params.sem_attn.wv.value) @ params.sem_attn.wo.value
    assert np.max(np.abs(pre - np.repeat(projected, 3, axis=0))) < 1e-12
    full = pr.attend_semantics(params, z1, f_sem)
    assert np.max(np.abs(full - (z1 + pre))) < 1e-12


def test_attend_semantics_sensitive_to_semantics():
    cfg = _cfg()
    params = _params(cfg, seed=8)
    z1 = Rng(9).normal((4, 8))
    f_sem = Rng(10).normal((3, 8))
    base = pr.attend_semantics(params, z1, f_sem)
    bumped = f_sem.copy()
    bumped[1] += 0.5
    assert not np.allclose(base, pr.attend_semantics(params, z1, bumped))


def test_attend_semantics_matches_per_head_oracle():
    cfg = _cfg(n_agg=4, dim=8, heads=2)
    params = _params(cfg, seed=11)
    z1 = Rng(12).normal((4, 8))
    f_sem = Rng(13).normal((6, 8))
    expected = z1 + _mha_ref(params.sem_attn, _layer_norm_ref(z1), f_sem, 2)
    assert np.max(np.abs(pr.attend_semantics(params, z1, f_sem) - expected)) < 1e-10


def test_attend_level_reduces_to_semantic_attention_when_dims_match():
    cfg = _cfg(n_agg=3, dim=8, levels=2, heads=2, level_dims=[8, 8])
    params = _params(cfg, seed=14)
    params.level_attn[0] = pr.AttnBlockParams(
        *(ad.const(t.value.copy()) for t in (
            params.sem_attn.wq, params.sem_attn.wk, params.sem_attn.wv, params.sem_attn.wo))
    )
    z2 = Rng(15).normal((3, 8))
    feats = Rng(16).normal((5, 8))
    assert np.max(np.abs(
        pr.attend_level(params, z2, feats, level=1) - pr.attend_semantics(params, z2, feats)
    )) < 1e-12


def test_attend_level_single_token_pre_residual():
    cfg = _cfg(n_agg=2, dim=8, levels=2, heads=2, level_dims=[5, 6])
    params = _params(cfg, seed=17)
    z2 = Rng(18).normal((2, 8))
    f_vis = Rng(19).normal((1, 5))
    block = params.level_attn[0]
    pre = pr.attention_output(block, ad.const(_layer_norm_ref(z2)), ad.const(f_vis), 2).value
    projected = (f_vis @ block.wv.value) @ block.wo.value
    assert np.max(np.abs(pre - np.repeat(projected, 2, axis=0))) < 1e-12


def test_attend_level_validations():
    cfg = _cfg(levels=2, level_dims=[8, 6])
    params = _params(cfg)
    z2 = Rng(20).normal((4, 8))
    with pytest.raises(ShapeError):
        pr.attend_level(params, z2, Rng(21).normal((3, 6)), level=3)
    with pytest.raises(ShapeError):
        pr.attend_level(params, z2, Rng(21).normal((3, 8)), level=2)


def test_attend_level_matches_per_head_oracle():
    cfg = _cfg(n_agg=3, dim=8, levels=2, heads=2, level_dims=[5, 7])
    params = _params(cfg, seed=22)
    z2 = Rng(23).normal((3, 8))
    feats = Rng(24).normal((6, 7))
    expected = z2 + _mha_ref(params.level_attn[1], _layer_norm_ref(z2), feats, 2)
    assert np.max(np.abs(pr.attend_level(params, z2, feats, level=2) - expected)) < 1e-10


def _toy_inputs(cfg, seed=30):
    rng = Rng(seed)
    return pr.PromptInputs(
        f_user=rng.normal((3, cfg.dim)),
        f_semantic=rng.normal((5, cfg.dim)),
        f_vis=[rng.normal((4 + l, cfg.level_dims[l])) for l in range(cfg.levels)],
    )


def test_build_prompt_toy_shape_and_level_blocks():
    cfg = _cfg(n_agg=4, dim=8, levels=2)
    params = _params(cfg, seed=31)
    inputs = _toy_inputs(cfg)
    s = pr.build_prompt(params, inputs)
    assert s.shape == (8, 8)
    z1 = pr.aggregate_query(params, inputs.f_user)
    z2 = pr.attend_semantics(params, z1, inputs.f_semantic)
    assert np.array_equal(s[0:4], pr.attend_level(params, z2, inputs.f_vis[0], 1))
    assert np.array_equal(s[4:8], pr.attend_level(params, z2, inputs.f_vis[1], 2))


def test_build_prompt_shape_contract_sweep():
    for n_agg, levels in ((1, 1), (3, 2), (2, 5), (144, 3)):
        cfg = _cfg(n_agg=n_agg, dim=8, levels=levels, heads=2,
                   level_dims=[6] * levels)
        params = _params(cfg, seed=32)
        s = pr.build_prompt(params, _toy_inputs(cfg))
        assert s.shape == pr.prompt_shape(cfg) == (n_agg * levels, 8)


def test_per_level_locality_bit_exact():
    cfg = _cfg(n_agg=3, dim=8, levels=3, level_dims=[4, 5, 6])
    params = _params(cfg, seed=33)
    inputs = _toy_inputs(cfg, seed=34)
    base = pr.build_prompt(params, inputs)
    bumped = pr.PromptInputs(
        f_user=inputs.f_user,
        f_semantic=inputs.f_semantic,
        f_vis=[inputs.f_vis[0], inputs.f_vis[1], inputs.f_vis[2] + 1.5],
    )
    other = pr.build_prompt(params, bumped)
    assert np.array_equal(base[0:3], other[0:3])
    assert np.array_equal(base[3:6], other[3:6])
    assert not np.allclose(base[6:9], other[6:9])


def test_build_prompt_deterministic():
    cfg = _cfg()
    params = _params(cfg, seed=35)
    inputs = _toy_inputs(cfg, seed=36)
    assert np.array_equal(pr.build_prompt(params, inputs), pr.build_prompt(params, inputs))


def test_prompter_gradients_match_finite_differences():
    cfg = pr.PrompterConfig(3, 8, 2, 2, [5, 6])
    params = _params(cfg, seed=37)
    inputs = _toy_inputs(cfg, seed=38)
    consts = (ad.const(inputs.f_user), ad.const(inputs.f_semantic),
              [ad.const(f) for f in inputs.f_vis])

    def build():
        return ad.sum_all(pr.build_prompt_graph(params, consts[0], consts[1], consts[2]))

    report = ad.check_gradients(build, params.named_parameters(), n_probes=80, rng=Rng(39))
    assert report.ok(1e-4), report


def test_full_scale_shape_contract():
    cfg = pr.PrompterConfig(144, 3584, 3, 8, [1152, 1152, 1152])
    assert pr.prompt_shape(cfg) == (432, 3584)
