import json
import math

import numpy as np
import pytest

from gclab import blocks, ops, rng
from gclab.blocks import BlockSpec, build_block, forward, random_params
from gclab.errors import ConfigError, ConstructionError, ShapeError
from gclab.gradcheck import grad_check
from gclab.tensor import Tensor, rng_tensor

ALL_SPECS = [
    BlockSpec("nl", 8, variant="gaussian"),
    BlockSpec("nl", 8, variant="e-gaussian"),
    BlockSpec("nl", 8, variant="dot"),
    BlockSpec("nl", 8, variant="concat"),
    BlockSpec("snl", 8),
    BlockSpec("snl", 8, snl_form="pre_distributive"),
    blocks.gc_spec(8, r=2),
    blocks.se_spec(8, r=2),
    BlockSpec("framework", 8, bottleneck_ratio=2, pooling="avg", fusion="add"),
    BlockSpec("framework", 8, pooling="att", fusion="add", transform="single_linear"),
    BlockSpec("framework", 8, pooling="avg", fusion="add", transform="none"),
    BlockSpec("framework", 8, bottleneck_ratio=2, pooling="att", fusion="scale",
              transform="bottleneck_sigmoid"),
]


def spec_id(s):
    if s.kind == "framework":
        return f"fw-{s.pooling}-{s.transform}-{s.fusion}"
    if s.kind == "nl":
        return f"nl-{s.variant}"
    return f"snl-{s.snl_form}" if s.kind == "snl" else s.kind


IDS = [spec_id(s) for s in ALL_SPECS]

# Biases that only shift every softmax logit equally: their gradient is
# analytically zero, so a relative check would compare rounding noise.
SHIFT_INVARIANT = {"key.bias"}


def x_of(seed, shape=(1, 8, 3, 3)):
    return rng_tensor(rng.derive_seed(seed, "x"), shape, "normal")


def constant_positions(c, h, w, seed=0):
    v = rng.sample(seed, (c,), "normal")
    return Tensor(np.broadcast_to(v[None, :, None, None], (1, c, h, w)).copy())


# -- construction -------------------------------------------------------------

def test_gc_boundary_ratio_shapes():
    p = build_block(blocks.gc_spec(16, r=16), 0)
    assert p["key.weight"].shape == (1, 16)
    assert p["v1.weight"].shape == (1, 16)
    assert p["v2.weight"].shape == (16, 1)


def test_gc_ratio_too_large():
    with pytest.raises(ConstructionError):
        blocks.gc_spec(8, r=16)


def test_bottleneck_needs_divisibility():
    with pytest.raises(ConstructionError):
        blocks.se_spec(12, r=8)


def test_nl_hidden_ratio_divisibility():
    with pytest.raises(ConstructionError):
        BlockSpec("nl", 9)


def test_build_is_deterministic():
    a = build_block(blocks.gc_spec(32), 3)
    b = build_block(blocks.gc_spec(32), 3)
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()


def test_build_init_conventions():
    p = build_block(blocks.gc_spec(32, r=4), 1)
    assert np.all(p["v2.weight"].data == 0)
    assert np.all(p["v1.bias"].data == 0)
    assert np.all(p["ln.gamma"].data == 1) and np.all(p["ln.beta"].data == 0)
    bound = math.sqrt(6 / 32)
    assert np.all(np.abs(p["v1.weight"].data) <= bound)
    assert np.any(p["v1.weight"].data != 0)


def test_se_second_layer_not_zeroed():
    p = build_block(blocks.se_spec(16, r=4), 0)
    assert np.any(p["v2.weight"].data != 0)


@pytest.mark.parametrize("bad", [
    dict(kind="mlp", channels=8),
    dict(kind="gc", channels=16, variant="dot"),
    dict(kind="nl", channels=8, variant="cosine"),
    dict(kind="framework", channels=16, fusion="scale", transform="bottleneck_ln_relu"),
    dict(kind="framework", channels=16, fusion="add", transform="bottleneck_sigmoid"),
    dict(kind="framework", channels=16, pooling="max"),
    dict(kind="snl", channels=8, snl_form="sideways"),
])
def test_spec_config_errors(bad):
    with pytest.raises(ConfigError):
        BlockSpec(**bad)


def test_nl_default_variant():
    assert BlockSpec("nl", 8).variant == "e-gaussian"


def test_spec_json_round_trip():
    for spec in ALL_SPECS:
        assert BlockSpec.from_json(spec.to_json()) == spec
    obj = json.loads(ALL_SPECS[0].to_json())
    assert set(obj) == {"kind", "channels", "variant", "hidden_ratio", "bottleneck_ratio",
                        "pooling", "fusion", "transform", "snl_form"}


def test_spec_json_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        BlockSpec.from_dict({"kind": "gc", "channels": 16, "heads": 2})


def test_retarget_checks_shapes():
    p = build_block(blocks.gc_spec(16), 0)
    with pytest.raises(ShapeError):
        p.retarget(blocks.se_spec(16))


def test_input_channel_mismatch():
    p = build_block(blocks.gc_spec(16), 0)
    with pytest.raises(ShapeError):
        forward(p, x_of(0, (1, 8, 2, 2)))


# -- nl -----------------------------------------------------------------------

def test_egaussian_two_position_example():
    spec = BlockSpec("nl", 2, variant="e-gaussian", hidden_ratio=1)
    p = build_block(spec, 0).with_tensors(**{
        "query.weight": Tensor(np.eye(2)), "key.weight": Tensor(np.eye(2))})
    x = Tensor(np.array([[[[1.0, 0.0]], [[0.0, 1.0]]]]))  # positions e1, e2
    att = blocks.attention_map(p, x)
    e = math.e
    np.testing.assert_allclose(att.weights[0, 0], [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    np.testing.assert_allclose(att.weights[0, 0], [0.7311, 0.2689], atol=1e-4)


@pytest.mark.parametrize("variant", blocks.NL_VARIANTS)
def test_nl_zero_out_projection_is_identity(variant):
    p = random_params(BlockSpec("nl", 8, variant=variant), 2)
    p = p.with_tensors(**{"out.weight": Tensor(np.zeros((8, 4))), "out.bias": Tensor(np.zeros(8))})
    x = x_of(2)
    z, _ = forward(p, x)
    assert z.data.tobytes() == x.data.tobytes()


@pytest.mark.parametrize("variant", ["gaussian", "e-gaussian"])
def test_nl_constant_input_rows_uniform(variant):
    p = random_params(BlockSpec("nl", 8, variant=variant), 0)
    att = blocks.attention_map(p, constant_positions(8, 3, 4))
    np.testing.assert_allclose(att.weights, 1 / 12, atol=1e-12)


@pytest.mark.parametrize("variant", ["gaussian", "e-gaussian"])
def test_nl_rows_normalised(variant):
    for seed in range(5):
        att = blocks.attention_map(random_params(BlockSpec("nl", 8, variant=variant), seed), x_of(seed))
        np.testing.assert_allclose(att.weights.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(att.weights >= 0)


def test_nl_dot_matches_loop():
    spec = BlockSpec("nl", 4, variant="dot")
    p = random_params(spec, 1)
    x = x_of(1, (1, 4, 2, 3))
    att = blocks.attention_map(p, x).weights[0]
    xs = x.data[0].reshape(4, 6)
    wq, bq = p["query.weight"].data, p["query.bias"].data
    wk, bk = p["key.weight"].data, p["key.bias"].data
    for i in range(6):
        for j in range(6):
            want = (wq @ xs[:, i] + bq) @ (wk @ xs[:, j] + bk) / 6
            assert abs(att[i, j] - want) < 1e-12


def test_nl_concat_matches_loop():
    spec = BlockSpec("nl", 4, variant="concat")
    p = random_params(spec, 4)
    x = x_of(4, (1, 4, 2, 2))
    att = blocks.attention_map(p, x).weights[0]
    xs = x.data[0].reshape(4, 4)
    wq, bq = p["query.weight"].data[0], p["query.bias"].data[0]
    for i in range(4):
        for j in range(4):
            want = max(0.0, wq @ np.concatenate([xs[:, i], xs[:, j]]) + bq) / 4
            assert abs(att[i, j] - want) < 1e-12
    assert np.all(att >= 0)


def test_nl_egaussian_matches_loop():
    spec = BlockSpec("nl", 4, variant="e-gaussian")
    p = random_params(spec, 5)
    x = x_of(5, (1, 4, 2, 2))
    z, _ = forward(p, x)
    xs = x.data[0].reshape(4, 4)
    lin = lambda name, v: p[f"{name}.weight"].data @ v + p[f"{name}.bias"].data
    for i in range(4):
        logits = np.array([lin("query", xs[:, i]) @ lin("key", xs[:, j]) for j in range(4)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        y = sum(w[j] * lin("value", xs[:, j]) for j in range(4))
        want = xs[:, i] + lin("out", y)
        np.testing.assert_allclose(z.data[0].reshape(4, 4)[:, i], want, atol=1e-12)


def test_nl_gaussian_trace_has_no_key_query():
    _, trace = forward(random_params(BlockSpec("nl", 8, variant="gaussian"), 0), x_of(0))
    assert trace.key is None and trace.query is None
    assert trace.prod.shape == (1, 9, 9)


def test_egaussian_random_rows_differ():
    from gclab.analysis import avg_dist
    att = blocks.attention_map(build_block(BlockSpec("nl", 8), 0), x_of(0, (1, 8, 6, 6)))
    assert avg_dist(att.rows(0)) > 0


# -- snl ----------------------------------------------------------------------

def test_snl_zero_key_gives_mean_context():
    spec = BlockSpec("snl", 4)
    p = random_params(spec, 3).with_tensors(**{
        "key.weight": Tensor(np.zeros((1, 4))), "key.bias": Tensor(np.zeros(1))})
    x = x_of(3, (1, 4, 3, 2))
    z, trace = forward(p, x)
    np.testing.assert_allclose(trace.att.weights, 1 / 6, atol=1e-15)
    mean = x.data[0].reshape(4, 6).mean(axis=1)
    ctx = p["value.weight"].data @ mean + p["value.bias"].data
    np.testing.assert_allclose(z.data - x.data, np.broadcast_to(ctx[None, :, None, None], x.shape),
                               atol=1e-12)


def test_snl_single_position():
    spec = BlockSpec("snl", 4)
    p = random_params(spec, 6)
    x = x_of(6, (1, 4, 1, 1))
    z, trace = forward(p, x)
    assert trace.att.weights[0, 0] == 1.0
    want = x.data[0, :, 0, 0] + p["value.weight"].data @ x.data[0, :, 0, 0] + p["value.bias"].data
    np.testing.assert_allclose(z.data[0, :, 0, 0], want, atol=1e-12)


def test_snl_forms_agree_seed0():
    spec = BlockSpec("snl", 8)
    p = build_block(spec, 0)
    x = x_of(0, (1, 8, 4, 4))
    pre, _ = blocks.snl_forward(p, x, "pre_distributive")
    post, _ = blocks.snl_forward(p, x, "post_distributive")
    assert np.max(np.abs(pre.data - post.data)) < 1e-10


def test_snl_replicated_rows_identical():
    att = blocks.attention_map(random_params(BlockSpec("snl", 8), 1), x_of(1), per_query=True)
    assert att.is_global and att.per_query
    rows = att.rows(0)
    assert rows.shape == (9, 9)
    assert np.all(rows == rows[0])


# -- gc / se / framework ------------------------------------------------------

def test_gc_identity_at_init():
    for seed in range(5):
        x = x_of(seed, (2, 16, 3, 3))
        z, _ = forward(build_block(blocks.gc_spec(16, r=4), seed), x)
        assert z.data.tobytes() == x.data.tobytes()


def test_gc_constant_input_constant_output():
    p = random_params(blocks.gc_spec(8, r=4), 0)
    z, _ = forward(p, constant_positions(8, 3, 3))
    flat = z.data[0].reshape(8, 9)
    np.testing.assert_allclose(flat, flat[:, :1].repeat(9, axis=1), atol=1e-14)


def test_gc_matches_loop():
    spec = blocks.gc_spec(8, r=4)
    p = random_params(spec, 7)
    x = x_of(7, (1, 8, 2, 2))
    z, _ = forward(p, x)
    xs = x.data[0].reshape(8, 4)
    logits = p["key.weight"].data[0] @ xs + p["key.bias"].data[0]
    a = np.exp(logits - logits.max())
    a /= a.sum()
    ctx = xs @ a
    hdn = p["v1.weight"].data @ ctx + p["v1.bias"].data
    hdn = (hdn - hdn.mean()) / np.sqrt(hdn.var() + blocks.LN_EPS)
    hdn = np.maximum(hdn * p["ln.gamma"].data + p["ln.beta"].data, 0)
    delta = p["v2.weight"].data @ hdn + p["v2.bias"].data
    np.testing.assert_allclose(z.data[0].reshape(8, 4), xs + delta[:, None], atol=1e-12)


def test_se_zero_excitation_halves():
    spec = blocks.se_spec(8, r=4)
    p = random_params(spec, 0).with_tensors(**{
        "v2.weight": Tensor(np.zeros((8, 2))), "v2.bias": Tensor(np.zeros(8))})
    x = x_of(0)
    z, _ = forward(p, x)
    np.testing.assert_allclose(z.data, x.data / 2, atol=0)


def test_se_zero_input():
    z, _ = forward(random_params(blocks.se_spec(8, r=4), 0), Tensor(np.zeros((1, 8, 3, 3))))
    assert np.all(z.data == 0)


def test_framework_avg_context_is_mean():
    spec = BlockSpec("framework", 4, pooling="avg", fusion="add", transform="none")
    x = x_of(0, (1, 4, 2, 3))
    z, _ = forward(build_block(spec, 0), x)
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    np.testing.assert_allclose(z.data - x.data, np.broadcast_to(mean, x.shape), atol=1e-14)


@pytest.mark.parametrize("make", [lambda: blocks.gc_spec(16, r=4), lambda: blocks.se_spec(16, r=4)])
def test_framework_subsumes(make):
    spec = make()
    fw = blocks.framework_equivalent(spec)
    assert set(blocks.param_shapes(fw)) == set(blocks.param_shapes(spec))
    for seed in range(5):
        p = random_params(spec, seed)
        x = x_of(seed, (2, 16, 3, 2))
        direct, _ = forward(p, x)
        via, _ = blocks.framework_forward(p.retarget(fw), x)
        assert np.max(np.abs(direct.data - via.data)) < 1e-12


def test_framework_rejects_other_kinds():
    p = build_block(blocks.gc_spec(16), 0)
    with pytest.raises(ConfigError):
        blocks.framework_forward(p, x_of(0, (1, 16, 2, 2)))


@pytest.mark.parametrize("spec", [s for s in ALL_SPECS if s.is_global], ids=spec_id)
def test_global_attention_normalised(spec):
    att = blocks.attention_map(random_params(spec, 3), x_of(3))
    assert att.is_global and not att.per_query
    np.testing.assert_allclose(att.weights.sum(axis=-1), 1.0, atol=1e-12)


# -- invariants over every block ----------------------------------------------

@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
def test_output_probe_is_residual(spec):
    p = random_params(spec, 1)
    x = x_of(1)
    z, trace = forward(p, x)
    np.testing.assert_allclose(trace.output, (z.data - x.data).reshape(1, 8, 9), atol=1e-12)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
def test_permutation_equivariance(spec):
    p = random_params(spec, 0)
    x = x_of(0, (1, 8, 3, 4))
    z, _ = forward(p, x)
    for k in range(3):
        perm = np.argsort(rng.uniform01(rng.derive_seed(0, "perm", k), 12))
        xp = Tensor(x.data.reshape(1, 8, 12)[:, :, perm].reshape(1, 8, 3, 4))
        zp, _ = forward(p, xp)
        want = z.data.reshape(1, 8, 12)[:, :, perm]
        assert np.max(np.abs(zp.data.reshape(1, 8, 12) - want)) < 1e-10


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
def test_forward_is_deterministic(spec):
    a, _ = forward(random_params(spec, 9), x_of(9))
    b, _ = forward(random_params(spec, 9), x_of(9))
    assert a.data.tobytes() == b.data.tobytes()


def weighted_sum(z, seed):
    w = rng_tensor(rng.derive_seed(seed, "w"), z.shape, "normal")
    return ops.sum(ops.mul(z, w))


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
def test_block_input_gradients(spec):
    for seed in range(10):
        p = random_params(spec, seed)
        x = x_of(seed, (1, 8, 2, 3))
        err = grad_check(lambda t: weighted_sum(forward(p, t)[0], seed), x)
        assert err < 1e-5, (seed, err)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
def test_block_param_gradients(spec):
    for seed in range(10):
        p = random_params(spec, seed)
        x = x_of(seed, (1, 8, 2, 3))
        for name in p:
            if name in SHIFT_INVARIANT and spec.variant not in ("dot", "concat"):
                continue
            f = lambda t: weighted_sum(forward(p.with_tensors(**{name: t}), x)[0], seed)
            err = grad_check(f, p[name])
            assert err < 1e-5, (seed, name, err)


def test_gc_sum_of_outputs_gradcheck():
    p = random_params(blocks.gc_spec(8, r=4), 0)
    x = x_of(0, (1, 8, 6, 6))
    assert grad_check(lambda t: ops.sum(forward(p, t)[0]), x) < 1e-5
