import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitguide.autodiff import Tensor, backward, ops
from vitguide.guidance import (
    GuidancePlan,
    LocalityGuidance,
    TransformedPair,
    TransformKind,
    align_spatial,
    guidance_loss,
    init_projections,
    pair_loss,
    select_positions,
    similarity_matrix,
    tokens_to_map,
    total_loss,
    transform_channels,
)
from vitguide.models import MapFeature, TokenFeature

POSITION_TABLE = {
    (3, 0.25): (1, 2, 3),
    (3, 0.5): (1, 3, 6),
    (3, 0.75): (1, 5, 9),
    (3, 1.0): (1, 6, 12),
    (2, 0.25): (1, 3),
    (2, 0.5): (1, 6),
    (2, 0.75): (1, 9),
    (2, 1.0): (1, 12),
}


@pytest.mark.parametrize("stages,ratio", list(POSITION_TABLE))
def test_select_positions_reference_rows(stages, ratio):
    plan = select_positions(12, stages, ratio)
    assert plan.student_blocks == POSITION_TABLE[(stages, ratio)]
    assert plan.teacher_indices == tuple(range(1, stages + 1))


def _brute_positions(n_t, n_c, r):
    # Independent oracle in exact rational arithmetic, no shared helpers.
    from fractions import Fraction

    r = Fraction(r).limit_denominator(10**6)
    return tuple(((k - 1) * (r * n_t - 1)).__floordiv__(n_c - 1) + 1 for k in range(1, n_c + 1))


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 40), st.integers(2, 6), st.integers(1, 100))
def test_select_positions_properties(n_t, n_c, pct):
    r = pct / 100
    try:
        plan = select_positions(n_t, n_c, r)
    except ValueError:
        blocks = _brute_positions(n_t, n_c, r)
        assert r * n_t < 1 or any(b <= a for a, b in zip(blocks, blocks[1:])) or blocks[-1] > n_t
        return
    assert plan.student_blocks == _brute_positions(n_t, n_c, r)
    assert plan.student_blocks[0] == 1
    assert all(1 <= i <= n_t for i in plan.student_blocks)
    assert all(b > a for a, b in zip(plan.student_blocks, plan.student_blocks[1:]))


@pytest.mark.parametrize(
    "args", [(12, 1, 1.0), (12, 3, 0.0), (12, 3, 1.5), (12, 3, 0.05), (2, 3, 1.0)]
)
def test_select_positions_errors(args):
    with pytest.raises(ValueError):
        select_positions(*args)


def _tokens(b, grid, c, cls=True, seed=0, requires_grad=False):
    n = grid[0] * grid[1] + int(cls)
    data = np.random.default_rng(seed).standard_normal((b, n, c))
    return TokenFeature(Tensor(data, requires_grad=requires_grad), grid, 1, cls)


def _map(b, size, c, seed=1):
    return MapFeature(Tensor(np.random.default_rng(seed).standard_normal((b, size[0], size[1], c))), 1)


def test_tokens_to_map_drops_class_token():
    tok = _tokens(2, (2, 3), 4)
    m = tokens_to_map(tok)
    assert m.shape == (2, 2, 3, 4)
    np.testing.assert_array_equal(m.data[:, 0, 1], tok.tokens.data[:, 2])


def test_align_upsamples_to_larger_grid():
    f_vt, f_cnn = align_spatial(_tokens(2, (8, 8), 4), _map(2, (16, 16), 6))
    assert f_vt.shape == (2, 16, 16, 4)
    assert f_cnn.shape == (2, 16, 16, 6)


def test_align_same_grid_is_identity():
    tok, fmap = _tokens(1, (8, 8), 3), _map(1, (8, 8), 5)
    f_vt, f_cnn = align_spatial(tok, fmap)
    np.testing.assert_array_equal(f_vt.data, tok.tokens.data[:, 1:].reshape(1, 8, 8, 3))
    np.testing.assert_array_equal(f_cnn.data, fmap.map.data)


def test_align_preserves_teacher_corners():
    fmap = _map(1, (4, 4), 2)
    _, f_cnn = align_spatial(_tokens(1, (8, 8), 3), fmap)
    for y, x, sy, sx in [(0, 0, 0, 0), (0, -1, 0, -1), (-1, 0, -1, 0), (-1, -1, -1, -1)]:
        np.testing.assert_allclose(f_cnn.data[0, y, x], fmap.map.data[0, sy, sx])


def test_align_rejects_batch_mismatch():
    with pytest.raises(ValueError):
        align_spatial(_tokens(2, (4, 4), 3), _map(3, (4, 4), 3))


def test_identity_projection_returns_input():
    plan = select_positions(12, 2, 1.0)
    proj = init_projections(plan, 6, [6, 6], np.random.default_rng(0), identity=True)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 3, 6)))
    out = transform_channels("linear", x, x, proj[0])
    np.testing.assert_allclose(out.student.data, x.data, rtol=1e-6)


def test_identity_projection_reduces_to_plain_distance():
    plan = GuidancePlan(((1, 1),), 1.0, 1, 2)
    proj = init_projections(plan, 4, [4], np.random.default_rng(0), identity=True, dtype=np.float64)
    tok, fmap = _tokens(3, (4, 4), 4), _map(3, (4, 4), 4)
    guide = LocalityGuidance(plan, "linear", proj)
    _, loss = guide([tok], [fmap])
    f_vt = tok.tokens.data[:, 1:].reshape(3, 4, 4, 4)
    expected = ((f_vt - fmap.map.data) ** 2).sum() / 16 / 3
    np.testing.assert_allclose(loss.item(), expected, rtol=1e-12)


def test_default_projection_is_small_and_unbiased():
    plan = select_positions(12, 3, 1.0)
    proj = init_projections(plan, 32, [16, 32, 64], np.random.default_rng(0))
    for p, cj in zip(proj, [16, 32, 64]):
        assert p.weight.shape == (1, 1, 32, cj)
        assert np.abs(p.weight.data).max() <= 1 / math.sqrt(32)
        np.testing.assert_array_equal(p.bias.data, 0.0)


def test_at_identical_features_give_zero_loss():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 4, 5)))
    pair = transform_channels("at", x, Tensor(x.data.copy()))
    assert pair_loss(pair).item() == 0.0


def test_at_compares_channel_counts_freely():
    rng = np.random.default_rng(0)
    pair = transform_channels("at", Tensor(rng.standard_normal((2, 4, 4, 5))), Tensor(rng.standard_normal((2, 4, 4, 9))))
    assert pair.student.shape == pair.teacher.shape == (2, 16)
    np.testing.assert_allclose(np.linalg.norm(pair.student.data, axis=1), 1.0)


def test_sp_gram_of_identical_pair():
    x = np.random.default_rng(0).standard_normal((1, 3, 3, 2))
    batch = Tensor(np.concatenate([x, x]))
    raw = ops.matmul(ops.reshape(batch, (2, -1)), ops.transpose(ops.reshape(batch, (2, -1)), (1, 0))).data
    assert np.allclose(raw, raw[0, 0])
    np.testing.assert_allclose(similarity_matrix(batch).data, np.full((2, 2), math.sqrt(0.5)))


def test_none_kind_has_nothing_to_compare():
    x = Tensor(np.zeros((1, 2, 2, 1)))
    with pytest.raises(ValueError):
        transform_channels(TransformKind.NONE, x, x)
    with pytest.raises(ValueError):
        LocalityGuidance(select_positions(12, 3, 1.0), "none")
    with pytest.raises(ValueError):
        TransformKind.parse("bogus")


def _linear_pair(diff_value, b=1, size=2):
    student = Tensor(np.full((b, size, size, 1), diff_value))
    teacher = Tensor(np.zeros((b, size, size, 1)))
    return TransformedPair(student, teacher, TransformKind.LINEAR, (size, size))


def test_guidance_loss_unit_difference():
    plan = GuidancePlan(((1, 1),), 1.0, 1, 2)
    per_pair, total = guidance_loss(plan, [_linear_pair(1.0)])
    assert total.item() == 1.0 and per_pair[0].item() == 1.0


def test_guidance_loss_sums_pairs():
    plan = GuidancePlan(((1, 1), (2, 2)), 1.0, 2, 2)
    per_pair, total = guidance_loss(plan, [_linear_pair(math.sqrt(0.5)), _linear_pair(0.5)])
    np.testing.assert_allclose([p.item() for p in per_pair], [0.5, 0.25])
    np.testing.assert_allclose(total.item(), 0.75)


def test_guidance_loss_zero_for_identical_features():
    plan = GuidancePlan(((1, 1),), 1.0, 1, 2)
    _, total = guidance_loss(plan, [_linear_pair(0.0)])
    assert total.item() == 0.0


def test_guidance_loss_pair_count_mismatch():
    plan = GuidancePlan(((1, 1), (2, 2)), 1.0, 2, 2)
    with pytest.raises(ValueError):
        guidance_loss(plan, [_linear_pair(1.0)])


def test_guidance_loss_is_batch_mean():
    plan = GuidancePlan(((1, 1),), 1.0, 1, 2)
    _, one = guidance_loss(plan, [_linear_pair(1.0, b=1)])
    _, four = guidance_loss(plan, [_linear_pair(1.0, b=4)])
    assert one.item() == four.item()


def test_total_loss_examples():
    out = total_loss(2.0, 1.0, 2.5)
    assert out.total == 4.5
    assert total_loss(2.0, 1.0, 0.0).total == 2.0
    assert total_loss(2.0, 0.0, 7.0).total == 2.0
    with pytest.raises(ValueError):
        total_loss(2.0, 1.0, -1.0)
    with pytest.raises(ValueError):
        total_loss(2.0, 1.0, float("nan"))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 100))
def test_total_loss_invariants(l_cls, l_guid, beta):
    out = total_loss(l_cls, l_guid, beta)
    assert abs(out.total - (l_cls + beta * l_guid)) <= 1e-6 * max(1.0, out.total)
    doubled = total_loss(l_cls, l_guid, 2 * beta)
    assert doubled.total - l_cls == pytest.approx(2 * (out.total - l_cls), rel=1e-12, abs=1e-12)


def test_total_loss_objective_keeps_guidance_on_tape_at_zero_beta():
    a = Tensor(np.array(1.0), requires_grad=True)
    g = Tensor(np.array(3.0), requires_grad=True)
    out = total_loss(ops.mul(a, a), ops.mul(g, g), 0.0)
    ga, gg = backward(out.objective, [a, g])
    assert ga == 2.0 and gg == 0.0


def _guided_setup(kind, b=4, seed=0):
    rng = np.random.default_rng(seed)
    plan = select_positions(4, 2, 1.0)
    proj = init_projections(plan, 6, [4, 8], rng, dtype=np.float64) if kind == "linear" else None
    taps = [
        TokenFeature(Tensor(rng.standard_normal((b, 17, 6)), requires_grad=True), (4, 4), i + 1, True) for i in range(4)
    ]
    teacher = [
        MapFeature(Tensor(rng.standard_normal((b, 8, 8, 4)), requires_grad=True), 1),
        MapFeature(Tensor(rng.standard_normal((b, 4, 4, 8)), requires_grad=True), 2),
    ]
    return LocalityGuidance(plan, kind, proj), taps, teacher


def _permuted(taps, teacher, perm):
    p_taps = [TokenFeature(Tensor(t.tokens.data[perm]), t.grid, t.block_index, True) for t in taps]
    p_teacher = [MapFeature(Tensor(m.map.data[perm]), m.stage_index) for m in teacher]
    return p_taps, p_teacher


@pytest.mark.parametrize("kind", ["linear", "at", "sp"])
def test_guidance_batch_permutation(kind):
    guide, taps, teacher = _guided_setup(kind)
    perm = np.array([3, 1, 0, 2])
    per_pair, total = guide(taps, teacher)
    p_per_pair, p_total = guide(*_permuted(taps, teacher, perm))
    np.testing.assert_allclose(p_total.item(), total.item(), rtol=1e-10)
    for a, b in zip(per_pair, p_per_pair):
        np.testing.assert_allclose(a.item(), b.item(), rtol=1e-10)


def test_sp_gram_rows_permute_consistently():
    x = np.random.default_rng(0).standard_normal((4, 3, 3, 2))
    perm = np.array([2, 0, 3, 1])
    g = similarity_matrix(Tensor(x)).data
    gp = similarity_matrix(Tensor(x[perm])).data
    np.testing.assert_allclose(gp, g[np.ix_(perm, perm)], rtol=1e-12)


@pytest.mark.parametrize("kind", ["linear", "at", "sp"])
def test_gradients_never_reach_teacher(kind):
    guide, taps, teacher = _guided_setup(kind)
    _, total = guide(taps, teacher)
    backward(total)
    for m in teacher:
        assert m.map.grad is None
    assert taps[0].tokens.grad is not None
    if kind == "linear":
        assert all(p.grad is not None for p in guide.parameters())


def test_initial_guidance_is_finite_and_positive():
    guide, taps, teacher = _guided_setup("linear")
    _, total = guide(taps, teacher)
    assert math.isfinite(total.item()) and total.item() > 0
