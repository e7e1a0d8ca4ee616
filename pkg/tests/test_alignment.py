import numpy as np
import pytest

from fedca.alignment import (AlignmentContext, AlignTrainConfig, EmptyDataset, SubsetTooLarge, alignment_loss,
                             sample_alignment_subset, train_alignment_model)
from fedca.data import LabeledDataset, gen_blobs
from fedca.models import (ArchitectureSpec, ParameterVector, ShapeMismatch, flatten, forward_raw, init_model,
                          unflatten)
from fedca.numcore import finite_difference_check

SPEC = ArchitectureSpec(input_dim=4, encoder_hidden_dims=(5,), representation_dim=3,
                        projection_hidden_dims=(), projection_dim=2)


@pytest.fixture(scope="module")
def public():
    return gen_blobs(3, 4, 10, 0.3, seed=11)


def test_identical_models_have_zero_loss(public):
    p = init_model(SPEC, 0)
    ctx = AlignmentContext(p, public, 5)
    loss, grad = alignment_loss(ctx, p, public.features[:5])
    assert loss == 0.0 and not grad.any()


def test_all_ones_offset_in_h_gives_three():
    # One linear encoder layer and a head that ignores h, so only h moves.
    spec = ArchitectureSpec(input_dim=2, encoder_hidden_dims=(), representation_dim=3,
                            projection_hidden_dims=(), projection_dim=2)
    base = init_model(spec, 1)
    layers = unflatten(base.values.copy(), spec)
    layers[1][0][:] = 0.0
    layers[1][1][:] = [1.0, 2.0]
    v_a = flatten(layers)
    layers[0][1][:] += 1.0
    v_u = flatten(layers)
    ds = LabeledDataset(np.array([[0.5, -0.2]]), np.array([0]), 1)
    ctx = AlignmentContext(ParameterVector(v_a, spec), ds, 1)
    loss, _ = alignment_loss(ctx, ParameterVector(v_u, spec), ds.features)
    assert loss == pytest.approx(3.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_elementwise_brute_force(seed, public):
    a, u = init_model(SPEC, seed), init_model(SPEC, seed + 100)
    ctx = AlignmentContext(a, public, 8)
    x = public.features[:8]
    ha, za = forward_raw(a, x)
    hu, zu = forward_raw(u, x)
    brute = 0.0
    for i in range(8):
        brute += sum((hu[i, k] - ha[i, k]) ** 2 for k in range(ha.shape[1]))
        brute += sum((zu[i, k] - za[i, k]) ** 2 for k in range(za.shape[1]))
    assert alignment_loss(ctx, u, x)[0] == pytest.approx(brute, abs=1e-12)
    perm = np.random.default_rng(seed).permutation(8)
    assert alignment_loss(ctx, u, x[perm])[0] == pytest.approx(brute, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed, public):
    rng = np.random.default_rng(seed)
    a = init_model(SPEC, seed)
    u = ParameterVector(init_model(SPEC, seed + 50).values + 0.1 * rng.standard_normal(SPEC.param_count), SPEC)
    ctx = AlignmentContext(a, public, 6)
    x = public.features[rng.choice(len(public), 6, replace=False)]
    err = finite_difference_check(lambda v: alignment_loss(ctx, ParameterVector(v, SPEC), x)[0],
                                  lambda v: alignment_loss(ctx, ParameterVector(v, SPEC), x)[1],
                                  u.values, eps=1e-6, floor=1e-5)
    assert err < 1e-4


def test_context_is_frozen_and_validated(public):
    p = init_model(SPEC, 0)
    ctx = AlignmentContext(p, public, 5)
    with pytest.raises(ValueError):
        ctx.params_align.values[0] = 1.0
    p.values[0] = 123.0
    assert ctx.params_align.values[0] != 123.0
    with pytest.raises(SubsetTooLarge):
        AlignmentContext(p, public, len(public) + 1)
    with pytest.raises(ValueError):
        AlignmentContext(p, public, 2, beta=-1.0)


def test_output_width_mismatch(public):
    other = ArchitectureSpec(input_dim=4, representation_dim=3, projection_dim=5)
    ctx = AlignmentContext(init_model(SPEC, 0), public, 2)
    with pytest.raises(ShapeMismatch):
        alignment_loss(ctx, init_model(other, 0), public.features[:2])


def test_subset_sampling(public):
    whole = sample_alignment_subset(public, len(public), round=3, seed=0)
    np.testing.assert_array_equal(whole, public.features)
    a = sample_alignment_subset(public, 6, round=2, seed=9)
    np.testing.assert_array_equal(a, sample_alignment_subset(public, 6, round=2, seed=9))
    rounds = [sample_alignment_subset(public, 6, round=r, seed=9) for r in range(5)]
    assert any(not np.array_equal(rounds[0], r) for r in rounds[1:])
    with pytest.raises(SubsetTooLarge):
        sample_alignment_subset(public, len(public) + 1, round=0, seed=0)


def test_training_contract(public):
    np.testing.assert_array_equal(train_alignment_model(public, SPEC, AlignTrainConfig(epochs=0), seed=4).values,
                                  init_model(SPEC, 4).values)
    cfg = AlignTrainConfig(epochs=15, batch_size=10, learning_rate=3e-3)
    hist = []
    a = train_alignment_model(public, SPEC, cfg, seed=4, history=hist)
    b = train_alignment_model(public, SPEC, cfg, seed=4)
    np.testing.assert_array_equal(a.values, b.values)
    assert len(hist) == 16
    assert hist[-1] <= hist[0]
    with pytest.raises(EmptyDataset):
        train_alignment_model(None, SPEC, cfg)
