import math

import pytest
import torch
from hypothesis import given, strategies as st

from mobprivacy.errors import ConfigError, NumericalError
from mobprivacy.model import (
    PROB_FLOOR,
    RECOMMENDED_WEIGHTS,
    LagrangeWeights,
    ModelDims,
    PAEModel,
    build_standalone,
    compute_losses,
    loss_privacy,
    loss_reconstruction,
    loss_sum,
    loss_utility,
)
from mobprivacy.training import ExampleTensors

TINY = ModelDims(num_locations=4, num_users=3, embed_dim=6, hidden_dim=8, head_dim=5)


def batch(dims=TINY, n=6, sl=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    ctx = torch.stack([torch.randint(0, dims.num_locations, (n, sl), generator=g),
                       torch.randint(0, 7, (n, sl), generator=g),
                       torch.randint(0, 24, (n, sl), generator=g)], -1)
    y = torch.randint(0, dims.num_locations, (n,), generator=g)
    z = torch.randint(0, dims.num_users, (n,), generator=g)
    return ExampleTensors(ctx, y, z, dims.num_locations, dtype).batch()


# --------------------------------------------------------------------------- structure


def test_default_hidden_size_shapes_features():
    dims = ModelDims(num_locations=5, num_users=2)
    X, *_ = batch(dims, n=3, sl=4)
    assert PAEModel(dims).encode(X).shape == (3, 4, 100)


def test_pad_only_batch_is_finite():
    ctx = torch.tensor([[[TINY.num_locations, -1, -1]] * 3] * 2)
    X, mask, _, _ = ExampleTensors(ctx, [0, 0], [0, 0], TINY.num_locations).batch()
    assert not mask.any()
    assert torch.isfinite(PAEModel(TINY).encode(X)).all()


def test_encode_is_pure():
    m = PAEModel(TINY)
    X, *_ = batch()
    assert torch.equal(m.encode(X), m.encode(X))


def test_encode_non_finite_raises():
    m = PAEModel(TINY)
    with torch.no_grad():
        m.encoder.embed.weight[0, 0] = float("nan")
    X, *_ = batch()
    with pytest.raises(NumericalError):
        m.encode(X)


def test_decoder_mirrors_encoder():
    m = PAEModel(TINY)
    assert [s[::-1] for s in reversed(m.encoder.layer_shapes())] == m.decoder.layer_shapes()


def test_reconstruction_shape_and_nonzero_loss():
    m = PAEModel(TINY)
    X, mask, *_ = batch()
    X_rec = m.decode(m.encode(X))
    assert X_rec.shape == X.shape
    assert loss_reconstruction(X, X_rec, mask).item() > 0


def test_heads_are_distributions():
    m = PAEModel(TINY)
    X, *_ = batch(n=10)
    F = m.encode(X)
    for probs in (m.predict_next(F), m.reidentify(F)):
        assert (probs >= 0).all()
        assert torch.allclose(probs.sum(-1), torch.ones(10), atol=1e-6)


def test_single_class_heads():
    dims = ModelDims(1, 1, 4, 5, 3)
    m = PAEModel(dims)
    X, *_ = batch(dims)
    F = m.encode(X)
    assert torch.equal(m.predict_next(F), torch.ones(6, 1))
    assert torch.equal(m.reidentify(F), torch.ones(6, 1))


def test_zero_logits_uniform():
    m = PAEModel(TINY)
    for head in (m.utility, m.privacy):
        torch.nn.init.zeros_(head.out.weight)
        torch.nn.init.zeros_(head.out.bias)
    F = m.encode(batch()[0])
    assert torch.allclose(m.predict_next(F), torch.full((6, 4), 0.25))
    assert torch.allclose(m.reidentify(F), torch.full((6, 3), 1 / 3))


def test_seeded_init_is_reproducible_and_shared():
    a, b = PAEModel(TINY, seed=3), PAEModel(TINY, seed=3)
    for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(va, vb), k
    p = build_standalone("predictor", TINY, seed=3)
    for k, v in p.state_dict().items():
        assert torch.equal(v, a.state_dict()[k]), k
    c = PAEModel(TINY, seed=4)
    assert not torch.equal(c.encoder.embed.weight, a.encoder.embed.weight)


def test_first_step_losses_deterministic():
    X, mask, y, z = batch()
    l1 = compute_losses(PAEModel(TINY, seed=1), X, mask, y, z)
    l2 = compute_losses(PAEModel(TINY, seed=1), X, mask, y, z)
    assert all(torch.equal(l1[k], l2[k]) for k in l1)


def test_standalone_structure():
    kinds = {"autoencoder": "decoder", "predictor": "utility", "reidentifier": "privacy"}
    params, models = {}, []
    for kind, head in kinds.items():
        m = build_standalone(kind, TINY)
        models.append(m)
        assert m.heads == (head,)
        assert all(getattr(m, h) is None for h in kinds.values() if h != head)
        params[kind] = {id(p) for p in m.component_parameters(head)}
    full = PAEModel(TINY)
    pred = build_standalone("predictor", TINY)
    assert [p.shape for p in pred.utility.parameters()] == [p.shape for p in full.utility.parameters()]
    ids = list(params.values())
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_standalone_unknown_kind():
    with pytest.raises(ConfigError):
        build_standalone("generator", TINY)


# --------------------------------------------------------------------------- losses


def test_reconstruction_loss_examples():
    X = torch.zeros(1, 2, 2)
    mask = torch.tensor([[True, True]])
    assert loss_reconstruction(X, X, mask).item() == 0.0
    assert loss_reconstruction(X, torch.ones(1, 2, 2), mask).item() == 1.0
    X_hat = torch.randn(1, 2, 2)
    assert torch.isclose(loss_reconstruction(X, 2 * X_hat, mask), 4 * loss_reconstruction(X, X_hat, mask))


def test_reconstruction_loss_ignores_masked_steps():
    X = torch.zeros(1, 2, 3)
    X_hat = torch.tensor([[[9.0, 9.0, 9.0], [1.0, 1.0, 1.0]]])
    assert loss_reconstruction(X, X_hat, torch.tensor([[False, True]])).item() == 1.0


def test_reconstruction_loss_errors():
    with pytest.raises(ValueError):
        loss_reconstruction(torch.zeros(1, 2, 2), torch.zeros(1, 2, 3), torch.ones(1, 2, dtype=torch.bool))
    with pytest.raises(ValueError):
        loss_reconstruction(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.zeros(1, 2, dtype=torch.bool))


@pytest.mark.parametrize("fn", [loss_utility, loss_privacy])
def test_cross_entropy_examples(fn):
    assert fn(torch.tensor([1]), torch.tensor([[0.0, 1.0, 0.0]])).item() == 0.0
    assert fn(torch.tensor([0, 2]), torch.full((2, 5), 0.2)).item() == pytest.approx(math.log(5), rel=1e-6)
    clamp = fn(torch.tensor([0]), torch.tensor([[0.0, 1.0]], dtype=torch.float64)).item()
    assert clamp == pytest.approx(-math.log(PROB_FLOOR)) and clamp == pytest.approx(27.631, abs=1e-3)
    with pytest.raises(ValueError):
        fn(torch.tensor([3]), torch.full((1, 3), 1 / 3))


def test_loss_sum_examples():
    assert loss_sum(LagrangeWeights(0, 1, 0), 123.0, 2.0, 456.0) == 2.0
    assert loss_sum(LagrangeWeights(0.1, 0.8, 0.1), 10.0, 1.0, 2.0) == pytest.approx(-0.4, abs=1e-12)
    assert RECOMMENDED_WEIGHTS.as_tuple() == (0.1, 0.6, 0.3)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 50), st.floats(0, 50), st.floats(0, 50))
def test_loss_sum_linear_in_each_weight(l1, l2, l3, a, b, c):
    base = (l1 + 1, l2 + 1, l3 + 1)
    for axis in range(3):
        vals = []
        for t in (0.0, 0.5, 1.0):
            w = list(base)
            w[axis] = t
            vals.append(loss_sum(LagrangeWeights(*w), a, b, c))
        assert vals[1] - vals[0] == pytest.approx(vals[2] - vals[1], abs=1e-9)


def test_loss_sum_sign_structure():
    w = LagrangeWeights(0.2, 0.5, 0.3)
    L = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
    loss_sum(w, L[0], L[1], L[2]).backward()
    assert L.grad.tolist() == pytest.approx([-0.2, 0.5, -0.3])


@pytest.mark.parametrize("w", [(0, 0, 0), (-0.1, 0.5, 0.5), (float("nan"), 1, 0)])
def test_weights_validation(w):
    with pytest.raises(ConfigError):
        LagrangeWeights(*w)


def test_gradients_match_finite_differences_smoke():
    from oracles import central_difference

    torch.manual_seed(0)
    m = PAEModel(TINY, seed=0, dtype=torch.float64)
    X, mask, y, z = batch(dtype=torch.float64)
    p = m.encoder.embed.weight

    def total():
        losses = compute_losses(m, X, mask, y, z)
        return loss_sum(RECOMMENDED_WEIGHTS, losses["L_R"], losses["L_U"], losses["L_P"])

    grad = torch.autograd.grad(total(), p)[0].view(-1)
    for i in (0, 7, 19):
        fd = central_difference(total, p, i)
        assert abs(grad[i].item() - fd) <= 1e-4 * max(abs(fd), abs(grad[i].item()), 1e-8) + 1e-10
