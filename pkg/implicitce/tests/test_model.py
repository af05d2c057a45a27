import numpy as np
import pytest
import scipy.sparse as sp

from implicitce.core.errors import ModelError, SimilarityError
from implicitce.models.enums import Mode, SimilarityKind, TransformKind
from implicitce.services.losses import (
    bpr_loss,
    mse_loss,
    per_user_corr_loss,
    sample_corr_loss,
    user_norm_mse_loss,
)
from implicitce.services.model import (
    apply_running_stats,
    backward,
    embed_users,
    forward,
    init_params,
    predict_block,
    similarity,
    similarity_matrix,
    user_aux_embedding,
)


def _rows(rng, n_users=3, n_aux=7):
    dense = rng.integers(0, 4, size=(n_users, n_aux)).astype(float)
    dense[:, 0] += 1.0
    return sp.csr_matrix(dense)


def _params(biases=False, batch_norm=True, transform=TransformKind.MLP, seed=0):
    return init_params(
        7, 6, d_aux=4, d=4, transform=transform, hidden_sizes=[5],
        batch_norm=batch_norm, biases=biases, n_users=3, seed=seed,
    )


def test_similarity_examples():
    u = np.array([0.3, -1.2, 2.0])
    assert similarity(SimilarityKind.COSINE, u, u) == pytest.approx(1.0)
    assert similarity(SimilarityKind.EUCLIDEAN, u, u) == 1.0
    assert similarity(SimilarityKind.DOT, [1, 2], [3, 4]) == 11.0
    with pytest.raises(SimilarityError):
        similarity(SimilarityKind.COSINE, np.zeros(3), u)


def test_similarity_matrix_matches_scalar(rng):
    u, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    for kind in SimilarityKind:
        P, _ = similarity_matrix(kind, u, v)
        for i in range(3):
            for j in range(5):
                assert P[i, j] == pytest.approx(similarity(kind, u[i], v[j]), abs=1e-12)


def test_cosine_and_euclidean_ranges(rng):
    u, v = rng.normal(size=(4, 6)), rng.normal(size=(9, 6))
    cos, _ = similarity_matrix(SimilarityKind.COSINE, u, v)
    euc, _ = similarity_matrix(SimilarityKind.EUCLIDEAN, u, v)
    assert np.all(np.abs(cos) <= 1.0 + 1e-12)
    assert np.all(euc <= 1.0)


def test_user_aux_embedding_is_linear(rng):
    params = _params()
    row = _rows(rng, n_users=1)
    e = user_aux_embedding(params, row)
    np.testing.assert_allclose(user_aux_embedding(params, row * 3.5), 3.5 * e, rtol=1e-12)
    idx, vals = row.indices, row.data
    np.testing.assert_allclose(user_aux_embedding(params, (idx, vals)), e)


def test_inference_is_deterministic_and_pure(rng):
    params = _params()
    rows = _rows(rng)
    before = {k: v.copy() for k, v in params.tensors().items()}
    a = embed_users(params, rows)
    forward(params, rows, Mode.TRAIN, dropout_rate=0.5, rng=3)
    b = embed_users(params, rows)
    np.testing.assert_array_equal(a, b)
    for k, v in params.tensors().items():
        np.testing.assert_array_equal(v, before[k])


def test_train_forward_is_deterministic_given_seed(rng):
    params = _params()
    rows = _rows(rng)
    a, _ = forward(params, rows, Mode.TRAIN, dropout_rate=0.3, rng=11)
    b, _ = forward(params, rows, Mode.TRAIN, dropout_rate=0.3, rng=11)
    np.testing.assert_array_equal(a, b)


def test_forward_errors(rng):
    params = _params()
    with pytest.raises(ModelError):
        forward(params, sp.csr_matrix((0, 7)))
    with pytest.raises(ModelError):
        forward(params, sp.csr_matrix(np.ones((2, 5))))
    with pytest.raises(ModelError):
        forward(params, _rows(rng, n_users=1), Mode.TRAIN)


def test_identity_transform_needs_matching_sizes():
    with pytest.raises(ModelError):
        init_params(3, 3, d_aux=4, d=5, transform=TransformKind.IDENTITY)


def test_running_stats_move_toward_batch(rng):
    params = _params()
    _, trace = forward(params, _rows(rng), Mode.TRAIN)
    apply_running_stats(params, trace)
    layer = params.layers[0]
    np.testing.assert_allclose(layer.running_mean, 0.1 * trace.layers[0].batch_mean)


def test_params_validate_catches_width_mismatch():
    params = _params()
    params.layers[-1].weight = np.zeros((5, 3))
    params.layers[-1].bias = np.zeros(3)
    with pytest.raises(ModelError):
        params.validate()


# --- finite differences ------------------------------------------------------

USERS = np.array([0, 1, 2])
ITEMS = np.array([0, 2, 3, 5, 1, 4])
PAIRS = [(0, 1), (2, 5), (4, 3)]


def _counts(rng):
    Y = rng.integers(0, 5, size=(3, 6)).astype(float)
    Y[:, 0] = 0.0
    Y[:, 1] = 6.0
    return Y


def _bpr_block(P, Y):
    value, dP = 0.0, np.zeros_like(P)
    for i in range(P.shape[0]):
        pairs = [(a, b) if Y[i, b] > Y[i, a] else (b, a) for a, b in PAIRS if Y[i, a] != Y[i, b]]
        res = bpr_loss(P[i], Y[i], pairs)
        value += res.value
        dP[i] = res.dP
    return value, dP


LOSSES = {
    "mse": lambda P, Y: (mse_loss(P, Y).value, mse_loss(P, Y).dP),
    "user_norm_mse": lambda P, Y: (user_norm_mse_loss(P, Y).value, user_norm_mse_loss(P, Y).dP),
    "per_user_corr": lambda P, Y: (per_user_corr_loss(P, Y).value, per_user_corr_loss(P, Y).dP),
    "sample_corr": lambda P, Y: (sample_corr_loss(P, Y).value, sample_corr_loss(P, Y).dP),
    "bpr": _bpr_block,
}


def _loss_at(params, rows, kind, loss, Y):
    block = predict_block(params, rows, ITEMS, kind, Mode.TRAIN, users=USERS)
    return loss(block.values, Y)[0]


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def _assert_gradient_close(analytic, numeric, name):
    # the bias feeding batch-norm and the user bias under correlation losses have a zero gradient
    if np.linalg.norm(numeric) < 1e-8:
        assert np.abs(analytic).max() < 1e-6, name
        assert np.abs(numeric).max() < 1e-6, name
    else:
        assert _relative_error(analytic, numeric) < 1e-5, name


@pytest.mark.parametrize("loss_name", sorted(LOSSES))
@pytest.mark.parametrize("kind", list(SimilarityKind))
def test_full_model_gradients_match_finite_differences(rng, loss_name, kind):
    params = _params(biases=True, seed=5)
    params.user_bias[:] = rng.normal(size=3) * 0.1
    params.item_bias[:] = rng.normal(size=6) * 0.1
    for layer in params.layers:
        if layer.batch_norm:
            layer.gamma[:] = 1.0 + 0.1 * rng.normal(size=layer.gamma.shape)
            layer.beta[:] = 0.1 * rng.normal(size=layer.beta.shape)
    rows = _rows(rng)
    Y = _counts(rng)
    loss = LOSSES[loss_name]

    block = predict_block(params, rows, ITEMS, kind, Mode.TRAIN, users=USERS)
    _, dP = loss(block.values, Y)
    analytic = backward(block, params, dP).to_dense(params)

    eps = 1e-6
    for name, tensor in params.tensors().items():
        if "running_" in name:
            continue
        numeric = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            old = tensor[idx]
            tensor[idx] = old + eps
            up = _loss_at(params, rows, kind, loss, Y)
            tensor[idx] = old - eps
            down = _loss_at(params, rows, kind, loss, Y)
            tensor[idx] = old
            numeric[idx] = (up - down) / (2 * eps)
        _assert_gradient_close(analytic[name], numeric, name)


def test_gradients_with_inference_mode_batch_norm(rng):
    params = _params(seed=2)
    for layer in params.layers:
        if layer.batch_norm:
            layer.running_mean[:] = rng.normal(size=layer.running_mean.shape)
            layer.running_var[:] = 1.0 + rng.random(layer.running_var.shape)
    rows, Y = _rows(rng), _counts(rng)
    block = predict_block(params, rows, ITEMS, SimilarityKind.DOT, Mode.INFERENCE)
    res = mse_loss(block.values, Y)
    weight = params.layers[0].weight
    analytic = backward(block, params, res.dP).to_dense(params)["layers.0.weight"]
    eps = 1e-6
    numeric = np.zeros_like(weight)
    for idx in np.ndindex(weight.shape):
        old = weight[idx]
        weight[idx] = old + eps
        up = mse_loss(predict_block(params, rows, ITEMS, SimilarityKind.DOT).values, Y).value
        weight[idx] = old - eps
        down = mse_loss(predict_block(params, rows, ITEMS, SimilarityKind.DOT).values, Y).value
        weight[idx] = old
        numeric[idx] = (up - down) / (2 * eps)
    assert _relative_error(analytic, numeric) < 1e-5


def test_duplicate_items_accumulate_gradients(rng):
    params = _params(batch_norm=False)
    rows = _rows(rng)
    block = predict_block(params, rows, np.array([1, 1, 2]), SimilarityKind.DOT)
    grads = backward(block, params, np.ones_like(block.values))
    assert grads.target_rows.tolist() == [1, 2]
    single = backward(
        predict_block(params, rows, np.array([1]), SimilarityKind.DOT), params, np.ones((3, 1))
    )
    np.testing.assert_allclose(grads.target[0], 2 * single.target[0])


def test_backward_rejects_wrong_shape(rng):
    params = _params()
    block = predict_block(params, _rows(rng), ITEMS, SimilarityKind.DOT, Mode.TRAIN)
    with pytest.raises(ModelError):
        backward(block, params, np.zeros((3, 2)))


def test_single_entry_aggregation_returns_the_embedding_row():
    params = _params()
    row = sp.csr_matrix(([1.0], ([0], [3])), shape=(1, 7))
    np.testing.assert_array_equal(user_aux_embedding(params, row), params.aux_embeddings[3])
    weighted = sp.csr_matrix(([2.0, 3.0], ([0, 0], [1, 5])), shape=(1, 7))
    dense = np.zeros(7)
    dense[1], dense[5] = 2.0, 3.0
    np.testing.assert_allclose(user_aux_embedding(params, weighted), dense @ params.aux_embeddings, rtol=1e-12)


def test_identity_and_unit_linear_transforms_pass_embeddings_through(rng):
    rows = _rows(rng)
    identity = init_params(7, 6, d_aux=4, d=4, transform=TransformKind.IDENTITY)
    agg = np.vstack([user_aux_embedding(identity, rows[i]) for i in range(3)])
    np.testing.assert_allclose(embed_users(identity, rows), agg, rtol=1e-12)

    linear = init_params(7, 6, d_aux=4, d=4, transform=TransformKind.LINEAR)
    linear.layers[0].weight[:] = np.eye(4)
    linear.aux_embeddings[:] = identity.aux_embeddings
    out, _ = forward(linear, rows, Mode.TRAIN)
    np.testing.assert_allclose(out, agg, rtol=1e-12)


def test_zero_upstream_gradient_gives_zero_gradients(rng):
    params = _params(biases=True)
    block = predict_block(params, _rows(rng), ITEMS, SimilarityKind.COSINE, Mode.TRAIN, users=USERS)
    for name, g in backward(block, params, np.zeros_like(block.values)).to_dense(params).items():
        assert not g.any(), name


def test_one_by_one_block_is_the_similarity(rng):
    params = _params(batch_norm=False)
    row = _rows(rng, n_users=1)
    block = predict_block(params, row, np.array([4]), SimilarityKind.EUCLIDEAN)
    u = embed_users(params, row)[0]
    assert block.values.shape == (1, 1)
    assert block.values[0, 0] == pytest.approx(similarity(SimilarityKind.EUCLIDEAN, u, params.target_embeddings[4]))
