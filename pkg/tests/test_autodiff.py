import zlib

import numpy as np
import pytest

from egodoa.model import autodiff as ad
from egodoa.model.autodiff import Tensor

from gradcheck import TOL, check_tensors


def leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def weighted_sum(out: Tensor, seed=99) -> Tensor:
    # random projection so every output entry influences the scalar differently
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum_all(ad.mul(out, Tensor(w)))


CASES = {
    "add_broadcast": lambda a, b, c: ad.add(a, c),
    "sub": lambda a, b, c: ad.sub(a, b),
    "mul_broadcast": lambda a, b, c: ad.mul(a, c),
    "scale": lambda a, b, c: ad.scale(a, -1.7),
    "reshape": lambda a, b, c: ad.reshape(a, (3, 8)),
    "transpose": lambda a, b, c: ad.transpose(a, (2, 0, 1)),
    "concat": lambda a, b, c: ad.concat([a, b], axis=1),
    "getitem": lambda a, b, c: a[:, 1, :],
    "getitem_fancy": lambda a, b, c: a[np.array([0, 0, 1]), 2],
    "broadcast_to": lambda a, b, c: ad.broadcast_to(c, (2, 3, 4)),
    "sum_axis": lambda a, b, c: ad.sum_axis(a, 1),
    "square": lambda a, b, c: ad.square(a),
    "softmax": lambda a, b, c: ad.softmax(a, axis=-1),
    "sigmoid": lambda a, b, c: ad.sigmoid(a),
    "gelu": lambda a, b, c: ad.gelu(a),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b, c = leaf(rng, 2, 3, 4), leaf(rng, 2, 3, 4), leaf(rng, 1, 4)
    fn = CASES[name]
    errs = check_tensors(lambda: weighted_sum(fn(a, b, c)), {"a": a, "b": b, "c": c})
    assert max(errs.values()) < TOL, errs


def test_matmul_batched_and_fast_path():
    rng = np.random.default_rng(1)
    a, w, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 2, 4, 2)
    errs = check_tensors(lambda: weighted_sum(ad.matmul(a, w)), {"a": a, "w": w})
    errs.update(check_tensors(lambda: weighted_sum(ad.matmul(a, b)), {"a2": a, "b": b}))
    assert max(errs.values()) < TOL, errs


def test_log_gradient():
    rng = np.random.default_rng(2)
    a = leaf(rng, 3, 4, positive=True)
    assert max(check_tensors(lambda: weighted_sum(ad.log(a)), {"a": a}).values()) < TOL


def test_sum_all_and_layer_norm():
    rng = np.random.default_rng(3)
    x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
    errs = check_tensors(lambda: weighted_sum(ad.layer_norm(x, g, b)), {"x": x, "g": g, "b": b})
    errs.update(check_tensors(lambda: ad.sum_all(ad.square(x)), {"x2": x}))
    assert max(errs.values()) < TOL, errs


def test_upsample_gradient():
    rng = np.random.default_rng(4)
    x = leaf(rng, 2, 3, 5)
    assert max(check_tensors(lambda: weighted_sum(ad.upsample_bilinear(x, 6, 10)), {"x": x}).values()) < TOL


def test_shared_node_accumulates():
    rng = np.random.default_rng(5)
    a = leaf(rng, 3)
    y = ad.mul(a, a)
    loss = ad.sum_all(ad.add(y, y))
    loss.backward()
    np.testing.assert_allclose(a.grad, 4 * a.data)


def test_softmax_rows_on_simplex():
    x = Tensor(np.random.default_rng(6).standard_normal((50, 360)) * 30)
    s = ad.softmax(x).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1, atol=1e-12)


def test_bilinear_matrix_rows_sum_to_one():
    m = ad.bilinear_matrix(45, 90)
    np.testing.assert_allclose(m.sum(axis=1), 1)
    assert m.shape == (90, 45)
