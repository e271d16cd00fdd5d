import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxtransducer import lattice as lat
from ctxtransducer.autodiff import Tensor
from ctxtransducer.lattice import LatticeTensor, rnnt_grad, rnnt_loss, rnnt_loss_bruteforce


def uniform(T, U, V=3):
    return LatticeTensor(np.full((T, U + 1, V), -math.log(V)), tuple([1] * U))


def random_lattice(rng, T, U, V, scale=2.0):
    return LatticeTensor.from_logits(rng.normal(0.0, scale, size=(T, U + 1, V)), rng.integers(1, V, size=U))


@pytest.fixture(params=lat.available_backends())
def backend(request):
    previous = lat.BACKEND
    lat.use_backend(request.param)
    yield request.param
    lat.use_backend(previous)


def test_single_path_uniform(backend):
    assert rnnt_loss(uniform(1, 1))[0] == pytest.approx(2 * math.log(3), abs=1e-12)


def test_two_path_uniform(backend):
    assert rnnt_loss(uniform(2, 1))[0] == pytest.approx(math.log(27 / 2), abs=1e-12)


def test_all_blank_uniform(backend):
    assert rnnt_loss(uniform(3, 0))[0] == pytest.approx(3 * math.log(3), abs=1e-12)


def test_empty_labels_closed_form(backend, rng):
    lattice = random_lattice(rng, 5, 0, 4)
    expected = -math.fsum(lattice.log_probs[:, 0, 0])
    assert rnnt_loss(lattice)[0] == pytest.approx(expected, abs=1e-12)
    assert rnnt_loss_bruteforce(lattice, return_count=True) == (pytest.approx(expected, abs=1e-12), 1)


def test_path_counts():
    assert rnnt_loss_bruteforce(uniform(2, 1), return_count=True)[1] == 2
    assert lat.path_count(4, 3) == math.comb(6, 3)


def test_path_limit():
    with pytest.raises(lat.PathLimitError):
        rnnt_loss_bruteforce(uniform(20, 12))


def test_forward_equals_backward(backend, rng):
    for _ in range(20):
        lattice = random_lattice(rng, int(rng.integers(1, 7)), int(rng.integers(0, 5)), int(rng.integers(2, 6)))
        _, tables = rnnt_loss(lattice)
        T, U = lattice.T, lattice.U
        assert tables.alpha[0, 0] == 0.0
        forward = tables.alpha[T - 1, U] + lattice.log_probs[T - 1, U, 0]
        assert abs(forward - tables.beta[0, 0]) <= 1e-9


def test_oracle_sweep(backend, rng):
    worst = 0.0
    for _ in range(100):
        lattice = random_lattice(rng, int(rng.integers(1, 6)), int(rng.integers(0, 4)), int(rng.integers(2, 5)))
        worst = max(worst, abs(rnnt_loss(lattice)[0] - rnnt_loss_bruteforce(lattice)))
    assert worst <= 1e-9


def test_backends_agree(rng):
    if len(lat.available_backends()) < 2:
        pytest.skip("compiled extension not built")
    for _ in range(30):
        lattice = random_lattice(rng, int(rng.integers(1, 30)), int(rng.integers(0, 10)), int(rng.integers(2, 8)))
        out = {}
        for name in ("python", "cython"):
            lat.use_backend(name)
            loss, tables = rnnt_loss(lattice)
            out[name] = (loss, tables.alpha, tables.beta, rnnt_grad(lattice, tables))
        lat.use_backend("cython")
        for a, b in zip(out["python"], out["cython"]):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_gradient_single_path(backend):
    grad = rnnt_grad(uniform(1, 1))
    np.testing.assert_allclose(grad[0, 0], [1 / 3, -2 / 3, 1 / 3], atol=1e-12)


def test_gradient_sums_to_zero(backend, rng):
    for _ in range(50):
        lattice = random_lattice(rng, int(rng.integers(1, 8)), int(rng.integers(0, 5)), int(rng.integers(2, 7)))
        assert np.abs(rnnt_grad(lattice).sum(axis=-1)).max() <= 1e-10


def numeric_logit_grad(fn, logits, h=1e-5):
    out = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        bumped = logits.copy()
        bumped[idx] += h
        up = fn(bumped)
        bumped[idx] -= 2 * h
        out[idx] = (up - fn(bumped)) / (2 * h)
    return out


def relative_error(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def test_gradient_finite_differences(backend, rng):
    for _ in range(10):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 5))
        logits = rng.normal(size=(T, U + 1, V))
        labels = rng.integers(1, V, size=U)
        numeric = numeric_logit_grad(lambda z: rnnt_loss(LatticeTensor.from_logits(z, labels))[0], logits)
        assert relative_error(rnnt_grad(LatticeTensor.from_logits(logits, labels)), numeric) <= 1e-4


def test_lattice_validation():
    with pytest.raises(lat.LatticeError):
        LatticeTensor(np.full((2, 2, 3), -math.log(3)), (3,))
    with pytest.raises(lat.LatticeError):
        LatticeTensor(np.zeros((2, 2, 3)), (1,))
    with pytest.raises(lat.LatticeError):
        LatticeTensor(np.full((0, 1, 3), -math.log(3)), ())


# -- distillation ---------------------------------------------------------


@pytest.mark.parametrize("mode", lat.DISTILL_MODES)
def test_distillation_identity_is_zero(mode, rng):
    lattice = random_lattice(rng, 4, 3, 5)
    assert lat.lattice_distillation(lattice, lattice, mode) == 0.0


def test_distillation_single_node_full():
    teacher = LatticeTensor(np.log([[[0.5, 0.25, 0.25]]]), ())
    student = LatticeTensor(np.full((1, 1, 3), -math.log(3)), ())
    expected = 0.5 * math.log(1.5) + 0.5 * math.log(0.75)
    assert lat.lattice_distillation(teacher, student, "full") == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.05889, abs=1e-5)


def test_collapsed_equals_full_for_binary_vocabulary(rng):
    for _ in range(20):
        T, U = int(rng.integers(1, 6)), int(rng.integers(0, 4))
        teacher, student = random_lattice(rng, T, U, 2), LatticeTensor.from_logits(rng.normal(size=(T, U + 1, 2)), [1] * U)
        teacher = LatticeTensor(teacher.log_probs, student.labels)
        assert lat.lattice_distillation(teacher, student, "collapsed3") == pytest.approx(
            lat.lattice_distillation(teacher, student, "full"), abs=1e-12)


@pytest.mark.parametrize("mode", lat.DISTILL_MODES)
def test_distillation_gradient_finite_differences(mode, rng):
    T, U, V = 3, 2, 5
    teacher = random_lattice(rng, T, U, V)
    logits = rng.normal(size=(T, U + 1, V))
    fn = lambda z: lat.lattice_distillation(teacher, LatticeTensor.from_logits(z, teacher.labels), mode)
    analytic = lat.lattice_distillation_grad(teacher, LatticeTensor.from_logits(logits, teacher.labels), mode)
    assert relative_error(analytic, numeric_logit_grad(fn, logits)) <= 1e-4
    assert np.abs(analytic.sum(axis=-1)).max() <= 1e-10


def test_distillation_shape_mismatch(rng):
    with pytest.raises(lat.LatticeError):
        lat.lattice_distillation(random_lattice(rng, 2, 1, 3), random_lattice(rng, 3, 1, 3))
    with pytest.raises(lat.LatticeError):
        lat.lattice_distillation(random_lattice(rng, 2, 1, 3), random_lattice(rng, 2, 1, 3), "bogus")


def test_autodiff_ops_match_functions(rng):
    logits = rng.normal(size=(4, 3, 5))
    labels = [2, 4]
    x = Tensor(logits, requires_grad=True)
    loss = lat.transducer_loss(x, labels)
    loss.backward()
    lattice = LatticeTensor.from_logits(logits, labels)
    assert loss.item() == rnnt_loss(lattice)[0]
    np.testing.assert_array_equal(x.grad, rnnt_grad(lattice))
    teacher = rng.normal(size=logits.shape)
    s = Tensor(logits, requires_grad=True)
    d = lat.distillation_loss(teacher, s, labels)
    d.backward()
    t_lat = LatticeTensor.from_logits(teacher, labels)
    assert d.item() == lat.lattice_distillation(t_lat, lattice)
    np.testing.assert_array_equal(s.grad, lat.lattice_distillation_grad(t_lat, lattice))


lattice_shapes = st.tuples(st.integers(1, 5), st.integers(0, 3), st.integers(2, 4), st.integers(0, 2**32 - 1))


@settings(max_examples=60, deadline=None)
@given(lattice_shapes)
def test_property_loss_matches_oracle(shape):
    T, U, V, seed = shape
    lattice = random_lattice(np.random.default_rng(seed), T, U, V, scale=4.0)
    assert abs(rnnt_loss(lattice)[0] - rnnt_loss_bruteforce(lattice)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(lattice_shapes)
def test_property_distillation_nonnegative(shape):
    T, U, V, seed = shape
    rng = np.random.default_rng(seed)
    teacher, student = random_lattice(rng, T, U, V), random_lattice(rng, T, U, V)
    student = LatticeTensor(student.log_probs, teacher.labels)
    for mode in lat.DISTILL_MODES:
        assert lat.lattice_distillation(teacher, student, mode) >= 0.0


@settings(max_examples=40, deadline=None)
@given(lattice_shapes)
def test_property_loss_nonnegative_and_normalised(shape):
    T, U, V, seed = shape
    lattice = random_lattice(np.random.default_rng(seed), T, U, V)
    assert lattice.max_normalisation_error() <= 1e-10
    assert rnnt_loss(lattice)[0] >= 0.0
