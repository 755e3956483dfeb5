import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from shubert import numerics as nx
from shubert.numerics import grad_check, relative_error


def test_sum_of_squares_exact():
    theta = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: (theta ** 2).sum(), {"theta": theta}, eps=1e-5)
    assert report.passed
    assert report.worst < 1e-8
    assert theta.tolist() == [1.0, 2.0, 3.0]  # restored after perturbation


def test_constant_loss_zero_gradient():
    p = torch.randn(4, dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: p.sum() * 0.0 + 3.0, [p])
    assert report.passed
    assert report.worst == 0.0


def test_wrong_gradient_is_caught():
    p = torch.randn(5, dtype=torch.float64, requires_grad=True)

    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 3).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x  # should be 3 x^2

    report = grad_check(lambda: Bad.apply(p), [p])
    assert not report.passed


def test_non_finite_loss_reports_failure():
    p = torch.tensor([-1.0], dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: torch.log(p).sum(), {"p": p})
    assert not report.passed
    assert report.failure is not None


def test_non_finite_gradient_names_parameter():
    p = torch.tensor([0.0, 1.0], dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: torch.sqrt(p).sum(), {"p": p})
    assert not report.passed
    assert report.failure == ("p", 0)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(0.1)


def _rand(*shape, gen):
    return torch.randn(*shape, dtype=torch.float64, generator=gen).requires_grad_(True)


PRIMITIVES = {
    "matmul": lambda g: ((a := _rand(3, 4, gen=g)), (b := _rand(4, 2, gen=g)),
                         lambda: (nx.matmul(a, b) ** 2).sum()),
    "conv1d": lambda g: ((x := _rand(2, 3, 20, gen=g)), (w := _rand(4, 3, 5, gen=g)),
                         lambda: torch.tanh(nx.conv1d(x, w, None, stride=3)).sum()),
    "softmax": lambda g: ((x := _rand(3, 5, gen=g)), (c := _rand(3, 5, gen=g)),
                          lambda: (nx.softmax(x) * c).sum()),
    "log": lambda g: ((x := _rand(6, gen=g)), x, lambda: nx.log(1 + x ** 2).sum()),
    "log_softmax": lambda g: ((x := _rand(3, 5, gen=g)), (c := _rand(3, 5, gen=g)),
                              lambda: (nx.log_softmax(x) * c).sum()),
    "row_mean_var": lambda g: ((x := _rand(4, 6, gen=g)), (c := _rand(4, 1, gen=g)),
                               lambda: (nx.row_mean_var(x)[1] * c).sum() + (nx.row_mean_var(x)[0] ** 3).sum()),
    "affine": lambda g: ((x := _rand(5, 3, gen=g)), (w := _rand(2, 3, gen=g)),
                         lambda: torch.sin(nx.affine(x, w, None)).sum()),
    "gather_rows": lambda g: ((x := _rand(6, 3, gen=g)), x,
                              lambda: (nx.gather_rows(x, torch.tensor([0, 2, 2, 5])) ** 2).sum()),
    "scatter_rows": lambda g: ((x := _rand(6, 3, gen=g)), (r := _rand(1, 3, gen=g)),
                               lambda: (nx.scatter_rows(x, torch.tensor([1, 4]), r) ** 3).sum()),
    "cosine_similarity": lambda g: ((a := _rand(4, 5, gen=g)), (b := _rand(4, 5, gen=g)),
                                    lambda: (nx.cosine_similarity(a, b) ** 2).sum()),
    "concat": lambda g: ((a := _rand(2, 3, gen=g)), (b := _rand(1, 3, gen=g)),
                         lambda: (nx.concat([a, b]) ** 3).sum()),
    "sqrt": lambda g: ((x := _rand(6, gen=g)), x, lambda: nx.sqrt(1 + x ** 2).sum()),
    "mean_pool": lambda g: ((x := _rand(7, 3, gen=g)), x, lambda: (nx.mean_pool(x) ** 3).sum()),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    gen = torch.Generator().manual_seed(7)
    a, b, fn = PRIMITIVES[name](gen)
    params = {"a": a} if a is b else {"a": a, "b": b}
    report = grad_check(fn, params, eps=1e-6, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_primitives_match_torch_reference():
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(3, 7, dtype=torch.float64, generator=gen)
    assert torch.allclose(nx.softmax(x), F.softmax(x, -1))
    assert torch.allclose(nx.log_softmax(x), F.log_softmax(x, -1))
    mean, var = nx.row_mean_var(x)
    assert torch.allclose(var[:, 0], x.var(-1, unbiased=False))
    y = torch.randn(3, 7, dtype=torch.float64, generator=gen)
    assert torch.allclose(nx.cosine_similarity(x, y), F.cosine_similarity(x, y, dim=-1))


def test_scatter_rows_keeps_other_rows_bitwise():
    x = torch.randn(5, 3, dtype=torch.float64)
    out = nx.scatter_rows(x, torch.tensor([2]), torch.ones(1, 3, dtype=torch.float64))
    assert torch.equal(out[[0, 1, 3, 4]], x[[0, 1, 3, 4]])
    assert torch.equal(out[2], torch.ones(3, dtype=torch.float64))


def test_sqrt_is_correctly_rounded():
    vals = np.random.default_rng(0).uniform(1e-3, 1e3, 2000)
    got = nx.sqrt(torch.tensor(vals)).numpy()
    assert all(g == math.sqrt(v) for g, v in zip(got, vals))
    s = torch.tensor(vals)
    assert torch.equal(nx.sqrt(s * s), s)


def test_cosine_of_vector_with_itself_is_one():
    x = torch.randn(500, 64, dtype=torch.float64)
    assert torch.equal(nx.cosine_similarity(x, x.clone()), torch.ones(500, dtype=torch.float64))
