import numpy as np
import pytest
import torch

from cvattn import autodiff
from cvattn.attention import ComplexLinear
from cvattn.autodiff import CParameter, backward, grad_check
from cvattn.ctensor import CTensor


def test_modulus_squared_gradient():
    z = CParameter(torch.tensor(3.0, dtype=torch.float64), torch.tensor(4.0, dtype=torch.float64))
    holder = torch.nn.Module()
    holder.z = z
    loss = z.value.re ** 2 + z.value.im ** 2
    grads = backward(loss, holder)
    assert grads["z"].re.item() == 6.0
    assert grads["z"].im.item() == 8.0


def test_real_part_of_product():
    x = 0.7 - 1.3j
    w = CParameter(torch.tensor(0.2, dtype=torch.float64), torch.tensor(-0.5, dtype=torch.float64))
    holder = torch.nn.Module()
    holder.w = w
    loss = (w.value * complex(x)).re
    g = backward(loss, holder)["w"]
    assert g.re.item() == pytest.approx(x.real)
    assert g.im.item() == pytest.approx(-x.imag)


def test_complex_loss_rejected():
    holder = torch.nn.Module()
    holder.w = CParameter(torch.ones(1, dtype=torch.float64), torch.ones(1, dtype=torch.float64))
    v = holder.w.value
    with pytest.raises(ValueError, match="imaginary"):
        backward(CTensor(v.re.sum().reshape(1), v.im.sum().reshape(1)), holder)


def test_linear_map_grad_check_is_exact():
    torch.manual_seed(0)
    lin = ComplexLinear(3, 2)
    x = CTensor(torch.randn(4, 3, dtype=torch.float64), torch.randn(4, 3, dtype=torch.float64))
    wr, wi = torch.randn(4, 2, dtype=torch.float64), torch.randn(4, 2, dtype=torch.float64)

    def f():
        y = lin(x)
        return (y.re * wr + y.im * wi).sum()

    # linear: central differences are exact for any step, so use one that limits roundoff
    assert grad_check(f, lin.parameters(), h=1e-3) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_nonlinear_graph_matches_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    re = torch.randn(5, generator=g, dtype=torch.float64, requires_grad=True)
    im = torch.randn(5, generator=g, dtype=torch.float64, requires_grad=True)

    def f():
        z = CTensor(re, im)
        return ((z * z).re.sin() + (z.abs() * 2).exp() * 0.01).sum()

    assert grad_check(f, [re, im]) < 1e-5


def test_repeated_backward_is_bitwise_identical():
    torch.manual_seed(3)
    lin = ComplexLinear(6, 6)
    x = CTensor(torch.randn(2, 6, dtype=torch.float64), torch.randn(2, 6, dtype=torch.float64))

    def run():
        y = lin(x)
        g = backward((y.abs() ** 3).sum(), lin)
        return {k: v.numpy().copy() for k, v in g.items()}

    a, b = run(), run()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_complex_init_energy():
    gen = torch.Generator().manual_seed(7)
    fan_in = 16
    re, im = autodiff.complex_init((100_000,), fan_in, gen)
    energy = (re ** 2 + im ** 2).mean().item()
    assert energy == pytest.approx(1 / fan_in, rel=0.05)
    phase = torch.atan2(im, re)
    assert phase.min() < -3.1 and phase.max() > 3.1
