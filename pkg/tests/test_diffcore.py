import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from asymplay.diffcore import (
    NonFiniteLossError,
    OptState,
    ParamStore,
    clip_grad_norm,
    directional_check,
    finite_difference_grad,
    lr_at,
    named_rng,
    optimizer_step,
    record_and_grad,
    relative_error,
    sum_in_order,
)


def _store(**kw):
    return ParamStore({k: torch.tensor(v, requires_grad=True) for k, v in kw.items()})


def test_default_dtype_is_double():
    assert torch.get_default_dtype() == torch.float64


def test_record_and_grad_examples():
    ps = _store(p=[1.0, 2.0, 3.0], q=[5.0])
    loss, g = record_and_grad(lambda: (ps["p"] ** 2).sum(), ps)
    assert loss == 14.0
    assert torch.equal(g["p"], torch.tensor([2.0, 4.0, 6.0]))
    assert torch.equal(g["q"], torch.zeros(1))


def test_non_finite_loss_names_culprit():
    ps = _store(p=[0.0])
    with pytest.raises(NonFiniteLossError, match="log"):
        record_and_grad(lambda: torch.log(ps["p"]).sum() * 2.0, ps)


def test_optimizer_examples():
    ps = _store(p=[1.0])
    opt = OptState.zeros_like(ps, weight_decay=0.0)
    optimizer_step(ps, {"p": torch.zeros(1)}, opt, 0.1)
    assert float(ps["p"].detach()) == 1.0 and opt.step == 1

    ps = _store(p=[1.0])
    opt = OptState.zeros_like(ps, weight_decay=0.0)
    optimizer_step(ps, {"p": torch.ones(1)}, opt, 0.1)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert float(ps["p"].detach()) == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert float(ps["p"].detach()) == pytest.approx(0.9, abs=1e-8)

    ps = _store(p=[2.0])
    opt = OptState.zeros_like(ps, weight_decay=0.1)
    optimizer_step(ps, {"p": torch.zeros(1)}, opt, 0.1)
    assert float(ps["p"].detach()) == pytest.approx(2.0 * (1 - 0.01), abs=1e-15)


def test_optimizer_shape_mismatch():
    ps = _store(p=[1.0, 2.0])
    opt = OptState.zeros_like(ps)
    with pytest.raises(ValueError):
        optimizer_step(ps, {"p": torch.zeros(3)}, opt, 0.1)
    with pytest.raises(ValueError):
        optimizer_step(ps, {"p": torch.zeros(2)}, opt, -1.0)


def _adamw_oracle(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(-3, 3), st.floats(0, 0.1))
def test_optimizer_matches_scalar_oracle(gs, p0, lr):
    ps = _store(p=[p0])
    opt = OptState.zeros_like(ps)
    for g in gs:
        optimizer_step(ps, {"p": torch.tensor([g])}, opt, lr)
    assert float(ps["p"].detach()) == pytest.approx(_adamw_oracle(p0, gs, lr), rel=1e-12, abs=1e-12)


def test_lr_schedule():
    assert lr_at(0, 1000, 100, 1e-4) == 0.0
    assert lr_at(100, 1000, 100, 1e-4) == 1e-4
    assert lr_at(1000, 1000, 100, 1e-4) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(550, 1000, 100, 1e-4) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(50, 1000, 100, 1e-4) == pytest.approx(5e-5, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(0, 100, 100, 1e-4)


@given(st.integers(2, 500), st.data())
def test_lr_schedule_monotone_after_warmup(total, data):
    warm = data.draw(st.integers(0, total - 1))
    vals = [lr_at(s, total, warm, 1.0) for s in range(total + 1)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(a >= b - 1e-15 for a, b in zip(vals[warm:], vals[warm + 1 :]))


def test_clip_grad_norm():
    g = {"a": torch.tensor([30.0, 40.0])}
    assert clip_grad_norm(g, 10.0) == 50.0
    assert torch.allclose(g["a"], torch.tensor([6.0, 8.0]))
    g = {"a": torch.tensor([3.0, 4.0])}
    clip_grad_norm(g, 10.0)
    assert torch.equal(g["a"], torch.tensor([3.0, 4.0]))


_OPS = {
    "add": lambda x, w: (x + w).sum(),
    "mul": lambda x, w: (x * w).sum(),
    "matmul": lambda x, w: (x.reshape(2, 3) @ w.reshape(3, 2)).pow(2).sum(),
    "tanh": lambda x, w: torch.tanh(x * w).sum(),
    "softmax": lambda x, w: (torch.softmax(x, 0) * w).sum(),
    "layer_norm": lambda x, w: (F.layer_norm(x, (6,)) * w).sum(),
    "huber": lambda x, w: F.huber_loss(x, w, delta=0.7, reduction="sum"),
    "concat_gather": lambda x, w: (torch.cat([x, w])[torch.tensor([0, 7, 3, 11])] ** 3).sum(),
}
_NONSMOOTH = {
    "relu": lambda x, w: (torch.relu(x) * w).sum(),
    "min": lambda x, w: torch.minimum(x, w).pow(2).sum(),
    "max": lambda x, w: torch.amax(x * w),
}


@pytest.mark.parametrize("name", sorted(_OPS) + sorted(_NONSMOOTH))
def test_ops_match_finite_differences(name):
    fn = {**_OPS, **_NONSMOOTH}[name]
    tol = 1e-6 if name in _OPS else 1e-4
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(20):
        x = torch.tensor(rng.standard_normal(6), requires_grad=True)
        w = torch.tensor(rng.standard_normal(6))
        ps = ParamStore({"x": x})
        _, g = record_and_grad(lambda: fn(x, w), ps)
        num = finite_difference_grad(lambda z: fn(z, w), x)
        assert relative_error(g["x"], num) < tol


def test_kink_subgradient_is_zero():
    x = torch.tensor([0.0], requires_grad=True)
    torch.relu(x).sum().backward()
    assert float(x.grad) == 0.0


def test_replayed_constants_get_no_gradient():
    p = torch.tensor([1.5], requires_grad=True)
    replayed = (p * 3).detach()
    ps = ParamStore({"p": p})
    _, g = record_and_grad(lambda: (replayed**2).sum() + 0.0 * p.sum(), ps)
    assert torch.equal(g["p"], torch.zeros(1))


def test_rollout_collision_gradient():
    # short bicycle rollout of two actors driving at each other
    from asymplay.dynamics import step_tensor
    from asymplay.objectives import collision_loss

    rng = np.random.default_rng(0)
    acts = torch.tensor(rng.normal(0, 0.3, (12, 2, 2)), requires_grad=True)
    s0 = torch.tensor([[0.0, 0.0, 0.0, 10.0], [40.0, 0.5, math.pi, 10.0]])
    dims = torch.tensor([[4.5, 2.0, 2.8], [4.5, 2.0, 2.8]])
    mask = torch.ones(1, 2, dtype=torch.bool)

    def loss_of(a):
        s, out = s0, []
        for t in range(12):
            s = step_tensor(s, a[t], dims[:, 2])
            out.append(s)
        return collision_loss(torch.stack(out)[None], dims[None], mask).sum()

    ps = ParamStore({"a": acts})
    val, g = record_and_grad(lambda: loss_of(acts), ps)
    assert val > 0
    num = finite_difference_grad(loss_of, acts)
    assert relative_error(g["a"], num) < 1e-4
    assert directional_check(lambda: loss_of(acts), ps, np.random.default_rng(1)) < 1e-4


def test_determinism_bitwise():
    def run():
        torch.manual_seed(0)
        w = torch.randn(8, 8, requires_grad=True)
        x = torch.randn(16, 8)
        ps = ParamStore({"w": w})
        return record_and_grad(lambda: torch.tanh(x @ w).pow(2).sum(), ps)

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and torch.equal(g1["w"], g2["w"])


def test_named_rng_streams_independent_and_stable():
    a = named_rng(3, "coin").random(4)
    assert np.array_equal(a, named_rng(3, "coin").random(4))
    assert not np.array_equal(a, named_rng(3, "partition").random(4))
    assert not np.array_equal(a, named_rng(4, "coin").random(4))


def test_sum_in_order():
    out = sum_in_order([{"a": torch.tensor([1.0])}, {"a": torch.tensor([2.0])}])
    assert torch.equal(out["a"], torch.tensor([3.0]))


def test_paramstore_flat_roundtrip():
    lin = torch.nn.Linear(3, 2)
    ps = ParamStore.from_module(lin, prefix="l.")
    assert ps.names() == ["l.weight", "l.bias"] and ps.num_params == 8
    flat = ps.flat()
    ps.load_flat(flat * 2)
    assert torch.equal(ps.flat(), flat * 2)
