"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import layers, losses
from .tensor import Tensor, mul, no_grad, precision, reduce_sum, relu, sigmoid


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    n_samples: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Return the max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor and must be deterministic. ``x`` is
    perturbed in place, so ``f`` may also close over ``x`` (for instance when
    ``x`` is a model parameter). When ``n_samples`` is given only that many
    randomly chosen coordinates are compared.

    The relative error of one coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``. A NaN in
    either estimate yields ``inf``.
    """
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    was = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad
    x.requires_grad = was

    flat = x.data.reshape(-1)
    if n_samples is None or n_samples >= flat.size:
        coords = np.arange(flat.size)
    else:
        coords = np.random.default_rng(seed).choice(flat.size, size=n_samples, replace=False)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + eps
            up = float(f(x).data)
            flat[i] = orig - eps
            down = float(f(x).data)
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        a = float(a_flat[i])
        if not (np.isfinite(a) and np.isfinite(numeric)):
            return float("inf")
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _weighted(rng, fn):
    """Scalarize a layer output with fixed random weights so every output entry matters."""
    cache = {}

    def f(x):
        y = fn(x)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(y.shape)
        return reduce_sum(mul(y, Tensor(cache["w"])))

    return f


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _layer_checks(rng) -> List[Tuple[str, Callable[[], float]]]:
    checks = []

    def conv_case(name, spec, hw, transposed=False):
        op = layers.transposed_conv2d if transposed else layers.conv2d
        wshape = spec.transposed_weight_shape if transposed else spec.weight_shape
        x = _param(rng, 2, spec.in_channels, *hw)
        w = _param(rng, *wshape, scale=0.5)
        b = _param(rng, spec.out_channels) if spec.bias else None
        checks.append((f"{name} input", lambda: grad_check(_weighted(rng, lambda t: op(t, spec, w, b)), x, 1e-6)))
        checks.append((f"{name} weight", lambda: grad_check(_weighted(rng, lambda t: op(x, spec, t, b)), w, 1e-6)))
        if b is not None:
            checks.append((f"{name} bias", lambda: grad_check(_weighted(rng, lambda t: op(x, spec, w, t)), b, 1e-6)))

    conv_case("conv 3x3", layers.ConvSpec(2, 3, 3, padding=1), (6, 6))
    conv_case("conv 3x3 dilation 2", layers.ConvSpec(2, 2, 3, padding=2, dilation=2, bias=False), (7, 7))
    conv_case("conv 2x2 stride 2", layers.ConvSpec(2, 3, 2, stride=2), (6, 6))
    conv_case("conv 5x1 asymmetric", layers.ConvSpec(2, 2, (5, 1), padding=(2, 0), bias=False), (7, 5))
    conv_case("conv 1x5 asymmetric", layers.ConvSpec(2, 2, (1, 5), padding=(0, 2), bias=False), (5, 7))
    conv_case("transposed conv 3x3 stride 2", layers.ConvSpec(3, 2, 3, stride=2, padding=1, output_padding=1), (4, 4), True)
    conv_case("transposed conv 2x2 stride 2", layers.ConvSpec(2, 2, 2, stride=2), (3, 3), True)

    x = _param(rng, 2, 2, 6, 6)
    checks.append(("max pool 2x2", lambda: grad_check(_weighted(rng, lambda t: layers.maxpool2d(t)[0]), x, 1e-6)))
    _, idx = layers.maxpool2d(Tensor(rng.standard_normal((2, 2, 6, 6))))
    u = _param(rng, 2, 2, 3, 3)
    checks.append(("max unpool 2x2", lambda: grad_check(_weighted(rng, lambda t: layers.max_unpool2d(t, idx, (6, 6))), u, 1e-6)))

    xb = _param(rng, 3, 2, 4, 4)
    gamma, beta = _param(rng, 2), _param(rng, 2)
    state = layers.BatchNormState.fresh(2, np.float64)
    bn = lambda a, g, b: layers.batch_norm(a, g, b, state, train=True)  # noqa: E731
    checks.append(("batch norm input", lambda: grad_check(_weighted(rng, lambda t: bn(t, gamma, beta)), xb, 1e-6)))
    checks.append(("batch norm gamma", lambda: grad_check(_weighted(rng, lambda t: bn(xb, t, beta)), gamma, 1e-6)))
    checks.append(("batch norm beta", lambda: grad_check(_weighted(rng, lambda t: bn(xb, gamma, t)), beta, 1e-6)))
    frozen = layers.BatchNormState(rng.standard_normal(2), rng.uniform(0.5, 2, 2), tracked=True)
    checks.append(("batch norm eval input",
                   lambda: grad_check(_weighted(rng, lambda t: layers.batch_norm(t, gamma, beta, frozen, False)), xb, 1e-6)))

    xa = _param(rng, 2, 3, 4, 4)
    slope = Tensor(rng.uniform(0.1, 0.4, 3), requires_grad=True)
    checks.append(("prelu input", lambda: grad_check(_weighted(rng, lambda t: layers.prelu(t, slope)), xa, 1e-6)))
    checks.append(("prelu slope", lambda: grad_check(_weighted(rng, lambda t: layers.prelu(xa, t)), slope, 1e-6)))
    checks.append(("relu", lambda: grad_check(_weighted(rng, relu), xa, 1e-6)))
    checks.append(("sigmoid", lambda: grad_check(_weighted(rng, sigmoid), xa, 1e-6)))
    return checks


def _loss_checks(rng) -> List[Tuple[str, Callable[[], float]]]:
    pred = Tensor(rng.uniform(0.05, 0.95, (2, 1, 16, 16)), requires_grad=True)
    target = Tensor(rng.uniform(0, 1, (2, 1, 16, 16)))
    roi = np.zeros((2, 1, 16, 16), bool)
    roi[:, :, 3:13, 2:14] = True
    labels = (rng.random((2, 1, 16, 16)) < 0.3).astype(np.float64)
    return [
        ("masked SSIM loss", lambda: grad_check(lambda t: losses.ssim_loss(t, target, roi), pred, 1e-6)),
        ("binary cross-entropy", lambda: grad_check(lambda t: losses.bce_loss(t, labels), pred, 1e-6)),
    ]


def _network_checks(rng) -> List[Tuple[str, Callable[[], float]]]:
    from .architectures import build
    from .graph import init_he_uniform

    out = []
    for arch, hyper, hw in (("unet", {"base_channels": 4, "depth": 2}, 8), ("enet", {"width": 4}, 16)):
        model = build(arch, **hyper)
        init_he_uniform(model, 0)
        model.astype(np.float64)
        x = rng.uniform(0, 1, (2, 3, hw, hw))
        labels = (rng.random((2, 1, hw, hw)) < 0.3).astype(np.float64)
        names = list(model.params)
        picks = [names[0], names[len(names) // 2], names[-1]]

        def run(model=model, x=x, labels=labels, picks=picks):
            errs = [grad_check(lambda _: losses.bce_loss(model(x, train=True), labels), model.params[p], 1e-6, n_samples=4)
                    for p in picks]
            return max(errs)

        out.append((f"network {arch} (sampled parameters)", run))
    return out


def gradient_suite(seed: int = 0) -> List[CheckResult]:
    """Every layer and loss in 64-bit precision (tolerance 1e-3) plus two whole-network spot checks (1e-2)."""
    rng = np.random.default_rng(seed)
    results = []
    with precision(np.float64):
        for name, run in _layer_checks(rng) + _loss_checks(rng):
            results.append(CheckResult(name, run(), 1e-3))
        for name, run in _network_checks(rng):
            results.append(CheckResult(name, run(), 1e-2))
    return results
