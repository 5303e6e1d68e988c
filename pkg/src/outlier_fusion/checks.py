"""Finite-difference gradient checks and numeric invariant checks.

This is the machinery behind the ``check-kernels`` CLI command; the test
suite reuses it so the two always agree on what "correct gradients" means.
"""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from .attention import (AttentionConfig, AttentionHead,
                        channel_attention, channel_attention_backward,
                        coordinate_attention, coordinate_attention_backward,
                        init_channel_params, init_coordinate_params,
                        init_multi_head_params, init_spatial_params,
                        multi_head_attention, multi_head_attention_backward,
                        spatial_attention, spatial_attention_backward)
from .dgmp import dgmp_backward, dgmp_forward
from .errors import NumericError
from .focal import FocalLossConfig, focal_loss, softmax
from .numeric import RngStream, conv2d, solve_spd

FD_STEP = 1e-5
GRAD_TOL = 1e-4


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                      step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy().ravel()
        xm = x.copy().ravel()
        xp[i] += step
        xm[i] -= step
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative disagreement between two gradients."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclasses.dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} ({self.detail})"


def _check_max_err(name: str, worst: float, tol: float = GRAD_TOL) -> CheckResult:
    return CheckResult(name, worst <= tol, f"max rel err {worst:.3e}, tol {tol:.0e}")


# ---------------------------------------------------------------------------
# individual suites


def check_dgmp_defining_property(seed: RngStream, instances: int = 100) -> CheckResult:
    """lambda=0 solution satisfies <phi_i, xi> = 1 for all i (full-rank Phi)."""
    worst = 0.0
    gen = seed.generator()
    for _ in range(instances):
        d = int(gen.integers(2, 17))
        n = int(gen.integers(1, min(d, 8) + 1))  # n <= d keeps K full rank a.s.
        vol = gen.normal(size=(d, 1, n))
        sol = dgmp_forward(vol, 0.0)
        phi = vol.reshape(d, n)
        worst = max(worst, float(np.abs(phi.T @ sol.xi - 1.0).max()))
    return CheckResult("dgmp-defining-property", worst <= 1e-8,
                       f"max |<phi_i, xi> - 1| = {worst:.3e}, tol 1e-08")


def check_dgmp_dense_oracle(seed: RngStream, instances: int = 100) -> CheckResult:
    """Cholesky path matches an explicit dense-inverse solve to 1e-10."""
    worst = 0.0
    gen = seed.generator()
    for _ in range(instances):
        d = int(gen.integers(2, 17))
        h = int(gen.integers(1, 5))
        w = int(gen.integers(1, 9))
        lam = float(gen.uniform(0.05, 2.0))
        vol = gen.normal(size=(d, h, w))
        sol = dgmp_forward(vol, lam)
        phi = vol.reshape(d, -1)
        n = phi.shape[1]
        alpha_oracle = np.linalg.inv(phi.T @ phi + lam * np.eye(n)) @ np.ones(n)
        worst = max(worst, float(np.abs(sol.alpha - alpha_oracle).max()))
    return CheckResult("dgmp-dense-inverse-oracle", worst <= 1e-10,
                       f"max |alpha - oracle| = {worst:.3e}, tol 1e-10")


def check_dgmp_gradient(seed: RngStream, instances: int = 50) -> CheckResult:
    worst = 0.0
    gen = seed.generator()
    for _ in range(instances):
        d = int(gen.integers(2, 7))
        h = int(gen.integers(1, 4))
        w = int(gen.integers(1, 4))
        lam = float(gen.uniform(0.1, 2.0))
        vol = gen.normal(size=(d, h, w))
        u = gen.normal(size=d)
        analytic = dgmp_backward(vol, lam, u)
        numeric = finite_difference(lambda v: float(u @ dgmp_forward(v, lam).xi), vol)
        worst = max(worst, max_relative_error(analytic, numeric))
    return _check_max_err("dgmp-gradient", worst)


def check_focal_gradient(seed: RngStream, instances: int = 50) -> CheckResult:
    worst = 0.0
    gen = seed.generator()
    for _ in range(instances):
        c = int(gen.integers(2, 9))
        logits = gen.normal(size=c) * 2.0
        target = int(gen.integers(c))
        cfg = FocalLossConfig(gamma=float(gen.uniform(0.0, 4.0)),
                              class_weights=gen.uniform(0.2, 2.0, size=c))
        _, analytic = focal_loss(softmax(logits), target, cfg)
        numeric = finite_difference(
            lambda z: focal_loss(softmax(z), target, cfg)[0], logits)
        worst = max(worst, max_relative_error(analytic, numeric))
    return _check_max_err("focal-loss-gradient", worst)


def check_focal_ce_collapse(seed: RngStream, instances: int = 1000) -> CheckResult:
    """gamma=0 uniform-weight focal loss equals cross-entropy to 1e-12."""
    gen = seed.generator()
    cfg = FocalLossConfig(gamma=0.0)
    worst = 0.0
    for _ in range(instances):
        c = int(gen.integers(2, 15))
        probs = softmax(gen.normal(size=c) * 3.0)
        target = int(gen.integers(c))
        loss, _ = focal_loss(probs, target, cfg)
        ce = -np.log(max(probs[target], 1e-12))
        worst = max(worst, abs(loss - ce))
    return CheckResult("focal-ce-collapse", worst <= 1e-12,
                       f"max |focal(gamma=0) - CE| = {worst:.3e}, tol 1e-12")


def _head_gradient_worst(head: AttentionHead, seed: RngStream, instances: int) -> float:
    gen = seed.generator()
    worst = 0.0
    for i in range(instances):
        d, h, w = 4, 3, 3
        vol = gen.normal(size=(d, h, w))
        upstream = gen.normal(size=(d, h, w))
        sub = seed.derive(i)
        if head is AttentionHead.CHANNEL:
            params = init_channel_params(d, 2, sub)
            fwd = lambda v, p: channel_attention(v, p)[0]
            bwd = channel_attention_backward
        elif head is AttentionHead.SPATIAL:
            params = init_spatial_params(3, sub)
            fwd = lambda v, p: spatial_attention(v, p)[0]
            bwd = spatial_attention_backward
        else:
            params = init_coordinate_params(d, 2, sub)
            fwd = lambda v, p: coordinate_attention(v, p)[0]
            bwd = coordinate_attention_backward
        grad_v, grad_p = bwd(vol, params, upstream)
        num_v = finite_difference(lambda v: float((fwd(v, params) * upstream).sum()), vol)
        worst = max(worst, max_relative_error(grad_v, num_v))
        for name in params:
            def f(arr, _name=name):
                p2 = dict(params)
                p2[_name] = arr
                return float((fwd(vol, p2) * upstream).sum())
            worst = max(worst, max_relative_error(grad_p[name],
                                                  finite_difference(f, params[name])))
    return worst


def check_attention_gradients(seed: RngStream, instances: int = 50) -> list[CheckResult]:
    results = []
    for idx, head in enumerate(AttentionHead):
        worst = _head_gradient_worst(head, seed.derive(idx), instances)
        results.append(_check_max_err(f"{head.value}-attention-gradient", worst))
    return results


def check_multi_head_gradient(seed: RngStream, instances: int = 50) -> CheckResult:
    cfg = AttentionConfig(reduction=2, spatial_kernel=3)
    worst = 0.0
    gen = seed.generator()
    for i in range(instances):
        d, h, w = 4, 3, 3
        vol = gen.normal(size=(d, h, w))
        upstream = gen.normal(size=(d, h, w))
        params = init_multi_head_params(d, cfg, seed.derive(1000 + i))
        grad_v, grad_p = multi_head_attention_backward(vol, cfg, params, upstream)
        num_v = finite_difference(
            lambda v: float((multi_head_attention(v, cfg, params) * upstream).sum()), vol)
        worst = max(worst, max_relative_error(grad_v, num_v))
        for name in params:
            def f(arr, _name=name):
                p2 = dict(params)
                p2[_name] = arr
                return float((multi_head_attention(vol, cfg, p2) * upstream).sum())
            worst = max(worst, max_relative_error(grad_p[name],
                                                  finite_difference(f, params[name])))
    return _check_max_err("multi-head-attention-gradient", worst)


def check_conv_linearity(seed: RngStream, instances: int = 20) -> CheckResult:
    gen = seed.generator()
    worst = 0.0
    for _ in range(instances):
        c, h, w = 2, 5, 5
        x = gen.normal(size=(c, h, w))
        y = gen.normal(size=(c, h, w))
        kernel = gen.normal(size=(3, c, 3, 3))
        a, b = float(gen.normal()), float(gen.normal())
        lhs = conv2d(a * x + b * y, kernel, "same")
        rhs = a * conv2d(x, kernel, "same") + b * conv2d(y, kernel, "same")
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    return CheckResult("conv2d-linearity", worst <= 1e-10,
                       f"max deviation {worst:.3e}, tol 1e-10")


def check_solve_spd(seed: RngStream, instances: int = 100) -> CheckResult:
    gen = seed.generator()
    worst = 0.0
    for _ in range(instances):
        n = int(gen.integers(1, 21))
        m = gen.normal(size=(n, n))
        a = m.T @ m + np.eye(n)
        b = gen.normal(size=n)
        x = solve_spd(a, b)
        residual = np.abs(a @ x - b).max()
        scale = max(np.abs(b).max(), 1e-300)
        worst = max(worst, float(residual / scale))
    return CheckResult("solve-spd-residual", worst <= 1e-8,
                       f"max residual {worst:.3e}, tol 1e-08")


def run_kernel_checks(seed: int = 0, instances: int = 50) -> list[CheckResult]:
    """Full pass/fail report over every gradient and numeric invariant."""
    root = RngStream(seed)
    results = [
        check_solve_spd(root.derive(1)),
        check_conv_linearity(root.derive(2)),
        check_dgmp_defining_property(root.derive(3)),
        check_dgmp_dense_oracle(root.derive(4)),
        check_dgmp_gradient(root.derive(5), instances),
        check_focal_ce_collapse(root.derive(6)),
        check_focal_gradient(root.derive(7), instances),
    ]
    results.extend(check_attention_gradients(root.derive(8), instances))
    results.append(check_multi_head_gradient(root.derive(9), instances))
    return results


def require_all_passed(results: list[CheckResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        raise NumericError(
            "kernel checks failed: " + "; ".join(r.name for r in failed))
