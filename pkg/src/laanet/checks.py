"""Self-checks behind ``laanet synth-check``: physics inversion, gradient
correctness and warp identity on small synthetic instances."""
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import losses
from .geometry import Intrinsics, inverse_warp


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<18} {self.detail}  ({self.seconds:.2f}s)"


def check_inversion(n=1000, seed=0, tol=1e-10):
    """Render f_R from (d, mu, lambda) and recover d through rca_depth (float64)."""
    rng = np.random.default_rng(seed)
    d = torch.from_numpy(rng.uniform(0.1, 80.0, n))
    mu = torch.from_numpy(rng.uniform(1e-3, 1.0, n))
    lam = torch.from_numpy(rng.uniform(-2.0, 2.0, n))
    f_R = losses.beer_lambert_intensity(losses.sg_intensity(lam), mu, d)
    d_hat = losses.rca_depth(f_R, mu, lam)
    err = float(((d_hat - d).abs() / d).max())
    return err <= tol, f"max |d_R - d| / d = {err:.3e} over {n} draws (tol {tol:g})"


def _central_diff(f, x, step=1e-5):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(f())
        flat[i] = orig - step
        down = float(f())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def _rel_errors(f, inputs, step=1e-5):
    leaves = [x.detach().clone().requires_grad_() for x in inputs]
    auto = torch.autograd.grad(f(*leaves), leaves)
    errs = []
    with torch.no_grad():
        plain = [x.detach().clone() for x in inputs]
        for x, a in zip(plain, auto):
            num = _central_diff(lambda: f(*plain), x, step)
            errs.append(float((a - num).norm() / num.norm().clamp(min=1e-12)))
    return errs


def check_gradients(seed=0, tol=1e-4):
    """Autograd vs central differences for the RCA and photometric losses (float64, 8x8)."""
    gen = torch.Generator().manual_seed(seed)
    shape = (1, 1, 8, 8)
    rnd = lambda lo, hi: torch.rand(shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo
    f, mu, lam, d_es = rnd(0.1, 0.9), rnd(0.05, 0.55), rnd(-1, 1), rnd(1, 21)
    rca = _rel_errors(lambda f, mu, lam, d: losses.rca_loss(losses.rca_depth(f, mu, lam), d),
                      [f, mu, lam, d_es])

    K = Intrinsics(8.0, 8.0, 3.5, 3.5)
    tgt, src = rnd(0, 1), rnd(0, 1)
    depth = rnd(4, 5)
    pose = torch.tensor([[0.011, -0.007, 0.013, 0.061, 0.043, 0.052]], dtype=torch.float64)
    photo = _rel_errors(lambda d, p, s: losses.photometric_loss(tgt, [s], [d], [p], K), [depth, pose, src])
    worst = max(rca + photo)
    detail = f"max relative error {worst:.2e} (rca {max(rca):.1e}, photometric {max(photo):.1e}; tol {tol:g})"
    return worst <= tol, detail


def check_warp(tol_loss=1e-6, tol_px=0.01):
    """Identity pose reproduces the source; a planar lateral move shifts by fx*tx/d."""
    torch.manual_seed(0)
    img = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    depth = torch.rand(2, 1, 16, 16, dtype=torch.float64) * 5 + 1
    zero = torch.zeros(2, 6, dtype=torch.float64)
    K = Intrinsics(16.0, 16.0, 7.5, 7.5)
    same = float((inverse_warp(img, depth, zero, K).synthesized - img).abs().max())
    lp = float(losses.photometric_loss(img, [img, img], [depth], [zero, zero], K))

    fx, d, tx = 20.0, 8.0, 0.7
    h, w = 16, 32
    ramp = torch.arange(w, dtype=torch.float64).expand(1, 1, h, w).clone()
    res = inverse_warp(ramp, torch.full((1, 1, h, w), d, dtype=torch.float64),
                       torch.tensor([[0, 0, 0, tx, 0, 0]], dtype=torch.float64), Intrinsics(fx, fx, 15.5, 7.5))
    valid = res.validity_mask.bool()
    shift_err = float(((res.synthesized - ramp)[valid] - fx * tx / d).abs().max())
    ok = same <= tol_loss and lp <= tol_loss and shift_err <= tol_px
    return ok, f"identity max diff {same:.1e}, L_p {lp:.1e}, planar shift error {shift_err:.1e} px"


CHECKS = {"inversion": check_inversion, "gradients": check_gradients, "warp": check_warp}


def run_checks(names=None):
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = CHECKS[name]()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
