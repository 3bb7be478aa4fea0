"""Built-in oracle checks, run by ``wkd verify``.

Each check compares a library routine against an independent computation:
exact OT from a linear program, finite differences for every analytic
gradient, LAPACK for the eigensolver. Sizes are small so the whole suite
finishes in a few seconds.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from . import feature_dist, interrelation, logit_loss, ot
from .errors import NumericalError
from .nets import ConvNet, ConvNetSpec
from .numerics import prng, sqrtm_psd, sym_eig

FD_STEP = 1e-6
FD_RTOL = 1e-4


class VerificationFailed(NumericalError):
    pass


def exact_ot(p, q, c) -> float:
    """Unregularized OT cost by linear programming."""
    n, m = c.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(c.ravel(), A_eq=a_eq, b_eq=np.concatenate([p, q]), bounds=(0, None), method="highs")
    return float(res.fun)


def central_difference(fun, x, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += step
        xm[idx] -= step
        grad[idx] = (fun(xp) - fun(xm)) / (2 * step)
    return grad


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def _simplex(rng, n):
    return rng.dirichlet(np.ones(n))


def check_ot_exact(rng):
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(2, 4))
        p, q = _simplex(rng, n), _simplex(rng, n)
        c = rng.uniform(size=(n, n))
        plan = ot.sinkhorn(p, q, c, eta=1e-3, iters=2000)
        worst = max(worst, abs(plan.transport_cost - exact_ot(p, q, c)))
    return worst < 1e-3, f"max |sinkhorn - LP| = {worst:.2e}"


def check_dual_gradient(rng):
    worst = 0.0
    for _ in range(5):
        n = 5
        p, q = _simplex(rng, n), _simplex(rng, n)
        c = rng.uniform(size=(n, n))
        g = ot.wd_gradient(ot.sinkhorn(p, q, c, eta=0.1, iters=5000, tol=1e-14))
        # directional derivative along a mass-preserving direction
        d = rng.normal(size=n)
        d -= d.mean()
        h = 1e-6
        fd = (ot.sinkhorn(p, q + h * d, c, eta=0.1, iters=5000, tol=1e-14).objective
              - ot.sinkhorn(p, q - h * d, c, eta=0.1, iters=5000, tol=1e-14).objective) / (2 * h)
        worst = max(worst, abs(fd - g @ d) / max(abs(fd), 1e-8))
    return worst < FD_RTOL, f"max relative error {worst:.2e}"


def check_kd_gradient(rng):
    worst = 0.0
    for _ in range(5):
        zt, zs = rng.normal(size=(2, 6))
        _, g = logit_loss.kd_kl(zt, zs, 2.0)
        fd = central_difference(lambda z: logit_loss.kd_kl(zt, z, 2.0)[0], zs)
        worst = max(worst, rel_err(g, fd))
    return worst < FD_RTOL, f"max relative error {worst:.2e}"


def check_wkd_l_gradient(rng):
    cfg = logit_loss.LogitLossConfig(lam=1.0, eta=0.1, iters=5000, tol=1e-14)
    worst = 0.0
    for _ in range(3):
        n = 5
        zt, zs = rng.normal(size=(2, n))
        a = rng.uniform(size=(n, n))
        c = interrelation.cost_matrix(0.5 * (a + a.T)).values
        t = int(rng.integers(n))
        g = logit_loss.wkd_l(zt, zs, c, cfg, target=t).grad
        fd = central_difference(lambda z: logit_loss.wkd_l(zt, z, c, cfg, target=t).loss, zs)
        worst = max(worst, rel_err(g, fd))
    return worst < FD_RTOL, f"max relative error {worst:.2e}"


def check_wkd_f_gradient(rng):
    worst = 0.0
    for _ in range(3):
        t = rng.normal(size=(4, 3, 3))
        s = rng.normal(size=(4, 3, 3))
        _, g = feature_dist.wkd_f_loss(t, s, grid=2)
        fd = central_difference(lambda x: feature_dist.wkd_f_loss(t, x, grid=2)[0], s)
        worst = max(worst, rel_err(g, fd))
    return worst < FD_RTOL, f"max relative error {worst:.2e}"


def check_net_backward(rng):
    spec = ConvNetSpec(1, 6, 6, ((3, 1), (4, 2)), 4, projector=2)
    net = ConvNet(spec, seed=int(rng.integers(1 << 31)))
    x = rng.normal(size=(2, 1, 6, 6))
    wl = rng.normal(size=(2, 4))
    wp = rng.normal(size=(2, 2, 3, 3))

    def loss():
        z, taps = net.forward(x)
        return float(np.sum(wl * z) + np.sum(wp * taps["projected"]))

    loss()
    grads = net.backward(wl, {"projected": wp})
    worst = 0.0
    for name, w in net.params.items():
        def fun(v, name=name):
            old = net.params[name]
            net.params[name] = v
            out = loss()
            net.params[name] = old
            return out

        worst = max(worst, rel_err(grads[name], central_difference(fun, w)))
    return worst < FD_RTOL, f"max relative error over parameters {worst:.2e}"


def check_eig(rng):
    a = rng.normal(size=(12, 12))
    a = a + a.T
    eig = sym_eig(a)
    err = float(np.max(np.abs(eig.eigenvalues - np.linalg.eigvalsh(a)[::-1])))
    r = sqrtm_psd(a @ a.T)
    sq = float(np.max(np.abs(r @ r - a @ a.T)) / np.max(np.abs(a @ a.T)))
    return err < 1e-9 and sq < 1e-9, f"eigenvalue error {err:.1e}, sqrtm residual {sq:.1e}"


def check_cka_invariance(rng):
    bank = rng.normal(size=(4, 6, 10))
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = interrelation.ir_matrix(bank).values
    b = interrelation.ir_matrix(3.7 * np.einsum("uv,nvb->nub", q, bank)).values
    diff = float(np.max(np.abs(a - b)))
    return diff < 1e-8, f"max IR change under scaling + rotation {diff:.1e}"


CHECKS = (
    ("sinkhorn vs exact OT", check_ot_exact),
    ("WD dual gradient", check_dual_gradient),
    ("KD gradient", check_kd_gradient),
    ("WKD-L gradient", check_wkd_l_gradient),
    ("WKD-F gradient", check_wkd_f_gradient),
    ("conv net backward", check_net_backward),
    ("eigensolver and sqrtm", check_eig),
    ("CKA invariance", check_cka_invariance),
)


def run_all(seed: int = 0):
    """``[(name, passed, detail)]`` for every check."""
    rng = prng(seed)
    out = []
    for name, check in CHECKS:
        ok, detail = check(rng)
        out.append((name, bool(ok), detail))
    return out
