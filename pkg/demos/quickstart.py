"""A short tour of the library on small inputs.

    python demos/quickstart.py
"""

import numpy as np

from wkd import feature_dist, interrelation, ot
from wkd.logit_loss import LogitLossConfig, kd_kl, wkd_l
from wkd.numerics import prng


def main():
    rng = prng(0)

    # discrete OT between two histograms
    p, q = np.array([0.5, 0.5]), np.array([0.8, 0.2])
    plan = ot.sinkhorn(p, q, [[0.0, 1.0], [1.0, 0.0]], eta=1e-3, iters=2000)
    print(f"sinkhorn transport cost {plan.transport_cost:.4f} (exact 0.3)")

    # category interrelations from a feature bank: 4 categories, 8-dim features, 20 examples each
    bank = rng.normal(size=(4, 8, 20))
    ir = interrelation.ir_matrix(bank, "cka-linear")
    cost = interrelation.cost_matrix(ir, kappa=1.0)
    print("CKA interrelation matrix:\n", np.round(ir.values, 3))

    # logit losses for one teacher/student pair
    zt, zs = rng.normal(size=(2, 4)) * 2
    res = wkd_l(zt, zs, cost.values, LogitLossConfig(lam=30.0), target=1)
    print(f"WKD-L loss {res.loss:.4f} (WD term {res.wd:.4f}, target term {res.target:.4f})")
    print(f"KD  loss {kd_kl(zt, zs, 2.0)[0]:.4f}")

    # feature loss between two 8-channel 4x4 maps (batch of 2)
    t = rng.normal(size=(2, 8, 4, 4))
    s = rng.normal(size=(2, 8, 4, 4)) * 0.5 + 1.0
    loss, grad = feature_dist.feature_loss("wd-diag", t, s, grid=2, gamma=2.0)
    print(f"WKD-F (diag Gaussian WD, 2x2 grid) loss {loss:.4f}, gradient norm {np.linalg.norm(grad):.4f}")


if __name__ == "__main__":
    main()
