"""Quick oracle cross-checks behind ``ep selftest``."""

from __future__ import annotations

import numpy as np

from ..energy import psi_site
from ..model import CavityParams, ModelSpec, SiteParams, SitePotential, Sites, TildeParams
from ..operators import dense_op
from ..tilted import tilted_moments_batch


def _check(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def run_selftest(seed: int = 0) -> bool:
    from .. import gauss, oracle

    rng = np.random.default_rng(seed)
    results = []

    # tilted moments against quadrature
    worst = 0.0
    for _ in range(100):
        tau, eta = rng.uniform(0.1, 5.0), rng.uniform(0.3, 1.0)
        p = np.exp(rng.uniform(-3, 3))
        cav = CavityParams(np.array([p]), np.array([rng.normal(0, 3) * np.sqrt(p)]))
        ref = oracle.quad_tilted(cav, SitePotential.laplace(tau), eta)
        got = tilted_moments_batch(cav, Sites.laplace([tau]), eta)
        scale = np.sqrt(ref.variance)
        worst = max(
            worst,
            abs(got.log_zhat[0] - ref.log_zhat) / max(1.0, abs(ref.log_zhat)),
            abs(got.mean[0] - ref.mean) / max(abs(ref.mean), scale),
            abs(got.variance[0] - ref.variance) / ref.variance,
        )
    results.append(_check("tilted moments vs quadrature", worst <= 1e-8, f"max rel error {worst:.2e}"))

    # site gradients against finite differences
    worst = 0.0
    for _ in range(20):
        site = SitePotential.laplace(rng.uniform(0.5, 2.0))
        eta, pt, bt = rng.uniform(0.5, 1.0), rng.uniform(1.0, 3.0), rng.normal()
        s, z = rng.normal(), rng.uniform(0.1, 1.0)
        x = np.array([rng.uniform(0.1, 0.8) * pt / eta, rng.normal(0, 0.3)])

        def f(v):
            return psi_site(s, v[0], v[1], z, pt, bt, site, eta)

        tm = tilted_moments_batch(CavityParams(np.array([pt - eta * x[0]]), np.array([bt - eta * x[1]])), Sites.from_list([site]), eta)
        analytic = np.array([-(z + s * s) + tm.second_moment[0], 2.0 * (s - tm.mean[0])])
        fd = oracle.fd_gradient(f, x)
        worst = max(worst, np.max(np.abs(fd - analytic) / np.maximum(1.0, np.abs(analytic))))
    results.append(_check("site profile gradients vs finite differences", worst <= 1e-5, f"max rel error {worst:.2e}"))

    # Gaussian partition function against quadrature
    X = dense_op(rng.normal(size=(2, 1)))
    model = ModelSpec(X, dense_op(np.ones((1, 1))), rng.normal(size=2), 0.5, Sites.flat(1))
    st = gauss.gauss_state(model, SiteParams([0.0], [0.0]), variances=False)
    ref = oracle.quad_logz_model(model)
    results.append(_check("log Z_Q vs quadrature", abs(ref - st.log_zq) <= 1e-8, f"difference {abs(ref - st.log_zq):.2e}"))

    # strong duality on tiny instances
    worst = 0.0
    for _ in range(3):
        n = int(rng.integers(1, 4))
        q = int(rng.integers(n, 6))
        m = int(rng.integers(1, 4))
        tiny = ModelSpec(dense_op(rng.normal(size=(m, n))), dense_op(rng.normal(size=(q, n))), rng.normal(size=m),
                         rng.uniform(0.2, 1.0), Sites.laplace(rng.uniform(0.5, 2.0, q)))
        tt = TildeParams(rng.uniform(0.5, 3.0, q), rng.normal(0, 1, q))
        lo, hi = oracle.saddle_brute(tiny, tt)
        worst = max(worst, abs(hi - lo))
    results.append(_check("strong duality gap", worst <= 1e-6, f"max gap {worst:.2e}"))
    return all(results)
