"""A short tour of the spectral building blocks.

Run with ``python demos/operators_tour.py``.  Everything here is
deterministic and finishes in about a second.
"""

import numpy as np

from slowfast_nse.spectral import SpectralSpace, nonlinear_B, random_fields

sp = SpectralSpace(32)
print(f"N={sp.n}: {int(sp.retained.sum())} retained modes, lambda1={sp.lambda1}")

# a random divergence-free field, normalised to unit L2 norm
rng = np.random.default_rng(0)
u = random_fields(sp, rng, norm=1.0)
print("|u|      ", np.sqrt(sp.sobolev_sq(u, 0.0)))
print("||u||_1  ", np.sqrt(sp.sobolev_sq(u, 1.0)))
print("max |div u|", np.abs(sp.divergence(u)).max())

# adding a gradient and projecting it away
p = random_fields(sp, rng)[0]
dirty = u + np.stack([1j * sp.k1 * p, 1j * sp.k2 * p])
print("projection removes the gradient:", np.abs(sp.project(dirty) - u).max())

# the advection term conserves energy: <B(u,u), u> = 0
Buu = sp.nonlinear(u, u)
print("<B(u,u), u> =", sp.inner(Buu, u))

# Taylor-Green: (u.grad)u is a pure gradient, so B(u,u) vanishes after projection
tg = sp.taylor_green()
print("|B(tg,tg)|  =", nonlinear_B(tg).norm())

# heat semigroup: the H1 norm after time t stays below (2et)^(-1/2) |u|
for t in (1e-3, 1e-2, 1e-1, 1.0):
    lhs = np.sqrt(sp.sobolev_sq(sp.semigroup(u, t), 1.0))
    bound = (2 * np.e * t) ** -0.5
    print(f"t={t:<6} ||e^(tA)u||_1={lhs:.4f}  bound={bound:.4f}")
