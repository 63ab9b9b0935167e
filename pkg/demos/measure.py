"""Excluded parameter fraction as the Diophantine constant shrinks."""
from kamnls.melnikov import cantor_measure, gamma_scaling, inclusion_scan, spec_from_twist
from kamnls.nf_cubic import CubicCoefficients

a = CubicCoefficients(a1=1.0)
spec = spec_from_twist(a, (1, 4), eps=0.05, gamma0=1e-3, K=6, jmax=20)

fit = gamma_scaling(spec, [5e-4, 1e-3, 2e-3, 4e-3], samples=100_000)
for g, f in zip(fit["gamma0"], fit["fraction"]):
    print(f"gamma0 = {g:.0e}: excluded {f:.4%}")
print(f"log-log slope {fit['slope']:.3f} (R^2 = {fit['r2']:.5f})")

steps = [spec.with_(gamma=spec.gamma * (1 + 2.0**-n), K=4 + n) for n in range(3)]
rep = cantor_measure(steps, samples=50_000)
print("surviving after each step:", [round(s["surviving"], 5) for s in rep.per_step])

inc = inclusion_scan(a, (1, 4), [1e-3, 3e-3, 1e-2, 3e-2, 0.1])
print("step inclusion held up to |xi| =", inc["smallest_xi_ok"])
