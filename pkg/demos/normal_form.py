"""Normal form and twist data for cubic NLS on the sites {1, 4}."""
import numpy as np

from kamnls.nf_cubic import CubicCoefficients, _in_A1N, genericity_scan, wbnf_transform
from kamnls.twist import classify_coefficients, omega0, twist_matrix

a = CubicCoefficients(a1=1.0)
sites = (1, 4)

print("resonant tuples up to 20:", len(genericity_scan(sites, 20)))
out, data = wbnf_transform(None, a, sites, J=8)
S = {1, -1, 4, -4}
ref = data.field_in.degree_part(3).max_abs()
left = max((abs(v) for c, m, v in out.degree_part(3).items() if _in_A1N(c, m, S)), default=0.0)
print(f"degree-3 terms removed: {len(data.degree3_removed)}, largest survivor {left / ref:.1e} (relative)")

td = twist_matrix(a, sites)
print("twist matrix:\n", td.M, "\ndet:", np.linalg.det(td.M))
print("classification:", classify_coefficients(a, len(sites))["nonresonant_branches"])
print("frequencies at xi = (1e-4, 2e-4):", omega0(a, sites, [1e-4, 2e-4]))
