"""Three corrector sweeps for a three-frequency torus of cubic NLS."""
import warnings

from kamnls.nf_cubic import CubicCoefficients
from kamnls.orchestrator import build_initial, extract_embedding, run

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    st = build_initial(CubicCoefficients(a1=1.0), (1, 2, 4), [1e-4 / 3] * 3, Lb=5, J=24, K0=1.2)
print("flags:", st.flags)
st = run(st, 3)
for e in st.ledger:
    print(f"step {e['n']}: defect {e['defect']:.3e}, omega drift {e['omega_drift']:.2e}")
emb = extract_embedding(st)
print("frequencies:", emb["omega_inf"])
print(f"odd symmetry error {emb['odd_error']:.1e}, reversibility error {emb['reversibility_error']:.1e}")
