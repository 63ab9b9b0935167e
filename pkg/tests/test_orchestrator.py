import numpy as np
import pytest

import orch_cases
from kamnls.nf_cubic import CubicCoefficients
from kamnls.orchestrator import (
    OrchestratorError, TorusGrid, build_initial, invariance_defect, leading_table, run,
)

CUBIC = CubicCoefficients(a1=1.0)


def test_grid_roundtrip():
    g = TorusGrid(2, 2, 5)
    T = (np.random.default_rng(0).normal(size=g.shape) + 0j) * g.support
    np.testing.assert_allclose(g.from_grid(g.to_grid(T)).astype(complex), T, atol=1e-12)
    assert np.all(g.lvec()[g.support].sum(-1) == 1)


def test_leading_torus_is_odd_and_sized():
    g = TorusGrid(2, 2, 6)
    T = leading_table(g, (1, 3), [4e-4, 1e-4])
    assert np.max(np.abs(T + T[..., ::-1])) == 0
    assert float(np.sum(np.abs(T) ** 2)) == pytest.approx((4e-4 + 1e-4) / 2)


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_linear_torus_has_zero_defect():
    st = build_initial(CubicCoefficients(), (1, 3), [1e-4, 2e-4], Lb=2, J=6)
    assert st.defect() == 0
    assert run(st, 2, stop_on_truncation=False).ledger[-1]["correction"] == 0


def test_preconditions():
    with pytest.raises(OrchestratorError) as e:
        build_initial(CUBIC, (1, 4), [1e-4], Lb=2, J=8)
    assert e.value.code == "precondition"
    with pytest.raises(OrchestratorError):
        build_initial(CUBIC, (1, 40), [1e-4, 1e-4], Lb=2, J=8)
    with pytest.raises(OrchestratorError):
        build_initial(CUBIC, (1, 4), [1e-4, -1e-4], Lb=2, J=8)


def test_flags_and_strict():
    with pytest.warns(UserWarning):
        st = build_initial(CUBIC, (1, 2), [1e-5, 1e-5], Lb=2, J=8)
    assert st.flags["d-equals-2"] and st.flags["non-generic-sites"] > 0
    with pytest.raises(OrchestratorError) as e:
        build_initial(CUBIC, (1, 2, 4), [1e-5] * 3, Lb=2, J=10, strict=True)
    assert e.value.code == "non-generic-sites"


def test_truncation_stop():
    st = build_initial(CUBIC, (1, 3, 5), [1e-6] * 3, Lb=1, J=8, K0=1.2)
    out = run(st, 5)
    assert out.flags["truncation-bound"] == out.n < 5


@pytest.fixture(scope="module")
def d3():
    return orch_cases.d3_run()


def test_defects_decrease_quadratically(d3):
    st, _ = d3
    D = [e["defect"] for e in st.ledger]
    assert len(D) == 4
    assert all(b <= 0.5 * a for a, b in zip(D, D[1:]))
    assert D[-1] / D[0] <= 1e-10


def test_embedding_symmetries_and_drift(d3):
    st, emb = d3
    assert emb["odd_error"] <= 1e-10 and emb["reversibility_error"] <= 1e-10
    xi_abs = float(np.sum(st.xi))
    assert emb["omega_drift"] <= 10 * xi_abs * st.eps0
    assert emb["correction_norm"] <= emb["leading_scale"]


def test_final_defect_recomputed(d3):
    st, _ = d3
    assert invariance_defect(st.a, st.grid, st.U, st.omega) == pytest.approx(st.ledger[-1]["defect"])
