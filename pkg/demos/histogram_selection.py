"""Select a conditional histogram by two-level DP with a slope-calibrated penalty.

Run with ``python3 demos/histogram_selection.py`` (about a minute).
"""

import numpy as np

from pcde import selection, simulate


def main(n=800, seed=1):
    sc = simulate.load_scenario("histogram1d")
    data = simulate.sample(sc.truth, n, seed=seed)
    report, model = selection.dp_select_poly(data, "RDP", "RDP", r_candidates=[(0,)],
                                             budget=selection.PolyBudget(max_x_leaves=8, max_y_leaves=8))
    print(f"n = {n}")
    print(f"kappa_hat = {report.slope.kappa_hat:.4f}, kappa_tilde = {report.slope.kappa_tilde:.4f}")
    print(f"chosen: {report.chosen}")
    print(f"  dim = {model.dimension()[0]}, loglik = {model.loglik:.3f}, score = {report.chosen_score:.3f}")
    risk = simulate.jkl_risk(sc.truth, model, data.X)
    print(f"  JKL risk on this design = {float(risk):.5f}")

    table = simulate.oracle_table(sc.truth, sc.grid, n, 10, seed=seed)
    print("\ngrid oracle table (10 replicates)")
    print(f"{'model':<16}{'dim':>5}{'risk':>10}")
    for row in sorted(table.rows, key=lambda r: r.dim):
        print(f"{row.label:<16}{row.dim:>5}{row.risk:>10.5f}")
    print(f"selected risk {table.selected_risk:.5f}, ratio to oracle {table.ratio:.3f}")
    print(f"selected dims across replicates: {sorted(set(table.selected_dims))}")
    return np.isfinite(table.ratio)


if __name__ == "__main__":
    main()
