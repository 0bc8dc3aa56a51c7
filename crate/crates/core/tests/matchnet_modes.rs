//! End-to-end pole extraction on the bundled two-port matching network.
//!
//! Golden values: the network has three oscillatory modes near 199.9 MHz,
//! 179.0 MHz and 50.0 MHz plus one non-oscillatory DC mode (the coupling
//! capacitors block any conduction path to the ports at DC). Frequencies
//! were cross-checked against a full-mesh AC sweep of the same netlist.

use rezo::eigen::{match_resonance, solve_pencil, Pairing};
use rezo::{build_state_space, Circuit};

fn matchnet() -> rezo::statespace::StateSpaceModel {
    let text = include_str!("../../../fixtures/matchnet.cir");
    let circuit = Circuit::parse(text).expect("fixture parses");
    build_state_space(&circuit).expect("fixture builds")
}

#[test]
fn pole_frequencies_match_reference() {
    let ss = matchnet();
    let es = solve_pencil(&ss.m, &ss.n).expect("pencil solves");
    assert_eq!(es.dim(), 7, "4 node voltages + 3 inductor currents");

    let freqs_mhz: Vec<f64> = es
        .lambdas
        .iter()
        .zip(&es.pairing)
        .filter(|(_, p)| matches!(p, Pairing::PairPlus { .. }))
        .map(|(s, _)| s.im / (2.0 * std::f64::consts::PI) / 1e6)
        .collect();
    assert_eq!(freqs_mhz.len(), 3);
    // Sorted descending by construction.
    assert!((freqs_mhz[0] - 199.9).abs() < 0.05, "got {}", freqs_mhz[0]);
    assert!((freqs_mhz[1] - 179.0).abs() < 0.05, "got {}", freqs_mhz[1]);
    assert!((freqs_mhz[2] - 50.0).abs() < 0.05, "got {}", freqs_mhz[2]);

    // One real mode, at the origin: no DC conduction path.
    let reals: Vec<f64> = es
        .lambdas
        .iter()
        .zip(&es.pairing)
        .filter(|(_, p)| matches!(p, Pairing::Real))
        .map(|(s, _)| s.re)
        .collect();
    assert_eq!(reals.len(), 1);
    assert!(reals[0].abs() < 1e-3 * es.lambda_scale(), "got {}", reals[0]);

    // All oscillatory modes are damped (strictly left half-plane).
    for (s, p) in es.lambdas.iter().zip(&es.pairing) {
        if matches!(p, Pairing::PairPlus { .. }) {
            assert!(s.re < 0.0, "mode at {s} is not damped");
        }
    }
}

#[test]
fn resonance_matching_selects_nearest_mode() {
    let ss = matchnet();
    let es = solve_pencil(&ss.m, &ss.n).unwrap();
    let k1 = match_resonance(&es, 200e6).unwrap();
    assert!((es.frequency_hz(k1) / 1e6 - 199.9).abs() < 0.05);
    let k2 = match_resonance(&es, 50e6).unwrap();
    assert!((es.frequency_hz(k2) / 1e6 - 50.0).abs() < 0.05);
    // A guess far from every mode is rejected rather than silently matched:
    // 300 MHz is more than 25% away from the closest mode at ~199.9 MHz.
    assert!(match_resonance(&es, 300e6).is_err());
    // The DC mode is matched by a zero-frequency guess.
    let k0 = match_resonance(&es, 0.0).unwrap();
    assert!(matches!(es.pairing[k0], Pairing::Real));
}

#[test]
fn eigenvector_voltage_profile_matches_reference() {
    // Mode-shape table for the display normalization (largest voltage entry
    // scaled to 1): per-node voltage magnitudes for each oscillatory mode,
    // cross-checked against a mesh-current solution of the same network.
    let ss = matchnet();
    let es = solve_pencil(&ss.m, &ss.n).unwrap();
    let disp = es.display_rescaled(&ss.state_labels);

    // State order: v(n1), v(n3), v(n2), v(n4), i(L6), i(L7), i(Lcoil).
    let idx_of = |label: &str| {
        ss.state_labels
            .iter()
            .position(|l| l.to_string() == label)
            .unwrap_or_else(|| panic!("missing state {label}"))
    };
    let (n1, n2, n3, n4) = (idx_of("v(n1)"), idx_of("v(n2)"), idx_of("v(n3)"), idx_of("v(n4)"));

    // (mode index, [|v(n1)|, |v(n2)|, |v(n3)|, |v(n4)|]) with modes sorted
    // by descending frequency; DC mode is the last column.
    let expect = [
        (0, [1.0, 0.0, 0.681, 0.067]),
        (2, [1.0, 0.039, 0.547, 0.085]),
        (4, [0.003, 0.525, 0.395, 1.0]),
        (6, [1.0, 1.0, 1.0, 1.0]),
    ];
    for (col, want) in expect {
        for (row, w) in [n1, n2, n3, n4].into_iter().zip(want) {
            let got = disp[(row, col)].norm();
            assert!(
                (got - w).abs() < 0.05,
                "mode col {col}, state row {row}: |v| = {got:.3}, want {w:.3}"
            );
        }
    }
}
