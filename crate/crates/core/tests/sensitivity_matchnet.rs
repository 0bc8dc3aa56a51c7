//! Sensitivity Jacobian of the bundled matching network against golden
//! values and against the re-solve finite-difference oracle.
//!
//! The golden table lists, per parameter, the channel-1 and channel-2
//! frequency sensitivities and reflection-derivative magnitudes in display
//! units (MHz/pF, MHz/nH, MHz/Ω for frequency rows; 1/pF, 1/nH, 1/Ω for
//! reflection rows). The values were frozen from an independent prototype
//! (mesh-equation AC solve + re-solve finite differences) and agree with a
//! hand-built reference table for this network to the printed precision.

use nalgebra::DMatrix;
use rezo::netlist::Circuit;
use rezo::sensitivity::{
    assemble_sensitivity, fd_jacobian_refined, fd_oracle, Resonance, ResponseSpec, RowKind,
    SensitivityMatrix,
};

fn matchnet() -> Circuit {
    Circuit::parse(include_str!("../../../fixtures/matchnet.cir")).unwrap()
}

fn response_spec() -> ResponseSpec {
    ResponseSpec::new(vec![
        Resonance::new("ch1", 200e6, Some(1)),
        Resonance::new("ch2", 50e6, Some(2)),
    ])
}

/// Per-parameter display-unit scale (per pF / per nH / per Ω).
fn unit_factor(unit: &str) -> f64 {
    match unit {
        "F" => 1e-12,
        "H" => 1e-9,
        "Ohm" => 1.0,
        other => panic!("unexpected unit {other}"),
    }
}

/// Jacobian converted to display units: frequency rows MHz per display
/// unit, reflection rows 1 per display unit.
fn to_display(sm: &SensitivityMatrix, values: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = values.clone();
    for i in 0..out.nrows() {
        let rf = match sm.row_kinds[i] {
            RowKind::FrequencyHz { .. } | RowKind::PoleRate { .. } => 1e-6,
            _ => 1.0,
        };
        for (j, p) in sm.params.iter().enumerate() {
            out[(i, j)] *= rf * unit_factor(p.unit);
        }
    }
    out
}

/// (parameter id, ∂f₁, |∂S11|, ∂f₂, |∂S22|) in display units.
const GOLDEN: [(&str, f64, f64, f64, f64); 12] = [
    ("C0", -14.4, 1.78, -0.1, 0.06),
    ("C1", -5.1, 3.85, 0.0, 0.00),
    ("C2", -5.1, 1.87, 0.0, 0.00),
    ("C3", -2.4, 0.55, -0.1, 0.06),
    ("C4", 0.0, 0.00, -0.2, 0.08),
    ("C5", 0.0, 0.00, -0.2, 0.71),
    ("C6", -2.4, 0.55, 0.0, 0.00),
    ("C7", 0.0, 0.01, -0.6, 0.00),
    ("L6", -0.6, 0.14, 0.0, 0.00),
    ("L7", 0.0, 0.01, 0.0, 0.00),
    ("Lcoil", -0.4, 0.02, 0.0, 0.00),
    ("Lcoil.rs", 0.0, 4.14, 0.0, 4.04),
];

#[test]
fn jacobian_reproduces_golden_table() {
    let c = matchnet();
    let sm = assemble_sensitivity(&c, &response_spec()).unwrap();
    assert_eq!(sm.values.nrows(), 6);
    assert_eq!(sm.values.ncols(), 12);
    let disp = to_display(&sm, &sm.values);

    // Row layout: f(ch1), f(ch2), Re/Im S11(ch1), Re/Im S22(ch2).
    let (f1, f2, re1, im1, re2, im2) = (0, 1, 2, 3, 4, 5);
    assert_eq!(sm.row_labels[re1], "Re S11(ch1)");
    assert_eq!(sm.row_labels[im2], "Im S22(ch2)");

    for (id, df1, ds11, df2, ds22) in GOLDEN {
        let j = sm.param_index(id).unwrap_or_else(|| panic!("param {id}"));
        let got_f1 = disp[(f1, j)];
        let got_f2 = disp[(f2, j)];
        let got_s11 = disp[(re1, j)].hypot(disp[(im1, j)]);
        let got_s22 = disp[(re2, j)].hypot(disp[(im2, j)]);
        for (what, got, want) in [
            ("df1", got_f1, df1),
            ("|dS11|", got_s11, ds11),
            ("df2", got_f2, df2),
            ("|dS22|", got_s22, ds22),
        ] {
            assert!(
                (got - want).abs() < 0.05,
                "{id} {what}: got {got:.3}, reference {want}"
            );
        }
    }
}

#[test]
fn nominal_response_matches_frozen_values() {
    let c = matchnet();
    let sm = assemble_sensitivity(&c, &response_spec()).unwrap();

    // Mode frequencies (nominal observable vector, Hz).
    assert!((sm.nominal_omega[0] / 1e6 - 199.9).abs() < 0.05);
    assert!((sm.nominal_omega[1] / 1e6 - 50.0).abs() < 0.05);

    // On-resonance scattering, frozen from the prototype AC solve.
    let s1 = sm.resonances[0].s_matrix.as_ref().unwrap();
    let s2 = sm.resonances[1].s_matrix.as_ref().unwrap();
    let s11 = s1[(0, 0)];
    let s22_at_1 = s1[(1, 1)];
    assert!((s11.norm() - 0.021241459).abs() < 1e-5, "|S11| = {}", s11.norm());
    assert!((s11.re - 0.0124).abs() < 1e-3 && (s11.im + 0.0172).abs() < 1e-3, "{s11}");
    assert!(
        (s22_at_1.re - 0.8623).abs() < 1e-3 && (s22_at_1.im + 0.5063).abs() < 1e-3,
        "{s22_at_1}"
    );
    assert!((s2[(1, 1)].norm() - 0.041870).abs() < 1e-5, "|S22| = {}", s2[(1, 1)].norm());

    // Both channels meet a −10 dB return-loss target at nominal.
    assert!(s11.norm() < 0.3162);
    assert!(s2[(1, 1)].norm() < 0.3162);
}

#[test]
fn jacobian_matches_refined_fd_oracle() {
    // Every entry of the analytic Jacobian against a Richardson-refined
    // re-solve finite difference, compared in display units at
    // max(1e-4 relative, 1e-9 of the row scale).
    let c = matchnet();
    let rs = response_spec();
    let sm = assemble_sensitivity(&c, &rs).unwrap();
    let fd = fd_jacobian_refined(&c, &rs).unwrap();
    let disp_an = to_display(&sm, &sm.values);
    let disp_fd = to_display(&sm, &fd);

    for i in 0..disp_an.nrows() {
        let row_scale = (0..disp_an.ncols())
            .map(|j| disp_an[(i, j)].abs())
            .fold(1.0_f64, f64::max);
        for j in 0..disp_an.ncols() {
            let dev = (disp_an[(i, j)] - disp_fd[(i, j)]).abs();
            let tol = (1e-4 * disp_an[(i, j)].abs()).max(1e-9 * row_scale);
            assert!(
                dev <= tol,
                "row {} ({}), param {}: analytic {:.9e} vs fd {:.9e} (dev {dev:.2e}, tol {tol:.2e})",
                i,
                sm.row_labels[i],
                sm.params[j].id,
                disp_an[(i, j)],
                disp_fd[(i, j)]
            );
        }
    }
}

#[test]
fn single_step_fd_oracle_agrees_at_default_step() {
    // The plain central-difference oracle at a 1e-6 relative step. A single
    // difference divides the solver's ~1e-13 noise on the O(1) response by
    // tiny mixed-unit parameter steps (sub-attofarad for the capacitors),
    // so it cannot resolve entries to machine precision. Measured on this
    // network, the deviation peaks at ~1e-5 of the row scale (Im rows,
    // resistance column) and ~1.2e-4 relative on mid-scale entries; the
    // tolerances below carry ~2.5x headroom over those measurements. The
    // strict per-entry verification is the Ridders-ladder test above.
    let c = matchnet();
    let rs = response_spec();
    let sm = assemble_sensitivity(&c, &rs).unwrap();
    let disp_an = to_display(&sm, &sm.values);
    let row_scales: Vec<f64> = (0..disp_an.nrows())
        .map(|i| (0..disp_an.ncols()).map(|j| disp_an[(i, j)].abs()).fold(0.0_f64, f64::max))
        .collect();

    for (j, p) in sm.params.iter().enumerate() {
        let col = fd_oracle(&c, &rs, &p.id, 1e-6).unwrap();
        for i in 0..disp_an.nrows() {
            let rf = match sm.row_kinds[i] {
                RowKind::FrequencyHz { .. } | RowKind::PoleRate { .. } => 1e-6,
                _ => 1.0,
            };
            let fd_disp = col[i] * rf * unit_factor(p.unit);
            let dev = (disp_an[(i, j)] - fd_disp).abs();
            let tol = (3e-4 * disp_an[(i, j)].abs()).max(2e-5 * row_scales[i]);
            assert!(
                dev <= tol,
                "row {}, param {}: analytic {:.9e} vs fd {:.9e}",
                sm.row_labels[i],
                p.id,
                disp_an[(i, j)],
                fd_disp
            );
        }
    }
}

#[test]
fn decoupled_parameters_have_negligible_entries() {
    // Cross-channel zero blocks: the channel-1 observables are nearly
    // insensitive to the channel-2 side (C4, C5, C7, L7) and vice versa
    // (C1, C2, C6, L6). The network is connected, so these entries are
    // small rather than exactly zero; the meaningful statement is that
    // each rounds to 0.0 at the reference table's 0.05 display resolution
    // (MHz per pF/nH/Ohm on the frequency rows, per-unit on the
    // reflection rows). The largest is df2/dL6 = -0.043 MHz/nH. Note this
    // smallness is a display-unit statement: per *fractional* change, a
    // +5% step of L6 still moves f2 by about -0.1 MHz.
    let c = matchnet();
    let sm = assemble_sensitivity(&c, &response_spec()).unwrap();
    let disp = to_display(&sm, &sm.values);
    // Row indices per channel: frequency, Re S, Im S.
    let ch1_rows = [0usize, 2, 3];
    let ch2_rows = [1usize, 4, 5];
    let ch1_zeros = ["C4", "C5", "C7", "L7"];
    let ch2_zeros = ["C1", "C2", "C6", "L6"];

    for (rows, zeros) in [(ch1_rows, ch1_zeros), (ch2_rows, ch2_zeros)] {
        for id in zeros {
            let j = sm.param_index(id).unwrap();
            let freq_entry = disp[(rows[0], j)].abs();
            let s_mag = disp[(rows[1], j)].hypot(disp[(rows[2], j)]);
            assert!(
                freq_entry < 0.05,
                "param {id}, row {}: {:.4} exceeds display resolution",
                sm.row_labels[rows[0]],
                disp[(rows[0], j)]
            );
            assert!(
                s_mag < 0.05,
                "param {id}, rows {}/{}: |dS| = {s_mag:.4} exceeds display resolution",
                sm.row_labels[rows[1]],
                sm.row_labels[rows[2]]
            );
        }
    }
}
