//! Modal-expansion checks on the two-channel matching network: residue
//! reconstruction of the transfer matrix, unobservability of the near-DC
//! mode at the ports, passivity of the stored energy, the high-frequency
//! asymptote, and transmission zeros with their parameter derivatives.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rezo::eigen::solve_pencil;
use rezo::modal::{find_zeros, natural_response, residues, spectral_projector, zero_derivs};
use rezo::netlist::Circuit;
use rezo::statespace::{build_state_space, build_stamps, direct_transfer};

const NETLIST: &str = include_str!("../../../fixtures/matchnet.cir");

fn matchnet() -> Circuit {
    Circuit::parse(NETLIST).unwrap()
}

/// 50-point log-spaced sweep over 1–1000 MHz, nudged off any frequency
/// within 2% of a resonance so the reconstruction comparison is not taken
/// on top of a pole.
fn sweep_frequencies(resonances_hz: &[f64]) -> Vec<f64> {
    let (lo, hi) = (1e6_f64, 1e9_f64);
    (0..50)
        .map(|k| {
            let mut f = lo * ((hi / lo).ln() * k as f64 / 49.0).exp();
            while resonances_hz.iter().any(|&fr| (f - fr).abs() < 0.02 * fr) {
                f *= 1.035;
            }
            f
        })
        .collect()
}

#[test]
fn residue_expansion_reconstructs_transfer_matrix() {
    let c = matchnet();
    let ss = build_state_space(&c).unwrap();
    let es = solve_pencil(&ss.m, &ss.n).unwrap();
    let re = residues(&es, &ss).unwrap();

    let resonances: Vec<f64> = es
        .lambdas
        .iter()
        .filter(|s| s.im > 0.0)
        .map(|s| s.im / (2.0 * std::f64::consts::PI))
        .collect();
    for f in sweep_frequencies(&resonances) {
        let s = C64::new(0.0, 2.0 * std::f64::consts::PI * f);
        let h_direct = direct_transfer(&ss, s).unwrap();
        let h_modal = re.evaluate(s);
        let err = (&h_modal - &h_direct).norm() / h_direct.norm();
        assert!(err < 1e-9, "reconstruction error {err:.3e} at {:.3} MHz", f / 1e6);
    }
}

#[test]
fn near_dc_mode_is_unobservable_at_the_ports() {
    // The network couples to its ports only through capacitors, so the port
    // response carries a factor s² per mode; the residue of the full port
    // transfer at the (near-zero) real eigenvalue is crushed by s_n² and
    // must vanish relative to the resonant modes' residues.
    let c = matchnet();
    let ss = build_state_space(&c).unwrap();
    let es = solve_pencil(&ss.m, &ss.n).unwrap();
    let re = residues(&es, &ss).unwrap();

    let dc_index = es
        .lambdas
        .iter()
        .enumerate()
        .filter(|(_, s)| s.im == 0.0)
        .min_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
        .map(|(i, _)| i)
        .expect("network has one real eigenvalue");
    let max_port_residue = (0..es.dim())
        .map(|n| re.port_residue(n).norm())
        .fold(0.0_f64, f64::max);
    let dc_port_residue = re.port_residue(dc_index).norm();
    assert!(
        dc_port_residue < 1e-12 * max_port_residue,
        "near-DC port residue {dc_port_residue:.3e} vs max {max_port_residue:.3e}"
    );
}

/// Slowest decay rate among the *oscillatory* modes. The network has no
/// conductive path to ground (all port and ground coupling is capacitive),
/// so a uniform-voltage charge mode sits at s = 0 exactly; its infinite
/// time constant would make a "10 decay constants" horizon meaningless, and
/// explicit integration across it infeasible next to the ~1e9 rad/s
/// resonances. All dissipative dynamics live on the oscillatory horizon.
fn oscillatory_decay_rate(lambdas: &[C64]) -> f64 {
    lambdas
        .iter()
        .filter(|s| s.im != 0.0)
        .map(|s| s.re.abs())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn stored_energy_never_increases() {
    // ½ xᵀMx is the energy in the capacitors and inductors; the only
    // resistive element dissipates, so the zero-input energy is monotone
    // non-increasing. Sampled over the oscillatory horizon — beyond it only
    // the marginal charge mode (constant energy) survives.
    let c = matchnet();
    let ss = build_state_space(&c).unwrap();
    let es = solve_pencil(&ss.m, &ss.n).unwrap();
    let slowest = oscillatory_decay_rate(&es.lambdas);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..3 {
        let x0 = DVector::from_fn(ss.num_states(), |_, _| rng.gen_range(-1.0..1.0));
        let mut prev = f64::INFINITY;
        for k in 0..60 {
            let t = k as f64 * (5.0 / slowest) / 59.0;
            let x = natural_response(&es, &ss.m, &x0, t);
            let energy = 0.5 * (x.transpose() * &ss.m * &x)[0];
            assert!(
                energy <= prev * (1.0 + 1e-9),
                "energy increased at t = {t:.3e}: {energy:.6e} > {prev:.6e}"
            );
            prev = energy;
        }
    }
}

#[test]
fn high_frequency_response_approaches_capacitive_asymptote() {
    // Far above every pole, (N + sM)⁻¹ → (sM)⁻¹, so H(s)/s → E + D M⁻¹ B.
    let c = matchnet();
    let ss = build_state_space(&c).unwrap();
    let es = solve_pencil(&ss.m, &ss.n).unwrap();
    let s = C64::new(1e9 * es.lambda_scale(), 0.0);

    let h = direct_transfer(&ss, s).unwrap();
    let h_over_s = h.map(|v| v / s);
    let m_inv_b = ss.m.clone().lu().solve(&ss.b).unwrap();
    let asymptote = &ss.e + &ss.d * m_inv_b;
    let err = (0..ss.num_ports())
        .flat_map(|i| (0..ss.num_ports()).map(move |j| (i, j)))
        .map(|(i, j)| (h_over_s[(i, j)] - asymptote[(i, j)]).norm())
        .fold(0.0_f64, f64::max);
    assert!(
        err < 1e-6 * asymptote.norm(),
        "asymptote deviation {err:.3e} vs scale {:.3e}",
        asymptote.norm()
    );
}

#[test]
fn transmission_zeros_satisfy_response_check() {
    let c = matchnet();
    let ss = build_state_space(&c).unwrap();
    let zs = find_zeros(&ss, (1, 1)).unwrap();
    assert!(!zs.zeros.is_empty());
    // Port coupling is capacitive, so H11 must vanish at the origin.
    assert!(
        zs.zeros.iter().any(|z| z.norm() == 0.0),
        "expected a zero at s = 0: {:?}",
        zs.zeros
    );

    // Independent re-verification of the zero post-condition on the
    // deflated response H/s (H itself vanishes at the origin for every s on
    // a capacitively coupled network, so |H(z)| alone is insensitive near
    // s = 0). The structural origin zero is exact by construction.
    let g_scale = (0..60)
        .filter_map(|k| {
            let f = 1e6 * (1e3_f64.ln() * k as f64 / 59.0).exp();
            let s = C64::new(0.0, 2.0 * std::f64::consts::PI * f);
            direct_transfer(&ss, s).ok().map(|h| (h[(0, 0)] / s).norm())
        })
        .fold(0.0_f64, f64::max);
    for z in zs.zeros.iter().filter(|z| z.norm() > 0.0) {
        let g = direct_transfer(&ss, *z).unwrap()[(0, 0)] / z;
        assert!(
            g.norm() <= 1e-8 * g_scale,
            "|H11/s at {z}| = {:.3e} vs deflated response scale {g_scale:.3e}",
            g.norm()
        );
    }
}

#[test]
fn zero_derivative_matches_finite_difference() {
    let c = matchnet();
    let ss = build_state_space(&c).unwrap();
    let stamps = build_stamps(&c, &ss);
    let stamp = stamps.iter().find(|st| st.param.id == "C0").unwrap();

    let zs = find_zeros(&ss, (1, 1)).unwrap();
    // Pick the best-separated oscillatory zero for stable FD tracking.
    let z = *zs
        .zeros
        .iter()
        .max_by(|a, b| a.im.partial_cmp(&b.im).unwrap())
        .unwrap();
    assert!(z.im > 0.0, "expected an oscillatory zero: {:?}", zs.zeros);
    let analytic = zero_derivs(&ss, stamp, (1, 1), z).unwrap();

    let h0 = stamp.param.nominal;
    let delta = 1e-6 * h0;
    let pidx = c.parameters().iter().position(|p| p.id == "C0").unwrap();
    let zero_at = |hv: f64| {
        let cp = c.with_param(pidx, hv);
        let ssp = build_state_space(&cp).unwrap();
        let zsp = find_zeros(&ssp, (1, 1)).unwrap();
        *zsp.zeros
            .iter()
            .min_by(|a, b| (*a - z).norm().partial_cmp(&(*b - z).norm()).unwrap())
            .unwrap()
    };
    let fd = (zero_at(h0 + delta) - zero_at(h0 - delta)) / (2.0 * delta);
    let err = (analytic - fd).norm() / fd.norm();
    assert!(
        err < 1e-4,
        "dz/dC0: analytic {analytic} vs FD {fd} (rel {err:.3e})"
    );
}

#[test]
fn spectral_projectors_resolve_the_identity() {
    // Completeness of the bi-orthonormal eigenbasis: Σ_n x_n y_nᵀ = −M⁻¹.
    let c = matchnet();
    let ss = build_state_space(&c).unwrap();
    let es = solve_pencil(&ss.m, &ss.n).unwrap();
    let mut sum = DMatrix::<C64>::zeros(es.dim(), es.dim());
    for n in 0..es.dim() {
        sum += spectral_projector(&es, n);
    }
    let m_inv = ss.m.clone().lu().try_inverse().unwrap();
    let target = m_inv.map(|v| C64::new(-v, 0.0));
    let err = (&sum - &target).norm() / target.norm();
    assert!(err < 1e-10, "projector completeness error {err:.3e}");
}
