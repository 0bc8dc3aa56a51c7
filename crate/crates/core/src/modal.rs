//! Modal expansions of the circuit response: zero-input natural response,
//! residue (partial-fraction) form of the transfer matrix, eigenvector and
//! residue sensitivities, and transmission zeros with their parameter
//! derivatives.
//!
//! Everything here builds on the bi-orthonormalized eigensolution of
//! [`crate::eigen`] (`−YᵀMX = I`, `YᵀNX = Λ`), under which the resolvent
//! factors as `(N + sM)⁻¹ = X (Λ − sI)⁻¹ Yᵀ` and the core transfer matrix
//! `D (N + sM)⁻¹ B` becomes a sum of rank-one terms
//! `Σ_n K_n / (s − s_n)` with `K_n = −(D x_n)(y_nᵀ B)`.
//!
//! Eigenvector derivatives carry a scale-gauge ambiguity (rescaling
//! `x_n → α x_n`, `y_n → y_n/α` preserves the normalization); the residues
//! and the spectral projectors `x_n y_nᵀ` are gauge-invariant, so tests
//! validate derivatives through those quantities. The reported eigenvector
//! derivative uses the symmetric gauge that splits the normalization
//! constraint equally between `x_n` and `y_n`.

use nalgebra::{DMatrix, DVector};

use crate::eigen::{pencil_eigenvalues, EigenSolution};
use crate::error::{Error, Result};
use crate::linalg::{complexify, C64};
use crate::sensitivity::{dh_dh, dh_ds, ResolventOps};
use crate::statespace::{Coupling, ParameterStamp, StateSpaceModel};

/// Partial-fraction expansion of the transfer matrix.
///
/// The core expansion is coupling-independent:
/// `D (N + sM)⁻¹ B = Σ_n residues[n] / (s − poles[n])`.
/// [`ResidueExpansion::evaluate`] applies the port-coupling factors on top,
/// and [`ResidueExpansion::port_residue`] exposes the residues of the full
/// port response `H(s)` (which pick up a factor `s_n²` under derivative
/// coupling, because `s²/(s − s_n) = s + s_n + s_n²/(s − s_n)`).
#[derive(Debug, Clone)]
pub struct ResidueExpansion {
    /// Pole locations `s_n` (the pencil eigenvalues, rad/s).
    pub poles: Vec<C64>,
    /// Rank-one residue matrices `K_n = −(D x_n)(y_nᵀ B)` of the core
    /// expansion, one per pole.
    pub residues: Vec<DMatrix<C64>>,
    /// Direct feed-through term `E`.
    pub direct: DMatrix<f64>,
    /// Port coupling convention the expansion was built for.
    pub coupling: Coupling,
}

impl ResidueExpansion {
    /// Number of ports.
    pub fn num_ports(&self) -> usize {
        self.direct.nrows()
    }

    /// Reconstruct the port transfer matrix `H(s)` from the expansion.
    ///
    /// Standard coupling: `H = E + Σ K_n/(s − s_n)`. Derivative coupling:
    /// `H = s·(E + Σ K_n) + Σ s_n K_n + Σ s_n² K_n/(s − s_n)`.
    pub fn evaluate(&self, s: C64) -> DMatrix<C64> {
        let p = self.num_ports();
        let mut h = DMatrix::<C64>::zeros(p, p);
        match self.coupling {
            Coupling::Standard => {
                for (s_n, k_n) in self.poles.iter().zip(&self.residues) {
                    let f = (s - s_n).inv();
                    h.zip_apply(k_n, |acc, k| *acc += k * f);
                }
                for i in 0..p {
                    for j in 0..p {
                        h[(i, j)] += self.direct[(i, j)];
                    }
                }
            }
            Coupling::Derivative => {
                for (s_n, k_n) in self.poles.iter().zip(&self.residues) {
                    let f = s + s_n + s_n * s_n * (s - s_n).inv();
                    h.zip_apply(k_n, |acc, k| *acc += k * f);
                }
                for i in 0..p {
                    for j in 0..p {
                        h[(i, j)] += s * self.direct[(i, j)];
                    }
                }
            }
        }
        h
    }

    /// Residue of the full port response `H(s)` at pole `n`: `K_n` for
    /// standard coupling, `s_n² K_n` for derivative coupling.
    pub fn port_residue(&self, n: usize) -> DMatrix<C64> {
        match self.coupling {
            Coupling::Standard => self.residues[n].clone(),
            Coupling::Derivative => {
                let f = self.poles[n] * self.poles[n];
                self.residues[n].map(|k| k * f)
            }
        }
    }
}

/// Zero-input state response `x(t)` from the initial condition `x0`.
///
/// Each mode evolves as `e^{s_n t}`; expanding `x0` in the right
/// eigenvectors with the bi-orthonormalization `−YᵀMX = I` gives
/// `x(t) = −X e^{Λt} Yᵀ M x0`, which reproduces `x0` exactly at `t = 0`.
/// Conjugate-pair contributions cancel in pairs, so the imaginary part is
/// roundoff; the real part is returned.
pub fn natural_response(
    es: &EigenSolution,
    m: &DMatrix<f64>,
    x0: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let coeffs = es.y.transpose() * complexify(m) * x0.map(|v| C64::new(v, 0.0));
    let mut x = DVector::<C64>::zeros(es.dim());
    for (n, s_n) in es.lambdas.iter().enumerate() {
        let w = -coeffs[n] * (s_n * t).exp();
        x.axpy(w, &es.x.column(n).into_owned(), C64::new(1.0, 0.0));
    }
    x.map(|v| v.re)
}

/// Partial-fraction residues of the transfer matrix.
///
/// Requires simple eigenvalues: a repeated pole needs a higher-order
/// partial-fraction term that the rank-one form cannot represent.
pub fn residues(es: &EigenSolution, ss: &StateSpaceModel) -> Result<ResidueExpansion> {
    if es.clusters.iter().any(|c| c.len() > 1) {
        return Err(Error::Unsupported(
            "repeated eigenvalues: the rank-one residue expansion requires simple poles".into(),
        ));
    }
    let d_c = complexify(&ss.d);
    let b_c = complexify(&ss.b);
    let mut out = Vec::with_capacity(es.dim());
    for n in 0..es.dim() {
        let dx = &d_c * es.x.column(n);
        let ytb = es.y.column(n).transpose() * &b_c;
        out.push(-(dx * ytb));
    }
    Ok(ResidueExpansion {
        poles: es.lambdas.clone(),
        residues: out,
        direct: ss.e.clone(),
        coupling: ss.coupling,
    })
}

/// First-order change of one eigenvector pair under a parameter stamp.
#[derive(Debug, Clone)]
pub struct ModeDerivs {
    /// Derivative of the right eigenvector `∂x_n/∂h`.
    pub dx: DVector<C64>,
    /// Derivative of the left eigenvector `∂y_n/∂h`.
    pub dy: DVector<C64>,
}

/// Derivatives of the right and left eigenvectors of mode `n` with respect
/// to the stamped parameter.
///
/// Expanding the perturbed eigenvector in the unperturbed basis and using
/// `Yᵀ(N + s_n M)X = Λ − s_n I` gives the off-mode coefficients
/// `c_m = y_mᵀ(∂N + s_n ∂M)x_n / (s_n − s_m)`; the on-mode coefficient is
/// fixed by keeping `−y_nᵀ M x_n = 1` to first order, split symmetrically:
/// `c_n = d_n = ½ y_nᵀ ∂M x_n`.
///
/// Errors if any eigenvalue is repeated, or if another eigenvalue lies
/// within `1e-6` of `s_n` relative to the spectral scale (the divided
/// difference then amplifies roundoff beyond usefulness).
pub fn eigvec_derivs(
    es: &EigenSolution,
    stamp: &ParameterStamp,
    n: usize,
) -> Result<ModeDerivs> {
    if es.clusters.iter().any(|c| c.len() > 1) {
        return Err(Error::Unsupported(
            "repeated eigenvalues: eigenvector derivatives require simple poles".into(),
        ));
    }
    let s_n = es.lambdas[n];
    let scale = es.lambda_scale();
    for (m, s_m) in es.lambdas.iter().enumerate() {
        if m != n && (s_n - s_m).norm() < 1e-6 * scale {
            return Err(Error::numerical(format!(
                "near-degenerate eigenvalues (|s_{n} - s_{m}| < 1e-6 of the spectral scale): \
                 eigenvector derivative is ill-conditioned"
            )));
        }
    }

    let dm_c = complexify(&stamp.dm);
    let w = complexify(&stamp.dn) + dm_c.map(|v| v * s_n);
    let x_n = es.x.column(n).into_owned();
    let y_n = es.y.column(n).into_owned();
    let wx = &w * &x_n;
    let wty = w.transpose() * &y_n;
    let c_diag = 0.5 * (y_n.transpose() * &dm_c * &x_n)[0];

    let mut dx = x_n.map(|v| v * c_diag);
    let mut dy = y_n.map(|v| v * c_diag);
    for m in 0..es.dim() {
        if m == n {
            continue;
        }
        let denom = (s_n - es.lambdas[m]).inv();
        let c_m = (es.y.column(m).transpose() * &wx)[0] * denom;
        let d_m = (es.x.column(m).transpose() * &wty)[0] * denom;
        dx.axpy(c_m, &es.x.column(m).into_owned(), C64::new(1.0, 0.0));
        dy.axpy(d_m, &es.y.column(m).into_owned(), C64::new(1.0, 0.0));
    }
    Ok(ModeDerivs { dx, dy })
}

/// Derivative of the core residue `K_n = −(D x_n)(y_nᵀ B)` with respect to
/// the stamped parameter.
///
/// Product rule over the four factors; the eigenvector derivatives come
/// from [`eigvec_derivs`]. `K_n` is invariant under the eigenvector scale
/// gauge, so this derivative is gauge-independent and can be checked
/// against finite differences of re-solved residues.
pub fn residue_derivs(
    es: &EigenSolution,
    ss: &StateSpaceModel,
    stamp: &ParameterStamp,
    n: usize,
) -> Result<DMatrix<C64>> {
    let md = eigvec_derivs(es, stamp, n)?;
    let d_c = complexify(&ss.d);
    let b_c = complexify(&ss.b);
    let x_n = es.x.column(n).into_owned();
    let y_n = es.y.column(n).into_owned();

    let dx_term = (complexify(&stamp.dd) * &x_n + &d_c * &md.dx) * (y_n.transpose() * &b_c);
    let dy_term =
        (&d_c * &x_n) * (md.dy.transpose() * &b_c + y_n.transpose() * complexify(&stamp.db));
    Ok(-(dx_term + dy_term))
}

/// Transmission zeros of one scalar transfer entry.
#[derive(Debug, Clone)]
pub struct ZeroSet {
    /// 1-based (output, input) port pair selecting the entry `H_ij`.
    pub ports: (usize, usize),
    /// Finite zeros, conjugate-closed, sorted by `(Re, Im)`. A zero of
    /// multiplicity `k` appears `k` times.
    pub zeros: Vec<C64>,
}

/// Deflated scalar transfer entry used for zero finding, with its
/// `s`-derivative and a cancellation-free magnitude estimate of the
/// derivative's constituent terms (used to detect stationary points, i.e.
/// repeated zeros).
///
/// Standard coupling: `g(s) = H_ij(s)` itself. Derivative coupling:
/// `H_ij(s) = s · g(s)` with `g(s) = s·d(N+sM)⁻¹b + e` — the structural
/// origin zero is factored out, so `g` neither vanishes identically near
/// `s = 0` (which would let spurious candidates pass a check against `H`)
/// nor inherits the resolvent pole that can sit exactly at the origin.
fn g_entry_and_deriv(
    ss: &StateSpaceModel,
    row: usize,
    col: usize,
    s: C64,
) -> Result<(C64, C64, f64)> {
    let ops = ResolventOps::at(ss, s)?;
    let core = ops.h_core[(row, col)];
    // d (N+sM)⁻¹ M (N+sM)⁻¹ b, the s-derivative of the core entry (negated).
    let m_c = complexify(&ss.m);
    let mb = &m_c * ops.b_n.column(col);
    let d_row = ops.d_n.row(row);
    let core_deriv = -(&d_row * &mb)[(0, 0)];
    let core_scale = d_row.norm() * mb.norm();
    let rank1_scale = d_row.norm() * ops.b_n.column(col).norm();
    let e = ss.e[(row, col)];
    match ss.coupling {
        Coupling::Standard => Ok((core + e, core_deriv, core_scale)),
        Coupling::Derivative => Ok((
            s * core + e,
            core + s * core_deriv,
            rank1_scale + s.norm() * core_scale,
        )),
    }
}

/// Transmission zeros of the scalar entry `H_ij` (1-based port pair).
///
/// The zeros are the finite generalized eigenvalues of the bordered pencil
/// obtained by adjoining the selected input column `b`, output row `d` and
/// feed-through `e` to `(N, M)`: the Schur complement identity
/// `det [[N+sM, b], [−d, e]] = det(N+sM) · (e + d(N+sM)⁻¹b)` makes the
/// bordered determinant vanish exactly at the zeros of `H`. Under
/// derivative coupling `H(s) = s·(s·d(N+sM)⁻¹b + e)` always has a zero at
/// the origin; the remaining factor's zeros come from the same construction
/// with the `s`-dependence moved onto the border column.
///
/// Each pencil eigenvalue is polished by Newton iteration and kept only if
/// the response falls below `1e-8` of its scale on a reference frequency
/// grid. Both the polish and the acceptance check run on the deflated
/// function `g` (`H` itself for standard coupling, `H/s` for derivative
/// coupling): near the origin the full `H` of a derivative-coupled network
/// vanishes for *any* `s`, which would let spurious candidates through.
pub fn find_zeros(ss: &StateSpaceModel, ports: (usize, usize)) -> Result<ZeroSet> {
    let p = ss.num_ports();
    if ports.0 == 0 || ports.1 == 0 || ports.0 > p || ports.1 > p {
        return Err(Error::Validation(format!(
            "port pair ({}, {}) out of range for a {p}-port network",
            ports.0, ports.1
        )));
    }
    let (row, col) = (ports.0 - 1, ports.1 - 1);
    let n_dim = ss.num_states();
    let e = ss.e[(row, col)];

    // Bordered pencil T0 + s·T1 of size n+1.
    let mut t0 = DMatrix::<f64>::zeros(n_dim + 1, n_dim + 1);
    let mut t1 = DMatrix::<f64>::zeros(n_dim + 1, n_dim + 1);
    t0.view_mut((0, 0), (n_dim, n_dim)).copy_from(&ss.n);
    t1.view_mut((0, 0), (n_dim, n_dim)).copy_from(&ss.m);
    for k in 0..n_dim {
        t0[(n_dim, k)] = -ss.d[(row, k)];
    }
    t0[(n_dim, n_dim)] = e;
    match ss.coupling {
        Coupling::Standard => {
            for k in 0..n_dim {
                t0[(k, n_dim)] = ss.b[(k, col)];
            }
        }
        Coupling::Derivative => {
            for k in 0..n_dim {
                t1[(k, n_dim)] = ss.b[(k, col)];
            }
        }
    }
    let candidates = pencil_eigenvalues(&t0, &t1)?;
    let mut zeros = Vec::new();
    if ss.coupling == Coupling::Derivative {
        // Structural zero: H(s) = s·g(s) vanishes at the origin for every
        // parameter value (capacitive port coupling blocks DC). It is
        // recorded directly — the deflated g is what gets polished below.
        zeros.push(C64::new(0.0, 0.0));
    }
    if candidates.is_empty() {
        zeros.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
        return Ok(ZeroSet { ports, zeros });
    }

    // Response scale: max |g| over a logarithmic frequency grid spanning the
    // pole/candidate magnitudes (the natural dynamic range of the entry).
    let pole_mags = pencil_eigenvalues(&ss.n, &ss.m)?;
    let mags: Vec<f64> = pole_mags
        .iter()
        .chain(candidates.iter())
        .map(|z| z.norm())
        .filter(|&m| m > 0.0)
        .collect();
    let (lo, hi) = mags
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    let mut g_scale = 0.0_f64;
    for k in 0..50 {
        let w = lo * 0.1 * ((hi * 10.0 / (lo * 0.1)).ln() * k as f64 / 49.0).exp();
        if let Ok((g, _, _)) = g_entry_and_deriv(ss, row, col, C64::new(0.0, w)) {
            g_scale = g_scale.max(g.norm());
        }
    }
    if g_scale == 0.0 {
        return Err(Error::numerical(
            "transfer entry vanishes identically on the reference grid",
        ));
    }

    for &cand in &candidates {
        let mut z = cand;
        let mut best = z;
        let mut best_g = match g_entry_and_deriv(ss, row, col, z) {
            Ok((g, _, _)) => g.norm(),
            Err(_) => f64::INFINITY,
        };
        for _ in 0..8 {
            let Ok((g, dg, scale)) = g_entry_and_deriv(ss, row, col, z) else { break };
            if g.norm() < best_g {
                best_g = g.norm();
                best = z;
            }
            if g.norm() <= 1e-13 * g_scale || dg.norm() <= 1e-13 * scale {
                break;
            }
            z -= g / dg;
        }
        if best_g <= 1e-8 * g_scale {
            // A real-coefficient transfer function has conjugate-closed
            // zeros; snap roundoff-level imaginary parts to the axis.
            if best.im.abs() <= 1e-9 * best.norm() {
                best.im = 0.0;
            }
            zeros.push(best);
        }
    }
    zeros.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    Ok(ZeroSet { ports, zeros })
}

/// Parameter derivative of a simple transmission zero `z` of the entry
/// `H_ij` (1-based port pair).
///
/// Differentiating the implicit relation `H(z(h), h) = 0`:
/// `∂z/∂h = −(∂H/∂h) / (∂H/∂s)`, both evaluated at `s = z`. A vanishing
/// `∂H/∂s` (relative to the cancellation-free magnitude of its constituent
/// terms) means the zero is stationary — a repeated zero — whose parameter
/// derivative is not single-valued.
pub fn zero_derivs(
    ss: &StateSpaceModel,
    stamp: &ParameterStamp,
    ports: (usize, usize),
    z: C64,
) -> Result<C64> {
    let p = ss.num_ports();
    if ports.0 == 0 || ports.1 == 0 || ports.0 > p || ports.1 > p {
        return Err(Error::Validation(format!(
            "port pair ({}, {}) out of range for a {p}-port network",
            ports.0, ports.1
        )));
    }
    let (row, col) = (ports.0 - 1, ports.1 - 1);
    if ss.coupling == Coupling::Derivative && z.norm() == 0.0 {
        // The origin zero is structural (H(s) = s·g(s) for every parameter
        // value), so it does not move.
        return Ok(C64::new(0.0, 0.0));
    }
    let (_, dg_s, scale) = g_entry_and_deriv(ss, row, col, z)?;
    if dg_s.norm() <= 1e-12 * scale {
        return Err(Error::numerical(
            "repeated transmission zero: dH/ds vanishes at the zero, so its \
             parameter derivative is not single-valued",
        ));
    }
    let ops = ResolventOps::at(ss, z)?;
    let dh_h = dh_dh(&ops, ss, stamp)[(row, col)];
    let dh_s = dh_ds(&ops, ss)[(row, col)];
    Ok(-dh_h / dh_s)
}

/// Spectral projector `x_n y_nᵀ` of mode `n` — gauge-invariant, used to
/// validate eigenvector derivatives against finite differences.
pub fn spectral_projector(es: &EigenSolution, n: usize) -> DMatrix<C64> {
    es.x.column(n) * es.y.column(n).transpose()
}
