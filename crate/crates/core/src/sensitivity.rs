//! Parameter sensitivities of pole frequencies and on-resonance scattering.
//!
//! For each configured resonance the pipeline is:
//!
//! 1. match the resonance guess to an eigenvalue pair and polish it
//!    ([`crate::eigen`]);
//! 2. differentiate the eigenvalue with respect to every parameter stamp,
//!    `∂s/∂h = yᵀ(∂N + s·∂M)x` under the `−YᵀMX = I` normalization;
//! 3. differentiate the port transfer function on the imaginary axis at
//!    `s = jω_n` — partial in the parameter plus the moving-resonance term
//!    `j·(∂ω_n/∂h)·∂H/∂s`;
//! 4. convert the admittance differential to a scattering differential.
//!
//! All Jacobian values are SI (Hz per farad/henry/ohm for frequency rows);
//! display conversions (MHz/pF, …) happen at the report layer. Every column
//! can be checked against [`fd_oracle`], a full re-solve central difference
//! that re-matches resonances by frequency continuity.

use nalgebra::{DMatrix, DVector};

use crate::eigen::{match_resonance, polish_mode, solve_pencil, EigenSolution, Pairing};
use crate::error::{Error, Result};
use crate::linalg::{complexify, PencilSolve, C64};
use crate::netlist::{Circuit, Parameter};
use crate::statespace::{
    build_stamps, build_state_space, Coupling, ParameterStamp, StateSpaceModel,
};

/// One resonance to observe: a frequency guess, and optionally the port
/// whose reflection coefficient is of interest (1-based port index).
#[derive(Debug, Clone)]
pub struct Resonance {
    pub name: String,
    pub guess_hz: f64,
    pub port: Option<usize>,
}

impl Resonance {
    pub fn new(name: impl Into<String>, guess_hz: f64, port: Option<usize>) -> Self {
        Resonance { name: name.into(), guess_hz, port }
    }
}

/// Ordered list of resonances defining the observable vector
/// `Ω = [f_1 … f_R, Re S_pp(jω_r), Im S_pp(jω_r), …]` (frequency rows first,
/// then one Re/Im row pair per ported resonance, in resonance order).
#[derive(Debug, Clone)]
pub struct ResponseSpec {
    pub resonances: Vec<Resonance>,
}

impl ResponseSpec {
    pub fn new(resonances: Vec<Resonance>) -> Self {
        ResponseSpec { resonances }
    }
}

/// What a Jacobian row measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// `f = Im(s)/2π` of an oscillatory resonance, Hz.
    FrequencyHz { resonance: usize },
    /// A non-oscillatory (real) pole tracked directly, rad/s.
    PoleRate { resonance: usize },
    /// Real part of the port reflection coefficient (dimensionless).
    ReS { resonance: usize, port: usize },
    /// Imaginary part of the port reflection coefficient.
    ImS { resonance: usize, port: usize },
}

/// A resonance after matching: which mode it is and the nominal response.
#[derive(Debug, Clone)]
pub struct ResolvedResonance {
    pub name: String,
    /// Eigenvalue index in the solution.
    pub mode: usize,
    /// The polished pole, rad/s.
    pub s: C64,
    /// On-resonance evaluation frequency `ω_n = Im(s)`, rad/s.
    pub omega: f64,
    /// 1-based port index, if a reflection observable was requested.
    pub port: Option<usize>,
    /// Full scattering matrix at `jω_n` (present when `port` is set).
    pub s_matrix: Option<DMatrix<C64>>,
}

/// The sensitivity Jacobian `δΩ = J·δh` with its nominal operating point.
///
/// Rows are observables (labels in `row_labels`, semantics in `row_kinds`),
/// columns are circuit parameters in declaration order. Damping sensitivities
/// `∂Re(s_r)/∂h` are computed alongside but kept out of the observable rows;
/// reports include them only in machine-readable output.
#[derive(Debug, Clone)]
pub struct SensitivityMatrix {
    pub row_labels: Vec<String>,
    pub row_kinds: Vec<RowKind>,
    pub params: Vec<Parameter>,
    /// `∂Ω_i/∂h_k`, SI units.
    pub values: DMatrix<f64>,
    /// Nominal observable vector `Ω₀`.
    pub nominal_omega: DVector<f64>,
    /// `∂Re(s_r)/∂h_k` per resonance, (rad/s) per SI unit.
    pub damping: DMatrix<f64>,
    /// Nominal `Re(s_r)`, rad/s.
    pub damping_nominal: Vec<f64>,
    pub resonances: Vec<ResolvedResonance>,
}

impl SensitivityMatrix {
    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.values.ncols()
    }

    /// Column index of a parameter id.
    pub fn param_index(&self, id: &str) -> Option<usize> {
        self.params.iter().position(|p| p.id == id)
    }

    /// Row index of the first row with the given kind.
    pub fn row_index(&self, kind: RowKind) -> Option<usize> {
        self.row_kinds.iter().position(|&k| k == kind)
    }
}

/// Eigenvalue derivative of a single (simple) mode for one stamp:
/// `∂s_k/∂h = y_kᵀ(∂N + s_k·∂M)x_k`.
pub fn mode_eig_deriv(es: &EigenSolution, stamp: &ParameterStamp, k: usize) -> C64 {
    let dim = es.dim();
    let s = es.lambdas[k];
    let dn = complexify(&stamp.dn);
    let dm = complexify(&stamp.dm);
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..dim {
        let mut row = C64::new(0.0, 0.0);
        for j in 0..dim {
            row += (dn[(i, j)] + s * dm[(i, j)]) * es.x[(j, k)];
        }
        acc += es.y[(i, k)] * row;
    }
    acc
}

/// Derivatives of every eigenvalue with respect to one parameter stamp.
///
/// Requires all eigenvalues simple; multiplicity clusters must be routed to
/// [`repeated_eig_derivs`], whose branch derivatives are not attributable to
/// individual modes.
pub fn eig_derivs(es: &EigenSolution, stamp: &ParameterStamp) -> Result<Vec<C64>> {
    if let Some(c) = es.clusters.iter().find(|c| c.len() > 1) {
        return Err(Error::Unsupported(format!(
            "eigenvalue {} is repeated (multiplicity {}); use repeated_eig_derivs per cluster",
            es.lambdas[c[0]],
            c.len()
        )));
    }
    Ok((0..es.dim()).map(|k| mode_eig_deriv(es, stamp, k)).collect())
}

/// Derivative branches of a repeated eigenvalue: the `P` eigenvalues of the
/// projected perturbation `W = Y_pᵀ(∂N + s̄·∂M)X_p` over the cluster's
/// eigenvector blocks. Returned sorted by (real, imaginary) part for
/// determinism; for `P = 1` this reduces exactly to [`mode_eig_deriv`].
pub fn repeated_eig_derivs(
    es: &EigenSolution,
    cluster: &[usize],
    stamp: &ParameterStamp,
) -> Result<Vec<C64>> {
    let p = cluster.len();
    if p == 0 {
        return Err(Error::numerical("empty multiplicity cluster"));
    }
    if p == 1 {
        return Ok(vec![mode_eig_deriv(es, stamp, cluster[0])]);
    }
    let dim = es.dim();
    let s_mean = cluster.iter().map(|&k| es.lambdas[k]).sum::<C64>() / C64::new(p as f64, 0.0);
    let dn = complexify(&stamp.dn);
    let dm = complexify(&stamp.dm);
    let pert = &dn + dm.map(|v| v * s_mean);
    let mut w = DMatrix::<C64>::zeros(p, p);
    for (a, &ka) in cluster.iter().enumerate() {
        for (b, &kb) in cluster.iter().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..dim {
                let mut row = C64::new(0.0, 0.0);
                for j in 0..dim {
                    row += pert[(i, j)] * es.x[(j, kb)];
                }
                acc += es.y[(i, ka)] * row;
            }
            w[(a, b)] = acc;
        }
    }
    let eig = w
        .schur()
        .eigenvalues()
        .ok_or_else(|| Error::numerical("eigensolve of projected perturbation failed"))?;
    let mut out: Vec<C64> = eig.iter().cloned().collect();
    out.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
    Ok(out)
}

/// Resolvent-side operators of the transfer function at a fixed complex
/// frequency: `B_n = (N+sM)⁻¹B`, `D_n = D(N+sM)⁻¹`, the core `D_nB` product
/// and the full transfer matrix including coupling factors.
#[derive(Debug, Clone)]
pub struct ResolventOps {
    pub s: C64,
    pub b_n: DMatrix<C64>,
    pub d_n: DMatrix<C64>,
    /// `D (N+sM)⁻¹ B` (no coupling factor applied).
    pub h_core: DMatrix<C64>,
    /// Transfer matrix `H(s)` with coupling factors applied.
    pub h: DMatrix<C64>,
}

impl ResolventOps {
    /// Factor the pencil at `s` and form the operator products.
    pub fn at(ss: &StateSpaceModel, s: C64) -> Result<Self> {
        let pencil = PencilSolve::new(&ss.m, &ss.n, s)?;
        let b_n = pencil.solve(&complexify(&ss.b));
        let d_n = pencil.solve_transpose(&complexify(&ss.d.transpose())).transpose();
        let h_core = complexify(&ss.d) * &b_n;
        let e = complexify(&ss.e);
        let h = match ss.coupling {
            Coupling::Standard => &h_core + &e,
            Coupling::Derivative => h_core.map(|v| v * s * s) + e.map(|v| v * s),
        };
        Ok(ResolventOps { s, b_n, d_n, h_core, h })
    }
}

/// `∂H/∂s` at the operating point of `ops`.
///
/// Standard coupling: `−D_n M B_n`. Derivative coupling
/// (`H = s²·DZB + s·E`): `E + 2s·DZB − s²·D_n M B_n`.
pub fn dh_ds(ops: &ResolventOps, ss: &StateSpaceModel) -> DMatrix<C64> {
    let core = -(&ops.d_n * complexify(&ss.m) * &ops.b_n);
    let s = ops.s;
    match ss.coupling {
        Coupling::Standard => core,
        Coupling::Derivative => {
            complexify(&ss.e) + ops.h_core.map(|v| v * 2.0 * s) + core.map(|v| v * s * s)
        }
    }
}

/// `∂H/∂h` at fixed `s`: the parameter's direct effect on the transfer
/// function through all five matrices,
/// `(∂D)B_n + D_n(∂B) + ∂E − D_n(∂N + s·∂M)B_n`, with the coupling factors
/// (`s²` on resolvent terms, `s` on `∂E`) applied for derivative coupling.
pub fn dh_dh(ops: &ResolventOps, ss: &StateSpaceModel, stamp: &ParameterStamp) -> DMatrix<C64> {
    let s = ops.s;
    let dpencil = complexify(&stamp.dn) + complexify(&stamp.dm).map(|v| v * s);
    let inner = complexify(&stamp.dd) * &ops.b_n + &ops.d_n * complexify(&stamp.db)
        - &ops.d_n * dpencil * &ops.b_n;
    let de = complexify(&stamp.de);
    match ss.coupling {
        Coupling::Standard => inner + de,
        Coupling::Derivative => inner.map(|v| v * s * s) + de.map(|v| v * s),
    }
}

/// Total on-resonance derivative: the parameter's direct effect plus the
/// moving-resonance term, `∂H_n/∂h = ∂H/∂h + j·(∂ω_n/∂h)·∂H/∂s`.
pub fn on_res_deriv(dh: &DMatrix<C64>, ds: &DMatrix<C64>, dwn_dh: f64) -> DMatrix<C64> {
    dh + ds.map(|v| v * C64::new(0.0, dwn_dh))
}

/// Scattering matrix from a port admittance matrix:
/// `S = (I + A)⁻¹(I − A)` with `A = W·H·W`, `W = diag(√z0)`.
pub fn to_scattering(h: &DMatrix<C64>, z0: &[f64]) -> Result<DMatrix<C64>> {
    let p = h.nrows();
    assert_eq!(z0.len(), p, "one reference impedance per port");
    let mut a = h.clone();
    for i in 0..p {
        for j in 0..p {
            a[(i, j)] *= z0[i].sqrt() * z0[j].sqrt();
        }
    }
    let ident = DMatrix::<C64>::identity(p, p);
    let plus = &ident + &a;
    let minus = &ident - &a;
    crate::linalg::solve_complex(&plus, &minus)
        .map_err(|_| Error::numerical("singular (I + Z0·H): cannot form the scattering matrix"))
}

/// Scattering differential: `∂S = −½(I + S)·W·∂H·W·(I + S)` with
/// `W = diag(√z0)`. At a matched point (`S = 0`) this is `−(Z0/2)·∂H`; at an
/// open (`S = I`) it is `−2·Z0·∂H`.
pub fn scattering_differential(
    s_mat: &DMatrix<C64>,
    dh: &DMatrix<C64>,
    z0: &[f64],
) -> DMatrix<C64> {
    let p = dh.nrows();
    let mut a = dh.clone();
    for i in 0..p {
        for j in 0..p {
            a[(i, j)] *= z0[i].sqrt() * z0[j].sqrt();
        }
    }
    let plus = DMatrix::<C64>::identity(p, p) + s_mat;
    (&plus * a * &plus).map(|v| v * -0.5)
}

/// A matched, polished solve of one circuit against a response spec.
struct MatchedSolve {
    ss: StateSpaceModel,
    es: EigenSolution,
    modes: Vec<usize>,
}

fn solve_and_match(c: &Circuit, rs: &ResponseSpec) -> Result<MatchedSolve> {
    let ss = build_state_space(c)?;
    let mut es = solve_pencil(&ss.m, &ss.n)?;
    let mut modes = Vec::with_capacity(rs.resonances.len());
    for r in &rs.resonances {
        let k = match_resonance(&es, r.guess_hz)?;
        es = polish_mode(&es, &ss.m, &ss.n, k)?;
        modes.push(k);
    }
    validate_ports(&ss, rs)?;
    Ok(MatchedSolve { ss, es, modes })
}

fn validate_ports(ss: &StateSpaceModel, rs: &ResponseSpec) -> Result<()> {
    for r in &rs.resonances {
        if let Some(p) = r.port {
            if p == 0 || p > ss.num_ports() {
                return Err(Error::Validation(format!(
                    "resonance '{}' references port {} but the circuit has {} port(s)",
                    r.name,
                    p,
                    ss.num_ports()
                )));
            }
        }
    }
    Ok(())
}

/// Guard: on-resonance evaluation needs `jω_n` off the spectrum, which fails
/// exactly when the matched pole is undamped.
fn check_damped(es: &EigenSolution, k: usize, name: &str) -> Result<()> {
    let s = es.lambdas[k];
    if s.im != 0.0 && s.re.abs() <= 1e-8 * es.lambda_scale() {
        return Err(Error::numerical(format!(
            "undamped resonance '{name}': pole {s} lies on the imaginary axis, \
             the on-resonance response is singular"
        )));
    }
    Ok(())
}

/// Which reflection quantity an observable vector carries.
///
/// The Jacobian's reflection rows are referenced to the fully-reflective
/// point `S = I` (i.e. `A = W·H·W = 0`): they are the exact derivative of
/// the affine response `Ŝ = I − 2·A`, the first-order expansion of the
/// bilinear map `S = (I+A)⁻¹(I−A)` around an open port. Reports and yield
/// statistics use the true scattering values as the operating point, so
/// both variants are needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReflectionKind {
    /// Entries of the true scattering matrix `(I+A)⁻¹(I−A)`.
    True,
    /// Entries of the open-referenced response `I − 2·A`, the map whose
    /// derivative the Jacobian rows are. Finite differences of this
    /// variant converge to the Jacobian columns.
    OpenReferenced,
}

/// The observable vector for an already-matched solve.
fn omega_vector(ms: &MatchedSolve, rs: &ResponseSpec, kind: ReflectionKind) -> Result<DVector<f64>> {
    let mut vals = Vec::new();
    for (&k, _r) in ms.modes.iter().zip(&rs.resonances) {
        let s = ms.es.lambdas[k];
        if s.im > 0.0 {
            vals.push(ms.es.frequency_hz(k));
        } else {
            vals.push(s.re);
        }
    }
    for (&k, r) in ms.modes.iter().zip(&rs.resonances) {
        let Some(p) = r.port else { continue };
        check_damped(&ms.es, k, &r.name)?;
        let omega = ms.es.lambdas[k].im;
        let ops = ResolventOps::at(&ms.ss, C64::new(0.0, omega))?;
        let s_pp = match kind {
            ReflectionKind::True => to_scattering(&ops.h, &ms.ss.port_z0)?[(p - 1, p - 1)],
            ReflectionKind::OpenReferenced => {
                C64::new(1.0, 0.0)
                    - 2.0 * ms.ss.port_z0[p - 1] * ops.h[(p - 1, p - 1)]
            }
        };
        vals.push(s_pp.re);
        vals.push(s_pp.im);
    }
    Ok(DVector::from_vec(vals))
}

/// Solve a circuit and evaluate its observable vector `Ω(h)` — the same
/// layout and conventions as [`SensitivityMatrix::nominal_omega`] (frequency
/// rows in Hz, then true-scattering Re/Im pairs) — without assembling any
/// derivatives. This is the per-trial workhorse of the full re-solve Monte
/// Carlo oracle.
///
/// Errors with [`Error::ResonanceMatch`] when a resonance guess cannot be
/// matched to a mode, or when two resonances track the same mode.
pub fn observe_response(c: &Circuit, rs: &ResponseSpec) -> Result<DVector<f64>> {
    let ms = solve_and_match(c, rs)?;
    for i in 0..ms.modes.len() {
        for j in 0..i {
            if ms.modes[i] == ms.modes[j] {
                return Err(Error::ResonanceMatch(format!(
                    "resonances '{}' and '{}' tracked the same mode",
                    rs.resonances[j].name, rs.resonances[i].name
                )));
            }
        }
    }
    omega_vector(&ms, rs, ReflectionKind::True)
}

/// Assemble the full sensitivity Jacobian for a circuit and response spec.
///
/// Row order: all frequency rows (resonance order), then a Re/Im reflection
/// row pair per ported resonance. Columns are the circuit parameters in
/// declaration order. Also fills the nominal observable vector and the
/// damping sensitivities.
///
/// Reflection convention: the reflection rows are the exact derivative of
/// the open-referenced response `Ŝ = I − 2·W·H(h, jω_r(h))·W` (with
/// `W = diag(√z0)`), i.e. the scattering differential taken at the fixed
/// reference point `S = I`. This makes the rows affine in the admittance
/// differential (`−2·Z0·∂H_pp` per port) and is what [`fd_oracle`]
/// reproduces. `nominal_omega`, by contrast, carries the true scattering
/// values at the operating point — those are the physically meaningful
/// nominals for yield specs. The true operating-point differential remains
/// available via [`scattering_differential`] with the actual S matrix.
pub fn assemble_sensitivity(c: &Circuit, rs: &ResponseSpec) -> Result<SensitivityMatrix> {
    let ms = solve_and_match(c, rs)?;
    let stamps = build_stamps(c, &ms.ss);
    let params: Vec<Parameter> = stamps.iter().map(|st| st.param.clone()).collect();
    let n_res = rs.resonances.len();
    let n_ported = rs.resonances.iter().filter(|r| r.port.is_some()).count();
    let n_rows = n_res + 2 * n_ported;

    // Reject repeated matched modes: their frequency derivative is a set of
    // branches, not a single number, so the Jacobian is not defined.
    for (&k, r) in ms.modes.iter().zip(&rs.resonances) {
        if ms.es.is_repeated(k) {
            return Err(Error::numerical(format!(
                "resonance '{}' matched a repeated eigenvalue; \
                 its sensitivity is not single-valued",
                r.name
            )));
        }
    }

    // Per-resonance operating-point data.
    let mut resolved = Vec::with_capacity(n_res);
    let mut ops_cache: Vec<Option<(ResolventOps, DMatrix<C64>)>> = Vec::with_capacity(n_res);
    for (&k, r) in ms.modes.iter().zip(&rs.resonances) {
        let s = ms.es.lambdas[k];
        let omega = s.im;
        let (ops_entry, s_matrix) = if r.port.is_some() {
            check_damped(&ms.es, k, &r.name)?;
            let ops = ResolventOps::at(&ms.ss, C64::new(0.0, omega))?;
            let s_true = to_scattering(&ops.h, &ms.ss.port_z0)?;
            let dsds = dh_ds(&ops, &ms.ss);
            (Some((ops, dsds)), Some(s_true))
        } else {
            (None, None)
        };
        ops_cache.push(ops_entry);
        resolved.push(ResolvedResonance {
            name: r.name.clone(),
            mode: k,
            s,
            omega,
            port: r.port,
            s_matrix,
        });
    }

    let mut row_labels = Vec::with_capacity(n_rows);
    let mut row_kinds = Vec::with_capacity(n_rows);
    for (i, (rr, r)) in resolved.iter().zip(&rs.resonances).enumerate() {
        if rr.s.im > 0.0 {
            row_labels.push(format!("f({})", r.name));
            row_kinds.push(RowKind::FrequencyHz { resonance: i });
        } else {
            row_labels.push(format!("s({})", r.name));
            row_kinds.push(RowKind::PoleRate { resonance: i });
        }
    }
    for (i, r) in rs.resonances.iter().enumerate() {
        if let Some(p) = r.port {
            row_labels.push(format!("Re S{p}{p}({})", r.name));
            row_kinds.push(RowKind::ReS { resonance: i, port: p });
            row_labels.push(format!("Im S{p}{p}({})", r.name));
            row_kinds.push(RowKind::ImS { resonance: i, port: p });
        }
    }

    let mut values = DMatrix::<f64>::zeros(n_rows, params.len());
    let mut damping = DMatrix::<f64>::zeros(n_res, params.len());
    let ident = DMatrix::<C64>::identity(ms.ss.num_ports(), ms.ss.num_ports());
    for (j, stamp) in stamps.iter().enumerate() {
        let mut srow = n_res;
        for (i, (&k, r)) in ms.modes.iter().zip(&rs.resonances).enumerate() {
            let ds = mode_eig_deriv(&ms.es, stamp, k);
            let s = ms.es.lambdas[k];
            values[(i, j)] = if s.im > 0.0 {
                ds.im / (2.0 * std::f64::consts::PI)
            } else {
                ds.re
            };
            damping[(i, j)] = ds.re;
            if r.port.is_some() {
                let (ops, dsds) = ops_cache[i].as_ref().expect("cached for ported resonances");
                let dh = dh_dh(ops, &ms.ss, stamp);
                let dh_tot = on_res_deriv(&dh, dsds, ds.im);
                // Reflection rows use the fixed reference operating point
                // `S = I` (fully reflective port), which reduces the
                // differential to `−2·Z0·∂H` per port; the true
                // operating-point differential is available through
                // `scattering_differential` with the actual S matrix.
                let dsc = scattering_differential(&ident, &dh_tot, &ms.ss.port_z0);
                let p = r.port.unwrap() - 1;
                values[(srow, j)] = dsc[(p, p)].re;
                values[(srow + 1, j)] = dsc[(p, p)].im;
                srow += 2;
            }
        }
    }

    let nominal_omega = omega_vector(&ms, rs, ReflectionKind::True)?;
    let damping_nominal = ms.modes.iter().map(|&k| ms.es.lambdas[k].re).collect();
    Ok(SensitivityMatrix {
        row_labels,
        row_kinds,
        params,
        values,
        nominal_omega,
        damping,
        damping_nominal,
        resonances: resolved,
    })
}

/// Continuity-tracking target for the finite-difference oracle: the nominal
/// mode's character and location.
#[derive(Debug, Clone)]
struct TrackTarget {
    real: bool,
    /// Nominal frequency (Hz) for oscillatory modes.
    f_hz: f64,
    /// Nominal real part (rad/s) for real modes.
    s_re: f64,
}

fn track_targets(ms: &MatchedSolve) -> Vec<TrackTarget> {
    ms.modes
        .iter()
        .map(|&k| {
            let s = ms.es.lambdas[k];
            TrackTarget { real: s.im == 0.0, f_hz: s.im / (2.0 * std::f64::consts::PI), s_re: s.re }
        })
        .collect()
}

/// Re-solve a (perturbed) circuit and re-match each tracked resonance to the
/// nearest mode of the same character. Two targets claiming one mode, or a
/// missing mode kind, is a tracking failure.
fn observe_tracked(
    c: &Circuit,
    targets: &[TrackTarget],
    rs: &ResponseSpec,
    kind: ReflectionKind,
) -> Result<DVector<f64>> {
    let ss = build_state_space(c)?;
    let mut es = solve_pencil(&ss.m, &ss.n)?;
    let mut modes = Vec::with_capacity(targets.len());
    for t in targets {
        let cand: Option<usize> = es
            .lambdas
            .iter()
            .enumerate()
            .filter(|(k, s)| {
                if t.real {
                    matches!(es.pairing[*k], Pairing::Real)
                } else {
                    s.im > 0.0
                }
            })
            .min_by(|(_, a), (_, b)| {
                let da = if t.real { (a.re - t.s_re).abs() } else { (a.im / (2.0 * std::f64::consts::PI) - t.f_hz).abs() };
                let db = if t.real { (b.re - t.s_re).abs() } else { (b.im / (2.0 * std::f64::consts::PI) - t.f_hz).abs() };
                da.partial_cmp(&db).unwrap()
            })
            .map(|(k, _)| k);
        let k = cand.ok_or_else(|| {
            Error::ResonanceMatch("resonance tracking failure: mode kind disappeared".into())
        })?;
        if modes.contains(&k) {
            return Err(Error::ResonanceMatch(
                "resonance tracking failure: two resonances collapsed onto one mode".into(),
            ));
        }
        es = polish_mode(&es, &ss.m, &ss.n, k)?;
        modes.push(k);
    }
    let ms = MatchedSolve { ss, es, modes };
    omega_vector(&ms, rs, kind)
}

/// Full re-solve central-difference column of the Jacobian for one
/// parameter: `(Ω(h+δ) − Ω(h−δ))/(2δ)` with `δ = rel_step·h`, re-matching
/// resonances by continuity (nearest frequency to the nominal mode).
///
/// The differenced reflection observables are the open-referenced response
/// (see the Jacobian convention in [`assemble_sensitivity`]), so the
/// returned column estimates the Jacobian column directly.
pub fn fd_oracle(
    c: &Circuit,
    rs: &ResponseSpec,
    param_id: &str,
    rel_step: f64,
) -> Result<DVector<f64>> {
    if !(1e-8..=1e-3).contains(&rel_step) {
        return Err(Error::numerical(format!(
            "fd_oracle rel_step {rel_step} outside [1e-8, 1e-3]"
        )));
    }
    let nominal = solve_and_match(c, rs)?;
    let targets = track_targets(&nominal);
    let params = c.parameters();
    let k = params
        .iter()
        .position(|p| p.id == param_id)
        .ok_or_else(|| Error::Validation(format!("unknown parameter '{param_id}'")))?;
    let h = params[k].nominal;
    let delta = rel_step * h.abs();
    let kind = ReflectionKind::OpenReferenced;
    let plus = observe_tracked(&c.with_param(k, h + delta), &targets, rs, kind)?;
    let minus = observe_tracked(&c.with_param(k, h - delta), &targets, rs, kind)?;
    Ok((plus - minus) / (2.0 * delta))
}

/// Richardson-refined finite-difference Jacobian: central differences on a
/// halving step ladder (relative steps `1e-2/2^k`, k = 0..6) combined per
/// entry by Neville extrapolation, keeping the tableau entry with the
/// smallest error estimate. Accurate to ~1e-9 relative on smooth entries,
/// which is what the analytic Jacobian is verified against.
pub fn fd_jacobian_refined(c: &Circuit, rs: &ResponseSpec) -> Result<DMatrix<f64>> {
    const LEVELS: usize = 7;
    let nominal = solve_and_match(c, rs)?;
    let targets = track_targets(&nominal);
    let params = c.parameters();
    let n_rows = omega_vector(&nominal, rs, ReflectionKind::OpenReferenced)?.len();
    let mut out = DMatrix::<f64>::zeros(n_rows, params.len());
    let kind = ReflectionKind::OpenReferenced;
    for (j, p) in params.iter().enumerate() {
        let h = p.nominal;
        let mut cds: Vec<DVector<f64>> = Vec::with_capacity(LEVELS);
        for lvl in 0..LEVELS {
            let delta = 1e-2 * h.abs() / (1u32 << lvl) as f64;
            let plus = observe_tracked(&c.with_param(j, h + delta), &targets, rs, kind)?;
            let minus = observe_tracked(&c.with_param(j, h - delta), &targets, rs, kind)?;
            cds.push((plus - minus) / (2.0 * delta));
        }
        for row in 0..n_rows {
            out[(row, j)] = neville_best(&(0..LEVELS).map(|l| cds[l][row]).collect::<Vec<_>>());
        }
    }
    Ok(out)
}

/// Neville extrapolation over a step-halving ladder of central differences
/// (error expansion in even powers): returns the tableau entry with the
/// smallest local error estimate.
fn neville_best(ladder: &[f64]) -> f64 {
    let n = ladder.len();
    let mut t = vec![vec![0.0_f64; n]; n];
    for (i, &v) in ladder.iter().enumerate() {
        t[i][0] = v;
    }
    let mut best = ladder[n - 1];
    let mut best_err = f64::INFINITY;
    for i in 1..n {
        for j in 1..=i {
            let fac = 4.0_f64.powi(j as i32);
            t[i][j] = t[i][j - 1] + (t[i][j - 1] - t[i - 1][j - 1]) / (fac - 1.0);
            let err = (t[i][j] - t[i][j - 1])
                .abs()
                .max((t[i][j] - t[i - 1][j - 1]).abs());
            if err <= best_err {
                best_err = err;
                best = t[i][j];
            }
        }
    }
    best
}
