//! Generalized eigenvalue machinery for the `(M, N)` pencil.
//!
//! Eigenvalues solve `−N x = s M x`; they are the circuit poles. Left
//! eigenvectors are obtained by inversion, `Y := −(MX)⁻ᵀ`, which makes the
//! bi-orthonormalization `−YᵀMX = I` exact by construction and avoids
//! matching two independent eigensolves. Under this normalization
//! `YᵀNX = Λ` and the resolvent admits the modal expansion
//! `(N + sM)⁻¹ = X (Λ − sI)⁻¹ Yᵀ`.
//!
//! The pencil is balanced by an exact power-of-two diagonal congruence
//! before the QZ iteration (see [`crate::linalg`]); selected eigenpairs can
//! be polished afterwards by two-sided Rayleigh-quotient iteration, which is
//! used when high-accuracy resonance frequencies are needed (finite
//! difference oracles resolve parts in 1e-9 relative).

use faer::diag::Diag;
use faer::dyn_stack::{MemBuffer, MemStack, StackReq};
use faer::linalg::evd::ComputeEigenvectors;
use faer::linalg::gevd::{gevd_real, gevd_scratch, GevdParams};
use faer::{Mat, Par, Spec};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{balance_congruence, balance_diagonal, complexify, C64};
use crate::statespace::{Coupling, StateLabel, StateSpaceModel};

/// Conjugation structure of one eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// Member of a conjugate pair with positive imaginary part; `mate` is
    /// the index of the conjugate.
    PairPlus { mate: usize },
    /// Negative-imaginary member of a conjugate pair.
    PairMinus { mate: usize },
    /// Real eigenvalue.
    Real,
}

/// Eigen-decomposition of the pencil with bi-orthonormalized eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenSolution {
    /// Eigenvalues in rad/s, sorted: conjugate pairs first (descending
    /// positive part, `+Im` member first), then real eigenvalues ascending.
    pub lambdas: Vec<C64>,
    /// Right eigenvectors as columns.
    pub x: DMatrix<C64>,
    /// Left eigenvectors as columns; `−YᵀMX = I` by construction.
    pub y: DMatrix<C64>,
    /// Conjugation structure per eigenvalue.
    pub pairing: Vec<Pairing>,
    /// Multiplicity groups: indices of (numerically) equal eigenvalues.
    /// Every eigenvalue belongs to exactly one cluster.
    pub clusters: Vec<Vec<usize>>,
}

impl EigenSolution {
    /// Number of states / eigenvalues.
    pub fn dim(&self) -> usize {
        self.lambdas.len()
    }

    /// Largest eigenvalue magnitude (tolerance scale).
    pub fn lambda_scale(&self) -> f64 {
        self.lambdas.iter().map(|s| s.norm()).fold(0.0_f64, f64::max)
    }

    /// Natural frequency of mode `k` in Hz: `Im(s)/2π`.
    pub fn frequency_hz(&self, k: usize) -> f64 {
        self.lambdas[k].im / (2.0 * std::f64::consts::PI)
    }

    /// Cluster containing mode `k`.
    pub fn cluster_of(&self, k: usize) -> &[usize] {
        self.clusters
            .iter()
            .find(|c| c.contains(&k))
            .map(|c| c.as_slice())
            .expect("every mode belongs to a cluster")
    }

    /// Whether mode `k` has a (numerically) repeated eigenvalue.
    pub fn is_repeated(&self, k: usize) -> bool {
        self.cluster_of(k).len() > 1
    }

    /// Eigenvector table rescaled for display: each right-eigenvector
    /// column is divided by its largest-magnitude voltage entry, so that
    /// entry becomes exactly 1 (real). Falls back to the overall largest
    /// entry when no voltage states exist. Internal normalization is
    /// untouched.
    pub fn display_rescaled(&self, labels: &[StateLabel]) -> DMatrix<C64> {
        let mut out = self.x.clone();
        let mut rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, StateLabel::Voltage(_)))
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            rows = (0..out.nrows()).collect();
        }
        for j in 0..out.ncols() {
            let pivot = rows
                .iter()
                .cloned()
                .max_by(|&a, &b| {
                    out[(a, j)].norm().partial_cmp(&out[(b, j)].norm()).unwrap()
                })
                .unwrap();
            let p = out[(pivot, j)];
            if p.norm() > 0.0 {
                for i in 0..out.nrows() {
                    out[(i, j)] /= p;
                }
            }
        }
        out
    }
}

/// Raw QZ output before pairing/sorting.
struct RawEig {
    lambdas: Vec<C64>,
    x: DMatrix<C64>,
}

/// Run faer's real QZ on the balanced pencil and unpack LAPACK-style packed
/// complex eigenvectors (a conjugate pair stores Re/Im in adjacent columns).
fn qz_balanced(m_bal: &DMatrix<f64>, n_bal: &DMatrix<f64>) -> Result<RawEig> {
    let dim = m_bal.nrows();
    let mut a = Mat::<f64>::from_fn(dim, dim, |i, j| -n_bal[(i, j)]);
    let mut b = Mat::<f64>::from_fn(dim, dim, |i, j| m_bal[(i, j)]);
    let mut s_re = Diag::<f64>::zeros(dim);
    let mut s_im = Diag::<f64>::zeros(dim);
    let mut beta = Diag::<f64>::zeros(dim);
    let mut u = Mat::<f64>::zeros(dim, dim);
    let req = gevd_scratch::<f64>(
        dim,
        ComputeEigenvectors::Yes,
        ComputeEigenvectors::Yes,
        Par::Seq,
        Spec::<GevdParams, f64>::default(),
    )
    .and(StackReq::new::<f64>(32 * dim * dim + 1024));
    let mut buf = MemBuffer::new(req);
    gevd_real(
        a.as_mut(),
        b.as_mut(),
        s_re.as_mut(),
        s_im.as_mut(),
        beta.as_mut(),
        None,
        Some(u.as_mut()),
        Par::Seq,
        MemStack::new(&mut buf),
        Spec::<GevdParams, f64>::default(),
    )
    .map_err(|e| Error::numerical(format!("QZ iteration failed: {e:?}")))?;

    let mut lambdas = Vec::with_capacity(dim);
    let mut x = DMatrix::<C64>::zeros(dim, dim);
    let mut k = 0;
    while k < dim {
        if beta[k] == 0.0 {
            return Err(Error::numerical(
                "infinite eigenvalue: mass matrix is singular",
            ));
        }
        let s = C64::new(s_re[k] / beta[k], s_im[k] / beta[k]);
        if s_im[k] != 0.0 && k + 1 < dim {
            // Packed conjugate pair: columns k (real part), k+1 (imag part).
            let s_plus = C64::new(s.re, s.im.abs());
            for i in 0..dim {
                x[(i, k)] = C64::new(u[(i, k)], u[(i, k + 1)]);
                x[(i, k + 1)] = C64::new(u[(i, k)], -u[(i, k + 1)]);
            }
            lambdas.push(s_plus);
            lambdas.push(s_plus.conj());
            k += 2;
        } else {
            for i in 0..dim {
                x[(i, k)] = C64::new(u[(i, k)], 0.0);
            }
            lambdas.push(C64::new(s.re, 0.0));
            k += 1;
        }
    }
    Ok(RawEig { lambdas, x })
}

/// Finite generalized eigenvalues of an arbitrary (possibly non-square-
/// structured) real pencil `T0 + s·T1`, eigenvalues only.
///
/// Unlike [`solve_pencil`], `T1` may be singular: infinite eigenvalues
/// (`beta ≈ 0` with nonzero `alpha`) are discarded rather than treated as
/// errors. This is the tool for bordered (Rosenbrock-style) pencils whose
/// lower-right block carries no `s` dependence. An indeterminate `0/0`
/// eigenvalue means the pencil is singular (`det(T0 + s·T1) ≡ 0`), which is
/// reported as an error.
///
/// Eigenvalues of `Dr·(T0 + s·T1)·Dc` equal those of the original pencil for
/// any nonsingular diagonal `Dr`, `Dc`, so the pencil is equilibrated with
/// exact power-of-two row/column scalings first; no back-transform is needed.
pub(crate) fn pencil_eigenvalues(t0: &DMatrix<f64>, t1: &DMatrix<f64>) -> Result<Vec<C64>> {
    let dim = t0.nrows();
    assert_eq!(t0.ncols(), dim);
    assert_eq!(t1.shape(), (dim, dim));
    if dim == 0 {
        return Ok(Vec::new());
    }

    // Row/column equilibration on |T0| + |T1| (power-of-two factors, exact).
    let mut a = t0.clone();
    let mut b = t1.clone();
    for _ in 0..4 {
        for i in 0..dim {
            let r = (0..dim).map(|j| a[(i, j)].abs() + b[(i, j)].abs()).fold(0.0_f64, f64::max);
            if r > 0.0 {
                let f = (-r.log2().round()).exp2();
                for j in 0..dim {
                    a[(i, j)] *= f;
                    b[(i, j)] *= f;
                }
            }
        }
        for j in 0..dim {
            let c = (0..dim).map(|i| a[(i, j)].abs() + b[(i, j)].abs()).fold(0.0_f64, f64::max);
            if c > 0.0 {
                let f = (-c.log2().round()).exp2();
                for i in 0..dim {
                    a[(i, j)] *= f;
                    b[(i, j)] *= f;
                }
            }
        }
    }

    let mut fa = Mat::<f64>::from_fn(dim, dim, |i, j| a[(i, j)]);
    let mut fb = Mat::<f64>::from_fn(dim, dim, |i, j| b[(i, j)]);
    let mut s_re = Diag::<f64>::zeros(dim);
    let mut s_im = Diag::<f64>::zeros(dim);
    let mut beta = Diag::<f64>::zeros(dim);
    let req = gevd_scratch::<f64>(
        dim,
        ComputeEigenvectors::No,
        ComputeEigenvectors::No,
        Par::Seq,
        Spec::<GevdParams, f64>::default(),
    )
    .and(StackReq::new::<f64>(32 * dim * dim + 1024));
    let mut buf = MemBuffer::new(req);
    gevd_real(
        fa.as_mut(),
        fb.as_mut(),
        s_re.as_mut(),
        s_im.as_mut(),
        beta.as_mut(),
        None,
        None,
        Par::Seq,
        MemStack::new(&mut buf),
        Spec::<GevdParams, f64>::default(),
    )
    .map_err(|e| Error::numerical(format!("QZ iteration failed: {e:?}")))?;

    let mags: Vec<f64> = (0..dim).map(|k| s_re[k].hypot(s_im[k]).hypot(beta[k])).collect();
    let scale = mags.iter().copied().fold(0.0_f64, f64::max);
    let mut out = Vec::new();
    let mut k = 0;
    while k < dim {
        // A complex pair occupies adjacent slots. Only the first member
        // carries an accurate (α, β); the QZ kernel writes the second with
        // an inconsistent β scale (α scaled by its own β, β copied from the
        // first member), so its ratio is the conjugate times β₂/β₁. Derive
        // the partner from the first member instead — conjugate closure is
        // exact for a real pencil.
        let pair = s_im[k] != 0.0 && k + 1 < dim;
        let alpha_mag = s_re[k].hypot(s_im[k]);
        if mags[k] <= 1e-13 * scale {
            return Err(Error::numerical(
                "singular transfer pencil: an eigenvalue is indeterminate (0/0)",
            ));
        }
        if beta[k].abs() <= 1e-14 * alpha_mag {
            k += if pair { 2 } else { 1 };
            continue; // infinite eigenvalue from the singular part of T1
        }
        // gevd solves T0·v = λ·T1·v; the pencil T0 + s·T1 is singular at
        // s = −λ.
        let s = C64::new(-s_re[k] / beta[k], -s_im[k] / beta[k]);
        out.push(s);
        if pair {
            out.push(s.conj());
            k += 2;
        } else {
            k += 1;
        }
    }
    Ok(out)
}

/// Relative residual `‖(N + sM)x‖ / ((‖N‖ + |s|·‖M‖)·‖x‖)` in the balanced
/// coordinates where it is meaningful.
fn eig_residual(n_bal: &DMatrix<C64>, m_bal: &DMatrix<C64>, s: C64, x: &DVector<C64>) -> f64 {
    let k = n_bal + m_bal.map(|v| v * s);
    let r = &k * x;
    let scale = (n_bal.norm() + s.norm() * m_bal.norm()) * x.norm();
    if scale == 0.0 {
        f64::INFINITY
    } else {
        r.norm() / scale
    }
}

/// Solve the generalized eigenproblem `−N x = s M x`.
///
/// Returns eigenvalues sorted with conjugate pairs adjacent (`+Im` member
/// first, pairs ordered by descending imaginary part) followed by real
/// eigenvalues in ascending order, right eigenvectors with a deterministic
/// phase convention, and inversion-based left eigenvectors normalized to
/// `−YᵀMX = I`. Rejects defective pencils.
pub fn solve_pencil(m: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<EigenSolution> {
    let dim = m.nrows();
    if dim == 0 || n.nrows() != dim || !m.is_square() || !n.is_square() {
        return Err(Error::numerical("pencil matrices must be square and non-empty"));
    }
    let dbal = balance_diagonal(m);
    let m_bal = balance_congruence(m, &dbal);
    let n_bal = balance_congruence(n, &dbal);
    let raw = qz_balanced(&m_bal, &n_bal)?;
    let m_bal_c = complexify(&m_bal);
    let n_bal_c = complexify(&n_bal);

    // Resolve eigenvectors in balanced coordinates, raw order. Isolated
    // eigenvalues take the QZ column, with a residual-checked conjugate
    // fallback (robust against packed-pair storage-order differences).
    // Repeated eigenvalues get their full eigenspace from the nullspace of
    // `N′ + s̄M′` — the QZ back-substitution cannot separate them — which is
    // also where defective pencils are rejected: the nullspace is smaller
    // than the multiplicity.
    let mut vecs: Vec<Option<DVector<C64>>> = (0..dim)
        .map(|k| {
            let v: DVector<C64> = DVector::from_fn(dim, |i, _| raw.x[(i, k)]);
            let finite = v.iter().all(|z| z.re.is_finite() && z.im.is_finite());
            (finite && v.norm() > 0.0).then_some(v)
        })
        .collect();
    for cluster in find_clusters(&raw.lambdas) {
        if cluster.len() == 1 && vecs[cluster[0]].is_some() {
            let k = cluster[0];
            let s = raw.lambdas[k];
            if s.im != 0.0 {
                let v = vecs[k].take().unwrap();
                let vc = v.map(|z| z.conj());
                let r = eig_residual(&n_bal_c, &m_bal_c, s, &v);
                let rc = eig_residual(&n_bal_c, &m_bal_c, s, &vc);
                vecs[k] = Some(if rc < r { vc } else { v });
            }
            continue;
        }
        let s_mean = cluster.iter().map(|&k| raw.lambdas[k]).sum::<C64>()
            / C64::new(cluster.len() as f64, 0.0);
        let kmat = &n_bal_c + m_bal_c.map(|v| v * s_mean);
        let basis = nullspace_basis(&kmat, cluster.len())?;
        for (&k, v) in cluster.iter().zip(basis) {
            vecs[k] = Some(v);
        }
    }

    // Group conjugate pairs (adjacent in the raw packing, `+Im` first) and
    // real eigenvalues, then sort groups: pairs by descending imaginary
    // part (ties by real part), reals last ascending. Stable on exact ties.
    enum Group {
        Pair(usize, usize),
        Single(usize),
    }
    let mut groups = Vec::new();
    let mut k = 0;
    while k < dim {
        if raw.lambdas[k].im > 0.0 {
            groups.push(Group::Pair(k, k + 1));
            k += 2;
        } else {
            groups.push(Group::Single(k));
            k += 1;
        }
    }
    groups.sort_by(|a, b| {
        let key = |g: &Group| match *g {
            Group::Pair(p, _) => (0u8, -raw.lambdas[p].im, raw.lambdas[p].re),
            Group::Single(r) => (1u8, raw.lambdas[r].re, 0.0),
        };
        key(a).partial_cmp(&key(b)).unwrap()
    });

    let mut lambdas = Vec::with_capacity(dim);
    let mut pairing = Vec::with_capacity(dim);
    let mut order = Vec::with_capacity(dim);
    for g in &groups {
        match *g {
            Group::Pair(p, q) => {
                let at = lambdas.len();
                lambdas.push(raw.lambdas[p]);
                lambdas.push(raw.lambdas[p].conj());
                pairing.push(Pairing::PairPlus { mate: at + 1 });
                pairing.push(Pairing::PairMinus { mate: at });
                order.push(p);
                order.push(q);
            }
            Group::Single(r) => {
                lambdas.push(raw.lambdas[r]);
                pairing.push(Pairing::Real);
                order.push(r);
            }
        }
    }

    // Back-transform out of the balanced coordinates and fix the phase:
    // the largest-magnitude entry of each column becomes exactly 1 + 0j.
    // Conjugate-pair mates are set to exact conjugates of the `+Im` member.
    let mut x = DMatrix::<C64>::zeros(dim, dim);
    for (newk, &oldk) in order.iter().enumerate() {
        if let Pairing::PairMinus { mate } = pairing[newk] {
            for i in 0..dim {
                x[(i, newk)] = x[(i, mate)].conj();
            }
            continue;
        }
        let vbal = vecs[oldk].as_ref().expect("eigenvector resolved above");
        let mut col: DVector<C64> = DVector::from_fn(dim, |i, _| vbal[i] / dbal[i]);
        let pivot = (0..dim)
            .max_by(|&a, &b| col[a].norm().partial_cmp(&col[b].norm()).unwrap())
            .unwrap();
        let p = col[pivot];
        if p.norm() == 0.0 {
            return Err(Error::numerical("eigensolve produced a zero eigenvector"));
        }
        col /= p;
        for i in 0..dim {
            x[(i, newk)] = col[i];
        }
    }

    let y = left_from_right(m, &x)?;
    let clusters = find_clusters(&lambdas);
    Ok(EigenSolution { lambdas, x, y, pairing, clusters })
}

/// Orthonormal basis of the (approximate) nullspace of `K`: the `want`
/// right singular vectors with the smallest singular values, provided at
/// least `want` of them fall below `1e-6·σ_max` — otherwise the eigenvalue
/// does not have a full eigenspace and the pencil is defective.
fn nullspace_basis(kmat: &DMatrix<C64>, want: usize) -> Result<Vec<DVector<C64>>> {
    let svd = kmat.clone().svd(false, true);
    let vt = svd.v_t.as_ref().expect("right singular vectors requested");
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&a, &b| sv[a].partial_cmp(&sv[b]).unwrap().then(a.cmp(&b)));
    let nullable = idx.iter().filter(|&&i| sv[i] <= 1e-6 * smax).count();
    if nullable < want {
        return Err(Error::numerical(format!(
            "defective system: eigenvalue of multiplicity {want} has only {nullable} \
             independent eigenvector(s)"
        )));
    }
    // v_t is Vᴴ, so a null vector is the conjugated row.
    Ok(idx[..want]
        .iter()
        .map(|&i| vt.row(i).map(|z| z.conj()).transpose())
        .collect())
}

/// Left eigenvectors by inversion: `Y = −(MX)⁻ᵀ`, so `−YᵀMX = I` exactly.
/// Fails when `X` is rank-deficient (defective pencil).
fn left_from_right(m: &DMatrix<f64>, x: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let mx = complexify(m) * x;
    let mxt = mx.transpose();
    let dim = x.nrows();
    let lu = mxt.clone().lu();
    let udiag = lu.u().map_diagonal(|z| z.norm());
    let umax = udiag.iter().cloned().fold(0.0_f64, f64::max);
    let umin = udiag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(umin > umax * 1e-12 * dim as f64) {
        return Err(Error::numerical(
            "defective system: eigenvector matrix is numerically singular",
        ));
    }
    let mut ident = DMatrix::<C64>::zeros(dim, dim);
    for i in 0..dim {
        ident[(i, i)] = C64::new(-1.0, 0.0);
    }
    // Yᵀ = −(MX)⁻¹ ⇔ (MX)ᵀ Y = −I.
    lu.solve(&ident)
        .ok_or_else(|| Error::numerical("defective system: eigenvectors are rank-deficient"))
}

/// Cluster (numerically) equal eigenvalues: `|s_i − s_j| ≤ 1e-8·max|s|`.
fn find_clusters(lambdas: &[C64]) -> Vec<Vec<usize>> {
    let dim = lambdas.len();
    let scale = lambdas.iter().map(|s| s.norm()).fold(0.0_f64, f64::max);
    let tol = 1e-8 * scale;
    let mut assigned = vec![false; dim];
    let mut clusters = Vec::new();
    for i in 0..dim {
        if assigned[i] {
            continue;
        }
        let mut group = vec![i];
        assigned[i] = true;
        for j in (i + 1)..dim {
            if !assigned[j] && (lambdas[j] - lambdas[i]).norm() <= tol {
                group.push(j);
                assigned[j] = true;
            }
        }
        clusters.push(group);
    }
    clusters
}

/// Polish one eigenpair (and its conjugate mate) by two-sided
/// Rayleigh-quotient iteration on the balanced pencil, then rebuild the left
/// eigenvectors so `−YᵀMX = I` stays exact. Keeps the best iterate by
/// residual, so the result is never worse than the input.
pub fn polish_mode(
    es: &EigenSolution,
    m: &DMatrix<f64>,
    n: &DMatrix<f64>,
    k: usize,
) -> Result<EigenSolution> {
    let dim = es.dim();
    let dbal = balance_diagonal(m);
    let m_bal = complexify(&balance_congruence(m, &dbal));
    let n_bal = complexify(&balance_congruence(n, &dbal));

    let mut s = es.lambdas[k];
    // Into balanced coordinates: x' = D x.
    let mut xv: DVector<C64> = DVector::from_fn(dim, |i, _| es.x[(i, k)] * dbal[i]);
    let mut yv: DVector<C64> = DVector::from_fn(dim, |i, _| es.y[(i, k)] * dbal[i]);
    xv /= C64::new(xv.norm(), 0.0);
    yv /= C64::new(yv.norm(), 0.0);

    let mut best = (eig_residual(&n_bal, &m_bal, s, &xv), s, xv.clone(), yv.clone());
    for _ in 0..3 {
        let kmat = &n_bal + m_bal.map(|v| v * s);
        let lu = kmat.clone().lu();
        let rhs_x = &m_bal * &xv;
        let rhs_y = &m_bal.transpose() * &yv;
        let (Some(nx), Some(ny)) = (lu.solve(&rhs_x), kmat.transpose().lu().solve(&rhs_y))
        else {
            break; // exactly singular shift: converged
        };
        if !(nx.norm().is_finite() && ny.norm().is_finite()) || nx.norm() == 0.0 || ny.norm() == 0.0
        {
            break;
        }
        xv = &nx / C64::new(nx.norm(), 0.0);
        yv = &ny / C64::new(ny.norm(), 0.0);
        let num: C64 = (yv.transpose() * &n_bal * &xv)[(0, 0)];
        let den: C64 = (yv.transpose() * &m_bal * &xv)[(0, 0)];
        if den.norm() == 0.0 {
            break;
        }
        s = -num / den;
        let r = eig_residual(&n_bal, &m_bal, s, &xv);
        if r < best.0 {
            best = (r, s, xv.clone(), yv.clone());
        }
    }

    let (_, s, xv, _) = best;
    let mut out = es.clone();
    out.lambdas[k] = s;
    // Back-transform with the deterministic phase convention.
    let mut col: DVector<C64> = DVector::from_fn(dim, |i, _| xv[i] / dbal[i]);
    let pivot = (0..dim)
        .max_by(|&a, &b| col[a].norm().partial_cmp(&col[b].norm()).unwrap())
        .unwrap();
    let p = col[pivot];
    col /= p;
    for i in 0..dim {
        out.x[(i, k)] = col[i];
    }
    match es.pairing[k] {
        Pairing::PairPlus { mate } | Pairing::PairMinus { mate } => {
            out.lambdas[mate] = s.conj();
            for i in 0..dim {
                out.x[(i, mate)] = col[i].conj();
            }
        }
        Pairing::Real => {
            // A real eigenvalue polished in complex arithmetic keeps a
            // negligible imaginary part; drop it.
            out.lambdas[k] = C64::new(s.re, 0.0);
        }
    }
    out.y = left_from_right(m, &out.x)?;
    out.clusters = find_clusters(&out.lambdas);
    Ok(out)
}

/// Match a resonance guess (Hz) to an eigenvalue: candidates are the `+Im`
/// members of conjugate pairs plus real eigenvalues (at `f = 0`); the match
/// is the nearest natural frequency and must lie within ±25% of the guess.
/// An exact tie between two candidates is an ambiguity error.
pub fn match_resonance(es: &EigenSolution, guess_hz: f64) -> Result<usize> {
    let mut cands: Vec<(usize, f64)> = es
        .lambdas
        .iter()
        .enumerate()
        .filter(|(k, s)| s.im > 0.0 || matches!(es.pairing[*k], Pairing::Real))
        .map(|(k, _)| (k, (es.frequency_hz(k) - guess_hz).abs()))
        .collect();
    if cands.is_empty() {
        return Err(Error::ResonanceMatch("system has no eigenvalues".into()));
    }
    cands.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let (best, dist) = cands[0];
    if cands.len() > 1 {
        let (_, dist2) = cands[1];
        let tie_tol = 1e-9 * guess_hz.abs().max(dist.max(dist2));
        if (dist2 - dist).abs() <= tie_tol {
            return Err(Error::ResonanceMatch(format!(
                "ambiguous match: two modes equally distant from {guess_hz} Hz"
            )));
        }
    }
    if dist > 0.25 * guess_hz.abs() {
        return Err(Error::ResonanceMatch(format!(
            "no eigenvalue within 25% of guess {} Hz (nearest at {} Hz)",
            guess_hz,
            es.frequency_hz(best)
        )));
    }
    Ok(best)
}

/// Modal resolvent `Z(jω) = X (Λ − jωI)⁻¹ Yᵀ ≡ (N + jωM)⁻¹`.
///
/// Errors when `jω` falls within `1e-8·max|s|` of an eigenvalue (undamped
/// resonance: the resolvent does not exist on the imaginary axis there).
pub fn resolvent(es: &EigenSolution, omega_n: f64) -> Result<DMatrix<C64>> {
    let jw = C64::new(0.0, omega_n);
    let scale = es.lambda_scale();
    if es.lambdas.iter().any(|s| (s - jw).norm() <= 1e-8 * scale) {
        return Err(Error::numerical(format!(
            "resolvent requested at an (undamped) eigenvalue: ω = {omega_n} rad/s"
        )));
    }
    let dim = es.dim();
    let mut z = DMatrix::<C64>::zeros(dim, dim);
    // X diag(1/(s_k − jω)) Yᵀ accumulated as rank-1 updates.
    for k in 0..dim {
        let g = C64::new(1.0, 0.0) / (es.lambdas[k] - jw);
        for i in 0..dim {
            let xg = es.x[(i, k)] * g;
            for j in 0..dim {
                z[(i, j)] += xg * es.y[(j, k)];
            }
        }
    }
    Ok(z)
}

/// Modal transfer function: `H(s) = D X(Λ − sI)⁻¹Yᵀ B + E` for standard
/// coupling, multiplied by the derivative-coupling factors when applicable
/// (`s²` on the resolvent term, `s` on `E`). Equals
/// [`crate::statespace::direct_transfer`] off the spectrum.
pub fn modal_transfer(es: &EigenSolution, ss: &StateSpaceModel, s: Complex64) -> Result<DMatrix<C64>> {
    let scale = es.lambda_scale();
    if es.lambdas.iter().any(|sk| (sk - s).norm() <= 1e-12 * scale.max(s.norm())) {
        return Err(Error::numerical("transfer function evaluated at an eigenvalue"));
    }
    let np = ss.num_ports();
    let dim = es.dim();
    let dc = complexify(&ss.d);
    let bc = complexify(&ss.b);
    let ec = complexify(&ss.e);
    // D X (Λ−s)⁻¹ Yᵀ B without forming the dense resolvent.
    let dx = &dc * &es.x; // P×N
    let ytb = es.y.transpose() * &bc; // N×P
    let mut core = DMatrix::<C64>::zeros(np, np);
    for k in 0..dim {
        let g = C64::new(1.0, 0.0) / (es.lambdas[k] - s);
        for p in 0..np {
            for q in 0..np {
                core[(p, q)] += dx[(p, k)] * g * ytb[(k, q)];
            }
        }
    }
    Ok(match ss.coupling {
        Coupling::Standard => core + ec,
        Coupling::Derivative => core.map(|v| v * s * s) + ec.map(|v| v * s),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::rc_reference_model;

    fn rlc_pencil() -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.2]),
        )
    }

    #[test]
    fn rc_single_real_eigenvalue() {
        let m = DMatrix::from_element(1, 1, 1.0);
        let n = DMatrix::from_element(1, 1, 1.0);
        let es = solve_pencil(&m, &n).unwrap();
        assert_eq!(es.lambdas.len(), 1);
        assert!((es.lambdas[0] - C64::new(-1.0, 0.0)).norm() < 1e-14);
        assert_eq!(es.pairing[0], Pairing::Real);
    }

    #[test]
    fn rlc_conjugate_pair_matches_analytic() {
        // s = −R/2L ± j√(1/LC − R²/4L²) = −0.1 ± j·0.99498743710662
        let (m, n) = rlc_pencil();
        let es = solve_pencil(&m, &n).unwrap();
        let expected = C64::new(-0.1, (1.0_f64 - 0.01).sqrt());
        assert!((es.lambdas[0] - expected).norm() < 1e-12, "{:?}", es.lambdas);
        assert!((es.lambdas[1] - expected.conj()).norm() < 1e-12);
        assert_eq!(es.pairing[0], Pairing::PairPlus { mate: 1 });
    }

    #[test]
    fn biorthonormalization_is_exact() {
        let (m, n) = rlc_pencil();
        let es = solve_pencil(&m, &n).unwrap();
        let mc = complexify(&m);
        let nc = complexify(&n);
        let gram = -(es.y.transpose() * &mc * &es.x);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                assert!((gram[(i, j)] - expect).norm() < 1e-10);
            }
        }
        let ynx = es.y.transpose() * &nc * &es.x;
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { es.lambdas[i] } else { C64::new(0.0, 0.0) };
                assert!((ynx[(i, j)] - expect).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn repeated_eigenvalues_cluster_without_defectiveness() {
        // Two uncoupled RC cells: eigenvalue −1 twice, full eigenspace.
        let m = DMatrix::identity(2, 2);
        let n = DMatrix::identity(2, 2);
        let es = solve_pencil(&m, &n).unwrap();
        assert_eq!(es.clusters.len(), 1);
        assert_eq!(es.clusters[0].len(), 2);
    }

    #[test]
    fn defective_pencil_is_rejected() {
        // Jordan block: eigenvalue −1 doubled with a 1-dim eigenspace.
        let m = DMatrix::identity(2, 2);
        let n = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let err = solve_pencil(&m, &n).unwrap_err();
        assert!(err.to_string().contains("defective"), "{err}");
    }

    #[test]
    fn resolvent_scalar_case() {
        let m = DMatrix::from_element(1, 1, 1.0);
        let n = DMatrix::from_element(1, 1, 1.0);
        let es = solve_pencil(&m, &n).unwrap();
        let z = resolvent(&es, 1.0).unwrap();
        let expected = C64::new(1.0, 0.0) / C64::new(1.0, 1.0);
        assert!((z[(0, 0)] - expected).norm() < 1e-14);
    }

    #[test]
    fn resolvent_rejects_eigenvalue_frequency() {
        // Undamped LC: eigenvalues ±j, resolvent at ω = 1 must fail.
        let m = DMatrix::identity(2, 2);
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let es = solve_pencil(&m, &n).unwrap();
        assert!(resolvent(&es, 1.0).is_err());
        assert!(resolvent(&es, 0.5).is_ok());
    }

    #[test]
    fn modal_transfer_scalar() {
        let ss = rc_reference_model();
        let es = solve_pencil(&ss.m, &ss.n).unwrap();
        let h = modal_transfer(&es, &ss, C64::new(1.0, 0.0)).unwrap();
        assert!((h[(0, 0)] - C64::new(0.5, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn match_resonance_guards() {
        let (m, n) = rlc_pencil();
        let es = solve_pencil(&m, &n).unwrap();
        let f0 = es.frequency_hz(0);
        assert_eq!(match_resonance(&es, f0 * 1.1).unwrap(), 0);
        assert!(matches!(
            match_resonance(&es, f0 * 2.0),
            Err(Error::ResonanceMatch(_))
        ));
    }

    #[test]
    fn polish_improves_or_preserves() {
        let (m, n) = rlc_pencil();
        let es = solve_pencil(&m, &n).unwrap();
        let polished = polish_mode(&es, &m, &n, 0).unwrap();
        let expected = C64::new(-0.1, (1.0_f64 - 0.01).sqrt());
        assert!((polished.lambdas[0] - expected).norm() < 1e-14);
        // Mate kept exactly conjugate.
        assert_eq!(polished.lambdas[1], polished.lambdas[0].conj());
        // Biorthogonality rebuilt.
        let gram = -(polished.y.transpose() * complexify(&m) * &polished.x);
        assert!((gram[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!(gram[(0, 1)].norm() < 1e-12);
    }
}
