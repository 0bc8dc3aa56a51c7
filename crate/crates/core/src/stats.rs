//! Covariance propagation, the local density transform, and Monte Carlo
//! yield estimation.
//!
//! The linearized chain: given the sensitivity matrix `S` and a parameter
//! covariance `Σ_h`, the observable covariance is `Σ_Ω = S·Σ_h·Sᵀ`. Yield
//! samples are drawn directly in observable space as `Ω₀ + A·z` with
//! `A·Aᵀ = Σ_Ω` — identical in law to sampling parameters and mapping them
//! through the linearization, at a fraction of the cost. Each sample is
//! scored against the spec set into a region histogram indexed by the
//! pass/fail bitmask (bit 0 = first spec), from which partial, combined and
//! total yields are exact marginals.
//!
//! A full re-solve oracle draws parameters instead, rebuilds the circuit,
//! re-solves the eigenproblem and re-tracks the resonances per trial; it is
//! the slow-path ground truth that bounds the linearization error.
//!
//! Determinism contract: sample `i` is a pure function of `(seed, i)` — one
//! counter-based RNG substream per trial index — so every partition of the
//! trial range over workers produces the same region counts, and reports are
//! byte-identical for any worker count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::netlist::Circuit;
use crate::sensitivity::{observe_response, Resonance, ResponseSpec, RowKind, SensitivityMatrix};

/// A multivariate normal model of the circuit parameters.
#[derive(Debug, Clone)]
pub struct ParameterDistribution {
    /// Nominal parameter vector `h` (SI units, declaration order).
    pub mean: DVector<f64>,
    /// Symmetric positive-semidefinite covariance `Σ_h`.
    pub covariance: DMatrix<f64>,
}

impl ParameterDistribution {
    /// Validated constructor: `covariance` must be square of matching size,
    /// symmetric, and PSD up to `−1e-12·trace`.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::Validation(format!(
                "covariance is {}×{} but the mean has {} entries",
                covariance.nrows(),
                covariance.ncols(),
                mean.len()
            )));
        }
        check_covariance(&covariance)?;
        Ok(ParameterDistribution { mean, covariance })
    }

    /// Independent relative tolerances: `σ_k = rel_sigma·h_k`, diagonal
    /// covariance.
    pub fn relative(mean: DVector<f64>, rel_sigma: f64) -> Self {
        let cov = DMatrix::from_diagonal(&mean.map(|h| (rel_sigma * h).powi(2)));
        ParameterDistribution { mean, covariance: cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetry + PSD check (`λ_min ≥ −1e-12·trace`).
fn check_covariance(cov: &DMatrix<f64>) -> Result<()> {
    let asym = (cov - cov.transpose()).norm();
    if asym > 1e-12 * cov.norm() {
        return Err(Error::Validation(format!(
            "covariance is not symmetric (‖Σ − Σᵀ‖ = {asym:.3e})"
        )));
    }
    let trace = cov.trace();
    let min_eig = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -1e-12 * trace.abs() {
        return Err(Error::Validation(format!(
            "covariance is not positive semidefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

/// Observable covariance `Σ_Ω = S·Σ_h·Sᵀ` in the sensitivity matrix's row
/// units. The product is re-symmetrized entrywise so the result is exactly
/// symmetric (floating-point `S·Σ·Sᵀ` is symmetric only to roundoff).
pub fn propagate_covariance(
    s: &SensitivityMatrix,
    dist: &ParameterDistribution,
) -> Result<DMatrix<f64>> {
    if dist.dim() != s.num_params() {
        return Err(Error::Validation(format!(
            "distribution has {} parameters, sensitivity matrix has {}",
            dist.dim(),
            s.num_params()
        )));
    }
    let mut sig = &s.values * &dist.covariance * s.values.transpose();
    for i in 0..sig.nrows() {
        for j in 0..i {
            let v = 0.5 * (sig[(i, j)] + sig[(j, i)]);
            sig[(i, j)] = v;
            sig[(j, i)] = v;
        }
    }
    Ok(sig)
}

/// Density transform under a bijective map with Jacobian `jac`:
/// `g(Ω(h)) = f(h)·|det jac|⁻¹`.
///
/// Only square Jacobians qualify — a rectangular linearization (more
/// parameters than observables) pushes no pointwise density forward, which
/// is why yield estimation samples instead.
pub fn local_density(jac: &DMatrix<f64>, f_at_h: f64) -> Result<f64> {
    if !jac.is_square() {
        return Err(Error::Unsupported(format!(
            "density transform requires a square (bijective) Jacobian, got {}×{}",
            jac.nrows(),
            jac.ncols()
        )));
    }
    let det = jac.clone().lu().determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::numerical(
            "singular Jacobian: the transformed density is not defined",
        ));
    }
    Ok(f_at_h / det.abs())
}

/// Deterministic multivariate normal sampler (see the module notes on the
/// determinism contract).
#[derive(Debug, Clone)]
pub struct OmegaSampler {
    mean: DVector<f64>,
    /// `A` with `A·Aᵀ = Σ`: symmetric square root, eigenvalues clamped at 0.
    factor: DMatrix<f64>,
    seed: u64,
}

impl OmegaSampler {
    pub fn new(mean: DVector<f64>, covariance: &DMatrix<f64>, seed: u64) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::Validation(format!(
                "covariance is {}×{} but the mean has {} entries",
                covariance.nrows(),
                covariance.ncols(),
                mean.len()
            )));
        }
        check_covariance(covariance)?;
        let eig = covariance.clone().symmetric_eigen();
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(OmegaSampler { mean, factor, seed })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sample `index`: mean + A·z with z drawn from the substream dedicated
    /// to this index.
    pub fn sample(&self, index: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(&mut rng));
        &self.mean + &self.factor * z
    }
}

/// What a spec constrains.
#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    /// Natural frequency of a named resonance, in the frequency-row unit of
    /// the sensitivity matrix (Hz).
    Frequency { resonance: String },
    /// `|S_pp|` at a named resonance's own frequency (dimensionless).
    ReflectionMagnitude { resonance: String },
}

/// Pass criterion on the selected observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// `|value − center| < tol`.
    Within { center: f64, tol: f64 },
    /// `value < limit`.
    Below { limit: f64 },
    /// `value > limit`.
    Above { limit: f64 },
}

impl Criterion {
    fn passes(&self, value: f64) -> bool {
        match *self {
            Criterion::Within { center, tol } => (value - center).abs() < tol,
            Criterion::Below { limit } => value < limit,
            Criterion::Above { limit } => value > limit,
        }
    }
}

/// One named specification, optionally assigned to a combined-yield group.
#[derive(Debug, Clone)]
pub struct Spec {
    pub name: String,
    pub observable: Observable,
    pub criterion: Criterion,
    pub group: Option<String>,
}

/// Ordered list of specifications (declaration order fixes the region
/// bitmask: bit 0 = first spec).
#[derive(Debug, Clone, Default)]
pub struct SpecSet {
    pub specs: Vec<Spec>,
}

/// How a resolved spec reads its observable out of an Ω vector.
#[derive(Debug, Clone, Copy)]
enum Selector {
    Row(usize),
    /// `hypot` of a (Re, Im) row pair.
    Magnitude(usize, usize),
}

/// A spec set bound to the row layout of one sensitivity matrix.
#[derive(Debug, Clone)]
pub struct ResolvedSpecSet {
    names: Vec<String>,
    selectors: Vec<Selector>,
    criteria: Vec<Criterion>,
    /// `(group name, member spec indices)` in first-appearance order.
    groups: Vec<(String, Vec<usize>)>,
}

impl SpecSet {
    /// Bind every selector to a row (or row pair) of `sm`.
    pub fn resolve(&self, sm: &SensitivityMatrix) -> Result<ResolvedSpecSet> {
        if self.specs.is_empty() {
            return Err(Error::Validation("no specifications declared".into()));
        }
        if self.specs.len() > 16 {
            return Err(Error::Validation(format!(
                "{} specifications: the region histogram is 2^k, at most 16 supported",
                self.specs.len()
            )));
        }
        let res_index = |name: &str| -> Result<usize> {
            sm.resonances
                .iter()
                .position(|r| r.name == name)
                .ok_or_else(|| {
                    Error::Validation(format!("spec references unknown resonance '{name}'"))
                })
        };
        let mut names = Vec::new();
        let mut selectors = Vec::new();
        let mut criteria = Vec::new();
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, spec) in self.specs.iter().enumerate() {
            let sel = match &spec.observable {
                Observable::Frequency { resonance } => {
                    let r = res_index(resonance)?;
                    let row = sm
                        .row_index(RowKind::FrequencyHz { resonance: r })
                        .ok_or_else(|| {
                            Error::Validation(format!(
                                "resonance '{resonance}' is overdamped: no oscillation \
                                 frequency to constrain"
                            ))
                        })?;
                    Selector::Row(row)
                }
                Observable::ReflectionMagnitude { resonance } => {
                    let r = res_index(resonance)?;
                    let port = sm.resonances[r].port.ok_or_else(|| {
                        Error::Validation(format!(
                            "resonance '{resonance}' has no port, so no reflection \
                             observable"
                        ))
                    })?;
                    let re = sm
                        .row_index(RowKind::ReS { resonance: r, port })
                        .expect("ported resonance has reflection rows");
                    let im = sm
                        .row_index(RowKind::ImS { resonance: r, port })
                        .expect("ported resonance has reflection rows");
                    Selector::Magnitude(re, im)
                }
            };
            names.push(spec.name.clone());
            selectors.push(sel);
            criteria.push(spec.criterion);
            if let Some(g) = &spec.group {
                match groups.iter_mut().find(|(name, _)| name == g) {
                    Some((_, members)) => members.push(i),
                    None => groups.push((g.clone(), vec![i])),
                }
            }
        }
        Ok(ResolvedSpecSet { names, selectors, criteria, groups })
    }
}

impl ResolvedSpecSet {
    pub fn num_specs(&self) -> usize {
        self.names.len()
    }

    pub fn spec_names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[(String, Vec<usize>)] {
        &self.groups
    }

    /// Pass/fail bitmask of an observable vector (bit `i` set ⇔ spec `i`
    /// passes).
    pub fn pass_mask(&self, omega: &DVector<f64>) -> usize {
        let mut mask = 0usize;
        for (i, (sel, crit)) in self.selectors.iter().zip(&self.criteria).enumerate() {
            let value = match *sel {
                Selector::Row(r) => omega[r],
                Selector::Magnitude(re, im) => omega[re].hypot(omega[im]),
            };
            if crit.passes(value) {
                mask |= 1 << i;
            }
        }
        mask
    }
}

/// Combined yield of one named spec group.
#[derive(Debug, Clone)]
pub struct GroupYield {
    pub name: String,
    /// Indices of the member specs.
    pub members: Vec<usize>,
    /// Joint pass probability (fraction of trials).
    pub fraction: f64,
    /// Binomial standard error `√(p(1−p)/n)`.
    pub stderr: f64,
}

/// Region-resolved Monte Carlo outcome. All yields are exact marginals of
/// `region_counts`, so the marginal-consistency invariant holds by
/// construction.
#[derive(Debug, Clone)]
pub struct YieldReport {
    pub trials: u64,
    pub seed: u64,
    pub spec_names: Vec<String>,
    /// Histogram over pass/fail bitmasks; index = mask, bit 0 = first spec.
    /// Sums to `trials`.
    pub region_counts: Vec<u64>,
    /// Per-spec pass fractions.
    pub partial: Vec<f64>,
    pub partial_stderr: Vec<f64>,
    /// Per-group joint pass fractions.
    pub combined: Vec<GroupYield>,
    /// All-spec joint pass fraction.
    pub total: f64,
    pub total_stderr: f64,
    /// Full-resolve oracle only: trials whose rebuild, eigensolve, or
    /// resonance tracking failed. A lost resonance cannot meet any spec, so
    /// such trials land in region 0 (all-fail) and are tallied here as well.
    pub tracking_failures: u64,
}

impl YieldReport {
    /// Derive every yield figure from a region histogram.
    pub fn from_regions(
        spec_names: Vec<String>,
        groups: &[(String, Vec<usize>)],
        region_counts: Vec<u64>,
        seed: u64,
        tracking_failures: u64,
    ) -> Self {
        let k = spec_names.len();
        assert_eq!(region_counts.len(), 1usize << k, "one region per bitmask");
        let trials: u64 = region_counts.iter().sum();
        let n = trials as f64;
        let se = |p: f64| if trials > 0 { (p * (1.0 - p) / n).sqrt() } else { 0.0 };
        let frac_where = |want: usize| -> f64 {
            if trials == 0 {
                return 0.0;
            }
            let hits: u64 = region_counts
                .iter()
                .enumerate()
                .filter(|(mask, _)| mask & want == want)
                .map(|(_, &c)| c)
                .sum();
            hits as f64 / n
        };
        let partial: Vec<f64> = (0..k).map(|i| frac_where(1 << i)).collect();
        let partial_stderr = partial.iter().map(|&p| se(p)).collect();
        let combined = groups
            .iter()
            .map(|(name, members)| {
                let want = members.iter().fold(0usize, |m, &i| m | (1 << i));
                let fraction = frac_where(want);
                GroupYield {
                    name: name.clone(),
                    members: members.clone(),
                    fraction,
                    stderr: se(fraction),
                }
            })
            .collect();
        let total = frac_where((1usize << k) - 1);
        YieldReport {
            trials,
            seed,
            spec_names,
            region_counts,
            partial,
            partial_stderr,
            combined,
            total,
            total_stderr: se(total),
            tracking_failures,
        }
    }
}

/// Score a stream of observable samples against a resolved spec set.
pub fn evaluate_specs<I>(samples: I, specs: &ResolvedSpecSet, seed: u64) -> YieldReport
where
    I: IntoIterator<Item = DVector<f64>>,
{
    let mut regions = vec![0u64; 1 << specs.num_specs()];
    for omega in samples {
        regions[specs.pass_mask(&omega)] += 1;
    }
    YieldReport::from_regions(specs.names.clone(), &specs.groups, regions, seed, 0)
}

/// Linearized Monte Carlo yield: `trials` samples of `Ω ~ N(Ω₀, Σ_Ω)`
/// scored in parallel. Identical output for any worker count.
pub fn monte_carlo_yield(
    sampler: &OmegaSampler,
    specs: &ResolvedSpecSet,
    trials: u64,
) -> YieldReport {
    let size = 1usize << specs.num_specs();
    let regions = (0..trials)
        .into_par_iter()
        .fold(
            || vec![0u64; size],
            |mut hist, i| {
                hist[specs.pass_mask(&sampler.sample(i))] += 1;
                hist
            },
        )
        .reduce(
            || vec![0u64; size],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
    YieldReport::from_regions(specs.names.clone(), &specs.groups, regions, sampler.seed(), 0)
}

/// Ground-truth Monte Carlo: per trial, draw parameters, rebuild the
/// circuit, re-solve the eigenproblem, re-track each resonance by nearest
/// frequency, and score the exact observables. Capped at 1e5 trials — this
/// is the slow path the linearization exists to avoid.
pub fn full_resolve_mc_oracle(
    c: &Circuit,
    rs: &ResponseSpec,
    dist: &ParameterDistribution,
    specs: &SpecSet,
    trials: u64,
    seed: u64,
) -> Result<YieldReport> {
    if trials > 100_000 {
        return Err(Error::Validation(format!(
            "full re-solve oracle capped at 100000 trials, requested {trials}"
        )));
    }
    let params = c.parameters();
    if dist.dim() != params.len() {
        return Err(Error::Validation(format!(
            "distribution has {} parameters, circuit has {}",
            dist.dim(),
            params.len()
        )));
    }
    // One nominal assembly fixes the row layout, resolves the spec
    // selectors, and pins the per-trial tracking guesses at the nominal
    // frequencies.
    let sm = crate::sensitivity::assemble_sensitivity(c, rs)?;
    let resolved = specs.resolve(&sm)?;
    let rs_trial = ResponseSpec::new(
        sm.resonances
            .iter()
            .zip(&rs.resonances)
            .map(|(rr, orig)| {
                let guess = if rr.s.im > 0.0 {
                    rr.s.im / (2.0 * std::f64::consts::PI)
                } else {
                    orig.guess_hz
                };
                Resonance::new(rr.name.clone(), guess, rr.port)
            })
            .collect(),
    );
    let sampler = OmegaSampler::new(dist.mean.clone(), &dist.covariance, seed)?;

    let size = 1usize << resolved.num_specs();
    let (regions, failures) = (0..trials)
        .into_par_iter()
        .fold(
            || (vec![0u64; size], 0u64),
            |(mut hist, mut fails), i| {
                let h = sampler.sample(i);
                let trial = c.with_values(h.as_slice());
                match observe_response(&trial, &rs_trial) {
                    Ok(omega) => hist[resolved.pass_mask(&omega)] += 1,
                    Err(_) => {
                        hist[0] += 1;
                        fails += 1;
                    }
                }
                (hist, fails)
            },
        )
        .reduce(
            || (vec![0u64; size], 0u64),
            |(mut a, fa), (b, fb)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                (a, fa + fb)
            },
        );
    Ok(YieldReport::from_regions(
        resolved.names.clone(),
        &resolved.groups,
        regions,
        seed,
        failures,
    ))
}

/// Area-proportional Venn rendering of a yield report: one circle per spec,
/// area proportional to its pass count, on a fixed ring layout. The layout
/// is a deterministic heuristic — overlap areas are *not* optimized to match
/// the joint region counts (the report carries those exactly).
pub fn venn_svg(report: &YieldReport) -> Result<String> {
    let k = report.spec_names.len();
    if k == 0 || k > 6 {
        return Err(Error::Unsupported(format!(
            "Venn rendering supports 1–6 specs, got {k}"
        )));
    }
    const PALETTE: [&str; 6] =
        ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1", "#76b7b2"];
    let (w, h) = (640.0, 520.0);
    let (cx0, cy0) = (w / 2.0, h / 2.0 + 10.0);
    let n = report.trials.max(1) as f64;
    // Largest circle radius 150 px; areas scale with pass counts.
    let rmax = 150.0;
    let pmax = report.partial.iter().copied().fold(0.0_f64, f64::max).max(1e-12);
    let radii: Vec<f64> =
        report.partial.iter().map(|&p| rmax * (p / pmax).sqrt().max(0.02)).collect();
    // Ring offset pulls similar-sized circles into overlap, echoing joint
    // passes without claiming area accuracy.
    let ring = if k == 1 { 0.0 } else { 0.55 * radii.iter().sum::<f64>() / k as f64 };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">Spec pass populations ({} trials)</text>\n",
        w / 2.0,
        report.trials
    ));
    for i in 0..k {
        let angle = std::f64::consts::TAU * i as f64 / k as f64;
        let cx = cx0 + ring * angle.cos();
        let cy = cy0 + ring * angle.sin();
        let color = PALETTE[i];
        let pct = 100.0 * report.partial[i];
        svg.push_str(&format!(
            "  <circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"{:.1}\" fill=\"{color}\" \
             fill-opacity=\"0.35\" stroke=\"{color}\" stroke-width=\"1.5\">\
             <title>{}: {pct:.2}%</title></circle>\n",
            radii[i], report.spec_names[i]
        ));
    }
    for i in 0..k {
        let angle = std::f64::consts::TAU * i as f64 / k as f64;
        let lx = cx0 + (ring + radii[i] + 14.0) * angle.cos();
        let ly = cy0 + (ring + radii[i] + 14.0) * angle.sin();
        let pct = 100.0 * report.partial[i];
        svg.push_str(&format!(
            "  <text x=\"{lx:.1}\" y=\"{ly:.1}\" text-anchor=\"middle\" \
             font-family=\"sans-serif\" font-size=\"13\">{} {pct:.1}%</text>\n",
            report.spec_names[i]
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">total yield {:.2}%</text>\n",
        w / 2.0,
        h - 12.0,
        100.0 * report.total
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}
