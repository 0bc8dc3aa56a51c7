//! State-space assembly: the matrices `M`, `N`, `B`, `D`, `E`, per-parameter
//! derivative stamps, the direct transfer function, and an independent
//! full-MNA AC oracle.
//!
//! The circuit equations take the descriptor form
//!
//! ```text
//! M ẋ = −N x + B u̇,      i = d/dt (D x + E u)
//! ```
//!
//! with states `x` = internal node voltages followed by inductor currents,
//! inputs `u` = port voltages, and outputs `i` = port currents. `M` is
//! block-diagonal `diag(C-block, L-block)`; `N` has the structure
//! `[[G, A], [−Aᵀ, R]]`. Ports couple through capacitors only, so the input
//! enters through `u̇` and the port current is itself a time derivative
//! ("derivative coupling"): in the Laplace domain the port admittance is
//!
//! ```text
//! H(s) = s²·D (N + sM)⁻¹ B + s·E.
//! ```
//!
//! Hand-built models may instead use standard coupling,
//! `H(s) = D (N + sM)⁻¹ B + E`; the [`Coupling`] flag selects the form.
//! Both forms are cross-checked against [`mna_ac_oracle`], which solves the
//! full frequency-domain MNA system without any state-space reduction.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{complexify, PencilSolve, C64};
use crate::netlist::{Circuit, ComponentKind, ParamKind, Parameter};

/// Physical meaning of one state variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateLabel {
    /// Voltage of the named internal node, volts.
    Voltage(String),
    /// Current through the named inductor, amperes.
    Current(String),
}

impl std::fmt::Display for StateLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateLabel::Voltage(n) => write!(f, "v({n})"),
            StateLabel::Current(n) => write!(f, "i({n})"),
        }
    }
}

/// How inputs/outputs couple to the state equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// `H(s) = D (N+sM)⁻¹ B + E`.
    Standard,
    /// Capacitively-coupled ports: `H(s) = s²·D (N+sM)⁻¹ B + s·E`.
    Derivative,
}

/// Assembled state-space model with labeling metadata.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub state_labels: Vec<StateLabel>,
    pub coupling: Coupling,
    /// Per-port reference impedance, ohms (indexed by port number − 1).
    pub port_z0: Vec<f64>,
    /// Internal-node name → voltage-state row.
    pub node_index: HashMap<String, usize>,
    /// Inductor id → current-state row.
    pub inductor_index: HashMap<String, usize>,
    /// Port node name → input column.
    pub port_index: HashMap<String, usize>,
}

/// Derivative of all five model matrices with respect to one parameter.
///
/// The matrices are structurally sparse (a handful of entries per stamp) but
/// stored dense for simplicity; systems here are small. For capacitances,
/// inductances and series resistances the model is affine in the parameter,
/// so `model(h+δ) = model(h) + δ·stamp` holds exactly. Shunt-resistor
/// parameters enter through their conductance `1/R`, so their stamps are
/// exact first derivatives at the nominal point rather than affine
/// increments.
#[derive(Debug, Clone)]
pub struct ParameterStamp {
    pub param: Parameter,
    pub dm: DMatrix<f64>,
    pub dn: DMatrix<f64>,
    pub db: DMatrix<f64>,
    pub dd: DMatrix<f64>,
    pub de: DMatrix<f64>,
}

impl StateSpaceModel {
    /// Number of state variables.
    pub fn num_states(&self) -> usize {
        self.m.nrows()
    }

    /// Number of ports.
    pub fn num_ports(&self) -> usize {
        self.b.ncols()
    }

    /// Build a model directly from matrices (used for hand-built systems in
    /// tests and for synthetic benchmarks).
    pub fn from_parts(
        m: DMatrix<f64>,
        n: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        coupling: Coupling,
        port_z0: Vec<f64>,
    ) -> Self {
        let ns = m.nrows();
        let state_labels = (0..ns).map(|i| StateLabel::Voltage(format!("x{i}"))).collect();
        StateSpaceModel {
            m,
            n,
            b,
            d,
            e,
            state_labels,
            coupling,
            port_z0,
            node_index: HashMap::new(),
            inductor_index: HashMap::new(),
            port_index: HashMap::new(),
        }
    }

    /// Model with one parameter stamp applied: `self + δ·stamp`.
    pub fn apply_stamp(&self, stamp: &ParameterStamp, delta: f64) -> StateSpaceModel {
        let mut out = self.clone();
        out.m += &stamp.dm * delta;
        out.n += &stamp.dn * delta;
        out.b += &stamp.db * delta;
        out.d += &stamp.dd * delta;
        out.e += &stamp.de * delta;
        out
    }
}

/// Assemble the state-space model from a validated circuit.
///
/// States are internal node voltages (node-declaration order) followed by
/// inductor currents (component order). Port nodes are eliminated: their
/// voltages are the inputs `u`. Coupling capacitors contribute to the
/// C-block diagonal of the touched internal node, an entry `−C` in `B`, the
/// diagonal `+C` in `E`, and `D = −Bᵀ`.
pub fn build_state_space(c: &Circuit) -> Result<StateSpaceModel> {
    let report = c.validate();
    if !report.is_valid() {
        return Err(Error::Validation(report.to_string()));
    }

    let port_nodes = c.port_nodes();
    let internal: Vec<String> =
        c.node_order().into_iter().filter(|n| !port_nodes.contains(n)).collect();
    let node_index: HashMap<String, usize> =
        internal.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let inductors: Vec<&crate::netlist::Component> =
        c.components.iter().filter(|x| x.kind == ComponentKind::Inductor).collect();
    let nv = internal.len();
    let nl = inductors.len();
    let ns = nv + nl;
    let np = c.ports.len();
    let inductor_index: HashMap<String, usize> =
        inductors.iter().enumerate().map(|(i, l)| (l.id.clone(), nv + i)).collect();
    let port_index: HashMap<String, usize> =
        c.ports.iter().enumerate().map(|(i, p)| (p.port_node.clone(), i)).collect();

    let mut m = DMatrix::<f64>::zeros(ns, ns);
    let mut n = DMatrix::<f64>::zeros(ns, ns);
    let mut b = DMatrix::<f64>::zeros(ns, np);
    let mut e = DMatrix::<f64>::zeros(np, np);

    let row_of = |name: &str| -> Option<usize> { node_index.get(name).copied() };
    let port_of = |name: &str| -> Option<usize> { port_index.get(name).copied() };

    for comp in &c.components {
        let a_int = row_of(&comp.node_a);
        let b_int = row_of(&comp.node_b);
        let a_port = port_of(&comp.node_a);
        let b_port = port_of(&comp.node_b);
        match comp.kind {
            ComponentKind::Capacitor => {
                let cv = comp.value;
                match ((a_int, a_port), (b_int, b_port)) {
                    // internal–internal (or internal–ground)
                    ((Some(i), _), (Some(j), _)) => {
                        m[(i, i)] += cv;
                        m[(j, j)] += cv;
                        m[(i, j)] -= cv;
                        m[(j, i)] -= cv;
                    }
                    ((Some(i), _), (None, None)) => m[(i, i)] += cv, // to ground
                    ((None, None), (Some(j), _)) => m[(j, j)] += cv,
                    // coupling capacitor internal–port
                    ((Some(i), _), (None, Some(p))) | ((None, Some(p)), (Some(i), _)) => {
                        m[(i, i)] += cv;
                        b[(i, p)] -= cv;
                        e[(p, p)] += cv;
                    }
                    // port–ground
                    ((None, Some(p)), (None, None)) | ((None, None), (None, Some(p))) => {
                        e[(p, p)] += cv;
                    }
                    // port–port
                    ((None, Some(p)), (None, Some(q))) => {
                        e[(p, p)] += cv;
                        e[(q, q)] += cv;
                        e[(p, q)] -= cv;
                        e[(q, p)] -= cv;
                    }
                    _ => unreachable!("nodes are internal, port, or ground"),
                }
            }
            ComponentKind::Resistor => {
                // Validation guarantees resistors never touch port nodes.
                let g = 1.0 / comp.value;
                match (a_int, b_int) {
                    (Some(i), Some(j)) => {
                        n[(i, i)] += g;
                        n[(j, j)] += g;
                        n[(i, j)] -= g;
                        n[(j, i)] -= g;
                    }
                    (Some(i), None) => n[(i, i)] += g,
                    (None, Some(j)) => n[(j, j)] += g,
                    (None, None) => unreachable!("resistor with both ends grounded"),
                }
            }
            ComponentKind::Inductor => {
                let row = inductor_index[&comp.id];
                m[(row, row)] = comp.value;
                n[(row, row)] = comp.series_resistance.unwrap_or(0.0);
                // Branch current flows node_a → node_b.
                if let Some(i) = a_int {
                    n[(i, row)] += 1.0; // KCL: current leaves node_a
                    n[(row, i)] -= 1.0; // branch: +v_a
                }
                if let Some(j) = b_int {
                    n[(j, row)] -= 1.0;
                    n[(row, j)] += 1.0;
                }
            }
        }
    }

    // C-block rank check (full-rank M precondition). The per-node capacitor
    // check in validation is necessary but not sufficient (e.g. a floating
    // capacitor pair), so verify the block numerically.
    if nv > 0 {
        let cblock = m.view((0, 0), (nv, nv)).into_owned();
        let sym = nalgebra::SymmetricEigen::new(cblock);
        let max_ev = sym.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let mut offending = Vec::new();
        for (k, ev) in sym.eigenvalues.iter().enumerate() {
            if ev.abs() <= 1e-12 * max_ev {
                for i in 0..nv {
                    if sym.eigenvectors[(i, k)].abs() > 0.5 / (nv as f64).sqrt() {
                        offending.push(internal[i].clone());
                    }
                }
            }
        }
        if !offending.is_empty() {
            offending.sort();
            offending.dedup();
            return Err(Error::Validation(format!(
                "capacitance matrix is singular; offending nodes: {{{}}}",
                offending.join(", ")
            )));
        }
    }

    let d = -b.transpose();
    let state_labels = internal
        .iter()
        .map(|x| StateLabel::Voltage(x.clone()))
        .chain(inductors.iter().map(|l| StateLabel::Current(l.id.clone())))
        .collect();
    let port_z0 = c.ports.iter().map(|p| p.z0).collect();

    Ok(StateSpaceModel {
        m,
        n,
        b,
        d,
        e,
        state_labels,
        coupling: Coupling::Derivative,
        port_z0,
        node_index,
        inductor_index,
        port_index,
    })
}

/// Derivative stamp of a single parameter.
pub fn stamp_for(c: &Circuit, ss: &StateSpaceModel, param: &Parameter) -> ParameterStamp {
    let ns = ss.num_states();
    let np = ss.num_ports();
    let mut dm = DMatrix::<f64>::zeros(ns, ns);
    let mut dn = DMatrix::<f64>::zeros(ns, ns);
    let mut db = DMatrix::<f64>::zeros(ns, np);
    let mut de = DMatrix::<f64>::zeros(np, np);

    let comp = &c.components[param.component];
    let a_int = ss.node_index.get(&comp.node_a).copied();
    let b_int = ss.node_index.get(&comp.node_b).copied();
    let a_port = ss.port_index.get(&comp.node_a).copied();
    let b_port = ss.port_index.get(&comp.node_b).copied();

    match (param.kind, comp.kind) {
        (ParamKind::SeriesResistance, _) => {
            let row = ss.inductor_index[&comp.id];
            dn[(row, row)] = 1.0;
        }
        (ParamKind::Value, ComponentKind::Capacitor) => {
            match ((a_int, a_port), (b_int, b_port)) {
                ((Some(i), _), (Some(j), _)) => {
                    dm[(i, i)] += 1.0;
                    dm[(j, j)] += 1.0;
                    dm[(i, j)] -= 1.0;
                    dm[(j, i)] -= 1.0;
                }
                ((Some(i), _), (None, None)) => dm[(i, i)] += 1.0,
                ((None, None), (Some(j), _)) => dm[(j, j)] += 1.0,
                ((Some(i), _), (None, Some(p))) | ((None, Some(p)), (Some(i), _)) => {
                    dm[(i, i)] += 1.0;
                    db[(i, p)] -= 1.0;
                    de[(p, p)] += 1.0;
                }
                ((None, Some(p)), (None, None)) | ((None, None), (None, Some(p))) => {
                    de[(p, p)] += 1.0;
                }
                ((None, Some(p)), (None, Some(q))) => {
                    de[(p, p)] += 1.0;
                    de[(q, q)] += 1.0;
                    de[(p, q)] -= 1.0;
                    de[(q, p)] -= 1.0;
                }
                _ => unreachable!(),
            }
        }
        (ParamKind::Value, ComponentKind::Inductor) => {
            let row = ss.inductor_index[&comp.id];
            dm[(row, row)] = 1.0;
        }
        (ParamKind::Value, ComponentKind::Resistor) => {
            // G = 1/R: exact derivative −1/R² on the conductance pattern.
            let dg = -1.0 / (comp.value * comp.value);
            match (a_int, b_int) {
                (Some(i), Some(j)) => {
                    dn[(i, i)] += dg;
                    dn[(j, j)] += dg;
                    dn[(i, j)] -= dg;
                    dn[(j, i)] -= dg;
                }
                (Some(i), None) => dn[(i, i)] += dg,
                (None, Some(j)) => dn[(j, j)] += dg,
                (None, None) => unreachable!(),
            }
        }
    }

    let dd = -db.transpose();
    ParameterStamp { param: param.clone(), dm, dn, db, dd, de }
}

/// One stamp per parameter, in parameter order.
pub fn build_stamps(c: &Circuit, ss: &StateSpaceModel) -> Vec<ParameterStamp> {
    c.parameters().iter().map(|p| stamp_for(c, ss, p)).collect()
}

/// Direct (non-modal) transfer function at complex frequency `s`.
pub fn direct_transfer(ss: &StateSpaceModel, s: Complex64) -> Result<DMatrix<C64>> {
    let solver = PencilSolve::new(&ss.m, &ss.n, s)?;
    let zb = solver.solve(&complexify(&ss.b));
    let dzb = complexify(&ss.d) * zb;
    let e = complexify(&ss.e);
    Ok(match ss.coupling {
        Coupling::Standard => dzb + e,
        Coupling::Derivative => dzb.map(|x| x * s * s) + e.map(|x| x * s),
    })
}

/// Full-MNA AC oracle: build the complete frequency-domain nodal system
/// (port nodes retained), apply a unit voltage at each port in turn with the
/// others shorted, and read the port currents. No state-space reduction is
/// involved, which makes this an independent check of [`direct_transfer`].
pub fn mna_ac_oracle(c: &Circuit, f_hz: f64) -> Result<DMatrix<C64>> {
    let np = c.ports.len();
    if f_hz == 0.0 {
        // Ports couple through capacitors, which block DC.
        return Ok(DMatrix::zeros(np, np));
    }
    let omega = 2.0 * std::f64::consts::PI * f_hz;
    let jw = C64::new(0.0, omega);

    let port_nodes = c.port_nodes();
    let internal: Vec<String> =
        c.node_order().into_iter().filter(|n| !port_nodes.contains(n)).collect();
    let node_row: HashMap<&str, usize> =
        internal.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let port_col: HashMap<&str, usize> =
        c.ports.iter().enumerate().map(|(i, p)| (p.port_node.as_str(), i)).collect();
    let inductors: Vec<&crate::netlist::Component> =
        c.components.iter().filter(|x| x.kind == ComponentKind::Inductor).collect();
    let nv = internal.len();
    let nl = inductors.len();
    let dim = nv + nl;

    // A_ii x = −A_ip u, with x = [internal voltages; inductor currents].
    let mut a_ii = DMatrix::<C64>::zeros(dim, dim);
    let mut a_ip = DMatrix::<C64>::zeros(dim, np);

    for (li, comp) in inductors.iter().enumerate() {
        let col = nv + li;
        let row = nv + li;
        // Branch: v_a − v_b − (jωL + rs) i = 0.
        a_ii[(row, col)] = -(jw * comp.value + comp.series_resistance.unwrap_or(0.0));
        for (node, sign) in [(&comp.node_a, 1.0), (&comp.node_b, -1.0)] {
            if let Some(&r) = node_row.get(node.as_str()) {
                a_ii[(row, r)] += C64::new(sign, 0.0);
                // KCL: current leaves node_a, enters node_b.
                a_ii[(r, col)] += C64::new(sign, 0.0);
            }
        }
    }

    for comp in &c.components {
        let adm = match comp.kind {
            ComponentKind::Capacitor => jw * comp.value,
            ComponentKind::Resistor => C64::new(1.0 / comp.value, 0.0),
            ComponentKind::Inductor => continue,
        };
        let a_i = node_row.get(comp.node_a.as_str()).copied();
        let b_i = node_row.get(comp.node_b.as_str()).copied();
        let a_p = port_col.get(comp.node_a.as_str()).copied();
        let b_p = port_col.get(comp.node_b.as_str()).copied();
        if let Some(i) = a_i {
            a_ii[(i, i)] += adm;
            match (b_i, b_p) {
                (Some(j), _) => {
                    a_ii[(i, j)] -= adm;
                }
                (None, Some(q)) => a_ip[(i, q)] -= adm,
                (None, None) => {}
            }
        }
        if let Some(j) = b_i {
            a_ii[(j, j)] += adm;
            match (a_i, a_p) {
                (Some(i), _) => {
                    a_ii[(j, i)] -= adm;
                }
                (None, Some(p)) => a_ip[(j, p)] -= adm,
                (None, None) => {}
            }
        }
    }

    // Solve all excitations at once: x_cols = −A_ii⁻¹ A_ip.
    let x = if dim > 0 {
        crate::linalg::solve_complex(&a_ii, &(-&a_ip))
            .map_err(|_| Error::numerical(format!("singular MNA system at f = {f_hz} Hz")))?
    } else {
        DMatrix::zeros(0, np)
    };

    // Port currents: sum of capacitor currents leaving each port node.
    let mut y = DMatrix::<C64>::zeros(np, np);
    for comp in &c.components {
        if comp.kind != ComponentKind::Capacitor {
            continue;
        }
        let adm = jw * comp.value;
        for (this, other) in
            [(&comp.node_a, &comp.node_b), (&comp.node_b, &comp.node_a)]
        {
            if let Some(&p) = port_col.get(this.as_str()) {
                for q in 0..np {
                    let u_this = if p == q { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                    let v_other = if let Some(&r) = node_row.get(other.as_str()) {
                        x[(r, q)]
                    } else if let Some(&pq) = port_col.get(other.as_str()) {
                        if pq == q {
                            C64::new(1.0, 0.0)
                        } else {
                            C64::new(0.0, 0.0)
                        }
                    } else {
                        C64::new(0.0, 0.0) // ground
                    };
                    y[(p, q)] += adm * (u_this - v_other);
                }
            }
        }
    }
    Ok(y)
}

/// Reference model used throughout the test suite: a 1-state RC cell
/// (C = 1 F, R = 1 Ω to ground) with standard unit coupling, so that
/// `H(s) = 1/(1+s)`.
pub fn rc_reference_model() -> StateSpaceModel {
    StateSpaceModel::from_parts(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.0),
        Coupling::Standard,
        vec![1.0],
    )
}

/// Scale vector used when comparing matrices entry-wise in tests.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0_f64, f64::max)
}

/// Euclidean state vector type alias used across modules.
pub type StateVec = DVector<f64>;
