//! Netlist front end: parsing, serialization and structural validation.
//!
//! The input format is a small line-oriented netlist dialect:
//!
//! ```text
//! .title two-channel matching network
//! # component := ID nodeA nodeB VALUE [rs=VALUE]   (ID starts with R|L|C)
//! C0 n1 n3 3.47pF
//! Lcoil n1 n3 150nH rs=0.47
//! .port p1 1 p1 Z0=50
//! ```
//!
//! Values are decimals with an optional case-sensitive SI suffix
//! (`f p n u m k M G`); a trailing unit letter (`F`/`H`) is accepted and
//! ignored. Ground is the literal node `0`. Ports must attach to the network
//! exclusively through capacitors (capacitive-coupling rule); everything else
//! is flagged by [`validate_circuit`].

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};

/// Kind of a two-terminal element, fixed by the first letter of its id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ComponentKind {
    Resistor,
    Inductor,
    Capacitor,
}

impl ComponentKind {
    /// SI unit of the component value.
    pub fn unit(self) -> &'static str {
        match self {
            ComponentKind::Resistor => "Ohm",
            ComponentKind::Inductor => "H",
            ComponentKind::Capacitor => "F",
        }
    }
}

/// A two-terminal R, L or C element.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    /// Unique id; the first letter (R/L/C) fixes [`ComponentKind`].
    pub id: String,
    pub kind: ComponentKind,
    pub node_a: String,
    pub node_b: String,
    /// Element value in SI base units (ohms, henries, farads). Positive.
    pub value: f64,
    /// Optional series resistance in ohms (inductors only, nonnegative).
    pub series_resistance: Option<f64>,
}

/// A port declaration: the port node couples to the network through
/// capacitors only and is driven against ground.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortDecl {
    pub name: String,
    /// 1-based port number; indices are contiguous and unique.
    pub index: usize,
    pub port_node: String,
    /// Characteristic reference impedance in ohms.
    pub z0: f64,
}

/// Which field of a component a parameter refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamKind {
    Value,
    SeriesResistance,
}

/// One tunable circuit parameter (a component value or a series resistance).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Parameter {
    /// Display id: the component id, or `<id>.rs` for a series resistance.
    pub id: String,
    /// Index into [`Circuit::components`].
    pub component: usize,
    pub kind: ParamKind,
    /// Nominal value in SI base units.
    pub nominal: f64,
    /// SI unit string ("F", "H" or "Ohm").
    pub unit: &'static str,
}

/// Parsed circuit: components, ports and the derived parameter list.
///
/// Immutable by convention after parsing; perturbation helpers return
/// modified clones so that parameter ordering (declaration order) is stable
/// across runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Circuit {
    pub title: Option<String>,
    pub components: Vec<Component>,
    pub ports: Vec<PortDecl>,
}

/// A single structural violation found by [`validate_circuit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    /// A non-capacitor element touches a port node.
    NonCapacitivePort { port: String, element: String },
    /// A node has no capacitor attached at all: the capacitance matrix
    /// would be structurally singular.
    NoCapacitivePath { node: String },
    /// The node graph (ignoring ground) splits into disconnected parts;
    /// the smaller part is listed.
    Disconnected { nodes: Vec<String> },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NonCapacitivePort { port, element } => write!(
                f,
                "port node '{port}' is attached to non-capacitive element '{element}' \
                 (ports must couple through capacitors only)"
            ),
            Violation::NoCapacitivePath { node } => write!(
                f,
                "node '{node}' has no capacitor attached (singular capacitance matrix)"
            ),
            Violation::Disconnected { nodes } => {
                write!(f, "disconnected subcircuit on nodes {{{}}}", nodes.join(", "))
            }
        }
    }
}

/// Outcome of [`validate_circuit`]: empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_valid() {
            writeln!(f, "circuit is valid")
        } else {
            for v in &self.violations {
                writeln!(f, "violation: {v}")?;
            }
            Ok(())
        }
    }
}

const GROUND: &str = "0";

/// Parse a numeric value with optional SI suffix and optional trailing
/// unit letter (F or H), e.g. `3.47pF`, `150nH`, `0.47`, `50`.
fn parse_value(tok: &str, line: usize) -> Result<f64> {
    // Longest prefix that parses as f64; the remainder must be
    // [SI suffix][F|H].
    let mut split = tok.len();
    while split > 0 {
        if tok[..split].parse::<f64>().is_ok() {
            break;
        }
        split -= 1;
    }
    if split == 0 {
        return Err(Error::parse(line, format!("malformed number '{tok}'")));
    }
    let digits = &tok[..split];
    let mut rest = &tok[split..];
    let mut exp10: i32 = 0;
    if !rest.is_empty() {
        // SI suffixes are case-sensitive: m (milli) vs M (mega).
        let suffix = rest.chars().next().unwrap();
        let e = match suffix {
            'f' => Some(-15),
            'p' => Some(-12),
            'n' => Some(-9),
            'u' => Some(-6),
            'm' => Some(-3),
            'k' => Some(3),
            'M' => Some(6),
            'G' => Some(9),
            _ => None,
        };
        if let Some(e) = e {
            exp10 = e;
            rest = &rest[suffix.len_utf8()..];
        }
    }
    if !(rest.is_empty() || rest == "F" || rest == "H") {
        return Err(Error::parse(line, format!("malformed number '{tok}'")));
    }
    if exp10 == 0 {
        return Ok(digits.parse().unwrap());
    }
    // Splice the suffix exponent into the literal so decimal→binary
    // conversion rounds once ("3.47pF" parses exactly as "3.47e-12").
    match format!("{digits}e{exp10}").parse::<f64>() {
        Ok(v) => Ok(v),
        // The literal already carried an exponent; scale instead.
        Err(_) => Ok(digits.parse::<f64>().unwrap() * 10f64.powi(exp10)),
    }
}

/// Parse netlist text into a [`Circuit`]; all values converted to SI units.
pub fn parse_netlist(text: &str) -> Result<Circuit> {
    let mut title = None;
    let mut components: Vec<Component> = Vec::new();
    let mut ports: Vec<PortDecl> = Vec::new();
    let mut ids = HashSet::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let trimmed = stripped.trim();
        if trimmed.is_empty() {
            continue;
        }

        if let Some(rest) = trimmed.strip_prefix(".title") {
            title = Some(rest.trim().to_string());
            continue;
        }

        if let Some(rest) = trimmed.strip_prefix(".port") {
            let toks: Vec<&str> = rest.split_whitespace().collect();
            // Accept both "Z0=50" and "Z0= 50".
            let z0_tok = match toks.len() {
                4 => toks[3]
                    .strip_prefix("Z0=")
                    .ok_or_else(|| Error::parse(line, "expected Z0=VALUE"))?,
                5 if toks[3] == "Z0=" => toks[4],
                _ => return Err(Error::parse(line, ".port expects: NAME INDEX node Z0=VALUE")),
            };
            let name = toks[0].to_string();
            let index: usize = toks[1]
                .parse()
                .map_err(|_| Error::parse(line, format!("malformed port index '{}'", toks[1])))?;
            let port_node = toks[2].to_string();
            let z0 = parse_value(z0_tok, line)?;
            if z0 <= 0.0 {
                return Err(Error::parse(line, "port impedance must be positive"));
            }
            if ports.iter().any(|p| p.name == name) {
                return Err(Error::parse(line, format!("duplicate port name '{name}'")));
            }
            if port_node == GROUND {
                return Err(Error::parse(line, "port node cannot be ground"));
            }
            ports.push(PortDecl { name, index, port_node, z0 });
            continue;
        }

        if trimmed.starts_with('.') {
            return Err(Error::parse(line, format!("unknown directive '{trimmed}'")));
        }

        // Component line: ID nodeA nodeB VALUE [rs=VALUE]
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if !(toks.len() == 4 || toks.len() == 5) {
            return Err(Error::parse(line, "component expects: ID nodeA nodeB VALUE [rs=VALUE]"));
        }
        let id = toks[0].to_string();
        let kind = match id.chars().next() {
            Some('R') => ComponentKind::Resistor,
            Some('L') => ComponentKind::Inductor,
            Some('C') => ComponentKind::Capacitor,
            _ => {
                return Err(Error::parse(
                    line,
                    format!("component id '{id}' must start with R, L or C"),
                ))
            }
        };
        if !ids.insert(id.clone()) {
            return Err(Error::parse(line, format!("duplicate component id '{id}'")));
        }
        let node_a = toks[1].to_string();
        let node_b = toks[2].to_string();
        if node_a == node_b {
            return Err(Error::parse(line, format!("'{id}' connects node '{node_a}' to itself")));
        }
        let value = parse_value(toks[3], line)?;
        if value <= 0.0 {
            return Err(Error::parse(line, format!("'{id}' has non-positive value")));
        }
        let mut series_resistance = None;
        if toks.len() == 5 {
            let rs_tok = toks[4]
                .strip_prefix("rs=")
                .ok_or_else(|| Error::parse(line, format!("unexpected token '{}'", toks[4])))?;
            if kind != ComponentKind::Inductor {
                return Err(Error::parse(line, "rs= is only allowed on inductors"));
            }
            let rs = parse_value(rs_tok, line)?;
            if rs < 0.0 {
                return Err(Error::parse(line, "series resistance must be nonnegative"));
            }
            series_resistance = Some(rs);
        }
        components.push(Component { id, kind, node_a, node_b, value, series_resistance });
    }

    if components.is_empty() {
        return Err(Error::parse(0, "no components"));
    }

    // Port indices must be 1..P, contiguous and unique.
    if !ports.is_empty() {
        let mut idx: Vec<usize> = ports.iter().map(|p| p.index).collect();
        idx.sort_unstable();
        if idx != (1..=ports.len()).collect::<Vec<_>>() {
            return Err(Error::parse(
                0,
                format!("port indices must be 1..{} contiguous and unique, got {idx:?}", ports.len()),
            ));
        }
    }
    // Port nodes must exist in the component graph.
    let known: HashSet<&str> = components
        .iter()
        .flat_map(|c| [c.node_a.as_str(), c.node_b.as_str()])
        .collect();
    for p in &ports {
        if !known.contains(p.port_node.as_str()) {
            return Err(Error::parse(
                0,
                format!("port '{}' references unknown node '{}'", p.name, p.port_node),
            ));
        }
    }
    // Keep declaration order but index ports by their 1-based number.
    ports.sort_by_key(|p| p.index);

    Ok(Circuit { title, components, ports })
}

impl Circuit {
    /// Parse netlist text (see module docs for the grammar).
    pub fn parse(text: &str) -> Result<Self> {
        parse_netlist(text)
    }

    /// Serialize back to netlist text; re-parsing yields an identical circuit.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        if let Some(t) = &self.title {
            out.push_str(&format!(".title {t}\n"));
        }
        for c in &self.components {
            // `{}` prints the shortest string that round-trips the f64.
            out.push_str(&format!("{} {} {} {}", c.id, c.node_a, c.node_b, c.value));
            if let Some(rs) = c.series_resistance {
                out.push_str(&format!(" rs={rs}"));
            }
            out.push('\n');
        }
        for p in &self.ports {
            out.push_str(&format!(".port {} {} {} Z0={}\n", p.name, p.index, p.port_node, p.z0));
        }
        out
    }

    /// All non-ground nodes in first-appearance order (component list order).
    pub fn node_order(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        for c in &self.components {
            for n in [&c.node_a, &c.node_b] {
                if n != GROUND && seen.insert(n.clone()) {
                    order.push(n.clone());
                }
            }
        }
        order
    }

    /// Set of port nodes.
    pub fn port_nodes(&self) -> HashSet<String> {
        self.ports.iter().map(|p| p.port_node.clone()).collect()
    }

    /// Derived parameter list: one per component value in declaration order,
    /// with a `<id>.rs` parameter directly after each inductor that has a
    /// series resistance.
    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        for (i, c) in self.components.iter().enumerate() {
            out.push(Parameter {
                id: c.id.clone(),
                component: i,
                kind: ParamKind::Value,
                nominal: c.value,
                unit: c.kind.unit(),
            });
            if c.series_resistance.is_some() {
                out.push(Parameter {
                    id: format!("{}.rs", c.id),
                    component: i,
                    kind: ParamKind::SeriesResistance,
                    nominal: c.series_resistance.unwrap(),
                    unit: "Ohm",
                });
            }
        }
        out
    }

    /// Current value of parameter `k` (indexing [`Circuit::parameters`]).
    pub fn param_value(&self, k: usize) -> f64 {
        let p = &self.parameters()[k];
        match p.kind {
            ParamKind::Value => self.components[p.component].value,
            ParamKind::SeriesResistance => self.components[p.component].series_resistance.unwrap(),
        }
    }

    /// Return a clone with parameter `k` set to `value`.
    pub fn with_param(&self, k: usize, value: f64) -> Circuit {
        let p = &self.parameters()[k];
        let mut c = self.clone();
        match p.kind {
            ParamKind::Value => c.components[p.component].value = value,
            ParamKind::SeriesResistance => {
                c.components[p.component].series_resistance = Some(value)
            }
        }
        c
    }

    /// A copy with every parameter replaced at once, `values` in
    /// [`Self::parameters`] order.
    pub fn with_values(&self, values: &[f64]) -> Circuit {
        let params = self.parameters();
        assert_eq!(values.len(), params.len(), "one value per parameter");
        let mut c = self.clone();
        for (p, &v) in params.iter().zip(values) {
            match p.kind {
                ParamKind::Value => c.components[p.component].value = v,
                ParamKind::SeriesResistance => {
                    c.components[p.component].series_resistance = Some(v)
                }
            }
        }
        c
    }

    /// Structural validation; see [`validate_circuit`].
    pub fn validate(&self) -> ValidationReport {
        validate_circuit(self)
    }
}

/// Check the structural preconditions of the state-space form:
/// (a) ports couple through capacitors only, (b) every node carries at least
/// one capacitor (capacitance-matrix rank), (c) the node graph (ignoring
/// ground) is connected.
pub fn validate_circuit(c: &Circuit) -> ValidationReport {
    let mut violations = Vec::new();
    let port_nodes = c.port_nodes();

    // (a) non-capacitive port attachments.
    for comp in &c.components {
        if comp.kind != ComponentKind::Capacitor {
            for n in [&comp.node_a, &comp.node_b] {
                if port_nodes.contains(n) {
                    violations.push(Violation::NonCapacitivePort {
                        port: n.clone(),
                        element: comp.id.clone(),
                    });
                }
            }
        }
    }

    // (b) nodes with no capacitive attachment.
    let mut has_cap: BTreeMap<String, bool> = BTreeMap::new();
    for comp in &c.components {
        for n in [&comp.node_a, &comp.node_b] {
            if n != GROUND {
                let e = has_cap.entry(n.clone()).or_insert(false);
                *e |= comp.kind == ComponentKind::Capacitor;
            }
        }
    }
    for (node, ok) in &has_cap {
        if !ok {
            violations.push(Violation::NoCapacitivePath { node: node.clone() });
        }
    }

    // (c) connectivity of the node graph, ignoring ground.
    let nodes = c.node_order();
    if !nodes.is_empty() {
        let index: HashMap<&str, usize> =
            nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut dsu: Vec<usize> = (0..nodes.len()).collect();
        fn find(dsu: &mut Vec<usize>, i: usize) -> usize {
            if dsu[i] != i {
                let r = find(dsu, dsu[i]);
                dsu[i] = r;
            }
            dsu[i]
        }
        for comp in &c.components {
            if comp.node_a != GROUND && comp.node_b != GROUND {
                let (a, b) = (index[comp.node_a.as_str()], index[comp.node_b.as_str()]);
                let (ra, rb) = (find(&mut dsu, a), find(&mut dsu, b));
                if ra != rb {
                    dsu[ra] = rb;
                }
            }
        }
        let mut classes: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            classes.entry(find(&mut dsu, i)).or_default().push(n.clone());
        }
        if classes.len() > 1 {
            // Report every class but the largest.
            let mut groups: Vec<Vec<String>> = classes.into_values().collect();
            groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
            for g in groups.into_iter().skip(1) {
                violations.push(Violation::Disconnected { nodes: g });
            }
        }
    }

    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_si_suffixes_and_unit_letters() {
        let c = parse_netlist("C0 n1 n3 3.47pF\n").unwrap();
        assert_eq!(c.components[0].kind, ComponentKind::Capacitor);
        assert_eq!(c.components[0].node_a, "n1");
        assert_eq!(c.components[0].node_b, "n3");
        assert_eq!(c.components[0].value, 3.47e-12);

        let c = parse_netlist("Lcoil n1 n3 150nH rs=0.47\n").unwrap();
        assert_eq!(c.components[0].kind, ComponentKind::Inductor);
        assert_eq!(c.components[0].value, 1.5e-7);
        assert_eq!(c.components[0].series_resistance, Some(0.47));
    }

    #[test]
    fn suffix_case_sensitivity() {
        let c = parse_netlist("R1 a 0 2m\nR2 a 0 2M\nR3 a 0 3k\nR4 a 0 4G\nC1 a 0 1f\n").unwrap();
        let vals: Vec<f64> = c.components.iter().map(|x| x.value).collect();
        assert_eq!(vals, vec![2e-3, 2e6, 3e3, 4e9, 1e-15]);
    }

    #[test]
    fn rejects_empty_input() {
        let err = parse_netlist("# only a comment\n").unwrap_err();
        assert!(err.to_string().contains("no components"), "{err}");
    }

    #[test]
    fn rejects_bad_prefix_and_duplicates() {
        assert!(parse_netlist("X1 a b 1\n").is_err());
        assert!(parse_netlist("C1 a b 1\nC1 b c 1\n").is_err());
        assert!(parse_netlist("C1 a a 1\n").is_err());
        assert!(parse_netlist("C1 a b -1\n").is_err());
        assert!(parse_netlist("C1 a b 1 rs=0.5\n").is_err()); // rs on capacitor
        assert!(parse_netlist("C1 a b 1\n.port p1 1 zz Z0=50\n").is_err()); // unknown node
    }

    #[test]
    fn parse_error_reports_line_number() {
        let err = parse_netlist("C1 a b 1\nC2 b c oops\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn port_declaration_roundtrip() {
        let text = "C1 n1 p1 1pF\n.port p1 1 p1 Z0=50\n";
        let c = parse_netlist(text).unwrap();
        assert_eq!(c.ports.len(), 1);
        assert_eq!(c.ports[0].z0, 50.0);
        let c2 = parse_netlist(&c.serialize()).unwrap();
        assert_eq!(c, c2);
    }

    #[test]
    fn parameters_follow_declaration_order() {
        let text = "C0 n1 0 1pF\nLcoil n1 0 1nH rs=0.5\nC1 n1 0 2pF\n";
        let c = parse_netlist(text).unwrap();
        let ids: Vec<String> = c.parameters().into_iter().map(|p| p.id).collect();
        assert_eq!(ids, vec!["C0", "Lcoil", "Lcoil.rs", "C1"]);
    }

    #[test]
    fn validation_flags() {
        // Port with a resistor attached.
        let c = parse_netlist("C1 n1 p1 1pF\nR1 p1 0 50\n.port p1 1 p1 Z0=50\n").unwrap();
        let rep = c.validate();
        assert!(rep
            .violations
            .iter()
            .any(|v| matches!(v, Violation::NonCapacitivePort { .. })));

        // Node touching only inductors.
        let c = parse_netlist("C1 n1 0 1pF\nL1 n1 n2 1nH\nL2 n2 0 1nH\n").unwrap();
        let rep = c.validate();
        assert!(rep
            .violations
            .iter()
            .any(|v| matches!(v, Violation::NoCapacitivePath { node } if node == "n2")));

        // Two islands joined only through ground.
        let c = parse_netlist("C1 n1 0 1pF\nR1 n1 0 1\nC2 n2 0 1pF\nR2 n2 0 1\n").unwrap();
        let rep = c.validate();
        assert!(rep
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Disconnected { .. })));
    }

    #[test]
    fn with_param_perturbs_one_field() {
        let c = parse_netlist("C0 n1 0 1pF\nLcoil n1 0 1nH rs=0.5\n").unwrap();
        let c2 = c.with_param(2, 0.75);
        assert_eq!(c2.components[1].series_resistance, Some(0.75));
        assert_eq!(c2.components[1].value, 1e-9);
        assert_eq!(c.components[1].series_resistance, Some(0.5));
    }
}
