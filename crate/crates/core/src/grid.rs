//! Network data model, case-file parsing and load perturbation.
//!
//! Case files are JSON documents with per-unit quantities. Bus ids in the
//! file may be arbitrary integers; after parsing, buses are addressed by
//! their position in the `buses` array.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CoreError;

const WSCC9: &str = include_str!("../cases/wscc9.json");
const IEEE57: &str = include_str!("../cases/ieee57.json");

/// Names of the cases compiled into the crate.
pub const BUNDLED_CASES: [&str; 2] = ["wscc9", "ieee57"];

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    /// Identifier used in the case file.
    pub id: i64,
    pub v_min: f64,
    pub v_max: f64,
    pub p_load: f64,
    pub q_load: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
    pub angle_limit: f64,
    pub flow_limit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
    pub x_d_prime: f64,
    pub inertia: f64,
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub base_power: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub reference_bus: usize,
}

/// A realised demand vector, one entry per bus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub p_d: Vec<f64>,
    pub q_d: Vec<f64>,
}

impl LoadProfile {
    pub fn len(&self) -> usize {
        self.p_d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_d.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            p_d: self.p_d.iter().map(|v| v * k).collect(),
            q_d: self.q_d.iter().map(|v| v * k).collect(),
        }
    }

    /// Proxy input layout: all active demands followed by all reactive ones.
    pub fn features(&self) -> Vec<f64> {
        self.p_d.iter().chain(&self.q_d).copied().collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    base_mva: f64,
    buses: Vec<BusRecord>,
    lines: Vec<LineRecord>,
    generators: Vec<GenRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusRecord {
    id: i64,
    vmin: f64,
    vmax: f64,
    pd: f64,
    qd: f64,
    #[serde(rename = "ref")]
    reference: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    from: i64,
    to: i64,
    g: f64,
    b: f64,
    angle_limit_rad: f64,
    smax: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenRecord {
    bus: i64,
    pmin: f64,
    pmax: f64,
    qmin: f64,
    qmax: f64,
    c2: f64,
    c1: f64,
    c0: f64,
    xd_prime: f64,
    inertia: f64,
    damping: f64,
}

fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::InvalidCase(msg.into())
}

/// Parses and validates a case document.
pub fn parse_case(text: &str) -> Result<Network, CoreError> {
    let file: CaseFile = serde_json::from_str(text).map_err(|e| CoreError::CaseSyntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    build(file)
}

fn build(file: CaseFile) -> Result<Network, CoreError> {
    if !(file.base_mva > 0.0 && file.base_mva.is_finite()) {
        return Err(invalid("base_mva must be positive"));
    }
    if file.buses.is_empty() {
        return Err(invalid("case has no buses"));
    }
    let mut index = std::collections::HashMap::new();
    for (k, b) in file.buses.iter().enumerate() {
        if index.insert(b.id, k).is_some() {
            return Err(invalid(format!("duplicate bus id {}", b.id)));
        }
    }
    let lookup = |id: i64, what: &str| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| invalid(format!("{what} references unknown bus {id}")))
    };

    let refs: Vec<usize> = file
        .buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.reference)
        .map(|(k, _)| k)
        .collect();
    if refs.len() != 1 {
        return Err(invalid(format!(
            "exactly one reference bus required, found {}",
            refs.len()
        )));
    }

    let mut buses = Vec::with_capacity(file.buses.len());
    for b in &file.buses {
        if !(b.vmin > 0.0 && b.vmin <= b.vmax) {
            return Err(invalid(format!("bus {}: need 0 < vmin <= vmax", b.id)));
        }
        if !(b.pd.is_finite() && b.qd.is_finite()) {
            return Err(invalid(format!("bus {}: non-finite demand", b.id)));
        }
        buses.push(Bus {
            id: b.id,
            v_min: b.vmin,
            v_max: b.vmax,
            p_load: b.pd,
            q_load: b.qd,
        });
    }

    let mut lines = Vec::with_capacity(file.lines.len());
    for (k, l) in file.lines.iter().enumerate() {
        let from = lookup(l.from, &format!("line {k}"))?;
        let to = lookup(l.to, &format!("line {k}"))?;
        if from == to {
            return Err(invalid(format!("line {k} is a self-loop")));
        }
        if !(l.angle_limit_rad > 0.0) {
            return Err(invalid(format!("line {k}: angle limit must be positive")));
        }
        if !(l.smax > 0.0) {
            return Err(invalid(format!("line {k}: flow limit must be positive")));
        }
        if l.g == 0.0 && l.b == 0.0 || !(l.g.is_finite() && l.b.is_finite()) {
            return Err(invalid(format!("line {k}: admittance must be finite and nonzero")));
        }
        lines.push(Line {
            from,
            to,
            g: l.g,
            b: l.b,
            angle_limit: l.angle_limit_rad,
            flow_limit: l.smax,
        });
    }

    let mut generators = Vec::with_capacity(file.generators.len());
    let mut seen = std::collections::HashSet::new();
    for (k, g) in file.generators.iter().enumerate() {
        let bus = lookup(g.bus, &format!("generator {k}"))?;
        if !seen.insert(bus) {
            return Err(invalid(format!("bus {} hosts more than one generator", g.bus)));
        }
        let checks = [
            (g.pmin <= g.pmax, "pmin <= pmax"),
            (g.qmin <= g.qmax, "qmin <= qmax"),
            (g.c2 >= 0.0, "c2 >= 0"),
            (g.xd_prime > 0.0, "xd_prime > 0"),
            (g.inertia > 0.0, "inertia > 0"),
            (g.damping >= 0.0, "damping >= 0"),
        ];
        for (ok, rule) in checks {
            if !ok {
                return Err(invalid(format!("generator {k}: violates {rule}")));
            }
        }
        generators.push(Generator {
            bus,
            p_min: g.pmin,
            p_max: g.pmax,
            q_min: g.qmin,
            q_max: g.qmax,
            c2: g.c2,
            c1: g.c1,
            c0: g.c0,
            x_d_prime: g.xd_prime,
            inertia: g.inertia,
            damping: g.damping,
        });
    }
    if generators.is_empty() {
        return Err(invalid("case has no generators"));
    }

    Ok(Network {
        base_power: file.base_mva,
        buses,
        lines,
        generators,
        reference_bus: refs[0],
    })
}

/// Loads one of [`BUNDLED_CASES`].
pub fn bundled(name: &str) -> Result<Network, CoreError> {
    match name {
        "wscc9" => parse_case(WSCC9),
        "ieee57" => parse_case(IEEE57),
        other => Err(CoreError::UnknownCase(other.to_string())),
    }
}

/// Resolves a bundled case name or a path to a case file.
pub fn load_case(name_or_path: &str) -> Result<Network, CoreError> {
    if BUNDLED_CASES.contains(&name_or_path) {
        return bundled(name_or_path);
    }
    let text = std::fs::read_to_string(name_or_path)?;
    parse_case(&text)
}

impl Network {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_line(&self) -> usize {
        self.lines.len()
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn nominal_load(&self) -> LoadProfile {
        LoadProfile {
            p_d: self.buses.iter().map(|b| b.p_load).collect(),
            q_d: self.buses.iter().map(|b| b.q_load).collect(),
        }
    }

    /// Serialises back to the case schema.
    pub fn to_case_json(&self) -> String {
        let id = |k: usize| self.buses[k].id;
        let file = CaseFile {
            base_mva: self.base_power,
            buses: self
                .buses
                .iter()
                .enumerate()
                .map(|(k, b)| BusRecord {
                    id: b.id,
                    vmin: b.v_min,
                    vmax: b.v_max,
                    pd: b.p_load,
                    qd: b.q_load,
                    reference: k == self.reference_bus,
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: id(l.from),
                    to: id(l.to),
                    g: l.g,
                    b: l.b,
                    angle_limit_rad: l.angle_limit,
                    smax: l.flow_limit,
                })
                .collect(),
            generators: self
                .generators
                .iter()
                .map(|g| GenRecord {
                    bus: id(g.bus),
                    pmin: g.p_min,
                    pmax: g.p_max,
                    qmin: g.q_min,
                    qmax: g.q_max,
                    c2: g.c2,
                    c1: g.c1,
                    c0: g.c0,
                    xd_prime: g.x_d_prime,
                    inertia: g.inertia,
                    damping: g.damping,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("case records always serialise")
    }

    /// Hex SHA-256 of the canonical serialisation; identifies the network in
    /// dataset manifests.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_case_json().as_bytes()))
    }

    /// Largest angle-difference limit over all lines.
    pub fn max_angle_limit(&self) -> f64 {
        self.lines.iter().map(|l| l.angle_limit).fold(0.0, f64::max)
    }
}

/// Scales every demand component by an independent factor drawn uniformly
/// from `[1 - fraction, 1 + fraction]`.
pub fn perturb_loads(net: &Network, fraction: f64, seed: u64) -> Result<LoadProfile, CoreError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CoreError::InvalidArgument(format!(
            "perturbation fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |nominal: f64| {
        let u: f64 = rng.gen();
        nominal * (1.0 - fraction + 2.0 * fraction * u)
    };
    let mut p_d = Vec::with_capacity(net.n_bus());
    let mut q_d = Vec::with_capacity(net.n_bus());
    for b in &net.buses {
        p_d.push(draw(b.p_load));
        q_d.push(draw(b.q_load));
    }
    Ok(LoadProfile { p_d, q_d })
}
