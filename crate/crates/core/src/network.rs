//! Radial multilevel network: node and line parameters, the seeded
//! multilevel builder, static validation and bottom-up demand aggregation.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};

/// Active power breakdown at a bus (pu). Net injection is supply minus load.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivePower {
    pub sol: f64,
    pub wind: f64,
    pub bm: f64,
    pub nuclear: f64,
    pub load: f64,
}

impl ActivePower {
    pub fn net(&self) -> f64 {
        self.sol + self.wind + self.bm + self.nuclear - self.load
    }

    /// Breakdown carrying a given net value: surplus as solar, deficit as load.
    pub fn from_net(p: f64) -> Self {
        if p >= 0.0 {
            ActivePower {
                sol: p,
                ..Default::default()
            }
        } else {
            ActivePower {
                load: -p,
                ..Default::default()
            }
        }
    }
}

/// Reactive power breakdown at a bus (pu).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReactivePower {
    pub sol: f64,
    pub wind: f64,
    pub bm: f64,
    pub load: f64,
}

impl ReactivePower {
    pub fn net(&self) -> f64 {
        self.sol + self.wind + self.bm - self.load
    }

    pub fn from_net(q: f64) -> Self {
        if q >= 0.0 {
            ReactivePower {
                bm: q,
                ..Default::default()
            }
        } else {
            ReactivePower {
                load: -q,
                ..Default::default()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub id: usize,
    pub level: u8,
    /// inertia
    pub m: f64,
    /// frequency damping
    pub d: f64,
    /// voltage time constant
    pub tau: f64,
    /// voltage damping
    pub k: f64,
    pub p: ActivePower,
    pub q: ReactivePower,
}

impl NodeParams {
    /// Node with unit dynamics parameters and the given net injections.
    pub fn toy(id: usize, level: u8, p_inj: f64, q_inj: f64) -> Self {
        NodeParams {
            id,
            level,
            m: 1.0,
            d: 1.0,
            tau: 1.0,
            k: 1.0,
            p: ActivePower::from_net(p_inj),
            q: ReactivePower::from_net(q_inj),
        }
    }

    pub fn p_inj(&self) -> f64 {
        self.p.net()
    }

    pub fn q_inj(&self) -> f64 {
        self.q.net()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    /// Higher-level endpoint (parent in the radial tree).
    pub from: usize,
    pub to: usize,
    /// susceptance
    pub b: f64,
    /// conductance
    #[serde(default)]
    pub g: f64,
}

impl LineParams {
    pub fn lossless(from: usize, to: usize, b: f64) -> Self {
        LineParams {
            from,
            to,
            b,
            g: 0.0,
        }
    }

    pub fn other(&self, node: usize) -> usize {
        if self.from == node {
            self.to
        } else {
            self.from
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub node: usize,
    pub line: usize,
}

/// On-disk form of a graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    reference: usize,
    nodes: Vec<NodeParams>,
    lines: Vec<LineParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphDocument", into = "GraphDocument")]
pub struct NetworkGraph {
    nodes: Vec<NodeParams>,
    lines: Vec<LineParams>,
    reference: usize,
    seed: Option<u64>,
    level_sets: BTreeMap<u8, Vec<usize>>,
    adjacency: Vec<Vec<Neighbor>>,
}

impl TryFrom<GraphDocument> for NetworkGraph {
    type Error = GridError;
    fn try_from(doc: GraphDocument) -> Result<Self> {
        let mut g = NetworkGraph::new(doc.nodes, doc.lines, doc.reference)?;
        g.seed = doc.seed;
        Ok(g)
    }
}

impl From<NetworkGraph> for GraphDocument {
    fn from(g: NetworkGraph) -> Self {
        GraphDocument {
            seed: g.seed,
            reference: g.reference,
            nodes: g.nodes,
            lines: g.lines,
        }
    }
}

impl NetworkGraph {
    /// Assemble a graph. Node ids must be dense `0..n` in order and every line
    /// must join two distinct existing nodes; tree structure and physical
    /// positivity are checked separately by [`validate_static`].
    pub fn new(nodes: Vec<NodeParams>, lines: Vec<LineParams>, reference: usize) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(GridError::Config("graph has no nodes".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(GridError::Config(format!(
                    "node at position {i} has id {}",
                    node.id
                )));
            }
            if node.level > 5 {
                return Err(GridError::Config(format!(
                    "node {i} has level {} outside 0..=5",
                    node.level
                )));
            }
        }
        if reference >= n {
            return Err(GridError::Config(format!(
                "reference {reference} is not a node"
            )));
        }
        let mut adjacency = vec![Vec::new(); n];
        for (l, line) in lines.iter().enumerate() {
            if line.from >= n || line.to >= n || line.from == line.to {
                return Err(GridError::Config(format!(
                    "line {l} joins invalid endpoints {}-{}",
                    line.from, line.to
                )));
            }
            adjacency[line.from].push(Neighbor {
                node: line.to,
                line: l,
            });
            adjacency[line.to].push(Neighbor {
                node: line.from,
                line: l,
            });
        }
        let mut level_sets: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for node in &nodes {
            level_sets.entry(node.level).or_default().push(node.id);
        }
        Ok(NetworkGraph {
            nodes,
            lines,
            reference,
            seed: None,
            level_sets,
            adjacency,
        })
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[NodeParams] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeParams {
        &self.nodes[i]
    }

    pub fn lines(&self) -> &[LineParams] {
        &self.lines
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn level_sets(&self) -> &BTreeMap<u8, Vec<usize>> {
        &self.level_sets
    }

    pub fn neighbors(&self, i: usize) -> &[Neighbor] {
        &self.adjacency[i]
    }

    /// Built by [`build_multilevel`] (carries its seed).
    pub fn is_multilevel(&self) -> bool {
        self.seed.is_some()
    }

    pub fn p_inj(&self) -> Vec<f64> {
        self.nodes.iter().map(NodeParams::p_inj).collect()
    }

    pub fn q_inj(&self) -> Vec<f64> {
        self.nodes.iter().map(NodeParams::q_inj).collect()
    }

    /// Highest-level node (lowest id on ties); the root of the radial tree.
    pub fn root(&self) -> usize {
        self.nodes
            .iter()
            .max_by(|a, b| a.level.cmp(&b.level).then(b.id.cmp(&a.id)))
            .map(|n| n.id)
            .unwrap_or(0)
    }

    /// Copy with every line susceptance and conductance multiplied by `factor`.
    pub fn with_scaled_lines(&self, factor: f64) -> Self {
        let mut g = self.clone();
        for line in &mut g.lines {
            line.b *= factor;
            line.g *= factor;
        }
        g
    }

    pub fn with_reference(&self, reference: usize) -> Result<Self> {
        if reference >= self.n() {
            return Err(GridError::Config(format!(
                "reference {reference} is not a node"
            )));
        }
        let mut g = self.clone();
        g.reference = reference;
        Ok(g)
    }

    /// Replace a node's parameters (id and adjacency are kept).
    pub fn with_node(&self, node: NodeParams) -> Result<Self> {
        if node.id >= self.n() {
            return Err(GridError::Config(format!(
                "node {} is not in the graph",
                node.id
            )));
        }
        let mut nodes = self.nodes.clone();
        let id = node.id;
        nodes[id] = node;
        let mut g = NetworkGraph::new(nodes, self.lines.clone(), self.reference)?;
        g.seed = self.seed;
        Ok(g)
    }

    pub fn with_line(&self, index: usize, line: LineParams) -> Result<Self> {
        if index >= self.lines.len() {
            return Err(GridError::Config(format!(
                "line {index} is not in the graph"
            )));
        }
        let mut lines = self.lines.clone();
        lines[index] = line;
        let mut g = NetworkGraph::new(self.nodes.clone(), lines, self.reference)?;
        g.seed = self.seed;
        Ok(g)
    }

    /// Breadth-first order from the root together with each node's parent.
    /// Fails unless the lines form a spanning tree.
    pub fn tree_order(&self) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        let n = self.n();
        if self.lines.len() + 1 != n {
            return Err(GridError::Config(format!(
                "{} lines cannot form a tree on {n} nodes",
                self.lines.len()
            )));
        }
        let root = self.root();
        let mut parent = vec![None; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for nb in &self.adjacency[i] {
                if !seen[nb.node] {
                    seen[nb.node] = true;
                    parent[nb.node] = Some(i);
                    queue.push_back(nb.node);
                }
            }
        }
        if order.len() != n {
            return Err(GridError::Config("network is not connected".into()));
        }
        Ok((order, parent))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        ParamRange { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn check(&self, name: &str, positive: bool) -> Result<()> {
        let ok_lo = if positive {
            self.lo > 0.0
        } else {
            self.lo >= 0.0
        };
        if !ok_lo || !self.lo.is_finite() || !self.hi.is_finite() || self.hi < self.lo {
            let bound = if positive {
                "0 < lo <= hi"
            } else {
                "0 <= lo <= hi"
            };
            return Err(GridError::Config(format!(
                "range {name} = [{}, {}] violates {bound}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Dynamics parameter ranges for one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub m: ParamRange,
    pub d: ParamRange,
    pub tau: ParamRange,
    pub k: ParamRange,
}

impl LevelParams {
    const fn new(m: (f64, f64), k: (f64, f64)) -> Self {
        LevelParams {
            m: ParamRange::new(m.0, m.1),
            d: ParamRange::new(1.0, 3.0),
            tau: ParamRange::new(0.5, 2.0),
            k: ParamRange::new(k.0, k.1),
        }
    }
}

/// Parameters of the seeded multilevel builder.
///
/// The numeric defaults are modelling choices, not measured values. The
/// voltage damping `k` of each level sits above twice the susceptance a bus
/// of that level typically carries, which keeps the voltage block of the
/// energy Hessian positive definite; injections are kept small so that angle
/// differences stay small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultilevelConfig {
    pub level5_count: usize,
    pub level4_count: usize,
    pub level3_count: usize,
    pub level5: LevelParams,
    pub level4: LevelParams,
    pub level3: LevelParams,
    /// susceptance of the Level 5–4 lines
    pub b_upper: ParamRange,
    /// susceptance of the Level 4–3 lines
    pub b_lower: ParamRange,
    /// Range for each of the solar, wind and biomass active supplies.
    pub p_source: ParamRange,
    pub p_load: ParamRange,
    /// Range for each of the solar and wind reactive supplies.
    pub q_source: ParamRange,
    pub q_load: ParamRange,
    pub seed: u64,
}

impl Default for MultilevelConfig {
    fn default() -> Self {
        MultilevelConfig {
            level5_count: 1,
            level4_count: 10,
            level3_count: 100,
            level5: LevelParams::new((8.0, 12.0), (270.0, 330.0)),
            level4: LevelParams::new((3.0, 5.0), (180.0, 220.0)),
            level3: LevelParams::new((0.5, 1.5), (18.0, 22.0)),
            b_upper: ParamRange::new(5.0, 15.0),
            b_lower: ParamRange::new(2.5, 7.5),
            p_source: ParamRange::new(0.0, 2e-4),
            p_load: ParamRange::new(4e-4, 8e-4),
            q_source: ParamRange::new(0.0, 1e-3),
            q_load: ParamRange::new(0.0, 1e-3),
            seed: 1,
        }
    }
}

impl MultilevelConfig {
    /// Smaller tree with the same parameter ranges.
    pub fn with_counts(level4: usize, level3: usize, seed: u64) -> Self {
        MultilevelConfig {
            level4_count: level4,
            level3_count: level3,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level5_count != 1 {
            return Err(GridError::Config(
                "a radial network has exactly one Level-5 root".into(),
            ));
        }
        if self.level4_count == 0 || self.level3_count == 0 {
            return Err(GridError::Config("level counts must be at least 1".into()));
        }
        for (name, lp) in [
            ("level5", &self.level5),
            ("level4", &self.level4),
            ("level3", &self.level3),
        ] {
            lp.m.check(&format!("{name}.m"), true)?;
            lp.d.check(&format!("{name}.d"), true)?;
            lp.tau.check(&format!("{name}.tau"), true)?;
            lp.k.check(&format!("{name}.k"), true)?;
        }
        self.b_upper.check("b_upper", true)?;
        self.b_lower.check("b_lower", true)?;
        self.p_source.check("p_source", false)?;
        self.p_load.check("p_load", false)?;
        self.q_source.check("q_source", false)?;
        self.q_load.check("q_load", false)?;
        if !(self.level5.m.lo > self.level4.m.hi && self.level4.m.lo > self.level3.m.hi) {
            return Err(GridError::Config(
                "inertia ranges must decrease strictly from Level 5 to Level 3".into(),
            ));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.level5_count + self.level4_count + self.level3_count
    }
}

/// Build the seeded Level 5/4/3 tree. Ids are level-major (root first), the
/// reference is the first Level-3 node, and the root's nuclear supply closes
/// the active balance so that net injections sum to zero.
pub fn build_multilevel(config: &MultilevelConfig) -> Result<NetworkGraph> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n4, n3) = (config.level4_count, config.level3_count);
    let n = config.n_nodes();
    let first4 = 1;
    let first3 = 1 + n4;

    let mut nodes = Vec::with_capacity(n);
    for id in 0..n {
        let (level, lp) = if id == 0 {
            (5u8, &config.level5)
        } else if id < first3 {
            (4u8, &config.level4)
        } else {
            (3u8, &config.level3)
        };
        let m = lp.m.sample(&mut rng);
        let d = lp.d.sample(&mut rng);
        let tau = lp.tau.sample(&mut rng);
        let k = lp.k.sample(&mut rng);
        let p = ActivePower {
            sol: config.p_source.sample(&mut rng),
            wind: config.p_source.sample(&mut rng),
            bm: config.p_source.sample(&mut rng),
            nuclear: 0.0,
            load: config.p_load.sample(&mut rng),
        };
        let q = ReactivePower {
            sol: config.q_source.sample(&mut rng),
            wind: config.q_source.sample(&mut rng),
            bm: 0.0,
            load: config.q_load.sample(&mut rng),
        };
        nodes.push(NodeParams {
            id,
            level,
            m,
            d,
            tau,
            k,
            p,
            q,
        });
    }

    let mut lines = Vec::with_capacity(n - 1);
    for j in 0..n4 {
        lines.push(LineParams::lossless(
            0,
            first4 + j,
            config.b_upper.sample(&mut rng),
        ));
    }
    for t in 0..n3 {
        let parent = first4 + t * n4 / n3;
        lines.push(LineParams::lossless(
            parent,
            first3 + t,
            config.b_lower.sample(&mut rng),
        ));
    }

    // Biomass reactive setpoint: the share that keeps the unloaded profile flat.
    let mut incident_b = vec![0.0; n];
    for line in &lines {
        incident_b[line.from] += line.b;
        incident_b[line.to] += line.b;
    }
    for node in &mut nodes {
        node.q.bm = node.k - incident_b[node.id];
    }

    let surplus: f64 = nodes.iter().map(NodeParams::p_inj).sum();
    if surplus < 0.0 {
        nodes[0].p.nuclear = -surplus;
    } else {
        nodes[0].p.load += surplus;
    }

    let mut graph = NetworkGraph::new(nodes, lines, first3)?;
    graph.seed = Some(config.seed);
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    pub passed: bool,
    pub offenders: Vec<String>,
}

impl Clause {
    fn from_offenders(name: &str, offenders: Vec<String>) -> Self {
        Clause {
            name: name.to_string(),
            passed: offenders.is_empty(),
            offenders,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub clauses: Vec<Clause>,
}

impl ValidationReport {
    pub fn clause(&self, name: &str) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.name == name)
    }
}

fn line_label(l: usize, line: &LineParams) -> String {
    format!("line {l} ({}-{})", line.from, line.to)
}

/// Check the static network assumptions: connected lossless tree with
/// positive symmetric susceptances, positive dynamics parameters and the
/// level-wise inertia ordering.
pub fn validate_static(graph: &NetworkGraph) -> ValidationReport {
    let mut clauses = Vec::new();

    let connected = match graph.tree_order() {
        Ok(_) => Vec::new(),
        Err(e) => vec![e.to_string()],
    };
    clauses.push(Clause::from_offenders("radial_tree", connected));

    let lossy = graph
        .lines()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.g != 0.0)
        .map(|(i, l)| line_label(i, l))
        .collect();
    clauses.push(Clause::from_offenders("lossless", lossy));

    let nonpositive_b = graph
        .lines()
        .iter()
        .enumerate()
        .filter(|(_, l)| !(l.b > 0.0))
        .map(|(i, l)| line_label(i, l))
        .collect();
    clauses.push(Clause::from_offenders(
        "susceptance_positive",
        nonpositive_b,
    ));

    let bad_params = graph
        .nodes()
        .iter()
        .filter(|n| !(n.m > 0.0 && n.d > 0.0 && n.tau > 0.0 && n.k > 0.0))
        .map(|n| format!("node {}", n.id))
        .collect();
    clauses.push(Clause::from_offenders("parameters_positive", bad_params));

    let sets = graph.level_sets();
    let m_of = |level: u8| -> Vec<(usize, f64)> {
        sets.get(&level)
            .map(|ids| ids.iter().map(|&i| (i, graph.node(i).m)).collect())
            .unwrap_or_default()
    };
    let (l5, l4, l3) = (m_of(5), m_of(4), m_of(3));
    let min_m = |v: &[(usize, f64)]| v.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let mut ordering = Vec::new();
    let min5 = min_m(&l5);
    for &(i, m) in &l4 {
        if !(m < min5) {
            ordering.push(format!(
                "node {i} (Level 4, m = {m}) not below Level-5 minimum {min5}"
            ));
        }
    }
    let min4 = min_m(&l4).min(min5);
    for &(i, m) in &l3 {
        if !(m < min4) {
            ordering.push(format!(
                "node {i} (Level 3, m = {m}) not below Level-4 minimum {min4}"
            ));
        }
    }
    clauses.push(Clause::from_offenders("inertia_ordering", ordering));

    let nuclear = graph
        .nodes()
        .iter()
        .filter(|n| n.p.nuclear > 0.0 && n.level != 5)
        .map(|n| format!("node {} (Level {})", n.id, n.level))
        .collect();
    clauses.push(Clause::from_offenders("nuclear_only_level5", nuclear));

    if graph.is_multilevel() {
        let r = graph.reference();
        let bad = if graph.node(r).level == 3 {
            Vec::new()
        } else {
            vec![format!("node {r}")]
        };
        clauses.push(Clause::from_offenders("reference_in_level3", bad));
    }

    let passed = clauses.iter().all(|c| c.passed);
    ValidationReport { passed, clauses }
}

/// Propagate Level-3 demands up the tree: every node reports its own demand
/// plus the aggregated demand of its children.
pub fn aggregate_demand_bottom_up(
    graph: &NetworkGraph,
    leaf_demand: &BTreeMap<usize, f64>,
) -> Result<BTreeMap<usize, f64>> {
    for &key in leaf_demand.keys() {
        if key >= graph.n() || graph.node(key).level != 3 {
            return Err(GridError::Key(format!(
                "demand key {key} is not a Level-3 node"
            )));
        }
    }
    let (order, parent) = graph.tree_order()?;
    let mut total: Vec<f64> = (0..graph.n())
        .map(|i| leaf_demand.get(&i).copied().unwrap_or(0.0))
        .collect();
    for &i in order.iter().rev() {
        if let Some(p) = parent[i] {
            total[p] += total[i];
        }
    }
    Ok(total.into_iter().enumerate().collect())
}
