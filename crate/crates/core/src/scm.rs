//! Discrete structural causal models with exact enumeration.
//!
//! Covers d-separation, the backdoor criterion, the backdoor adjustment
//! estimator, instrumental-variable checks and exact interventional
//! distributions obtained by graph mutilation. Everything here is exact; the
//! size limits keep the joint table small enough to enumerate.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAX_NODES: usize = 10;
pub const MAX_CARDINALITY: usize = 4;
const CPT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("node `{name}` has cardinality {cardinality}; allowed range is 1..={MAX_CARDINALITY}")]
    InvalidCardinality { name: String, cardinality: usize },
    #[error("graph has {0} nodes; at most {MAX_NODES} are supported")]
    TooManyNodes(usize),
    #[error("graph contains a cycle through `{0}`")]
    Cycle(String),
    #[error("invalid conditional probability table for `{node}`: {reason}")]
    BadCpt { node: String, reason: String },
    #[error("state {state} is out of range for `{node}` (cardinality {cardinality})")]
    InvalidState {
        node: String,
        state: usize,
        cardinality: usize,
    },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("adjustment set does not satisfy the backdoor criterion for ({treatment}, {outcome})")]
    CriterionViolated { treatment: String, outcome: String },
    #[error("P({treatment}={value}, adjustment stratum) is zero for a stratum with positive mass")]
    Positivity { treatment: String, value: usize },
    #[error("malformed graph document: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub cardinality: usize,
}

/// A DAG over discrete variables with one conditional probability table per
/// node. Parent order for a node is the order in which its incoming edges
/// were supplied; CPT rows are indexed row-major over that parent order.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalDag {
    vars: Vec<Variable>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    cpts: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

/// JSON description of a [`CausalDag`]. CPTs are nested arrays whose outer
/// dimensions follow the node's parents (in edge order) and whose innermost
/// dimension is the node's own state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagDocument {
    pub nodes: Vec<Variable>,
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub cpts: BTreeMap<String, Value>,
}

impl CausalDag {
    /// Builds the graph with uniform CPTs. Fails on unknown endpoints,
    /// duplicate names, size limits or cycles.
    pub fn new(nodes: &[(&str, usize)], edges: &[(&str, &str)]) -> Result<Self, ScmError> {
        let vars = nodes
            .iter()
            .map(|(n, c)| Variable {
                name: n.to_string(),
                cardinality: *c,
            })
            .collect();
        let edges: Vec<(String, String)> = edges
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        Self::from_parts(vars, &edges)
    }

    fn from_parts(vars: Vec<Variable>, edges: &[(String, String)]) -> Result<Self, ScmError> {
        if vars.len() > MAX_NODES {
            return Err(ScmError::TooManyNodes(vars.len()));
        }
        let mut index = HashMap::new();
        for (i, v) in vars.iter().enumerate() {
            if v.cardinality == 0 || v.cardinality > MAX_CARDINALITY {
                return Err(ScmError::InvalidCardinality {
                    name: v.name.clone(),
                    cardinality: v.cardinality,
                });
            }
            if index.insert(v.name.clone(), i).is_some() {
                return Err(ScmError::DuplicateNode(v.name.clone()));
            }
        }
        let n = vars.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for (a, b) in edges {
            let pa = *index.get(a).ok_or_else(|| ScmError::UnknownNode(a.clone()))?;
            let ch = *index.get(b).ok_or_else(|| ScmError::UnknownNode(b.clone()))?;
            if pa == ch {
                return Err(ScmError::Cycle(a.clone()));
            }
            if !parents[ch].contains(&pa) {
                parents[ch].push(pa);
                children[pa].push(ch);
            }
        }
        let mut dag = Self {
            cpts: Vec::new(),
            vars,
            parents,
            children,
            index,
        };
        dag.topological_order()?;
        dag.cpts = (0..n)
            .map(|v| {
                let card = dag.vars[v].cardinality;
                vec![1.0 / card as f64; dag.parent_configs(v) * card]
            })
            .collect();
        Ok(dag)
    }

    pub fn from_json(text: &str) -> Result<Self, ScmError> {
        let doc: DagDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }

    pub fn from_document(doc: &DagDocument) -> Result<Self, ScmError> {
        let mut dag = Self::from_parts(doc.nodes.clone(), &doc.edges)?;
        for (name, table) in &doc.cpts {
            let v = dag.node(name)?;
            let mut shape: Vec<usize> = dag.parents[v]
                .iter()
                .map(|p| dag.vars[*p].cardinality)
                .collect();
            shape.push(dag.vars[v].cardinality);
            let mut flat = Vec::new();
            flatten_nested(table, &shape, &mut flat).map_err(|reason| ScmError::BadCpt {
                node: name.clone(),
                reason,
            })?;
            dag.set_cpt(name, flat)?;
        }
        Ok(dag)
    }

    pub fn to_document(&self) -> DagDocument {
        let mut edges = Vec::new();
        for (ch, ps) in self.parents.iter().enumerate() {
            for p in ps {
                edges.push((self.vars[*p].name.clone(), self.vars[ch].name.clone()));
            }
        }
        let cpts = (0..self.vars.len())
            .map(|v| {
                let mut shape: Vec<usize> = self.parents[v]
                    .iter()
                    .map(|p| self.vars[*p].cardinality)
                    .collect();
                shape.push(self.vars[v].cardinality);
                (self.vars[v].name.clone(), nest(&self.cpts[v], &shape))
            })
            .collect();
        DagDocument {
            nodes: self.vars.clone(),
            edges,
            cpts,
        }
    }

    /// Replaces the CPT of `name` with `table`, laid out row-major over the
    /// parent states followed by the node's own state.
    pub fn set_cpt(&mut self, name: &str, table: Vec<f64>) -> Result<(), ScmError> {
        let v = self.node(name)?;
        let card = self.vars[v].cardinality;
        let expected = self.parent_configs(v) * card;
        let bad = |reason: String| ScmError::BadCpt {
            node: name.to_string(),
            reason,
        };
        if table.len() != expected {
            return Err(bad(format!("expected {expected} entries, got {}", table.len())));
        }
        for (r, row) in table.chunks(card).enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(bad(format!("row {r} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > CPT_TOLERANCE {
                return Err(bad(format!("row {r} sums to {s}")));
            }
        }
        self.cpts[v] = table;
        Ok(())
    }

    pub fn variables(&self) -> &[Variable] {
        &self.vars
    }

    pub fn node(&self, name: &str) -> Result<usize, ScmError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ScmError::UnknownNode(name.to_string()))
    }

    pub fn name(&self, v: usize) -> &str {
        &self.vars[v].name
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn cpt(&self, v: usize) -> &[f64] {
        &self.cpts[v]
    }

    fn parent_configs(&self, v: usize) -> usize {
        self.parents[v]
            .iter()
            .map(|p| self.vars[*p].cardinality)
            .product()
    }

    pub fn topological_order(&self) -> Result<Vec<usize>, ScmError> {
        let n = self.vars.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|v| indeg[*v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for c in &self.children[v] {
                indeg[*c] -= 1;
                if indeg[*c] == 0 {
                    queue.push_back(*c);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|v| indeg[*v] > 0).unwrap_or(0);
            return Err(ScmError::Cycle(self.vars[stuck].name.clone()));
        }
        Ok(order)
    }

    /// Strict descendants of `v`.
    pub fn descendants(&self, v: usize) -> Vec<bool> {
        let mut seen = vec![false; self.vars.len()];
        let mut stack = self.children[v].clone();
        while let Some(u) = stack.pop() {
            if !seen[u] {
                seen[u] = true;
                stack.extend_from_slice(&self.children[u]);
            }
        }
        seen
    }

    /// Nodes in `seeds` together with all of their ancestors.
    fn ancestral_closure(&self, seeds: &[usize]) -> Vec<bool> {
        let mut seen = vec![false; self.vars.len()];
        let mut stack = seeds.to_vec();
        while let Some(u) = stack.pop() {
            if !seen[u] {
                seen[u] = true;
                stack.extend_from_slice(&self.parents[u]);
            }
        }
        seen
    }

    /// Copy of the graph with the given edges removed; CPTs of affected
    /// children are marginalized to uniform over the dropped parents.
    fn without_edges(&self, drop: impl Fn(usize, usize) -> bool) -> Self {
        let mut g = self.clone();
        for ch in 0..g.vars.len() {
            let keep: Vec<usize> = g.parents[ch]
                .iter()
                .copied()
                .filter(|p| !drop(*p, ch))
                .collect();
            if keep.len() != g.parents[ch].len() {
                g.parents[ch] = keep;
                let card = g.vars[ch].cardinality;
                g.cpts[ch] = vec![1.0 / card as f64; g.parent_configs(ch) * card];
            }
        }
        for p in 0..g.vars.len() {
            g.children[p].retain(|c| g.parents[*c].contains(&p));
        }
        g
    }

    /// Nodes d-connected to any of `sources` given `given` (reachability over
    /// active trails).
    fn reachable(&self, sources: &[usize], given: &[bool]) -> Vec<bool> {
        let n = self.vars.len();
        let zs: Vec<usize> = (0..n).filter(|v| given[*v]).collect();
        let anc = self.ancestral_closure(&zs);
        // (node, arrived_from_child)
        let mut visited = vec![[false; 2]; n];
        let mut reach = vec![false; n];
        let mut queue: VecDeque<(usize, bool)> = sources.iter().map(|s| (*s, true)).collect();
        while let Some((v, up)) = queue.pop_front() {
            let slot = usize::from(up);
            if visited[v][slot] {
                continue;
            }
            visited[v][slot] = true;
            if !given[v] {
                reach[v] = true;
            }
            if up {
                if !given[v] {
                    queue.extend(self.parents[v].iter().map(|p| (*p, true)));
                    queue.extend(self.children[v].iter().map(|c| (*c, false)));
                }
            } else {
                if !given[v] {
                    queue.extend(self.children[v].iter().map(|c| (*c, false)));
                }
                if anc[v] {
                    queue.extend(self.parents[v].iter().map(|p| (*p, true)));
                }
            }
        }
        reach
    }

    fn resolve_set(&self, names: &[&str]) -> Result<Vec<usize>, ScmError> {
        names.iter().map(|n| self.node(n)).collect()
    }

    fn mask(&self, set: &[usize]) -> Vec<bool> {
        let mut m = vec![false; self.vars.len()];
        set.iter().for_each(|v| m[*v] = true);
        m
    }

    fn d_separated_idx(&self, x: usize, y: usize, z: &[usize]) -> bool {
        !self.reachable(&[x], &self.mask(z))[y]
    }

    /// True iff every path between `x` and `y` is blocked by `z`.
    pub fn d_separated(&self, x: &str, y: &str, z: &[&str]) -> Result<bool, ScmError> {
        let (xi, yi) = (self.node(x)?, self.node(y)?);
        let zi = self.resolve_set(z)?;
        if xi == yi {
            return Err(ScmError::InvalidQuery(format!("`{x}` queried against itself")));
        }
        if zi.contains(&xi) || zi.contains(&yi) {
            return Err(ScmError::InvalidQuery(
                "conditioning set contains an endpoint".into(),
            ));
        }
        Ok(self.d_separated_idx(xi, yi, &zi))
    }

    /// Backdoor criterion: no member of `z` descends from `x`, and `z` blocks
    /// every path between `x` and `y` that starts with an arrow into `x`.
    pub fn backdoor_criterion(&self, x: &str, y: &str, z: &[&str]) -> Result<bool, ScmError> {
        let (xi, yi) = (self.node(x)?, self.node(y)?);
        let zi = self.resolve_set(z)?;
        if xi == yi {
            return Err(ScmError::InvalidQuery(format!("`{x}` queried against itself")));
        }
        if zi.contains(&xi) || zi.contains(&yi) {
            return Err(ScmError::InvalidQuery(
                "adjustment set contains treatment or outcome".into(),
            ));
        }
        Ok(self.backdoor_idx(xi, yi, &zi))
    }

    fn backdoor_idx(&self, x: usize, y: usize, z: &[usize]) -> bool {
        let desc = self.descendants(x);
        if z.iter().any(|v| desc[*v]) {
            return false;
        }
        // Only backdoor paths survive once the arrows out of x are cut.
        self.without_edges(|p, _| p == x).d_separated_idx(x, y, z)
    }

    /// `z` is an instrument for the effect of `x` on `y`: it is d-connected to
    /// `x`, and d-separated from `y` once all arrows into `x` are removed.
    pub fn is_instrument(&self, z: &str, x: &str, y: &str) -> Result<bool, ScmError> {
        let (zi, xi, yi) = (self.node(z)?, self.node(x)?, self.node(y)?);
        if zi == xi || zi == yi || xi == yi {
            return Err(ScmError::InvalidQuery("instrument query needs distinct nodes".into()));
        }
        if self.d_separated_idx(zi, xi, &[]) {
            return Ok(false);
        }
        Ok(self.without_edges(|_, c| c == xi).d_separated_idx(zi, yi, &[]))
    }

    /// Exact joint distribution over all variables (graph order).
    pub fn joint(&self) -> Distribution {
        let cards: Vec<usize> = self.vars.iter().map(|v| v.cardinality).collect();
        let total: usize = cards.iter().product();
        let mut probs = vec![0.0; total];
        let mut state = vec![0usize; cards.len()];
        for p in probs.iter_mut() {
            let mut acc = 1.0;
            for v in 0..cards.len() {
                let mut row = 0;
                for par in &self.parents[v] {
                    row = row * cards[*par] + state[*par];
                }
                acc *= self.cpts[v][row * cards[v] + state[v]];
            }
            *p = acc;
            increment(&mut state, &cards);
        }
        Distribution {
            variables: self.vars.iter().map(|v| v.name.clone()).collect(),
            cardinalities: cards,
            probs,
        }
    }

    fn check_state(&self, v: usize, value: usize) -> Result<(), ScmError> {
        let card = self.vars[v].cardinality;
        if value >= card {
            return Err(ScmError::InvalidState {
                node: self.vars[v].name.clone(),
                state: value,
                cardinality: card,
            });
        }
        Ok(())
    }

    /// The mutilated model for `do(x = value)`: arrows into `x` are removed
    /// and `x` becomes a point mass. `self` is left untouched.
    pub fn intervene(&self, x: &str, value: usize) -> Result<Self, ScmError> {
        let xi = self.node(x)?;
        self.check_state(xi, value)?;
        let mut g = self.without_edges(|_, c| c == xi);
        let card = g.vars[xi].cardinality;
        g.cpts[xi] = (0..card).map(|s| if s == value { 1.0 } else { 0.0 }).collect();
        Ok(g)
    }

    /// Exact `P(y | do(x = value))` by enumerating the mutilated model.
    pub fn interventional_oracle(
        &self,
        x: &str,
        value: usize,
        y: &str,
    ) -> Result<Distribution, ScmError> {
        let yi = self.node(y)?;
        let g = self.intervene(x, value)?;
        Ok(g.joint().marginal(&[yi]))
    }

    /// Observational `P(y | x = value)`.
    pub fn conditional(&self, y: &str, x: &str, value: usize) -> Result<Distribution, ScmError> {
        let (xi, yi) = (self.node(x)?, self.node(y)?);
        self.check_state(xi, value)?;
        let joint = self.joint().marginal(&[xi, yi]);
        let ycard = self.vars[yi].cardinality;
        let row = &joint.probs[value * ycard..(value + 1) * ycard];
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            return Err(ScmError::Positivity {
                treatment: x.to_string(),
                value,
            });
        }
        Ok(Distribution {
            variables: vec![y.to_string()],
            cardinalities: vec![ycard],
            probs: row.iter().map(|p| p / mass).collect(),
        })
    }

    /// Backdoor adjustment `sum_z P(y | x = value, z) P(z)` computed from the
    /// observational joint. Refuses adjustment sets that fail the criterion.
    pub fn backdoor_adjust(
        &self,
        x: &str,
        value: usize,
        y: &str,
        z: &[&str],
    ) -> Result<Distribution, ScmError> {
        if !self.backdoor_criterion(x, y, z)? {
            return Err(ScmError::CriterionViolated {
                treatment: x.to_string(),
                outcome: y.to_string(),
            });
        }
        let (xi, yi) = (self.node(x)?, self.node(y)?);
        self.check_state(xi, value)?;
        let zi = self.resolve_set(z)?;
        let mut order = zi.clone();
        order.push(xi);
        order.push(yi);
        let table = self.joint().marginal(&order);
        let (xcard, ycard) = (self.vars[xi].cardinality, self.vars[yi].cardinality);
        let block = xcard * ycard;
        let mut out = vec![0.0; ycard];
        for stratum in table.probs.chunks(block) {
            let pz: f64 = stratum.iter().sum();
            if pz <= 0.0 {
                continue;
            }
            let row = &stratum[value * ycard..(value + 1) * ycard];
            let pxz: f64 = row.iter().sum();
            if pxz <= 0.0 {
                return Err(ScmError::Positivity {
                    treatment: x.to_string(),
                    value,
                });
            }
            for (o, p) in out.iter_mut().zip(row) {
                *o += p / pxz * pz;
            }
        }
        Ok(Distribution {
            variables: vec![y.to_string()],
            cardinalities: vec![ycard],
            probs: out,
        })
    }
}

/// A joint probability table, row-major over `variables`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub variables: Vec<String>,
    pub cardinalities: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Marginal over the listed variable positions, in the listed order.
    pub fn marginal(&self, keep: &[usize]) -> Distribution {
        let cards: Vec<usize> = keep.iter().map(|k| self.cardinalities[*k]).collect();
        let mut out = vec![0.0; cards.iter().product()];
        let mut state = vec![0usize; self.cardinalities.len()];
        for p in &self.probs {
            let idx = keep
                .iter()
                .zip(&cards)
                .fold(0, |acc, (k, c)| acc * c + state[*k]);
            out[idx] += p;
            increment(&mut state, &self.cardinalities);
        }
        Distribution {
            variables: keep.iter().map(|k| self.variables[*k].clone()).collect(),
            cardinalities: cards,
            probs: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Distribution) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn increment(state: &mut [usize], cards: &[usize]) {
    for i in (0..state.len()).rev() {
        state[i] += 1;
        if state[i] < cards[i] {
            return;
        }
        state[i] = 0;
    }
}

fn flatten_nested(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<(), String> {
    match shape.split_first() {
        None => match v.as_f64() {
            Some(x) => {
                out.push(x);
                Ok(())
            }
            None => Err(format!("expected a number, found {v}")),
        },
        Some((n, rest)) => {
            let arr = v
                .as_array()
                .ok_or_else(|| format!("expected an array of length {n}"))?;
            if arr.len() != *n {
                return Err(format!("expected length {n}, found {}", arr.len()));
            }
            arr.iter().try_for_each(|e| flatten_nested(e, rest, out))
        }
    }
}

fn nest(flat: &[f64], shape: &[usize]) -> Value {
    match shape.split_first() {
        None => Value::from(flat[0]),
        Some((n, rest)) => {
            let step = rest.iter().product::<usize>();
            Value::Array(
                (0..*n)
                    .map(|i| nest(&flat[i * step..(i + 1) * step], rest))
                    .collect(),
            )
        }
    }
}
