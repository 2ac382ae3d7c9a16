use super::{LayerCosts, MpqError, Result, Totals};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Size,
    Bops,
    Latency,
}

impl Constraint {
    pub fn name(self) -> &'static str {
        match self {
            Constraint::Size => "model size",
            Constraint::Bops => "BOPS",
            Constraint::Latency => "latency",
        }
    }

    const ALL: [Constraint; 3] = [Constraint::Size, Constraint::Bops, Constraint::Latency];
}

/// Resource limits; `None` leaves a resource unconstrained.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Constraints {
    pub size_bytes: Option<f64>,
    pub bops: Option<f64>,
    pub latency_ms: Option<f64>,
}

impl Constraints {
    pub fn limit(&self, c: Constraint) -> Option<f64> {
        match c {
            Constraint::Size => self.size_bytes,
            Constraint::Bops => self.bops,
            Constraint::Latency => self.latency_ms,
        }
    }

    pub fn with(mut self, c: Constraint, limit: f64) -> Self {
        match c {
            Constraint::Size => self.size_bytes = Some(limit),
            Constraint::Bops => self.bops = Some(limit),
            Constraint::Latency => self.latency_ms = Some(limit),
        }
        self
    }
}

/// A bit-width per layer (in layer order) with its objective and totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitConfig {
    pub layers: Vec<(String, u32)>,
    pub objective: f64,
    pub totals: Totals,
}

impl BitConfig {
    pub fn bits(&self) -> BTreeMap<String, u32> {
        self.layers.iter().cloned().collect()
    }

    pub fn get(&self, layer: &str) -> Option<u32> {
        self.layers.iter().find(|(n, _)| n == layer).map(|&(_, b)| b)
    }

    fn from_choice(costs: &LayerCosts, choice: &[usize]) -> Self {
        BitConfig {
            layers: costs.layers.iter().zip(choice).map(|(l, &k)| (l.name.clone(), l.options[k].bits)).collect(),
            objective: costs.objective(choice),
            totals: costs.totals(choice),
        }
    }
}

struct Problem<'a> {
    costs: &'a LayerCosts,
    /// Allowed option indices per layer, widest first.
    allowed: Vec<Vec<usize>>,
    active: Vec<(usize, f64)>,
    /// `min_suffix[r][j]`: least total of resource `r` over layers `j..`.
    min_suffix: Vec<Vec<f64>>,
    min_layer: Vec<Vec<f64>>,
}

impl Problem<'_> {
    fn res(&self, i: usize, k: usize, r: usize) -> f64 {
        let o = &self.costs.layers[i].options[k];
        match Constraint::ALL[r] {
            Constraint::Size => o.size_bytes,
            Constraint::Bops => o.bops,
            Constraint::Latency => o.latency_ms.unwrap_or(0.0),
        }
    }

    fn omega(&self, i: usize, k: usize) -> f64 {
        self.costs.layers[i].options[k].omega
    }
}

fn slack(limit: f64) -> f64 {
    limit + 1e-9 * limit.abs()
}

/// `a` improves on `best` by more than rounding noise.
fn improves(a: f64, best: f64) -> bool {
    best.is_infinite() || a < best - 1e-12 * best.abs()
}

fn setup<'a>(costs: &'a LayerCosts, constraints: &Constraints, pinned: &BTreeMap<String, u32>) -> Result<Problem<'a>> {
    for (name, &bits) in pinned {
        let l = costs.index_of(name).ok_or_else(|| MpqError::UnknownLayer(name.clone()))?;
        if costs.layers[l].option(bits).is_none() {
            return Err(MpqError::InvalidBits { layer: name.clone(), bits });
        }
    }
    let allowed: Vec<Vec<usize>> = costs
        .layers
        .iter()
        .map(|l| {
            let mut ks: Vec<usize> =
                (0..l.options.len()).filter(|&k| pinned.get(&l.name).is_none_or(|&b| l.options[k].bits == b)).collect();
            ks.sort_by(|&a, &b| l.options[b].bits.cmp(&l.options[a].bits));
            ks
        })
        .collect();
    if let Some(l) = costs.layers.iter().find(|l| l.options.is_empty()) {
        return Err(MpqError::InvalidBits { layer: l.name.clone(), bits: 0 });
    }
    let active: Vec<(usize, f64)> =
        Constraint::ALL.iter().enumerate().filter_map(|(r, &c)| constraints.limit(c).map(|v| (r, v))).collect();
    if constraints.latency_ms.is_some() {
        for l in &costs.layers {
            if let Some(o) = l.options.iter().find(|o| o.latency_ms.is_none()) {
                return Err(MpqError::MissingLatencyEntry { layer: l.name.clone(), bits: o.bits });
            }
        }
    }
    let mut p = Problem { costs, allowed, active, min_suffix: Vec::new(), min_layer: Vec::new() };
    let n = costs.layers.len();
    for r in 0..3 {
        let per: Vec<f64> =
            (0..n).map(|i| p.allowed[i].iter().map(|&k| p.res(i, k, r)).fold(f64::INFINITY, f64::min)).collect();
        let mut suffix = vec![0.0; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] + per[i];
        }
        p.min_layer.push(per);
        p.min_suffix.push(suffix);
    }
    Ok(p)
}

fn infeasible(p: &Problem) -> MpqError {
    let mut violated: Vec<Constraint> =
        p.active.iter().filter(|&&(r, lim)| p.min_suffix[r][0] > lim).map(|&(r, _)| Constraint::ALL[r]).collect();
    if violated.is_empty() {
        violated = p.active.iter().map(|&(r, _)| Constraint::ALL[r]).collect();
    }
    MpqError::Infeasible(violated)
}

struct Search<'a, 'b> {
    p: &'b Problem<'a>,
    choice: Vec<usize>,
    best: f64,
    best_choice: Option<Vec<usize>>,
}

impl Search<'_, '_> {
    /// Admissible bound on the remaining layers: each contributes its least Ω
    /// among options that leave a min-resource completion feasible.
    fn bound(&self, j: usize, used: &[f64; 3]) -> Option<f64> {
        let p = self.p;
        let mut total = 0.0;
        for i in j..p.costs.layers.len() {
            let mut best = f64::INFINITY;
            for &k in &p.allowed[i] {
                let fits = p
                    .active
                    .iter()
                    .all(|&(r, lim)| used[r] + p.res(i, k, r) + (p.min_suffix[r][j] - p.min_layer[r][i]) <= slack(lim));
                if fits {
                    best = best.min(p.omega(i, k));
                }
            }
            if best.is_infinite() {
                return None;
            }
            total += best;
        }
        Some(total)
    }

    fn dfs(&mut self, j: usize, used: [f64; 3], partial: f64) {
        let p = self.p;
        if j == p.costs.layers.len() {
            let feasible = p.active.iter().all(|&(r, lim)| used[r] <= lim);
            if feasible && improves(partial, self.best) {
                self.best = partial;
                self.best_choice = Some(self.choice.clone());
            }
            return;
        }
        match self.bound(j, &used) {
            Some(b) if improves(partial + b, self.best) => {}
            _ => return,
        }
        for &k in &p.allowed[j] {
            let mut next = used;
            for (r, v) in next.iter_mut().enumerate() {
                *v += p.res(j, k, r);
            }
            self.choice.push(k);
            self.dfs(j + 1, next, partial + p.omega(j, k));
            self.choice.pop();
        }
    }
}

/// Exact minimum of `Σ Ω` over per-layer bit options subject to the active
/// limits, with `pinned` layers fixed. Among equal optima the assignment with
/// the wider bit-width at the earliest differing layer wins.
pub fn solve_ilp(costs: &LayerCosts, constraints: &Constraints, pinned: &BTreeMap<String, u32>) -> Result<BitConfig> {
    let p = setup(costs, constraints, pinned)?;
    let mut s = Search { p: &p, choice: Vec::new(), best: f64::INFINITY, best_choice: None };
    s.dfs(0, [0.0; 3], 0.0);
    match s.best_choice {
        Some(choice) => Ok(BitConfig::from_choice(costs, &choice)),
        None => Err(infeasible(&p)),
    }
}

/// Exhaustive enumeration with the same tie-break; exponential, for checking.
pub fn brute_force(costs: &LayerCosts, constraints: &Constraints, pinned: &BTreeMap<String, u32>) -> Result<BitConfig> {
    let p = setup(costs, constraints, pinned)?;
    let n = costs.layers.len();
    let mut idx = vec![0usize; n];
    let mut best = f64::INFINITY;
    let mut best_choice = None;
    loop {
        let choice: Vec<usize> = (0..n).map(|i| p.allowed[i][idx[i]]).collect();
        let mut used = [0.0; 3];
        let mut obj = 0.0;
        for (i, &k) in choice.iter().enumerate() {
            for (r, v) in used.iter_mut().enumerate() {
                *v += p.res(i, k, r);
            }
            obj += p.omega(i, k);
        }
        if p.active.iter().all(|&(r, lim)| used[r] <= lim) && improves(obj, best) {
            best = obj;
            best_choice = Some(choice);
        }
        // odometer, last layer fastest, so assignments come in lexicographic order
        let mut i = n;
        loop {
            if i == 0 {
                return match best_choice {
                    Some(c) => Ok(BitConfig::from_choice(costs, &c)),
                    None => Err(infeasible(&p)),
                };
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < p.allowed[i].len() {
                break;
            }
            idx[i] = 0;
        }
    }
}
