//! t-SNE with perplexity-calibrated sparse input affinities on the
//! `3 * perplexity` nearest neighbours, gradient descent with gains and
//! momentum, and either exact or Barnes-Hut repulsion.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::pca::pca_fit;
use crate::embedding::EmbeddingResult;
use crate::error::{invalid, Error, Result};
use crate::seeding::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsneInit {
    /// First two principal components, rescaled to standard deviation 1e-4.
    Pca,
    /// Isotropic Gaussian with standard deviation 1e-4.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    /// `max(N / early_exaggeration / 4, 50)`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repulsion {
    /// Exact below `barnes_hut_above` points, Barnes-Hut otherwise.
    Auto,
    Exact,
    BarnesHut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneSettings {
    pub perplexity: f64,
    pub n_iter: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: LearningRate,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub min_gain: f64,
    pub init: TsneInit,
    pub repulsion: Repulsion,
    pub theta: f64,
    pub barnes_hut_above: usize,
    pub seed: u64,
}

impl Default for TsneSettings {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iter: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: LearningRate::Auto,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            min_gain: 0.01,
            init: TsneInit::Pca,
            repulsion: Repulsion::Auto,
            theta: 0.5,
            barnes_hut_above: 2000,
            seed: 0,
        }
    }
}

/// Symmetric sparse affinities stored per row.
struct Affinities {
    rows: Vec<Vec<(usize, f64)>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-conditional probabilities over the given neighbour distances with
/// entropy `ln(perplexity)`, by bisection on the precision.
fn calibrate_row(d2: &[f64], perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
    let mut p = vec![0.0; d2.len()];
    for _ in 0..200 {
        let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (pj, &d) in p.iter_mut().zip(d2) {
            *pj = (-(d - dmin) * beta).exp();
            sum += *pj;
        }
        let mut weighted = 0.0;
        for (pj, &d) in p.iter_mut().zip(d2) {
            *pj /= sum;
            weighted += *pj * (d - dmin);
        }
        let entropy = sum.ln() + beta * weighted;
        let diff = entropy - target;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
        }
    }
    p
}

fn affinities(x: &FeatureMatrix, perplexity: f64) -> Affinities {
    let n = x.rows();
    let k = ((3.0 * perplexity).floor() as usize).clamp(1, n - 1);
    let mut cond: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(x.row(i), x.row(j)), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
        cand.sort_by(cmp);
        let d2: Vec<f64> = cand.iter().map(|c| c.0).collect();
        let p = calibrate_row(&d2, perplexity);
        cond.push(cand.iter().zip(p).map(|(c, p)| (c.1, p)).collect());
    }
    // symmetrise: p_ij = (p_j|i + p_i|j) / 2N
    let mut sym: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    for (i, row) in cond.iter().enumerate() {
        for &(j, p) in row {
            *sym[i].entry(j).or_default() += p;
            *sym[j].entry(i).or_default() += p;
        }
    }
    let norm = 2.0 * n as f64;
    Affinities {
        rows: sym
            .into_iter()
            .map(|m| m.into_iter().map(|(j, p)| (j, p / norm)).collect())
            .collect(),
    }
}

/// Repulsive forces `sum_j q_ij^2 (y_i - y_j)` (unnormalised) and the
/// normaliser `Z = sum_{i != j} q_ij` with `q_ij = 1 / (1 + |y_i - y_j|^2)`.
fn exact_repulsion(y: &[[f64; 2]], forces: &mut [[f64; 2]]) -> f64 {
    let mut z = 0.0;
    for f in forces.iter_mut() {
        *f = [0.0; 2];
    }
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let q = 1.0 / (1.0 + dx * dx + dy * dy);
            z += 2.0 * q;
            let q2 = q * q;
            forces[i][0] += q2 * dx;
            forces[i][1] += q2 * dy;
            forces[j][0] -= q2 * dx;
            forces[j][1] -= q2 * dy;
        }
    }
    z
}

const NO_CHILD: u32 = u32::MAX;
const MAX_DEPTH: usize = 48;

#[derive(Clone)]
struct Cell {
    center: [f64; 2],
    half: f64,
    mass: f64,
    com: [f64; 2],
    children: [u32; 4],
    /// A leaf holding `mass` points at `com` (coincident or at maximum depth).
    leaf: bool,
}

struct QuadTree {
    cells: Vec<Cell>,
}

impl QuadTree {
    fn build(y: &[[f64; 2]]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in y {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let half = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0).max(1e-12) * (1.0 + 1e-9);
        let mut tree = Self {
            cells: vec![Cell {
                center,
                half,
                mass: 0.0,
                com: [0.0; 2],
                children: [NO_CHILD; 4],
                leaf: true,
            }],
        };
        for p in y {
            tree.insert(*p);
        }
        tree
    }

    fn quadrant(c: &Cell, p: [f64; 2]) -> usize {
        usize::from(p[0] >= c.center[0]) + 2 * usize::from(p[1] >= c.center[1])
    }

    fn child(&mut self, idx: usize, q: usize) -> usize {
        let existing = self.cells[idx].children[q];
        if existing != NO_CHILD {
            return existing as usize;
        }
        let parent = &self.cells[idx];
        let h = parent.half / 2.0;
        let center = [
            parent.center[0] + if q & 1 == 1 { h } else { -h },
            parent.center[1] + if q & 2 == 2 { h } else { -h },
        ];
        self.cells.push(Cell {
            center,
            half: h,
            mass: 0.0,
            com: [0.0; 2],
            children: [NO_CHILD; 4],
            leaf: true,
        });
        let id = self.cells.len() - 1;
        self.cells[idx].children[q] = id as u32;
        id
    }

    fn insert(&mut self, p: [f64; 2]) {
        let mut idx = 0;
        let mut depth = 0;
        loop {
            let cell = &self.cells[idx];
            if cell.leaf {
                let empty = cell.mass == 0.0;
                let same = cell.com == p;
                if empty || same || depth >= MAX_DEPTH {
                    let c = &mut self.cells[idx];
                    let m = c.mass + 1.0;
                    c.com = [(c.com[0] * c.mass + p[0]) / m, (c.com[1] * c.mass + p[1]) / m];
                    c.mass = m;
                    return;
                }
                // split: push the resident points one level down
                let (resident, mass) = (cell.com, cell.mass);
                let q = Self::quadrant(cell, resident);
                self.cells[idx].leaf = false;
                let child = self.child(idx, q);
                let c = &mut self.cells[child];
                c.com = resident;
                c.mass = mass;
            }
            let c = &mut self.cells[idx];
            let m = c.mass + 1.0;
            c.com = [(c.com[0] * c.mass + p[0]) / m, (c.com[1] * c.mass + p[1]) / m];
            c.mass = m;
            let q = Self::quadrant(&self.cells[idx], p);
            idx = self.child(idx, q);
            depth += 1;
        }
    }

    /// Accumulates the approximate repulsion on `p` into `force`, returning
    /// its contribution to `Z`.
    fn repulse(&self, p: [f64; 2], theta: f64, force: &mut [f64; 2]) -> f64 {
        let mut z = 0.0;
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let c = &self.cells[idx];
            if c.mass == 0.0 {
                continue;
            }
            let dx = p[0] - c.com[0];
            let dy = p[1] - c.com[1];
            let d2 = dx * dx + dy * dy;
            if c.leaf {
                // a leaf at distance 0 contains the query point itself
                let mass = if d2 == 0.0 { c.mass - 1.0 } else { c.mass };
                let q = 1.0 / (1.0 + d2);
                z += mass * q;
                force[0] += mass * q * q * dx;
                force[1] += mass * q * q * dy;
            } else if d2 > 0.0 && 2.0 * c.half < theta * d2.sqrt() {
                let q = 1.0 / (1.0 + d2);
                z += c.mass * q;
                force[0] += c.mass * q * q * dx;
                force[1] += c.mass * q * q * dy;
            } else {
                stack.extend(c.children.iter().filter(|&&ch| ch != NO_CHILD).map(|&ch| ch as usize));
            }
        }
        z
    }
}

fn barnes_hut_repulsion(y: &[[f64; 2]], theta: f64, forces: &mut [[f64; 2]]) -> f64 {
    let tree = QuadTree::build(y);
    let mut z = 0.0;
    for (p, f) in y.iter().zip(forces.iter_mut()) {
        *f = [0.0; 2];
        z += tree.repulse(*p, theta, f);
    }
    z
}

fn initial_layout(x: &FeatureMatrix, s: &TsneSettings) -> Result<Vec<[f64; 2]>> {
    let n = x.rows();
    let mut y: Vec<[f64; 2]> = match s.init {
        TsneInit::Pca if x.cols() >= 2 => {
            let pca = pca_fit(n, x.cols(), x.data(), 2)?;
            (0..n).map(|i| [pca.scores[(i, 0)], pca.scores[(i, 1)]]).collect()
        }
        _ => {
            let mut rng = stream(s.seed, &[]);
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect()
        }
    };
    let mean = y.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let std = (y.iter().map(|p| (p[0] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = if std > 0.0 { 1e-4 / std } else { 1.0 };
    for p in &mut y {
        p[0] *= scale;
        p[1] *= scale;
    }
    Ok(y)
}

/// 2-D t-SNE coordinates of the rows of `x`.
pub fn tsne_coords(x: &FeatureMatrix, s: &TsneSettings) -> Result<Vec<[f64; 2]>> {
    let n = x.rows();
    if n < 10 {
        return Err(invalid(format!("t-SNE needs at least 10 points, got {n}")));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite input"));
    }
    if !(s.perplexity > 0.0) || !(s.theta >= 0.0) {
        return Err(Error::Config("perplexity must be positive and theta non-negative".into()));
    }
    let p = affinities(x, s.perplexity);
    let mut y = initial_layout(x, s)?;
    let lr = match s.learning_rate {
        LearningRate::Auto => (n as f64 / s.early_exaggeration / 4.0).max(50.0),
        LearningRate::Fixed(v) => v,
    };
    let barnes_hut = match s.repulsion {
        Repulsion::Auto => n > s.barnes_hut_above,
        Repulsion::Exact => false,
        Repulsion::BarnesHut => true,
    };
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut rep = vec![[0.0f64; 2]; n];
    for iter in 0..s.n_iter {
        let early = iter < s.exaggeration_iters;
        let exaggeration = if early { s.early_exaggeration } else { 1.0 };
        let momentum = if early { s.initial_momentum } else { s.final_momentum };
        let z = if barnes_hut {
            barnes_hut_repulsion(&y, s.theta, &mut rep)
        } else {
            exact_repulsion(&y, &mut rep)
        };
        let z = z.max(f64::MIN_POSITIVE);
        for i in 0..n {
            let mut grad = [-rep[i][0] / z, -rep[i][1] / z];
            for &(j, pij) in &p.rows[i] {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                grad[0] += exaggeration * pij * q * dx;
                grad[1] += exaggeration * pij * q * dy;
            }
            for d in 0..2 {
                let g = 4.0 * grad[d];
                gains[i][d] = if update[i][d] * g < 0.0 {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(s.min_gain)
                };
                update[i][d] = momentum * update[i][d] - lr * gains[i][d] * g;
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("t-SNE diverged"));
    }
    Ok(y)
}

pub fn tsne_embed(x: &FeatureMatrix, method: &str, s: &TsneSettings) -> Result<EmbeddingResult> {
    let coords = tsne_coords(x, s)?;
    Ok(EmbeddingResult::new(method, x.dataset.clone(), coords, x.labels.clone(), x.class_names.clone())?
        .with_provenance("features", format!("{:?}", x.provenance))
        .with_provenance("perplexity", s.perplexity.to_string())
        .with_provenance("seed", s.seed.to_string()))
}
