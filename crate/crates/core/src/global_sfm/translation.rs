use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::linalg::sorted_symmetric_eigen;
use crate::scene::{ImageId, ViewGraph};
use crate::{Pose, Result, Rotation, SfmError};

/// Settings for L1 translation averaging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationAveragingOptions {
    pub max_iterations: usize,
    /// Stop once no center moves more than this.
    pub tolerance: f64,
    /// Residual floor in the reweighting.
    pub delta: f64,
    /// Eigenvalues below this fraction of the largest count as null directions.
    pub rigidity_tolerance: f64,
}

impl Default for TranslationAveragingOptions {
    fn default() -> Self {
        TranslationAveragingOptions {
            max_iterations: 100,
            tolerance: 1e-8,
            delta: 1e-5,
            rigidity_tolerance: 1e-10,
        }
    }
}

/// Camera poses from global averaging together with the per-edge scales.
#[derive(Debug, Clone, Default)]
pub struct GlobalPoses {
    pub poses: BTreeMap<ImageId, Pose>,
    /// Scale `s_ij >= 1` of every edge used, keyed by `(i, j)`.
    pub scales: BTreeMap<(ImageId, ImageId), f64>,
    /// Shared factor tying metric edges: `s_ij = kappa / m_ij`.
    pub kappa: Option<f64>,
    /// Images that could not be placed (not rigidly constrained or disconnected).
    pub unsolvable: Vec<ImageId>,
    /// Smoothed L1 objective after initialization and after every iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl GlobalPoses {
    pub fn centers(&self) -> BTreeMap<ImageId, Vector3<f64>> {
        self.poses.iter().map(|(k, p)| (*k, p.center())).collect()
    }

    /// Centers in metric units, when metric edges were present.
    pub fn metric_centers(&self) -> Option<BTreeMap<ImageId, Vector3<f64>>> {
        let k = self.kappa?;
        Some(self.poses.iter().map(|(id, p)| (*id, p.center() * k)).collect())
    }
}

struct EdgeTerm {
    i: usize,
    j: usize,
    key: (ImageId, ImageId),
    /// `R_j^T t_ij`, proportional to `C_i - C_j`.
    v: Vector3<f64>,
    metric: Option<f64>,
}

fn smoothed_l1(r: f64, delta: f64) -> f64 {
    if r >= delta {
        r
    } else {
        r * r / (2.0 * delta) + delta / 2.0
    }
}

/// Smallest eigenvector of the stacked linear constraints plus a centroid penalty.
/// Returns the centers, the metric scale unknown if present, and the null-space basis.
fn linear_system(n: usize, terms: &[EdgeTerm], tolerance: f64) -> (Vec<Vector3<f64>>, Option<f64>, DMatrix<f64>) {
    let has_metric = terms.iter().any(|t| t.metric.is_some());
    let dim = 3 * n + usize::from(has_metric);
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    let mu = 3 * n;
    for t in terms {
        let (bi, bj) = (3 * t.i, 3 * t.j);
        let block = match t.metric {
            None => Matrix3::identity() - t.v * t.v.transpose(),
            Some(_) => Matrix3::identity(),
        };
        for (a, sa) in [(bi, 1.0), (bj, -1.0)] {
            for (b, sb) in [(bi, 1.0), (bj, -1.0)] {
                let mut view = m.view_mut((a, b), (3, 3));
                view += block * (sa * sb);
            }
        }
        if let Some(len) = t.metric {
            // Row: C_i - C_j - mu * len * v.
            let col = t.v * len;
            for k in 0..3 {
                m[(bi + k, mu)] -= col[k];
                m[(bj + k, mu)] += col[k];
                m[(mu, bi + k)] -= col[k];
                m[(mu, bj + k)] += col[k];
            }
            m[(mu, mu)] += len * len;
        }
    }
    for a in 0..n {
        for b in 0..n {
            for k in 0..3 {
                m[(3 * a + k, 3 * b + k)] += 1.0;
            }
        }
    }
    let (values, vectors) = sorted_symmetric_eigen(m);
    let largest = values[values.len() - 1].abs().max(1e-300);
    let null_count = values.iter().filter(|v| **v < tolerance * largest).count();
    let x = vectors.column(0);
    let centers = (0..n).map(|k| Vector3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2])).collect();
    let mu_value = has_metric.then(|| x[mu]);
    let null = vectors.columns(0, null_count.max(1)).into_owned();
    (centers, mu_value, null)
}

/// Nodes carrying most of the weight of some extra null direction.
fn flexible_nodes(n: usize, null: &DMatrix<f64>) -> Vec<usize> {
    if null.ncols() < 2 {
        return Vec::new();
    }
    let basis = null.columns(0, null.ncols()).into_owned();
    let proj = &basis * basis.transpose();
    // Participation of node k in the null space, minus the one direction the
    // solution itself occupies (about 1/n per node).
    (0..n)
        .filter(|&k| {
            let mut tr = 0.0;
            for a in 0..3 {
                tr += proj[(3 * k + a, 3 * k + a)];
            }
            tr > 0.5 + 1.0 / n as f64
        })
        .collect()
}

/// Scale-constrained L1 translation averaging on fixed rotations.
///
/// Minimizes `sum ||s_ij (C_i - C_j) - R_j^T t_ij||` with `s_ij >= 1` and the
/// centers summing to zero. Edges listed in `metric` (baseline length in
/// metric units) share one scale factor so their relative lengths are kept.
pub fn translation_averaging(
    graph: &ViewGraph,
    rotations: &BTreeMap<ImageId, Rotation>,
    metric: &BTreeMap<(ImageId, ImageId), f64>,
    options: &TranslationAveragingOptions,
) -> Result<GlobalPoses> {
    let mut active: BTreeSet<ImageId> = graph.images().filter(|id| rotations.contains_key(id)).collect();
    if active.is_empty() {
        return Err(SfmError::EmptyGraph);
    }
    let mut unsolvable: BTreeSet<ImageId> = graph.images().filter(|id| !active.contains(id)).collect();

    loop {
        let sub = graph.induced(&active);
        let comps = sub.components();
        let keep: BTreeSet<ImageId> = comps[0].iter().copied().collect();
        for c in &comps[1..] {
            unsolvable.extend(c.iter().copied());
        }
        active = keep;
        let nodes: Vec<ImageId> = active.iter().copied().collect();
        let index: HashMap<ImageId, usize> = nodes.iter().enumerate().map(|(k, id)| (*id, k)).collect();
        let terms: Vec<EdgeTerm> = sub
            .edges()
            .filter(|e| index.contains_key(&e.i) && index.contains_key(&e.j))
            .map(|e| EdgeTerm {
                i: index[&e.i],
                j: index[&e.j],
                key: e.key(),
                v: rotations[&e.j].inverse().rotate(&e.direction).normalize(),
                metric: metric.get(&e.key()).copied().filter(|m| *m > 0.0),
            })
            .collect();
        let n = nodes.len();
        if n == 1 {
            let id = nodes[0];
            return Ok(GlobalPoses {
                poses: BTreeMap::from([(id, Pose::from_center(rotations[&id], &Vector3::zeros()))]),
                unsolvable: unsolvable.into_iter().collect(),
                ..Default::default()
            });
        }
        let (centers, mu, null) = linear_system(n, &terms, options.rigidity_tolerance);
        let flexible = flexible_nodes(n, &null);
        if !flexible.is_empty() {
            for k in flexible {
                active.remove(&nodes[k]);
                unsolvable.insert(nodes[k]);
            }
            if active.is_empty() {
                return Err(SfmError::Degenerate("no rigidly constrained cameras".into()));
            }
            continue;
        }
        if null.ncols() > 1 {
            return Err(SfmError::Degenerate(format!(
                "view graph is not parallel rigid ({} null directions)",
                null.ncols()
            )));
        }
        let mut poses = solve_irls(n, &terms, centers, mu, options);
        poses.unsolvable = unsolvable.into_iter().collect();
        poses.poses = nodes
            .iter()
            .zip(std::mem::take(&mut poses.poses).into_values())
            .map(|(id, p)| (*id, Pose::from_center(rotations[id], &p.center())))
            .collect();
        return Ok(poses);
    }
}

fn solve_irls(
    n: usize,
    terms: &[EdgeTerm],
    mut c: Vec<Vector3<f64>>,
    mu: Option<f64>,
    options: &TranslationAveragingOptions,
) -> GlobalPoses {
    let delta = options.delta;
    // Orientation of the eigenvector.
    let flip = match mu {
        Some(m) if m.abs() > 1e-12 => m < 0.0,
        _ => {
            let agree = terms.iter().filter(|t| (c[t.i] - c[t.j]).dot(&t.v) > 0.0).count();
            2 * agree < terms.len()
        }
    };
    if flip {
        c.iter_mut().for_each(|x| *x = -*x);
    }
    let longest = terms.iter().map(|t| (c[t.i] - c[t.j]).norm()).fold(0.0, f64::max);
    if longest > 0.0 {
        c.iter_mut().for_each(|x| *x /= longest);
    }
    let max_metric = terms.iter().filter_map(|t| t.metric).fold(0.0, f64::max);
    let has_metric = terms.iter().any(|t| t.metric.is_some());

    let update_scales = |c: &[Vector3<f64>], w: &[f64], s: &mut [f64]| -> Option<f64> {
        for (k, t) in terms.iter().enumerate() {
            if t.metric.is_none() {
                let d = c[t.i] - c[t.j];
                let dd = d.norm_squared();
                s[k] = if dd > 0.0 { (d.dot(&t.v) / dd).max(1.0) } else { 1.0 };
            }
        }
        if !has_metric {
            return None;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (k, t) in terms.iter().enumerate() {
            if let Some(m) = t.metric {
                let d = c[t.i] - c[t.j];
                num += w[k] * d.dot(&t.v) / m;
                den += w[k] * d.norm_squared() / (m * m);
            }
        }
        let kappa = if den > 0.0 { (num / den).max(max_metric) } else { max_metric };
        for (k, t) in terms.iter().enumerate() {
            if let Some(m) = t.metric {
                s[k] = kappa / m;
            }
        }
        Some(kappa)
    };
    let residuals = |c: &[Vector3<f64>], s: &[f64]| -> Vec<f64> {
        terms
            .iter()
            .zip(s)
            .map(|(t, sk)| ((c[t.i] - c[t.j]) * *sk - t.v).norm())
            .collect()
    };
    let objective = |r: &[f64]| r.iter().map(|x| smoothed_l1(*x, delta)).sum::<f64>();

    let mut s = vec![1.0; terms.len()];
    let mut kappa = update_scales(&c, &vec![1.0; terms.len()], &mut s);
    let mut r = residuals(&c, &s);
    let mut trace = vec![objective(&r)];
    let mut iterations = 0;
    for it in 0..options.max_iterations {
        iterations = it + 1;
        let w: Vec<f64> = r.iter().map(|x| 1.0 / x.max(delta)).collect();
        let next = center_step(n, terms, &w, &s);
        let change = c.iter().zip(&next).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        c = next;
        kappa = update_scales(&c, &w, &mut s);
        r = residuals(&c, &s);
        trace.push(objective(&r));
        if change < options.tolerance {
            break;
        }
    }
    let mean = c.iter().sum::<Vector3<f64>>() / n as f64;
    c.iter_mut().for_each(|x| *x -= mean);
    GlobalPoses {
        poses: c
            .iter()
            .enumerate()
            .map(|(k, x)| (k as ImageId, Pose::from_center(Rotation::identity(), x)))
            .collect(),
        scales: terms.iter().zip(&s).map(|(t, sk)| (t.key, *sk)).collect(),
        kappa,
        unsolvable: Vec::new(),
        objective: trace,
        iterations,
    }
}

/// Weighted least squares for the centers with scales fixed and zero centroid.
fn center_step(n: usize, terms: &[EdgeTerm], w: &[f64], s: &[f64]) -> Vec<Vector3<f64>> {
    let mut lap = DMatrix::<f64>::from_element(n, n, 1.0 / n as f64);
    let mut rhs = DMatrix::<f64>::zeros(n, 3);
    for (k, t) in terms.iter().enumerate() {
        let a = w[k] * s[k] * s[k];
        lap[(t.i, t.i)] += a;
        lap[(t.j, t.j)] += a;
        lap[(t.i, t.j)] -= a;
        lap[(t.j, t.i)] -= a;
        let target = t.v * (w[k] * s[k]);
        for d in 0..3 {
            rhs[(t.i, d)] += target[d];
            rhs[(t.j, d)] -= target[d];
        }
    }
    let chol = lap.cholesky().expect("connected graph gives a positive definite system");
    let x = chol.solve(&rhs);
    let mut out: Vec<Vector3<f64>> = (0..n).map(|k| Vector3::new(x[(k, 0)], x[(k, 1)], x[(k, 2)])).collect();
    let mean = out.iter().sum::<Vector3<f64>>() / n as f64;
    out.iter_mut().for_each(|c| *c -= mean);
    out
}
