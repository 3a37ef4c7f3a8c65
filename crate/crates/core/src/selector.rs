//! Sparse per-class relevance weights via the L1-budgeted least-squares
//! problem min ||X^T w_j - l_j||^2 s.t. ||w_j||_1 <= mu, solved per class by
//! spectral projected gradient (Barzilai-Borwein step, nonmonotone line
//! search) with exact Euclidean projection onto the L1 ball.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::descriptor::{DatasetMatrices, DescriptorError, DescriptorLayout};
use crate::network::FeatureId;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in input data")]
    NonFinite,
    #[error("sparsity budget mu must be positive, got {0}")]
    BadMu(f64),
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("malformed relevance file at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Euclidean projection onto the L1 ball of radius `mu`. Signs are
/// preserved; the result is the exact soft-threshold solution.
pub fn project_l1_ball(v: &[f64], mu: f64) -> Vec<f64> {
    if mu <= 0.0 {
        return vec![0.0; v.len()];
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= mu {
        return v.to_vec();
    }
    // sort |v| descending, find the threshold tau by the KKT prefix rule
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &u) in mags.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - mu) / (k + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    v.iter()
        .map(|&x| {
            let shrunk = x.abs() - tau;
            if shrunk > 0.0 {
                shrunk * x.signum()
            } else {
                0.0
            }
        })
        .collect()
}

/// Sparse per-class filter weights; column j holds the nonzeros of w_j.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    pub m: usize,
    pub c: usize,
    pub mu: f64,
    pub columns: Vec<Vec<(usize, f64)>>,
}

impl RelevanceMatrix {
    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.columns[j]
    }

    /// Dense copy of column j.
    pub fn dense_column(&self, j: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.m];
        for &(i, v) in &self.columns[j] {
            w[i] = v;
        }
        w
    }

    pub fn nnz(&self, j: usize) -> usize {
        self.columns[j].len()
    }

    /// Text format: header "m C mu", then one "class flat_index weight" line
    /// per nonzero, weights in round-trip decimal.
    pub fn save(&self, path: &Path) -> Result<(), SolverError> {
        let mut out = String::new();
        writeln!(out, "{} {} {}", self.m, self.c, self.mu).unwrap();
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, w) in col {
                writeln!(out, "{j} {i} {w}").unwrap();
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RelevanceMatrix, SolverError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(SolverError::Format { line: 1, msg: "empty file".into() })?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 3 {
            return Err(SolverError::Format { line: 1, msg: "header must be 'm C mu'".into() });
        }
        let m: usize = head[0].parse().map_err(|_| SolverError::Format { line: 1, msg: "bad m".into() })?;
        let c: usize = head[1].parse().map_err(|_| SolverError::Format { line: 1, msg: "bad C".into() })?;
        let mu: f64 = head[2].parse().map_err(|_| SolverError::Format { line: 1, msg: "bad mu".into() })?;
        let mut columns = vec![Vec::new(); c];
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(SolverError::Format { line: lineno + 1, msg: "expected 'class flat_index weight'".into() });
            }
            let j: usize = parts[0].parse().map_err(|_| SolverError::Format { line: lineno + 1, msg: "bad class".into() })?;
            let i: usize = parts[1].parse().map_err(|_| SolverError::Format { line: lineno + 1, msg: "bad index".into() })?;
            let w: f64 = parts[2].parse().map_err(|_| SolverError::Format { line: lineno + 1, msg: "bad weight".into() })?;
            if j >= c || i >= m {
                return Err(SolverError::Format { line: lineno + 1, msg: format!("entry ({j}, {i}) outside {m}x{c}") });
            }
            columns[j].push((i, w));
        }
        Ok(RelevanceMatrix { m, c, mu, columns })
    }
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub iterations: Vec<usize>,
    /// Final objective ||X^T W - L^T||_F^2 summed over classes.
    pub objective: f64,
    /// Sup-norm of the projected gradient at exit, max over classes.
    pub projected_gradient_norm: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub bb_min: f64,
    pub bb_max: f64,
    pub line_search_memory: usize,
    pub sufficient_decrease: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-6,
            max_iterations: 500,
            bb_min: 1e-10,
            bb_max: 1e10,
            line_search_memory: 10,
            sufficient_decrease: 1e-4,
        }
    }
}

/// residual r = X^T w - l (length N) for column-major X (m x N).
fn residual(x: &[f64], m: usize, n: usize, w: &[f64], l: &[f64]) -> Vec<f64> {
    let mut r = Vec::with_capacity(n);
    for i in 0..n {
        let col = &x[i * m..(i + 1) * m];
        let dot: f64 = col.iter().zip(w).map(|(a, b)| a * b).sum();
        r.push(dot - l[i]);
    }
    r
}

fn objective_from_residual(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// gradient = 2 X r
fn gradient(x: &[f64], m: usize, n: usize, r: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; m];
    for i in 0..n {
        let col = &x[i * m..(i + 1) * m];
        let ri = r[i];
        for (gk, &ck) in g.iter_mut().zip(col) {
            *gk += 2.0 * ck * ri;
        }
    }
    g
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct ClassSolution {
    w: Vec<f64>,
    objective: f64,
    iterations: usize,
    pg_norm: f64,
}

fn solve_class(
    x: &[f64],
    m: usize,
    n: usize,
    l: &[f64],
    mu: f64,
    opts: &SolverOptions,
) -> ClassSolution {
    let mut w = vec![0.0; m];
    let r0 = residual(x, m, n, &w, l);
    let mut f = objective_from_residual(&r0);
    let mut g = gradient(x, m, n, &r0);
    let mut f_hist = vec![f];
    let mut alpha = {
        let pg: Vec<f64> = project_l1_ball(&w.iter().zip(&g).map(|(wi, gi)| wi - gi).collect::<Vec<_>>(), mu)
            .iter()
            .zip(&w)
            .map(|(p, wi)| p - wi)
            .collect();
        let norm = inf_norm(&pg);
        if norm > 0.0 {
            (1.0 / norm).clamp(opts.bb_min, opts.bb_max)
        } else {
            1.0
        }
    };
    let mut iterations = 0;
    let mut pg_norm = 0.0;

    for _ in 0..opts.max_iterations {
        let step_point: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - gi).collect();
        let pg: Vec<f64> = project_l1_ball(&step_point, mu).iter().zip(&w).map(|(p, wi)| p - wi).collect();
        pg_norm = inf_norm(&pg);
        if pg_norm <= opts.tol {
            break;
        }
        iterations += 1;

        let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - alpha * gi).collect();
        let d: Vec<f64> = project_l1_ball(&trial, mu).iter().zip(&w).map(|(p, wi)| p - wi).collect();
        let delta = dot(&g, &d);
        let f_max = f_hist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        let mut lambda = 1.0;
        let (w_new, r_new, f_new) = loop {
            let w_try: Vec<f64> = w.iter().zip(&d).map(|(wi, di)| wi + lambda * di).collect();
            let r_try = residual(x, m, n, &w_try, l);
            let f_try = objective_from_residual(&r_try);
            if f_try <= f_max + opts.sufficient_decrease * lambda * delta || lambda < 1e-10 {
                break (w_try, r_try, f_try);
            }
            lambda *= 0.5;
        };

        let g_new = gradient(x, m, n, &r_new);
        let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sty = dot(&s, &y);
        alpha = if sty > 0.0 { (dot(&s, &s) / sty).clamp(opts.bb_min, opts.bb_max) } else { opts.bb_max };

        w = w_new;
        f = f_new;
        g = g_new;
        f_hist.push(f);
        if f_hist.len() > opts.line_search_memory {
            f_hist.remove(0);
        }
    }

    ClassSolution { w, objective: f, iterations, pg_norm }
}

/// Solves the matrix-form problem class by class (the Frobenius objective
/// separates by column).
pub fn solve_mu_lasso(
    mats: &DatasetMatrices,
    mu: f64,
    opts: &SolverOptions,
) -> Result<(RelevanceMatrix, SolverReport), SolverError> {
    if mu <= 0.0 {
        return Err(SolverError::BadMu(mu));
    }
    if mats.x.len() != mats.m * mats.n || mats.l.len() != mats.c * mats.n {
        return Err(SolverError::DimensionMismatch(format!(
            "X has {} entries for m={} N={}; L has {} for C={}",
            mats.x.len(),
            mats.m,
            mats.n,
            mats.l.len(),
            mats.c
        )));
    }
    if !mats.x.iter().chain(mats.l.iter()).all(|v| v.is_finite()) {
        return Err(SolverError::NonFinite);
    }

    let start = Instant::now();
    let mut columns = Vec::with_capacity(mats.c);
    let mut report = SolverReport {
        iterations: Vec::with_capacity(mats.c),
        objective: 0.0,
        projected_gradient_norm: 0.0,
        wall_time_s: 0.0,
    };
    for j in 0..mats.c {
        let l_j: Vec<f64> = (0..mats.n).map(|i| mats.l[i * mats.c + j]).collect();
        let sol = solve_class(&mats.x, mats.m, mats.n, &l_j, mu, opts);
        debug_assert!(sol.w.iter().map(|v| v.abs()).sum::<f64>() <= mu + 1e-8);
        let sparse: Vec<(usize, f64)> = sol
            .w
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() >= 1e-12)
            .map(|(i, &v)| (i, v))
            .collect();
        columns.push(sparse);
        report.iterations.push(sol.iterations);
        report.objective += sol.objective;
        report.projected_gradient_norm = report.projected_gradient_norm.max(sol.pg_norm);
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((RelevanceMatrix { m: mats.m, c: mats.c, mu, columns }, report))
}

/// Nonzeros of w_j mapped to feature ids, sorted by |weight| descending,
/// ties by (layer, filter) ascending.
pub fn relevant_features(
    w: &RelevanceMatrix,
    class: usize,
    layout: &DescriptorLayout,
) -> Result<Vec<(FeatureId, f64)>, SolverError> {
    if class >= w.c {
        return Err(SolverError::ClassOutOfRange { class, classes: w.c });
    }
    let mut feats = Vec::with_capacity(w.columns[class].len());
    for &(i, weight) in &w.columns[class] {
        feats.push((layout.feature_of_index(i)?, weight));
    }
    feats.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap()
            .then_with(|| (a.0.layer, a.0.filter).cmp(&(b.0.layer, b.0.filter)))
    });
    Ok(feats)
}
