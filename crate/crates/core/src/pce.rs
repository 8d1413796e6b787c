//! Multi-indices, normalized Legendre polynomials and the Galerkin
//! multiplication matrices that couple chaos modes.
//!
//! Polynomials are orthonormal with respect to the uniform probability
//! measure `dξ/2` on `[-1, 1]`, so `L_0 = 1` and the Gram matrix of any
//! index set is the identity.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// A multi-index `ν = (ν_1, …, ν_s)` of non-negative integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(entries: Vec<usize>) -> Self {
        Self(entries)
    }

    pub fn zero(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Total degree `|ν|`.
    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }
}

/// Total-degree index set `{ν : |ν| ≤ p}` in graded lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalDegreeIndexSet {
    dim: usize,
    degree: usize,
    members: Vec<MultiIndex>,
}

impl TotalDegreeIndexSet {
    /// Builds the set for `dim` parameters and maximal total degree `degree`.
    ///
    /// Members are sorted by total degree with ties broken by ascending
    /// lexicographic order of the entries, so the zero index always comes
    /// first. `dim == 0` yields the single empty index (deterministic case).
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut members = Vec::new();
        let mut current = vec![0usize; dim];
        enumerate(&mut current, 0, degree, &mut members);
        members.sort_by(|a, b| a.order().cmp(&b.order()).then_with(|| a.cmp(b)));
        Self {
            dim,
            degree,
            members,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of chaos modes `K + 1`.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[MultiIndex] {
        &self.members
    }

    pub fn position(&self, index: &MultiIndex) -> Option<usize> {
        self.members.iter().position(|m| m == index)
    }

    /// Values `L_ν(σ)` for every member, in index-set order.
    pub fn eval_all(&self, sigma: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.dim, sigma.len(), "parameter point")?;
        let mut table = Vec::with_capacity(self.dim);
        for &x in sigma {
            table.push(legendre_table(self.degree, x)?);
        }
        Ok(DVector::from_iterator(
            self.len(),
            self.members.iter().map(|nu| {
                nu.entries()
                    .iter()
                    .zip(&table)
                    .map(|(&n, row)| row[n])
                    .product::<f64>()
            }),
        ))
    }

    /// Basis matrix with row `i` holding `L_ν(σ^{(i)})` for all `ν`.
    pub fn basis_matrix(&self, nodes: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(nodes.len(), self.len());
        for (i, sigma) in nodes.iter().enumerate() {
            let row = self.eval_all(sigma)?;
            out.row_mut(i).copy_from(&row.transpose());
        }
        Ok(out)
    }
}

fn enumerate(current: &mut Vec<usize>, pos: usize, budget: usize, out: &mut Vec<MultiIndex>) {
    if pos == current.len() {
        out.push(MultiIndex(current.clone()));
        return;
    }
    for v in 0..=budget {
        current[pos] = v;
        enumerate(current, pos + 1, budget - v, out);
    }
    current[pos] = 0;
}

/// Normalized Legendre polynomial `L_n(ξ) = √(2n+1) P_n(ξ)`.
pub fn legendre_eval(n: usize, xi: f64) -> Result<f64> {
    Ok(legendre_table(n, xi)?[n])
}

/// `[L_0(ξ), …, L_n(ξ)]` via the three-term recurrence.
pub fn legendre_table(n: usize, xi: f64) -> Result<Vec<f64>> {
    if !(-1.0..=1.0).contains(&xi) {
        return Err(Error::Domain { value: xi });
    }
    let mut p = Vec::with_capacity(n + 1);
    p.push(1.0);
    if n >= 1 {
        p.push(xi);
    }
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * xi * p[k] - kf * p[k - 1]) / (kf + 1.0);
        p.push(next);
    }
    for (k, v) in p.iter_mut().enumerate() {
        *v *= ((2 * k + 1) as f64).sqrt();
    }
    Ok(p)
}

/// Tensorized polynomial `L_ν(σ) = Π_j L_{ν_j}(σ_j)`.
pub fn tensor_legendre_eval(nu: &MultiIndex, sigma: &[f64]) -> Result<f64> {
    check_dim(nu.dim(), sigma.len(), "multi-index vs parameter point")?;
    let mut acc = 1.0;
    for (&n, &x) in nu.entries().iter().zip(sigma) {
        acc *= legendre_eval(n, x)?;
    }
    Ok(acc)
}

/// Gauss–Legendre rule for the probability measure `dξ/2` on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    /// Weights summing to one.
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// `n`-point rule, exact for polynomials of degree `2n - 1`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss rule needs at least one point");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre_with_derivative(n, x);
            let w = 1.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor product rule on `[-1, 1]^dim`.
    pub fn tensor(&self, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut points = vec![Vec::new()];
        let mut weights = vec![1.0];
        for _ in 0..dim {
            let mut next_p = Vec::with_capacity(points.len() * self.len());
            let mut next_w = Vec::with_capacity(points.len() * self.len());
            for (p, w) in points.iter().zip(&weights) {
                for (x, v) in self.nodes.iter().zip(&self.weights) {
                    let mut q = p.clone();
                    q.push(*x);
                    next_p.push(q);
                    next_w.push(w * v);
                }
            }
            points = next_p;
            weights = next_w;
        }
        (points, weights)
    }
}

/// Unnormalized `P_n(x)` and `P_n'(x)`.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let d = nf * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Galerkin matrix of multiplication by `σ_j` (0-based `component`) in the
/// basis `Λ`: entry `(ν, m) = ⟨σ_j L_ν, L_m⟩`.
pub fn multiplication_matrix(component: usize, set: &TotalDegreeIndexSet) -> Result<DMatrix<f64>> {
    if component >= set.dim() {
        return Err(Error::InvalidArgument(format!(
            "component {component} out of range for {} parameters",
            set.dim()
        )));
    }
    let p = set.degree();
    // Univariate moments ∫ ξ L_a L_b dξ/2 for a, b ≤ p.
    let rule = GaussRule::new(p + 2);
    let mut uni = DMatrix::zeros(p + 1, p + 1);
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let l = legendre_table(p, *x)?;
        for a in 0..=p {
            for b in 0..=p {
                uni[(a, b)] += w * x * l[a] * l[b];
            }
        }
    }
    let members = set.members();
    let n = members.len();
    let mut out = DMatrix::zeros(n, n);
    for (r, nu) in members.iter().enumerate() {
        for (c, m) in members.iter().enumerate() {
            let others_match = nu
                .entries()
                .iter()
                .zip(m.entries())
                .enumerate()
                .all(|(i, (a, b))| i == component || a == b);
            if !others_match {
                continue;
            }
            let a = nu.entries()[component];
            let b = m.entries()[component];
            if a.abs_diff(b) == 1 {
                out[(r, c)] = uni[(a, b)];
            }
        }
    }
    Ok(out)
}
