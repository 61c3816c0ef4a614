//! Gauss–Hermite quantization of the standard normal law.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of an `n`-point quantization of `N(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    /// `Σ_k w_k f(z_k)`, summed in mirrored pairs `(k, n-1-k)` so that odd
    /// functions integrate to exactly zero on a symmetric rule.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        let n = self.nodes.len();
        let term = |k: usize| self.weights[k] * f(self.nodes[k]);
        let mut total: f64 = (0..n / 2).map(|k| term(k) + term(n - 1 - k)).sum();
        if n % 2 == 1 {
            total += term(n / 2);
        }
        total
    }
}

/// Orthonormal probabilists' Hermite polynomials `p_0..p_{n}` at `x`.
fn orthonormal_hermite(n: usize, x: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(1.0);
    if n >= 1 {
        p.push(x);
    }
    for k in 1..n {
        let next = (x * p[k] - (k as f64).sqrt() * p[k - 1]) / ((k + 1) as f64).sqrt();
        p.push(next);
    }
    p
}

/// `n`-point Gauss–Hermite rule for the standard normal density, exact for
/// polynomials of degree up to `2n - 1`. Nodes are sorted ascending and the
/// rule is symmetric about zero.
pub fn quantize_gauss_hermite(n: usize) -> Quadrature {
    let n = n.max(1);
    if n == 1 {
        return Quadrature {
            nodes: vec![0.0],
            weights: vec![1.0],
        };
    }
    // Jacobi matrix of the three-term recurrence.
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);

    // Newton polish on p_n, whose derivative is sqrt(n) p_{n-1}.
    for z in nodes.iter_mut() {
        for _ in 0..4 {
            let p = orthonormal_hermite(n, *z);
            let step = p[n] / ((n as f64).sqrt() * p[n - 1]);
            *z -= step;
            if step.abs() < 1e-16 * (1.0 + z.abs()) {
                break;
            }
        }
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&z| 1.0 / orthonormal_hermite(n - 1, z).iter().map(|p| p * p).sum::<f64>())
        .collect();

    // Enforce exact symmetry.
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let z = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -z;
        nodes[j] = z;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Quadrature { nodes, weights }
}
