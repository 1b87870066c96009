//! Dense reference for the direction solver, shared by the oracle tests and
//! the acceptance run.
//!
//! The oracle factors the ridged self scatter with nalgebra, whitens the
//! cross scatter and takes symmetric eigenpairs. Later directions come from
//! the whitened matrix compressed onto the orthogonal complement of the
//! earlier whitened directions, which is the symmetric restatement of the
//! constrained maximization.
#![allow(dead_code)]

use biaslens::bd2a::{Mat, Polarity, ScatterPair};
use biaslens::dataset::{ImageShape, Label, Sample};
use biaslens::scorer::{init_model, Architecture};
use biaslens::tiler::{split, Grid, Tile};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_na(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn random_pair(seed: u64, k: usize) -> ScatterPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let rank = rng.random_range(1..=k);
    let c = DMatrix::from_fn(rank, k, |_, _| rng.random_range(-2.0..2.0));
    let s = b.transpose() * &b / k as f64 + DMatrix::identity(k, k) * 0.05;
    let x = c.transpose() * &c;
    ScatterPair {
        s_self: Mat::from_fn(k, k, |i, j| s[(i, j)]),
        s_cross: Mat::from_fn(k, k, |i, j| x[(i, j)]),
        mean_self: vec![0.0; k],
        polarity: Polarity::Positive,
        n_self: 10,
        n_other: 10,
    }
}

pub struct Oracle {
    pub lambdas: Vec<f64>,
    pub first: DVector<f64>,
    pub gap: f64,
}

pub fn oracle(p: &ScatterPair, steps: usize) -> Oracle {
    let k = p.mean_self.len();
    let s = to_na(&p.s_self_reg());
    let l = s.clone().cholesky().unwrap().l();
    let linv = l.clone().try_inverse().unwrap();
    let c = &linv * to_na(&p.s_cross) * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut lambdas = Vec::new();
    let mut first = None;
    let mut gap = f64::INFINITY;
    for step in 0..steps {
        let mut proj = DMatrix::<f64>::identity(k, k);
        for v in &basis {
            proj -= v * v.transpose();
        }
        // orthonormal basis of the complement of the earlier directions
        let pe = SymmetricEigen::new(proj);
        let cols: Vec<DVector<f64>> = (0..k)
            .filter(|&i| pe.eigenvalues[i] > 0.5)
            .map(|i| pe.eigenvectors.column(i).into_owned())
            .collect();
        let q = DMatrix::from_columns(&cols);
        let reduced = q.transpose() * &c * &q;
        let eig = SymmetricEigen::new((&reduced + reduced.transpose()) * 0.5);
        let mut cands: Vec<(f64, DVector<f64>)> = (0..cols.len())
            .map(|i| (eig.eigenvalues[i], &q * eig.eigenvectors.column(i)))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        if step == 0 {
            gap = (cands[0].0 - cands[1].0) / cands[0].0.abs().max(1e-300);
            first = Some(linv.transpose() * &cands[0].1);
        }
        lambdas.push(cands[0].0);
        basis.push(cands[0].1.clone());
    }
    Oracle {
        lambdas,
        first: first.unwrap(),
        gap,
    }
}

pub fn stationarity(p: &ScatterPair, phis: &[Vec<f64>], lambda: f64) -> f64 {
    let s = to_na(&p.s_self_reg());
    let x = to_na(&p.s_cross);
    let phi = DVector::from_column_slice(phis.last().unwrap());
    let mut r = 2.0 * &x * &phi - 2.0 * lambda * &s * &phi;
    for prev in &phis[..phis.len() - 1] {
        let prev = DVector::from_column_slice(prev);
        let mu = 2.0 * prev.dot(&(&x * &phi));
        r -= mu * &s * &prev;
    }
    let scale = x.norm().max(1.0);
    r.norm() / scale
}

/// Central differences (h = 1e-5) on up to 64 random parameters per block.
pub fn grad_tile(seed: u64, channels: usize) -> Tile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ImageShape::new(40, 40, channels);
    let px = (0..shape.len()).map(|_| rng.random::<f64>()).collect();
    let s = Sample::new("g", shape, px, Label::Negative, vec![]).unwrap();
    split(&s, Grid::new(2, 2)).unwrap().tiles.swap_remove(1)
}

/// Worst relative error and the probes at or above 1e-4.
pub fn gradient_check(channels: usize, label: Label, seed: u64) -> (f64, Vec<String>) {
    let t = grad_tile(seed, channels);
    let arch = Architecture::new(t.shape, 12).unwrap();
    let mut model = init_model(seed, arch.clone());
    // non-zero biases so every parameter block is exercised away from zero
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (_, range) in arch.parameter_blocks() {
        if range.len() < 100 {
            for i in range {
                model.params[i] = rng.random_range(-0.05..0.05);
            }
        }
    }
    let (_, grad) = model.loss_and_gradient(&t, label).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (name, range) in arch.parameter_blocks() {
        let probes: Vec<usize> = if range.len() <= 64 {
            range.clone().collect()
        } else {
            (0..64).map(|_| rng.random_range(range.clone())).collect()
        };
        for i in probes {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = model.loss(&t, label).unwrap();
            model.params[i] = orig - h;
            let down = model.loss(&t, label).unwrap();
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            if rel >= 1e-4 {
                failures.push(format!("{name}[{i}] analytic {a:e} numeric {numeric:e} rel {rel:e}"));
            }
        }
    }
    (worst, failures)
}
