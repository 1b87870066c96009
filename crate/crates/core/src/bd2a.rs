//! Bias discriminant directions.
//!
//! Given key-tile embeddings, find directions φ along which samples of the
//! *other* label spread far from the *self* label's mean while the self
//! label stays compact:
//!
//! ```text
//! L(φ) = φᵀ S_cross φ / φᵀ S_self φ
//! ```
//!
//! Successive directions maximize the same ratio subject to
//! `φⱼᵀ S_self φᵢ = 0` for all earlier `i`, which makes the projected
//! self-label features mutually uncorrelated.

use std::fmt;
use std::path::Path;

pub use faer::Mat;
use faer::Side;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::klotski::EmbeddingTable;

const BUNDLE_MAGIC: &[u8; 4] = b"BLDB";
const BUNDLE_VERSION: u32 = 1;

const RIDGE_ABS: f64 = 1e-10;
const RIDGE_REL: f64 = 1e-6;
/// Accept an eigenvalue as real when |im| ≤ REAL_TOL·|re|.
const REAL_TOL: f64 = 1e-8;
pub const CONSTRAINT_TOL: f64 = 1e-8;

/// Which label plays the "self" role. `Positive` finds attributes that
/// make negatives look positive; `Negative` swaps the roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn self_label(self) -> Label {
        match self {
            Polarity::Positive => Label::Positive,
            Polarity::Negative => Label::Negative,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }

    pub fn parse(s: &str) -> Option<Polarity> {
        match s {
            "positive" | "pos" | "+1" | "1" => Some(Polarity::Positive),
            "negative" | "neg" | "-1" => Some(Polarity::Negative),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct ScatterPair {
    pub s_self: Mat<f64>,
    /// Other-label rows centered on the self-label mean.
    pub s_cross: Mat<f64>,
    pub mean_self: Vec<f64>,
    pub polarity: Polarity,
    pub n_self: usize,
    pub n_other: usize,
}

impl ScatterPair {
    pub fn dim(&self) -> usize {
        self.mean_self.len()
    }

    /// `max(1e-10, 1e-6 · trace(S_self) / K)`
    pub fn ridge(&self) -> f64 {
        let k = self.dim();
        let trace: f64 = (0..k).map(|i| self.s_self[(i, i)]).sum();
        RIDGE_ABS.max(RIDGE_REL * trace / k as f64)
    }

    pub fn s_self_reg(&self) -> Mat<f64> {
        let r = self.ridge();
        let mut s = self.s_self.clone();
        for i in 0..self.dim() {
            s[(i, i)] += r;
        }
        s
    }
}

fn rows_of<'a>(table: &'a EmbeddingTable, label: Label) -> Vec<&'a [f64]> {
    table
        .rows
        .iter()
        .filter(|r| r.label == label)
        .map(|r| r.u.as_slice())
        .collect()
}

fn mean(rows: &[&[f64]], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k];
    for r in rows {
        for (a, b) in m.iter_mut().zip(*r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

/// Mean of `(u - center)(u - center)ᵀ` over `rows`.
fn centered_scatter(rows: &[&[f64]], center: &[f64]) -> Mat<f64> {
    let k = center.len();
    let mut s = Mat::<f64>::zeros(k, k);
    let mut d = vec![0.0; k];
    for r in rows {
        for i in 0..k {
            d[i] = r[i] - center[i];
        }
        for i in 0..k {
            for j in i..k {
                s[(i, j)] += d[i] * d[j];
            }
        }
    }
    let n = rows.len() as f64;
    for i in 0..k {
        for j in i..k {
            let v = s[(i, j)] / n;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Mean and scatter of the rows carrying `label`.
pub(crate) fn label_scatter(table: &EmbeddingTable, label: Label) -> Result<(Vec<f64>, Mat<f64>, usize)> {
    table.validate()?;
    let rows = rows_of(table, label);
    if rows.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 embeddings labeled {label}, found {}",
            rows.len()
        )));
    }
    let m = mean(&rows, table.k);
    let s = centered_scatter(&rows, &m);
    Ok((m, s, rows.len()))
}

pub fn compute_scatter(table: &EmbeddingTable, polarity: Polarity) -> Result<ScatterPair> {
    let self_label = polarity.self_label();
    let (mean_self, s_self, n_self) = label_scatter(table, self_label)?;
    let other = rows_of(table, self_label.opposite());
    if other.len() < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 embeddings labeled {}, found {}",
            self_label.opposite(),
            other.len()
        )));
    }
    let s_cross = centered_scatter(&other, &mean_self);
    Ok(ScatterPair {
        s_self,
        s_cross,
        mean_self,
        polarity,
        n_self,
        n_other: other.len(),
    })
}

fn quad(m: &Mat<f64>, a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    let mut acc = 0.0;
    for i in 0..k {
        let mut row = 0.0;
        for j in 0..k {
            row += m[(i, j)] * b[j];
        }
        acc += a[i] * row;
    }
    acc
}

/// `φᵀ S_cross φ / φᵀ S_self_reg φ`
pub fn criterion(phi: &[f64], scatter: &ScatterPair) -> Result<f64> {
    if phi.len() != scatter.dim() {
        return Err(Error::dims("direction", scatter.dim(), phi.len()));
    }
    let den = quad(&scatter.s_self_reg(), phi, phi);
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "criterion denominator {den} is not positive"
        )));
    }
    Ok(quad(&scatter.s_cross, phi, phi) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionBundle {
    pub polarity: Polarity,
    /// Row `i` is direction `φᵢ`.
    pub phi: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
    /// Ridge added to `S_self`; zero for bundles that never used one.
    pub ridge: f64,
}

impl DirectionBundle {
    pub fn k(&self) -> usize {
        self.phi.len()
    }

    pub fn dim(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }

    /// Keep only the first `k` directions.
    pub fn truncated(&self, k: usize) -> DirectionBundle {
        DirectionBundle {
            polarity: self.polarity,
            phi: self.phi[..k.min(self.k())].to_vec(),
            lambdas: self.lambdas[..k.min(self.k())].to_vec(),
            ridge: self.ridge,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(BUNDLE_MAGIC, BUNDLE_VERSION);
        w.u8(self.polarity.code());
        w.u32(self.k() as u32);
        w.u32(self.dim() as u32);
        w.f64(self.ridge);
        w.f64s(&self.lambdas);
        for row in &self.phi {
            w.f64s(row);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (mut r, version) = ByteReader::open(bytes, BUNDLE_MAGIC, path)?;
        if version != BUNDLE_VERSION {
            return Err(r.err(format!("unsupported direction bundle version {version}")));
        }
        let polarity = match r.u8()? {
            0 => Polarity::Positive,
            1 => Polarity::Negative,
            p => return Err(r.err(format!("unknown polarity code {p}"))),
        };
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let ridge = r.f64()?;
        let lambdas = r.f64s(k)?;
        let phi = (0..k).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(DirectionBundle {
            polarity,
            phi,
            lambdas,
            ridge,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// In-place lower-triangular solve `L x = b`.
fn forward(l: &Mat<f64>, b: &mut [f64]) {
    for i in 0..b.len() {
        let mut v = b[i];
        for j in 0..i {
            v -= l[(i, j)] * b[j];
        }
        b[i] = v / l[(i, i)];
    }
}

/// In-place upper-triangular solve `Lᵀ x = b`.
fn backward_t(l: &Mat<f64>, b: &mut [f64]) {
    for i in (0..b.len()).rev() {
        let mut v = b[i];
        for j in i + 1..b.len() {
            v -= l[(j, i)] * b[j];
        }
        b[i] = v / l[(i, i)];
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest-magnitude coordinate made positive (first one on ties).
pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Ordered discriminant directions, each maximizing the criterion under
/// conjugate orthogonality to the previous ones.
///
/// Each step solves `[I − S Φᵀ Φ] S_cross φ = λ S φ` with `S` the ridged
/// self scatter. Writing `S = L Lᵀ` and `ψ = Lᵀ φ` turns it into the
/// standard eigenproblem `(I − ΨᵀΨ) L⁻¹ S_cross L⁻ᵀ ψ = λ ψ`,
/// which is solved on the complement of Ψ by a dense nonsymmetric
/// eigensolver.
pub fn solve_directions(scatter: &ScatterPair, k: usize) -> Result<DirectionBundle> {
    let dim = scatter.dim();
    if k == 0 || k > dim {
        return Err(Error::InvalidArgument(format!(
            "number of directions {k} must be in 1..={dim} (embedding dimension)"
        )));
    }
    let ridge = scatter.ridge();
    let s_reg = scatter.s_self_reg();
    let llt = s_reg
        .llt(Side::Lower)
        .map_err(|e| Error::EigenSolve(format!("Cholesky of regularized self scatter: {e:?}")))?;
    let l = llt.L().to_owned();

    // C = L⁻¹ S_cross L⁻ᵀ, built column by column then symmetrized.
    let mut c = Mat::<f64>::zeros(dim, dim);
    {
        let mut tmp = Mat::<f64>::zeros(dim, dim);
        let mut col = vec![0.0; dim];
        for j in 0..dim {
            for i in 0..dim {
                col[i] = scatter.s_cross[(i, j)];
            }
            forward(&l, &mut col);
            for i in 0..dim {
                tmp[(i, j)] = col[i];
            }
        }
        // C = (L⁻¹ (L⁻¹ S_cross)ᵀ)ᵀ; S_cross symmetric so C = L⁻¹ Tᵀ
        for i in 0..dim {
            for j in 0..dim {
                col[j] = tmp[(i, j)];
            }
            forward(&l, &mut col);
            for j in 0..dim {
                c[(i, j)] = col[j];
            }
        }
        for i in 0..dim {
            for j in i + 1..dim {
                let v = 0.5 * (c[(i, j)] + c[(j, i)]);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
    }
    let c_norm = (0..dim)
        .flat_map(|i| (0..dim).map(move |j| (i, j)))
        .map(|(i, j)| c[(i, j)].abs())
        .fold(0.0, f64::max);

    let mut psis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut phis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut lambdas: Vec<f64> = Vec::with_capacity(k);

    for step in 0..k {
        // M = (I − ΨᵀΨ) C (I − ΨᵀΨ): the constrained operator restricted to
        // the feasible subspace. It shares every eigenpair with ψ ⊥ Ψ with
        // (I − ΨᵀΨ) C, but stays symmetric, so clustered eigenvalues do not
        // split into spurious complex pairs.
        let mut m = c.clone();
        for p in &psis {
            // m ← (I − p pᵀ) m (I − p pᵀ)
            let mp: Vec<f64> = (0..dim).map(|i| (0..dim).map(|j| m[(i, j)] * p[j]).sum()).collect();
            let pmp = dot(p, &mp);
            for i in 0..dim {
                for j in 0..dim {
                    m[(i, j)] += -p[i] * mp[j] - mp[i] * p[j] + p[i] * p[j] * pmp;
                }
            }
        }
        for i in 0..dim {
            for j in i + 1..dim {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let eig = m
            .eigen()
            .map_err(|e| Error::EigenSolve(format!("step {}: {e:?}", step + 1)))?;
        let values = eig.S().column_vector();
        let vectors = eig.U();
        // An exactly zero eigenvalue comes back with rounding noise in both
        // parts, so the realness test gets an absolute floor tied to |C|.
        let floor = 1e-12 * c_norm.max(f64::MIN_POSITIVE);
        let mut candidates: Vec<(usize, f64)> = (0..dim)
            .filter(|&i| {
                let z = values[i];
                z.im.abs() <= REAL_TOL * z.re.abs() || z.im.abs() <= floor
            })
            .map(|i| (i, values[i].re))
            .collect();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut chosen = None;
        for &(idx, _) in &candidates {
            let re: Vec<f64> = (0..dim).map(|i| vectors[(i, idx)].re).collect();
            let im: Vec<f64> = (0..dim).map(|i| vectors[(i, idx)].im).collect();
            let mut psi = if dot(&re, &re) >= dot(&im, &im) { re } else { im };
            let before = dot(&psi, &psi).sqrt();
            if before == 0.0 {
                continue;
            }
            // Eigenvectors of nonzero eigenvalues already lie in the
            // complement of Ψ; for λ = 0 the eigenspace may not.
            for p in &psis {
                let a = dot(p, &psi);
                psi.iter_mut().zip(p).for_each(|(x, y)| *x -= a * y);
            }
            let after = dot(&psi, &psi).sqrt();
            if after <= 1e-6 * before {
                continue;
            }
            psi.iter_mut().for_each(|x| *x /= after);
            chosen = Some(psi);
            break;
        }
        let psi = chosen.ok_or_else(|| {
            Error::EigenSolve(format!(
                "step {}: no real eigenvector outside the span of earlier directions",
                step + 1
            ))
        })?;

        let mut phi = psi.clone();
        backward_t(&l, &mut phi);
        // The back-substitution amplifies rounding by the conditioning of
        // S, so restore conjugacy to earlier directions in S's own metric.
        for _ in 0..2 {
            for prev in &phis {
                let a = quad(&s_reg, prev, &phi);
                phi.iter_mut().zip(prev).for_each(|(x, y)| *x -= a * y);
            }
            let norm = quad(&s_reg, &phi, &phi).sqrt();
            phi.iter_mut().for_each(|x| *x /= norm);
        }
        fix_sign(&mut phi);
        let mut psi = phi.clone();
        // ψ = Lᵀ φ, recomputed after the sign fix
        for i in 0..dim {
            psi[i] = (i..dim).map(|r| l[(r, i)] * phi[r]).sum();
        }

        let lambda = quad(&scatter.s_cross, &phi, &phi);
        let norm_res = (quad(&s_reg, &phi, &phi) - 1.0).abs();
        if norm_res > CONSTRAINT_TOL {
            return Err(Error::ConstraintViolation {
                step: step + 1,
                constraint: "normalization",
                residual: norm_res,
                tolerance: CONSTRAINT_TOL,
            });
        }
        for prev in &phis {
            let res = quad(&s_reg, &phi, prev).abs();
            if res > CONSTRAINT_TOL {
                return Err(Error::ConstraintViolation {
                    step: step + 1,
                    constraint: "conjugate orthogonality",
                    residual: res,
                    tolerance: CONSTRAINT_TOL,
                });
            }
        }
        if let Some(&last) = lambdas.last() {
            let slack = 1e-12 * lambdas[0].abs().max(1.0);
            if lambda > last + slack {
                return Err(Error::ConstraintViolation {
                    step: step + 1,
                    constraint: "nonincreasing criterion",
                    residual: lambda - last,
                    tolerance: slack,
                });
            }
        }
        psis.push(psi);
        phis.push(phi);
        lambdas.push(lambda);
    }
    Ok(DirectionBundle {
        polarity: scatter.polarity,
        phi: phis,
        lambdas,
        ridge,
    })
}

/// Row `n`, column `i` is `φᵢ · uₙ`.
pub fn project(table: &EmbeddingTable, bundle: &DirectionBundle) -> Result<Vec<Vec<f64>>> {
    if table.k != bundle.dim() {
        return Err(Error::dims("embedding dimension for projection", bundle.dim(), table.k));
    }
    table.validate()?;
    Ok(table
        .rows
        .iter()
        .map(|r| bundle.phi.iter().map(|p| dot(p, &r.u)).collect())
        .collect())
}

/// `(k, λ_k)` for `k = 1..=k_max`.
pub fn criterion_curve(scatter: &ScatterPair, k_max: usize) -> Result<Vec<(usize, f64)>> {
    let b = solve_directions(scatter, k_max)?;
    Ok(b.lambdas.into_iter().enumerate().map(|(i, l)| (i + 1, l)).collect())
}

pub fn curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("k,lambda\n");
    for (k, l) in curve {
        s.push_str(&format!("{k},{l}\n"));
    }
    s
}
