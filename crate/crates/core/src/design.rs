//! Fixed and latent designs, and the Gaussian prior on the latent vector.
//!
//! Grouped and crossed structures are stored as per-observation index arrays;
//! the incidence matrix `Z` is never materialized. For Gaussian-process
//! designs `Z` is the identity and the latent vector has one entry per
//! observation.
//!
//! The Matérn-1.5 kernel uses the `sqrt(3)` convention
//! `k(r) = sigma2 * (1 + sqrt(3) r / ell) * exp(-sqrt(3) r / ell)` with `r` the
//! Euclidean distance between input rows. Length-scale estimates depend on this
//! convention.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// One grouping factor: each observation belongs to exactly one of `m` levels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDesign {
    group_index: Vec<usize>,
    num_groups: usize,
    counts: Vec<usize>,
    // CSR layout of group members
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl GroupedDesign {
    pub fn new(group_index: Vec<usize>, num_groups: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_groups];
        for &g in &group_index {
            if g >= num_groups {
                return Err(Error::Config(format!(
                    "group id {g} out of range for {num_groups} groups"
                )));
            }
            counts[g] += 1;
        }
        let mut offsets = Vec::with_capacity(num_groups + 1);
        offsets.push(0);
        for &c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let mut fill = offsets[..num_groups].to_vec();
        let mut members = vec![0usize; group_index.len()];
        for (i, &g) in group_index.iter().enumerate() {
            members[fill[g]] = i;
            fill[g] += 1;
        }
        Ok(Self {
            group_index,
            num_groups,
            counts,
            offsets,
            members,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.group_index.len()
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn group_index(&self) -> &[usize] {
        &self.group_index
    }

    /// Number of observations in each group.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Observation indices belonging to group `j`, in increasing order.
    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[self.offsets[j]..self.offsets[j + 1]]
    }

    /// Restrict to the observations listed in `rows` (group count unchanged).
    pub fn subset(&self, rows: &[usize]) -> Self {
        let idx = rows.iter().map(|&i| self.group_index[i]).collect();
        Self::new(idx, self.num_groups).expect("ids already validated")
    }
}

/// Two crossed grouping factors over the same observations. The latent vector
/// stacks the first factor's levels followed by the second's.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossedDesign {
    first: GroupedDesign,
    second: GroupedDesign,
}

impl CrossedDesign {
    pub fn new(first: GroupedDesign, second: GroupedDesign) -> Result<Self> {
        if first.n_obs() != second.n_obs() {
            return Err(Error::dims("crossed design factors", first.n_obs(), second.n_obs()));
        }
        Ok(Self { first, second })
    }

    pub fn first(&self) -> &GroupedDesign {
        &self.first
    }

    pub fn second(&self) -> &GroupedDesign {
        &self.second
    }

    pub fn n_obs(&self) -> usize {
        self.first.n_obs()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            first: self.first.subset(rows),
            second: self.second.subset(rows),
        }
    }
}

/// Input locations of a Gaussian-process latent field (`n x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct GpDesign {
    coords: DMatrix<f64>,
}

impl GpDesign {
    pub fn new(coords: DMatrix<f64>) -> Result<Self> {
        if coords.ncols() == 0 {
            return Err(Error::Config("GP design needs at least one input dimension".into()));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("GP coordinates must be finite".into()));
        }
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &DMatrix<f64> {
        &self.coords
    }

    pub fn n_obs(&self) -> usize {
        self.coords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            coords: self.coords.select_rows(rows),
        }
    }

    /// Largest coordinate range over the input dimensions.
    pub fn input_range(&self) -> f64 {
        (0..self.dim())
            .map(|k| {
                let col = self.coords.column(k);
                col.max() - col.min()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatentDesign {
    Grouped(GroupedDesign),
    Crossed(CrossedDesign),
    Gp(GpDesign),
}

impl LatentDesign {
    pub fn n_obs(&self) -> usize {
        match self {
            LatentDesign::Grouped(g) => g.n_obs(),
            LatentDesign::Crossed(c) => c.n_obs(),
            LatentDesign::Gp(g) => g.n_obs(),
        }
    }

    /// Length of the latent vector `b`.
    pub fn latent_dim(&self) -> usize {
        match self {
            LatentDesign::Grouped(g) => g.num_groups(),
            LatentDesign::Crossed(c) => c.first.num_groups() + c.second.num_groups(),
            LatentDesign::Gp(g) => g.n_obs(),
        }
    }

    pub fn kind(&self) -> DesignKind {
        match self {
            LatentDesign::Grouped(_) => DesignKind::Grouped,
            LatentDesign::Crossed(_) => DesignKind::Crossed,
            LatentDesign::Gp(_) => DesignKind::Gp,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        match self {
            LatentDesign::Grouped(g) => LatentDesign::Grouped(g.subset(rows)),
            LatentDesign::Crossed(c) => LatentDesign::Crossed(c.subset(rows)),
            LatentDesign::Gp(g) => LatentDesign::Gp(g.subset(rows)),
        }
    }

    /// Accumulate `Z b` into `out` (length `n`).
    pub fn add_zb(&self, b: &[f64], out: &mut [f64]) {
        match self {
            LatentDesign::Grouped(g) => {
                for (o, &j) in out.iter_mut().zip(g.group_index()) {
                    *o += b[j];
                }
            }
            LatentDesign::Crossed(c) => {
                let m1 = c.first.num_groups();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += b[c.first.group_index[i]] + b[m1 + c.second.group_index[i]];
                }
            }
            LatentDesign::Gp(_) => {
                for (o, &bi) in out.iter_mut().zip(b) {
                    *o += bi;
                }
            }
        }
    }

    /// `Z^T v` for a per-observation vector `v`.
    pub fn zt_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.latent_dim()];
        match self {
            LatentDesign::Grouped(g) => {
                for (&vi, &j) in v.iter().zip(g.group_index()) {
                    out[j] += vi;
                }
            }
            LatentDesign::Crossed(c) => {
                let m1 = c.first.num_groups();
                for (i, &vi) in v.iter().enumerate() {
                    out[c.first.group_index[i]] += vi;
                    out[m1 + c.second.group_index[i]] += vi;
                }
            }
            LatentDesign::Gp(_) => out.copy_from_slice(v),
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Grouped,
    Crossed,
    Gp,
}

/// Fixed-effect design matrix `X` (`n x p`, possibly `p = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct FixedDesign {
    x: DMatrix<f64>,
}

impl FixedDesign {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("fixed design contains non-finite entries".into()));
        }
        Ok(Self { x })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            x: DMatrix::zeros(n, 0),
        }
    }

    pub fn intercept(n: usize) -> Self {
        Self {
            x: DMatrix::from_element(n, 1, 1.0),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_coef(&self) -> usize {
        self.x.ncols()
    }

    /// Index of a column of ones, if any.
    pub fn intercept_column(&self) -> Option<usize> {
        (0..self.n_coef()).find(|&k| self.x.column(k).iter().all(|&v| v == 1.0))
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
        }
    }

    /// `X beta` written into `out`.
    pub fn apply(&self, beta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, &bk) in beta.iter().enumerate() {
            if bk == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(self.x.column(k).iter()) {
                *o += x * bk;
            }
        }
    }
}

/// `mu = X beta + Z b`.
pub fn linear_predictor(
    fixed: &FixedDesign,
    beta: &[f64],
    latent: &LatentDesign,
    b: &[f64],
) -> Result<Vec<f64>> {
    let n = latent.n_obs();
    if fixed.n_obs() != n {
        return Err(Error::dims("fixed design rows", n, fixed.n_obs()));
    }
    if beta.len() != fixed.n_coef() {
        return Err(Error::dims("beta", fixed.n_coef(), beta.len()));
    }
    if b.len() != latent.latent_dim() {
        return Err(Error::dims("latent vector", latent.latent_dim(), b.len()));
    }
    let mut mu = vec![0.0; n];
    fixed.apply(beta, &mut mu);
    latent.add_zb(b, &mut mu);
    Ok(mu)
}

/// Per-observation weights for `Z^T diag(d) Z`.
#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    Constant(f64),
    PerObservation(&'a [f64]),
}

impl Weights<'_> {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            Weights::Constant(c) => *c,
            Weights::PerObservation(d) => d[i],
        }
    }
}

/// Structured `Z^T diag(d) Z`.
#[derive(Debug, Clone, PartialEq)]
pub enum ZtdZ {
    /// Grouped and GP designs: a diagonal matrix.
    Diagonal(Vec<f64>),
    /// Crossed designs: diagonal blocks for each factor and the weighted
    /// co-occurrence block (`m1 x m2`) between them.
    Crossed {
        first: Vec<f64>,
        second: Vec<f64>,
        cross: DMatrix<f64>,
    },
}

impl ZtdZ {
    pub fn dim(&self) -> usize {
        match self {
            ZtdZ::Diagonal(d) => d.len(),
            ZtdZ::Crossed { first, second, .. } => first.len() + second.len(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            ZtdZ::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            ZtdZ::Crossed {
                first,
                second,
                cross,
            } => {
                let (m1, m2) = (first.len(), second.len());
                let mut out = DMatrix::zeros(m1 + m2, m1 + m2);
                for j in 0..m1 {
                    out[(j, j)] = first[j];
                }
                for k in 0..m2 {
                    out[(m1 + k, m1 + k)] = second[k];
                }
                out.view_mut((0, m1), (m1, m2)).copy_from(cross);
                out.view_mut((m1, 0), (m2, m1)).copy_from(&cross.transpose());
                out
            }
        }
    }
}

pub fn ztdz(latent: &LatentDesign, diag: Weights<'_>) -> Result<ZtdZ> {
    let n = latent.n_obs();
    if let Weights::PerObservation(d) = diag {
        if d.len() != n {
            return Err(Error::dims("ztdz weights", n, d.len()));
        }
    }
    Ok(match latent {
        LatentDesign::Grouped(g) => {
            let mut out = vec![0.0; g.num_groups()];
            for (i, &j) in g.group_index().iter().enumerate() {
                out[j] += diag.at(i);
            }
            ZtdZ::Diagonal(out)
        }
        LatentDesign::Crossed(c) => {
            let (m1, m2) = (c.first.num_groups(), c.second.num_groups());
            let mut first = vec![0.0; m1];
            let mut second = vec![0.0; m2];
            let mut cross = DMatrix::zeros(m1, m2);
            for i in 0..n {
                let (j, k) = (c.first.group_index[i], c.second.group_index[i]);
                let w = diag.at(i);
                first[j] += w;
                second[k] += w;
                cross[(j, k)] += w;
            }
            ZtdZ::Crossed {
                first,
                second,
                cross,
            }
        }
        LatentDesign::Gp(_) => ZtdZ::Diagonal((0..n).map(|i| diag.at(i)).collect()),
    })
}

/// Covariance parameters of the latent Gaussian prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorCovParams {
    Grouped { sigma2: f64 },
    Crossed { sigma2: [f64; 2] },
    Gp { sigma2: f64, length_scale: f64 },
}

impl PriorCovParams {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    value: v,
                    reason: "must be positive and finite",
                })
            }
        };
        match *self {
            PriorCovParams::Grouped { sigma2 } => check("sigma2", sigma2),
            PriorCovParams::Crossed { sigma2 } => {
                check("sigma2[0]", sigma2[0])?;
                check("sigma2[1]", sigma2[1])
            }
            PriorCovParams::Gp {
                sigma2,
                length_scale,
            } => {
                check("sigma2", sigma2)?;
                check("length_scale", length_scale)
            }
        }
    }

    pub fn kind(&self) -> DesignKind {
        match self {
            PriorCovParams::Grouped { .. } => DesignKind::Grouped,
            PriorCovParams::Crossed { .. } => DesignKind::Crossed,
            PriorCovParams::Gp { .. } => DesignKind::Gp,
        }
    }

    /// Parameters on the log scale used by the optimizer.
    pub fn to_log(&self) -> Vec<f64> {
        match *self {
            PriorCovParams::Grouped { sigma2 } => vec![sigma2.ln()],
            PriorCovParams::Crossed { sigma2 } => vec![sigma2[0].ln(), sigma2[1].ln()],
            PriorCovParams::Gp {
                sigma2,
                length_scale,
            } => vec![sigma2.ln(), length_scale.ln()],
        }
    }

    pub fn from_log(kind: DesignKind, v: &[f64]) -> Self {
        match kind {
            DesignKind::Grouped => PriorCovParams::Grouped { sigma2: v[0].exp() },
            DesignKind::Crossed => PriorCovParams::Crossed {
                sigma2: [v[0].exp(), v[1].exp()],
            },
            DesignKind::Gp => PriorCovParams::Gp {
                sigma2: v[0].exp(),
                length_scale: v[1].exp(),
            },
        }
    }

    pub fn n_params(kind: DesignKind) -> usize {
        match kind {
            DesignKind::Grouped => 1,
            DesignKind::Crossed | DesignKind::Gp => 2,
        }
    }
}

/// Matérn-1.5 correlation as a function of distance.
#[inline]
pub fn matern15_kernel(r: f64, sigma2: f64, length_scale: f64) -> f64 {
    let s = 3f64.sqrt() * r / length_scale;
    sigma2 * (1.0 + s) * (-s).exp()
}

/// Dense Matérn-1.5 covariance between the rows of `a` and the rows of `b`.
pub fn matern15_cross(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma2: f64, length_scale: f64) -> DMatrix<f64> {
    let d = a.ncols();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut r2 = 0.0;
        for k in 0..d {
            let t = a[(i, k)] - b[(j, k)];
            r2 += t * t;
        }
        matern15_kernel(r2.sqrt(), sigma2, length_scale)
    })
}

/// Matérn-1.5 covariance of a GP design.
pub fn matern15(design: &GpDesign, sigma2: f64, length_scale: f64) -> DMatrix<f64> {
    let x = design.coords();
    let n = x.nrows();
    let d = x.ncols();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = sigma2;
        for i in (j + 1)..n {
            let mut r2 = 0.0;
            for c in 0..d {
                let t = x[(i, c)] - x[(j, c)];
                r2 += t * t;
            }
            let v = matern15_kernel(r2.sqrt(), sigma2, length_scale);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of `K + eps I`, growing `eps` from `1e-10 scale` by factors
/// of ten up to `1e-4 scale`.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let max_jitter = 1e-4 * scale;
    let mut eps = 1e-10 * scale;
    while eps <= max_jitter * (1.0 + 1e-12) {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += eps;
        }
        if let Some(ch) = kj.cholesky() {
            return Ok((ch, eps));
        }
        eps *= 10.0;
    }
    Err(Error::SingularCovariance { max_jitter })
}

pub(crate) fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Dense Cholesky factor of a symmetric positive definite matrix, used for
/// the large `n x n` systems of GP designs.
#[derive(Clone)]
pub(crate) struct SpdFactor {
    llt: faer::linalg::solvers::Llt<f64>,
    n: usize,
}

impl std::fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdFactor").field("n", &self.n).finish_non_exhaustive()
    }
}

impl SpdFactor {
    pub(crate) fn new(a: &DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        let view = faer::MatRef::from_column_major_slice(a.as_slice(), n, n);
        let llt = view.llt(faer::Side::Lower).ok()?;
        Some(Self { llt, n })
    }

    /// `A^{-1} v`.
    pub(crate) fn solve(&self, v: &[f64]) -> Vec<f64> {
        use faer::linalg::solvers::Solve;
        let mut out = v.to_vec();
        self.llt
            .solve_in_place(faer::MatMut::from_column_major_slice_mut(&mut out, self.n, 1));
        out
    }

    /// `L^{-1} B` for the lower factor `L`.
    pub(crate) fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        let cols = out.ncols();
        self.llt
            .L()
            .solve_lower_triangular_in_place(faer::MatMut::from_column_major_slice_mut(out.as_mut_slice(), self.n, cols));
        out
    }

    pub(crate) fn logdet(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..self.n).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Gaussian prior `N(0, K_theta)` on the latent vector.
#[derive(Debug, Clone)]
pub enum GaussianPrior {
    /// Independent coordinates (grouped and crossed designs).
    Diagonal { variances: Vec<f64> },
    /// Dense covariance (GP designs), factorized with jitter.
    Dense {
        cov: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
        jitter: f64,
    },
}

impl GaussianPrior {
    pub fn new(latent: &LatentDesign, params: &PriorCovParams) -> Result<Self> {
        params.validate()?;
        match (latent, params) {
            (LatentDesign::Grouped(g), PriorCovParams::Grouped { sigma2 }) => Ok(GaussianPrior::Diagonal {
                variances: vec![*sigma2; g.num_groups()],
            }),
            (LatentDesign::Crossed(c), PriorCovParams::Crossed { sigma2 }) => {
                let mut variances = vec![sigma2[0]; c.first().num_groups()];
                variances.extend(std::iter::repeat_n(sigma2[1], c.second().num_groups()));
                Ok(GaussianPrior::Diagonal { variances })
            }
            (
                LatentDesign::Gp(g),
                PriorCovParams::Gp {
                    sigma2,
                    length_scale,
                },
            ) => {
                let cov = matern15(g, *sigma2, *length_scale);
                let (chol, jitter) = cholesky_with_jitter(&cov, *sigma2)?;
                Ok(GaussianPrior::Dense { cov, chol, jitter })
            }
            _ => Err(Error::Config(format!(
                "prior parameters of kind {:?} do not match a {:?} design",
                params.kind(),
                latent.kind()
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GaussianPrior::Diagonal { variances } => variances.len(),
            GaussianPrior::Dense { cov, .. } => cov.nrows(),
        }
    }

    /// `K^{-1} v`.
    pub fn precision_apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            GaussianPrior::Diagonal { variances } => v.iter().zip(variances).map(|(x, s)| x / s).collect(),
            GaussianPrior::Dense { chol, .. } => {
                chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec()
            }
        }
    }

    pub fn logdet(&self) -> f64 {
        match self {
            GaussianPrior::Diagonal { variances } => variances.iter().map(|s| s.ln()).sum(),
            GaussianPrior::Dense { chol, .. } => chol_logdet(chol),
        }
    }

    pub fn logdensity(&self, b: &[f64]) -> Result<f64> {
        if b.len() != self.dim() {
            return Err(Error::dims("prior log-density", self.dim(), b.len()));
        }
        let quad: f64 = b.iter().zip(self.precision_apply(b)).map(|(x, y)| x * y).sum();
        Ok(-0.5 * quad - 0.5 * self.logdet() - 0.5 * b.len() as f64 * LN_2PI)
    }
}
