//! Planar warp parameterizations and their composition algebra.
//!
//! Both families are parameterized as displacements from the identity, so
//! the zero vector is always the identity warp:
//!
//! ```text
//! affine (6 dof):          homography (8 dof):
//! | 1+p1   p2   p3 |       | 1+p1   p2   p3 |
//! |  p4  1+p5   p6 |       |  p4  1+p5   p6 |
//! |  0     0    1  |       |  p7    p8   1  |
//! ```
//!
//! Composition is defined through the matrix product with the update on the
//! left, `M(compose(p, dp)) = M(dp) * M(p)` up to scale, and the homography
//! representative is always renormalized so the bottom-right entry is
//! exactly 1. `compose_jacobians` gives the exact derivatives of that
//! operation, which is what lets warp updates be chained inside a network
//! without finite differences.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, Matrix3, Vector2};

/// Warp family: affine (6 parameters) or homography (8 parameters).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpFamily {
    Affine,
    Homography,
}

impl WarpFamily {
    pub fn dof(self) -> usize {
        match self {
            WarpFamily::Affine => 6,
            WarpFamily::Homography => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WarpFamily::Affine => "affine",
            WarpFamily::Homography => "homography",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(WarpFamily::Affine),
            "homography" => Ok(WarpFamily::Homography),
            other => Err(Error::Config(format!("unknown warp family {other:?}"))),
        }
    }
}

/// Row-major matrix slot of each parameter, shared by both families
/// (the affine family just stops at p6).
const SLOTS: [(usize, usize); 8] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 0),
    (1, 1),
    (1, 2),
    (2, 0),
    (2, 1),
];

/// A warp as a displacement-from-identity parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpParams {
    family: WarpFamily,
    p: Vec<f64>,
}

impl WarpParams {
    pub fn identity(family: WarpFamily) -> Self {
        WarpParams {
            family,
            p: vec![0.0; family.dof()],
        }
    }

    pub fn new(family: WarpFamily, p: Vec<f64>) -> Result<Self> {
        if p.len() != family.dof() {
            return Err(Error::Config(format!(
                "{} warp needs {} parameters, got {}",
                family.name(),
                family.dof(),
                p.len()
            )));
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateWarp("non-finite warp parameter".into()));
        }
        Ok(WarpParams { family, p })
    }

    pub fn family(&self) -> WarpFamily {
        self.family
    }

    pub fn dof(&self) -> usize {
        self.p.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.p
    }

    /// Identity plus the parameter displacements.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let mut m = Matrix3::identity();
        for (i, &(r, c)) in SLOTS.iter().take(self.p.len()).enumerate() {
            m[(r, c)] += self.p[i];
        }
        m
    }

    /// Parameters of a 3x3 matrix, normalizing scale so the bottom-right
    /// entry is exactly 1. Rejects matrices outside the family.
    pub fn from_matrix(family: WarpFamily, m: &Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if s.abs() < 1e-14 {
            return Err(Error::DegenerateWarp(
                "matrix has (near-)zero bottom-right entry".into(),
            ));
        }
        let m = m / s;
        if family == WarpFamily::Affine {
            let tol = 1e-9;
            if m[(2, 0)].abs() > tol || m[(2, 1)].abs() > tol {
                return Err(Error::DegenerateWarp(format!(
                    "matrix is not affine: bottom row [{:.3e}, {:.3e}, 1]",
                    m[(2, 0)],
                    m[(2, 1)]
                )));
            }
        }
        let mut p = vec![0.0; family.dof()];
        for (i, &(r, c)) in SLOTS.iter().take(p.len()).enumerate() {
            p[i] = m[(r, c)] - if r == c { 1.0 } else { 0.0 };
        }
        WarpParams::new(family, p)
    }

    /// Warp composition with the update applied on the left:
    /// `M(out) = M(dp) * M(self)`, renormalized.
    pub fn compose(&self, dp: &WarpParams) -> Result<WarpParams> {
        if dp.family != self.family {
            return Err(Error::Config("composing warps of different families".into()));
        }
        let m = dp.to_matrix() * self.to_matrix();
        WarpParams::from_matrix(self.family, &m)
    }

    /// Inverse warp, `M(out) = M(self)^-1` renormalized.
    pub fn invert(&self) -> Result<WarpParams> {
        let inv = self
            .to_matrix()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateWarp("warp matrix is singular".into()))?;
        WarpParams::from_matrix(self.family, &inv)
    }

    /// Map one point, with perspective division for homographies.
    pub fn apply(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let m = self.to_matrix();
        let u = m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)];
        let v = m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)];
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() < 1e-12 {
            return Err(Error::DegenerateWarp(format!(
                "point ({x}, {y}) maps to the line at infinity"
            )));
        }
        Ok((u / w, v / w))
    }

    /// Images of the four canonical corners, in [`canonical_corners`] order.
    pub fn warp_corners(&self) -> Result<[(f64, f64); 4]> {
        let mut out = [(0.0, 0.0); 4];
        for (o, &(x, y)) in out.iter_mut().zip(canonical_corners().iter()) {
            *o = self.apply(x, y)?;
        }
        Ok(out)
    }
}

/// Corners of the canonical square, y down: top-left, top-right,
/// bottom-right, bottom-left.
pub fn canonical_corners() -> [(f64, f64); 4] {
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
}

/// Exact Jacobians of `out = compose(p_in, dp)` with respect to both
/// arguments, each `dof x dof`.
///
/// For the affine family the product never touches the bottom row, so the
/// blocks have a closed form in the raw parameters. The homography family
/// goes through the scale normalization, handled with the quotient rule.
pub fn compose_jacobians(p_in: &WarpParams, dp: &WarpParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if p_in.family != dp.family {
        return Err(Error::Config("composing warps of different families".into()));
    }
    match p_in.family {
        WarpFamily::Affine => Ok(affine_compose_jacobians(p_in.as_slice(), dp.as_slice())),
        WarpFamily::Homography => homography_compose_jacobians(p_in, dp),
    }
}

fn affine_compose_jacobians(pi: &[f64], dp: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    // out1 = dp1 + pi1 + dp1*pi1 + dp2*pi4, and cyclic shifts of that
    // pattern; differentiating gives two block-sparse 6x6 matrices.
    let mut d_in = DMatrix::zeros(6, 6);
    for col_block in 0..3 {
        d_in[(col_block, col_block)] = 1.0 + dp[0];
        d_in[(col_block, col_block + 3)] = dp[1];
        d_in[(col_block + 3, col_block)] = dp[3];
        d_in[(col_block + 3, col_block + 3)] = 1.0 + dp[4];
    }
    let mut d_dp = DMatrix::zeros(6, 6);
    for row_block in [0, 3] {
        d_dp[(row_block, row_block)] = 1.0 + pi[0];
        d_dp[(row_block, row_block + 1)] = pi[3];
        d_dp[(row_block + 1, row_block)] = pi[1];
        d_dp[(row_block + 1, row_block + 1)] = 1.0 + pi[4];
        d_dp[(row_block + 2, row_block)] = pi[2];
        d_dp[(row_block + 2, row_block + 1)] = pi[5];
        d_dp[(row_block + 2, row_block + 2)] = 1.0;
    }
    (d_in, d_dp)
}

fn homography_compose_jacobians(
    p_in: &WarpParams,
    dp: &WarpParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let pm = p_in.to_matrix();
    let dm = dp.to_matrix();
    let c = dm * pm;
    let c22 = c[(2, 2)];
    if c22.abs() < 1e-14 {
        return Err(Error::DegenerateWarp(
            "composition normalizer vanished".into(),
        ));
    }
    let inv = 1.0 / c22;
    let inv2 = inv * inv;

    // out_k = C[slot_k] / c22 (minus a constant), so for any scalar input t:
    // d out_k = (dC[slot_k] * c22 - C[slot_k] * dC[2,2]) / c22^2.
    let mut d_in = DMatrix::zeros(8, 8);
    let mut d_dp = DMatrix::zeros(8, 8);
    for (j, &(jr, jc)) in SLOTS.iter().enumerate() {
        // dC/d(p_in_j) = dm * E_{jr,jc}: column jc of dC is column jr of dm.
        let dcol = dm.column(jr);
        let dc22_in = if jc == 2 { dcol[2] } else { 0.0 };
        // dC/d(dp_j) = E_{jr,jc} * pm: row jr of dC is row jc of pm.
        let drow = pm.row(jc);
        let dc22_dp = if jr == 2 { drow[2] } else { 0.0 };
        for (k, &(kr, kc)) in SLOTS.iter().enumerate() {
            let dck_in = if kc == jc { dcol[kr] } else { 0.0 };
            d_in[(k, j)] = dck_in * inv - c[(kr, kc)] * dc22_in * inv2;
            let dck_dp = if kr == jr { drow[kc] } else { 0.0 };
            d_dp[(k, j)] = dck_dp * inv - c[(kr, kc)] * dc22_dp * inv2;
        }
    }
    Ok((d_in, d_dp))
}

/// Fit the warp mapping `src` points onto `dst` points.
///
/// Affine fits by linear least squares (exact when the correspondences are
/// consistent); homography solves the 8x8 direct linear system. Both reject
/// degenerate configurations.
pub fn fit_warp_to_points(
    family: WarpFamily,
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
) -> Result<WarpParams> {
    if src.len() != dst.len() || src.len() < family.dof() / 2 {
        return Err(Error::Config(format!(
            "warp fit needs at least {} point pairs, got {}/{}",
            family.dof() / 2,
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    let dof = family.dof();
    let mut a = DMatrix::zeros(2 * n, dof);
    let mut b = DMatrix::zeros(2 * n, 1);
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst.iter()).enumerate() {
        // u = ((1+p1) x + p2 y + p3) / (p7 x + p8 y + 1), linearized by
        // multiplying through; affine rows simply drop the p7/p8 columns.
        a[(2 * i, 0)] = x;
        a[(2 * i, 1)] = y;
        a[(2 * i, 2)] = 1.0;
        b[(2 * i, 0)] = u - x;
        a[(2 * i + 1, 3)] = x;
        a[(2 * i + 1, 4)] = y;
        a[(2 * i + 1, 5)] = 1.0;
        b[(2 * i + 1, 0)] = v - y;
        if family == WarpFamily::Homography {
            a[(2 * i, 6)] = -u * x;
            a[(2 * i, 7)] = -u * y;
            a[(2 * i + 1, 6)] = -v * x;
            a[(2 * i + 1, 7)] = -v * y;
        }
    }
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if min_sv < 1e-10 * max_sv.max(1.0) {
        return Err(Error::DegenerateWarp(
            "point configuration does not determine the warp".into(),
        ));
    }
    let sol = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::IllConditioned(e.to_string()))?;
    WarpParams::new(family, sol.column(0).iter().cloned().collect())
}

/// Mean L2 distance between the canonical corners mapped by two warps.
/// This is the alignment error metric: zero iff the warps agree on the
/// canonical square.
pub fn mean_corner_error(a: &WarpParams, b: &WarpParams) -> Result<f64> {
    let ca = a.warp_corners()?;
    let cb = b.warp_corners()?;
    let total: f64 = ca
        .iter()
        .zip(cb.iter())
        .map(|(&(ax, ay), &(bx, by))| Vector2::new(ax - bx, ay - by).norm())
        .sum();
    Ok(total / 4.0)
}
