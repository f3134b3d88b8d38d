//! Classical photometric alignment: Lucas-Kanade, its inverse-compositional
//! form, and cascaded linear regression (SDM).
//!
//! All three share one geometry: a template raster lives on the canonical
//! square, a warp `p` places that square inside the source image (via a
//! `FrameSpec`), and alignment drives the sampled view toward the template.
//!
//! LK relinearizes around the warped source every iteration and updates
//! additively. The inverse-compositional variant linearizes once around the
//! template at the identity warp, freezes the resulting linear solver, and
//! applies each predicted update through an inverse composition. SDM drops
//! the analytic linearization entirely and fits the per-stage linear maps to
//! Monte-Carlo perturbations.

use crate::data::{perturb_corners, PerturbConfig};
use crate::error::{Error, Result};
use crate::sampler::{bilinear_sample, canonical_coord, make_grid, FrameSpec, SampleGrid};
use crate::tensor::Tensor;
use crate::warp::{WarpFamily, WarpParams};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// d(u, v)/dp of the warp at the identity, evaluated at canonical `(x, y)`.
/// Rows are laid out `[du/dp; dv/dp]`.
fn identity_warp_jacobian(family: WarpFamily, x: f64, y: f64) -> ([f64; 8], [f64; 8]) {
    let mut du = [0.0; 8];
    let mut dv = [0.0; 8];
    du[0] = x;
    du[1] = y;
    du[2] = 1.0;
    dv[3] = x;
    dv[4] = y;
    dv[5] = 1.0;
    if family == WarpFamily::Homography {
        du[6] = -x * x;
        du[7] = -x * y;
        dv[6] = -x * y;
        dv[7] = -y * y;
    }
    (du, dv)
}

/// Steepest descent image of a template at the identity warp: per-pixel
/// image gradient (central differences, one-sided at borders, converted to
/// canonical units) times the warp Jacobian. Rows follow the flattened
/// `[C, H, W]` order; columns are warp parameters.
pub fn steepest_descent_image(template: &Tensor, family: WarpFamily) -> Result<DMatrix<f64>> {
    let s = template.shape();
    if s.len() != 3 {
        return Err(Error::Config("template must be [C, H, W]".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < 2 || w < 2 {
        return Err(Error::Config("template must be at least 2x2".into()));
    }
    let dof = family.dof();
    let half_x = (w - 1) as f64 / 2.0;
    let half_y = (h - 1) as f64 / 2.0;
    let data = template.data();
    let mut j = DMatrix::zeros(c * h * w, dof);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let gx_pix = if x == 0 {
                    plane[y * w + 1] - plane[y * w]
                } else if x == w - 1 {
                    plane[y * w + x] - plane[y * w + x - 1]
                } else {
                    (plane[y * w + x + 1] - plane[y * w + x - 1]) / 2.0
                };
                let gy_pix = if y == 0 {
                    plane[w + x] - plane[x]
                } else if y == h - 1 {
                    plane[y * w + x] - plane[(y - 1) * w + x]
                } else {
                    (plane[(y + 1) * w + x] - plane[(y - 1) * w + x]) / 2.0
                };
                // Canonical displacement du moves the pixel by half_x * du.
                let gu = gx_pix * half_x;
                let gv = gy_pix * half_y;
                let (xc, yc) = (canonical_coord(x, w), canonical_coord(y, h));
                let (du, dv) = identity_warp_jacobian(family, xc, yc);
                let row = ch * h * w + y * w + x;
                for k in 0..dof {
                    j[(row, k)] = gu * du[k] + gv * dv[k];
                }
            }
        }
    }
    Ok(j)
}

/// Convergence record of an iterative alignment run.
#[derive(Debug, Clone)]
pub struct AlignTrace {
    /// L2 norm of the photometric residual at the start of each iteration.
    pub residual_norms: Vec<f64>,
    /// L2 norm of each parameter update.
    pub step_norms: Vec<f64>,
    pub converged: bool,
}

/// Iteration controls shared by both solvers.
#[derive(Debug, Clone, Copy)]
pub struct AlignOptions {
    pub max_iters: usize,
    /// Stop when the update norm falls below this.
    pub tol: f64,
    /// Relative ridge added to the normal equations (0 = plain least
    /// squares, which errors on rank deficiency).
    pub ridge: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            max_iters: 50,
            tol: 1e-8,
            ridge: 0.0,
        }
    }
}

/// Sample the source at `p`, flattened, with masked (out-of-view) sites
/// recorded so residual rows can be suppressed.
fn sample_flat(
    source: &Tensor,
    frame: &FrameSpec,
    p: &WarpParams,
    out: (usize, usize),
) -> Result<(Tensor, SampleGrid)> {
    let grid = make_grid(p, out, frame)?;
    let img = bilinear_sample(source, &grid)?;
    Ok((img, grid))
}

fn masked_residual(a: &Tensor, b: &Tensor, grid: &SampleGrid) -> DVector<f64> {
    let plane = grid.out_h * grid.out_w;
    let n = a.len();
    let mut r = DVector::zeros(n);
    for i in 0..n {
        if grid.mask()[i % plane] {
            r[i] = a.data()[i] - b.data()[i];
        }
    }
    r
}

/// Solve `min ||J dp - r||` with optional relative ridge.
fn solve_update(j: &DMatrix<f64>, r: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    if ridge > 0.0 {
        let jt = j.transpose();
        let mut h = &jt * j;
        let lambda = ridge * h.diagonal().mean().max(f64::MIN_POSITIVE);
        for i in 0..h.nrows() {
            h[(i, i)] += lambda;
        }
        let rhs = jt * r;
        h.cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::IllConditioned("ridge normal equations not SPD".into()))
    } else {
        let svd = j.clone().svd(true, true);
        let max_sv = svd.singular_values.max();
        if max_sv <= 0.0 || svd.singular_values.min() < 1e-12 * max_sv {
            return Err(Error::IllConditioned(
                "steepest descent system is rank deficient; use a ridge".into(),
            ));
        }
        svd.solve(r, 0.0)
            .map_err(|e| Error::IllConditioned(e.to_string()))
    }
}

/// Lucas-Kanade with additive updates: relinearize on the warped source
/// every iteration, solve least squares, `p += dp`.
pub fn lk_align(
    source: &Tensor,
    frame: &FrameSpec,
    template: &Tensor,
    p0: &WarpParams,
    opts: &AlignOptions,
) -> Result<(WarpParams, AlignTrace)> {
    let ts = template.shape();
    if source.shape()[0] != ts[0] {
        return Err(Error::Config("source/template channel mismatch".into()));
    }
    let out = (ts[1], ts[2]);
    let family = p0.family();
    let plane = out.0 * out.1;
    let mut p = p0.clone();
    let mut trace = AlignTrace {
        residual_norms: Vec::new(),
        step_norms: Vec::new(),
        converged: false,
    };
    for _ in 0..opts.max_iters {
        let (warped, grid) = sample_flat(source, frame, &p, out)?;
        let r = masked_residual(template, &warped, &grid);
        trace.residual_norms.push(r.norm());
        let mut j = steepest_descent_image(&warped, family)?;
        for row in 0..j.nrows() {
            if !grid.mask()[row % plane] {
                j.row_mut(row).fill(0.0);
            }
        }
        let dp = solve_update(&j, &r, opts.ridge)?;
        let step = dp.norm();
        trace.step_norms.push(step);
        let mut pv = p.as_slice().to_vec();
        for (v, d) in pv.iter_mut().zip(dp.iter()) {
            *v += d;
        }
        p = WarpParams::new(family, pv)?;
        if step < opts.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((p, trace))
}

/// Frozen linearization of a template at the identity warp.
#[derive(Debug, Clone)]
pub struct TemplateModel {
    pub template: Tensor,
    pub family: WarpFamily,
    /// `HWC x d`, computed once at p = 0.
    pub steepest_descent: DMatrix<f64>,
    /// `d x HWC`; applied to a residual it yields the update.
    pub pseudo_inverse: DMatrix<f64>,
}

/// Build the fixed steepest-descent model and its pseudo-inverse.
/// `ridge` is relative to the mean diagonal of the normal matrix; 0 uses a
/// plain SVD pseudo-inverse and errors on rank deficiency.
pub fn iclk_precompute(template: &Tensor, family: WarpFamily, ridge: f64) -> Result<TemplateModel> {
    let j = steepest_descent_image(template, family)?;
    let pseudo_inverse = if ridge > 0.0 {
        let jt = j.transpose();
        let mut h = &jt * &j;
        let lambda = ridge * h.diagonal().mean().max(f64::MIN_POSITIVE);
        for i in 0..h.nrows() {
            h[(i, i)] += lambda;
        }
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::IllConditioned("ridge normal equations not SPD".into()))?;
        chol.solve(&jt)
    } else {
        let svd = j.clone().svd(true, true);
        let max_sv = svd.singular_values.max();
        if max_sv <= 0.0 || svd.singular_values.min() < 1e-12 * max_sv {
            return Err(Error::IllConditioned(
                "template excites too few warp directions; use a ridge".into(),
            ));
        }
        svd.pseudo_inverse(0.0)
            .map_err(|e| Error::IllConditioned(e.to_string()))?
    };
    Ok(TemplateModel {
        template: template.clone(),
        family,
        steepest_descent: j,
        pseudo_inverse,
    })
}

/// Inverse-compositional LK: the frozen `model` maps each residual straight
/// to an update, applied as `p <- compose(p, invert(dp))`.
pub fn iclk_align(
    source: &Tensor,
    frame: &FrameSpec,
    model: &TemplateModel,
    p0: &WarpParams,
    opts: &AlignOptions,
) -> Result<(WarpParams, AlignTrace)> {
    let ts = model.template.shape();
    let out = (ts[1], ts[2]);
    let mut p = p0.clone();
    let mut trace = AlignTrace {
        residual_norms: Vec::new(),
        step_norms: Vec::new(),
        converged: false,
    };
    for _ in 0..opts.max_iters {
        let (warped, grid) = sample_flat(source, frame, &p, out)?;
        // Eq.-5 residual direction: warped view minus template.
        let r = masked_residual(&warped, &model.template, &grid);
        trace.residual_norms.push(r.norm());
        let dp = &model.pseudo_inverse * &r;
        let step = dp.norm();
        trace.step_norms.push(step);
        let dpw = WarpParams::new(model.family, dp.iter().cloned().collect())?;
        p = p.compose(&dpw.invert()?)?;
        if step < opts.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((p, trace))
}

/// One stage of cascaded linear regression: `dp = R x + b`.
#[derive(Debug, Clone)]
pub struct LinearRegressor {
    pub r: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearRegressor {
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.r * x + &self.b
    }

    pub fn zero(dof: usize, features: usize) -> Self {
        LinearRegressor {
            r: DMatrix::zeros(dof, features),
            b: DVector::zeros(dof),
        }
    }
}

/// Stage-wise trained cascade of linear geometric predictors.
#[derive(Debug, Clone)]
pub struct SdmCascade {
    pub stages: Vec<LinearRegressor>,
    pub family: WarpFamily,
    pub out_size: (usize, usize),
}

/// SDM training controls.
#[derive(Debug, Clone, Copy)]
pub struct SdmTrainConfig {
    pub stages: usize,
    pub samples_per_stage: usize,
    /// Relative ridge for the regression Gram matrix; 0 = min-norm via SVD.
    pub ridge: f64,
    pub seed: u64,
}

fn flatten(img: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(img.data())
}

/// Ridge regression of targets `t` (d x n) on features `x` (f x n) in the
/// dual (Gram) form, with centered data; bias absorbs the means.
fn fit_ridge(
    x: &DMatrix<f64>,
    t: &DMatrix<f64>,
    ridge: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = x.ncols();
    let x_mean = x.column_mean();
    let t_mean = t.column_mean();
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        col -= &x_mean;
    }
    let mut tc = t.clone();
    for mut col in tc.column_iter_mut() {
        col -= &t_mean;
    }
    // No feature variance (up to rounding of the mean): the min-norm and
    // any ridge regressor are both exactly zero.
    let data_scale = x.abs().max().max(1.0);
    if xc.abs().max() < 1e-12 * data_scale {
        return Ok((DMatrix::zeros(t.nrows(), x.nrows()), t.column_mean()));
    }
    let gram = xc.transpose() * &xc;
    let y = if ridge > 0.0 {
        let lambda = ridge * gram.trace() / n as f64;
        let mut a = gram;
        for i in 0..n {
            a[(i, i)] += lambda;
        }
        a.cholesky()
            .ok_or_else(|| Error::IllConditioned("regression Gram matrix not SPD".into()))?
            .solve(&tc.transpose())
    } else {
        let svd = gram.svd(true, true);
        let max_sv = svd.singular_values.max();
        if svd.singular_values.min() < 1e-12 * max_sv {
            return Err(Error::IllConditioned(
                "regression data is rank deficient; use a ridge".into(),
            ));
        }
        svd.solve(&tc.transpose(), 0.0)
            .map_err(|e| Error::IllConditioned(e.to_string()))?
    };
    let r = (&xc * y).transpose();
    let b = t_mean - &r * x_mean;
    Ok((r, b))
}

/// Train a cascade on Monte-Carlo perturbations of one source image.
///
/// Each stage draws a fresh set of perturbations, pushes them through the
/// stages already trained, and regresses the residual warp parameters on the
/// currently-warped pixels. A perfectly predicted update composed inversely
/// returns the sample to the identity.
pub fn sdm_train(
    source: &Tensor,
    box_frame: &FrameSpec,
    out_size: (usize, usize),
    perturb: &PerturbConfig,
    cfg: &SdmTrainConfig,
) -> Result<SdmCascade> {
    if cfg.stages == 0 || cfg.samples_per_stage == 0 {
        return Err(Error::Config("SDM needs >= 1 stage and >= 1 sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dof = perturb.family.dof();
    let mut cascade = SdmCascade {
        stages: Vec::with_capacity(cfg.stages),
        family: perturb.family,
        out_size,
    };
    let n = cfg.samples_per_stage;
    for _ in 0..cfg.stages {
        // Fresh draws, advanced through the cascade so far.
        let mut ps = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p = perturb_corners(box_frame, perturb, &mut rng)?;
            for stage in &cascade.stages {
                let (img, _) = sample_flat(source, box_frame, &p, out_size)?;
                let dp = stage.predict(&flatten(&img));
                let dpw = WarpParams::new(perturb.family, dp.iter().cloned().collect())?;
                p = p.compose(&dpw.invert()?)?;
            }
            ps.push(p);
        }
        let features = out_size.0 * out_size.1 * source.shape()[0];
        let mut x = DMatrix::zeros(features, n);
        let mut t = DMatrix::zeros(dof, n);
        for (jcol, p) in ps.iter().enumerate() {
            let (img, _) = sample_flat(source, box_frame, p, out_size)?;
            x.set_column(jcol, &flatten(&img));
            t.set_column(jcol, &DVector::from_column_slice(p.as_slice()));
        }
        let (r, b) = fit_ridge(&x, &t, cfg.ridge)?;
        cascade.stages.push(LinearRegressor { r, b });
    }
    Ok(cascade)
}

/// Run a cascade from `p0`: each stage predicts from the current view and
/// composes its inverted update.
pub fn sdm_apply(
    cascade: &SdmCascade,
    source: &Tensor,
    box_frame: &FrameSpec,
    p0: &WarpParams,
) -> Result<WarpParams> {
    let mut p = p0.clone();
    for stage in &cascade.stages {
        let (img, _) = sample_flat(source, box_frame, &p, cascade.out_size)?;
        let dp = stage.predict(&flatten(&img));
        let dpw = WarpParams::new(cascade.family, dp.iter().cloned().collect())?;
        p = p.compose(&dpw.invert()?)?;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gaussian_blob, procedural_photo};
    use crate::warp::mean_corner_error;

    fn textured_template(h: usize, w: usize) -> Tensor {
        let photo = procedural_photo(w + 20, h + 20, 31);
        let frame = FrameSpec::window(
            w + 20,
            h + 20,
            (w + 19) as f64 / 2.0,
            (h + 19) as f64 / 2.0,
            (w - 1) as f64 / 2.0,
            (h - 1) as f64 / 2.0,
        )
        .unwrap();
        let id = WarpParams::identity(WarpFamily::Affine);
        let grid = make_grid(&id, (h, w), &frame).unwrap();
        bilinear_sample(&photo, &grid).unwrap()
    }

    #[test]
    fn constant_template_has_zero_steepest_descent() {
        let t = Tensor::full(&[1, 8, 8], 0.5);
        let j = steepest_descent_image(&t, WarpFamily::Homography).unwrap();
        assert!(j.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_template_translation_column_is_constant_slope() {
        // T(x, y) = x in pixels: gradient 1 px^-1 everywhere, so the
        // x-translation column is the constant (W-1)/2 and the
        // y-translation column is zero.
        let (h, w) = (6, 9);
        let mut t = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for x in 0..w {
                t.data_mut()[y * w + x] = x as f64;
            }
        }
        let j = steepest_descent_image(&t, WarpFamily::Affine).unwrap();
        let half_x = (w - 1) as f64 / 2.0;
        for row in 0..h * w {
            assert!((j[(row, 2)] - half_x).abs() < 1e-12);
            assert_eq!(j[(row, 5)], 0.0);
        }
    }

    #[test]
    fn steepest_descent_matches_warp_and_difference_oracle() {
        // Columns of the analytic steepest descent equal central finite
        // differences of actually warping the template. Border pixels move
        // out of view under the negative probe, so only the interior is
        // compared.
        let t = textured_template(12, 12);
        let frame = FrameSpec::full(12, 12).unwrap();
        for family in [WarpFamily::Affine, WarpFamily::Homography] {
            let j = steepest_descent_image(&t, family).unwrap();
            let step = 1e-3;
            for k in 0..family.dof() {
                let mut pv = vec![0.0; family.dof()];
                pv[k] = step;
                let plus = bilinear_sample(
                    &t,
                    &make_grid(&WarpParams::new(family, pv.clone()).unwrap(), (12, 12), &frame)
                        .unwrap(),
                )
                .unwrap();
                pv[k] = -step;
                let minus = bilinear_sample(
                    &t,
                    &make_grid(&WarpParams::new(family, pv).unwrap(), (12, 12), &frame).unwrap(),
                )
                .unwrap();
                for y in 1..11 {
                    for x in 1..11 {
                        let row = y * 12 + x;
                        let numeric =
                            (plus.data()[row] - minus.data()[row]) / (2.0 * step);
                        let rel = (j[(row, k)] - numeric).abs()
                            / numeric.abs().max(j[(row, k)].abs()).max(1e-3);
                        assert!(
                            rel < 5e-3,
                            "{family:?} col {k} px ({x},{y}): {} vs {numeric}",
                            j[(row, k)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pseudo_inverse_left_inverts_steepest_descent() {
        let t = textured_template(20, 20);
        for family in [WarpFamily::Affine, WarpFamily::Homography] {
            let model = iclk_precompute(&t, family, 0.0).unwrap();
            let prod = &model.pseudo_inverse * &model.steepest_descent;
            let d = family.dof();
            for r in 0..d {
                for c in 0..d {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!(
                        (prod[(r, c)] - want).abs() < 1e-8,
                        "{family:?} ({r},{c}) = {}",
                        prod[(r, c)]
                    );
                }
            }
        }
    }

    #[test]
    fn pseudo_inverse_matches_svd_oracle() {
        let t = textured_template(16, 16);
        let model = iclk_precompute(&t, WarpFamily::Affine, 0.0).unwrap();
        let svd = model.steepest_descent.clone().svd(true, true);
        let oracle = svd.pseudo_inverse(1e-13).unwrap();
        let diff = (&model.pseudo_inverse - &oracle).abs().max();
        assert!(diff < 1e-8, "max deviation {diff:.3e}");
    }

    #[test]
    fn doubling_ridge_shrinks_pseudo_inverse() {
        let t = textured_template(16, 16);
        let mut prev = f64::INFINITY;
        for ridge in [1e-4, 2e-4, 4e-4, 8e-4, 1.6e-3] {
            let model = iclk_precompute(&t, WarpFamily::Affine, ridge).unwrap();
            let norm = model
                .pseudo_inverse
                .clone()
                .svd(false, false)
                .singular_values
                .max();
            assert!(norm <= prev + 1e-12, "ridge {ridge}: {norm} > {prev}");
            prev = norm;
        }
    }

    #[test]
    fn update_solution_matches_dense_least_squares() {
        // The pseudo-inverse applied to a residual solves the least-squares
        // problem; checked against a dense SVD solve on a small system.
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let j = DMatrix::from_fn(50, 6, |_, _| rng.gen_range(-1.0..1.0));
            let r = DVector::from_fn(50, |_, _| rng.gen_range(-1.0..1.0));
            let via_pinv = {
                let svd = j.clone().svd(true, true);
                svd.pseudo_inverse(1e-13).unwrap() * &r
            };
            let via_lstsq = j.clone().svd(true, true).solve(&r, 1e-13).unwrap();
            assert!((via_pinv - via_lstsq).norm() < 1e-9);
        }
    }

    #[test]
    fn aligned_input_converges_immediately() {
        let photo = procedural_photo(80, 80, 17);
        let frame = FrameSpec::window(80, 80, 39.5, 39.5, 19.5, 19.5).unwrap();
        let id = WarpParams::identity(WarpFamily::Affine);
        let template = bilinear_sample(&photo, &make_grid(&id, (40, 40), &frame).unwrap()).unwrap();
        let opts = AlignOptions::default();

        let (p, trace) = lk_align(&photo, &frame, &template, &id, &opts).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.step_norms.len(), 1);
        assert!(p.as_slice().iter().all(|&v| v.abs() < 1e-9));

        let model = iclk_precompute(&template, WarpFamily::Affine, 0.0).unwrap();
        let (p, trace) = iclk_align(&photo, &frame, &model, &id, &opts).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.step_norms.len(), 1);
        assert!(p.as_slice().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn both_solvers_recover_a_two_pixel_shift() {
        // Source: a blob. Template: the view at a 2 px translation. Both
        // solvers should recover the shift to well under 0.05 px.
        let source = gaussian_blob(48, 48, 23.5, 23.5, 6.0);
        let frame = FrameSpec::window(48, 48, 23.5, 23.5, 15.0, 15.0).unwrap();
        let gt = WarpParams::new(
            WarpFamily::Affine,
            vec![0.0, 0.0, 2.0 / 15.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let template =
            bilinear_sample(&source, &make_grid(&gt, (31, 31), &frame).unwrap()).unwrap();
        let p0 = WarpParams::identity(WarpFamily::Affine);
        let opts = AlignOptions {
            max_iters: 100,
            tol: 1e-10,
            ridge: 1e-8,
        };

        let (p_lk, _) = lk_align(&source, &frame, &template, &p0, &opts).unwrap();
        let err_px = mean_corner_error(&p_lk, &gt).unwrap() * 15.0;
        assert!(err_px < 0.05, "LK corner error {err_px:.4} px");

        let model = iclk_precompute(&template, WarpFamily::Affine, 1e-8).unwrap();
        let (p_ic, _) = iclk_align(&source, &frame, &model, &p0, &opts).unwrap();
        let err_px = mean_corner_error(&p_ic, &gt).unwrap() * 15.0;
        assert!(err_px < 0.05, "IC-LK corner error {err_px:.4} px");
    }

    #[test]
    fn template_model_is_immutable_across_align_calls() {
        let photo = procedural_photo(80, 80, 19);
        let frame = FrameSpec::window(80, 80, 39.5, 39.5, 14.5, 14.5).unwrap();
        let id = WarpParams::identity(WarpFamily::Affine);
        let template = bilinear_sample(&photo, &make_grid(&id, (30, 30), &frame).unwrap()).unwrap();
        let model = iclk_precompute(&template, WarpFamily::Affine, 1e-6).unwrap();
        let sd_before: Vec<f64> = model.steepest_descent.iter().cloned().collect();
        let pinv_before: Vec<f64> = model.pseudo_inverse.iter().cloned().collect();
        let p0 = WarpParams::new(
            WarpFamily::Affine,
            vec![0.02, -0.01, 0.05, 0.01, -0.02, -0.04],
        )
        .unwrap();
        for _ in 0..3 {
            let _ = iclk_align(&photo, &frame, &model, &p0, &AlignOptions::default()).unwrap();
        }
        let sd_after: Vec<f64> = model.steepest_descent.iter().cloned().collect();
        let pinv_after: Vec<f64> = model.pseudo_inverse.iter().cloned().collect();
        assert_eq!(sd_before, sd_after);
        assert_eq!(pinv_before, pinv_after);
    }

    #[test]
    fn constant_template_without_ridge_is_ill_conditioned() {
        let t = Tensor::full(&[1, 10, 10], 0.3);
        assert!(matches!(
            iclk_precompute(&t, WarpFamily::Affine, 0.0),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn zero_cascade_leaves_p_unchanged() {
        let photo = procedural_photo(60, 60, 23);
        let frame = FrameSpec::window(60, 60, 29.5, 29.5, 14.5, 14.5).unwrap();
        let cascade = SdmCascade {
            stages: vec![LinearRegressor::zero(6, 30 * 30)],
            family: WarpFamily::Affine,
            out_size: (30, 30),
        };
        let p0 = WarpParams::new(
            WarpFamily::Affine,
            vec![0.03, 0.01, -0.02, -0.01, 0.02, 0.05],
        )
        .unwrap();
        let p = sdm_apply(&cascade, &photo, &frame, &p0).unwrap();
        for (a, b) in p.as_slice().iter().zip(p0.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sdm_with_zero_noise_learns_the_zero_map() {
        let photo = procedural_photo(60, 60, 29);
        let frame = FrameSpec::window(60, 60, 29.5, 29.5, 14.5, 14.5).unwrap();
        let perturb = PerturbConfig::new(WarpFamily::Affine, 0.0, 0.0).unwrap();
        let cfg = SdmTrainConfig {
            stages: 1,
            samples_per_stage: 20,
            ridge: 0.0,
            seed: 7,
        };
        let cascade = sdm_train(&photo, &frame, (30, 30), &perturb, &cfg).unwrap();
        let stage = &cascade.stages[0];
        assert!(stage.r.abs().max() < 1e-9);
        assert!(stage.b.abs().max() < 1e-9);
    }

    #[test]
    fn sdm_apply_matches_manual_unrolling() {
        let photo = procedural_photo(60, 60, 37);
        let frame = FrameSpec::window(60, 60, 29.5, 29.5, 14.5, 14.5).unwrap();
        let perturb = PerturbConfig::new(WarpFamily::Affine, 2.0, 1.0).unwrap();
        let cfg = SdmTrainConfig {
            stages: 2,
            samples_per_stage: 60,
            ridge: 1e-3,
            seed: 11,
        };
        let cascade = sdm_train(&photo, &frame, (30, 30), &perturb, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p0 = perturb_corners(&frame, &perturb, &mut rng).unwrap();

        let fast = sdm_apply(&cascade, &photo, &frame, &p0).unwrap();

        let mut p = p0;
        for stage in &cascade.stages {
            let grid = make_grid(&p, (30, 30), &frame).unwrap();
            let img = bilinear_sample(&photo, &grid).unwrap();
            let dp = stage.predict(&DVector::from_column_slice(img.data()));
            let dpw = WarpParams::new(WarpFamily::Affine, dp.iter().cloned().collect()).unwrap();
            p = p.compose(&dpw.invert().unwrap()).unwrap();
        }
        for (a, b) in fast.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
