//! Differentiable bilinear sampling driven by a warp.
//!
//! An output image is produced by mapping each output site's canonical
//! coordinate through the warp, converting to source pixel coordinates via a
//! [`FrameSpec`], and bilinearly interpolating. The grid generator and the
//! sampler of the usual spatial-transformer formulation are fused into this
//! one warp function.
//!
//! Conventions, fixed here and relied on by every test:
//! - pixel centers sit at integer coordinates,
//! - canonical `[-1, 1]` maps -1 to the center of the first pixel and +1 to
//!   the center of the last pixel,
//! - sites whose four bilinear neighbors are not all inside the source
//!   produce 0 and receive no gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::{WarpFamily, WarpParams};

/// Where the canonical square lives inside a source image, in pixel units.
///
/// Canonical `(u, v)` maps to pixel `(center_x + u * half_x,
/// center_y + v * half_y)`. Keeping the source dimensions here lets a grid
/// built on a sub-window still address (and bounds-check against) the full
/// image, which is what preserves geometry across chained warp updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSpec {
    pub src_w: usize,
    pub src_h: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub half_x: f64,
    pub half_y: f64,
}

impl FrameSpec {
    /// Canonical square covering the whole `w x h` image.
    pub fn full(w: usize, h: usize) -> Result<FrameSpec> {
        if w < 2 || h < 2 {
            return Err(Error::Config(format!(
                "source image must be at least 2x2, got {w}x{h}"
            )));
        }
        Ok(FrameSpec {
            src_w: w,
            src_h: h,
            center_x: (w - 1) as f64 / 2.0,
            center_y: (h - 1) as f64 / 2.0,
            half_x: (w - 1) as f64 / 2.0,
            half_y: (h - 1) as f64 / 2.0,
        })
    }

    /// Canonical square covering a window of a larger `src_w x src_h` image.
    pub fn window(
        src_w: usize,
        src_h: usize,
        center_x: f64,
        center_y: f64,
        half_x: f64,
        half_y: f64,
    ) -> Result<FrameSpec> {
        if src_w < 2 || src_h < 2 {
            return Err(Error::Config(format!(
                "source image must be at least 2x2, got {src_w}x{src_h}"
            )));
        }
        if half_x <= 0.0 || half_y <= 0.0 {
            return Err(Error::Config("frame half-extents must be positive".into()));
        }
        Ok(FrameSpec {
            src_w,
            src_h,
            center_x,
            center_y,
            half_x,
            half_y,
        })
    }

    /// Same center, extents scaled by `factor` (> 1 widens the view).
    pub fn scaled(&self, factor: f64) -> FrameSpec {
        FrameSpec {
            half_x: self.half_x * factor,
            half_y: self.half_y * factor,
            ..*self
        }
    }

    /// Canonical coordinates to source pixel coordinates.
    pub fn to_pixels(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.center_x + u * self.half_x,
            self.center_y + v * self.half_y,
        )
    }
}

/// Canonical coordinate of output index `i` along an axis of length `n`.
#[inline]
pub fn canonical_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Warped sampling locations for one output raster.
///
/// Besides the canonical coordinates, the grid caches the integer tap corner
/// of every in-bounds site so the sample and backward passes are gathers
/// without floor/clamp work; this is the training hot path, so the grid is
/// kept lean (fractional offsets are recomputed from the coordinates, and
/// affine grids skip the denominator array entirely).
#[derive(Debug, Clone)]
pub struct SampleGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub frame: FrameSpec,
    /// Warped canonical coordinates, interleaved `(u, v)` per site.
    coords: Vec<f64>,
    /// Perspective denominators; empty for affine warps (all 1).
    denom: Vec<f64>,
    /// True iff all four bilinear neighbors are inside the source.
    mask: Vec<bool>,
    /// Interleaved `(ix, iy)` base corner per site; zero where masked out.
    taps: Vec<u32>,
}

impl SampleGrid {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn in_bounds_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Map every output site's canonical coordinate through `wp` and record
/// where it lands in the source frame.
pub fn make_grid(wp: &WarpParams, out_size: (usize, usize), frame: &FrameSpec) -> Result<SampleGrid> {
    let (out_h, out_w) = out_size;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("output raster must be non-empty".into()));
    }
    let m = wp.to_matrix();
    let (m00, m01, m02) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (m10, m11, m12) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (m20, m21, m22) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let affine = wp.family() == WarpFamily::Affine;
    let n = out_h * out_w;
    let mut coords = vec![0.0; 2 * n];
    let mut denom = if affine { Vec::new() } else { vec![1.0; n] };
    let mut mask = vec![false; n];
    let mut taps = vec![0u32; 2 * n];
    let max_px = (frame.src_w - 1) as f64;
    let max_py = (frame.src_h - 1) as f64;
    let xs: Vec<f64> = (0..out_w).map(|col| canonical_coord(col, out_w)).collect();
    let mut i = 0;
    for row in 0..out_h {
        let y = canonical_coord(row, out_h);
        let (ry0, ry1, ry2) = (m01 * y + m02, m11 * y + m12, m21 * y + m22);
        for (col, &x) in xs.iter().enumerate() {
            let u = m00 * x + ry0;
            let v = m10 * x + ry1;
            let (cu, cv) = if affine {
                (u, v)
            } else {
                let w = m20 * x + ry2;
                if w.abs() < 1e-12 {
                    return Err(Error::DegenerateWarp(format!(
                        "output site ({row}, {col}) maps to the line at infinity"
                    )));
                }
                denom[i] = w;
                (u / w, v / w)
            };
            coords[2 * i] = cu;
            coords[2 * i + 1] = cv;
            let (px, py) = frame.to_pixels(cu, cv);
            if px >= 0.0 && px <= max_px && py >= 0.0 && py <= max_py {
                mask[i] = true;
                let (ix, _) = taps_of(px, frame.src_w);
                let (iy, _) = taps_of(py, frame.src_h);
                taps[2 * i] = ix as u32;
                taps[2 * i + 1] = iy as u32;
            }
            i += 1;
        }
    }
    Ok(SampleGrid {
        out_h,
        out_w,
        frame: *frame,
        coords,
        denom,
        mask,
        taps,
    })
}

/// Integer base corner and fractional offset of a source pixel coordinate.
/// The base is clamped so both neighbors stay inside even at the far edge,
/// which keeps identity sampling exact including the last row and column.
#[inline]
fn taps_of(p: f64, extent: usize) -> (usize, f64) {
    let i0 = (p.floor() as isize).clamp(0, extent as isize - 2) as usize;
    (i0, p - i0 as f64)
}

/// Bilinearly sample `src` (`[C, Hs, Ws]`) at the grid sites.
/// Out-of-bounds sites produce 0 in every channel.
pub fn bilinear_sample(src: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let s = src.shape();
    if s.len() != 3 || s[1] != grid.frame.src_h || s[2] != grid.frame.src_w {
        return Err(Error::Config(format!(
            "source shape {s:?} does not match grid frame {}x{}",
            grid.frame.src_h, grid.frame.src_w
        )));
    }
    let (c, hs, ws) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[c, grid.out_h, grid.out_w]);
    let plane = grid.out_h * grid.out_w;
    let sdata = src.data();
    let odata = out.data_mut();
    let (cx, cy) = (grid.frame.center_x, grid.frame.center_y);
    let (hx, hy) = (grid.frame.half_x, grid.frame.half_y);
    for i in 0..plane {
        if !grid.mask[i] {
            continue;
        }
        let (ix, iy) = (grid.taps[2 * i] as usize, grid.taps[2 * i + 1] as usize);
        let fx = (cx + grid.coords[2 * i] * hx) - ix as f64;
        let fy = (cy + grid.coords[2 * i + 1] * hy) - iy as f64;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for ch in 0..c {
            let base = (ch * hs + iy) * ws + ix;
            odata[ch * plane + i] = w00 * sdata[base]
                + w01 * sdata[base + 1]
                + w10 * sdata[base + ws]
                + w11 * sdata[base + ws + 1];
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through [`bilinear_sample`], with respect to
/// the source image and the warp parameters.
///
/// `grad_p` chains the image's interpolated spatial gradient through the
/// frame scaling and the warp's perspective division.
/// Mean distance, in source pixels, between where two warps place the four
/// canonical corners under the same frame.
pub fn corner_error_px(frame: &FrameSpec, a: &WarpParams, b: &WarpParams) -> Result<f64> {
    let ca = a.warp_corners()?;
    let cb = b.warp_corners()?;
    let mut acc = 0.0;
    for (pa, pb) in ca.iter().zip(&cb) {
        let (ax, ay) = frame.to_pixels(pa.0, pa.1);
        let (bx, by) = frame.to_pixels(pb.0, pb.1);
        acc += ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
    }
    Ok(acc / 4.0)
}

pub fn bilinear_backward(
    grad_out: &Tensor,
    src: &Tensor,
    grid: &SampleGrid,
    wp: &WarpParams,
) -> Result<(Tensor, Vec<f64>)> {
    let mut grad_src = Tensor::zeros(src.shape());
    let grad_p = backward_core::<true>(grad_out, src, grid, wp, grad_src.data_mut())?;
    Ok((grad_src, grad_p))
}

/// Warp-parameter gradient of [`bilinear_sample`] alone. Equivalent to the
/// second half of [`bilinear_backward`]; use it when the source is fixed
/// input data, whose gradient would be discarded anyway.
pub fn bilinear_grad_p(
    grad_out: &Tensor,
    src: &Tensor,
    grid: &SampleGrid,
    wp: &WarpParams,
) -> Result<Vec<f64>> {
    backward_core::<false>(grad_out, src, grid, wp, &mut [])
}

fn backward_core<const WITH_SRC: bool>(
    grad_out: &Tensor,
    src: &Tensor,
    grid: &SampleGrid,
    wp: &WarpParams,
    gs: &mut [f64],
) -> Result<Vec<f64>> {
    let s = src.shape();
    let (c, hs, ws) = (s[0], s[1], s[2]);
    let plane = grid.out_h * grid.out_w;
    if grad_out.shape() != [c, grid.out_h, grid.out_w] {
        return Err(Error::Config("grad_out shape does not match grid".into()));
    }
    let persp = wp.family() == WarpFamily::Homography;
    if persp && grid.denom.is_empty() {
        return Err(Error::Config(
            "homography backward needs a grid built from a homography".into(),
        ));
    }
    let gdata = grad_out.data();
    let sdata = src.data();
    let xs: Vec<f64> = (0..grid.out_w)
        .map(|col| canonical_coord(col, grid.out_w))
        .collect();
    // Register accumulators; a heap-indexed grad_p would serialize the loop.
    let (mut g0, mut g1, mut g2, mut g3, mut g4, mut g5, mut g6, mut g7) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);

    let (cx, cy) = (grid.frame.center_x, grid.frame.center_y);
    let (hx, hy) = (grid.frame.half_x, grid.frame.half_y);
    for row in 0..grid.out_h {
        let y = canonical_coord(row, grid.out_h);
        let base_i = row * grid.out_w;
        let mask_row = &grid.mask[base_i..base_i + grid.out_w];
        let taps_row = &grid.taps[2 * base_i..2 * (base_i + grid.out_w)];
        let coords_row = &grid.coords[2 * base_i..2 * (base_i + grid.out_w)];
        for (col, (&inside, &x)) in mask_row.iter().zip(&xs).enumerate() {
            if !inside {
                continue;
            }
            let i = base_i + col;
            let (ix, iy) = (taps_row[2 * col] as usize, taps_row[2 * col + 1] as usize);
            let fx = (cx + coords_row[2 * col] * hx) - ix as f64;
            let fy = (cy + coords_row[2 * col + 1] * hy) - iy as f64;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let mut d_px = 0.0;
            let mut d_py = 0.0;
            for ch in 0..c {
                let g = gdata[ch * plane + i];
                if g == 0.0 {
                    continue;
                }
                let base = (ch * hs + iy) * ws + ix;
                if WITH_SRC {
                    gs[base] += g * w00;
                    gs[base + 1] += g * w01;
                    gs[base + ws] += g * w10;
                    gs[base + ws + 1] += g * w11;
                }
                let (s00, s01, s10, s11) = (
                    sdata[base],
                    sdata[base + 1],
                    sdata[base + ws],
                    sdata[base + ws + 1],
                );
                d_px += g * ((1.0 - fy) * (s01 - s00) + fy * (s11 - s10));
                d_py += g * ((1.0 - fx) * (s10 - s00) + fx * (s11 - s01));
            }
            if d_px == 0.0 && d_py == 0.0 {
                continue;
            }
            // Loss gradient in warped canonical coordinates.
            let mut du = d_px * hx;
            let mut dv = d_py * hy;
            if persp {
                let inv_w = 1.0 / grid.denom[i];
                du *= inv_w;
                dv *= inv_w;
                // u = U/w: du/dp7 = -u x / w, and likewise for v and p8.
                let (u, v) = (coords_row[2 * col], coords_row[2 * col + 1]);
                let t = du * u + dv * v;
                g6 -= t * x;
                g7 -= t * y;
            }
            g0 += du * x;
            g1 += du * y;
            g2 += du;
            g3 += dv * x;
            g4 += dv * y;
            g5 += dv;
        }
    }
    let mut grad_p = vec![g0, g1, g2, g3, g4, g5, g6, g7];
    grad_p.truncate(wp.family().dof());
    Ok(grad_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::WarpFamily;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[c, h, w], data).unwrap()
    }

    /// Smooth test image: a 2-D Gaussian blob, so finite differences of the
    /// sampled intensities are well behaved.
    fn blob_image(h: usize, w: usize, cx: f64, cy: f64, sigma: f64) -> Tensor {
        let mut t = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                t.data_mut()[y * w + x] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        t
    }

    #[test]
    fn identity_grid_is_pixel_lattice() {
        let frame = FrameSpec::full(7, 5).unwrap();
        let id = WarpParams::identity(WarpFamily::Affine);
        let grid = make_grid(&id, (5, 7), &frame).unwrap();
        for row in 0..5 {
            for col in 0..7 {
                let i = row * 7 + col;
                let (px, py) = frame.to_pixels(grid.coords()[2 * i], grid.coords()[2 * i + 1]);
                assert!((px - col as f64).abs() < 1e-12);
                assert!((py - row as f64).abs() < 1e-12);
                assert!(grid.mask()[i]);
            }
        }
    }

    #[test]
    fn identity_sampling_reproduces_source_exactly() {
        let src = random_image(2, 5, 7, 1);
        let frame = FrameSpec::full(7, 5).unwrap();
        let id = WarpParams::identity(WarpFamily::Affine);
        let grid = make_grid(&id, (5, 7), &frame).unwrap();
        let out = bilinear_sample(&src, &grid).unwrap();
        assert!(out.max_abs_diff(&src) < 1e-12);
    }

    #[test]
    fn canonical_translation_shifts_by_quarter_width() {
        // +0.5 canonical along x on a full frame moves sampling locations by
        // (W-1)/4 source pixels.
        let frame = FrameSpec::full(9, 9).unwrap();
        let t = WarpParams::new(WarpFamily::Affine, vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let grid = make_grid(&t, (9, 9), &frame).unwrap();
        let (px, py) = frame.to_pixels(grid.coords()[0], grid.coords()[1]);
        assert!((px - 2.0).abs() < 1e-12); // column 0 plus (9-1)/4
        assert!((py - 0.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_samples_constant_in_bounds() {
        let src = Tensor::full(&[1, 8, 8], 0.6);
        let frame = FrameSpec::full(8, 8).unwrap();
        let w = WarpParams::new(
            WarpFamily::Homography,
            vec![0.05, -0.02, 0.1, 0.03, -0.04, -0.1, 0.01, 0.02],
        )
        .unwrap();
        let grid = make_grid(&w, (8, 8), &frame).unwrap();
        let out = bilinear_sample(&src, &grid).unwrap();
        for (i, &m) in grid.mask().iter().enumerate() {
            if m {
                assert!((out.data()[i] - 0.6).abs() < 1e-12);
            } else {
                assert_eq!(out.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn matches_scalar_loop_bilinear_oracle() {
        let src = random_image(1, 8, 8, 2);
        let frame = FrameSpec::full(8, 8).unwrap();
        // Small warp keeps everything in bounds except the rim.
        let w = WarpParams::new(
            WarpFamily::Affine,
            vec![-0.05, 0.02, 0.01, -0.03, 0.04, -0.02],
        )
        .unwrap();
        let grid = make_grid(&w, (8, 8), &frame).unwrap();
        let out = bilinear_sample(&src, &grid).unwrap();
        for i in 0..64 {
            if !grid.mask()[i] {
                continue;
            }
            let (px, py) = frame.to_pixels(grid.coords()[2 * i], grid.coords()[2 * i + 1]);
            // Plain floor-based oracle (valid away from the exact far edge).
            let x0 = px.floor() as usize;
            let y0 = py.floor() as usize;
            let (fx, fy) = (px - x0 as f64, py - y0 as f64);
            let at = |yy: usize, xx: usize| src.data()[yy * 8 + xx];
            let want = (1.0 - fx) * (1.0 - fy) * at(y0, x0)
                + fx * (1.0 - fy) * at(y0, x0 + 1)
                + (1.0 - fx) * fy * at(y0 + 1, x0)
                + fx * fy * at(y0 + 1, x0 + 1);
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_sites_are_zero_filled_and_masked() {
        let src = Tensor::full(&[1, 6, 6], 1.0);
        let frame = FrameSpec::full(6, 6).unwrap();
        // Big translation pushes half the raster outside.
        let t = WarpParams::new(WarpFamily::Affine, vec![0.0, 0.0, 1.2, 0.0, 0.0, 0.0]).unwrap();
        let grid = make_grid(&t, (6, 6), &frame).unwrap();
        let out = bilinear_sample(&src, &grid).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0);
        for (i, &m) in grid.mask().iter().enumerate() {
            assert_eq!(out.data()[i] == 0.0, !m);
        }
    }

    #[test]
    fn degenerate_denominator_is_an_error() {
        let frame = FrameSpec::full(8, 8).unwrap();
        // p7 = 1 makes the denominator vanish along x = -1.
        let w = WarpParams::new(
            WarpFamily::Homography,
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        assert!(matches!(
            make_grid(&w, (8, 8), &frame),
            Err(Error::DegenerateWarp(_))
        ));
    }

    #[test]
    fn grad_src_places_hand_computed_weights() {
        // One output pixel landing at fractional coords (0.25, 0.75).
        let src = random_image(1, 4, 4, 3);
        let frame = FrameSpec {
            src_w: 4,
            src_h: 4,
            center_x: 0.25,
            center_y: 0.75,
            half_x: 1.0,
            half_y: 1.0,
        };
        let id = WarpParams::identity(WarpFamily::Affine);
        let grid = make_grid(&id, (1, 1), &frame).unwrap();
        let gout = Tensor::full(&[1, 1, 1], 1.0);
        let (gsrc, _) = bilinear_backward(&gout, &src, &grid, &id).unwrap();
        assert!((gsrc.data()[0] - 0.1875).abs() < 1e-15); // (1-.25)(1-.75)
        assert!((gsrc.data()[1] - 0.0625).abs() < 1e-15); // .25(1-.75)
        assert!((gsrc.data()[4] - 0.5625).abs() < 1e-15); // (1-.25)(.75)
        assert!((gsrc.data()[5] - 0.1875).abs() < 1e-15); // .25*.75
        let total: f64 = gsrc.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_out_produces_zero_grads() {
        let src = random_image(1, 6, 6, 4);
        let frame = FrameSpec::full(6, 6).unwrap();
        let w = WarpParams::new(
            WarpFamily::Homography,
            vec![0.02, 0.01, -0.03, 0.0, -0.01, 0.02, 0.005, -0.004],
        )
        .unwrap();
        let grid = make_grid(&w, (6, 6), &frame).unwrap();
        let gout = Tensor::zeros(&[1, 6, 6]);
        let (gsrc, gp) = bilinear_backward(&gout, &src, &grid, &w).unwrap();
        assert!(gsrc.data().iter().all(|&v| v == 0.0));
        assert!(gp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_src_matches_finite_differences() {
        let src = random_image(1, 8, 8, 5);
        let frame = FrameSpec::full(8, 8).unwrap();
        let w = WarpParams::new(
            WarpFamily::Affine,
            vec![-0.04, 0.03, 0.02, 0.01, -0.02, -0.03],
        )
        .unwrap();
        let grid = make_grid(&w, (8, 8), &frame).unwrap();
        let probe = random_image(1, 8, 8, 6);
        let loss = |img: &Tensor| -> f64 {
            let out = bilinear_sample(img, &grid).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (gsrc, _) = bilinear_backward(&probe, &src, &grid, &w).unwrap();
        // Sampling is linear in the source, so a large step has no
        // truncation error and avoids cancellation.
        let step = 1e-3;
        let mut worst: f64 = 0.0;
        for i in 0..src.len() {
            let mut s = src.clone();
            s.data_mut()[i] += step;
            let plus = loss(&s);
            s.data_mut()[i] -= 2.0 * step;
            let minus = loss(&s);
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max((gsrc.data()[i] - numeric).abs());
        }
        assert!(worst < 1e-9, "worst abs deviation {worst:.3e}");
    }

    #[test]
    fn grad_p_matches_finite_differences_on_smooth_image() {
        let src = blob_image(16, 16, 7.2, 8.1, 3.0);
        let frame = FrameSpec::full(16, 16).unwrap();
        let probe = random_image(1, 12, 12, 7);
        for (family, pvec) in [
            (
                WarpFamily::Affine,
                vec![0.0613, -0.0287, 0.0542, 0.0218, 0.0397, -0.0611],
            ),
            (
                WarpFamily::Homography,
                vec![0.0613, -0.0287, 0.0542, 0.0218, 0.0397, -0.0611, 0.0204, -0.0153],
            ),
        ] {
            let w = WarpParams::new(family, pvec.clone()).unwrap();
            let grid = make_grid(&w, (12, 12), &frame).unwrap();
            // The interpolant has slope kinks on the pixel lattice; the
            // check is only meaningful if no finite-difference step crosses
            // one, so the construction must keep all sites clear.
            for i in 0..144 {
                if !grid.mask()[i] {
                    continue;
                }
                let (px, py) = frame.to_pixels(grid.coords()[2 * i], grid.coords()[2 * i + 1]);
                for c in [px, py] {
                    let frac = c - c.floor();
                    let d = frac.min(1.0 - frac);
                    // The FD step below moves pixel coords by < 3e-6.
                    assert!(
                        d > 1e-4,
                        "site {i} sits {d:.2e} from a lattice crossing; adjust the test warp"
                    );
                }
            }
            let (_, gp) = bilinear_backward(&probe, &src, &grid, &w).unwrap();
            let loss = |p: &[f64]| -> f64 {
                let wp = WarpParams::new(family, p.to_vec()).unwrap();
                let g = make_grid(&wp, (12, 12), &frame).unwrap();
                let out = bilinear_sample(&src, &g).unwrap();
                out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let step = 1e-7;
            for j in 0..family.dof() {
                let mut p = pvec.clone();
                p[j] += step;
                let plus = loss(&p);
                p[j] -= 2.0 * step;
                let minus = loss(&p);
                let numeric = (plus - minus) / (2.0 * step);
                let rel = (gp[j] - numeric).abs() / numeric.abs().max(gp[j].abs()).max(1e-8);
                assert!(
                    rel < 1e-4,
                    "{family:?} p[{j}]: analytic {} vs numeric {numeric}, rel {rel:.3e}",
                    gp[j]
                );
            }
        }
    }

    #[test]
    fn window_frame_reaches_outside_the_window() {
        // Canonical square on the central window; zooming out samples source
        // pixels outside that window but inside the full image.
        let frame = FrameSpec::window(100, 100, 49.5, 49.5, 24.5, 24.5).unwrap();
        let zoom = WarpParams::new(WarpFamily::Affine, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let grid = make_grid(&zoom, (50, 50), &frame).unwrap();
        let (px0, py0) = frame.to_pixels(grid.coords()[0], grid.coords()[1]);
        assert!(px0 < 25.0 - 1.0 && py0 < 25.0 - 1.0);
        assert!(grid.in_bounds_fraction() > 0.95);
    }

    #[test]
    fn frame_rejects_tiny_sources() {
        assert!(FrameSpec::full(1, 8).is_err());
        assert!(FrameSpec::window(8, 8, 3.5, 3.5, 0.0, 2.0).is_err());
    }

    #[test]
    fn corner_error_converts_to_pixels() {
        // Pure canonical x-translation of t moves every corner by t * half_x
        // pixels; a 50-wide full frame has half_x = 24.5.
        let frame = FrameSpec::full(50, 50).unwrap();
        let id = WarpParams::identity(WarpFamily::Affine);
        let shift =
            WarpParams::new(WarpFamily::Affine, vec![0.0, 0.0, 0.1, 0.0, 0.0, 0.0]).unwrap();
        let err = corner_error_px(&frame, &shift, &id).unwrap();
        assert!((err - 2.45).abs() < 1e-12, "{err}");
        assert_eq!(corner_error_px(&frame, &id, &id).unwrap(), 0.0);
    }
}
