//! Warp-predicting networks.
//!
//! Three forward paths share the same layer stacks. The chained path
//! (`stn_forward`) feeds each predicted warp straight back into the image:
//! every step resamples the PREVIOUS OUTPUT, so interpolation blur and
//! boundary loss compound. The compositional path (`cstn_forward`) passes
//! warp parameters forward instead, composing each predicted update and
//! resampling the original source once per step; the recurrent variant
//! shares one predictor across all steps and can be unrolled further at
//! test time (`apply_more_warps`). `cnn_forward` is the no-geometry
//! baseline.
//!
//! Backward passes accumulate into the `LayerParams` gradient buffers and
//! chain through every path the forward touched: the classifier, each
//! sampler's image and warp gradients, and each composition's two
//! Jacobians.

use nalgebra::DVector;
use rand::Rng;

use crate::arch::{LayerPlan, LayerToken, NetworkSpec, ShapeState, Variant};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool2x2_backward,
    maxpool2x2_forward, relu_backward, relu_forward, LayerParams, PoolArgmax,
};
use crate::sampler::{
    bilinear_backward, bilinear_grad_p, bilinear_sample, make_grid, FrameSpec, SampleGrid,
};
use crate::tensor::Tensor;
use crate::warp::{compose_jacobians, WarpParams};

enum StackItem {
    Conv { input: Tensor, relu: Option<Vec<bool>> },
    Fc { input: Tensor, relu: Option<Vec<bool>> },
    Pool { argmax: PoolArgmax },
}

/// Per-layer activations cached by [`stack_forward`] for the backward pass.
pub struct StackCache {
    items: Vec<StackItem>,
}

/// Run a layer stack on a `[N, C, H, W]` batch. Hidden conv/FC layers are
/// followed by ReLU; the final layer output is returned raw (warp updates
/// and logits are unbounded).
fn stack_forward(
    layers: &[LayerParams],
    plans: &[LayerPlan],
    input: &Tensor,
) -> Result<(Tensor, StackCache)> {
    let n = input.shape()[0];
    let mut x = input.clone();
    let mut items = Vec::with_capacity(plans.len());
    let mut li = 0;
    for (i, plan) in plans.iter().enumerate() {
        let hidden = i + 1 < plans.len();
        match plan.token {
            LayerToken::Conv { .. } => {
                let inp = x;
                let mut out = conv2d_forward(&inp, &layers[li], 1)?;
                let relu = hidden.then(|| {
                    let (o, m) = relu_forward(&out);
                    out = o;
                    m
                });
                items.push(StackItem::Conv { input: inp, relu });
                x = out;
                li += 1;
            }
            LayerToken::Fc { .. } => {
                let flat = x.reshape(&[n, plan.input.features()])?;
                let mut out = fc_forward(&flat, &layers[li])?;
                let relu = hidden.then(|| {
                    let (o, m) = relu_forward(&out);
                    out = o;
                    m
                });
                items.push(StackItem::Fc { input: flat, relu });
                x = out;
                li += 1;
            }
            LayerToken::Pool => {
                let (out, argmax) = maxpool2x2_forward(&x)?;
                items.push(StackItem::Pool { argmax });
                x = out;
            }
        }
    }
    Ok((x, StackCache { items }))
}

/// Backward through a layer stack; accumulates into `layers` gradients and
/// returns the gradient with respect to the stack input, in its original
/// (unflattened) shape.
fn stack_backward(
    layers: &mut [LayerParams],
    plans: &[LayerPlan],
    cache: &StackCache,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let mut g = grad_out.clone();
    let mut li = layers.len();
    for (item, plan) in cache.items.iter().zip(plans).rev() {
        match item {
            StackItem::Conv { input, relu } => {
                li -= 1;
                if let Some(mask) = relu {
                    g = relu_backward(&g, mask);
                }
                g = conv2d_backward(&g, input, &mut layers[li])?;
            }
            StackItem::Fc { input, relu } => {
                li -= 1;
                if let Some(mask) = relu {
                    g = relu_backward(&g, mask);
                }
                g = fc_backward(&g, input, &mut layers[li])?;
                if let ShapeState::Map { c, h, w } = plan.input {
                    g = g.reshape(&[input.shape()[0], c, h, w])?;
                }
            }
            StackItem::Pool { argmax } => {
                g = maxpool2x2_backward(&g, argmax)?;
            }
        }
    }
    Ok(g)
}

/// Instantiate the learnable layers for a token list. Hidden layers get
/// He-normal weights; with `zero_final` the last layer starts at zero so a
/// fresh predictor emits identity updates.
fn build_stack<R: Rng>(plans: &[LayerPlan], rng: &mut R, zero_final: bool) -> Vec<LayerParams> {
    let mut layers = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let mut lp = match (plan.token, plan.input) {
            (LayerToken::Conv { k, out_c }, ShapeState::Map { c, .. }) => {
                LayerParams::conv(out_c, c, k)
            }
            (LayerToken::Fc { out }, input) => {
                LayerParams::fully_connected(out, input.features())
            }
            (LayerToken::Pool, _) => continue,
            (LayerToken::Conv { .. }, ShapeState::Flat { .. }) => {
                unreachable!("plan_layers rejects conv after FC")
            }
        };
        if zero_final && i + 1 == plans.len() {
            lp.init_zero();
        } else {
            lp.init_he(rng);
        }
        layers.push(lp);
    }
    layers
}

fn slice_sample(batch: &Tensor, i: usize) -> Result<Tensor> {
    let s = batch.shape();
    let per: usize = s[1..].iter().product();
    Tensor::from_vec(&s[1..], batch.data()[i * per..(i + 1) * per].to_vec())
}

fn write_sample(batch: &mut Tensor, i: usize, sample: &Tensor) {
    let per = sample.len();
    batch.data_mut()[i * per..(i + 1) * per].copy_from_slice(sample.data());
}

struct CstnStep {
    /// Warp parameters entering this step, per sample.
    ps: Vec<WarpParams>,
    grids: Vec<SampleGrid>,
    stack: StackCache,
    dps: Vec<WarpParams>,
}

/// Forward state of one [`AlignmentPipeline::cstn_forward`] call.
pub struct CstnCache {
    steps: Vec<CstnStep>,
    final_ps: Vec<WarpParams>,
    final_grids: Vec<SampleGrid>,
    cls: Option<StackCache>,
}

/// Forward state of one [`AlignmentPipeline::stn_forward`] call.
pub struct StnCache {
    steps: Vec<StnStep>,
    cls: Option<StackCache>,
}

struct StnStep {
    /// Image entering this step (source of this step's resampling).
    input: Tensor,
    stack: StackCache,
    dps: Vec<WarpParams>,
    grids: Vec<SampleGrid>,
}

/// Forward state of one [`AlignmentPipeline::cnn_forward`] call.
pub struct CnnCache {
    cls: StackCache,
}

pub struct CstnOutput {
    pub final_p: Vec<WarpParams>,
    /// Source resampled once at `final_p`, `[N, C, H, W]`.
    pub aligned: Tensor,
    pub logits: Option<Tensor>,
}

pub struct StnOutput {
    /// Image after the last chained resampling, `[N, C, H, W]`.
    pub image: Tensor,
    pub logits: Option<Tensor>,
}

/// A built network: geometric predictor instances plus an optional
/// classifier, wired according to the spec's variant.
#[derive(Debug, Clone)]
pub struct AlignmentPipeline {
    spec: NetworkSpec,
    /// One entry when shared, `warp_ops` entries otherwise, none for a
    /// plain CNN.
    predictors: Vec<Vec<LayerParams>>,
    classifier: Vec<LayerParams>,
}

impl AlignmentPipeline {
    pub fn new<R: Rng>(spec: NetworkSpec, rng: &mut R) -> AlignmentPipeline {
        let copies = match spec.variant {
            Variant::CnnOnly => 0,
            Variant::Icstn => 1,
            Variant::Stn | Variant::Cstn => spec.warp_ops,
        };
        let predictors = (0..copies)
            .map(|_| build_stack(&spec.predictor, rng, true))
            .collect();
        let classifier = build_stack(&spec.classifier, rng, false);
        AlignmentPipeline {
            spec,
            predictors,
            classifier,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn predictors(&self) -> &[Vec<LayerParams>] {
        &self.predictors
    }

    pub fn predictors_mut(&mut self) -> &mut [Vec<LayerParams>] {
        &mut self.predictors
    }

    pub fn classifier(&self) -> &[LayerParams] {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut [LayerParams] {
        &mut self.classifier
    }

    fn predictor_index(&self, step: usize) -> usize {
        if self.spec.shared {
            0
        } else {
            step
        }
    }

    /// Parameter count of the live layers; equals `spec.count_params()`.
    pub fn live_param_count(&self) -> usize {
        let pred: usize = self
            .predictors
            .iter()
            .flat_map(|p| p.iter())
            .map(|l| l.param_count())
            .sum();
        let cls: usize = self.classifier.iter().map(|l| l.param_count()).sum();
        pred + cls
    }

    pub fn zero_grads(&mut self) {
        for stack in &mut self.predictors {
            for layer in stack.iter_mut() {
                layer.zero_grads();
            }
        }
        for layer in &mut self.classifier {
            layer.zero_grads();
        }
    }

    fn all_layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.predictors
            .iter()
            .flat_map(|p| p.iter())
            .chain(self.classifier.iter())
    }

    /// All parameters as one vector: predictors in step order, then the
    /// classifier; per layer, weights then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.live_param_count());
        for layer in self.all_layers() {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(layer.bias.data());
        }
        out
    }

    /// Gradients in the same order as [`flat_params`](Self::flat_params).
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.live_param_count());
        for layer in self.all_layers() {
            out.extend_from_slice(layer.grad_weights.data());
            out.extend_from_slice(layer.grad_bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.live_param_count() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.live_param_count(),
                v.len()
            )));
        }
        let mut off = 0;
        let mut assign = |layer: &mut LayerParams| {
            let wn = layer.weights.len();
            layer.weights.data_mut().copy_from_slice(&v[off..off + wn]);
            off += wn;
            let bn = layer.bias.len();
            layer.bias.data_mut().copy_from_slice(&v[off..off + bn]);
            off += bn;
        };
        for stack in &mut self.predictors {
            for layer in stack.iter_mut() {
                assign(layer);
            }
        }
        for layer in &mut self.classifier {
            assign(layer);
        }
        Ok(())
    }

    /// Plain classification of `[N, C, H, W]` images, no geometry.
    pub fn cnn_forward(&self, images: &Tensor) -> Result<(Tensor, CnnCache)> {
        if self.spec.variant != Variant::CnnOnly {
            return Err(Error::Config("cnn_forward needs the cnn variant".into()));
        }
        self.check_batch_shape(images)?;
        let (logits, cls) = stack_forward(&self.classifier, &self.spec.classifier, images)?;
        Ok((logits, CnnCache { cls }))
    }

    pub fn cnn_backward(&mut self, cache: &CnnCache, grad_logits: &Tensor) -> Result<Tensor> {
        stack_backward(
            &mut self.classifier,
            &self.spec.classifier,
            &cache.cls,
            grad_logits,
        )
    }

    /// Chained transformer path: each predicted warp resamples the current
    /// image in its own full frame, so geometry is not preserved across
    /// steps.
    pub fn stn_forward(&self, images: &Tensor) -> Result<(StnOutput, StnCache)> {
        if self.spec.variant != Variant::Stn {
            return Err(Error::Config("stn_forward needs the stn variant".into()));
        }
        self.check_batch_shape(images)?;
        let (n, _c, h, w) = batch_dims(images);
        let frame = FrameSpec::full(w, h)?;
        let dof = self.spec.family.dof();

        let mut img = images.clone();
        let mut steps = Vec::with_capacity(self.spec.warp_ops);
        for k in 0..self.spec.warp_ops {
            let pred = &self.predictors[self.predictor_index(k)];
            let (dp_raw, stack) = stack_forward(pred, &self.spec.predictor, &img)?;
            let mut next = Tensor::zeros(img.shape());
            let mut dps = Vec::with_capacity(n);
            let mut grids = Vec::with_capacity(n);
            for i in 0..n {
                let row = &dp_raw.data()[i * dof..(i + 1) * dof];
                let dp = WarpParams::new(self.spec.family, row.to_vec())
                    .map_err(|e| Error::DegenerateWarp(format!("warp step {k}: {e}")))?;
                let grid = make_grid(&dp, (h, w), &frame)
                    .map_err(|e| Error::DegenerateWarp(format!("warp step {k}: {e}")))?;
                let view = bilinear_sample(&slice_sample(&img, i)?, &grid)?;
                write_sample(&mut next, i, &view);
                dps.push(dp);
                grids.push(grid);
            }
            steps.push(StnStep {
                input: img,
                stack,
                dps,
                grids,
            });
            img = next;
        }
        let (logits, cls) = self.classify(&img)?;
        Ok((StnOutput { image: img, logits }, StnCache { steps, cls }))
    }

    /// Backward for the chained path. Loss gradients may enter through the
    /// logits, the final image, or both; returns the gradient with respect
    /// to the input images.
    pub fn stn_backward(
        &mut self,
        cache: &StnCache,
        grad_logits: Option<&Tensor>,
        grad_image: Option<&Tensor>,
    ) -> Result<Tensor> {
        let first = cache
            .steps
            .first()
            .ok_or_else(|| Error::Config("empty forward cache".into()))?;
        let n = batch_dims(&first.input).0;
        let dof = self.spec.family.dof();

        let mut grad_img = Tensor::zeros(first.input.shape());
        if let Some(gi) = grad_image {
            grad_img.add_scaled(gi, 1.0);
        }
        if let Some(gl) = grad_logits {
            let cls = cache
                .cls
                .as_ref()
                .ok_or_else(|| Error::Config("pipeline has no classifier".into()))?;
            let g = stack_backward(&mut self.classifier, &self.spec.classifier, cls, gl)?;
            grad_img.add_scaled(&g, 1.0);
        } else if grad_image.is_none() {
            return Err(Error::Config("no loss gradient provided".into()));
        }

        for (k, step) in cache.steps.iter().enumerate().rev() {
            let mut grad_dp = Tensor::zeros(&[n, dof]);
            let mut grad_src = Tensor::zeros(step.input.shape());
            for i in 0..n {
                let go = slice_sample(&grad_img, i)?;
                let src_i = slice_sample(&step.input, i)?;
                let (gs, gp) = bilinear_backward(&go, &src_i, &step.grids[i], &step.dps[i])?;
                write_sample(&mut grad_src, i, &gs);
                grad_dp.data_mut()[i * dof..(i + 1) * dof].copy_from_slice(&gp);
            }
            let idx = self.predictor_index(k);
            let from_pred = stack_backward(
                &mut self.predictors[idx],
                &self.spec.predictor,
                &step.stack,
                &grad_dp,
            )?;
            grad_src.add_scaled(&from_pred, 1.0);
            grad_img = grad_src;
        }
        Ok(grad_img)
    }

    /// One compositional step: sample every source at its current warp,
    /// run the predictor, compose the update.
    fn predict_step(
        &self,
        k: usize,
        sources: &[&Tensor],
        frame: &FrameSpec,
        ps: &[WarpParams],
    ) -> Result<(CstnStep, Vec<WarpParams>)> {
        let n = sources.len();
        let (c, h, w) = self.spec.input;
        let dof = self.spec.family.dof();
        let mut views = Tensor::zeros(&[n, c, h, w]);
        let mut grids = Vec::with_capacity(n);
        for i in 0..n {
            let grid = make_grid(&ps[i], (h, w), frame)
                .map_err(|e| Error::DegenerateWarp(format!("warp step {k}: {e}")))?;
            let view = bilinear_sample(sources[i], &grid)?;
            write_sample(&mut views, i, &view);
            grids.push(grid);
        }
        let pred = &self.predictors[self.predictor_index(k)];
        let (dp_raw, stack) = stack_forward(pred, &self.spec.predictor, &views)?;
        let mut dps = Vec::with_capacity(n);
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let row = &dp_raw.data()[i * dof..(i + 1) * dof];
            let dp = WarpParams::new(self.spec.family, row.to_vec())
                .map_err(|e| Error::DegenerateWarp(format!("warp step {k}: {e}")))?;
            let p = ps[i]
                .compose(&dp)
                .map_err(|e| Error::DegenerateWarp(format!("warp step {k}: {e}")))?;
            dps.push(dp);
            next.push(p);
        }
        Ok((
            CstnStep {
                ps: ps.to_vec(),
                grids,
                stack,
                dps,
            },
            next,
        ))
    }

    /// Compositional steps only: final warp parameters plus the backward
    /// cache, skipping the aligned resample and the classifier. Fits losses
    /// defined on the parameters themselves, where the aligned image would
    /// go unused; such a cache cannot back-propagate classifier logits.
    pub fn cstn_align(
        &self,
        sources: &[&Tensor],
        frame: &FrameSpec,
        initial_p: &[WarpParams],
    ) -> Result<(Vec<WarpParams>, CstnCache)> {
        self.check_cstn_inputs(sources, initial_p)?;
        let mut ps = initial_p.to_vec();
        let mut steps = Vec::with_capacity(self.spec.warp_ops);
        for k in 0..self.spec.warp_ops {
            let (step, next) = self.predict_step(k, sources, frame, &ps)?;
            steps.push(step);
            ps = next;
        }
        Ok((
            ps.clone(),
            CstnCache {
                steps,
                final_ps: ps,
                final_grids: Vec::new(),
                cls: None,
            },
        ))
    }

    /// Compositional path: warp parameters flow through the cascade and
    /// every step resamples the original `sources[i]`. The aligned image is
    /// one direct sample at the final parameters.
    pub fn cstn_forward(
        &self,
        sources: &[&Tensor],
        frame: &FrameSpec,
        initial_p: &[WarpParams],
    ) -> Result<(CstnOutput, CstnCache)> {
        self.check_cstn_inputs(sources, initial_p)?;
        let n = sources.len();
        let (c, h, w) = self.spec.input;

        let mut ps = initial_p.to_vec();
        let mut steps = Vec::with_capacity(self.spec.warp_ops);
        for k in 0..self.spec.warp_ops {
            let (step, next) = self.predict_step(k, sources, frame, &ps)?;
            steps.push(step);
            ps = next;
        }

        let mut aligned = Tensor::zeros(&[n, c, h, w]);
        let mut final_grids = Vec::with_capacity(n);
        for i in 0..n {
            let grid = make_grid(&ps[i], (h, w), frame)
                .map_err(|e| Error::DegenerateWarp(format!("final warp: {e}")))?;
            let view = bilinear_sample(sources[i], &grid)?;
            write_sample(&mut aligned, i, &view);
            final_grids.push(grid);
        }
        let (logits, cls) = self.classify(&aligned)?;
        Ok((
            CstnOutput {
                final_p: ps.clone(),
                aligned,
                logits,
            },
            CstnCache {
                steps,
                final_ps: ps,
                final_grids,
                cls,
            },
        ))
    }

    /// Backward for the compositional path. `sources` must be the tensors
    /// given to the forward call. Loss gradients may enter through the
    /// logits, the final warp parameters, or both; returns the gradient
    /// with respect to `initial_p`.
    pub fn cstn_backward(
        &mut self,
        cache: &CstnCache,
        sources: &[&Tensor],
        grad_logits: Option<&Tensor>,
        grad_final_p: Option<&[Vec<f64>]>,
    ) -> Result<Vec<Vec<f64>>> {
        let n = cache.final_ps.len();
        if sources.len() != n {
            return Err(Error::Config("sources do not match forward batch".into()));
        }
        let dof = self.spec.family.dof();

        let mut grad_p: Vec<DVector<f64>> = match grad_final_p {
            Some(gs) => {
                if gs.len() != n || gs.iter().any(|g| g.len() != dof) {
                    return Err(Error::Config("grad_final_p shape mismatch".into()));
                }
                gs.iter().map(|g| DVector::from_column_slice(g)).collect()
            }
            None => vec![DVector::zeros(dof); n],
        };

        if let Some(gl) = grad_logits {
            let cls = cache
                .cls
                .as_ref()
                .ok_or_else(|| Error::Config("pipeline has no classifier".into()))?;
            let grad_aligned = stack_backward(&mut self.classifier, &self.spec.classifier, cls, gl)?;
            for i in 0..n {
                let go = slice_sample(&grad_aligned, i)?;
                let gp = bilinear_grad_p(&go, sources[i], &cache.final_grids[i], &cache.final_ps[i])?;
                grad_p[i] += DVector::from_vec(gp);
            }
        } else if grad_final_p.is_none() {
            return Err(Error::Config("no loss gradient provided".into()));
        }

        for (k, step) in cache.steps.iter().enumerate().rev() {
            let mut grad_dp = Tensor::zeros(&[n, dof]);
            for i in 0..n {
                // p_out = compose(p_in, dp): pull the gradient back through
                // both arguments.
                let (d_in, d_dp) = compose_jacobians(&step.ps[i], &step.dps[i])?;
                let g_dp = d_dp.transpose() * &grad_p[i];
                grad_dp.data_mut()[i * dof..(i + 1) * dof].copy_from_slice(g_dp.as_slice());
                grad_p[i] = d_in.transpose() * &grad_p[i];
            }
            let idx = self.predictor_index(k);
            let grad_views = stack_backward(
                &mut self.predictors[idx],
                &self.spec.predictor,
                &step.stack,
                &grad_dp,
            )?;
            for i in 0..n {
                let gv = slice_sample(&grad_views, i)?;
                let gp = bilinear_grad_p(&gv, sources[i], &step.grids[i], &step.ps[i])?;
                grad_p[i] += DVector::from_vec(gp);
            }
        }
        Ok(grad_p.into_iter().map(|v| v.as_slice().to_vec()).collect())
    }

    /// Warp parameters after every compositional step: `k_steps + 1` entries
    /// from `initial_p` to the final parameters. Unshared cascades cannot go
    /// past their trained depth.
    pub fn warp_trajectory(
        &self,
        sources: &[&Tensor],
        frame: &FrameSpec,
        initial_p: &[WarpParams],
        k_steps: usize,
    ) -> Result<Vec<Vec<WarpParams>>> {
        if k_steps > self.spec.warp_ops && self.spec.variant != Variant::Icstn {
            return Err(Error::Config(format!(
                "an unshared cascade stops at its trained depth {}",
                self.spec.warp_ops
            )));
        }
        self.check_cstn_inputs(sources, initial_p)?;
        let mut ps = initial_p.to_vec();
        let mut trajectory = Vec::with_capacity(k_steps + 1);
        trajectory.push(ps.clone());
        for k in 0..k_steps {
            let (_, next) = self.predict_step(k, sources, frame, &ps)?;
            ps = next;
            trajectory.push(ps.clone());
        }
        Ok(trajectory)
    }

    /// Unroll the shared predictor `k_steps` times (which may exceed the
    /// trained depth) and return the final warp parameters.
    pub fn apply_more_warps(
        &self,
        sources: &[&Tensor],
        frame: &FrameSpec,
        initial_p: &[WarpParams],
        k_steps: usize,
    ) -> Result<Vec<WarpParams>> {
        if self.spec.variant != Variant::Icstn {
            return Err(Error::Config(
                "test-time unrolling needs the shared icstn variant".into(),
            ));
        }
        let mut trajectory = self.warp_trajectory(sources, frame, initial_p, k_steps)?;
        Ok(trajectory.pop().expect("trajectory includes initial_p"))
    }

    /// Resample each source at `ps` into the network's input size and run
    /// the classifier over the batch, when one is present.
    pub fn classify_at(
        &self,
        sources: &[&Tensor],
        frame: &FrameSpec,
        ps: &[WarpParams],
    ) -> Result<(Tensor, Option<Tensor>)> {
        if sources.is_empty() || sources.len() != ps.len() {
            return Err(Error::Config("need one warp per source image".into()));
        }
        let n = sources.len();
        let (c, h, w) = self.spec.input;
        let mut aligned = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            let grid = make_grid(&ps[i], (h, w), frame)?;
            let view = bilinear_sample(sources[i], &grid)?;
            write_sample(&mut aligned, i, &view);
        }
        let (logits, _) = self.classify(&aligned)?;
        Ok((aligned, logits))
    }

    fn classify(&self, images: &Tensor) -> Result<(Option<Tensor>, Option<StackCache>)> {
        if self.classifier.is_empty() {
            return Ok((None, None));
        }
        let (logits, cls) = stack_forward(&self.classifier, &self.spec.classifier, images)?;
        Ok((Some(logits), Some(cls)))
    }

    fn check_batch_shape(&self, images: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input;
        let s = images.shape();
        if s.len() != 4 || (s[1], s[2], s[3]) != (c, h, w) {
            return Err(Error::Config(format!(
                "expected [N, {c}, {h}, {w}] batch, got {s:?}"
            )));
        }
        Ok(())
    }

    fn check_cstn_inputs(&self, sources: &[&Tensor], initial_p: &[WarpParams]) -> Result<()> {
        if !matches!(self.spec.variant, Variant::Cstn | Variant::Icstn) {
            return Err(Error::Config(
                "compositional forward needs the cstn or icstn variant".into(),
            ));
        }
        if sources.is_empty() || sources.len() != initial_p.len() {
            return Err(Error::Config(
                "need one initial warp per source image".into(),
            ));
        }
        let c = self.spec.input.0;
        for (i, src) in sources.iter().enumerate() {
            if src.shape().len() != 3 || src.shape()[0] != c {
                return Err(Error::Config(format!(
                    "source {i}: expected [{c}, H, W], got {:?}",
                    src.shape()
                )));
            }
        }
        if let Some(p) = initial_p.iter().find(|p| p.family() != self.spec.family) {
            return Err(Error::Config(format!(
                "initial warp family {} does not match pipeline family {}",
                p.family().name(),
                self.spec.family.name()
            )));
        }
        Ok(())
    }
}

fn batch_dims(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient_full;
    use crate::layers::softmax_cross_entropy;
    use crate::synth::gaussian_blob;
    use crate::warp::WarpFamily;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(text: &str, variant: Variant, family: WarpFamily) -> NetworkSpec {
        NetworkSpec::build(text, variant, family, (1, 8, 8)).unwrap()
    }

    fn pipeline(text: &str, variant: Variant, family: WarpFamily, seed: u64) -> AlignmentPipeline {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AlignmentPipeline::new(spec(text, variant, family), &mut rng)
    }

    /// Overwrite every parameter with small uniform values so warp updates
    /// are non-zero but sample sites stay off the pixel lattice and mostly
    /// in bounds.
    fn randomize(pipe: &mut AlignmentPipeline, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = pipe.flat_params();
        for x in v.iter_mut() {
            *x = scale * (rng.gen::<f64>() - 0.5);
        }
        pipe.set_flat_params(&v).unwrap();
    }

    fn smooth_source() -> Tensor {
        gaussian_blob(8, 8, 3.37, 4.21, 2.3)
    }

    fn small_affine(p: [f64; 6]) -> WarpParams {
        WarpParams::new(WarpFamily::Affine, p.to_vec()).unwrap()
    }

    fn test_inits_affine() -> Vec<WarpParams> {
        vec![
            small_affine([0.013, -0.008, 0.021, 0.007, -0.011, -0.017]),
            small_affine([-0.019, 0.004, -0.013, -0.006, 0.016, 0.009]),
            small_affine([0.008, 0.017, -0.005, -0.014, 0.003, 0.019]),
        ]
    }

    #[test]
    fn live_param_count_matches_spec() {
        for (text, variant) in [
            ("[FC(6)]x4 -> conv(3x3,2)-FC(10)", Variant::Icstn),
            ("[FC(6)]x3 -> conv(3x3,2)-FC(10)", Variant::Cstn),
            ("[FC(6)]x2 -> FC(10)", Variant::Stn),
            ("conv(3x3,2)-P-FC(10)", Variant::CnnOnly),
        ] {
            let pipe = pipeline(text, variant, WarpFamily::Affine, 7);
            assert_eq!(pipe.live_param_count(), pipe.spec().count_params(), "{text}");
        }
    }

    #[test]
    fn shared_variant_has_one_predictor_instance() {
        let pipe = pipeline("[FC(6)]x4 -> FC(2)", Variant::Icstn, WarpFamily::Affine, 1);
        assert_eq!(pipe.predictors().len(), 1);
        let pipe = pipeline("[FC(6)]x4 -> FC(2)", Variant::Cstn, WarpFamily::Affine, 1);
        assert_eq!(pipe.predictors().len(), 4);
    }

    #[test]
    fn fresh_predictor_is_the_identity_cascade() {
        // Zero-initialized final layer: every update is the identity, the
        // aligned image is the source seen through initial_p = identity.
        let pipe = pipeline("[FC(6)]x2 -> FC(2)", Variant::Icstn, WarpFamily::Affine, 3);
        let src = smooth_source();
        let sources = vec![&src];
        let frame = FrameSpec::full(8, 8).unwrap();
        let inits = vec![WarpParams::identity(WarpFamily::Affine)];
        let (out, _) = pipe.cstn_forward(&sources, &frame, &inits).unwrap();
        assert_eq!(out.final_p[0].as_slice(), inits[0].as_slice());
        assert_eq!(out.aligned.data(), src.data());
    }

    #[test]
    fn fresh_stn_passes_the_image_through() {
        let pipe = pipeline("[FC(6)]x2 -> FC(2)", Variant::Stn, WarpFamily::Affine, 3);
        let src = smooth_source();
        let mut batch = Tensor::zeros(&[1, 1, 8, 8]);
        write_sample(&mut batch, 0, &src);
        let (out, _) = pipe.stn_forward(&batch).unwrap();
        assert_eq!(out.image.data(), batch.data());
        assert!(out.logits.is_some());
    }

    #[test]
    fn final_warp_is_the_matrix_product_of_updates() {
        let mut pipe = pipeline("[FC(6)]x3 -> FC(2)", Variant::Cstn, WarpFamily::Affine, 5);
        randomize(&mut pipe, 11, 0.04);
        let src = smooth_source();
        let sources = vec![&src];
        let frame = FrameSpec::full(8, 8).unwrap();
        let inits = vec![small_affine([0.02, -0.01, 0.03, 0.01, -0.02, -0.01])];
        let (out, cache) = pipe.cstn_forward(&sources, &frame, &inits).unwrap();

        let mut m = inits[0].to_matrix();
        for step in &cache.steps {
            m = step.dps[0].to_matrix() * m;
        }
        let direct = out.final_p[0].to_matrix();
        assert!((direct - m).abs().max() < 1e-12);
    }

    #[test]
    fn aligned_image_is_one_direct_sample_of_the_source() {
        let mut pipe = pipeline("[FC(6)]x3 -> FC(2)", Variant::Icstn, WarpFamily::Affine, 9);
        randomize(&mut pipe, 13, 0.04);
        let src = smooth_source();
        let sources = vec![&src];
        let frame = FrameSpec::full(8, 8).unwrap();
        let inits = test_inits_affine()[..1].to_vec();
        let (out, _) = pipe.cstn_forward(&sources, &frame, &inits).unwrap();
        let grid = make_grid(&out.final_p[0], (8, 8), &frame).unwrap();
        let direct = bilinear_sample(&src, &grid).unwrap();
        assert_eq!(out.aligned.data(), direct.data());
    }

    #[test]
    fn unrolling_matches_forward_and_respects_zero_steps() {
        let mut pipe = pipeline("[FC(6)]x2 -> FC(2)", Variant::Icstn, WarpFamily::Affine, 21);
        randomize(&mut pipe, 23, 0.04);
        let src = smooth_source();
        let sources = vec![&src, &src, &src];
        let frame = FrameSpec::full(8, 8).unwrap();
        let inits = test_inits_affine();
        let (out, _) = pipe.cstn_forward(&sources, &frame, &inits).unwrap();
        let unrolled = pipe.apply_more_warps(&sources, &frame, &inits, 2).unwrap();
        for (a, b) in out.final_p.iter().zip(&unrolled) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        let zero = pipe.apply_more_warps(&sources, &frame, &inits, 0).unwrap();
        for (a, b) in zero.iter().zip(&inits) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        let pipe = pipeline("[FC(6)]x2 -> FC(2)", Variant::Cstn, WarpFamily::Affine, 21);
        assert!(pipe.apply_more_warps(&sources, &frame, &inits, 2).is_err());
    }

    #[test]
    fn input_validation_rejects_mismatches() {
        let pipe = pipeline("[FC(6)]x2 -> FC(2)", Variant::Icstn, WarpFamily::Affine, 2);
        let src = smooth_source();
        let frame = FrameSpec::full(8, 8).unwrap();
        let id = WarpParams::identity(WarpFamily::Affine);
        // Batch size mismatch.
        assert!(pipe
            .cstn_forward(&[&src, &src], &frame, &[id.clone()])
            .is_err());
        // Wrong warp family.
        let hom = WarpParams::identity(WarpFamily::Homography);
        assert!(pipe.cstn_forward(&[&src], &frame, &[hom]).is_err());
        // Wrong variant entry points.
        let batch = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(pipe.stn_forward(&batch).is_err());
        assert!(pipe.cnn_forward(&batch).is_err());
    }

    /// End-to-end finite differences on the compositional path, shared
    /// predictor, both loss entry points at once. This is the test the
    /// whole backward implementation answers to.
    #[test]
    fn cstn_gradients_match_finite_differences() {
        let mut base = pipeline("[FC(6)]x2 -> FC(2)", Variant::Icstn, WarpFamily::Affine, 31);
        randomize(&mut base, 37, 0.05);
        let src = smooth_source();
        let sources = vec![&src, &src, &src];
        let frame = FrameSpec::full(8, 8).unwrap();
        let inits = test_inits_affine();
        let labels = [0usize, 1, 0];

        base.zero_grads();
        let (out, cache) = base.cstn_forward(&sources, &frame, &inits).unwrap();
        let (_, gl) = softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels).unwrap();
        let gp: Vec<Vec<f64>> = out.final_p.iter().map(|p| p.as_slice().to_vec()).collect();
        base.cstn_backward(&cache, &sources, Some(&gl), Some(&gp)).unwrap();
        let analytic = base.flat_grads();
        let mut x = base.flat_params();

        let mut f = |v: &[f64]| -> f64 {
            base.set_flat_params(v).unwrap();
            let (out, _) = base.cstn_forward(&sources, &frame, &inits).unwrap();
            let (ce, _) = softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels).unwrap();
            let quad: f64 = out
                .final_p
                .iter()
                .flat_map(|p| p.as_slice())
                .map(|v| 0.5 * v * v)
                .sum();
            ce + quad
        };
        let report = check_gradient_full(&mut f, &mut x, &analytic, 1e-5, 1e-6);
        assert!(
            report.max_rel_error < 1e-4,
            "worst {} at {} of {}",
            report.max_rel_error,
            report.worst_index,
            report.checked
        );
    }

    /// Same check through conv, pool, ReLU, and the perspective terms of a
    /// homography cascade with unshared predictors.
    #[test]
    fn homography_conv_gradients_match_finite_differences() {
        let mut base = pipeline(
            "[conv(3x3,2)-FC(8)]x2 -> conv(3x3,2)-P-FC(2)",
            Variant::Cstn,
            WarpFamily::Homography,
            41,
        );
        randomize(&mut base, 43, 0.05);
        let src = smooth_source();
        let sources = vec![&src, &src];
        let frame = FrameSpec::full(8, 8).unwrap();
        let inits = vec![
            WarpParams::new(
                WarpFamily::Homography,
                vec![0.011, -0.007, 0.019, 0.006, -0.013, -0.009, 0.008, -0.012],
            )
            .unwrap(),
            WarpParams::new(
                WarpFamily::Homography,
                vec![-0.014, 0.009, -0.011, -0.008, 0.012, 0.016, -0.006, 0.010],
            )
            .unwrap(),
        ];
        let labels = [1usize, 0];

        base.zero_grads();
        let (out, cache) = base.cstn_forward(&sources, &frame, &inits).unwrap();
        let (_, gl) = softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels).unwrap();
        let gp: Vec<Vec<f64>> = out.final_p.iter().map(|p| p.as_slice().to_vec()).collect();
        base.cstn_backward(&cache, &sources, Some(&gl), Some(&gp)).unwrap();
        let analytic = base.flat_grads();
        let mut x = base.flat_params();

        let mut f = |v: &[f64]| -> f64 {
            base.set_flat_params(v).unwrap();
            let (out, _) = base.cstn_forward(&sources, &frame, &inits).unwrap();
            let (ce, _) = softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels).unwrap();
            let quad: f64 = out
                .final_p
                .iter()
                .flat_map(|p| p.as_slice())
                .map(|v| 0.5 * v * v)
                .sum();
            ce + quad
        };
        let report = check_gradient_full(&mut f, &mut x, &analytic, 1e-5, 1e-6);
        assert!(
            report.max_rel_error < 1e-4,
            "worst {} at {} of {}",
            report.max_rel_error,
            report.worst_index,
            report.checked
        );
    }

    /// Finite differences on the chained path, including the gradient that
    /// flows through each step's resampled image.
    #[test]
    fn stn_gradients_match_finite_differences() {
        let mut base = pipeline("[FC(6)]x2 -> FC(2)", Variant::Stn, WarpFamily::Affine, 53);
        randomize(&mut base, 59, 0.05);
        let mut batch = Tensor::zeros(&[2, 1, 8, 8]);
        write_sample(&mut batch, 0, &smooth_source());
        write_sample(&mut batch, 1, &gaussian_blob(8, 8, 4.61, 2.88, 2.6));
        let labels = [0usize, 1];

        base.zero_grads();
        let (out, cache) = base.stn_forward(&batch).unwrap();
        let (_, gl) = softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels).unwrap();
        let grad_input = base.stn_backward(&cache, Some(&gl), None).unwrap();
        let analytic = base.flat_grads();
        let mut x = base.flat_params();

        let mut f = |v: &[f64]| -> f64 {
            base.set_flat_params(v).unwrap();
            let (out, _) = base.stn_forward(&batch).unwrap();
            softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels)
                .unwrap()
                .0
        };
        let report = check_gradient_full(&mut f, &mut x, &analytic, 1e-5, 1e-6);
        assert!(
            report.max_rel_error < 1e-4,
            "worst {} at {} of {}",
            report.max_rel_error,
            report.worst_index,
            report.checked
        );

        // Spot-check the returned input-image gradient the same way.
        base.set_flat_params(&x).unwrap();
        let mut img = batch.data().to_vec();
        let mut fi = |v: &[f64]| -> f64 {
            let b = Tensor::from_vec(&[2, 1, 8, 8], v.to_vec()).unwrap();
            let (out, _) = base.stn_forward(&b).unwrap();
            softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels)
                .unwrap()
                .0
        };
        let probe: Vec<usize> = (0..img.len()).step_by(13).collect();
        let report = crate::gradcheck::check_gradient(
            &mut fi,
            &mut img,
            grad_input.data(),
            &probe,
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    /// The shared predictor's gradient is the sum of per-step gradients
    /// computed with unshared copies held at identical values.
    #[test]
    fn shared_gradient_is_the_sum_over_unfolded_steps() {
        let mut shared = pipeline("[FC(6)]x3 -> FC(2)", Variant::Icstn, WarpFamily::Affine, 61);
        randomize(&mut shared, 67, 0.05);
        let mut unshared = pipeline("[FC(6)]x3 -> FC(2)", Variant::Cstn, WarpFamily::Affine, 61);
        // Copy the shared instance into all three step slots and align the
        // classifiers.
        let pred = shared.predictors()[0].clone();
        for slot in unshared.predictors_mut() {
            slot.clone_from(&pred);
        }
        for (dst, src) in unshared
            .classifier_mut()
            .iter_mut()
            .zip(shared.classifier())
        {
            dst.clone_from(src);
        }

        let src = smooth_source();
        let sources = vec![&src, &src, &src];
        let frame = FrameSpec::full(8, 8).unwrap();
        let inits = test_inits_affine();
        let labels = [1usize, 0, 1];

        let run = |pipe: &mut AlignmentPipeline| {
            pipe.zero_grads();
            let (out, cache) = pipe.cstn_forward(&sources, &frame, &inits).unwrap();
            let (_, gl) = softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels).unwrap();
            pipe.cstn_backward(&cache, &sources, Some(&gl), None).unwrap();
        };
        run(&mut shared);
        run(&mut unshared);

        for (li, layer) in shared.predictors()[0].iter().enumerate() {
            let mut sum_w = Tensor::zeros(layer.grad_weights.shape());
            let mut sum_b = Tensor::zeros(layer.grad_bias.shape());
            for copy in unshared.predictors() {
                sum_w.add_scaled(&copy[li].grad_weights, 1.0);
                sum_b.add_scaled(&copy[li].grad_bias, 1.0);
            }
            assert!(layer.grad_weights.max_abs_diff(&sum_w) < 1e-12);
            assert!(layer.grad_bias.max_abs_diff(&sum_b) < 1e-12);
        }
    }

    /// With the predictor frozen at zero and identity initialization the
    /// classifier sees the raw input, so its gradients match a plain CNN
    /// holding the same weights.
    #[test]
    fn identity_cascade_classifier_matches_plain_cnn() {
        let mut cascade = pipeline(
            "[FC(6)]x2 -> conv(3x3,2)-FC(2)",
            Variant::Icstn,
            WarpFamily::Affine,
            71,
        );
        let mut cnn = pipeline("conv(3x3,2)-FC(2)", Variant::CnnOnly, WarpFamily::Affine, 71);
        for (dst, src) in cnn.classifier_mut().iter_mut().zip(cascade.classifier()) {
            dst.clone_from(src);
        }

        let src = smooth_source();
        let sources = vec![&src];
        let frame = FrameSpec::full(8, 8).unwrap();
        let inits = vec![WarpParams::identity(WarpFamily::Affine)];
        let labels = [1usize];

        cascade.zero_grads();
        let (out, cache) = cascade.cstn_forward(&sources, &frame, &inits).unwrap();
        let (_, gl) = softmax_cross_entropy(out.logits.as_ref().unwrap(), &labels).unwrap();
        cascade
            .cstn_backward(&cache, &sources, Some(&gl), None)
            .unwrap();

        let mut batch = Tensor::zeros(&[1, 1, 8, 8]);
        write_sample(&mut batch, 0, &src);
        cnn.zero_grads();
        let (logits, cc) = cnn.cnn_forward(&batch).unwrap();
        assert_eq!(logits.data(), out.logits.as_ref().unwrap().data());
        let (_, gl2) = softmax_cross_entropy(&logits, &labels).unwrap();
        cnn.cnn_backward(&cc, &gl2).unwrap();

        for (a, b) in cascade.classifier().iter().zip(cnn.classifier()) {
            assert_eq!(a.grad_weights.data(), b.grad_weights.data());
            assert_eq!(a.grad_bias.data(), b.grad_bias.data());
        }
    }
}
