//! The Compressed Redundancy Filtering network.
//!
//! One enhancement step consumes the current frame, a window of future
//! frames and the hidden features of everything already enhanced. Features
//! are pushed down a Temporal-Spatial Downsampling ladder, collapsed over
//! time, and brought back to full resolution with skip connections; a final
//! fusion convolution produces a residual that is added to the input frame.
//!
//! Forward and backward passes are hand-derived and validated against
//! finite differences. All state is explicit: `Parameters` owns both the
//! weights and their gradient slots.

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView1, ArrayView5, Axis, Ix1, Ix5};
use rand::Rng;
use std::collections::BTreeMap;

use crate::error::{Result, VigError};
use crate::ops::{
    conv3d, conv3d_backward, leaky_relu, leaky_relu_backward, pixel_shuffle4,
    pixel_unshuffle4, temporal_mean_pool, temporal_mean_pool_backward, Elem,
};
use crate::rng::rng_from;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature channels after pre-extraction.
    pub base_channels: usize,
    /// Future frames consumed per step; the temporal stack is
    /// `future_window + 2` deep (window plus hidden state).
    pub future_window: usize,
    /// Spatial down-sampling factor per TSD block.
    pub spatial_factor: usize,
    /// Number of TSD blocks in the ladder.
    pub tsd_blocks: usize,
    /// Negative slope of the leaky rectifier.
    pub activation_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            future_window: 3,
            spatial_factor: 2,
            tsd_blocks: 2,
            activation_slope: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(VigError::Config("model.base_channels must be >= 1".into()));
        }
        if self.spatial_factor != 2 {
            return Err(VigError::Config("model.spatial_factor is fixed at 2".into()));
        }
        if self.tsd_blocks != 2 {
            return Err(VigError::Config("model.tsd_blocks is fixed at 2".into()));
        }
        // The stack must survive `tsd_blocks` temporal-valid convolutions.
        if self.future_window + 1 < self.tsd_blocks {
            return Err(VigError::Config(format!(
                "model.future_window must be >= {} for {} TSD blocks",
                self.tsd_blocks - 1,
                self.tsd_blocks
            )));
        }
        Ok(())
    }

    /// Temporal depth of the feature stack fed to the RF module.
    pub fn stack_len(&self) -> usize {
        self.future_window + 2
    }

    /// Temporal extent left when the TD block runs, and thus its kernel size.
    pub fn td_kernel(&self) -> usize {
        self.stack_len() - self.tsd_blocks
    }

    /// Spatial divisibility required of input frames.
    pub fn spatial_divisor(&self) -> usize {
        self.spatial_factor.pow(self.tsd_blocks as u32)
    }

    /// Channel count at ladder level `k` (0 = pre-extracted features).
    pub fn channels_at(&self, k: usize) -> usize {
        self.base_channels << k
    }
}

/// One named learnable tensor and its gradient slot.
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

/// The closed set of learnable tensors. Iteration order is the sorted name
/// order, which fixes checkpoint layout and optimizer traversal.
#[derive(Debug, Clone)]
pub struct Parameters<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Elem> Parameters<T> {
    fn from_shapes(shapes: Vec<(String, Vec<usize>)>, seed: u64) -> Self {
        let mut sorted = shapes;
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = rng_from(seed);
        let mut entries = Vec::with_capacity(sorted.len());
        let mut index = BTreeMap::new();
        for (name, shape) in sorted {
            // Fan-in-scaled uniform init for weights, zeros for biases.
            let value = if shape.len() == 1 {
                ArrayD::zeros(shape.clone())
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                ArrayD::from_shape_simple_fn(shape.clone(), || {
                    T::from_f64(rng.gen_range(-bound..bound))
                })
            };
            let grad = ArrayD::zeros(value.raw_dim());
            index.insert(name.clone(), entries.len());
            entries.push(ParamEntry { name, value, grad });
        }
        Parameters { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index.get(name).map(|&i| &self.entries[i].grad)
    }

    /// Replace a tensor's value; shape must match.
    pub fn set(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| VigError::Config(format!("unknown parameter {name}")))?;
        if value.shape() != self.entries[i].value.shape() {
            return Err(VigError::shape(
                format!("parameter {name}"),
                format!("{:?}", self.entries[i].value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    fn weight5(&self, i: usize) -> ArrayView5<'_, T> {
        self.entries[i]
            .value
            .view()
            .into_dimensionality::<Ix5>()
            .expect("weight tensor rank")
    }

    fn bias1(&self, i: usize) -> ArrayView1<'_, T> {
        self.entries[i]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias tensor rank")
    }

    fn add_grad(&mut self, i: usize, g: ArrayD<T>) {
        self.entries[i].grad.zip_mut_with(&g, |a, &b| *a = *a + b);
    }

    /// Squared L2 norm of all gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|&g| g.to_f64() * g.to_f64())
            .sum()
    }

    /// Scale all gradients in place.
    pub fn scale_grads(&mut self, factor: T) {
        for e in &mut self.entries {
            e.grad.mapv_inplace(|g| g * factor);
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Resolved indices of every tensor; avoids name lookups on the hot path.
#[derive(Debug, Clone, Copy)]
struct ParamIdx {
    pre_w: usize,
    pre_b: usize,
    tsd_proj_w: [usize; 2],
    tsd_proj_b: [usize; 2],
    tsd_conv_w: [usize; 2],
    tsd_conv_b: [usize; 2],
    td_w: usize,
    td_b: usize,
    su_proj_w: [usize; 2],
    su_proj_b: [usize; 2],
    fuse_w: usize,
    fuse_b: usize,
}

/// The CRF network: configuration plus its parameter set.
#[derive(Debug, Clone)]
pub struct Crf<T: Elem> {
    cfg: ModelConfig,
    params: Parameters<T>,
    idx: ParamIdx,
}

fn as4<T: Elem>(frame: &Array2<T>) -> Array4<T> {
    let (h, w) = frame.dim();
    frame.to_owned().into_shape_with_order((1, 1, h, w)).expect("frame reshape")
}

fn rank3<T: Elem>(x: Array4<T>) -> Array3<T> {
    let (t, c, h, w) = x.dim();
    debug_assert_eq!(t, 1);
    x.into_shape_with_order((c, h, w)).expect("squeeze temporal axis")
}

fn rank4<T: Elem>(x: &Array3<T>) -> Array4<T> {
    let (c, h, w) = x.dim();
    x.to_owned().into_shape_with_order((1, c, h, w)).expect("unsqueeze temporal axis")
}

impl<T: Elem> Crf<T> {
    /// Build a model with fan-in-uniform weights drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let f2 = cfg.spatial_factor * cfg.spatial_factor;
        let (c0, c1, c2) = (cfg.channels_at(0), cfg.channels_at(1), cfg.channels_at(2));
        let shapes = vec![
            ("pre.w".to_string(), vec![c0, 1, 1, 3, 3]),
            ("pre.b".to_string(), vec![c0]),
            ("tsd1.proj.w".to_string(), vec![c1, f2 * c0, 1, 1, 1]),
            ("tsd1.proj.b".to_string(), vec![c1]),
            ("tsd1.conv.w".to_string(), vec![c1, c1, 2, 3, 3]),
            ("tsd1.conv.b".to_string(), vec![c1]),
            ("tsd2.proj.w".to_string(), vec![c2, f2 * c1, 1, 1, 1]),
            ("tsd2.proj.b".to_string(), vec![c2]),
            ("tsd2.conv.w".to_string(), vec![c2, c2, 2, 3, 3]),
            ("tsd2.conv.b".to_string(), vec![c2]),
            ("td.w".to_string(), vec![c2, c2, cfg.td_kernel(), 1, 1]),
            ("td.b".to_string(), vec![c2]),
            ("su1.proj.w".to_string(), vec![f2 * c1, c2, 1, 1, 1]),
            ("su1.proj.b".to_string(), vec![f2 * c1]),
            ("su2.proj.w".to_string(), vec![f2 * c0, c1, 1, 1, 1]),
            ("su2.proj.b".to_string(), vec![f2 * c0]),
            ("fuse.w".to_string(), vec![1, c0, 1, 3, 3]),
            ("fuse.b".to_string(), vec![1]),
        ];
        let params = Parameters::from_shapes(shapes, seed);
        let idx = ParamIdx {
            pre_w: params.idx("pre.w"),
            pre_b: params.idx("pre.b"),
            tsd_proj_w: [params.idx("tsd1.proj.w"), params.idx("tsd2.proj.w")],
            tsd_proj_b: [params.idx("tsd1.proj.b"), params.idx("tsd2.proj.b")],
            tsd_conv_w: [params.idx("tsd1.conv.w"), params.idx("tsd2.conv.w")],
            tsd_conv_b: [params.idx("tsd1.conv.b"), params.idx("tsd2.conv.b")],
            td_w: params.idx("td.w"),
            td_b: params.idx("td.b"),
            su_proj_w: [params.idx("su1.proj.w"), params.idx("su2.proj.w")],
            su_proj_b: [params.idx("su1.proj.b"), params.idx("su2.proj.b")],
            fuse_w: params.idx("fuse.w"),
            fuse_b: params.idx("fuse.b"),
        };
        Ok(Crf { cfg, params, idx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    /// Replace the parameter set, e.g. when loading a checkpoint.
    pub fn set_params(&mut self, params: Parameters<T>) -> Result<()> {
        let expect: Vec<&str> = self.params.names().collect();
        let got: Vec<&str> = params.names().collect();
        if expect != got {
            return Err(VigError::Checkpoint(format!(
                "parameter names do not match model: expected {expect:?}, got {got:?}"
            )));
        }
        for (a, b) in self.params.entries().iter().zip(params.entries()) {
            if a.value.shape() != b.value.shape() {
                return Err(VigError::shape(
                    format!("parameter {}", a.name),
                    format!("{:?}", a.value.shape()),
                    format!("{:?}", b.value.shape()),
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    fn slope(&self) -> T {
        T::from_f64(self.cfg.activation_slope)
    }

    fn check_divisible(&self, h: usize, w: usize) -> Result<()> {
        let d = self.cfg.spatial_divisor();
        if h % d != 0 {
            return Err(VigError::divisibility("frame height", h, d));
        }
        if w % d != 0 {
            return Err(VigError::divisibility("frame width", w, d));
        }
        Ok(())
    }

    // ---- pre-extraction -------------------------------------------------

    pub fn pre_extract_cached(&self, frame: &Array2<T>) -> Result<(Array3<T>, PreCache<T>)> {
        let (h, w) = frame.dim();
        self.check_divisible(h, w)?;
        let x = as4(frame);
        let pre = conv3d(x.view(), self.params.weight5(self.idx.pre_w), self.params.bias1(self.idx.pre_b), 1)?;
        let out = leaky_relu(&pre, self.slope());
        Ok((rank3(out), PreCache { input: x, pre_act: pre }))
    }

    /// Primitive feature extraction: one padded convolution plus activation.
    pub fn pre_extract(&self, frame: &Array2<T>) -> Result<Array3<T>> {
        self.pre_extract_cached(frame).map(|(f0, _)| f0)
    }

    pub fn pre_extract_backward(&mut self, cache: &PreCache<T>, grad: &Array3<T>) -> Result<Array2<T>> {
        let g = leaky_relu_backward(&cache.pre_act, &rank4(grad), self.slope());
        let (gx, gw, gb) = conv3d_backward(
            cache.input.view(),
            self.params.weight5(self.idx.pre_w),
            &g,
            1,
        )?;
        self.params.add_grad(self.idx.pre_w, gw.into_dyn());
        self.params.add_grad(self.idx.pre_b, gb.into_dyn());
        let (_, _, h, w) = gx.dim();
        Ok(gx.into_shape_with_order((h, w)).expect("frame grad reshape"))
    }

    // ---- TSD block -------------------------------------------------------

    pub fn tsd_block_cached(&self, x: &Array4<T>, block: usize) -> Result<(Array4<T>, TsdCache<T>)> {
        if !(1..=self.cfg.tsd_blocks).contains(&block) {
            return Err(VigError::Range {
                what: "tsd block index".into(),
                detail: format!("{block} not in 1..={}", self.cfg.tsd_blocks),
            });
        }
        let (t, c, _, _) = x.dim();
        if t < 2 {
            return Err(VigError::shape("tsd temporal extent", ">= 2", format!("{t}")));
        }
        let expect_c = self.cfg.channels_at(block - 1);
        if c != expect_c {
            return Err(VigError::shape("tsd input channels", format!("{expect_c}"), format!("{c}")));
        }
        let k = block - 1;
        let unshuffled = pixel_unshuffle4(x, self.cfg.spatial_factor)?;
        let projected = conv3d(
            unshuffled.view(),
            self.params.weight5(self.idx.tsd_proj_w[k]),
            self.params.bias1(self.idx.tsd_proj_b[k]),
            0,
        )?;
        let pre = conv3d(
            projected.view(),
            self.params.weight5(self.idx.tsd_conv_w[k]),
            self.params.bias1(self.idx.tsd_conv_b[k]),
            1,
        )?;
        let out = leaky_relu(&pre, self.slope());
        Ok((out, TsdCache { unshuffled, projected, pre_act: pre, block }))
    }

    /// Temporal-spatial down-sampling: halves the spatial dims, doubles the
    /// channel budget, shortens the stack by one frame.
    pub fn tsd_block(&self, x: &Array4<T>, block_index: usize) -> Result<Array4<T>> {
        self.tsd_block_cached(x, block_index).map(|(y, _)| y)
    }

    pub fn tsd_block_backward(&mut self, cache: &TsdCache<T>, grad: &Array4<T>) -> Result<Array4<T>> {
        let k = cache.block - 1;
        let g = leaky_relu_backward(&cache.pre_act, grad, self.slope());
        let (g_proj, gw, gb) = conv3d_backward(
            cache.projected.view(),
            self.params.weight5(self.idx.tsd_conv_w[k]),
            &g,
            1,
        )?;
        self.params.add_grad(self.idx.tsd_conv_w[k], gw.into_dyn());
        self.params.add_grad(self.idx.tsd_conv_b[k], gb.into_dyn());
        let (g_unshuf, gw, gb) = conv3d_backward(
            cache.unshuffled.view(),
            self.params.weight5(self.idx.tsd_proj_w[k]),
            &g_proj,
            0,
        )?;
        self.params.add_grad(self.idx.tsd_proj_w[k], gw.into_dyn());
        self.params.add_grad(self.idx.tsd_proj_b[k], gb.into_dyn());
        pixel_shuffle4(&g_unshuf, self.cfg.spatial_factor)
    }

    // ---- TD block ----------------------------------------------------------

    pub fn td_block_cached(&self, x: &Array4<T>) -> Result<(Array3<T>, TdCache<T>)> {
        let (t, _, _, _) = x.dim();
        if t != self.cfg.td_kernel() {
            return Err(VigError::shape(
                "td temporal extent",
                format!("{}", self.cfg.td_kernel()),
                format!("{t}"),
            ));
        }
        let out = conv3d(
            x.view(),
            self.params.weight5(self.idx.td_w),
            self.params.bias1(self.idx.td_b),
            0,
        )?;
        Ok((rank3(out), TdCache { input: x.clone() }))
    }

    /// Temporal down-sampling: a full-span valid temporal convolution that
    /// collapses the stack to a single feature map.
    pub fn td_block(&self, x: &Array4<T>) -> Result<Array3<T>> {
        self.td_block_cached(x).map(|(y, _)| y)
    }

    pub fn td_block_backward(&mut self, cache: &TdCache<T>, grad: &Array3<T>) -> Result<Array4<T>> {
        let g = rank4(grad);
        let (gx, gw, gb) = conv3d_backward(cache.input.view(), self.params.weight5(self.idx.td_w), &g, 0)?;
        self.params.add_grad(self.idx.td_w, gw.into_dyn());
        self.params.add_grad(self.idx.td_b, gb.into_dyn());
        Ok(gx)
    }

    // ---- SU block ----------------------------------------------------------

    pub fn su_block_cached(&self, x: &Array3<T>, skip: &Array3<T>, block: usize) -> Result<(Array3<T>, SuCache<T>)> {
        if !(1..=self.cfg.tsd_blocks).contains(&block) {
            return Err(VigError::Range {
                what: "su block index".into(),
                detail: format!("{block} not in 1..={}", self.cfg.tsd_blocks),
            });
        }
        if x.dim() != skip.dim() {
            return Err(VigError::shape(
                "su skip",
                format!("{:?}", x.dim()),
                format!("{:?}", skip.dim()),
            ));
        }
        let k = block - 1;
        let sum = rank4(&(x + skip));
        let projected = conv3d(
            sum.view(),
            self.params.weight5(self.idx.su_proj_w[k]),
            self.params.bias1(self.idx.su_proj_b[k]),
            0,
        )?;
        let shuffled = pixel_shuffle4(&projected, self.cfg.spatial_factor)?;
        let out = leaky_relu(&shuffled, self.slope());
        Ok((rank3(out), SuCache { sum, pre_act: shuffled, block }))
    }

    /// Spatial up-sampling: add the skip, project channels, rearrange depth
    /// to space, activate. Doubles the spatial dims.
    pub fn su_block(&self, x: &Array3<T>, skip: &Array3<T>, block_index: usize) -> Result<Array3<T>> {
        self.su_block_cached(x, skip, block_index).map(|(y, _)| y)
    }

    /// Returns the shared gradient of `x` and `skip` (identical by linearity).
    pub fn su_block_backward(&mut self, cache: &SuCache<T>, grad: &Array3<T>) -> Result<Array3<T>> {
        let k = cache.block - 1;
        let g = leaky_relu_backward(&cache.pre_act, &rank4(grad), self.slope());
        let g_proj = pixel_unshuffle4(&g, self.cfg.spatial_factor)?;
        let (g_sum, gw, gb) = conv3d_backward(
            cache.sum.view(),
            self.params.weight5(self.idx.su_proj_w[k]),
            &g_proj,
            0,
        )?;
        self.params.add_grad(self.idx.su_proj_w[k], gw.into_dyn());
        self.params.add_grad(self.idx.su_proj_b[k], gb.into_dyn());
        Ok(rank3(g_sum))
    }

    // ---- RF module ----------------------------------------------------------

    pub fn rf_forward_cached(&self, window: &[Array3<T>], hidden: &Array3<T>) -> Result<(Array3<T>, RfCache<T>)> {
        let expect = self.cfg.future_window + 1;
        if window.len() != expect {
            return Err(VigError::shape("rf window length", format!("{expect}"), format!("{}", window.len())));
        }
        let dim = window[0].dim();
        for f in window.iter().chain(std::iter::once(hidden)) {
            if f.dim() != dim {
                return Err(VigError::shape("rf feature shape", format!("{dim:?}"), format!("{:?}", f.dim())));
            }
        }
        let (c, h, w) = dim;
        let t = self.cfg.stack_len();
        let mut stack = Array4::zeros((t, c, h, w));
        for (i, f) in window.iter().enumerate() {
            stack.index_axis_mut(Axis(0), i).assign(f);
        }
        stack.index_axis_mut(Axis(0), t - 1).assign(hidden);

        let (a1, tsd1) = self.tsd_block_cached(&stack, 1)?;
        let (a2, tsd2) = self.tsd_block_cached(&a1, 2)?;
        let (f_td, td) = self.td_block_cached(&a2)?;
        let skip2 = temporal_mean_pool(&a2);
        let (u1, su1) = self.su_block_cached(&f_td, &skip2, 1)?;
        let skip1 = temporal_mean_pool(&a1);
        let (f1, su2) = self.su_block_cached(&u1, &skip1, 2)?;
        Ok((
            f1,
            RfCache {
                t1: a1.dim().0,
                t2: a2.dim().0,
                tsd1,
                tsd2,
                td,
                su1,
                su2,
            },
        ))
    }

    /// One recurrence step over the stacked feature window plus hidden state;
    /// returns the new hidden feature map at full feature resolution.
    pub fn rf_forward(&self, window: &[Array3<T>], hidden: &Array3<T>) -> Result<Array3<T>> {
        self.rf_forward_cached(window, hidden).map(|(y, _)| y)
    }

    /// Backward through one RF step: gradients for each window entry and for
    /// the incoming hidden state.
    pub fn rf_backward(&mut self, cache: &RfCache<T>, grad_f1: &Array3<T>) -> Result<(Vec<Array3<T>>, Array3<T>)> {
        let g_sum2 = self.su_block_backward(&cache.su2, grad_f1)?;
        // The SU input and its skip receive the same gradient.
        let g_u1 = &g_sum2;
        let g_skip1 = &g_sum2;
        let g_sum1 = self.su_block_backward(&cache.su1, g_u1)?;
        let g_ftd = &g_sum1;
        let g_skip2 = &g_sum1;
        let mut g_a2 = self.td_block_backward(&cache.td, g_ftd)?;
        g_a2.zip_mut_with(&temporal_mean_pool_backward(g_skip2, cache.t2), |a, &b| *a = *a + b);
        let mut g_a1 = self.tsd_block_backward(&cache.tsd2, &g_a2)?;
        g_a1.zip_mut_with(&temporal_mean_pool_backward(g_skip1, cache.t1), |a, &b| *a = *a + b);
        let g_stack = self.tsd_block_backward(&cache.tsd1, &g_a1)?;

        let t = g_stack.dim().0;
        let mut frames: Vec<Array3<T>> = (0..t - 1)
            .map(|i| g_stack.index_axis(Axis(0), i).to_owned())
            .collect();
        let hidden = g_stack.index_axis(Axis(0), t - 1).to_owned();
        frames.truncate(self.cfg.future_window + 1);
        Ok((frames, hidden))
    }

    // ---- fusion ----------------------------------------------------------

    pub fn fuse_residual_cached(&self, f1: &Array3<T>, frame: &Array2<T>) -> Result<(Array2<T>, FuseCache<T>)> {
        let (c, h, w) = f1.dim();
        if c != self.cfg.base_channels || frame.dim() != (h, w) {
            return Err(VigError::shape(
                "fuse inputs",
                format!("({}, {h}, {w}) features with ({h}, {w}) frame", self.cfg.base_channels),
                format!("{:?} features with {:?} frame", f1.dim(), frame.dim()),
            ));
        }
        let x = rank4(f1);
        let res = conv3d(
            x.view(),
            self.params.weight5(self.idx.fuse_w),
            self.params.bias1(self.idx.fuse_b),
            1,
        )?;
        let residual = res.into_shape_with_order((h, w)).expect("fuse squeeze");
        Ok((&residual + frame, FuseCache { features: x }))
    }

    /// Residual fusion: one convolution down to a single channel, added to
    /// the input frame. No clamping; export quantization happens downstream.
    pub fn fuse_residual(&self, f1: &Array3<T>, frame: &Array2<T>) -> Result<Array2<T>> {
        self.fuse_residual_cached(f1, frame).map(|(y, _)| y)
    }

    /// Returns gradient w.r.t. the hidden features; gradient w.r.t. the input
    /// frame equals `grad` itself (residual connection).
    pub fn fuse_backward(&mut self, cache: &FuseCache<T>, grad: &Array2<T>) -> Result<Array3<T>> {
        let (h, w) = grad.dim();
        let g = grad.to_owned().into_shape_with_order((1, 1, h, w)).expect("fuse grad reshape");
        let (gx, gw, gb) = conv3d_backward(cache.features.view(), self.params.weight5(self.idx.fuse_w), &g, 1)?;
        self.params.add_grad(self.idx.fuse_w, gw.into_dyn());
        self.params.add_grad(self.idx.fuse_b, gb.into_dyn());
        Ok(rank3(gx))
    }

    // ---- sequence recurrence ------------------------------------------------

    /// Enhance a full frame sequence, threading the hidden state forward.
    /// The frame window replicates the last frame past the end of the
    /// sequence; the hidden state starts at zero.
    pub fn enhance_sequence(&self, frames: &[Array2<T>]) -> Result<Vec<Array2<T>>> {
        self.enhance_sequence_cached(frames).map(|(y, _)| y)
    }

    /// As [`enhance_sequence`](Self::enhance_sequence), but also returns the
    /// cache needed by [`backward_sequence`](Self::backward_sequence).
    pub fn enhance_sequence_cached(&self, frames: &[Array2<T>]) -> Result<(Vec<Array2<T>>, SequenceCache<T>)> {
        if frames.is_empty() {
            return Err(VigError::EmptySequence);
        }
        let (h, w) = frames[0].dim();
        for f in frames {
            if f.dim() != (h, w) {
                return Err(VigError::shape("sequence frame", format!("({h}, {w})"), format!("{:?}", f.dim())));
            }
        }
        self.check_divisible(h, w)?;

        let n = frames.len();
        let mut f0 = Vec::with_capacity(n);
        let mut pre_caches = Vec::with_capacity(n);
        for frame in frames {
            let (f, c) = self.pre_extract_cached(frame)?;
            f0.push(f);
            pre_caches.push(c);
        }

        let mut hidden = Array3::zeros((self.cfg.base_channels, h, w));
        let mut outputs = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let window: Vec<Array3<T>> = (0..=self.cfg.future_window)
                .map(|k| f0[(i + k).min(n - 1)].clone())
                .collect();
            let (f1, rf) = self.rf_forward_cached(&window, &hidden)?;
            let (y, fuse) = self.fuse_residual_cached(&f1, &frames[i])?;
            outputs.push(y);
            steps.push(StepCache { rf, fuse });
            hidden = f1;
        }
        Ok((outputs, SequenceCache { pre_caches, steps, n }))
    }

    /// Backpropagate through the whole recurrence. `grad_outputs[i]` is the
    /// loss gradient w.r.t. enhanced frame `i`. Parameter gradients are
    /// accumulated into the parameter store; the returned vector holds the
    /// gradients w.r.t. the input frames.
    pub fn backward_sequence(&mut self, cache: &SequenceCache<T>, grad_outputs: &[Array2<T>]) -> Result<Vec<Array2<T>>> {
        let n = cache.n;
        if grad_outputs.len() != n {
            return Err(VigError::shape("grad_outputs length", format!("{n}"), format!("{}", grad_outputs.len())));
        }
        let dim0 = cache.steps[0].fuse.features.dim();
        let (_, c, h, w) = dim0;
        let mut grad_f0: Vec<Array3<T>> = (0..n).map(|_| Array3::zeros((c, h, w))).collect();
        let mut grad_frames: Vec<Array2<T>> = (0..n).map(|_| Array2::zeros((h, w))).collect();
        let mut grad_hidden: Array3<T> = Array3::zeros((c, h, w));

        for i in (0..n).rev() {
            // dL/dF1_i arrives from this step's fusion and from step i+1's
            // use of F1_i as hidden state.
            let mut g_f1 = self.fuse_backward(&cache.steps[i].fuse, &grad_outputs[i])?;
            g_f1.zip_mut_with(&grad_hidden, |a, &b| *a = *a + b);
            grad_frames[i].zip_mut_with(&grad_outputs[i], |a, &b| *a = *a + b);

            let (g_window, g_hidden_prev) = self.rf_backward(&cache.steps[i].rf, &g_f1)?;
            for (k, g) in g_window.into_iter().enumerate() {
                let j = (i + k).min(n - 1);
                grad_f0[j].zip_mut_with(&g, |a, &b| *a = *a + b);
            }
            grad_hidden = g_hidden_prev;
        }

        for i in 0..n {
            let g = self.pre_extract_backward(&cache.pre_caches[i], &grad_f0[i])?;
            grad_frames[i].zip_mut_with(&g, |a, &b| *a = *a + b);
        }
        Ok(grad_frames)
    }
}

pub struct PreCache<T> {
    input: Array4<T>,
    pre_act: Array4<T>,
}

pub struct TsdCache<T> {
    unshuffled: Array4<T>,
    projected: Array4<T>,
    pre_act: Array4<T>,
    block: usize,
}

pub struct TdCache<T> {
    input: Array4<T>,
}

pub struct SuCache<T> {
    sum: Array4<T>,
    pre_act: Array4<T>,
    block: usize,
}

pub struct RfCache<T> {
    t1: usize,
    t2: usize,
    tsd1: TsdCache<T>,
    tsd2: TsdCache<T>,
    td: TdCache<T>,
    su1: SuCache<T>,
    su2: SuCache<T>,
}

pub struct StepCache<T> {
    rf: RfCache<T>,
    fuse: FuseCache<T>,
}

pub struct FuseCache<T> {
    features: Array4<T>,
}

/// Everything needed to run backpropagation through one enhanced sequence.
pub struct SequenceCache<T> {
    pre_caches: Vec<PreCache<T>>,
    steps: Vec<StepCache<T>>,
    n: usize,
}

/// Zero out the fusion convolution so the network becomes the identity map
/// on frames. Test hook; also documents the residual structure.
pub fn zero_fusion<T: Elem>(model: &mut Crf<T>) {
    let shape_w = model.params().get("fuse.w").unwrap().raw_dim();
    let shape_b = model.params().get("fuse.b").unwrap().raw_dim();
    model.params_mut().set("fuse.w", ArrayD::zeros(shape_w)).unwrap();
    model.params_mut().set("fuse.b", ArrayD::zeros(shape_b)).unwrap();
}
