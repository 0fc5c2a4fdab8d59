//! Coordinate-MLP substrate: a small fully-connected network over
//! positionally encoded inputs, with exact reverse-mode gradients for both
//! parameters and inputs.
//!
//! The topology is fixed: `hidden_layers` LeakyReLU layers of equal width
//! with one residual connection, then a linear head with a configurable
//! output activation. The residual skips the interior layers — with the
//! default depth of 4 it connects the first hidden activation to the input
//! of the last hidden layer, bypassing the middle two. This is the entire
//! differentiation surface the crate needs, so there is no general tape or
//! graph machinery; the backward pass is written out against this shape.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Batched calls
//! lower to GEMM; per-point conveniences exist but the batch entry points
//! are the ones meant for real workloads.

pub mod adam;
pub mod amx;
pub mod checkpoint;
pub mod encode;
pub mod fd;
pub mod kernels;
pub mod train;

use std::any::TypeId;

use serde::{Deserialize, Serialize};

use crate::blas::Scalar;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use kernels::{Epilogue, PackedB};

/// Output nonlinearity of the head layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    LeakyRelu,
    Identity,
}

impl Activation {
    fn apply<F: Scalar>(self, x: F, slope: F) -> F {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::LeakyRelu => leaky(x, slope),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the *post*-activation value. Works for
    /// every variant here: sigmoid' = y(1-y), and LeakyReLU preserves sign
    /// for positive slopes so the branch can be read off the output.
    fn deriv_from_output<F: Scalar>(self, y: F, slope: F) -> F {
        match self {
            Activation::Sigmoid => y * (F::one() - y),
            Activation::LeakyRelu => {
                if y >= F::zero() {
                    F::one()
                } else {
                    slope
                }
            }
            Activation::Identity => F::one(),
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn leaky<F: Scalar>(x: F, slope: F) -> F {
    if x >= F::zero() {
        x
    } else {
        slope * x
    }
}

/// Architecture description for [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Width of every hidden layer.
    pub hidden_channels: usize,
    /// Number of hidden layers; at least 2 so the residual has something to
    /// skip.
    pub hidden_layers: usize,
    /// Frequency bands of the positional encoding.
    pub encoding_bands: usize,
    pub output_activation: Activation,
    /// Negative-side slope of the hidden LeakyReLU units. Must be positive
    /// (the backward pass recovers the branch from the activation's sign).
    pub leaky_slope: f64,
}

impl NetworkConfig {
    /// A config with the crate-wide defaults: 64 channels, 4 hidden layers,
    /// 8 encoding bands, identity head, slope 0.01.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        NetworkConfig {
            input_dim,
            output_dim,
            hidden_channels: 64,
            hidden_layers: 4,
            encoding_bands: 8,
            output_activation: Activation::Identity,
            leaky_slope: 0.01,
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.hidden_channels = channels;
        self
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.hidden_layers = layers;
        self
    }

    pub fn with_bands(mut self, bands: usize) -> Self {
        self.encoding_bands = bands;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_channels == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        if self.hidden_layers < 2 {
            return Err(Error::config(
                "at least 2 hidden layers are required for the residual connection",
            ));
        }
        if self.encoding_bands == 0 {
            return Err(Error::config("at least one encoding band is required"));
        }
        if self.encoding_bands >= 63 {
            return Err(Error::config("encoding bands out of range"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky slope must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Width of the encoded input fed to the first hidden layer.
    pub fn encoded_dim(&self) -> usize {
        encode::encoded_dim(self.input_dim, self.encoding_bands)
    }

    /// `(rows, cols)` of each weight matrix: hidden layers first, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let c = self.hidden_channels;
        let mut shapes = vec![(c, self.encoded_dim())];
        for _ in 1..self.hidden_layers {
            shapes.push((c, c));
        }
        shapes.push((self.output_dim, c));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(r, c)| r * c + r)
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSlot {
    w: usize,
    rows: usize,
    cols: usize,
    b: usize,
}

/// The network itself: a flat parameter vector plus the layout to slice it
/// into per-layer weights and biases. Keeping parameters flat makes the
/// optimizer, checkpointing and finite-difference checks one-dimensional.
#[derive(Clone, Debug)]
pub struct Mlp<F: Scalar> {
    config: NetworkConfig,
    params: Vec<F>,
    layout: Vec<LayerSlot>,
}

fn build_layout(config: &NetworkConfig) -> Vec<LayerSlot> {
    let mut layout = Vec::new();
    let mut off = 0;
    for (rows, cols) in config.layer_shapes() {
        let w = off;
        off += rows * cols;
        let b = off;
        off += rows;
        layout.push(LayerSlot { w, rows, cols, b });
    }
    layout
}

impl<F: Scalar> Mlp<F> {
    /// Fresh network with weights and biases drawn uniformly from
    /// `±sqrt(1/fan_in)`, deterministically from `seed`. The draw happens in
    /// `f64` and is narrowed afterwards, so a given seed produces the same
    /// network (up to rounding) at either precision.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = vec![F::zero(); config.param_count()];
        for slot in &layout {
            let bound = (1.0 / slot.cols as f64).sqrt();
            for i in 0..slot.rows * slot.cols {
                params[slot.w + i] = F::from_f64(rng.random_range(-bound..bound));
            }
            for i in 0..slot.rows {
                params[slot.b + i] = F::from_f64(rng.random_range(-bound..bound));
            }
        }
        Ok(Mlp {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a network from a flat parameter vector (checkpoint load,
    /// finite-difference probes).
    pub fn from_params(config: NetworkConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::config(format!(
                "parameter vector has {} values, architecture needs {}",
                params.len(),
                config.param_count()
            )));
        }
        let layout = build_layout(&config);
        Ok(Mlp {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn weight(&self, layer: usize) -> &[F] {
        let s = self.layout[layer];
        &self.params[s.w..s.w + s.rows * s.cols]
    }

    fn bias(&self, layer: usize) -> &[F] {
        let s = self.layout[layer];
        &self.params[s.b..s.b + s.rows]
    }

    fn slope(&self) -> F {
        F::from_f64(self.config.leaky_slope)
    }

    /// Converts the parameter vector to another precision, keeping the
    /// architecture.
    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        Mlp {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|&p| G::from_f64(p.to_f64()))
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Runs the network over `batch` points stored row-major in `points`,
    /// keeping every intermediate needed by [`Mlp::backward_batch`] in
    /// `state`. Returns the outputs (`batch x output_dim`) borrowed from the
    /// state.
    pub fn forward_batch<'s>(
        &self,
        points: &[F],
        state: &'s mut BatchState<F>,
    ) -> &'s [F] {
        let d = self.config.input_dim;
        assert!(
            !points.is_empty() && points.len() % d == 0,
            "point buffer must hold a positive multiple of input_dim values"
        );
        let batch = points.len() / d;
        state.resize(&self.config, batch);
        encode::encode_batch(points, d, self.config.encoding_bands, &mut state.x_enc);
        self.forward_encoded(state);
        &state.out
    }

    /// Runs the network over the already-encoded inputs sitting in
    /// `state.x_enc` (see [`BatchState::prepare_encoded`]). Used by the
    /// dataset trainers, which encode their fixed sample set exactly once.
    pub fn forward_encoded(&self, state: &mut BatchState<F>) {
        self.forward_encoded_with(state, None)
    }

    /// [`Mlp::forward_encoded`] with an optional [`FastPlan`] carrying
    /// pre-packed weights for the vectorised kernels. Falls back to the
    /// generic route when the plan does not apply to this network.
    pub fn forward_encoded_with(&self, state: &mut BatchState<F>, plan: Option<&FastPlan>) {
        let plan = plan.filter(|_| self.plan_applies());
        let batch = state.batch;
        let l = self.config.hidden_layers;
        let c = self.config.hidden_channels;
        let e = self.config.encoded_dim();
        let o = self.config.output_dim;
        let slope = self.slope();

        // Rows beyond the largest 32-multiple take the f32 kernels; the
        // bf16 copies only ever cover the tile-eligible prefix.
        let ax = plan.and_then(|p| p.amx.as_ref()).filter(|_| batch >= 32);
        let m32 = if ax.is_some() { batch & !31 } else { 0 };
        if ax.is_some() {
            state.ensure_bf16(&self.config, batch);
        }
        let st = &mut *state;

        // Hidden stack. Layer 0 reads the encoding; the last hidden layer
        // reads the residual sum of the first and second-to-last
        // activations.
        let pad_e = amx::pad_k(e);
        if ax.is_some() {
            amx::convert_rows(
                kernels::f32_view(&st.x_enc).unwrap(),
                m32,
                e,
                pad_e,
                &mut st.x_bf,
            );
        }
        let bf0 = ax.map(|a| (&st.x_bf[..], pad_e, a));
        self.hidden_layer(0, batch, &st.x_enc, bf0, &mut st.h[0], plan);
        if ax.is_some() && l > 2 {
            amx::convert_rows(kernels::f32_view(&st.h[0]).unwrap(), m32, c, c, &mut st.h_bf[0]);
        }

        for i in 1..l - 1 {
            {
                let (prev, rest) = st.h.split_at_mut(i);
                let bfi = ax.map(|a| (&st.h_bf[i - 1][..], c, a));
                self.hidden_layer(i, batch, &prev[i - 1], bfi, &mut rest[0], plan);
            }
            if ax.is_some() && i < l - 2 {
                amx::convert_rows(kernels::f32_view(&st.h[i]).unwrap(), m32, c, c, &mut st.h_bf[i]);
            }
        }

        // Residual: the last hidden layer consumes h[0] + h[l-2]. For the
        // minimum depth of 2 both terms are h[0].
        for ((r, &a), &b) in st.r.iter_mut().zip(&st.h[0]).zip(&st.h[l - 2]) {
            *r = a + b;
        }
        if ax.is_some() {
            amx::convert_rows(kernels::f32_view(&st.r).unwrap(), m32, c, c, &mut st.r_bf);
        }

        {
            let (head, tail) = st.h.split_at_mut(l - 1);
            let _ = head;
            let bfr = ax.map(|a| (&st.r_bf[..], c, a));
            self.hidden_layer(l - 1, batch, &st.r, bfr, &mut tail[0], plan);
        }

        let act = self.config.output_activation;
        if let Some(p) = plan {
            let h = kernels::f32_view(&state.h[l - 1]).unwrap();
            let out = kernels::f32_view_mut(&mut state.out).unwrap();
            let bias = kernels::f32_view(self.bias(l)).unwrap();
            kernels::sgemm_strided(
                batch,
                o,
                c,
                h,
                c,
                1,
                &p.head_t,
                o,
                out,
                o,
                Epilogue::Bias { bias },
            );
            if act != Activation::Identity {
                for y in &mut state.out {
                    *y = act.apply(*y, slope);
                }
            }
        } else {
            F::gemm(
                false,
                true,
                batch,
                o,
                c,
                F::one(),
                &state.h[l - 1],
                c,
                self.weight(l),
                c,
                F::zero(),
                &mut state.out,
                o,
            );
            let head_bias = self.bias(l);
            for row in state.out.chunks_exact_mut(o) {
                for (y, &b) in row.iter_mut().zip(head_bias) {
                    *y = act.apply(*y + b, slope);
                }
            }
        }
    }

    /// True when a [`FastPlan`] built for this network can drive the
    /// vectorised kernels here.
    fn plan_applies(&self) -> bool {
        TypeId::of::<F>() == TypeId::of::<f32>()
            && kernels::available()
            && self.config.hidden_channels % 64 == 0
    }

    /// One hidden layer: `out = leaky(input . W_iᵀ + b_i)`, through the
    /// tile path (when a bf16 copy of the input is supplied), the packed
    /// f32 kernel, or the generic GEMM.
    fn hidden_layer(
        &self,
        i: usize,
        batch: usize,
        input: &[F],
        bf: Option<(&[u16], usize, &AmxWeights)>,
        out: &mut [F],
        plan: Option<&FastPlan>,
    ) {
        let c = self.config.hidden_channels;
        let k = if i == 0 { self.config.encoded_dim() } else { c };
        let slope = self.slope();
        if let Some(p) = plan {
            let mut done = 0;
            if let Some((a_bf, lda, ax)) = bf {
                let m32 = batch & !31;
                if m32 > 0 {
                    amx::gemm(
                        m32,
                        c,
                        lda / amx::KSTEP,
                        a_bf,
                        lda,
                        &ax.fwd[i],
                        kernels::f32_view_mut(out).unwrap(),
                        c,
                        false,
                    );
                    bias_leaky(&mut out[..m32 * c], self.bias(i), slope);
                    done = m32;
                }
            }
            if done < batch {
                kernels::sgemm_packed(
                    batch - done,
                    c,
                    k,
                    &kernels::f32_view(input).unwrap()[done * k..],
                    k,
                    1,
                    &p.fwd[i],
                    &mut kernels::f32_view_mut(out).unwrap()[done * c..],
                    c,
                    Epilogue::BiasLeaky {
                        bias: kernels::f32_view(self.bias(i)).unwrap(),
                        slope: self.config.leaky_slope as f32,
                    },
                );
            }
        } else {
            F::gemm(
                false,
                true,
                batch,
                c,
                k,
                F::one(),
                input,
                k,
                self.weight(i),
                k,
                F::zero(),
                out,
                c,
            );
            bias_leaky(out, self.bias(i), slope);
        }
    }

    /// Single forward pass without gradient bookkeeping reuse; allocates a
    /// fresh state. Prefer [`Mlp::forward_batch`] with a reused state in
    /// loops.
    pub fn forward(&self, points: &[F]) -> Vec<F> {
        let mut state = BatchState::new();
        self.forward_batch(points, &mut state);
        state.out
    }

    /// Reverse pass for the batch recorded in `state`.
    ///
    /// `d_out` holds the loss gradient w.r.t. the network outputs
    /// (`batch x output_dim`). Parameter gradients are *accumulated* into
    /// `param_grads` (flat, same layout as [`Mlp::params`]) when given, and
    /// input gradients (`batch x input_dim`) are accumulated into
    /// `input_grads` when given. `points` must be the same buffer that was
    /// passed to the forward call.
    pub fn backward_batch(
        &self,
        points: &[F],
        state: &BatchState<F>,
        d_out: &[F],
        scratch: &mut BackwardScratch<F>,
        param_grads: Option<&mut [F]>,
        input_grads: Option<&mut [F]>,
    ) {
        self.backward_batch_with(points, state, d_out, scratch, param_grads, input_grads, None)
    }

    /// [`Mlp::backward_batch`] with an optional [`FastPlan`], mirroring
    /// [`Mlp::forward_encoded_with`].
    pub fn backward_batch_with(
        &self,
        points: &[F],
        state: &BatchState<F>,
        d_out: &[F],
        scratch: &mut BackwardScratch<F>,
        mut param_grads: Option<&mut [F]>,
        input_grads: Option<&mut [F]>,
        plan: Option<&FastPlan>,
    ) {
        let plan = plan.filter(|_| self.plan_applies());
        let batch = state.batch;
        let l = self.config.hidden_layers;
        let c = self.config.hidden_channels;
        let e = self.config.encoded_dim();
        let o = self.config.output_dim;
        let slope = self.slope();
        assert_eq!(d_out.len(), batch * o, "output gradient has wrong size");
        if let Some(g) = param_grads.as_deref() {
            assert_eq!(g.len(), self.params.len(), "parameter gradient buffer has wrong size");
        }
        let ax = plan.and_then(|p| p.amx.as_ref()).filter(|_| batch >= 32);
        let m32 = if ax.is_some() { batch & !31 } else { 0 };
        scratch.resize(&self.config, batch, ax.is_some());

        // Head: push the gradient through the output activation, then to
        // the last hidden activation.
        let act = self.config.output_activation;
        scratch.dz_out[..batch * o].copy_from_slice(d_out);
        for (dz, &y) in scratch.dz_out.iter_mut().zip(&state.out) {
            *dz = *dz * act.deriv_from_output(y, slope);
        }
        if let Some(grads) = param_grads.as_deref_mut() {
            let s = self.layout[l];
            accumulate_dw(
                plan.is_some(),
                o,
                c,
                batch,
                &scratch.dz_out,
                &state.h[l - 1],
                &mut grads[s.w..s.w + o * c],
            );
            col_sums(&scratch.dz_out, o, &mut grads[s.b..s.b + o]);
        }
        if plan.is_some() {
            kernels::sgemm_strided(
                batch,
                c,
                o,
                kernels::f32_view(&scratch.dz_out).unwrap(),
                o,
                1,
                kernels::f32_view(self.weight(l)).unwrap(),
                c,
                kernels::f32_view_mut(&mut scratch.d_h).unwrap(),
                c,
                Epilogue::Store,
            );
        } else {
            F::gemm(
                false,
                false,
                batch,
                c,
                o,
                F::one(),
                &scratch.dz_out,
                o,
                self.weight(l),
                c,
                F::zero(),
                &mut scratch.d_h,
                c,
            );
        }

        // Last hidden layer (its input was the residual sum r).
        mask_inplace(&mut scratch.d_h, &state.h[l - 1], slope);
        if ax.is_some() {
            amx::convert_rows(
                kernels::f32_view(&scratch.d_h).unwrap(),
                m32,
                c,
                c,
                &mut scratch.d_bf,
            );
        }
        if let Some(grads) = param_grads.as_deref_mut() {
            let s = self.layout[l - 1];
            if ax.is_some() {
                amx_dw(
                    kernels::f32_view(&scratch.d_h).unwrap(),
                    kernels::f32_view(&state.r).unwrap(),
                    c,
                    c,
                    batch,
                    &mut scratch.dt_bf,
                    &mut scratch.hpack,
                    &mut kernels::f32_view_mut(grads).unwrap()[s.w..s.w + c * c],
                );
            } else {
                accumulate_dw(
                    plan.is_some(),
                    c,
                    c,
                    batch,
                    &scratch.d_h,
                    &state.r,
                    &mut grads[s.w..s.w + c * c],
                );
            }
            col_sums(&scratch.d_h, c, &mut grads[s.b..s.b + c]);
        }
        {
            let bf = ax.map(|a| (&scratch.d_bf[..], a));
            let (d_h, d_r) = (&scratch.d_h, &mut scratch.d_r);
            self.chain_gemm(l - 1, batch, d_h, bf, d_r, plan);
        }

        // The residual gradient d_r reaches h[l-2] directly and h[0] via
        // the skip. Walk the interior chain down to layer 1; the h[0]
        // contribution from the skip is folded into layer 0's masking pass.
        // At the minimum depth (l = 2) the chain is empty and both residual
        // inputs are h[0], so the skip contribution is added twice.
        let mut chain_into_h0 = false;
        for i in (1..=l.saturating_sub(2)).rev() {
            let d_next: &[F] = if i == l - 2 { &scratch.d_r } else { &scratch.d_h2 };
            masked_copy(&mut scratch.d_h, &d_next[..batch * c], &state.h[i], slope);
            if ax.is_some() {
                amx::convert_rows(
                    kernels::f32_view(&scratch.d_h).unwrap(),
                    m32,
                    c,
                    c,
                    &mut scratch.d_bf,
                );
            }
            if let Some(grads) = param_grads.as_deref_mut() {
                let s = self.layout[i];
                if ax.is_some() {
                    amx_dw(
                        kernels::f32_view(&scratch.d_h).unwrap(),
                        kernels::f32_view(&state.h[i - 1]).unwrap(),
                        c,
                        c,
                        batch,
                        &mut scratch.dt_bf,
                        &mut scratch.hpack,
                        &mut kernels::f32_view_mut(grads).unwrap()[s.w..s.w + c * c],
                    );
                } else {
                    accumulate_dw(
                        plan.is_some(),
                        c,
                        c,
                        batch,
                        &scratch.d_h,
                        &state.h[i - 1],
                        &mut grads[s.w..s.w + c * c],
                    );
                }
                col_sums(&scratch.d_h, c, &mut grads[s.b..s.b + c]);
            }
            let bf = ax.map(|a| (&scratch.d_bf[..], a));
            let (d_h, dest) = if i == 1 {
                chain_into_h0 = true;
                (&scratch.d_h, &mut scratch.d_h0)
            } else {
                (&scratch.d_h, &mut scratch.d_h2)
            };
            self.chain_gemm(i, batch, d_h, bf, dest, plan);
        }

        // Layer 0: combine the chain gradient (if any) with the residual
        // skip and mask, in one pass over the buffers.
        {
            let dz0 = &mut scratch.d_h;
            let one = F::one();
            if chain_into_h0 {
                for (((dz, &skip), &chain), &y) in dz0
                    .iter_mut()
                    .zip(&scratch.d_r)
                    .zip(&scratch.d_h0[..batch * c])
                    .zip(&state.h[0])
                {
                    let f = if y < F::zero() { slope } else { one };
                    *dz = (skip + chain) * f;
                }
            } else {
                // l == 2: h[0] fed the residual twice.
                for ((dz, &skip), &y) in dz0.iter_mut().zip(&scratch.d_r).zip(&state.h[0]) {
                    let f = if y < F::zero() { slope } else { one };
                    *dz = (skip + skip) * f;
                }
            }
        }
        if let Some(grads) = param_grads.as_deref_mut() {
            let s = self.layout[0];
            if ax.is_some() {
                amx_dw(
                    kernels::f32_view(&scratch.d_h).unwrap(),
                    kernels::f32_view(&state.x_enc).unwrap(),
                    c,
                    e,
                    batch,
                    &mut scratch.dt_bf,
                    &mut scratch.hpack,
                    &mut kernels::f32_view_mut(grads).unwrap()[s.w..s.w + c * e],
                );
            } else {
                accumulate_dw(
                    plan.is_some(),
                    c,
                    e,
                    batch,
                    &scratch.d_h,
                    &state.x_enc,
                    &mut grads[s.w..s.w + c * e],
                );
            }
            col_sums(&scratch.d_h, c, &mut grads[s.b..s.b + c]);
        }

        if let Some(d_points) = input_grads {
            assert_eq!(d_points.len(), batch * self.config.input_dim);
            if plan.is_some() {
                kernels::sgemm_strided(
                    batch,
                    e,
                    c,
                    kernels::f32_view(&scratch.d_h).unwrap(),
                    c,
                    1,
                    kernels::f32_view(self.weight(0)).unwrap(),
                    e,
                    kernels::f32_view_mut(&mut scratch.d_x).unwrap(),
                    e,
                    Epilogue::Store,
                );
            } else {
                F::gemm(
                    false,
                    false,
                    batch,
                    e,
                    c,
                    F::one(),
                    &scratch.d_h,
                    c,
                    self.weight(0),
                    e,
                    F::zero(),
                    &mut scratch.d_x,
                    e,
                );
            }
            encode::encode_backward(
                points,
                self.config.input_dim,
                self.config.encoding_bands,
                &scratch.d_x,
                d_points,
            );
        }
    }

    /// Propagates `d_h` through `W_i` down to the previous activation:
    /// `dest = d_h . W_i`. `bf` supplies the bf16 copy of `d_h` for the
    /// tile path.
    fn chain_gemm(
        &self,
        i: usize,
        batch: usize,
        d_h: &[F],
        bf: Option<(&[u16], &AmxWeights)>,
        dest: &mut [F],
        plan: Option<&FastPlan>,
    ) {
        let c = self.config.hidden_channels;
        if let Some(p) = plan {
            let mut done = 0;
            if let Some((d_bf, ax)) = bf {
                let m32 = batch & !31;
                if m32 > 0 {
                    amx::gemm(
                        m32,
                        c,
                        c / amx::KSTEP,
                        d_bf,
                        c,
                        &ax.bwd[i],
                        kernels::f32_view_mut(dest).unwrap(),
                        c,
                        false,
                    );
                    done = m32;
                }
            }
            if done < batch {
                kernels::sgemm_packed(
                    batch - done,
                    c,
                    c,
                    &kernels::f32_view(d_h).unwrap()[done * c..],
                    c,
                    1,
                    &p.bwd[i],
                    &mut kernels::f32_view_mut(dest).unwrap()[done * c..],
                    c,
                    Epilogue::Store,
                );
            }
        } else {
            F::gemm(
                false,
                false,
                batch,
                c,
                c,
                F::one(),
                d_h,
                c,
                self.weight(i),
                c,
                F::zero(),
                dest,
                c,
            );
        }
    }
}

/// `grads += dᵀ . src` on the tile path: `d` (`batch x rows`) is
/// transpose-converted to bf16, `src` (`batch x cols`) pair-packed, and the
/// product added straight into the f32 gradient tiles through the
/// accumulator preload. A trailing column group short of 32 falls back to
/// the strided f32 kernel; batch tails are absorbed by exact zero padding.
fn amx_dw(
    d: &[f32],
    src: &[f32],
    rows: usize,
    cols: usize,
    batch: usize,
    dt: &mut Vec<u16>,
    hp: &mut Vec<u16>,
    grads: &mut [f32],
) {
    let bp = amx::pad_k(batch);
    dt.resize(rows * bp, 0);
    amx::convert_transpose(d, batch, rows, bp, dt);
    let n32 = cols & !31;
    if n32 > 0 {
        hp.resize((n32 / 32) * (bp / amx::KSTEP) * 1024, 0);
        amx::pack_pairs(src, cols, batch, 0, n32, bp / amx::KSTEP, hp);
        amx::gemm(rows, n32, bp / amx::KSTEP, dt, bp, hp, grads, cols, true);
    }
    if n32 < cols {
        kernels::sgemm_strided(
            rows,
            cols - n32,
            batch,
            d,
            1,
            rows,
            &src[n32..],
            cols,
            &mut grads[n32..],
            cols,
            Epilogue::Add,
        );
    }
}

/// `grads += dᵀ . src` where `d` is `batch x rows` and `src` is
/// `batch x cols`; the transposed read goes through the strided kernel when
/// the fast path is on.
fn accumulate_dw<F: Scalar>(
    fast: bool,
    rows: usize,
    cols: usize,
    batch: usize,
    d: &[F],
    src: &[F],
    grads: &mut [F],
) {
    if fast {
        kernels::sgemm_strided(
            rows,
            cols,
            batch,
            kernels::f32_view(d).unwrap(),
            1,
            rows,
            kernels::f32_view(src).unwrap(),
            cols,
            kernels::f32_view_mut(grads).unwrap(),
            cols,
            Epilogue::Add,
        );
    } else {
        F::gemm(
            true,
            false,
            rows,
            cols,
            batch,
            F::one(),
            d,
            rows,
            src,
            cols,
            F::one(),
            grads,
            cols,
        );
    }
}

/// Pre-packed weight panels for the vectorised kernels: the transposed
/// hidden weights for the forward pass, the untransposed ones for the
/// gradient chain, and the head weights transposed into `k`-major order.
/// Rebuild with [`FastPlan::refresh`] after every parameter update; building
/// returns `None` where the fast path cannot run (non-f32 parameters, no
/// AVX-512, or a hidden width that is not a multiple of 64).
#[derive(Clone, Debug)]
pub struct FastPlan {
    fwd: Vec<PackedB>,
    bwd: Vec<PackedB>,
    head_t: Vec<f32>,
    amx: Option<AmxWeights>,
}

/// bf16 tile panels of the hidden weights, alongside the f32 panels: the
/// forward transposes and the gradient-chain originals. Kept in step with
/// the f32 packs by [`FastPlan::refresh`].
#[derive(Clone, Debug, Default)]
struct AmxWeights {
    fwd: Vec<Vec<u16>>,
    bwd: Vec<Vec<u16>>,
    wt: Vec<f32>,
}

impl FastPlan {
    pub fn build<F: Scalar>(mlp: &Mlp<F>) -> Option<Self> {
        if !mlp.plan_applies() {
            return None;
        }
        let l = mlp.config.hidden_layers;
        let mut plan = FastPlan {
            fwd: vec![PackedB::new(); l],
            bwd: vec![PackedB::new(); l],
            head_t: Vec::new(),
            amx: amx::available().then(|| AmxWeights {
                fwd: vec![Vec::new(); l],
                bwd: vec![Vec::new(); l],
                wt: Vec::new(),
            }),
        };
        plan.refresh(mlp);
        Some(plan)
    }

    /// Repacks all panels from the network's current parameters.
    pub fn refresh<F: Scalar>(&mut self, mlp: &Mlp<F>) {
        let l = mlp.config.hidden_layers;
        let c = mlp.config.hidden_channels;
        let e = mlp.config.encoded_dim();
        let o = mlp.config.output_dim;
        assert_eq!(self.fwd.len(), l, "plan was built for a different depth");
        for i in 0..l {
            let k = if i == 0 { e } else { c };
            let w = kernels::f32_view(mlp.weight(i)).unwrap();
            self.fwd[i].pack_transpose(w, c, k);
            // Layer 0's untransposed weights only feed the input-gradient
            // GEMM, which reads them in place.
            if i >= 1 {
                self.bwd[i].pack(w, c, c, c);
            }
            if let Some(ax) = self.amx.as_mut() {
                let chunks = amx::pad_k(k) / amx::KSTEP;
                ax.wt.resize(k * c, 0.0);
                amx::transpose_f32(w, c, k, &mut ax.wt);
                ax.fwd[i].resize((c / 32) * chunks * 1024, 0);
                amx::pack_pairs(&ax.wt, c, k, 0, c, chunks, &mut ax.fwd[i]);
                if i >= 1 {
                    ax.bwd[i].resize((c / 32) * (c / amx::KSTEP) * 1024, 0);
                    amx::pack_pairs(w, c, c, 0, c, c / amx::KSTEP, &mut ax.bwd[i]);
                }
            }
        }
        let wl = kernels::f32_view(mlp.weight(l)).unwrap();
        self.head_t.resize(c * o, 0.0);
        for (j, row) in wl.chunks_exact(c).enumerate() {
            for (t, &v) in row.iter().enumerate() {
                self.head_t[t * o + j] = v;
            }
        }
    }
}

fn bias_leaky<F: Scalar>(buf: &mut [F], bias: &[F], slope: F) {
    let c = bias.len();
    for row in buf.chunks_exact_mut(c) {
        for (y, &b) in row.iter_mut().zip(bias) {
            // max(z, slope * z) selects z for z >= 0 and slope * z below,
            // for any slope in (0, 1); branch-free so the loop vectorises.
            let z = *y + b;
            *y = z.max(slope * z);
        }
    }
}

/// `d *= sigma'(z)` where the branch is recovered from the sign of the
/// post-activation `h`.
fn mask_inplace<F: Scalar>(d: &mut [F], h: &[F], slope: F) {
    let one = F::one();
    for (g, &y) in d.iter_mut().zip(h) {
        let f = if y < F::zero() { slope } else { one };
        *g = *g * f;
    }
}

/// `dst = src * sigma'(z)` in a single pass, the fused form of a copy
/// followed by [`mask_inplace`].
fn masked_copy<F: Scalar>(dst: &mut [F], src: &[F], h: &[F], slope: F) {
    let one = F::one();
    for ((g, &v), &y) in dst.iter_mut().zip(src).zip(h) {
        let f = if y < F::zero() { slope } else { one };
        *g = v * f;
    }
}

fn col_sums<F: Scalar>(buf: &[F], cols: usize, acc: &mut [F]) {
    for row in buf.chunks_exact(cols) {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a = *a + x;
        }
    }
}

/// Forward-pass intermediates for one batch. Reused across iterations to
/// keep the training loops allocation-free.
#[derive(Clone, Debug, Default)]
pub struct BatchState<F: Scalar> {
    batch: usize,
    x_enc: Vec<F>,
    h: Vec<Vec<F>>,
    r: Vec<F>,
    pub out: Vec<F>,
    // bf16 copies of the tile-path GEMM inputs; empty unless that path runs.
    x_bf: Vec<u16>,
    h_bf: Vec<Vec<u16>>,
    r_bf: Vec<u16>,
}

impl<F: Scalar> BatchState<F> {
    pub fn new() -> Self {
        BatchState {
            batch: 0,
            x_enc: Vec::new(),
            h: Vec::new(),
            r: Vec::new(),
            out: Vec::new(),
            x_bf: Vec::new(),
            h_bf: Vec::new(),
            r_bf: Vec::new(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn outputs(&self) -> &[F] {
        &self.out
    }

    /// Loads a pre-encoded input block (`batch x encoded_dim`, row-major)
    /// ahead of [`Mlp::forward_encoded`].
    pub fn prepare_encoded(&mut self, config: &NetworkConfig, batch: usize, enc: &[F]) {
        self.resize(config, batch);
        self.x_enc.copy_from_slice(enc);
    }

    fn resize(&mut self, config: &NetworkConfig, batch: usize) {
        self.batch = batch;
        self.x_enc.resize(batch * config.encoded_dim(), F::zero());
        self.h.resize(config.hidden_layers, Vec::new());
        for h in &mut self.h {
            h.resize(batch * config.hidden_channels, F::zero());
        }
        self.r.resize(batch * config.hidden_channels, F::zero());
        self.out.resize(batch * config.output_dim, F::zero());
    }

    fn ensure_bf16(&mut self, config: &NetworkConfig, batch: usize) {
        let c = config.hidden_channels;
        self.x_bf.resize(batch * amx::pad_k(config.encoded_dim()), 0);
        self.h_bf.resize(config.hidden_layers.saturating_sub(2), Vec::new());
        for b in &mut self.h_bf {
            b.resize(batch * c, 0);
        }
        self.r_bf.resize(batch * c, 0);
    }
}

/// Reverse-pass workspace, reusable like [`BatchState`].
#[derive(Clone, Debug, Default)]
pub struct BackwardScratch<F: Scalar> {
    dz_out: Vec<F>,
    d_h: Vec<F>,
    d_h2: Vec<F>,
    d_h0: Vec<F>,
    d_r: Vec<F>,
    d_x: Vec<F>,
    // Tile-path staging: the current delta in bf16 (row-major for the
    // gradient chain, transposed for the weight gradients) and the packed
    // activation panels.
    d_bf: Vec<u16>,
    dt_bf: Vec<u16>,
    hpack: Vec<u16>,
}

impl<F: Scalar> BackwardScratch<F> {
    pub fn new() -> Self {
        Self::default()
    }

    fn resize(&mut self, config: &NetworkConfig, batch: usize, bf16: bool) {
        let c = config.hidden_channels;
        self.dz_out.resize(batch * config.output_dim, F::zero());
        self.d_h.resize(batch * c, F::zero());
        self.d_h2.resize(batch * c, F::zero());
        self.d_h0.resize(batch * c, F::zero());
        self.d_r.resize(batch * c, F::zero());
        self.d_x.resize(batch * config.encoded_dim(), F::zero());
        if bf16 {
            self.d_bf.resize(batch * c, 0);
            self.dt_bf.resize(c * amx::pad_k(batch), 0);
        }
    }
}

/// A scalar reduction over network outputs, with its gradient. The second
/// return value must be `d loss / d outputs`, same shape as `outputs`.
pub trait LossTail<F: Scalar> {
    fn value_and_grad(&self, outputs: &[F], batch: usize, output_dim: usize) -> (F, Vec<F>);
}

impl<F: Scalar, T> LossTail<F> for T
where
    T: Fn(&[F], usize, usize) -> (F, Vec<F>),
{
    fn value_and_grad(&self, outputs: &[F], batch: usize, output_dim: usize) -> (F, Vec<F>) {
        self(outputs, batch, output_dim)
    }
}

/// Evaluates `loss = tail(net(inputs))` and its exact gradients in one
/// reverse sweep.
///
/// Returns `(loss, parameter gradients, input gradients)`; the gradient
/// vectors are freshly allocated. This is the reference entry point used by
/// the finite-difference harnesses; the optimizers use the lower-level
/// batch calls directly to reuse buffers.
pub fn gradient<F: Scalar>(
    mlp: &Mlp<F>,
    inputs: &[F],
    tail: &dyn LossTail<F>,
) -> (F, Vec<F>, Vec<F>) {
    let batch = inputs.len() / mlp.config().input_dim;
    let mut state = BatchState::new();
    mlp.forward_batch(inputs, &mut state);
    let (loss, d_out) = tail.value_and_grad(&state.out, batch, mlp.config().output_dim);
    let mut param_grads = vec![F::zero(); mlp.param_count()];
    let mut input_grads = vec![F::zero(); inputs.len()];
    let mut scratch = BackwardScratch::new();
    mlp.backward_batch(
        inputs,
        &state,
        &d_out,
        &mut scratch,
        Some(&mut param_grads),
        Some(&mut input_grads),
    );
    (loss, param_grads, input_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_config() -> NetworkConfig {
        NetworkConfig::new(2, 3)
            .with_channels(8)
            .with_layers(4)
            .with_bands(2)
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        assert!(NetworkConfig::new(0, 1).validate().is_err());
        assert!(NetworkConfig::new(2, 1).with_layers(1).validate().is_err());
        assert!(NetworkConfig::new(2, 1).with_bands(0).validate().is_err());
        let mut c = NetworkConfig::new(2, 1);
        c.leaky_slope = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let c = toy_config();
        // enc = 2*(1+4) = 10; layers: 8x10+8, 8x8+8, 8x8+8, 8x8+8, head 3x8+3.
        assert_eq!(c.param_count(), 88 + 3 * 72 + 27);
        let mlp = Mlp::<f64>::init(c, 7).unwrap();
        assert_eq!(mlp.params().len(), mlp.config().param_count());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Mlp::<f64>::init(toy_config(), 42).unwrap();
        let b = Mlp::<f64>::init(toy_config(), 42).unwrap();
        let c = Mlp::<f64>::init(toy_config(), 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        // Every layer's draw stays inside ±sqrt(1/fan_in); the loosest bound
        // overall is sqrt(1/8).
        let bound = (1.0f64 / 8.0).sqrt() + 1e-12;
        for slot in &a.layout[1..] {
            for i in 0..slot.rows * slot.cols {
                assert!(a.params[slot.w + i].abs() < bound);
            }
        }
    }

    #[test]
    fn forward_is_finite_and_sigmoid_head_bounded() {
        let cfg = toy_config().with_activation(Activation::Sigmoid);
        let mlp = Mlp::<f64>::init(cfg, 1).unwrap();
        let pts = [0.1, 0.2, 0.9, 0.4, -0.3, 1.2];
        let out = mlp.forward(&pts);
        assert_eq!(out.len(), 9);
        for &y in &out {
            assert!(y.is_finite());
            assert!(y > 0.0 && y < 1.0, "sigmoid output {} outside (0,1)", y);
        }
    }

    #[test]
    fn batch_and_single_point_forward_agree() {
        let mlp = Mlp::<f64>::init(toy_config(), 5).unwrap();
        let pts = [0.3, 0.7, -0.2, 0.5, 1.1, 0.0];
        let batched = mlp.forward(&pts);
        for (i, p) in pts.chunks_exact(2).enumerate() {
            let single = mlp.forward(p);
            for (a, b) in batched[3 * i..3 * i + 3].iter().zip(&single) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn minimum_depth_doubles_first_activation_in_residual() {
        // With 2 hidden layers both residual inputs are h0; make sure the
        // forward/backward pair stays consistent under finite differences.
        let cfg = NetworkConfig::new(1, 1).with_channels(4).with_layers(2).with_bands(1);
        let mlp = Mlp::<f64>::init(cfg, 9).unwrap();
        let inputs = [0.37];
        let tail = |outs: &[f64], _b: usize, _o: usize| (outs[0], vec![1.0]);
        let (_, grads, _) = gradient(&mlp, &inputs, &tail);
        let fd = fd::param_grad_central(&mlp, &inputs, &tail, 1e-5);
        for (g, f) in grads.iter().zip(&fd) {
            assert_abs_diff_eq!(*g, *f, epsilon = 1e-6);
        }
    }

    #[test]
    fn cast_roundtrip_preserves_f32_values() {
        let mlp = Mlp::<f32>::init(toy_config(), 3).unwrap();
        let back: Mlp<f32> = mlp.cast::<f64>().cast();
        assert_eq!(mlp.params(), back.params());
    }

    #[test]
    fn fast_plan_matches_generic_route() {
        // Same batch through the packed-kernel path and the GEMM path; the
        // two reassociate sums differently so demand agreement to a few ulp
        // of f32, not bit equality.
        let cfg = NetworkConfig::new(2, 3)
            .with_channels(64)
            .with_layers(4)
            .with_bands(4)
            .with_activation(Activation::Sigmoid);
        let mlp = Mlp::<f32>::init(cfg, 21).unwrap();
        let Some(mut plan) = FastPlan::build(&mlp) else {
            return; // no AVX-512 on this machine
        };
        // Keep this comparison at f32 precision; the bf16 tile route has
        // its own looser check below.
        plan.amx = None;
        let batch = 37;
        let mut pts = Vec::new();
        let mut s = 5u32;
        for _ in 0..batch * 2 {
            s = s.wrapping_mul(1664525).wrapping_add(1013904223);
            pts.push((s >> 8) as f32 / (1 << 24) as f32);
        }

        let mut slow_state = BatchState::new();
        mlp.forward_batch(&pts, &mut slow_state);
        let mut fast_state = BatchState::new();
        fast_state.resize(mlp.config(), batch);
        encode::encode_batch(&pts, 2, mlp.config().encoding_bands, &mut fast_state.x_enc);
        mlp.forward_encoded_with(&mut fast_state, Some(&plan));
        for (a, b) in fast_state.out.iter().zip(&slow_state.out) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "forward {a} vs {b}");
        }

        let d_out: Vec<f32> = (0..batch * 3).map(|i| ((i % 7) as f32 - 3.0) / 11.0).collect();
        let mut scratch = BackwardScratch::new();
        let mut slow_pg = vec![0.0f32; mlp.param_count()];
        let mut slow_ig = vec![0.0f32; pts.len()];
        mlp.backward_batch(&pts, &slow_state, &d_out, &mut scratch, Some(&mut slow_pg), Some(&mut slow_ig));
        let mut fast_pg = vec![0.0f32; mlp.param_count()];
        let mut fast_ig = vec![0.0f32; pts.len()];
        mlp.backward_batch_with(
            &pts,
            &fast_state,
            &d_out,
            &mut scratch,
            Some(&mut fast_pg),
            Some(&mut fast_ig),
            Some(&plan),
        );
        for (a, b) in fast_pg.iter().zip(&slow_pg) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "param grad {a} vs {b}");
        }
        for (a, b) in fast_ig.iter().zip(&slow_ig) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "input grad {a} vs {b}");
        }
    }

    #[test]
    fn tile_route_matches_generic_within_bf16_error() {
        // The tile path rounds GEMM operands to bf16 (8 mantissa bits), so
        // compare against the f32 route at commensurate tolerance, scaled
        // per tensor.
        let cfg = NetworkConfig::new(2, 3)
            .with_channels(64)
            .with_layers(4)
            .with_bands(4)
            .with_activation(Activation::Sigmoid);
        let mlp = Mlp::<f32>::init(cfg, 77).unwrap();
        let Some(plan) = FastPlan::build(&mlp) else {
            return;
        };
        if plan.amx.is_none() {
            return; // no tile support on this machine
        }
        // 37 rows exercise both the 32-row tile block and the f32 tail.
        let batch = 37;
        let mut pts = Vec::new();
        let mut s = 19u32;
        for _ in 0..batch * 2 {
            s = s.wrapping_mul(1664525).wrapping_add(1013904223);
            pts.push((s >> 8) as f32 / (1 << 24) as f32);
        }

        let mut ref_state = BatchState::new();
        mlp.forward_batch(&pts, &mut ref_state);
        let mut amx_state = BatchState::new();
        amx_state.resize(mlp.config(), batch);
        encode::encode_batch(&pts, 2, mlp.config().encoding_bands, &mut amx_state.x_enc);
        mlp.forward_encoded_with(&mut amx_state, Some(&plan));
        for (a, b) in amx_state.out.iter().zip(&ref_state.out) {
            assert!((a - b).abs() <= 2e-2, "forward {a} vs {b}");
        }

        let d_out: Vec<f32> = (0..batch * 3).map(|i| ((i % 5) as f32 - 2.0) / 7.0).collect();
        let mut scratch = BackwardScratch::new();
        let mut ref_pg = vec![0.0f32; mlp.param_count()];
        mlp.backward_batch(&pts, &ref_state, &d_out, &mut scratch, Some(&mut ref_pg), None);
        let mut amx_pg = vec![0.0f32; mlp.param_count()];
        mlp.backward_batch_with(
            &pts,
            &amx_state,
            &d_out,
            &mut scratch,
            Some(&mut amx_pg),
            None,
            Some(&plan),
        );
        // Absolute error scales with the summed term magnitudes, not the
        // (possibly cancelled) result, so bound against the tensor scale.
        let scale = ref_pg.iter().fold(0.0f32, |m, g| m.max(g.abs()));
        for (i, (a, b)) in amx_pg.iter().zip(&ref_pg).enumerate() {
            assert!(
                (a - b).abs() <= 5e-2 * scale,
                "param grad [{i}]: {a} vs {b} (scale {scale})"
            );
        }
    }

    #[test]
    fn fast_plan_declines_unsupported_networks() {
        // f64 parameters and widths off the 64-lane grid cannot use the
        // packed kernels.
        let f64_net = Mlp::<f64>::init(toy_config(), 1).unwrap();
        assert!(FastPlan::build(&f64_net).is_none());
        let odd = NetworkConfig::new(2, 1).with_channels(48);
        let odd_net = Mlp::<f32>::init(odd, 1).unwrap();
        assert!(FastPlan::build(&odd_net).is_none());
    }
}
