//! Aspect-ratio retargeting as an optimized deformation field.
//!
//! A scalar network `D` maps output-domain points to offsets along the
//! retarget axis: an output point `p` reads its color from the input point
//! `q = p + v * D(p)`, where `v` is the unit vector along the axis. The
//! output domain spans `[0, alpha]` along the axis (`alpha` = output/input
//! length ratio) and `[0, 1]` across it, so a uniform resize corresponds to
//! `D*(p) = p_v (1 - alpha) / alpha`. Optimization shapes `D` away from
//! uniform: regions holding content keep their scale while low-energy
//! regions absorb the size change, under sanity terms that pin the
//! boundaries, keep the map monotone, and (when expanding) cap the local
//! stretch rate.

use crate::error::{Error, Result};
use crate::fields::{CumulativeEnergyField, EnergyField, ImageField};
use crate::image::RasterImage;
use crate::nn::adam::Adam;
use crate::nn::encode::{self, bands_for};
use crate::nn::train::{fit_dataset, FitSchedule};
use crate::nn::{Activation, BackwardScratch, BatchState, Mlp, NetworkConfig};
use crate::Axis;

/// Default slack for the expansion stretch cap: local stretch beyond
/// `1 + cap_slack` times uniform is penalized.
pub const DEFAULT_CAP_SLACK: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetargetMode {
    Shrink,
    Expand,
}

/// Weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Content preservation (cumulative-energy differences when shrinking,
    /// pointwise energy when expanding).
    pub content: f64,
    /// Straightness across the axis: energy-weighted perpendicular
    /// variation of `D`.
    pub shear: f64,
    /// Boundary pinning: `D(0) = 0` and `D(alpha) = 1 - alpha`.
    pub boundary: f64,
    /// One-sided monotonicity: `D` must not decrease along the axis.
    pub monotonic: f64,
    /// Expansion stretch cap (inactive when shrinking).
    pub cap: f64,
}

impl LossWeights {
    /// Defaults for raster retargeting.
    pub fn image() -> Self {
        LossWeights {
            content: 1e4,
            shear: 250.0,
            boundary: 1e4,
            monotonic: 1e4,
            cap: 1e4,
        }
    }

    /// Defaults for point-set retargeting, where energies are not
    /// normalized by a pixel grid and need gentler scaling.
    pub fn points() -> Self {
        LossWeights {
            content: 10.0,
            shear: 0.1,
            boundary: 100.0,
            monotonic: 1.0,
            cap: 10.0,
        }
    }
}

/// A single retargeting problem: input raster dimensions, axis, ratio, and
/// the optimization hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct RetargetJob {
    pub alpha: f64,
    pub axis: Axis,
    pub width: usize,
    pub height: usize,
    pub weights: LossWeights,
    pub cap_slack: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub learning_rate: f64,
    pub init_epochs: usize,
    pub init_iters: usize,
    /// Probe distance for the finite differences inside the losses;
    /// defaults to one output pixel along the axis.
    pub epsilon: f64,
    pub seed: u64,
}

impl RetargetJob {
    pub fn new(alpha: f64, axis: Axis, width: usize, height: usize, seed: u64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(Error::argument(format!(
                "size ratio must be positive and finite, got {alpha}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::argument("image dimensions must be nonzero"));
        }
        let in_axis = match axis {
            Axis::X => width,
            Axis::Y => height,
        };
        let out_axis = (alpha * in_axis as f64).round() as usize;
        if out_axis == 0 {
            return Err(Error::argument(format!(
                "ratio {alpha} collapses the {in_axis}-pixel axis to zero width"
            )));
        }
        let learning_rate = if alpha <= 1.0 { 1e-3 } else { 1e-4 };
        Ok(RetargetJob {
            alpha,
            axis,
            width,
            height,
            weights: LossWeights::image(),
            cap_slack: DEFAULT_CAP_SLACK,
            epochs: 50,
            iters_per_epoch: 100,
            learning_rate,
            init_epochs: 50,
            init_iters: 100,
            epsilon: alpha / out_axis as f64,
            seed,
        })
    }

    pub fn mode(&self) -> RetargetMode {
        if self.alpha <= 1.0 {
            RetargetMode::Shrink
        } else {
            RetargetMode::Expand
        }
    }

    /// Output dimensions: the axis scales by `alpha` (rounded), the other
    /// side is untouched.
    pub fn out_dims(&self) -> (usize, usize) {
        match self.axis {
            Axis::X => (
                (self.alpha * self.width as f64).round() as usize,
                self.height,
            ),
            Axis::Y => (
                self.width,
                (self.alpha * self.height as f64).round() as usize,
            ),
        }
    }

    fn out_axis_len(&self) -> usize {
        let (w, h) = self.out_dims();
        match self.axis {
            Axis::X => w,
            Axis::Y => h,
        }
    }

    fn perp_len(&self) -> usize {
        match self.axis {
            Axis::X => self.height,
            Axis::Y => self.width,
        }
    }
}

/// The trained offset network together with the job geometry it solves.
pub struct DeformationField {
    net: Mlp<f64>,
    axis: Axis,
    alpha: f64,
}

impl DeformationField {
    /// Offset-network architecture: 64 channels, scalar output behind a
    /// leaky-linear head, encoding bands matched to the sampling density.
    pub fn network_config(width: usize, height: usize) -> NetworkConfig {
        NetworkConfig::new(2, 1)
            .with_activation(Activation::LeakyRelu)
            .with_bands(bands_for(width.min(height)))
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn net(&self) -> &Mlp<f64> {
        &self.net
    }

    /// Offset at a single output-domain point (`[axis, perp]` order
    /// follows the raster's `[x, y]`).
    pub fn offset(&self, p: [f64; 2]) -> f64 {
        self.net.forward(&p)[0]
    }

    /// Input-domain point an output point reads from.
    pub fn warp(&self, p: [f64; 2]) -> [f64; 2] {
        let mut q = p;
        match self.axis {
            Axis::X => q[0] += self.offset(p),
            Axis::Y => q[1] += self.offset(p),
        }
        q
    }
}

/// Anything that can supply offsets for a batch of output-domain points.
/// [`DeformationField`] is the trained implementation; tests and the
/// seam-comparison path drive rendering with hand-built offset functions.
pub trait DeformSource {
    fn offsets(&self, pts: &[f64], out: &mut Vec<f64>);
}

impl DeformSource for DeformationField {
    fn offsets(&self, pts: &[f64], out: &mut Vec<f64>) {
        let mut state = BatchState::new();
        let o = self.net.forward_batch(pts, &mut state);
        out.clear();
        out.extend_from_slice(o);
    }
}

/// Offset source backed by a plain function of `[x, y]`.
pub struct FnDeform<F: Fn([f64; 2]) -> f64>(pub F);

impl<F: Fn([f64; 2]) -> f64> DeformSource for FnDeform<F> {
    fn offsets(&self, pts: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(pts.chunks_exact(2).map(|p| (self.0)([p[0], p[1]])));
    }
}

/// Anything that can supply colors for a batch of input-domain points.
pub trait ColorSource {
    /// Three values per point, row-major.
    fn colors(&self, pts: &[f64], out: &mut Vec<f64>);
}

impl ColorSource for ImageField {
    fn colors(&self, pts: &[f64], out: &mut Vec<f64>) {
        *out = self.sample_batch(pts);
    }
}

impl ColorSource for RasterImage {
    fn colors(&self, pts: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for p in pts.chunks_exact(2) {
            out.extend_from_slice(&self.sample_bilinear(p[0], p[1]));
        }
    }
}

/// Scalar content field consumed by the losses: values plus the derivative
/// along the retarget axis, batched.
pub trait ContentSource {
    fn eval_with_axis_grad(
        &self,
        pts: &[f64],
        axis: Axis,
        values: &mut Vec<f64>,
        grads: &mut Vec<f64>,
    );
}

impl ContentSource for CumulativeEnergyField {
    fn eval_with_axis_grad(
        &self,
        pts: &[f64],
        axis: Axis,
        values: &mut Vec<f64>,
        grads: &mut Vec<f64>,
    ) {
        debug_assert_eq!(axis, self.axis(), "cumulative field trained on another axis");
        CumulativeEnergyField::eval_with_axis_grad(self, pts, values, grads);
    }
}

impl ContentSource for EnergyField {
    fn eval_with_axis_grad(
        &self,
        pts: &[f64],
        axis: Axis,
        values: &mut Vec<f64>,
        grads: &mut Vec<f64>,
    ) {
        EnergyField::eval_with_axis_grad(self, pts, axis, values, grads);
    }
}

/// An additional objective folded into the optimization, used by the
/// editing operations. The term sees the output-domain sample points and
/// the current offsets there, returns its value, and accumulates its
/// gradient with respect to the offsets.
pub trait ExtraTerm {
    fn eval(&self, axis: Axis, pts: &[f64], offsets: &[f64], grad: &mut [f64]) -> f64;
}

/// Mean values of every loss term, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub content: f64,
    pub shear: f64,
    pub boundary: f64,
    pub monotonic: f64,
    pub cap: f64,
    pub extra: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights, extra_weight: f64) -> f64 {
        w.content * self.content
            + w.shear * self.shear
            + w.boundary * self.boundary
            + w.monotonic * self.monotonic
            + w.cap * self.cap
            + extra_weight * self.extra
    }

    fn first_nonfinite(&self) -> Option<&'static str> {
        [
            (self.content, "content"),
            (self.shear, "shear"),
            (self.boundary, "boundary"),
            (self.monotonic, "monotonic"),
            (self.cap, "cap"),
            (self.extra, "extra"),
        ]
        .iter()
        .find(|(v, _)| !v.is_finite())
        .map(|&(_, n)| n)
    }
}

/// One row of the optimization log: epoch-mean term values and the
/// epoch-mean weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossRow {
    pub epoch: usize,
    pub content: f64,
    pub shear: f64,
    pub boundary: f64,
    pub monotonic: f64,
    pub cap: f64,
    pub extra: f64,
    pub total: f64,
}

/// Whether the tail of a loss log has stopped improving: over the last ten
/// epochs, no epoch total exceeds its predecessor by more than 5%.
pub fn loss_settled(rows: &[LossRow]) -> bool {
    if rows.len() < 10 {
        return false;
    }
    rows[rows.len() - 10..]
        .windows(2)
        .all(|w| w[1].total <= 1.05 * w[0].total)
}

/// The fixed sample sets of one job, concatenated for a single network
/// pass: output pixel centers `P`, axis probes `P + eps*v`, perpendicular
/// probes `P + eps*v_perp`, and the two boundary rows at `p_v = 0` and
/// `p_v = alpha`.
struct SampleSet {
    n: usize,
    boundary: usize,
    /// All points, two coordinates per row, `[x, y]` order.
    pts: Vec<f64>,
    /// Axis coordinate of each of the first `n` rows (the centers).
    axis_coord: Vec<f64>,
    /// Perpendicular coordinate of each center row.
    perp_coord: Vec<f64>,
}

impl SampleSet {
    fn build(job: &RetargetJob) -> SampleSet {
        let out_axis = job.out_axis_len();
        let perp = job.perp_len();
        let n = out_axis * perp;
        let h = perp;
        let eps = job.epsilon;
        let (ax, px) = match job.axis {
            Axis::X => (0usize, 1usize),
            Axis::Y => (1, 0),
        };
        let mut pts = vec![0.0; (3 * n + 2 * h) * 2];
        let mut axis_coord = Vec::with_capacity(n);
        let mut perp_coord = Vec::with_capacity(n);
        let mut row = 0;
        for j in 0..perp {
            let pc = (j as f64 + 0.5) / perp as f64;
            for i in 0..out_axis {
                let ac = job.alpha * (i as f64 + 0.5) / out_axis as f64;
                pts[row * 2 + ax] = ac;
                pts[row * 2 + px] = pc;
                pts[(n + row) * 2 + ax] = ac + eps;
                pts[(n + row) * 2 + px] = pc;
                pts[(2 * n + row) * 2 + ax] = ac;
                pts[(2 * n + row) * 2 + px] = pc + eps;
                axis_coord.push(ac);
                perp_coord.push(pc);
                row += 1;
            }
        }
        for j in 0..h {
            let pc = (j as f64 + 0.5) / perp as f64;
            let lo = (3 * n + j) * 2;
            pts[lo + ax] = 0.0;
            pts[lo + px] = pc;
            let hi = (3 * n + h + j) * 2;
            pts[hi + ax] = job.alpha;
            pts[hi + px] = pc;
        }
        SampleSet {
            n,
            boundary: h,
            pts,
            axis_coord,
            perp_coord,
        }
    }

    fn rows(&self) -> usize {
        3 * self.n + 2 * self.boundary
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scratch buffers for repeated loss evaluations over one sample set.
struct LossEval {
    state: BatchState<f64>,
    scratch: BackwardScratch<f64>,
    enc: Vec<f64>,
    d_out: Vec<f64>,
    q: Vec<f64>,
    q_pair: Vec<f64>,
    joined: Vec<f64>,
    content_vals: Vec<f64>,
    content_grads: Vec<f64>,
    shear_vals: Vec<f64>,
    shear_grads: Vec<f64>,
    extra_grad: Vec<f64>,
}

impl LossEval {
    fn new(net: &Mlp<f64>, set: &SampleSet) -> LossEval {
        let mut enc = vec![0.0; set.rows() * net.config().encoded_dim()];
        encode::encode_batch(&set.pts, 2, net.config().encoding_bands, &mut enc);
        LossEval {
            state: BatchState::new(),
            scratch: BackwardScratch::new(),
            enc,
            d_out: vec![0.0; set.rows()],
            q: Vec::new(),
            q_pair: Vec::new(),
            joined: Vec::new(),
            content_vals: Vec::new(),
            content_grads: Vec::new(),
            shear_vals: Vec::new(),
            shear_grads: Vec::new(),
            extra_grad: vec![0.0; set.n],
        }
    }

    /// One full pass: forward the network over the sample set, evaluate
    /// every term, and (optionally) backpropagate the assembled output
    /// gradient into `param_grads`.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        net: &Mlp<f64>,
        set: &SampleSet,
        job: &RetargetJob,
        content: &impl ContentSource,
        shear: &impl ContentSource,
        extra: Option<(&dyn ExtraTerm, f64)>,
        mut param_grads: Option<&mut Vec<f64>>,
    ) -> LossBreakdown {
        let n = set.n;
        let h = set.boundary;
        let eps = job.epsilon;
        let inv_n = 1.0 / n as f64;
        let inv_h = 1.0 / h as f64;
        let w = &job.weights;
        let expand = job.mode() == RetargetMode::Expand;
        let (ax, px) = match job.axis {
            Axis::X => (0usize, 1usize),
            Axis::Y => (1, 0),
        };

        let LossEval {
            state,
            scratch,
            enc,
            d_out,
            q,
            q_pair,
            joined,
            content_vals,
            content_grads,
            shear_vals,
            shear_grads,
            extra_grad,
        } = self;

        state.prepare_encoded(net.config(), set.rows(), enc);
        net.forward_encoded(state);
        let (a, rest) = state.out.split_at(n);
        let (b, rest) = rest.split_at(n);
        let (c, rest) = rest.split_at(n);
        let (d0, d1) = rest.split_at(h);

        // Warped points: q from the centers, q_pair from the axis probes.
        q.resize(n * 2, 0.0);
        q_pair.resize(n * 2, 0.0);
        for i in 0..n {
            q[i * 2 + ax] = set.axis_coord[i] + a[i];
            q[i * 2 + px] = set.perp_coord[i];
            q_pair[i * 2 + ax] = set.axis_coord[i] + eps + b[i];
            q_pair[i * 2 + px] = set.perp_coord[i];
        }

        let want_grads = param_grads.is_some();
        if want_grads {
            for v in d_out.iter_mut() {
                *v = 0.0;
            }
        }

        let mut sums = LossBreakdown::default();

        // Content term. Shrinking compares cumulative-energy differences
        // of the warped probe pair; expanding weighs the local compression
        // by the pointwise energy at the warped center.
        if expand {
            content.eval_with_axis_grad(q, job.axis, content_vals, content_grads);
            for i in 0..n {
                let diff = (a[i] - b[i]) / eps;
                let e = content_vals[i];
                sums.content += e * diff.abs();
                if want_grads {
                    let s_ab = sgn(a[i] - b[i]);
                    d_out[i] +=
                        w.content * inv_n * (content_grads[i] * diff.abs() + e * s_ab / eps);
                    d_out[n + i] -= w.content * inv_n * e * s_ab / eps;
                }
            }
        } else {
            // One batched field call covers both endpoints.
            joined.clear();
            joined.extend_from_slice(q);
            joined.extend_from_slice(q_pair);
            content.eval_with_axis_grad(joined, job.axis, content_vals, content_grads);
            let (sq, sq_pair) = content_vals.split_at(n);
            let (gq, gq_pair) = content_grads.split_at(n);
            for i in 0..n {
                let mass = sq[i] - sq_pair[i];
                let u = mass.abs() / eps;
                let diff = (a[i] - b[i]) / eps;
                sums.content += u * diff.abs();
                if want_grads {
                    let s_m = sgn(mass);
                    let s_ab = sgn(a[i] - b[i]);
                    d_out[i] +=
                        w.content * inv_n * (s_m * gq[i] / eps * diff.abs() + u * s_ab / eps);
                    d_out[n + i] += w.content
                        * inv_n
                        * (-s_m * gq_pair[i] / eps * diff.abs() - u * s_ab / eps);
                }
            }
        }

        // Shear term: energy-weighted perpendicular variation.
        shear.eval_with_axis_grad(q, job.axis, shear_vals, shear_grads);
        for i in 0..n {
            let diff = (a[i] - c[i]) / eps;
            let e = shear_vals[i];
            sums.shear += e * diff.abs();
            if want_grads {
                let s_ac = sgn(a[i] - c[i]);
                d_out[i] += w.shear * inv_n * (shear_grads[i] * diff.abs() + e * s_ac / eps);
                d_out[2 * n + i] -= w.shear * inv_n * e * s_ac / eps;
            }
        }

        // Monotonicity: penalize D decreasing along the axis. When
        // expanding, additionally cap how fast it may decrease.
        for i in 0..n {
            let slope = (a[i] - b[i]) / eps;
            if slope > 0.0 {
                sums.monotonic += slope;
                if want_grads {
                    d_out[i] += w.monotonic * inv_n / eps;
                    d_out[n + i] -= w.monotonic * inv_n / eps;
                }
            }
            if expand && slope - job.cap_slack > 0.0 {
                sums.cap += slope - job.cap_slack;
                if want_grads {
                    d_out[i] += w.cap * inv_n / eps;
                    d_out[n + i] -= w.cap * inv_n / eps;
                }
            }
        }

        // Boundary pinning.
        let top = 1.0 - job.alpha;
        for j in 0..h {
            sums.boundary += (d0[j].abs() + (d1[j] - top).abs()) * inv_h;
            if want_grads {
                d_out[3 * n + j] = w.boundary * inv_h * sgn(d0[j]);
                d_out[3 * n + h + j] = w.boundary * inv_h * sgn(d1[j] - top);
            }
        }
        sums.content *= inv_n;
        sums.shear *= inv_n;
        sums.monotonic *= inv_n;
        sums.cap *= inv_n;

        // Editing hook: the extra objective sees the centers and their
        // offsets only.
        if let Some((term, weight)) = extra {
            for g in extra_grad.iter_mut() {
                *g = 0.0;
            }
            sums.extra = term.eval(job.axis, &set.pts[..n * 2], a, extra_grad);
            if want_grads {
                for i in 0..n {
                    d_out[i] += weight * extra_grad[i];
                }
            }
        }

        if let Some(grads) = param_grads.as_deref_mut() {
            grads.resize(net.param_count(), 0.0);
            for g in grads.iter_mut() {
                *g = 0.0;
            }
            net.backward_batch_with(&[], state, d_out, scratch, Some(grads), None, None);
        }
        sums
    }
}

/// Fits a fresh offset network to the uniform-resize solution
/// `D*(p) = p_v (1 - alpha) / alpha` over the output pixel centers.
pub fn init_uniform(job: &RetargetJob) -> Result<DeformationField> {
    let set = SampleSet::build(job);
    let points = &set.pts[..set.n * 2];
    let scale = (1.0 - job.alpha) / job.alpha;
    let targets: Vec<f64> = set.axis_coord.iter().map(|&v| v * scale).collect();
    let cfg = DeformationField::network_config(job.width, job.height);
    let mut net = Mlp::<f64>::init(cfg, job.seed)?;
    let sched = FitSchedule::new(job.init_epochs, job.init_iters, 1e-3);
    fit_dataset(&mut net, points, &targets, &sched, "uniform-resize init", None)?;
    Ok(DeformationField {
        net,
        axis: job.axis,
        alpha: job.alpha,
    })
}

/// Root-mean-square deviation of a field from the uniform-resize solution
/// over the job's output pixel centers.
pub fn uniform_rms(field: &DeformationField, job: &RetargetJob) -> f64 {
    let set = SampleSet::build(job);
    let mut offs = Vec::new();
    field.offsets(&set.pts[..set.n * 2], &mut offs);
    let scale = (1.0 - job.alpha) / job.alpha;
    let sum: f64 = offs
        .iter()
        .zip(&set.axis_coord)
        .map(|(&d, &v)| {
            let err = d - v * scale;
            err * err
        })
        .sum();
    (sum / set.n as f64).sqrt()
}

/// Optimizes `field` in place against the given content and shear sources,
/// returning the per-epoch loss log. `extra` is the editing hook; pass
/// `None` for plain retargeting.
pub fn optimize(
    field: &mut DeformationField,
    job: &RetargetJob,
    content: &impl ContentSource,
    shear: &impl ContentSource,
    extra: Option<(&dyn ExtraTerm, f64)>,
) -> Result<Vec<LossRow>> {
    if field.axis != job.axis || (field.alpha - job.alpha).abs() > 1e-12 {
        return Err(Error::argument(
            "deformation field geometry does not match the job",
        ));
    }
    let set = SampleSet::build(job);
    let mut eval = LossEval::new(&field.net, &set);
    let mut grads = Vec::new();
    let mut opt = Adam::new(field.net.param_count());
    let extra_weight = extra.as_ref().map_or(0.0, |&(_, w)| w);
    let mut log = Vec::with_capacity(job.epochs);
    for epoch in 0..job.epochs {
        let mut acc = LossBreakdown::default();
        let mut acc_total = 0.0;
        for _ in 0..job.iters_per_epoch {
            let sums = eval.run(
                &field.net,
                &set,
                job,
                content,
                shear,
                extra,
                Some(&mut grads),
            );
            let total = sums.weighted_total(&job.weights, extra_weight);
            if let Some(name) = sums.first_nonfinite().or_else(|| {
                if total.is_finite() {
                    None
                } else {
                    Some("total")
                }
            }) {
                return Err(Error::Diverged {
                    term: name.to_string(),
                    epoch,
                    detail: format!(
                        "content={:.4e} shear={:.4e} boundary={:.4e} monotonic={:.4e} \
                         cap={:.4e} extra={:.4e}",
                        sums.content,
                        sums.shear,
                        sums.boundary,
                        sums.monotonic,
                        sums.cap,
                        sums.extra
                    ),
                });
            }
            acc.content += sums.content;
            acc.shear += sums.shear;
            acc.boundary += sums.boundary;
            acc.monotonic += sums.monotonic;
            acc.cap += sums.cap;
            acc.extra += sums.extra;
            acc_total += total;
            opt.step(field.net.params_mut(), &grads, job.learning_rate);
        }
        let k = job.iters_per_epoch.max(1) as f64;
        log.push(LossRow {
            epoch,
            content: acc.content / k,
            shear: acc.shear / k,
            boundary: acc.boundary / k,
            monotonic: acc.monotonic / k,
            cap: acc.cap / k,
            extra: acc.extra / k,
            total: acc_total / k,
        });
    }
    Ok(log)
}

/// Convenience entry: uniform init followed by optimization.
pub fn retarget(
    job: &RetargetJob,
    content: &impl ContentSource,
    shear: &impl ContentSource,
) -> Result<(DeformationField, Vec<LossRow>)> {
    let mut field = init_uniform(job)?;
    let log = optimize(&mut field, job, content, shear, None)?;
    Ok((field, log))
}

/// Renders the output raster: every output pixel center is warped by the
/// offset source and colored from the color source.
pub fn render_output(
    deform: &impl DeformSource,
    colors: &impl ColorSource,
    axis: Axis,
    alpha: f64,
    in_width: usize,
    in_height: usize,
) -> RasterImage {
    let (out_w, out_h) = match axis {
        Axis::X => ((alpha * in_width as f64).round() as usize, in_height),
        Axis::Y => (in_width, (alpha * in_height as f64).round() as usize),
    };
    let (ax, _) = match axis {
        Axis::X => (0usize, 1usize),
        Axis::Y => (1, 0),
    };
    let mut pts = Vec::with_capacity(out_w * out_h * 2);
    for j in 0..out_h {
        for i in 0..out_w {
            let (mut x, mut y) = (
                (i as f64 + 0.5) / out_w as f64,
                (j as f64 + 0.5) / out_h as f64,
            );
            match axis {
                Axis::X => x *= alpha,
                Axis::Y => y *= alpha,
            }
            pts.push(x);
            pts.push(y);
        }
    }
    let mut offs = Vec::new();
    deform.offsets(&pts, &mut offs);
    for (row, &d) in offs.iter().enumerate() {
        let v = &mut pts[row * 2 + ax];
        *v = (*v + d).clamp(0.0, 1.0);
    }
    let mut rgb = Vec::new();
    colors.colors(&pts, &mut rgb);
    RasterImage::from_data(
        out_w,
        out_h,
        rgb.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
    )
    .expect("render buffer matches output dimensions")
}

/// Map of local deformation-rate magnitude `|dD/dv|` over the output grid,
/// normalized to its maximum; a uniform resize comes out black.
pub fn fold_map(
    deform: &impl DeformSource,
    axis: Axis,
    alpha: f64,
    in_width: usize,
    in_height: usize,
) -> RasterImage {
    let (out_w, out_h) = match axis {
        Axis::X => ((alpha * in_width as f64).round() as usize, in_height),
        Axis::Y => (in_width, (alpha * in_height as f64).round() as usize),
    };
    let axis_len = match axis {
        Axis::X => out_w,
        Axis::Y => out_h,
    };
    let step = alpha / axis_len as f64;
    let n = out_w * out_h;
    let mut pts = vec![0.0; n * 2 * 2];
    for j in 0..out_h {
        for i in 0..out_w {
            let row = j * out_w + i;
            let (mut x, mut y) = (
                (i as f64 + 0.5) / out_w as f64,
                (j as f64 + 0.5) / out_h as f64,
            );
            match axis {
                Axis::X => x *= alpha,
                Axis::Y => y *= alpha,
            }
            let (dx, dy) = match axis {
                Axis::X => (step, 0.0),
                Axis::Y => (0.0, step),
            };
            pts[row * 2] = x + dx;
            pts[row * 2 + 1] = y + dy;
            pts[(n + row) * 2] = x - dx;
            pts[(n + row) * 2 + 1] = y - dy;
        }
    }
    let mut offs = Vec::new();
    deform.offsets(&pts, &mut offs);
    let mut rate = vec![0.0; n];
    let mut peak: f64 = 0.0;
    for i in 0..n {
        let r = ((offs[i] - offs[n + i]) / (2.0 * step)).abs();
        rate[i] = r;
        peak = peak.max(r);
    }
    if peak > 0.0 {
        for r in rate.iter_mut() {
            *r /= peak;
        }
    }
    RasterImage::from_fn(out_w, out_h, |x, y| {
        let v = rate[y * out_w + x];
        [v, v, v]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Content source backed by closures returning value and axis-slope.
    struct FnSource<F: Fn([f64; 2]) -> (f64, f64)>(F);

    impl<F: Fn([f64; 2]) -> (f64, f64)> ContentSource for FnSource<F> {
        fn eval_with_axis_grad(
            &self,
            pts: &[f64],
            _axis: Axis,
            values: &mut Vec<f64>,
            grads: &mut Vec<f64>,
        ) {
            values.clear();
            grads.clear();
            for p in pts.chunks_exact(2) {
                let (v, g) = (self.0)([p[0], p[1]]);
                values.push(v);
                grads.push(g);
            }
        }
    }

    fn tiny_job(alpha: f64) -> RetargetJob {
        let mut job = RetargetJob::new(alpha, Axis::X, 8, 4, 3).unwrap();
        job.epochs = 0;
        job
    }

    #[test]
    fn job_validation_rejects_bad_ratios() {
        assert!(RetargetJob::new(0.0, Axis::X, 8, 8, 1).is_err());
        assert!(RetargetJob::new(-1.0, Axis::X, 8, 8, 1).is_err());
        assert!(RetargetJob::new(f64::NAN, Axis::X, 8, 8, 1).is_err());
        assert!(RetargetJob::new(0.01, Axis::X, 8, 8, 1).is_err());
        assert!(RetargetJob::new(0.5, Axis::X, 0, 8, 1).is_err());
    }

    #[test]
    fn output_dims_round_the_axis_only() {
        let job = RetargetJob::new(0.5, Axis::X, 64, 48, 1).unwrap();
        assert_eq!(job.out_dims(), (32, 48));
        let job = RetargetJob::new(1.25, Axis::Y, 64, 48, 1).unwrap();
        assert_eq!(job.out_dims(), (64, 60));
        assert_eq!(job.mode(), RetargetMode::Expand);
    }

    #[test]
    fn epsilon_defaults_to_one_output_pixel() {
        let job = RetargetJob::new(0.5, Axis::X, 64, 64, 1).unwrap();
        assert!((job.epsilon - 0.5 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn sample_set_geometry() {
        let job = tiny_job(0.5);
        let set = SampleSet::build(&job);
        assert_eq!(set.n, 4 * 4);
        assert_eq!(set.boundary, 4);
        assert_eq!(set.rows(), 3 * 16 + 8);
        // First center: axis 0.5 * 0.5/4 = 0.0625, perp 0.125.
        assert!((set.pts[0] - 0.0625).abs() < 1e-15);
        assert!((set.pts[1] - 0.125).abs() < 1e-15);
        // Its axis probe sits one epsilon further along x.
        assert!((set.pts[16 * 2] - (0.0625 + job.epsilon)).abs() < 1e-15);
        // Boundary rows pin the domain ends.
        assert_eq!(set.pts[3 * 16 * 2], 0.0);
        assert!((set.pts[(3 * 16 + 4) * 2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_loss_values_match_hand_calculation() {
        // Uniform energy (cumulative field = identity ramp along x) and a
        // field that resizes uniformly at alpha = 0.5: the content term is
        // sigma-slope * warp-rate * deformation-rate = 1 * 2 * 1 = 2, all
        // sanity terms vanish.
        let mut job = tiny_job(0.5);
        job.epochs = 0;
        let set = SampleSet::build(&job);
        let scale = (1.0 - job.alpha) / job.alpha;
        let cfg = DeformationField::network_config(8, 4).with_channels(8);
        let mut net = Mlp::<f64>::init(cfg, 5).unwrap();
        // Fit to the uniform solution; small fit residuals are absorbed by
        // the assertion tolerances below.
        let targets: Vec<f64> = set.axis_coord.iter().map(|&v| v * scale).collect();
        fit_dataset(
            &mut net,
            &set.pts[..set.n * 2],
            &targets,
            &FitSchedule::new(8, 100, 1e-3),
            "test init",
            None,
        )
        .unwrap();
        let sigma = FnSource(|p: [f64; 2]| (p[0], 1.0));
        let flat = FnSource(|_p| (1.0, 0.0));
        let mut eval = LossEval::new(&net, &set);
        let sums = eval.run(&net, &set, &job, &sigma, &flat, None, None);
        assert!(
            (sums.content - 2.0).abs() < 0.2,
            "content {} should be near 2",
            sums.content
        );
        assert!(sums.boundary < 0.05, "boundary {}", sums.boundary);
        // Uniform slope is negative (D rises along v), so no penalty.
        assert!(sums.monotonic < 0.05, "monotonic {}", sums.monotonic);
        assert_eq!(sums.cap, 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Smooth closed-form fields keep every |.| term away from its kink
        // so central differences are trustworthy.
        let mut job = tiny_job(0.5);
        job.weights = LossWeights {
            content: 3.0,
            shear: 2.0,
            boundary: 1.5,
            monotonic: 2.5,
            cap: 1.0,
        };
        let set = SampleSet::build(&job);
        let cfg = NetworkConfig::new(2, 1)
            .with_activation(Activation::Sigmoid)
            .with_channels(4)
            .with_bands(2);
        let net = Mlp::<f64>::init(cfg, 9).unwrap();
        let sigma = FnSource(|p: [f64; 2]| ((p[0] * 1.3 + 0.2 * p[1]).sin(), 1.3 * (p[0] * 1.3 + 0.2 * p[1]).cos()));
        let energy = FnSource(|p: [f64; 2]| (1.0 + 0.5 * (p[0] + p[1]), 0.5));
        let mut eval = LossEval::new(&net, &set);
        let mut grads = Vec::new();
        eval.run(&net, &set, &job, &sigma, &energy, None, Some(&mut grads));
        // Numeric gradient by bumping each parameter of a small clone.
        let step = 1e-6;
        let params = net.params().to_vec();
        let mut worst = 0.0f64;
        for k in (0..params.len()).step_by(7) {
            let mut up = params.clone();
            up[k] += step;
            let net_up = Mlp::<f64>::from_params(net.config().clone(), up).unwrap();
            let mut dn = params.clone();
            dn[k] -= step;
            let net_dn = Mlp::<f64>::from_params(net.config().clone(), dn).unwrap();
            let mut e2 = LossEval::new(&net_up, &set);
            let hi = e2
                .run(&net_up, &set, &job, &sigma, &energy, None, None)
                .weighted_total(&job.weights, 0.0);
            let lo = e2
                .run(&net_dn, &set, &job, &sigma, &energy, None, None)
                .weighted_total(&job.weights, 0.0);
            let numeric = (hi - lo) / (2.0 * step);
            let analytic = grads[k];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((numeric - analytic).abs() / denom);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn expand_mode_uses_cap_and_pointwise_content() {
        let mut job = tiny_job(2.0);
        job.cap_slack = 0.25;
        let set = SampleSet::build(&job);
        // A deliberately too-steep decrease: D = -0.75 * p_v gives slope
        // (a-b)/eps = 0.75 > 0.25.
        let cfg = DeformationField::network_config(8, 4).with_channels(8);
        let mut net = Mlp::<f64>::init(cfg, 2).unwrap();
        let targets: Vec<f64> = set.axis_coord.iter().map(|&v| -0.75 * v).collect();
        fit_dataset(
            &mut net,
            &set.pts[..set.n * 2],
            &targets,
            &FitSchedule::new(10, 100, 1e-3),
            "test init",
            None,
        )
        .unwrap();
        let flat = FnSource(|_p| (1.0, 0.0));
        let mut eval = LossEval::new(&net, &set);
        let sums = eval.run(&net, &set, &job, &flat, &flat, None, None);
        assert!(
            (sums.cap - 0.5).abs() < 0.05,
            "cap {} should be near 0.75 - 0.25",
            sums.cap
        );
        assert!(
            (sums.monotonic - 0.75).abs() < 0.05,
            "monotonic {}",
            sums.monotonic
        );
        assert!((sums.content - 0.75).abs() < 0.05, "content {}", sums.content);
    }

    #[test]
    fn init_reaches_the_uniform_solution() {
        let mut job = RetargetJob::new(0.5, Axis::X, 16, 8, 7).unwrap();
        job.init_epochs = 10;
        let field = init_uniform(&job).unwrap();
        let rms = uniform_rms(&field, &job);
        assert!(rms < 1e-3, "rms {rms}");
    }

    #[test]
    fn init_handles_expansion_targets() {
        let mut job = RetargetJob::new(1.5, Axis::Y, 8, 16, 7).unwrap();
        job.init_epochs = 10;
        let field = init_uniform(&job).unwrap();
        let rms = uniform_rms(&field, &job);
        assert!(rms < 2e-3, "rms {rms}");
        // Offsets are negative inside the expanded domain.
        assert!(field.offset([0.5, 1.2]) < 0.0);
    }

    #[test]
    fn render_identity_offsets_resample_the_source() {
        let img = crate::fixtures::ramp_image(16, 8);
        let zero = FnDeform(|_| 0.0);
        let out = render_output(&zero, &img, Axis::X, 1.0, 16, 8);
        assert_eq!(out.width(), 16);
        assert_eq!(out.height(), 8);
        for y in 0..8 {
            for x in 0..16 {
                let want = img.get(x, y);
                let got = out.get(x, y);
                for c in 0..3 {
                    assert!((want[c] - got[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn render_uniform_shrink_matches_direct_resample() {
        let img = crate::fixtures::smooth_image(16, 8, 3);
        let alpha = 0.5;
        let uniform = FnDeform(move |p: [f64; 2]| p[0] * (1.0 - alpha) / alpha);
        let out = render_output(&uniform, &img, Axis::X, alpha, 16, 8);
        assert_eq!(out.width(), 8);
        for y in 0..8 {
            for x in 0..8 {
                // Output center maps to alpha*(x+0.5)/8 / alpha = (x+0.5)/8.
                let q = [(x as f64 + 0.5) / 8.0, (y as f64 + 0.5) / 8.0];
                let want = img.sample_bilinear(q[0], q[1]);
                let got = out.get(x, y);
                for c in 0..3 {
                    assert!((want[c] - got[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fold_map_flags_nonuniform_rate_and_zero_stays_black() {
        let flat = FnDeform(|_| 0.0);
        let fm = fold_map(&flat, Axis::X, 1.0, 8, 4);
        assert!(fm.data().iter().all(|&v| v == 0.0));
        // A quadratic offset has |D'| growing along x, so the map must
        // brighten monotonically and peak at white.
        let quad = FnDeform(|p: [f64; 2]| p[0] * p[0]);
        let fm = fold_map(&quad, Axis::X, 1.0, 8, 4);
        let row: Vec<f64> = (0..8).map(|x| fm.get(x, 1)[0]).collect();
        for i in 1..8 {
            assert!(row[i] > row[i - 1] - 1e-12);
        }
        assert!((row[7] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_log_settling_detector() {
        let mk = |totals: &[f64]| -> Vec<LossRow> {
            totals
                .iter()
                .enumerate()
                .map(|(i, &t)| LossRow {
                    epoch: i,
                    content: 0.0,
                    shear: 0.0,
                    boundary: 0.0,
                    monotonic: 0.0,
                    cap: 0.0,
                    extra: 0.0,
                    total: t,
                })
                .collect()
        };
        let settled = mk(&[9.0, 8.0, 5.0, 3.0, 2.0, 1.9, 1.85, 1.8, 1.8, 1.79, 1.78, 1.78]);
        assert!(loss_settled(&settled));
        let mut bouncing = vec![5.0; 12];
        bouncing[10] = 9.0;
        assert!(!loss_settled(&mk(&bouncing)));
        assert!(!loss_settled(&settled[..5]));
    }

    #[test]
    fn optimize_rejects_mismatched_field() {
        let mut job = RetargetJob::new(0.5, Axis::X, 8, 4, 1).unwrap();
        job.init_epochs = 1;
        job.epochs = 1;
        let mut field = init_uniform(&job).unwrap();
        let other = RetargetJob::new(0.8, Axis::X, 8, 4, 1).unwrap();
        let flat = FnSource(|_p| (1.0, 0.0));
        assert!(optimize(&mut field, &other, &flat, &flat, None).is_err());
    }

    #[test]
    fn short_optimization_run_logs_and_improves() {
        let mut job = RetargetJob::new(0.5, Axis::X, 12, 6, 5).unwrap();
        job.init_epochs = 8;
        job.epochs = 6;
        job.iters_per_epoch = 50;
        // Energy concentrated in the middle third along x.
        let sigma = FnSource(|p: [f64; 2]| {
            let x = p[0];
            let lo = 1.0 / 3.0;
            let hi = 2.0 / 3.0;
            if x < lo {
                (0.05 * x, 0.05)
            } else if x < hi {
                (0.05 * lo + (x - lo), 1.0)
            } else {
                (0.05 * lo + (hi - lo) + 0.05 * (x - hi), 0.05)
            }
        });
        let energy = FnSource(|p: [f64; 2]| {
            let x = p[0];
            if (1.0 / 3.0..2.0 / 3.0).contains(&x) {
                (1.0, 0.0)
            } else {
                (0.05, 0.0)
            }
        });
        let mut field = init_uniform(&job).unwrap();
        let log = optimize(&mut field, &job, &sigma, &energy, None).unwrap();
        assert_eq!(log.len(), 6);
        assert!(log[5].total < log[0].total, "{} -> {}", log[0].total, log[5].total);
        // The boundary stays pinned through optimization.
        assert!(log[5].boundary < 0.05, "boundary {}", log[5].boundary);
        // The high-energy middle should compress less than the uniform
        // rate: its local warp slope dq/dp = 1 + dD/dp stays closer to 1.
        let probe = |x: f64| {
            let d = 1e-3;
            let hi = field.offset([x + d, 0.5]);
            let lo = field.offset([x - d, 0.5]);
            1.0 + (hi - lo) / (2.0 * d)
        };
        let middle = probe(0.25); // output middle maps into the stripe
        let edge = probe(0.05);
        assert!(
            middle < edge,
            "middle stretch {middle} should stay below edge stretch {edge}"
        );
    }
}
