//! Continuous fields over the unit square: a neural color field fitted to a
//! raster, pointwise gradient energy, and cumulative energy along one axis.
//!
//! Conventions shared by everything here: pixel `(x, y)` of a `W x H` raster
//! sits at the normalized point `((x+0.5)/W, (y+0.5)/H)`, and "along v"
//! means along the [`Axis`] being resized. The color field trains in `f32`
//! on the vectorised kernels; everything consumed by the deformation
//! optimizer is evaluated through an `f64` copy so downstream gradients are
//! exact for the parameters actually stored.

use crate::image::RasterImage;
use crate::nn::encode::bands_for;
use crate::nn::train::{fit_dataset, FitSchedule};
use crate::nn::{Activation, BackwardScratch, BatchState, Mlp, NetworkConfig};
use crate::{Axis, Error, Result};

/// Normalized pixel-center coordinates of a `W x H` grid, row-major,
/// `2·W·H` values.
pub fn pixel_centers(width: usize, height: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(width * height * 2);
    for y in 0..height {
        for x in 0..width {
            pts.push((x as f64 + 0.5) / width as f64);
            pts.push((y as f64 + 0.5) / height as f64);
        }
    }
    pts
}

fn narrow(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

/// Batched scalar-field evaluation: network outputs at `pts` (one value per
/// point) written into `out`.
fn scalar_eval(net: &Mlp<f64>, pts: &[f64], out: &mut Vec<f64>) {
    let mut state = BatchState::new();
    net.forward_batch(pts, &mut state);
    out.clear();
    out.extend_from_slice(state.outputs());
}

/// Batched scalar-field evaluation with input gradients: `values` gets the
/// outputs, `grads` the `batch x 2` coordinate gradients.
fn scalar_eval_grad(net: &Mlp<f64>, pts: &[f64], values: &mut Vec<f64>, grads: &mut Vec<f64>) {
    let mut state = BatchState::new();
    net.forward_batch(pts, &mut state);
    values.clear();
    values.extend_from_slice(state.outputs());
    let batch = values.len();
    grads.clear();
    grads.resize(batch * 2, 0.0);
    let d_out = vec![1.0; batch];
    let mut scratch = BackwardScratch::new();
    net.backward_batch(pts, &state, &d_out, &mut scratch, None, Some(grads));
}

/// Neural color field: maps normalized coordinates to RGB. The network keeps
/// the raster's look-up role — output pixels read colors from it at deformed
/// positions — so everything downstream is differentiable in the query
/// point.
pub struct ImageField {
    net: Mlp<f32>,
}

impl ImageField {
    /// Architecture of the color field: 192 channels, sigmoid head, three
    /// outputs. The trainer narrows the encoding bands to the raster's
    /// resolution ([`bands_for`]); this template carries the config
    /// default.
    pub fn network_config() -> NetworkConfig {
        NetworkConfig::new(2, 3)
            .with_channels(192)
            .with_activation(Activation::Sigmoid)
    }

    /// The full training schedule: 250 epochs of 100 full-batch iterations
    /// at learning rate 1e-3.
    pub fn default_schedule() -> FitSchedule {
        FitSchedule::new(250, 100, 1e-3)
    }

    /// Wraps an existing network, checking it has the color-field shape.
    pub fn from_net(net: Mlp<f32>) -> Result<Self> {
        let want = Self::network_config();
        let got = net.config();
        if got.input_dim != want.input_dim
            || got.output_dim != want.output_dim
            || got.output_activation != want.output_activation
        {
            return Err(Error::config(
                "network does not have the color-field shape (2 in, 3 out, sigmoid head)",
            ));
        }
        Ok(ImageField { net })
    }

    pub fn net(&self) -> &Mlp<f32> {
        &self.net
    }

    /// Color at one normalized point. Queries outside `[0,1]^2` are allowed;
    /// the network extrapolates.
    pub fn sample(&self, p: [f64; 2]) -> [f64; 3] {
        let out = self.net.forward(&[p[0] as f32, p[1] as f32]);
        [out[0] as f64, out[1] as f64, out[2] as f64]
    }

    /// Colors at a batch of points (`x0 y0 x1 y1 ...`), three values per
    /// point.
    pub fn sample_batch(&self, pts: &[f64]) -> Vec<f64> {
        let pts32: Vec<f32> = pts.iter().map(|&v| v as f32).collect();
        let mut state = BatchState::new();
        self.net.forward_batch(&pts32, &mut state);
        state.outputs().iter().map(|&v| v as f64).collect()
    }

    /// Renders the field at the pixel centers of a `W x H` grid.
    pub fn render(&self, width: usize, height: usize) -> RasterImage {
        let colors = self.sample_batch(&pixel_centers(width, height));
        RasterImage::from_data(width, height, colors).expect("render buffer has grid size")
    }

    /// Reconstruction quality against a raster: renders at the raster's own
    /// resolution, quantizes to 8 bits, and returns the PSNR in dB.
    pub fn psnr_vs(&self, raster: &RasterImage) -> Result<f64> {
        let rendered = self.render(raster.width(), raster.height());
        let quantized =
            RasterImage::from_bytes(rendered.width(), rendered.height(), &rendered.to_bytes())?;
        quantized.psnr(raster)
    }
}

/// Fits a fresh color field to `image` by full-batch MSE over all pixel
/// centers.
pub fn train_image_field(
    image: &RasterImage,
    schedule: &FitSchedule,
    seed: u64,
) -> Result<ImageField> {
    let points = narrow(&pixel_centers(image.width(), image.height()));
    let targets: Vec<f32> = image.data().iter().map(|&v| v as f32).collect();
    let config = ImageField::network_config()
        .with_bands(bands_for(image.width().min(image.height())));
    let mut net = Mlp::<f32>::init(config, seed)?;
    fit_dataset(&mut net, &points, &targets, schedule, "color field", None)?;
    Ok(ImageField { net })
}

/// Pointwise content energy: the L2 norm over all six spatial partial
/// derivatives (3 channels x 2 axes) of the color field.
///
/// Two interchangeable sources, both exposing value plus derivative along
/// the resize axis:
///
/// * [`EnergyField::from_image_field`] differentiates the color network
///   directly (the default). The axis derivative is taken by central
///   differences of the norm, since that is a second derivative of the
///   color field.
/// * [`EnergyField::train`] fits a dedicated 64-channel network to the
///   discrete per-pixel energy and differentiates that. Much cheaper per
///   query; clamped at zero so the energy contract `E >= 0` holds.
pub enum EnergyField {
    FieldGradient { net: Mlp<f64> },
    Trained { net: Mlp<f64> },
}

/// Step for the internal central differences of the field-gradient energy
/// derivative. Small enough to be accurate, large enough to stay clear of
/// roundoff on `f64` evaluations.
const ENERGY_GRAD_STEP: f64 = 1e-4;

impl EnergyField {
    /// Gradient-of-field energy over a trained color field (the default
    /// variant).
    pub fn from_image_field(field: &ImageField) -> Self {
        EnergyField::FieldGradient {
            net: field.net.cast::<f64>(),
        }
    }

    /// Architecture of the trained variant: 64 channels, one output.
    pub fn trained_config() -> NetworkConfig {
        NetworkConfig::new(2, 1)
    }

    /// Default schedule for the trained variant: 10000 full-batch
    /// iterations, logged in 100-iteration epochs.
    pub fn default_schedule() -> FitSchedule {
        FitSchedule::new(100, 100, 1e-3)
    }

    /// Fits the trained variant to the discrete per-pixel energy of
    /// `image`.
    pub fn train(image: &RasterImage, schedule: &FitSchedule, seed: u64) -> Result<Self> {
        let points = narrow(&pixel_centers(image.width(), image.height()));
        let targets = narrow(&discrete_energy(image));
        let config = Self::trained_config()
            .with_bands(bands_for(image.width().min(image.height())));
        let mut net = Mlp::<f32>::init(config, seed)?;
        fit_dataset(&mut net, &points, &targets, schedule, "energy field", None)?;
        Ok(EnergyField::Trained {
            net: net.cast::<f64>(),
        })
    }

    /// Energy at a single point.
    pub fn energy_at(&self, p: [f64; 2]) -> f64 {
        let mut out = Vec::new();
        self.eval_batch(&p[..], &mut out);
        out[0]
    }

    /// Energies for a batch of points.
    pub fn eval_batch(&self, pts: &[f64], out: &mut Vec<f64>) {
        match self {
            EnergyField::FieldGradient { net } => field_gradient_norms(net, pts, out),
            EnergyField::Trained { net } => {
                scalar_eval(net, pts, out);
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }

    /// Energies plus their derivative along `axis`.
    pub fn eval_with_axis_grad(
        &self,
        pts: &[f64],
        axis: Axis,
        values: &mut Vec<f64>,
        grads: &mut Vec<f64>,
    ) {
        match self {
            EnergyField::FieldGradient { net } => {
                field_gradient_norms(net, pts, values);
                let n = values.len();
                let mut shifted = pts.to_vec();
                let c = match axis {
                    Axis::X => 0,
                    Axis::Y => 1,
                };
                for i in 0..n {
                    shifted[i * 2 + c] = pts[i * 2 + c] + ENERGY_GRAD_STEP;
                }
                let mut hi = Vec::new();
                field_gradient_norms(net, &shifted, &mut hi);
                for i in 0..n {
                    shifted[i * 2 + c] = pts[i * 2 + c] - ENERGY_GRAD_STEP;
                }
                let mut lo = Vec::new();
                field_gradient_norms(net, &shifted, &mut lo);
                grads.clear();
                grads.extend(
                    hi.iter()
                        .zip(&lo)
                        .map(|(&h, &l)| (h - l) / (2.0 * ENERGY_GRAD_STEP)),
                );
            }
            EnergyField::Trained { net } => {
                let mut raw_grads = Vec::new();
                scalar_eval_grad(net, pts, values, &mut raw_grads);
                let c = match axis {
                    Axis::X => 0,
                    Axis::Y => 1,
                };
                grads.clear();
                grads.extend(values.iter().enumerate().map(|(i, &v)| {
                    if v > 0.0 {
                        raw_grads[i * 2 + c]
                    } else {
                        0.0
                    }
                }));
                for v in values.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }
}

/// `||J||_2` of the color network at each point: the batch is replicated
/// three-fold so one backward sweep with one-hot output seeds yields the
/// full 3x2 Jacobian per point.
fn field_gradient_norms(net: &Mlp<f64>, pts: &[f64], out: &mut Vec<f64>) {
    let n = pts.len() / 2;
    let mut rep = Vec::with_capacity(n * 3 * 2);
    for p in pts.chunks_exact(2) {
        for _ in 0..3 {
            rep.extend_from_slice(p);
        }
    }
    let mut state = BatchState::new();
    net.forward_batch(&rep, &mut state);
    let mut d_out = vec![0.0; n * 3 * 3];
    for i in 0..n {
        for c in 0..3 {
            d_out[(i * 3 + c) * 3 + c] = 1.0;
        }
    }
    let mut input_grads = vec![0.0; n * 3 * 2];
    let mut scratch = BackwardScratch::new();
    net.backward_batch(&rep, &state, &d_out, &mut scratch, None, Some(&mut input_grads));
    out.clear();
    out.extend(input_grads.chunks_exact(6).map(|j| {
        j.iter().map(|&g| g * g).sum::<f64>().sqrt()
    }));
}

/// Discrete per-pixel energy: L2 norm of the six forward pixel differences,
/// clamped at the far edges (the last column/row difference is zero).
pub fn discrete_energy(image: &RasterImage) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let here = image.get(x, y);
            let right = image.get((x + 1).min(w - 1), y);
            let down = image.get(x, (y + 1).min(h - 1));
            let mut s = 0.0;
            for c in 0..3 {
                let dx = right[c] - here[c];
                let dy = down[c] - here[c];
                s += dx * dx + dy * dy;
            }
            out[y * w + x] = s.sqrt();
        }
    }
    out
}

/// Per-pixel cumulative-energy values: what the cumulative network trains
/// against. Values are inclusive prefix sums of [`discrete_energy`] along
/// the axis, divided by the pixel count along that axis so the scale does
/// not depend on resolution.
pub struct CumulativeTargets {
    width: usize,
    height: usize,
    axis: Axis,
    values: Vec<f64>,
}

impl CumulativeTargets {
    /// Wraps an externally built target grid (synthetic profiles, tests).
    pub fn from_values(
        width: usize,
        height: usize,
        axis: Axis,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::config(format!(
                "target grid has {} values for a {}x{} raster",
                values.len(),
                width,
                height
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("target grid contains non-finite values"));
        }
        Ok(CumulativeTargets {
            width,
            height,
            axis,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Builds the cumulative targets of an image along `axis`.
pub fn cumulative_targets(image: &RasterImage, axis: Axis) -> CumulativeTargets {
    let (w, h) = (image.width(), image.height());
    let energy = discrete_energy(image);
    let mut values = vec![0.0; w * h];
    match axis {
        Axis::X => {
            for y in 0..h {
                let mut run = 0.0;
                for x in 0..w {
                    run += energy[y * w + x];
                    values[y * w + x] = run / w as f64;
                }
            }
        }
        Axis::Y => {
            for x in 0..w {
                let mut run = 0.0;
                for y in 0..h {
                    run += energy[y * w + x];
                    values[y * w + x] = run / h as f64;
                }
            }
        }
    }
    CumulativeTargets {
        width: w,
        height: h,
        axis,
        values,
    }
}

/// Cumulative energy along one axis: a trained scalar field whose
/// differences recover the energy mass between two points on a line along
/// the axis.
pub struct CumulativeEnergyField {
    net: Mlp<f64>,
    axis: Axis,
}

impl CumulativeEnergyField {
    /// Architecture: 64 channels, one output, identity head.
    pub fn network_config() -> NetworkConfig {
        NetworkConfig::new(2, 1)
    }

    /// Default schedule: 10000 full-batch iterations, logged in
    /// 100-iteration epochs. Carries weight decay because downstream code
    /// differences this field between points that fall between training
    /// samples, where decay measurably flattens interpolation wiggle.
    pub fn default_schedule() -> FitSchedule {
        FitSchedule::new(100, 100, 1e-3).with_decay(0.1)
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn net(&self) -> &Mlp<f64> {
        &self.net
    }

    /// Field values at a batch of points.
    pub fn eval_batch(&self, pts: &[f64], out: &mut Vec<f64>) {
        scalar_eval(&self.net, pts, out);
    }

    /// Field values plus their derivative along the field's axis.
    pub fn eval_with_axis_grad(&self, pts: &[f64], values: &mut Vec<f64>, grads: &mut Vec<f64>) {
        let mut raw = Vec::new();
        scalar_eval_grad(&self.net, pts, values, &mut raw);
        let c = match self.axis {
            Axis::X => 0,
            Axis::Y => 1,
        };
        grads.clear();
        grads.extend((0..values.len()).map(|i| raw[i * 2 + c]));
    }

    /// Energy mass between two points on a line along the axis:
    /// `|Sigma(q) - Sigma(p)|`.
    pub fn segment_energy(&self, p: [f64; 2], q: [f64; 2]) -> f64 {
        let mut out = Vec::new();
        self.eval_batch(&[p[0], p[1], q[0], q[1]], &mut out);
        (out[1] - out[0]).abs()
    }
}

/// Fits a cumulative-energy field to a target grid by full-batch MSE over
/// all pixel centers.
pub fn train_cumulative_energy(
    targets: &CumulativeTargets,
    schedule: &FitSchedule,
    seed: u64,
) -> Result<CumulativeEnergyField> {
    let points = narrow(&pixel_centers(targets.width, targets.height));
    let values = narrow(&targets.values);
    let config = CumulativeEnergyField::network_config()
        .with_bands(bands_for(targets.width.min(targets.height)));
    let mut net = Mlp::<f32>::init(config, seed)?;
    fit_dataset(&mut net, &points, &values, schedule, "cumulative energy", None)?;
    Ok(CumulativeEnergyField {
        net: net.cast::<f64>(),
        axis: targets.axis,
    })
}

/// Spearman rank correlation between two equally sized samples; ties get
/// averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rank correlation needs paired samples");
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return if da == db { 1.0 } else { 0.0 };
    }
    num / (da * db).sqrt()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // 1-based ranks; tied runs share their average position.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}
