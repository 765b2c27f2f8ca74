//! Tiny per-cell segmentation network with one batch-norm bank per weather.
//!
//! Encoder: `Linear -> BN -> ReLU -> Linear -> BN -> ReLU`, producing the
//! features used for prototypes. Head: `Linear` over the classes. Every
//! BN layer keeps four complete states (affine + running statistics), one per
//! [`Weather`]; a forward pass reads and updates exactly one of them.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypgeom::{Curvature, ExpMapVariant};
use crate::prototype::{self, Geometry, PrototypeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Night,
    Rain,
    Fog,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Clear, Weather::Night, Weather::Rain, Weather::Fog];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Weather> {
        Weather::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::Night => "night",
            Weather::Rain => "rain",
            Weather::Fog => "fog",
        }
    }

    pub fn parse(s: &str) -> Option<Weather> {
        Weather::ALL.into_iter().find(|w| w.name() == s)
    }
}

impl fmt::Display for Weather {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One named array inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// What a segment holds, derived from its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Shared,
    Bank(Weather),
    Curvature,
}

pub const CURVATURE: &str = "curvature";

impl Segment {
    pub fn kind(&self) -> SegmentKind {
        if self.name == CURVATURE {
            return SegmentKind::Curvature;
        }
        let mut parts = self.name.split('.');
        if parts.next() == Some("bn") {
            if let Some(w) = parts.next().and_then(Weather::parse) {
                return SegmentKind::Bank(w);
            }
        }
        SegmentKind::Shared
    }

    /// Running statistics are estimated, not trained.
    pub fn is_statistic(&self) -> bool {
        self.name.ends_with(".mean") || self.name.ends_with(".var")
    }
}

/// Flat, ordered store of named parameter segments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector {
    segments: Vec<Segment>,
    /// Local samples behind these parameters (FedAvg weight).
    pub sample_count: u64,
}

impl ParamVector {
    pub fn new() -> Self {
        ParamVector::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "segment {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.segments.iter().any(|s| s.name == name) {
            return Err(Error::usage(format!("duplicate segment {name}")));
        }
        self.segments.push(Segment { name, shape, data });
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn data(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .map(|s| s.data.as_slice())
            .ok_or_else(|| Error::shape(format!("missing segment {name}")))
    }

    pub fn data_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.segments
            .iter_mut()
            .find(|s| s.name == name)
            .map(|s| s.data.as_mut_slice())
            .ok_or_else(|| Error::shape(format!("missing segment {name}")))
    }

    fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        let seg = self
            .get(name)
            .ok_or_else(|| Error::shape(format!("missing segment {name}")))?;
        match seg.shape[..] {
            [r, c] => ArrayView2::from_shape((r, c), &seg.data)
                .map_err(|e| Error::shape(format!("{name}: {e}"))),
            _ => Err(Error::shape(format!("{name} is not a matrix"))),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same segment names, order and shapes.
    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape("parameter vectors have different layouts"))
        }
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: vec![0.0; s.data.len()],
                })
                .collect(),
            sample_count: 0,
        }
    }

    /// `self += a * other`, segment-wise.
    pub fn add_scaled(&mut self, other: &ParamVector, a: f64) -> Result<()> {
        self.check_layout(other)?;
        for (s, o) in self.segments.iter_mut().zip(&other.segments) {
            s.data.iter_mut().zip(&o.data).for_each(|(x, y)| *x += a * y);
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.segments {
            s.data.iter_mut().for_each(|x| *x *= a);
        }
    }

    /// `sum_i w_i * v_i` over identically laid out vectors.
    pub fn linear_combination(terms: &[(&ParamVector, f64)]) -> Result<ParamVector> {
        let Some((first, _)) = terms.first() else {
            return Err(Error::usage("linear combination of zero vectors"));
        };
        let mut out = first.zeros_like();
        for (v, w) in terms {
            out.add_scaled(v, *w)?;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.segments
            .iter()
            .all(|s| s.data.iter().all(|v| v.is_finite()))
    }

    pub fn curvature(&self) -> Option<f64> {
        self.get(CURVATURE).map(|s| s.data[0])
    }

    pub fn set_curvature(&mut self, gamma: f64) -> Result<()> {
        self.data_mut(CURVATURE)?[0] = gamma;
        Ok(())
    }

    pub fn bank_state(&self, weather: Weather, layer: usize) -> Result<BatchNormState> {
        Ok(BatchNormState {
            scale: self.data(&bn_name(weather, layer, "scale"))?.to_vec(),
            shift: self.data(&bn_name(weather, layer, "shift"))?.to_vec(),
            running_mean: self.data(&bn_name(weather, layer, "mean"))?.to_vec(),
            running_var: self.data(&bn_name(weather, layer, "var"))?.to_vec(),
        })
    }

    /// Copies every BN segment of `from` onto bank `to` (all layers).
    pub fn copy_bank(&mut self, from: Weather, to: Weather) -> Result<()> {
        if from == to {
            return Ok(());
        }
        let prefix_from = format!("bn.{from}.");
        let pairs: Vec<(String, Vec<f64>)> = self
            .segments
            .iter()
            .filter_map(|s| {
                s.name
                    .strip_prefix(&prefix_from)
                    .map(|rest| (format!("bn.{to}.{rest}"), s.data.clone()))
            })
            .collect();
        for (name, data) in pairs {
            self.data_mut(&name)?.copy_from_slice(&data);
        }
        Ok(())
    }

    /// Bitwise equality of every segment belonging to `weather`'s bank.
    pub fn bank_eq(&self, other: &ParamVector, weather: Weather) -> bool {
        let prefix = format!("bn.{weather}.");
        self.segments
            .iter()
            .filter(|s| s.name.starts_with(&prefix))
            .all(|s| {
                other
                    .get(&s.name)
                    .is_some_and(|o| o.data.iter().zip(&s.data).all(|(a, b)| a.to_bits() == b.to_bits()))
            })
    }
}

impl ParamVector {
    /// All values in segment order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.segments.iter().flat_map(|s| s.data.iter().copied()).collect()
    }

    /// A copy of `self` with its values replaced by `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!(
                "{} values for a vector of length {}",
                flat.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for s in &mut out.segments {
            let n = s.data.len();
            s.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }
}

/// Plain SGD with optional momentum. Running statistics and the curvature
/// are never touched; the curvature has its own update rule.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<ParamVector>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        params.check_layout(grad)?;
        if self.momentum > 0.0 {
            let v = self.velocity.get_or_insert_with(|| grad.zeros_like());
            v.scale(self.momentum);
            v.add_scaled(grad, 1.0)?;
        }
        let update = self.velocity.as_ref().unwrap_or(grad);
        for (p, u) in params.segments.iter_mut().zip(&update.segments) {
            if p.is_statistic() || p.kind() == SegmentKind::Curvature {
                continue;
            }
            p.data.iter_mut().zip(&u.data).for_each(|(x, g)| *x -= self.lr * g);
        }
        Ok(())
    }
}

pub fn bn_name(weather: Weather, layer: usize, field: &str) -> String {
    format!("bn.{weather}.l{layer}.{field}")
}

/// A copy of one BN layer of one bank.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub classes: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            input_dim: 8,
            hidden: [32, 16],
            classes: 6,
        }
    }
}

/// Stateless description of the network; parameters live in a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub shape: ModelShape,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// Post-BN, pre-ReLU activations.
    out: Array2<f64>,
    batch_mean: Array1<f64>,
    batch_var_unbiased: Array1<f64>,
}

/// Everything a forward pass produced, kept for the backward pass.
pub struct ForwardPass {
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
    pub weather: Weather,
    pub mode: Mode,
    input: Array2<f64>,
    a1: Array2<f64>,
    bn: [BnCache; 2],
}

impl ForwardPass {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Clustering term added to the self-training loss.
#[derive(Debug, Clone, Copy)]
pub struct ClusteringTerm<'a> {
    pub protos: &'a PrototypeSet,
    pub lambda: f64,
    pub geometry: Geometry,
    pub curvature: Curvature,
    pub variant: ExpMapVariant,
}

/// `CE(logits, targets) + lambda * L_cl(features, targets)`.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    pub targets: &'a [usize],
    pub clustering: Option<ClusteringTerm<'a>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub st: f64,
    pub cl: f64,
    pub total: f64,
    /// Active classes skipped for lack of a prototype.
    pub skipped_classes: usize,
}

pub struct Gradient {
    pub params: ParamVector,
    pub loss: LossBreakdown,
    /// Hyperbolic features of this batch (for prototype updates), if computed.
    pub hyp_features: Option<Array2<f64>>,
}

impl SegNet {
    pub fn new(shape: ModelShape) -> Self {
        SegNet {
            shape,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.shape.hidden[1]
    }

    /// He-initialised weights; every weather bank starts identical.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, gamma0: f64) -> ParamVector {
        let ModelShape {
            input_dim,
            hidden: [h1, h2],
            classes,
        } = self.shape.clone();
        let mut p = ParamVector::new();
        let mut gauss = |n: usize, fan_in: usize| -> Vec<f64> {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let w1 = gauss(h1 * input_dim, input_dim);
        let w2 = gauss(h2 * h1, h1);
        let hw = gauss(classes * h2, 2 * h2);
        p.push("encoder.w1", vec![h1, input_dim], w1).expect("fresh");
        p.push("encoder.w2", vec![h2, h1], w2).expect("fresh");
        p.push("head.w", vec![classes, h2], hw).expect("fresh");
        p.push("head.b", vec![classes], vec![0.0; classes]).expect("fresh");
        for w in Weather::ALL {
            for (layer, width) in [(0, h1), (1, h2)] {
                p.push(bn_name(w, layer, "scale"), vec![width], vec![1.0; width]).expect("fresh");
                p.push(bn_name(w, layer, "shift"), vec![width], vec![0.0; width]).expect("fresh");
                p.push(bn_name(w, layer, "mean"), vec![width], vec![0.0; width]).expect("fresh");
                p.push(bn_name(w, layer, "var"), vec![width], vec![1.0; width]).expect("fresh");
            }
        }
        p.push(CURVATURE, vec![1], vec![gamma0]).expect("fresh");
        p
    }

    /// Pure forward pass; running statistics are not touched.
    /// `input` holds one row per cell.
    pub fn forward_pure(
        &self,
        params: &ParamVector,
        input: ArrayView2<'_, f64>,
        weather: Weather,
        mode: Mode,
    ) -> Result<ForwardPass> {
        if input.nrows() == 0 {
            return Err(Error::usage("forward on an empty batch"));
        }
        if input.ncols() != self.shape.input_dim {
            return Err(Error::shape(format!(
                "input has {} columns, model expects {}",
                input.ncols(),
                self.shape.input_dim
            )));
        }
        let w1 = params.matrix("encoder.w1")?;
        let w2 = params.matrix("encoder.w2")?;
        let hw = params.matrix("head.w")?;
        let hb = params.data("head.b")?;

        let z1 = input.dot(&w1.t());
        let bn0 = self.bn_forward(params, z1, weather, 0, mode)?;
        let a1 = bn0.out.mapv(relu);
        let z2 = a1.dot(&w2.t());
        let bn1 = self.bn_forward(params, z2, weather, 1, mode)?;
        let features = bn1.out.mapv(relu);
        let mut logits = features.dot(&hw.t());
        for mut row in logits.rows_mut() {
            row.iter_mut().zip(hb).for_each(|(l, b)| *l += b);
        }
        Ok(ForwardPass {
            features,
            logits,
            weather,
            mode,
            input: input.to_owned(),
            a1,
            bn: [bn0, bn1],
        })
    }

    /// Forward pass that, in train mode, folds the batch statistics into the
    /// running statistics of `weather`'s bank (and no other).
    pub fn forward(
        &self,
        params: &mut ParamVector,
        input: ArrayView2<'_, f64>,
        weather: Weather,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let pass = self.forward_pure(params, input, weather, mode)?;
        if mode == Mode::Train {
            self.update_running_stats(params, &pass)?;
        }
        Ok(pass)
    }

    pub fn update_running_stats(&self, params: &mut ParamVector, pass: &ForwardPass) -> Result<()> {
        let m = self.bn_momentum;
        for (layer, cache) in pass.bn.iter().enumerate() {
            let mean = params.data_mut(&bn_name(pass.weather, layer, "mean"))?;
            mean.iter_mut()
                .zip(cache.batch_mean.iter())
                .for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
            let var = params.data_mut(&bn_name(pass.weather, layer, "var"))?;
            var.iter_mut()
                .zip(cache.batch_var_unbiased.iter())
                .for_each(|(r, b)| *r = ((1.0 - m) * *r + m * b).max(self.bn_eps));
        }
        Ok(())
    }

    fn bn_forward(
        &self,
        params: &ParamVector,
        z: Array2<f64>,
        weather: Weather,
        layer: usize,
        mode: Mode,
    ) -> Result<BnCache> {
        let n = z.nrows() as f64;
        let scale = params.data(&bn_name(weather, layer, "scale"))?;
        let shift = params.data(&bn_name(weather, layer, "shift"))?;
        let (mean, var_biased, var_unbiased) = match mode {
            Mode::Train => {
                let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
                let var = z.var_axis(Axis(0), 0.0);
                let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
                (mean, var, unbiased)
            }
            Mode::Eval => {
                let mean = Array1::from(params.data(&bn_name(weather, layer, "mean"))?.to_vec());
                let var = Array1::from(params.data(&bn_name(weather, layer, "var"))?.to_vec());
                (mean, var.clone(), var)
            }
        };
        let inv_std = var_biased.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
        let mut xhat = z;
        for mut row in xhat.rows_mut() {
            row.iter_mut()
                .zip(mean.iter().zip(inv_std.iter()))
                .for_each(|(x, (m, s))| *x = (*x - m) * s);
        }
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            row.iter_mut()
                .zip(scale.iter().zip(shift))
                .for_each(|(x, (g, b))| *x = *x * g + b);
        }
        Ok(BnCache {
            xhat,
            inv_std,
            out,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
        })
    }

    /// Loss and gradient for the batch behind `pass`. Only the encoder, the
    /// head, the BN affine parameters of `pass.weather` and the curvature
    /// receive non-zero gradient.
    pub fn backward(&self, params: &ParamVector, pass: &ForwardPass, loss: &LossSpec<'_>) -> Result<Gradient> {
        let n = pass.logits.nrows();
        if loss.targets.len() != n {
            return Err(Error::shape(format!(
                "{} targets for {n} rows",
                loss.targets.len()
            )));
        }
        if let Some(&bad) = loss.targets.iter().find(|&&t| t >= self.shape.classes) {
            return Err(Error::usage(format!("target class {bad} out of range")));
        }
        let (st, d_logits) = cross_entropy(&pass.logits, loss.targets);
        let hw = params.matrix("head.w")?;
        let mut grad = params.zeros_like();

        let mut d_features = d_logits.dot(&hw);
        let mut breakdown = LossBreakdown {
            st,
            ..LossBreakdown::default()
        };
        let mut hyp_features = None;
        let mut d_gamma = 0.0;
        if let Some(term) = loss.clustering {
            let cl = prototype::clustering_loss_grad(
                pass.features.view(),
                loss.targets,
                term.protos,
                term.geometry,
                term.curvature,
                term.variant,
            )?;
            breakdown.cl = cl.loss;
            breakdown.skipped_classes = cl.skipped_classes;
            d_features.scaled_add(term.lambda, &cl.d_features);
            d_gamma = term.lambda * cl.d_gamma;
            hyp_features = cl.embedded;
        }
        breakdown.total = breakdown.st
            + loss.clustering.map_or(0.0, |t| t.lambda) * breakdown.cl;
        if !breakdown.total.is_finite() {
            return Err(Error::Numerical {
                op: "backward",
                detail: format!("non-finite loss {breakdown:?}"),
            });
        }

        // head
        let d_hw = d_logits.t().dot(&pass.features);
        grad.data_mut("head.w")?
            .copy_from_slice(d_hw.as_standard_layout().as_slice().expect("contiguous"));
        let d_hb = d_logits.sum_axis(Axis(0));
        grad.data_mut("head.b")?.copy_from_slice(d_hb.as_slice().expect("contiguous"));

        // encoder layer 2
        let d_b2 = relu_backward(&d_features, &pass.bn[1].out);
        let d_z2 = self.bn_backward(params, &mut grad, d_b2, &pass.bn[1], pass.weather, 1, pass.mode)?;
        let w2 = params.matrix("encoder.w2")?;
        let d_w2 = d_z2.t().dot(&pass.a1);
        grad.data_mut("encoder.w2")?
            .copy_from_slice(d_w2.as_standard_layout().as_slice().expect("contiguous"));
        let d_a1 = d_z2.dot(&w2);

        // encoder layer 1
        let d_b1 = relu_backward(&d_a1, &pass.bn[0].out);
        let d_z1 = self.bn_backward(params, &mut grad, d_b1, &pass.bn[0], pass.weather, 0, pass.mode)?;
        let d_w1 = d_z1.t().dot(&pass.input);
        grad.data_mut("encoder.w1")?
            .copy_from_slice(d_w1.as_standard_layout().as_slice().expect("contiguous"));

        if grad.get(CURVATURE).is_some() {
            grad.set_curvature(d_gamma)?;
        }
        Ok(Gradient {
            params: grad,
            loss: breakdown,
            hyp_features,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        params: &ParamVector,
        grad: &mut ParamVector,
        d_out: Array2<f64>,
        cache: &BnCache,
        weather: Weather,
        layer: usize,
        mode: Mode,
    ) -> Result<Array2<f64>> {
        let scale = params.data(&bn_name(weather, layer, "scale"))?;
        let d_scale = (&d_out * &cache.xhat).sum_axis(Axis(0));
        let d_shift = d_out.sum_axis(Axis(0));
        grad.data_mut(&bn_name(weather, layer, "scale"))?
            .copy_from_slice(d_scale.as_slice().expect("contiguous"));
        grad.data_mut(&bn_name(weather, layer, "shift"))?
            .copy_from_slice(d_shift.as_slice().expect("contiguous"));

        let mut d_xhat = d_out;
        for mut row in d_xhat.rows_mut() {
            row.iter_mut().zip(scale).for_each(|(d, g)| *d *= g);
        }
        match mode {
            Mode::Eval => {
                for mut row in d_xhat.rows_mut() {
                    row.iter_mut().zip(cache.inv_std.iter()).for_each(|(d, s)| *d *= s);
                }
                Ok(d_xhat)
            }
            Mode::Train => {
                let n = d_xhat.nrows() as f64;
                let sum_d = d_xhat.sum_axis(Axis(0));
                let sum_dx = (&d_xhat * &cache.xhat).sum_axis(Axis(0));
                let mut d_z = d_xhat;
                for (mut row, xrow) in d_z.rows_mut().into_iter().zip(cache.xhat.rows()) {
                    for j in 0..row.len() {
                        row[j] = cache.inv_std[j] / n * (n * row[j] - sum_d[j] - xrow[j] * sum_dx[j]);
                    }
                }
                Ok(d_z)
            }
        }
    }

    /// Mean cross-entropy of the model on `(input, targets)`; convenience for tests.
    pub fn loss(
        &self,
        params: &ParamVector,
        input: ArrayView2<'_, f64>,
        weather: Weather,
        mode: Mode,
        loss: &LossSpec<'_>,
    ) -> Result<f64> {
        let pass = self.forward_pure(params, input, weather, mode)?;
        let (st, _) = cross_entropy(&pass.logits, loss.targets);
        let cl = match loss.clustering {
            Some(t) => {
                t.lambda
                    * prototype::clustering_loss(
                        pass.features.view(),
                        loss.targets,
                        t.protos,
                        t.geometry,
                        t.curvature,
                        t.variant,
                    )?
                    .0
            }
            None => 0.0,
        };
        Ok(st + cl)
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn relu_backward(d: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut out = d.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &t) in grad.rows_mut().into_iter().zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
        loss -= row[t].max(f64::MIN_POSITIVE).ln();
        row[t] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }
    (loss / n, grad)
}

/// Stacks per-sample cell matrices into one batch.
pub fn stack_cells(samples: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = samples.iter().map(|s| s.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

pub use classifier::{majority_weather, WeatherClassifier};

mod classifier {
    use super::*;

    const HIDDEN: usize = 16;

    /// Small MLP that predicts the weather of a sample from the mean and
    /// standard deviation of its colour channels (the first three). Trained
    /// once, then frozen.
    #[derive(Debug, Clone, PartialEq)]
    pub struct WeatherClassifier {
        pub params: ParamVector,
        pub frozen: bool,
    }

    pub const COLOUR_CHANNELS: usize = 3;

    fn descriptor(cells: &Array2<f64>) -> Vec<f64> {
        let colour = cells.slice(ndarray::s![.., ..COLOUR_CHANNELS.min(cells.ncols())]);
        let mean = colour.mean_axis(Axis(0)).expect("nonempty sample");
        let std = colour.std_axis(Axis(0), 0.0);
        mean.iter().chain(std.iter()).copied().collect()
    }

    impl WeatherClassifier {
        pub fn init<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Self {
            let d = 2 * input_dim.min(COLOUR_CHANNELS);
            let mut p = ParamVector::new();
            let n1 = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("valid");
            let n2 = Normal::new(0.0, (1.0 / HIDDEN as f64).sqrt()).expect("valid");
            p.push("clf.norm_mean", vec![d], vec![0.0; d]).expect("fresh");
            p.push("clf.norm_std", vec![d], vec![1.0; d]).expect("fresh");
            p.push("clf.w1", vec![HIDDEN, d], (0..HIDDEN * d).map(|_| n1.sample(rng)).collect())
                .expect("fresh");
            p.push("clf.b1", vec![HIDDEN], vec![0.0; HIDDEN]).expect("fresh");
            p.push("clf.w2", vec![4, HIDDEN], (0..4 * HIDDEN).map(|_| n2.sample(rng)).collect())
                .expect("fresh");
            p.push("clf.b2", vec![4], vec![0.0; 4]).expect("fresh");
            WeatherClassifier { params: p, frozen: false }
        }

        pub fn from_params(params: ParamVector) -> Result<Self> {
            for name in ["clf.norm_mean", "clf.norm_std", "clf.w1", "clf.b1", "clf.w2", "clf.b2"] {
                params.data(name)?;
            }
            Ok(WeatherClassifier { params, frozen: true })
        }

        fn inputs(&self, samples: &[&Array2<f64>]) -> Result<Array2<f64>> {
            let mean = self.params.data("clf.norm_mean")?;
            let std = self.params.data("clf.norm_std")?;
            let d = mean.len();
            let mut x = Array2::zeros((samples.len(), d));
            for (mut row, s) in x.rows_mut().into_iter().zip(samples) {
                let desc = descriptor(s);
                if desc.len() != d {
                    return Err(Error::shape("sample width does not match weather classifier"));
                }
                for j in 0..d {
                    row[j] = (desc[j] - mean[j]) / std[j];
                }
            }
            Ok(x)
        }

        /// Fits the descriptor standardisation to a training set.
        pub fn fit_normalizer(&mut self, samples: &[&Array2<f64>]) -> Result<()> {
            let descs: Vec<Vec<f64>> = samples.iter().map(|s| descriptor(s)).collect();
            let d = self.params.data("clf.norm_mean")?.len();
            let n = descs.len().max(1) as f64;
            let mut mean = vec![0.0; d];
            for v in &descs {
                mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n);
            }
            let mut var = vec![0.0; d];
            for v in &descs {
                var.iter_mut().zip(v.iter().zip(&mean)).for_each(|(s, (x, m))| *s += (x - m).powi(2) / n);
            }
            self.params.data_mut("clf.norm_mean")?.copy_from_slice(&mean);
            let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
            self.params.data_mut("clf.norm_std")?.copy_from_slice(&std);
            Ok(())
        }

        fn logits_and_hidden(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
            let w1 = self.params.matrix("clf.w1")?;
            let b1 = self.params.data("clf.b1")?;
            let w2 = self.params.matrix("clf.w2")?;
            let b2 = self.params.data("clf.b2")?;
            let mut h = x.dot(&w1.t());
            for mut row in h.rows_mut() {
                row.iter_mut().zip(b1).for_each(|(v, b)| *v = (*v + b).max(0.0));
            }
            let mut out = h.dot(&w2.t());
            for mut row in out.rows_mut() {
                row.iter_mut().zip(b2).for_each(|(v, b)| *v += b);
            }
            Ok((out, h))
        }

        pub fn logits(&self, samples: &[&Array2<f64>]) -> Result<Array2<f64>> {
            let x = self.inputs(samples)?;
            Ok(self.logits_and_hidden(&x)?.0)
        }

        /// Per-sample argmax weather.
        pub fn classify(&self, samples: &[&Array2<f64>]) -> Result<Vec<Weather>> {
            if samples.is_empty() {
                return Ok(Vec::new());
            }
            let logits = self.logits(samples)?;
            Ok(argmax_rows(&logits)
                .into_iter()
                .map(|i| Weather::from_index(i).expect("4 outputs"))
                .collect())
        }

        /// One SGD step of cross-entropy on `(samples, labels)`; returns the loss.
        pub fn train_step(&mut self, samples: &[&Array2<f64>], labels: &[Weather], lr: f64) -> Result<f64> {
            if self.frozen {
                return Err(Error::usage("weather classifier is frozen"));
            }
            let x = self.inputs(samples)?;
            let (logits, h) = self.logits_and_hidden(&x)?;
            let targets: Vec<usize> = labels.iter().map(|w| w.index()).collect();
            let (loss, d_logits) = cross_entropy(&logits, &targets);
            let w2 = self.params.matrix("clf.w2")?.to_owned();
            let d_w2 = d_logits.t().dot(&h);
            let d_b2 = d_logits.sum_axis(Axis(0));
            let mut d_h = d_logits.dot(&w2);
            d_h.zip_mut_with(&h, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            let d_w1 = d_h.t().dot(&x);
            let d_b1 = d_h.sum_axis(Axis(0));
            for (name, g) in [
                ("clf.w1", d_w1.iter().copied().collect::<Vec<_>>()),
                ("clf.b1", d_b1.to_vec()),
                ("clf.w2", d_w2.iter().copied().collect()),
                ("clf.b2", d_b2.to_vec()),
            ] {
                self.params
                    .data_mut(name)?
                    .iter_mut()
                    .zip(g)
                    .for_each(|(p, g)| *p -= lr * g);
            }
            Ok(loss)
        }

        pub fn freeze(&mut self) {
            self.frozen = true;
        }
    }

    /// Most frequent weather; ties go to the earliest variant.
    pub fn majority_weather(preds: &[Weather]) -> Weather {
        let mut counts = [0usize; 4];
        for w in preds {
            counts[w.index()] += 1;
        }
        let mut best = 0;
        for i in 1..4 {
            if counts[i] > counts[best] {
                best = i;
            }
        }
        Weather::ALL[best]
    }
}
