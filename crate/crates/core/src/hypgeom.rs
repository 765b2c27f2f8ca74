//! Poincaré-ball geometry with curvature `-gamma`.
//!
//! The ball is `{x : gamma * |x|^2 < 1}`. Every operation that returns a
//! point projects it back inside the ball, so `gamma * |p|^2 < 1 - 1e-7`
//! holds for everything this module hands out.
//!
//! Gradients are closed-form vector-Jacobian products; [`grad_check`]
//! compares them against central finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin kept between projected points and the ball boundary.
pub const BALL_EPS: f64 = 1e-7;
/// Norms below this are treated as zero before dividing by them.
pub const NORM_EPS: f64 = 1e-12;
/// Lower bound on a learned curvature.
pub const GAMMA_FLOOR: f64 = 1e-4;

const ARTANH_MAX: f64 = 1.0 - f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    gamma: f64,
    learnable: bool,
}

impl Curvature {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Numerical {
                op: "curvature",
                detail: format!("gamma must be positive and finite, got {gamma}"),
            });
        }
        Ok(Curvature {
            gamma,
            learnable: false,
        })
    }

    pub fn learnable(gamma: f64) -> Result<Self> {
        Ok(Curvature {
            learnable: true,
            ..Curvature::new(gamma)?
        })
    }

    /// Builds a curvature from an unconstrained value, clamping at [`GAMMA_FLOOR`].
    pub fn clamped(gamma: f64, learnable: bool) -> Self {
        let gamma = if gamma.is_nan() {
            GAMMA_FLOOR
        } else {
            gamma.max(GAMMA_FLOOR)
        };
        Curvature { gamma, learnable }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    /// Euclidean radius of the ball, `1/sqrt(gamma)`.
    pub fn radius(&self) -> f64 {
        1.0 / self.gamma.sqrt()
    }

    pub fn with_learnable(self, learnable: bool) -> Self {
        Curvature { learnable, ..self }
    }
}

/// Which exponential map turns a tangent vector into a ball point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpMapVariant {
    /// `tanh(sqrt(g)|v| / (1 - g|v|^2))` scaling; singular at `g|v|^2 = 1`.
    #[default]
    Printed,
    /// Conventional `tanh(sqrt(g) * lambda_x * |v| / 2)` scaling.
    Standard,
}

/// A point strictly inside the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincarePoint(Vec<f64>);

impl PoincarePoint {
    /// Wraps `coords`, rejecting points that are not strictly inside the ball.
    pub fn new(coords: Vec<f64>, c: Curvature) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                op: "poincare_point",
                detail: "non-finite coordinate".into(),
            });
        }
        if c.gamma * norm_sq(&coords) >= 1.0 {
            return Err(Error::Numerical {
                op: "poincare_point",
                detail: format!(
                    "point with squared norm {} lies outside the ball of radius {}",
                    norm_sq(&coords),
                    c.radius()
                ),
            });
        }
        Ok(PoincarePoint(coords))
    }

    /// Wraps `coords` after radially pulling it inside the ball if needed.
    pub fn projected(mut coords: Vec<f64>, c: Curvature) -> Self {
        project_in_place(&mut coords, c.gamma);
        PoincarePoint(coords)
    }

    pub fn origin(dim: usize) -> Self {
        PoincarePoint(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn neg(&self) -> Self {
        PoincarePoint(self.0.iter().map(|v| -v).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                op: "tangent_vector",
                detail: "non-finite entry".into(),
            });
        }
        Ok(TangentVector(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

pub fn mobius_add(x: &PoincarePoint, y: &PoincarePoint, c: Curvature) -> Result<PoincarePoint> {
    check_dims("mobius_add", x.dim(), y.dim())?;
    raw::mobius_add(&x.0, &y.0, c.gamma).map(PoincarePoint)
}

/// `r (x) x`. The origin maps to itself for every `r`.
pub fn mobius_scalar_mul(r: f64, x: &PoincarePoint, c: Curvature) -> PoincarePoint {
    PoincarePoint(raw::mobius_scalar_mul(r, &x.0, c.gamma))
}

pub fn distance(x: &PoincarePoint, y: &PoincarePoint, c: Curvature) -> f64 {
    debug_assert_eq!(x.dim(), y.dim());
    raw::distance(&x.0, &y.0, c.gamma)
}

pub fn exp_map(
    x: &PoincarePoint,
    v: &TangentVector,
    c: Curvature,
    variant: ExpMapVariant,
) -> Result<PoincarePoint> {
    check_dims("exp_map", x.dim(), v.0.len())?;
    Ok(PoincarePoint(raw::exp_map(&x.0, &v.0, c.gamma, variant)))
}

pub fn exp_map_printed(x: &PoincarePoint, v: &TangentVector, c: Curvature) -> Result<PoincarePoint> {
    exp_map(x, v, c, ExpMapVariant::Printed)
}

pub fn exp_map_std(x: &PoincarePoint, v: &TangentVector, c: Curvature) -> Result<PoincarePoint> {
    exp_map(x, v, c, ExpMapVariant::Standard)
}

/// Embeds a Euclidean feature vector through the exponential map at the origin.
pub fn euclid_to_hyp(f: &[f64], c: Curvature, variant: ExpMapVariant) -> PoincarePoint {
    PoincarePoint(raw::euclid_to_hyp(f, c.gamma, variant))
}

/// Gyro-midpoint `1/2 (x) (sum w lambda_f f / sum w (lambda_f - 1))` with the
/// conformal factor `lambda_f = 2 / (1 - gamma |f|^2)`.
pub fn hyperbolic_midpoint(
    points: &[PoincarePoint],
    weights: Option<&[f64]>,
    c: Curvature,
) -> Result<PoincarePoint> {
    let refs: Vec<&[f64]> = points.iter().map(|p| p.coords()).collect();
    raw::midpoint(&refs, weights, c.gamma).map(PoincarePoint)
}

fn check_dims(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: dimensions {a} and {b} differ")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn ball_limit(gamma: f64) -> f64 {
    (1.0 - BALL_EPS) / gamma.sqrt()
}

/// Returns true when the point had to be pulled back inside the ball.
fn project_in_place(p: &mut [f64], gamma: f64) -> bool {
    let n2 = norm_sq(p);
    if gamma * n2 >= 1.0 - BALL_EPS {
        let scale = ball_limit(gamma) / n2.sqrt();
        p.iter_mut().for_each(|v| *v *= scale);
        true
    } else {
        false
    }
}

fn artanh_clamped(arg: f64) -> f64 {
    if arg >= 1.0 {
        log::warn!("artanh argument {arg} clamped below 1");
        ARTANH_MAX.atanh()
    } else {
        arg.atanh()
    }
}

fn sech2(a: f64) -> f64 {
    if a.abs() > 40.0 {
        0.0
    } else {
        let c = a.cosh();
        1.0 / (c * c)
    }
}

/// Slice-level versions of the ball operations, used on hot paths.
pub mod raw {
    use super::*;

    fn mobius_parts(x: &[f64], y: &[f64], gamma: f64) -> (f64, f64, f64) {
        let xy = dot(x, y);
        let xx = norm_sq(x);
        let yy = norm_sq(y);
        let a = 1.0 + 2.0 * gamma * xy + gamma * yy;
        let b = 1.0 - gamma * xx;
        let d = 1.0 + 2.0 * gamma * xy + gamma * gamma * xx * yy;
        (a, b, d)
    }

    fn mobius_unprojected(x: &[f64], y: &[f64], gamma: f64) -> (Vec<f64>, f64) {
        let (a, b, d) = mobius_parts(x, y, gamma);
        let z = x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / d).collect();
        (z, d)
    }

    pub fn mobius_add(x: &[f64], y: &[f64], gamma: f64) -> Result<Vec<f64>> {
        let (mut z, d) = mobius_unprojected(x, y, gamma);
        if d.is_nan() || d.abs() < NORM_EPS {
            return Err(Error::Numerical {
                op: "mobius_add",
                detail: format!("denominator {d:e} is degenerate"),
            });
        }
        project_in_place(&mut z, gamma);
        Ok(z)
    }

    pub fn mobius_scalar_mul(r: f64, x: &[f64], gamma: f64) -> Vec<f64> {
        let n = norm_sq(x).sqrt();
        if n < NORM_EPS {
            return vec![0.0; x.len()];
        }
        let s = gamma.sqrt();
        let k = (r * artanh_clamped(s * n)).tanh() / (s * n);
        let mut z: Vec<f64> = x.iter().map(|v| k * v).collect();
        project_in_place(&mut z, gamma);
        z
    }

    pub fn distance(x: &[f64], y: &[f64], gamma: f64) -> f64 {
        if x == y {
            return 0.0;
        }
        let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
        let (u, d) = mobius_unprojected(&neg_x, y, gamma);
        let s = gamma.sqrt();
        let un = norm_sq(&u).sqrt();
        if d > 0.0 && un.is_finite() {
            2.0 / s * artanh_clamped(s * un)
        } else {
            // Both points hug the boundary; fall back to the arcosh form.
            acosh_one_plus(distance_delta(x, y, gamma)) / s
        }
    }

    pub fn exp_map(x: &[f64], v: &[f64], gamma: f64, variant: ExpMapVariant) -> Vec<f64> {
        let t = norm_sq(v).sqrt();
        if t < NORM_EPS {
            return x.to_vec();
        }
        let s = gamma.sqrt();
        let a = exp_arg(x, t, gamma, variant).value;
        let k = a.tanh() / (s * t);
        let u: Vec<f64> = v.iter().map(|vi| k * vi).collect();
        let (mut z, _) = mobius_unprojected(x, &u, gamma);
        project_in_place(&mut z, gamma);
        z
    }

    pub fn euclid_to_hyp(f: &[f64], gamma: f64, variant: ExpMapVariant) -> Vec<f64> {
        exp_map(&vec![0.0; f.len()], f, gamma, variant)
    }

    pub fn midpoint(points: &[&[f64]], weights: Option<&[f64]>, gamma: f64) -> Result<Vec<f64>> {
        let Some(first) = points.first() else {
            return Err(Error::usage("hyperbolic_midpoint of an empty point set"));
        };
        if let Some(w) = weights {
            if w.len() != points.len() {
                return Err(Error::shape(format!(
                    "{} weights for {} points",
                    w.len(),
                    points.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::usage("midpoint weights must be non-negative"));
            }
        }
        let dim = first.len();
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for (i, p) in points.iter().enumerate() {
            check_dims("hyperbolic_midpoint", dim, p.len())?;
            let w = weights.map_or(1.0, |w| w[i]);
            let lambda = 2.0 / (1.0 - gamma * norm_sq(p));
            num.iter_mut().zip(p.iter()).for_each(|(n, v)| *n += w * lambda * v);
            den += w * (lambda - 1.0);
        }
        if den < NORM_EPS {
            return Err(Error::Numerical {
                op: "hyperbolic_midpoint",
                detail: "weights sum to zero".into(),
            });
        }
        num.iter_mut().for_each(|v| *v /= den);
        Ok(mobius_scalar_mul(0.5, &num, gamma))
    }

    pub fn project(p: &mut [f64], gamma: f64) -> bool {
        project_in_place(p, gamma)
    }
}

/// `ln(1 + delta + sqrt(delta (2 + delta)))`, accurate for small `delta`.
fn acosh_one_plus(delta: f64) -> f64 {
    (delta + (delta * (2.0 + delta)).sqrt()).ln_1p()
}

/// `2 gamma |x-y|^2 / ((1 - gamma|x|^2)(1 - gamma|y|^2))`.
fn distance_delta(x: &[f64], y: &[f64], gamma: f64) -> f64 {
    let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let a = (1.0 - gamma * norm_sq(x)).max(f64::MIN_POSITIVE);
    let b = (1.0 - gamma * norm_sq(y)).max(f64::MIN_POSITIVE);
    2.0 * gamma * s / (a * b)
}

/// The tanh argument of the exponential map and its partials.
struct ExpArg {
    value: f64,
    d_t: f64,
    d_gamma: f64,
    /// Scalar multiplying `x` in the gradient w.r.t. the base point.
    d_x_coef: f64,
}

fn exp_arg(x: &[f64], t: f64, gamma: f64, variant: ExpMapVariant) -> ExpArg {
    let s = gamma.sqrt();
    match variant {
        ExpMapVariant::Printed => {
            let den = 1.0 - gamma * t * t;
            let value = s * t / den;
            if !value.is_finite() {
                return ExpArg {
                    value: f64::INFINITY,
                    d_t: 0.0,
                    d_gamma: 0.0,
                    d_x_coef: 0.0,
                };
            }
            ExpArg {
                value,
                d_t: s * (1.0 + gamma * t * t) / (den * den),
                d_gamma: t / (2.0 * s * den) + s * t * t * t / (den * den),
                d_x_coef: 0.0,
            }
        }
        ExpMapVariant::Standard => {
            let xx = norm_sq(x);
            let b = 1.0 - gamma * xx;
            ExpArg {
                value: s * t / b,
                d_t: s / b,
                d_gamma: t / (2.0 * s * b) + s * t * xx / (b * b),
                d_x_coef: 2.0 * s * t * gamma / (b * b),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobiusAddGrad {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub gamma: f64,
}

/// Pulls `upstream` (dL/dz for `z = x (+) y`) back to `x`, `y` and `gamma`.
/// The safety projection is ignored; it only acts within `BALL_EPS` of the boundary.
pub fn mobius_add_vjp(x: &[f64], y: &[f64], gamma: f64, upstream: &[f64]) -> MobiusAddGrad {
    let xy = dot(x, y);
    let xx = norm_sq(x);
    let yy = norm_sq(y);
    let a = 1.0 + 2.0 * gamma * xy + gamma * yy;
    let b = 1.0 - gamma * xx;
    let d = 1.0 + 2.0 * gamma * xy + gamma * gamma * xx * yy;
    let g_n: Vec<f64> = upstream.iter().map(|g| g / d).collect();
    let n_dot_g: f64 = x
        .iter()
        .zip(y)
        .zip(&g_n)
        .map(|((xi, yi), gi)| (a * xi + b * yi) * gi)
        .sum();
    // dL/dD = -(g . N) / D^2 = -(g_n . N) / D
    let g_d = -n_dot_g / d;
    let gx_dot = dot(&g_n, x);
    let gy_dot = dot(&g_n, y);

    let gx = (0..x.len())
        .map(|i| {
            a * g_n[i] + 2.0 * gamma * (gx_dot * y[i] - gy_dot * x[i])
                + g_d * (2.0 * gamma * y[i] + 2.0 * gamma * gamma * yy * x[i])
        })
        .collect();
    let gy = (0..x.len())
        .map(|i| {
            b * g_n[i]
                + gx_dot * 2.0 * gamma * (x[i] + y[i])
                + g_d * (2.0 * gamma * x[i] + 2.0 * gamma * gamma * xx * y[i])
        })
        .collect();
    let g_gamma =
        gx_dot * (2.0 * xy + yy) - gy_dot * xx + g_d * (2.0 * xy + 2.0 * gamma * xx * yy);
    MobiusAddGrad {
        x: gx,
        y: gy,
        gamma: g_gamma,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGrad {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub gamma: f64,
}

/// Partials of `distance(x, y)` using the equivalent arcosh form
/// `acosh(1 + 2g|x-y|^2 / ((1-g|x|^2)(1-g|y|^2))) / sqrt(g)`.
/// At `x == y` the (sub)gradient is taken as zero.
pub fn distance_grad(x: &[f64], y: &[f64], gamma: f64) -> DistanceGrad {
    let n = x.len();
    let s = gamma.sqrt();
    let diff_sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let ax = 1.0 - gamma * norm_sq(x);
    let by = 1.0 - gamma * norm_sq(y);
    let delta = 2.0 * gamma * diff_sq / (ax * by);
    if delta.is_nan() || delta <= 1e-300 {
        return DistanceGrad {
            x: vec![0.0; n],
            y: vec![0.0; n],
            gamma: 0.0,
        };
    }
    let dd_ddelta = 1.0 / (s * (delta * (2.0 + delta)).sqrt());
    let k = dd_ddelta * 4.0 * gamma / (ax * by);
    let gx = (0..n)
        .map(|i| k * ((x[i] - y[i]) + gamma * diff_sq * x[i] / ax))
        .collect();
    let gy = (0..n)
        .map(|i| k * ((y[i] - x[i]) + gamma * diff_sq * y[i] / by))
        .collect();
    let ddelta_dgamma =
        delta / gamma * (1.0 + gamma * norm_sq(x) / ax + gamma * norm_sq(y) / by);
    let g_gamma = -acosh_one_plus(delta) / (2.0 * s * gamma) + dd_ddelta * ddelta_dgamma;
    DistanceGrad {
        x: gx,
        y: gy,
        gamma: g_gamma,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpMapGrad {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub gamma: f64,
}

/// Pulls `upstream` back through `exp_map(x, v)` including the safety projection.
pub fn exp_map_vjp(
    x: &[f64],
    v: &[f64],
    gamma: f64,
    variant: ExpMapVariant,
    upstream: &[f64],
) -> ExpMapGrad {
    let n = x.len();
    let t = norm_sq(v).sqrt();
    if t < NORM_EPS {
        return ExpMapGrad {
            x: upstream.to_vec(),
            v: vec![0.0; n],
            gamma: 0.0,
        };
    }
    let s = gamma.sqrt();
    let arg = exp_arg(x, t, gamma, variant);
    let th = arg.value.tanh();
    let phi = th / (s * t);
    let u: Vec<f64> = v.iter().map(|vi| phi * vi).collect();

    let z = mobius_formula(x, &u, gamma);
    let (g_z, g_gamma_proj) = project_vjp(&z, gamma, upstream);

    let add = mobius_add_vjp(x, &u, gamma, &g_z);
    let gu_dot_v = dot(&add.y, v);
    let sech = sech2(arg.value);
    let dphi_dt = sech * arg.d_t / (s * t) - th / (s * t * t);
    let dphi_dgamma = sech * arg.d_gamma / (s * t) - th / (2.0 * s * s * s * t);
    let dphi_dx_coef = sech * arg.d_x_coef / (s * t);

    let gv = (0..n)
        .map(|i| phi * add.y[i] + gu_dot_v * dphi_dt * v[i] / t)
        .collect();
    let gx = (0..n)
        .map(|i| add.x[i] + gu_dot_v * dphi_dx_coef * x[i])
        .collect();
    ExpMapGrad {
        x: gx,
        v: gv,
        gamma: add.gamma + gu_dot_v * dphi_dgamma + g_gamma_proj,
    }
}

/// Gradient of `euclid_to_hyp(f)` w.r.t. `f` and `gamma`.
pub fn euclid_to_hyp_vjp(
    f: &[f64],
    gamma: f64,
    variant: ExpMapVariant,
    upstream: &[f64],
) -> (Vec<f64>, f64) {
    let g = exp_map_vjp(&vec![0.0; f.len()], f, gamma, variant, upstream);
    (g.v, g.gamma)
}

/// Pullback through the safety projection applied to unprojected point `q`.
fn project_vjp(q: &[f64], gamma: f64, upstream: &[f64]) -> (Vec<f64>, f64) {
    let n2 = norm_sq(q);
    if gamma * n2 < 1.0 - BALL_EPS {
        return (upstream.to_vec(), 0.0);
    }
    let n = n2.sqrt();
    let rho = ball_limit(gamma);
    let g_dot_hat = dot(upstream, q) / n;
    let gq = upstream
        .iter()
        .zip(q)
        .map(|(g, qi)| rho / n * (g - g_dot_hat * qi / n))
        .collect();
    (gq, -g_dot_hat * rho / (2.0 * gamma))
}

/// Operations covered by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOp {
    Distance,
    MobiusAdd,
    ExpMap(ExpMapVariant),
    EuclidToHyp(ExpMapVariant),
}

/// Inputs for [`grad_check`]. `y` is the second point for distance and
/// Möbius addition, the tangent vector for the exponential map, and unused
/// for `EuclidToHyp` (where `x` is the feature). `upstream` weights the
/// output of vector-valued operations.
#[derive(Debug, Clone)]
pub struct GradInputs {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub gamma: f64,
    pub upstream: Vec<f64>,
}

/// Componentwise relative error `|a - n| / max(|a|, |n|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut probe = at.to_vec();
    (0..at.len())
        .map(|i| {
            probe[i] = at[i] + h;
            let up = f(&probe);
            probe[i] = at[i] - h;
            let down = f(&probe);
            probe[i] = at[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max relative error between the analytic partials of `op` (w.r.t. every
/// input coordinate and gamma) and central differences with step `h`.
pub fn grad_check(op: GradOp, inputs: &GradInputs, h: f64) -> Result<f64> {
    let n = inputs.x.len();
    let uses_y = !matches!(op, GradOp::EuclidToHyp(_));
    let m = if uses_y { inputs.y.len() } else { 0 };
    let mut flat = inputs.x.clone();
    if uses_y {
        flat.extend_from_slice(&inputs.y);
    }
    flat.push(inputs.gamma);

    let upstream = &inputs.upstream;
    let scalar = |p: &[f64]| -> f64 {
        let (x, y, g) = (&p[..n], &p[n..n + m], p[n + m]);
        match op {
            GradOp::Distance => raw::distance(x, y, g),
            GradOp::MobiusAdd => dot(&mobius_formula(x, y, g), upstream),
            GradOp::ExpMap(var) => dot(&raw::exp_map(x, y, g, var), upstream),
            GradOp::EuclidToHyp(var) => dot(&raw::euclid_to_hyp(x, g, var), upstream),
        }
    };

    let (x, y, g) = (&inputs.x[..], &inputs.y[..], inputs.gamma);
    let mut analytic = match op {
        GradOp::Distance => {
            let d = distance_grad(x, y, g);
            [d.x, d.y, vec![d.gamma]].concat()
        }
        GradOp::MobiusAdd => {
            let d = mobius_add_vjp(x, y, g, upstream);
            [d.x, d.y, vec![d.gamma]].concat()
        }
        GradOp::ExpMap(var) => {
            let d = exp_map_vjp(x, y, g, var, upstream);
            [d.x, d.v, vec![d.gamma]].concat()
        }
        GradOp::EuclidToHyp(var) => {
            let (gf, gg) = euclid_to_hyp_vjp(x, g, var, upstream);
            [gf, vec![gg]].concat()
        }
    };
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            op: "grad_check",
            detail: format!("non-finite analytic gradient for {op:?}"),
        });
    }
    let numeric = central_diff(scalar, &flat, h);
    analytic.truncate(numeric.len());
    Ok(max_rel_error(&analytic, &numeric))
}

/// Möbius addition without the safety projection.
fn mobius_formula(x: &[f64], y: &[f64], gamma: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let xx = norm_sq(x);
    let yy = norm_sq(y);
    let a = 1.0 + 2.0 * gamma * xy + gamma * yy;
    let b = 1.0 - gamma * xx;
    let d = 1.0 + 2.0 * gamma * xy + gamma * gamma * xx * yy;
    x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / d).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(g: f64) -> Curvature {
        Curvature::new(g).unwrap()
    }

    fn pt(v: &[f64], g: f64) -> PoincarePoint {
        PoincarePoint::new(v.to_vec(), c(g)).unwrap()
    }

    /// Uniform point in the ball shrunk to `frac` of its radius.
    fn random_point(rng: &mut ChaCha8Rng, dim: usize, gamma: f64, frac: f64) -> Vec<f64> {
        loop {
            let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if norm_sq(&p) < 1.0 {
                return p.iter().map(|v| v * frac / gamma.sqrt()).collect();
            }
        }
    }

    #[test]
    fn mobius_add_identity_and_inverse() {
        let p = pt(&[0.3, -0.2, 0.1], 1.0);
        let zero = PoincarePoint::origin(3);
        assert_eq!(mobius_add(&zero, &p, c(1.0)).unwrap(), p);
        let back = mobius_add(&p.neg(), &p, c(1.0)).unwrap();
        assert!(norm_sq(back.coords()).sqrt() < 1e-9);
    }

    #[test]
    fn mobius_add_collinear_value() {
        let z = mobius_add(&pt(&[0.3, 0.0], 1.0), &pt(&[0.4, 0.0], 1.0), c(1.0)).unwrap();
        assert_abs_diff_eq!(z.coords()[0], 0.625, epsilon = 1e-15);
        assert_eq!(z.coords()[1], 0.0);
    }

    #[test]
    fn mobius_add_is_not_required_to_commute() {
        // Only checks both orders stay in the ball; symmetry is not a property.
        let x = pt(&[0.5, 0.1], 1.0);
        let y = pt(&[-0.2, 0.6], 1.0);
        for z in [
            mobius_add(&x, &y, c(1.0)).unwrap(),
            mobius_add(&y, &x, c(1.0)).unwrap(),
        ] {
            assert!(norm_sq(z.coords()) < 1.0 - BALL_EPS);
        }
    }

    #[test]
    fn mobius_add_degenerate_denominator_errors() {
        // Points right at the projection boundary pointing the same way.
        let g = 1.0;
        let r = ball_limit(g);
        let x = vec![-r, 0.0];
        let y = vec![r, 0.0];
        assert!(matches!(
            raw::mobius_add(&x, &y, g),
            Err(Error::Numerical { op: "mobius_add", .. })
        ));
    }

    #[test]
    fn scalar_mul_cases() {
        let x = pt(&[0.3, 0.0], 1.0);
        let one = mobius_scalar_mul(1.0, &x, c(1.0));
        assert_abs_diff_eq!(one.coords()[0], 0.3, epsilon = 1e-9);
        let zero = mobius_scalar_mul(0.0, &x, c(1.0));
        assert_eq!(zero.coords(), &[0.0, 0.0]);
        let two = mobius_scalar_mul(2.0, &x, c(1.0));
        assert_abs_diff_eq!(two.coords()[0], 0.550_458_715_596_330_3, epsilon = 1e-14);
        let origin = mobius_scalar_mul(3.0, &PoincarePoint::origin(2), c(1.0));
        assert_eq!(origin.coords(), &[0.0, 0.0]);
    }

    #[test]
    fn distance_basics() {
        let x = pt(&[0.1, 0.2], 0.5);
        assert_eq!(distance(&x, &x, c(0.5)), 0.0);
        let y = pt(&[-0.4, 0.3], 0.5);
        assert_abs_diff_eq!(
            distance(&x, &y, c(0.5)),
            distance(&y, &x, c(0.5)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn distance_flat_limit() {
        let x = pt(&[0.1, 0.0], 1e-8);
        let y = pt(&[0.4, 0.0], 1e-8);
        assert_abs_diff_eq!(distance(&x, &y, c(1e-8)), 0.6, epsilon = 1e-4);
    }

    #[test]
    fn distance_agrees_with_arcosh_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = rng.random_range(0.01..2.0);
            let x = random_point(&mut rng, 4, g, 0.95);
            let y = random_point(&mut rng, 4, g, 0.95);
            let arcosh = acosh_one_plus(distance_delta(&x, &y, g)) / g.sqrt();
            let d = raw::distance(&x, &y, g);
            assert!((d - arcosh).abs() < 1e-9 * (1.0 + d), "{d} vs {arcosh}");
        }
    }

    #[test]
    fn exp_map_zero_vector_is_identity() {
        let x = pt(&[0.2, -0.1], 1.0);
        let v = TangentVector::new(vec![0.0, 0.0]).unwrap();
        for var in [ExpMapVariant::Printed, ExpMapVariant::Standard] {
            assert_eq!(exp_map(&x, &v, c(1.0), var).unwrap(), x);
        }
    }

    #[test]
    fn exp_map_at_origin_values() {
        let o = PoincarePoint::origin(2);
        let v = TangentVector::new(vec![0.1, 0.0]).unwrap();
        let printed = exp_map_printed(&o, &v, c(1.0)).unwrap();
        let standard = exp_map_std(&o, &v, c(1.0)).unwrap();
        assert_abs_diff_eq!(printed.coords()[0], 0.100_667_960_574_004_06, epsilon = 1e-15);
        assert_abs_diff_eq!(standard.coords()[0], 0.099_667_994_624_955_82, epsilon = 1e-15);
    }

    #[test]
    fn euclid_to_hyp_values() {
        let p = euclid_to_hyp(&[1.0, 0.0], c(0.1), ExpMapVariant::Printed);
        assert_abs_diff_eq!(p.coords()[0], 1.067_536_927_440_514, epsilon = 1e-14);
        let s = euclid_to_hyp(&[1.0, 0.0], c(0.1), ExpMapVariant::Standard);
        assert_abs_diff_eq!(s.coords()[0], 0.967_948_133_514_745_1, epsilon = 1e-14);
        assert_eq!(
            euclid_to_hyp(&[0.0, 0.0], c(0.1), ExpMapVariant::Printed).coords(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn euclid_to_hyp_stays_in_ball_for_large_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let g = rng.random_range(0.01..2.0);
            let scale = rng.random_range(0.0..1e3);
            let f: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            for var in [ExpMapVariant::Printed, ExpMapVariant::Standard] {
                let p = euclid_to_hyp(&f, c(g), var);
                assert!(g * norm_sq(p.coords()) < 1.0 - BALL_EPS + 1e-15);
            }
        }
    }

    #[test]
    fn exp_map_distance_grows_with_tangent_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = rng.random_range(0.1..2.0);
            let x = random_point(&mut rng, 3, g, 0.6);
            let dir: Vec<f64> = random_point(&mut rng, 3, 1.0, 1.0);
            let dn = norm_sq(&dir).sqrt();
            for var in [ExpMapVariant::Printed, ExpMapVariant::Standard] {
                // The printed map is monotone only while g|v|^2 < 1.
                let t_max = match var {
                    ExpMapVariant::Printed => 0.95 / g.sqrt(),
                    ExpMapVariant::Standard => 3.0,
                };
                let mut last = 0.0;
                for k in 1..=40 {
                    let t = t_max * k as f64 / 40.0;
                    let v: Vec<f64> = dir.iter().map(|d| d / dn * t).collect();
                    let d = raw::distance(&x, &raw::exp_map(&x, &v, g, var), g);
                    assert!(d > last, "{var:?}: d({t}) = {d} <= {last}");
                    last = d;
                }
            }
        }
    }

    #[test]
    fn midpoint_cases() {
        let p = pt(&[0.3, -0.4], 1.0);
        let single = hyperbolic_midpoint(std::slice::from_ref(&p), None, c(1.0)).unwrap();
        assert_abs_diff_eq!(single.coords()[0], 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(single.coords()[1], -0.4, epsilon = 1e-9);
        let pair = hyperbolic_midpoint(&[p.clone(), p.neg()], None, c(1.0)).unwrap();
        assert!(norm_sq(pair.coords()).sqrt() < 1e-9);
        assert!(matches!(
            hyperbolic_midpoint(&[], None, c(1.0)),
            Err(Error::Usage(_))
        ));
        // Two points: the gyro-midpoint is equidistant from both.
        let q = pt(&[-0.1, 0.6], 1.0);
        let m = hyperbolic_midpoint(&[p.clone(), q.clone()], None, c(1.0)).unwrap();
        assert_abs_diff_eq!(
            distance(&m, &p, c(1.0)),
            distance(&m, &q, c(1.0)),
            epsilon = 1e-9
        );
    }

    #[test]
    fn midpoint_weights_shift_towards_heavier_point() {
        let p = pt(&[0.5, 0.0], 1.0);
        let q = pt(&[-0.5, 0.0], 1.0);
        let m = hyperbolic_midpoint(&[p, q], Some(&[3.0, 1.0]), c(1.0)).unwrap();
        assert!(m.coords()[0] > 0.0);
    }

    #[test]
    fn curvature_validation() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
        assert_eq!(Curvature::clamped(-3.0, true).gamma(), GAMMA_FLOOR);
        assert!(PoincarePoint::new(vec![1.0, 0.0], c(1.0)).is_err());
        let p = PoincarePoint::projected(vec![5.0, 0.0], c(1.0));
        assert!(norm_sq(p.coords()) < 1.0 - BALL_EPS);
    }

    fn random_inputs(rng: &mut ChaCha8Rng, op: GradOp) -> GradInputs {
        let dim = rng.random_range(2..6);
        let gamma = rng.random_range(0.01..2.0);
        let x = random_point(rng, dim, gamma, 0.9);
        let y = match op {
            GradOp::ExpMap(_) => (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
            _ => random_point(rng, dim, gamma, 0.9),
        };
        let x = match op {
            // Keep the printed map away from its pole at g|f|^2 = 1.
            GradOp::EuclidToHyp(_) => (0..dim).map(|_| rng.random_range(-0.5..0.5) / gamma.sqrt()).collect(),
            _ => x,
        };
        let upstream = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        GradInputs { x, y, gamma, upstream }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let ops = [
            GradOp::Distance,
            GradOp::MobiusAdd,
            GradOp::ExpMap(ExpMapVariant::Printed),
            GradOp::ExpMap(ExpMapVariant::Standard),
            GradOp::EuclidToHyp(ExpMapVariant::Printed),
            GradOp::EuclidToHyp(ExpMapVariant::Standard),
        ];
        for op in ops {
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let inputs = random_inputs(&mut rng, op);
                worst = worst.max(grad_check(op, &inputs, 1e-5).unwrap());
            }
            assert!(worst < 1e-4, "{op:?}: max relative error {worst:e}");
        }
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        // Large features saturate the map and hit the projection.
        let inputs = GradInputs {
            x: vec![40.0, -25.0, 10.0],
            y: vec![],
            gamma: 0.3,
            upstream: vec![0.4, 0.1, -0.7],
        };
        let err = grad_check(GradOp::EuclidToHyp(ExpMapVariant::Standard), &inputs, 1e-5).unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    proptest! {
        #[test]
        fn left_identity_and_inverse(coords in prop::collection::vec(-1.0f64..1.0, 1..6), g in 0.01f64..2.0, frac in 0.0f64..0.99) {
            let n = norm_sq(&coords).sqrt().max(1e-9);
            let y: Vec<f64> = coords.iter().map(|v| v / n * frac / g.sqrt()).collect();
            let zero = vec![0.0; y.len()];
            prop_assert_eq!(raw::mobius_add(&zero, &y, g).unwrap(), y.clone());
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            let back = raw::mobius_add(&neg, &y, g).unwrap();
            prop_assert!(norm_sq(&back).sqrt() < 1e-9);
        }

        #[test]
        fn flat_limit(x in prop::collection::vec(-0.5f64..0.5, 3), y in prop::collection::vec(-0.5f64..0.5, 3), g in prop::sample::select(vec![1e-6, 1e-8])) {
            let eu: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let d = raw::distance(&x, &y, g);
            prop_assert!((d - 2.0 * eu).abs() < 1e-3 * eu + 1e-12);
        }
    }
}
