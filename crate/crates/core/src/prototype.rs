//! Class prototypes and the clustering loss that pulls features towards them.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypgeom::{self, raw, Curvature, ExpMapVariant, PoincarePoint};

/// Manifold the prototypes live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    #[default]
    Hyperbolic,
    Euclidean,
}

/// How a client smooths its prototype towards the current batch estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    /// `beta * p + (1 - beta) * q` in coordinates, then projected.
    #[default]
    Coordinate,
    /// Geodesic interpolation `p (+) ((1 - beta) (x) (-p (+) q))`.
    Geodesic,
}

/// Per-class prototypes plus how many features backed each one.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrototypeSet {
    protos: BTreeMap<usize, Vec<f64>>,
    counts: BTreeMap<usize, u64>,
    pub round: usize,
    pub step: usize,
}

/// Batch estimate of one class prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEstimate {
    pub coords: Vec<f64>,
    pub count: u64,
}

impl PrototypeSet {
    pub fn new() -> Self {
        PrototypeSet::default()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.protos.get(&class).map(Vec::as_slice)
    }

    pub fn point(&self, class: usize, c: Curvature) -> Option<Result<PoincarePoint>> {
        self.get(class).map(|p| PoincarePoint::new(p.to_vec(), c))
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.protos.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.protos.iter().map(|(c, p)| (*c, p.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    /// Stores `coords` for `class`, projecting hyperbolic prototypes into the ball.
    pub fn insert(&mut self, class: usize, mut coords: Vec<f64>, geometry: Geometry, c: Curvature) {
        if geometry == Geometry::Hyperbolic {
            raw::project(&mut coords, c.gamma());
        }
        self.protos.insert(class, coords);
    }

    pub fn set_count(&mut self, class: usize, count: u64) {
        if count == 0 {
            self.counts.remove(&class);
        } else {
            self.counts.insert(class, count);
        }
    }

    /// Forgets all counts, keeping the prototypes (start of a round).
    pub fn reset_counts(&mut self) {
        self.counts.clear();
    }

    /// Re-projects every prototype after a curvature change.
    pub fn reproject(&mut self, geometry: Geometry, c: Curvature) {
        if geometry == Geometry::Hyperbolic {
            for p in self.protos.values_mut() {
                raw::project(p, c.gamma());
            }
        }
    }

    /// One smoothing step `p <- beta p + (1 - beta) q` for every class in
    /// `estimates`. Classes without a prototype adopt the estimate as is.
    pub fn ema_update(
        &mut self,
        estimates: &BTreeMap<usize, ClassEstimate>,
        beta: f64,
        geometry: Geometry,
        mode: EmaMode,
        c: Curvature,
    ) -> Result<()> {
        for (&class, est) in estimates {
            let next = match self.protos.get(&class) {
                None => est.coords.clone(),
                Some(p) => match (geometry, mode) {
                    (Geometry::Hyperbolic, EmaMode::Geodesic) => {
                        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
                        let delta = raw::mobius_add(&neg, &est.coords, c.gamma())?;
                        let step = raw::mobius_scalar_mul(1.0 - beta, &delta, c.gamma());
                        raw::mobius_add(p, &step, c.gamma())?
                    }
                    _ => p
                        .iter()
                        .zip(&est.coords)
                        .map(|(a, b)| beta * a + (1.0 - beta) * b)
                        .collect(),
                },
            };
            self.insert(class, next, geometry, c);
            *self.counts.entry(class).or_insert(0) += est.count;
        }
        self.step += 1;
        Ok(())
    }
}

/// Maps encoder features onto the prototype manifold, one row per cell.
pub fn embed(
    features: ArrayView2<'_, f64>,
    geometry: Geometry,
    c: Curvature,
    variant: ExpMapVariant,
) -> Array2<f64> {
    match geometry {
        Geometry::Euclidean => features.to_owned(),
        Geometry::Hyperbolic => {
            let mut out = features.to_owned();
            for mut row in out.rows_mut() {
                let f: Vec<f64> = row.to_vec();
                let p = raw::euclid_to_hyp(&f, c.gamma(), variant);
                row.iter_mut().zip(p).for_each(|(r, v)| *r = v);
            }
            out
        }
    }
}

/// Mean (Euclidean) or gyro-midpoint (hyperbolic) of a set of points.
pub fn centroid(points: &[&[f64]], geometry: Geometry, c: Curvature) -> Result<Vec<f64>> {
    match geometry {
        Geometry::Hyperbolic => raw::midpoint(points, None, c.gamma()),
        Geometry::Euclidean => {
            let Some(first) = points.first() else {
                return Err(Error::usage("centroid of an empty point set"));
            };
            let n = points.len() as f64;
            let mut out = vec![0.0; first.len()];
            for p in points {
                out.iter_mut().zip(p.iter()).for_each(|(o, v)| *o += v / n);
            }
            Ok(out)
        }
    }
}

/// Groups embedded rows by label and returns one centroid per present class.
pub fn batch_estimates(
    embedded: ArrayView2<'_, f64>,
    labels: &[usize],
    geometry: Geometry,
    c: Curvature,
) -> Result<BTreeMap<usize, ClassEstimate>> {
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (row, &label) in embedded.rows().into_iter().zip(labels) {
        groups
            .entry(label)
            .or_default()
            .push(row.to_slice().expect("standard layout rows"));
    }
    groups
        .into_iter()
        .map(|(class, pts)| {
            Ok((
                class,
                ClassEstimate {
                    coords: centroid(&pts, geometry, c)?,
                    count: pts.len() as u64,
                },
            ))
        })
        .collect()
}

fn point_distance(x: &[f64], p: &[f64], geometry: Geometry, gamma: f64) -> f64 {
    match geometry {
        Geometry::Hyperbolic => raw::distance(x, p, gamma),
        Geometry::Euclidean => x
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Active classes (present in `labels`) with their member rows.
fn active_classes(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        m.entry(l).or_default().push(i);
    }
    m
}

/// Mean over active classes of the mean distance between a class's features
/// and its prototype. Returns the loss and the number of active classes
/// skipped because no prototype exists for them.
pub fn clustering_loss(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    protos: &PrototypeSet,
    geometry: Geometry,
    c: Curvature,
    variant: ExpMapVariant,
) -> Result<(f64, usize)> {
    let g = clustering_loss_grad(features, labels, protos, geometry, c, variant)?;
    Ok((g.loss, g.skipped_classes))
}

pub struct ClusteringGrad {
    pub loss: f64,
    pub d_features: Array2<f64>,
    pub d_gamma: f64,
    pub skipped_classes: usize,
    pub embedded: Option<Array2<f64>>,
}

/// Clustering loss with its gradient w.r.t. the raw (Euclidean) features and
/// the curvature. Prototypes are treated as constants.
pub fn clustering_loss_grad(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    protos: &PrototypeSet,
    geometry: Geometry,
    c: Curvature,
    variant: ExpMapVariant,
) -> Result<ClusteringGrad> {
    if labels.len() != features.nrows() {
        return Err(Error::shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.nrows()
        )));
    }
    let gamma = c.gamma();
    let embedded = embed(features, geometry, c, variant);
    let classes = active_classes(labels);
    let mut skipped = 0;
    let usable: Vec<(&[f64], &Vec<usize>)> = classes
        .iter()
        .filter_map(|(class, rows)| match protos.get(*class) {
            Some(p) => Some((p, rows)),
            None => {
                skipped += 1;
                None
            }
        })
        .collect();

    let mut d_features = Array2::zeros(features.raw_dim());
    let mut d_gamma = 0.0;
    let mut loss = 0.0;
    if !usable.is_empty() {
        let n_classes = usable.len() as f64;
        for (p, rows) in &usable {
            let w = 1.0 / (n_classes * rows.len() as f64);
            for &i in rows.iter() {
                let x = embedded.row(i);
                let x = x.as_slice().expect("standard layout");
                loss += w * point_distance(x, p, geometry, gamma);
                match geometry {
                    Geometry::Euclidean => {
                        let diff: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a - b).collect();
                        let norm = hypgeom::norm_sq(&diff).sqrt();
                        if norm > hypgeom::NORM_EPS {
                            d_features
                                .row_mut(i)
                                .iter_mut()
                                .zip(&diff)
                                .for_each(|(d, v)| *d += w * v / norm);
                        }
                    }
                    Geometry::Hyperbolic => {
                        let dg = hypgeom::distance_grad(x, p, gamma);
                        let upstream: Vec<f64> = dg.x.iter().map(|v| w * v).collect();
                        let f = features.row(i).to_vec();
                        let (df, dgam) = hypgeom::euclid_to_hyp_vjp(&f, gamma, variant, &upstream);
                        d_features
                            .row_mut(i)
                            .iter_mut()
                            .zip(df)
                            .for_each(|(d, v)| *d += v);
                        d_gamma += w * dg.gamma + dgam;
                    }
                }
            }
        }
    }
    Ok(ClusteringGrad {
        loss,
        d_features,
        d_gamma,
        skipped_classes: skipped,
        embedded: Some(embedded),
    })
}
