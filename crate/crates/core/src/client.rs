//! One client's local round: pseudo-label self-training against the round's
//! teacher, clustering towards the server prototypes, prototype smoothing and
//! curvature learning.

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Agent, ClientDataset};
use crate::error::{Error, Result};
use crate::hypgeom::Curvature;
use crate::model::{
    majority_weather, stack_cells, ClusteringTerm, LossSpec, Mode, ParamVector, SegNet, Sgd, Weather,
    WeatherClassifier,
};
use crate::prototype::{self, PrototypeSet};
use crate::rng::SimRng;

/// Argmax predictions of the frozen teacher, in eval mode.
pub fn pseudo_label(net: &SegNet, teacher: &ParamVector, batch: ArrayView2<'_, f64>, weather: Weather) -> Result<Vec<usize>> {
    Ok(net.forward_pure(teacher, batch, weather, Mode::Eval)?.predictions())
}

/// One gradient step on the curvature, with the gradient clipped to `clip`
/// and the result clamped to the floor. Non-learnable curvatures are
/// returned unchanged.
pub fn update_curvature(c: Curvature, grad: f64, lr: f64, clip: f64) -> Curvature {
    if !c.is_learnable() || grad == 0.0 || !grad.is_finite() {
        return c;
    }
    Curvature::clamped(c.gamma() - lr * grad.clamp(-clip, clip), true)
}

/// What the server hands a client at the start of a round.
#[derive(Debug, Clone, Copy)]
pub struct RoundInputs<'a> {
    pub round: usize,
    pub net: &'a SegNet,
    pub teacher: &'a ParamVector,
    pub classifier: &'a WeatherClassifier,
    pub protos: &'a PrototypeSet,
    pub gamma: Curvature,
    pub cfg: &'a RunConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalStats {
    pub steps: usize,
    /// Mean self-training loss over the round's steps.
    pub st: f64,
    /// Mean clustering loss (before the `lambda_cl` factor).
    pub cl: f64,
    pub skipped_classes: usize,
    /// Batches routed to each bank, in weather order.
    pub bank_batches: [usize; 4],
}

/// Everything a client sends back to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub agent: Agent,
    pub params: ParamVector,
    pub protos: PrototypeSet,
    pub gamma: Curvature,
    pub sample_count: usize,
    /// Banks that received at least one step.
    pub trained_banks: BTreeSet<Weather>,
    pub stats: LocalStats,
}

/// Splits the local samples into batches that share a predicted weather.
fn weather_batches(preds: &[Weather], batch_size: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for w in Weather::ALL {
        let members: Vec<usize> = order.iter().copied().filter(|&i| preds[i] == w).collect();
        batches.extend(members.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

/// Runs `cfg.local_epochs` epochs of self-training on the client's samples.
/// Reads only the unlabeled samples; any ground truth attached to `data` is ignored.
pub fn local_round(inputs: &RoundInputs<'_>, data: &ClientDataset, rng: &mut SimRng) -> Result<ClientUpdate> {
    let cfg = inputs.cfg;
    let t = &cfg.toggles;
    let net = inputs.net;
    let samples = data.samples();
    if samples.is_empty() {
        return Err(Error::usage(format!("client {} has no samples", data.id)));
    }
    let mut params = inputs.teacher.clone();
    let mut gamma = inputs.gamma.with_learnable(t.learn_curvature);
    params.set_curvature(gamma.gamma())?;
    let mut protos = inputs.protos.clone();
    protos.reset_counts();
    protos.round = inputs.round;
    protos.step = 0;

    let refs: Vec<_> = samples.iter().collect();
    let preds = if t.weather_bn {
        inputs.classifier.classify(&refs)?
    } else {
        vec![Weather::Clear; samples.len()]
    };

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut stats = LocalStats::default();
    let mut trained_banks = BTreeSet::new();
    let fail = |step: usize, detail: String| Error::Training {
        round: inputs.round,
        step,
        client: Some(data.id),
        detail,
    };
    for _ in 0..cfg.local_epochs {
        for batch in weather_batches(&preds, cfg.batch_size, rng) {
            let step = stats.steps;
            let votes: Vec<Weather> = batch.iter().map(|&i| preds[i]).collect();
            let bank = majority_weather(&votes);
            let x = stack_cells(&batch.iter().map(|&i| &samples[i]).collect::<Vec<_>>())?;
            let targets = pseudo_label(net, inputs.teacher, x.view(), bank)?;
            let pass = net.forward_pure(&params, x.view(), bank, Mode::Train)?;
            let clustering = t.clustering_loss.then_some(ClusteringTerm {
                protos: &protos,
                lambda: cfg.lambda_cl,
                geometry: t.geometry,
                curvature: gamma,
                variant: t.exp_map,
            });
            let grad = net
                .backward(&params, &pass, &LossSpec { targets: &targets, clustering })
                .map_err(|e| fail(step, e.to_string()))?;
            net.update_running_stats(&mut params, &pass)?;
            sgd.step(&mut params, &grad.params)?;

            let old_gamma = gamma;
            if t.clustering_loss {
                gamma = update_curvature(gamma, grad.params.curvature().unwrap_or(0.0), cfg.curvature_lr, cfg.curvature_clip);
                params.set_curvature(gamma.gamma())?;
            }
            if !params.is_finite() {
                return Err(fail(step, "non-finite parameters after update".into()));
            }

            let embedded = match grad.hyp_features {
                Some(e) => e,
                None => prototype::embed(pass.features.view(), t.geometry, old_gamma, t.exp_map),
            };
            let estimates = prototype::batch_estimates(embedded.view(), &targets, t.geometry, old_gamma)?;
            if gamma != old_gamma {
                protos.reproject(t.geometry, gamma);
            }
            protos.ema_update(&estimates, cfg.beta, t.geometry, t.ema_mode, gamma)?;

            trained_banks.insert(bank);
            stats.steps += 1;
            stats.st += grad.loss.st;
            stats.cl += grad.loss.cl;
            stats.skipped_classes += grad.loss.skipped_classes;
            stats.bank_batches[bank.index()] += 1;
        }
    }
    if stats.steps > 0 {
        stats.st /= stats.steps as f64;
        stats.cl /= stats.steps as f64;
    }
    params.sample_count = (samples.len() * cfg.local_epochs) as u64;
    Ok(ClientUpdate {
        client: data.id,
        agent: data.agent,
        params,
        protos,
        gamma,
        sample_count: samples.len() * cfg.local_epochs,
        trained_banks,
        stats,
    })
}
