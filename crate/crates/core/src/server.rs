//! Server side: supervised pretraining, client sampling, aggregation and the
//! round loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::client::{self, ClientUpdate, RoundInputs};
use crate::config::RunConfig;
use crate::data::{self, Agent, ClientDataset, LabeledDataset, ScenarioConfig, World};
use crate::error::{Error, Result};
use crate::hypgeom::Curvature;
use crate::metrics::{self, ClientRecord, EvalReport, FailedClient, RoundRecord};
use crate::model::{stack_cells, LossSpec, Mode, ParamVector, SegNet, SegmentKind, Sgd, Weather, WeatherClassifier};
use crate::prototype::{self, Geometry, PrototypeSet};
use crate::rng::{self, tag, SimRng};

/// Which clients take part in a round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    /// Sorted by id; aggregation follows this order.
    pub participants: Vec<usize>,
    pub seed: u64,
}

/// Uniform sampling of `k` distinct clients.
pub fn sample_clients(all: &[usize], k: usize, round: usize, seed: u64) -> Result<RoundPlan> {
    if k > all.len() {
        return Err(Error::usage(format!("cannot sample {k} of {} clients", all.len())));
    }
    let plan_seed = rng::derive_seed(seed, &[tag::SAMPLING, round as u64]);
    let mut rng: SimRng = rand::SeedableRng::seed_from_u64(plan_seed);
    let mut participants: Vec<usize> = index::sample(&mut rng, all.len(), k).into_iter().map(|i| all[i]).collect();
    participants.sort_unstable();
    Ok(RoundPlan {
        round,
        participants,
        seed: plan_seed,
    })
}

/// `sum_j a_j v_j` for weights summing to one, written as
/// `v_0 + sum_j a_j (v_j - v_0)` so identical inputs come back bit-exact.
fn anchored_mean(values: &[f64], weights: &[f64]) -> f64 {
    let v0 = values[0];
    v0 + values[1..]
        .iter()
        .zip(&weights[1..])
        .map(|(v, a)| a * (v - v0))
        .sum::<f64>()
}

/// One client's contribution to model aggregation.
#[derive(Debug, Clone, Copy)]
pub struct ModelContribution<'a> {
    pub params: &'a ParamVector,
    pub trained_banks: &'a BTreeSet<Weather>,
    pub sample_count: usize,
}

/// Queue-smoothed aggregation:
/// `(mean_k M_k + sum_{j=1..q} M_G^{r-j}) / (q + 1)`.
///
/// Shared segments average over every contribution. A weather bank averages
/// only over the clients that trained it; banks nobody trained are copied
/// from `previous` untouched. The curvature segment is copied from
/// `previous`; the caller sets it from [`aggregate_curvature`].
pub fn aggregate_models(
    contribs: &[ModelContribution<'_>],
    previous: &ParamVector,
    queue: &VecDeque<ParamVector>,
    weighted: bool,
) -> Result<ParamVector> {
    if contribs.is_empty() {
        return Err(Error::usage("no client updates to aggregate"));
    }
    for c in contribs {
        if !c.params.same_layout(previous) {
            return Err(Error::shape("client update does not match the global layout"));
        }
    }
    if queue.iter().any(|m| !m.same_layout(previous)) {
        return Err(Error::shape("queued model does not match the global layout"));
    }
    let q = queue.len();
    let mut out = previous.clone();
    let client_weights = |members: &[&ModelContribution<'_>]| -> Vec<f64> {
        let raw: Vec<f64> = members
            .iter()
            .map(|c| if weighted { c.sample_count as f64 } else { 1.0 })
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / members.len() as f64; members.len()]
        }
    };
    let smoothing = vec![1.0 / (q + 1) as f64; q + 1];
    let n_segments = previous.segments().len();
    for s in 0..n_segments {
        let kind = previous.segments()[s].kind();
        let members: Vec<&ModelContribution<'_>> = match kind {
            SegmentKind::Curvature => continue,
            SegmentKind::Shared => contribs.iter().collect(),
            SegmentKind::Bank(w) => contribs.iter().filter(|c| c.trained_banks.contains(&w)).collect(),
        };
        if members.is_empty() {
            continue;
        }
        let weights = client_weights(&members);
        let len = previous.segments()[s].data.len();
        let mut vals = Vec::with_capacity(members.len().max(q + 1));
        for i in 0..len {
            vals.clear();
            vals.extend(members.iter().map(|c| c.params.segments()[s].data[i]));
            let mean = anchored_mean(&vals, &weights);
            vals.clear();
            vals.push(mean);
            vals.extend(queue.iter().map(|m| m.segments()[s].data[i]));
            out.segments_mut()[s].data[i] = anchored_mean(&vals, &smoothing);
        }
    }
    out.sample_count = contribs.iter().map(|c| c.sample_count as u64).sum();
    Ok(out)
}

/// Server prototype update
/// `p_G <- beta' p_G + (1 - beta') sum_k (N_k / N_tot) p_k` for every class
/// with `N_tot > 0`; other classes are carried forward with a zero count.
pub fn aggregate_prototypes(
    updates: &[&PrototypeSet],
    previous: &PrototypeSet,
    beta_prime: f64,
    geometry: Geometry,
    c: Curvature,
) -> Result<PrototypeSet> {
    let mut out = previous.clone();
    out.reset_counts();
    let classes: BTreeSet<usize> = updates.iter().flat_map(|u| u.classes().collect::<Vec<_>>()).collect();
    for class in classes {
        let members: Vec<(&[f64], u64)> = updates
            .iter()
            .filter(|u| u.count(class) > 0)
            .filter_map(|u| u.get(class).map(|p| (p, u.count(class))))
            .collect();
        let total: u64 = members.iter().map(|m| m.1).sum();
        if total == 0 {
            continue;
        }
        let weights: Vec<f64> = members.iter().map(|m| m.1 as f64 / total as f64).collect();
        let dim = members[0].0.len();
        if members.iter().any(|m| m.0.len() != dim) {
            return Err(Error::shape(format!("prototypes of class {class} differ in dimension")));
        }
        let avg: Vec<f64> = (0..dim)
            .map(|j| anchored_mean(&members.iter().map(|m| m.0[j]).collect::<Vec<_>>(), &weights))
            .collect();
        let next = match previous.get(class) {
            Some(prev) if prev.len() == dim => prev
                .iter()
                .zip(&avg)
                .map(|(p, a)| p + (1.0 - beta_prime) * (a - p))
                .collect(),
            _ => avg,
        };
        out.insert(class, next, geometry, c);
        out.set_count(class, total);
    }
    Ok(out)
}

/// Sample-weighted mean of the client curvatures, clamped to the floor.
pub fn aggregate_curvature(updates: &[(Curvature, usize)]) -> Result<Curvature> {
    let Some(first) = updates.first() else {
        return Err(Error::usage("no curvatures to aggregate"));
    };
    let total: usize = updates.iter().map(|u| u.1).sum();
    let weights: Vec<f64> = if total > 0 {
        updates.iter().map(|u| u.1 as f64 / total as f64).collect()
    } else {
        vec![1.0 / updates.len() as f64; updates.len()]
    };
    let gammas: Vec<f64> = updates.iter().map(|u| u.0.gamma()).collect();
    Ok(Curvature::clamped(anchored_mean(&gammas, &weights), first.0.is_learnable()))
}

/// Output of round-0 training.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub model: ParamVector,
    pub classifier: WeatherClassifier,
    pub protos: PrototypeSet,
    pub gamma: Curvature,
    /// Mean loss per segmentation epoch.
    pub epoch_losses: Vec<f64>,
    pub classifier_losses: Vec<f64>,
}

/// Supervised training of the segmentation model on mixed car/drone source
/// batches through one bank, copied afterwards to all four banks; training
/// and freezing of the weather classifier; initial prototypes from the
/// source features.
pub fn pretrain(net: &SegNet, source: &LabeledDataset, cfg: &RunConfig) -> Result<Pretrained> {
    if source.is_empty() {
        return Err(Error::usage("pretraining needs source data"));
    }
    let p = &cfg.pretrain;
    let mut init_rng = rng::stream(cfg.seed, &[tag::INIT]);
    let mut model = net.init(&mut init_rng, cfg.gamma_init);
    let mut rng = rng::stream(cfg.seed, &[tag::PRETRAIN]);
    let mut sgd = Sgd::new(p.lr, p.momentum);
    let steps_per_epoch = source.len().div_ceil(p.batch_size);
    let total_steps = (steps_per_epoch * p.epochs).max(1);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut epoch_losses = Vec::with_capacity(p.epochs);
    let mut step = 0;
    for _ in 0..p.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(p.batch_size) {
            sgd.lr = p.lr * (1.0 - step as f64 / total_steps as f64).powf(p.lr_power);
            let x = stack_cells(&batch.iter().map(|&i| &source.samples[i].cells).collect::<Vec<_>>())?;
            let targets: Vec<usize> = batch.iter().flat_map(|&i| source.samples[i].labels.iter().copied()).collect();
            let pass = net.forward_pure(&model, x.view(), Weather::Clear, Mode::Train)?;
            let grad = net
                .backward(&model, &pass, &LossSpec { targets: &targets, clustering: None })
                .map_err(|e| Error::Training {
                    round: 0,
                    step,
                    client: None,
                    detail: e.to_string(),
                })?;
            net.update_running_stats(&mut model, &pass)?;
            sgd.step(&mut model, &grad.params)?;
            sum += grad.loss.st;
            step += 1;
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
    }
    for w in &Weather::ALL[1..] {
        model.copy_bank(Weather::Clear, *w)?;
    }
    model.sample_count = source.len() as u64;

    // weather classifier
    let mut crng = rng::stream(cfg.seed, &[tag::CLASSIFIER]);
    let mut classifier = WeatherClassifier::init(net.shape.input_dim, &mut crng);
    let refs: Vec<_> = source.samples.iter().map(|s| &s.cells).collect();
    classifier.fit_normalizer(&refs)?;
    let mut classifier_losses = Vec::with_capacity(p.classifier_epochs);
    for _ in 0..p.classifier_epochs {
        order.shuffle(&mut crng);
        let mut sum = 0.0;
        let mut n = 0;
        for batch in order.chunks(p.classifier_batch_size) {
            let xs: Vec<_> = batch.iter().map(|&i| refs[i]).collect();
            let ws: Vec<Weather> = batch.iter().map(|&i| source.samples[i].weather).collect();
            sum += classifier.train_step(&xs, &ws, p.classifier_lr)?;
            n += 1;
        }
        classifier_losses.push(sum / n.max(1) as f64);
    }
    classifier.freeze();

    let gamma = Curvature::learnable(cfg.gamma_init)?;
    let protos = source_prototypes(net, &model, source, cfg, gamma)?;
    Ok(Pretrained {
        model,
        classifier,
        protos,
        gamma,
        epoch_losses,
        classifier_losses,
    })
}

/// Per-class centroids of the embedded source features under their true labels.
pub fn source_prototypes(
    net: &SegNet,
    model: &ParamVector,
    source: &LabeledDataset,
    cfg: &RunConfig,
    gamma: Curvature,
) -> Result<PrototypeSet> {
    let t = &cfg.toggles;
    let x = stack_cells(&source.samples.iter().map(|s| &s.cells).collect::<Vec<_>>())?;
    let labels: Vec<usize> = source.samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let pass = net.forward_pure(model, x.view(), Weather::Clear, Mode::Eval)?;
    let emb = prototype::embed(pass.features.view(), t.geometry, gamma, t.exp_map);
    let est = prototype::batch_estimates(emb.view(), &labels, t.geometry, gamma)?;
    let mut protos = PrototypeSet::new();
    for (class, e) in est {
        protos.insert(class, e.coords, t.geometry, gamma);
        protos.set_count(class, e.count);
    }
    Ok(protos)
}

/// Server state between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub model: ParamVector,
    /// Most recent first: rounds `r-1, r-2, ...`, at most `Q` entries.
    pub queue: VecDeque<ParamVector>,
    pub protos: PrototypeSet,
    pub gamma: Curvature,
    pub round: usize,
}

impl GlobalState {
    pub fn new(model: ParamVector, protos: PrototypeSet, gamma: Curvature, round: usize, queue_cap: usize) -> Self {
        let mut queue = VecDeque::new();
        if queue_cap > 0 {
            queue.push_front(model.clone());
        }
        GlobalState {
            model,
            queue,
            protos,
            gamma,
            round,
        }
    }

    fn push(&mut self, model: ParamVector, cap: usize) {
        if cap > 0 {
            self.queue.push_front(model.clone());
            self.queue.truncate(cap);
        }
        self.model = model;
    }
}

/// Drives one federated run: data, pretraining, rounds, evaluation.
pub struct Simulator {
    cfg: RunConfig,
    net: SegNet,
    clients: Vec<ClientDataset>,
    test: LabeledDataset,
    classifier: WeatherClassifier,
    state: GlobalState,
    records: Vec<RoundRecord>,
    pool: rayon::ThreadPool,
}

/// Synthetic data of one run.
pub struct RunData {
    pub world: World,
    pub source: LabeledDataset,
    pub test: LabeledDataset,
    pub scenario: ScenarioConfig,
    pub clients: Vec<ClientDataset>,
}

pub fn generate_data(cfg: &RunConfig) -> Result<RunData> {
    let world = World::generate(&cfg.data, cfg.seed)?;
    let source = data::gen_source(&world, cfg.seed);
    let test = data::gen_test(&world, cfg.seed);
    let scenario = ScenarioConfig::new(cfg.scenario, cfg.data.weather_mix, cfg.seed);
    let clients = data::gen_target(&world, &scenario, cfg.seed)?;
    Ok(RunData {
        world,
        source,
        test,
        scenario,
        clients,
    })
}

impl Simulator {
    /// Generates the data and pretrains from scratch.
    pub fn new(cfg: RunConfig) -> Result<Simulator> {
        cfg.validate()?;
        let data = generate_data(&cfg)?;
        let net = SegNet::new(cfg.model.clone());
        let pre = pretrain(&net, &data.source, &cfg)?;
        Simulator::from_pretrained(cfg, data, pre)
    }

    pub fn from_pretrained(cfg: RunConfig, data: RunData, pre: Pretrained) -> Result<Simulator> {
        let ck = Checkpoint {
            round: 0,
            model: pre.model,
            classifier: Some(pre.classifier.params),
            queue: Vec::new(),
            protos: pre.protos,
            gamma: pre.gamma,
        };
        Simulator::from_checkpoint(cfg, data, ck)
    }

    /// Regenerates the data from `cfg` and resumes from `ck`. The source
    /// prototypes of a round-0 checkpoint are recomputed under the configured
    /// geometry, so one pretrained checkpoint serves every ablation.
    pub fn resume(cfg: RunConfig, mut ck: Checkpoint) -> Result<Simulator> {
        cfg.validate()?;
        let data = generate_data(&cfg)?;
        if ck.round == 0 {
            let net = SegNet::new(cfg.model.clone());
            ck.protos = source_prototypes(&net, &ck.model, &data.source, &cfg, ck.gamma)?;
        }
        Simulator::from_checkpoint(cfg, data, ck)
    }

    /// Resumes from a checkpoint. Round-0 checkpoints get a source-only record.
    pub fn from_checkpoint(cfg: RunConfig, data: RunData, ck: Checkpoint) -> Result<Simulator> {
        cfg.validate()?;
        let net = SegNet::new(cfg.model.clone());
        let template = net.init(&mut rng::stream(0, &[]), cfg.gamma_init);
        if !ck.model.same_layout(&template) {
            return Err(Error::Config("checkpoint does not match the configured model shape".into()));
        }
        let classifier = WeatherClassifier::from_params(
            ck.classifier
                .ok_or_else(|| Error::Config("checkpoint carries no weather classifier".into()))?,
        )?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let gamma = ck.gamma.with_learnable(cfg.toggles.learn_curvature);
        let cap = queue_cap(&cfg);
        let mut state = GlobalState::new(ck.model, ck.protos, gamma, ck.round, cap);
        if cap > 0 && !ck.queue.is_empty() {
            if ck.queue.iter().any(|m| !m.same_layout(&template)) {
                return Err(Error::Config("checkpoint queue does not match the configured model shape".into()));
            }
            state.queue = ck.queue.into_iter().take(cap).collect();
        }
        let mut sim = Simulator {
            cfg,
            net,
            clients: data.clients,
            test: data.test,
            classifier,
            state,
            records: Vec::new(),
            pool,
        };
        if sim.state.round == 0 {
            let rec = sim.record(0, Vec::new(), Vec::new(), Vec::new(), false, Vec::new(), true, None)?;
            sim.records.push(rec);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn classifier(&self) -> &WeatherClassifier {
        &self.classifier
    }

    pub fn test_set(&self) -> &LabeledDataset {
        &self.test
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        self.state.round >= self.cfg.rounds
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.state.round,
            model: self.state.model.clone(),
            classifier: Some(self.classifier.params.clone()),
            queue: self.state.queue.iter().cloned().collect(),
            protos: self.state.protos.clone(),
            gamma: self.state.gamma,
        }
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        self.evaluate_on(&self.test)
    }

    pub fn evaluate_on(&self, test: &LabeledDataset) -> Result<EvalReport> {
        metrics::evaluate(
            &self.net,
            &self.state.model,
            &self.classifier,
            self.cfg.toggles.weather_bn,
            test,
            &self.cfg.data.classes_of(Agent::Drone),
        )
    }

    /// Samples participants and runs the next round.
    pub fn step(&mut self) -> Result<&RoundRecord> {
        let round = self.state.round + 1;
        let ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        let plan = sample_clients(&ids, self.cfg.clients_per_round.min(ids.len()), round, self.cfg.seed)?;
        self.step_with(plan)
    }

    /// Runs the next round with a given participant list.
    pub fn step_with(&mut self, plan: RoundPlan) -> Result<&RoundRecord> {
        let started = Instant::now();
        let round = self.state.round + 1;
        if plan.round != round {
            return Err(Error::usage(format!("plan for round {} but next round is {round}", plan.round)));
        }
        if let Some(bad) = plan.participants.iter().find(|&&k| k >= self.clients.len()) {
            return Err(Error::usage(format!("unknown client {bad}")));
        }
        let inputs = RoundInputs {
            round,
            net: &self.net,
            teacher: &self.state.model,
            classifier: &self.classifier,
            protos: &self.state.protos,
            gamma: self.state.gamma,
            cfg: &self.cfg,
        };
        let clients = &self.clients;
        let seed = self.cfg.seed;
        let results: Vec<(usize, Result<ClientUpdate>)> = self.pool.install(|| {
            plan.participants
                .par_iter()
                .map(|&k| {
                    let mut r = rng::stream(seed, &[tag::CLIENT, round as u64, k as u64]);
                    (k, client::local_round(&inputs, &clients[k], &mut r))
                })
                .collect()
        });
        let mut updates = Vec::new();
        let mut failed = Vec::new();
        for (k, res) in results {
            match res {
                Ok(u) => updates.push(u),
                Err(e) => {
                    log::warn!("round {round}: client {k} excluded: {e}");
                    failed.push(FailedClient {
                        client: k,
                        error: e.to_string(),
                    });
                }
            }
        }
        let client_records: Vec<ClientRecord> = updates
            .iter()
            .map(|u| ClientRecord {
                client: u.client,
                agent: u.agent,
                samples: u.sample_count,
                steps: u.stats.steps,
                loss_st: u.stats.st,
                loss_cl: u.stats.cl,
                gamma: u.gamma.gamma(),
                trained_banks: u.trained_banks.iter().copied().collect(),
                bank_batches: u.stats.bank_batches,
                skipped_classes: u.stats.skipped_classes,
                params_digest: metrics::digest(&u.params),
            })
            .collect();

        let skipped = updates.is_empty();
        let mut banks_updated = BTreeSet::new();
        if !skipped {
            let t = &self.cfg.toggles;
            let contribs: Vec<ModelContribution<'_>> = updates
                .iter()
                .map(|u| ModelContribution {
                    params: &u.params,
                    trained_banks: &u.trained_banks,
                    sample_count: u.sample_count,
                })
                .collect();
            let empty = VecDeque::new();
            let queue = if t.queue_agg { &self.state.queue } else { &empty };
            let mut model = aggregate_models(&contribs, &self.state.model, queue, t.weighted_client_mean)?;
            let gamma = aggregate_curvature(&updates.iter().map(|u| (u.gamma, u.sample_count)).collect::<Vec<_>>())?;
            model.set_curvature(gamma.gamma())?;
            let mut protos = aggregate_prototypes(
                &updates.iter().map(|u| &u.protos).collect::<Vec<_>>(),
                &self.state.protos,
                self.cfg.beta_prime,
                t.geometry,
                gamma,
            )?;
            protos.reproject(t.geometry, gamma);
            protos.round = round;
            banks_updated = updates.iter().flat_map(|u| u.trained_banks.iter().copied()).collect();
            self.state.push(model, queue_cap(&self.cfg));
            self.state.protos = protos;
            self.state.gamma = gamma;
        } else {
            log::warn!("round {round}: no valid client update, global state kept");
        }
        self.state.round = round;
        let evaluate = round.is_multiple_of(self.cfg.eval_every) || round >= self.cfg.rounds;
        let wall = self.cfg.record_wall_time.then(|| started.elapsed().as_millis() as u64);
        let rec = self.record(
            round,
            plan.participants,
            client_records,
            failed,
            skipped,
            banks_updated.into_iter().collect(),
            evaluate,
            wall,
        )?;
        self.records.push(rec);
        Ok(self.records.last().expect("just pushed"))
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        round: usize,
        participants: Vec<usize>,
        clients: Vec<ClientRecord>,
        failed: Vec<FailedClient>,
        skipped: bool,
        banks_updated: Vec<Weather>,
        evaluate: bool,
        wall_ms: Option<u64>,
    ) -> Result<RoundRecord> {
        let proto_counts: BTreeMap<usize, u64> = self
            .state
            .protos
            .classes()
            .map(|c| (c, self.state.protos.count(c)))
            .collect();
        Ok(RoundRecord {
            round,
            participants,
            clients,
            failed,
            skipped,
            gamma: self.state.gamma.gamma(),
            queue_len: self.state.queue.len(),
            banks_updated,
            proto_counts,
            model_digest: metrics::digest(&self.state.model),
            eval: if evaluate { Some(self.evaluate()?) } else { None },
            wall_ms,
        })
    }

    /// Runs all remaining rounds, handing each record to `sink` as it is produced.
    pub fn run_with(&mut self, mut sink: impl FnMut(&RoundRecord) -> Result<()>) -> Result<()> {
        for rec in &self.records {
            sink(rec)?;
        }
        while !self.is_done() {
            let rec = self.step()?;
            sink(rec)?;
        }
        Ok(())
    }
}

fn queue_cap(cfg: &RunConfig) -> usize {
    if cfg.toggles.queue_agg {
        cfg.queue_len
    } else {
        0
    }
}

/// Pretrains and runs every round; returns the ledger records.
pub fn run(cfg: RunConfig) -> Result<Vec<RoundRecord>> {
    let mut sim = Simulator::new(cfg)?;
    sim.run_with(|_| Ok(()))?;
    Ok(sim.records)
}
