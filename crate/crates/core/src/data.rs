//! Procedural source and target data.
//!
//! A sample is a `grid x grid` patch of cells; every cell carries a feature
//! vector and a class label, so per-class IoU stays meaningful. Features are
//! drawn around per-(agent, class) means, distorted by a fixed per-weather
//! effect, and on the target side by an additional per-(agent, weather)
//! affine shift.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Weather;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Car,
    Drone,
}

impl Agent {
    pub const ALL: [Agent; 2] = [Agent::Car, Agent::Drone];

    pub fn name(self) -> &'static str {
        match self {
            Agent::Car => "car",
            Agent::Drone => "drone",
        }
    }

    pub fn parse(s: &str) -> Option<Agent> {
        Agent::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// 32 cars and 8 drones with mixed weather.
    #[serde(rename = "i")]
    I,
    /// 32 cars and 32 drones with mixed weather.
    #[serde(rename = "ii")]
    II,
    /// 32 cars and 32 drones, one weather per client.
    #[serde(rename = "iii")]
    III,
}

impl Scenario {
    pub fn parse(s: &str) -> Option<Scenario> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Some(Scenario::I),
            "ii" | "2" => Some(Scenario::II),
            "iii" | "3" => Some(Scenario::III),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::I => "i",
            Scenario::II => "ii",
            Scenario::III => "iii",
        }
    }
}

/// Generator knobs shared by every domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub grid: usize,
    pub input_dim: usize,
    pub car_classes: usize,
    pub drone_classes: usize,
    /// Regions per sample label map.
    pub regions: usize,
    /// Standard deviation of the class means around the origin.
    pub class_spread: f64,
    /// Distance between a drone class mean and the car mean of that class.
    pub agent_offset: f64,
    pub noise: f64,
    /// Standard deviation of the per-weather target offset.
    pub shift_offset: f64,
    /// Half-width of the per-weather target gain around 1.
    pub shift_gain: f64,
    /// Extra per-(agent, weather) jitter on top of the weather shift.
    pub shift_agent_jitter: f64,
    pub source_per_agent: usize,
    pub test_per_domain: usize,
    /// Weather proportions of the source set and of mixed-weather clients.
    pub weather_mix: [f64; 4],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid: 8,
            input_dim: 8,
            car_classes: 6,
            drone_classes: 4,
            regions: 4,
            class_spread: 1.0,
            agent_offset: 0.5,
            noise: 0.8,
            shift_offset: 1.0,
            shift_gain: 0.4,
            shift_agent_jitter: 0.2,
            source_per_agent: 600,
            test_per_domain: 24,
            weather_mix: [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.input_dim < 3 {
            return Err(Error::Config("grid must be positive and input_dim at least 3".into()));
        }
        if self.drone_classes == 0 || self.drone_classes > self.car_classes {
            return Err(Error::Config("drone classes must be a non-empty subset of car classes".into()));
        }
        if self.regions == 0 {
            return Err(Error::Config("regions must be positive".into()));
        }
        if self.weather_mix.iter().any(|w| *w < 0.0 || !w.is_finite()) || self.weather_mix.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("weather_mix must be non-negative with a positive sum".into()));
        }
        if self.noise <= 0.0 {
            return Err(Error::Config("noise must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn classes_of(&self, agent: Agent) -> Vec<usize> {
        match agent {
            Agent::Car => (0..self.car_classes).collect(),
            Agent::Drone => (0..self.drone_classes).collect(),
        }
    }
}

/// Fixed appearance change of a weather, applied as `gain * x + offset + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherEffect {
    pub gain: f64,
    pub offset: Vec<f64>,
    pub noise: f64,
}

impl WeatherEffect {
    /// Night darkens, fog brightens and flattens, rain dims and adds noise. The first
    /// three channels play the role of colour and carry most of the effect.
    pub fn of(weather: Weather, dim: usize) -> WeatherEffect {
        let colour = |v: f64| (0..dim).map(|j| if j < 3 { v } else { 0.2 * v }).collect::<Vec<_>>();
        match weather {
            Weather::Clear => WeatherEffect { gain: 1.0, offset: vec![0.0; dim], noise: 0.0 },
            Weather::Night => WeatherEffect { gain: 0.5, offset: colour(-3.0), noise: 0.1 },
            Weather::Rain => WeatherEffect { gain: 0.9, offset: colour(-1.5), noise: 1.5 },
            Weather::Fog => WeatherEffect { gain: 0.4, offset: colour(3.0), noise: 0.1 },
        }
    }
}

/// One (agent, weather) domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub agent: Agent,
    pub weather: Weather,
    /// Indexed by class id; only the agent's classes are populated.
    pub class_means: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub effect: WeatherEffect,
    /// Target-side multiplicative shift (1 on the source).
    pub shift_gain: f64,
    /// Target-side additive shift (0 on the source).
    pub shift_offset: Vec<f64>,
    pub noise_scale: f64,
}

impl DomainSpec {
    fn draw_cell<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let mu = &self.class_means[class];
        mu.iter()
            .enumerate()
            .map(|(j, m)| {
                let z: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                let x = m + self.noise_scale * z;
                let w = self.effect.gain * x + self.effect.offset[j] + self.effect.noise * e;
                self.shift_gain * w + self.shift_offset[j]
            })
            .collect()
    }

    /// Draws one sample: a Voronoi label map and per-cell features.
    pub fn draw_sample<R: Rng + ?Sized>(&self, grid: usize, regions: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let seeds: Vec<(f64, f64, usize)> = (0..regions)
            .map(|_| {
                (
                    rng.random_range(0.0..grid as f64),
                    rng.random_range(0.0..grid as f64),
                    self.classes[rng.random_range(0..self.classes.len())],
                )
            })
            .collect();
        let dim = self.effect.offset.len();
        let mut cells = Array2::zeros((grid * grid, dim));
        let mut labels = Vec::with_capacity(grid * grid);
        for r in 0..grid {
            for c in 0..grid {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let class = seeds
                    .iter()
                    .map(|&(sy, sx, k)| ((sy - y).powi(2) + (sx - x).powi(2), k))
                    .fold((f64::INFINITY, 0), |b, v| if v.0 < b.0 { v } else { b })
                    .1;
                let row = r * grid + c;
                for (j, v) in self.draw_cell(class, rng).into_iter().enumerate() {
                    cells[[row, j]] = v;
                }
                labels.push(class);
            }
        }
        (cells, labels)
    }
}

/// All source and target domains of one generated world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub cfg: DataConfig,
    source: BTreeMap<(Agent, Weather), DomainSpec>,
    target: BTreeMap<(Agent, Weather), DomainSpec>,
}

impl World {
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<World> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[tag::DOMAIN]);
        let dim = cfg.input_dim;
        let spread = Normal::new(0.0, cfg.class_spread).map_err(|e| Error::Config(e.to_string()))?;
        let car_means: Vec<Vec<f64>> = (0..cfg.car_classes)
            .map(|_| (0..dim).map(|_| spread.sample(&mut rng)).collect())
            .collect();
        let drone_means: Vec<Vec<f64>> = car_means
            .iter()
            .map(|m| {
                let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                m.iter().zip(&dir).map(|(a, d)| a + cfg.agent_offset * d / n).collect()
            })
            .collect();
        let mut weather_shift = BTreeMap::new();
        for w in Weather::ALL {
            let gain = 1.0 + rng.random_range(-cfg.shift_gain..=cfg.shift_gain);
            // the colour channels carry the weather signature; shift them less
            let offset: Vec<f64> = (0..dim)
                .map(|j| {
                    let damp = if j < 3 { 0.15 } else { 1.0 };
                    damp * cfg.shift_offset * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            weather_shift.insert(w, (gain, offset));
        }
        let mut source = BTreeMap::new();
        let mut target = BTreeMap::new();
        for agent in Agent::ALL {
            let means = match agent {
                Agent::Car => &car_means,
                Agent::Drone => &drone_means,
            };
            for w in Weather::ALL {
                let base = DomainSpec {
                    agent,
                    weather: w,
                    class_means: means.clone(),
                    classes: cfg.classes_of(agent),
                    effect: WeatherEffect::of(w, dim),
                    shift_gain: 1.0,
                    shift_offset: vec![0.0; dim],
                    noise_scale: cfg.noise,
                };
                let (g, o) = &weather_shift[&w];
                let jitter = cfg.shift_agent_jitter;
                let shifted = DomainSpec {
                    shift_gain: g * (1.0 + jitter * rng.random_range(-0.5..=0.5)),
                    shift_offset: o
                        .iter()
                        .map(|v| v + jitter * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    ..base.clone()
                };
                source.insert((agent, w), base);
                target.insert((agent, w), shifted);
            }
        }
        Ok(World {
            cfg: cfg.clone(),
            source,
            target,
        })
    }

    pub fn source_spec(&self, agent: Agent, weather: Weather) -> &DomainSpec {
        &self.source[&(agent, weather)]
    }

    pub fn target_spec(&self, agent: Agent, weather: Weather) -> &DomainSpec {
        &self.target[&(agent, weather)]
    }
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub agent: Agent,
    pub weather: Weather,
    /// One row per cell.
    pub cells: Array2<f64>,
    pub labels: Vec<usize>,
}

/// Labeled data with weather tags (source set or held-out test set).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> LabeledDataset {
        LabeledDataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

/// Splits `n` into integer counts proportional to `mix` (largest remainder).
pub fn apportion(n: usize, mix: &[f64]) -> Vec<usize> {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|m| n as f64 * m / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, e)| (i, e - e.floor())).collect();
    rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = n - counts.iter().sum::<usize>();
    for &(i, _) in rest.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

const SOURCE_ID_BASE: u64 = 1 << 40;
const TEST_ID_BASE: u64 = 1 << 41;

/// Labeled source data for both agents, `n_per_agent` samples each, weather
/// tags split according to `DataConfig::weather_mix`.
pub fn gen_source(world: &World, seed: u64) -> LabeledDataset {
    let cfg = &world.cfg;
    let mut rng = rng::stream(seed, &[tag::SOURCE]);
    let mut samples = Vec::new();
    for agent in Agent::ALL {
        let counts = apportion(cfg.source_per_agent, &cfg.weather_mix);
        for (w, &n) in Weather::ALL.iter().zip(&counts) {
            let spec = world.source_spec(agent, *w);
            for _ in 0..n {
                let (cells, labels) = spec.draw_sample(cfg.grid, cfg.regions, &mut rng);
                samples.push(Sample {
                    id: SOURCE_ID_BASE + samples.len() as u64,
                    agent,
                    weather: *w,
                    cells,
                    labels,
                });
            }
        }
    }
    samples.shuffle(&mut rng);
    LabeledDataset { samples }
}

/// Held-out target data, `test_per_domain` samples per (agent, weather).
pub fn gen_test(world: &World, seed: u64) -> LabeledDataset {
    let cfg = &world.cfg;
    let mut rng = rng::stream(seed, &[tag::TEST]);
    let mut samples = Vec::new();
    for agent in Agent::ALL {
        for w in Weather::ALL {
            let spec = world.target_spec(agent, w);
            for _ in 0..cfg.test_per_domain {
                let (cells, labels) = spec.draw_sample(cfg.grid, cfg.regions, &mut rng);
                samples.push(Sample {
                    id: TEST_ID_BASE + samples.len() as u64,
                    agent,
                    weather: w,
                    cells,
                    labels,
                });
            }
        }
    }
    LabeledDataset { samples }
}

/// Federated population layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_car: usize,
    pub n_drone: usize,
    pub car_samples: (usize, usize),
    pub drone_samples: (usize, usize),
    /// Per-client weather proportions, cars first.
    pub weather_mix: Vec<[f64; 4]>,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, base_mix: [f64; 4], seed: u64) -> ScenarioConfig {
        let (n_car, n_drone) = match scenario {
            Scenario::I => (32, 8),
            Scenario::II | Scenario::III => (32, 32),
        };
        let mut rng = rng::stream(seed, &[tag::TARGET, 0]);
        let n = n_car + n_drone;
        let weather_mix = match scenario {
            Scenario::III => {
                // each agent type cycles through the weathers so all four are covered
                let mut order: Vec<usize> = (0..n_car).map(|i| i % 4).chain((0..n_drone).map(|i| i % 4)).collect();
                order[..n_car].shuffle(&mut rng);
                order[n_car..].shuffle(&mut rng);
                order
                    .into_iter()
                    .map(|w| {
                        let mut m = [0.0; 4];
                        m[w] = 1.0;
                        m
                    })
                    .collect()
            }
            _ => (0..n)
                .map(|_| {
                    // jitter the base mix so clients are heterogeneous but clear stays likely
                    let mut m = [0.0; 4];
                    for (v, b) in m.iter_mut().zip(base_mix) {
                        *v = b * rng.random_range(0.25..1.75);
                    }
                    let s: f64 = m.iter().sum();
                    m.map(|v| v / s)
                })
                .collect(),
        };
        ScenarioConfig {
            scenario,
            n_car,
            n_drone,
            car_samples: (69, 72),
            drone_samples: (24, 25),
            weather_mix,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.n_car + self.n_drone
    }

    pub fn agent_of(&self, client: usize) -> Agent {
        if client < self.n_car {
            Agent::Car
        } else {
            Agent::Drone
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weather_mix.len() != self.n_clients() {
            return Err(Error::Config(format!(
                "{} weather mixes for {} clients",
                self.weather_mix.len(),
                self.n_clients()
            )));
        }
        for (lo, hi) in [self.car_samples, self.drone_samples] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("bad sample range {lo}..={hi}")));
            }
        }
        Ok(())
    }
}

/// Ground truth attached at generation time. Only evaluation code reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth {
    pub labels: Vec<Vec<usize>>,
    pub weather: Vec<Weather>,
}

/// A client's unlabeled local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub agent: Agent,
    sample_ids: Vec<u64>,
    samples: Vec<Array2<f64>>,
    hidden: Option<HiddenTruth>,
}

impl ClientDataset {
    pub fn new(id: usize, agent: Agent, sample_ids: Vec<u64>, samples: Vec<Array2<f64>>) -> Result<Self> {
        if sample_ids.len() != samples.len() {
            return Err(Error::shape("one id per sample required"));
        }
        Ok(ClientDataset {
            id,
            agent,
            sample_ids,
            samples,
            hidden: None,
        })
    }

    pub fn with_hidden(mut self, hidden: HiddenTruth) -> Result<Self> {
        if hidden.labels.len() != self.samples.len() || hidden.weather.len() != self.samples.len() {
            return Err(Error::shape("hidden truth does not match the samples"));
        }
        self.hidden = Some(hidden);
        Ok(self)
    }

    pub fn samples(&self) -> &[Array2<f64>] {
        &self.samples
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Generation-time ground truth, for evaluation only.
    pub fn hidden(&self) -> Option<&HiddenTruth> {
        self.hidden.as_ref()
    }

    /// A copy with the ground truth removed.
    pub fn stripped(&self) -> ClientDataset {
        ClientDataset {
            hidden: None,
            ..self.clone()
        }
    }
}

impl LabeledDataset {
    /// One pseudo-client per agent (ids 0 and 1) carrying the labels as hidden
    /// truth, so a labeled set can go through [`write_clients`].
    pub fn to_clients(&self) -> Result<Vec<ClientDataset>> {
        let mut out = Vec::new();
        for (id, agent) in Agent::ALL.into_iter().enumerate() {
            let mine: Vec<&Sample> = self.samples.iter().filter(|s| s.agent == agent).collect();
            if mine.is_empty() {
                continue;
            }
            let hidden = HiddenTruth {
                labels: mine.iter().map(|s| s.labels.clone()).collect(),
                weather: mine.iter().map(|s| s.weather).collect(),
            };
            let c = ClientDataset::new(
                id,
                agent,
                mine.iter().map(|s| s.id).collect(),
                mine.iter().map(|s| s.cells.clone()).collect(),
            )?;
            out.push(c.with_hidden(hidden)?);
        }
        Ok(out)
    }

    /// Inverse of [`LabeledDataset::to_clients`]; every client must carry ground truth.
    pub fn from_clients(clients: &[ClientDataset]) -> Result<LabeledDataset> {
        let mut samples = Vec::new();
        for c in clients {
            let h = c.hidden().ok_or_else(|| Error::Format {
                what: "dataset",
                detail: format!("client {} has no ground truth to evaluate against", c.id),
            })?;
            for (i, cells) in c.samples.iter().enumerate() {
                samples.push(Sample {
                    id: c.sample_ids[i],
                    agent: c.agent,
                    weather: h.weather[i],
                    cells: cells.clone(),
                    labels: h.labels[i].clone(),
                });
            }
        }
        Ok(LabeledDataset { samples })
    }
}

const CLIENT_ID_BASE: u64 = 0;

/// Generates the federated target population of a scenario.
pub fn gen_target(world: &World, scenario: &ScenarioConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    scenario.validate()?;
    let cfg = &world.cfg;
    let mut next_id = CLIENT_ID_BASE;
    let mut clients = Vec::with_capacity(scenario.n_clients());
    for k in 0..scenario.n_clients() {
        let mut rng = rng::stream(seed, &[tag::TARGET, 1, k as u64]);
        let agent = scenario.agent_of(k);
        let (lo, hi) = match agent {
            Agent::Car => scenario.car_samples,
            Agent::Drone => scenario.drone_samples,
        };
        let n = rng.random_range(lo..=hi);
        let counts = apportion(n, &scenario.weather_mix[k]);
        let mut rows = Vec::with_capacity(n);
        for (w, &m) in Weather::ALL.iter().zip(&counts) {
            let spec = world.target_spec(agent, *w);
            for _ in 0..m {
                let (cells, labels) = spec.draw_sample(cfg.grid, cfg.regions, &mut rng);
                rows.push((cells, labels, *w));
            }
        }
        rows.shuffle(&mut rng);
        let ids: Vec<u64> = (next_id..next_id + rows.len() as u64).collect();
        next_id += rows.len() as u64;
        let mut samples = Vec::with_capacity(rows.len());
        let mut hidden = HiddenTruth {
            labels: Vec::with_capacity(rows.len()),
            weather: Vec::with_capacity(rows.len()),
        };
        for (cells, labels, w) in rows {
            samples.push(cells);
            hidden.labels.push(labels);
            hidden.weather.push(w);
        }
        clients.push(ClientDataset::new(k, agent, ids, samples)?.with_hidden(hidden)?);
    }
    Ok(clients)
}

/// Sum over channels of the mean channel intensity of an `[h, w, channels]`
/// image with three channels.
pub fn sunlit_score(image: ArrayView3<'_, f64>) -> Result<f64> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::usage(format!("sunlit score needs 3 channels, got {ch}")));
    }
    if h * w == 0 {
        return Err(Error::usage("sunlit score of an empty image"));
    }
    if image.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::usage("sunlit score needs non-negative intensities"));
    }
    Ok(image
        .lanes(Axis(2))
        .into_iter()
        .fold([0.0; 3], |mut acc, px| {
            acc.iter_mut().zip(px.iter()).for_each(|(a, v)| *a += v);
            acc
        })
        .iter()
        .map(|s| s / (h * w) as f64)
        .sum())
}

/// Renders the colour channels of a sample as an `[grid, grid, 3]` image in
/// 8-bit range, for brightness diagnostics.
pub fn render(cells: &Array2<f64>, grid: usize) -> Result<Array3<f64>> {
    if cells.nrows() != grid * grid || cells.ncols() < 3 {
        return Err(Error::shape("cells do not form a grid with 3 colour channels"));
    }
    Ok(Array3::from_shape_fn((grid, grid, 3), |(r, c, k)| {
        let v = cells[[r * grid + c, k]];
        (127.5 + 40.0 * v).clamp(0.0, 255.0)
    }))
}

pub const DATASET_FORMAT: &str = "fedhyp-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Writes client datasets as a columnar CSV, one row per cell:
/// `sample_id,client_id,agent,cell,f0..f{d-1},hidden_label,hidden_weather`.
/// The first line is `# fedhyp-dataset v1`. Hidden columns are empty when
/// the dataset carries no ground truth.
pub fn write_clients(path: &Path, clients: &[ClientDataset]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "# {DATASET_FORMAT} v{DATASET_VERSION}").map_err(|e| Error::io(path, e))?;
    let dim = clients
        .iter()
        .find_map(|c| c.samples.first().map(|s| s.ncols()))
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["sample_id", "client_id", "agent", "cell"].map(String::from).to_vec();
    header.extend((0..dim).map(|j| format!("f{j}")));
    header.extend(["hidden_label", "hidden_weather"].map(String::from));
    let fmt_err = |e: csv::Error| Error::Format {
        what: "dataset",
        detail: e.to_string(),
    };
    w.write_record(&header).map_err(fmt_err)?;
    for c in clients {
        for (i, (sid, cells)) in c.sample_ids.iter().zip(&c.samples).enumerate() {
            for (cell, row) in cells.rows().into_iter().enumerate() {
                let mut rec = vec![sid.to_string(), c.id.to_string(), c.agent.name().to_string(), cell.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:e}")));
                match &c.hidden {
                    Some(h) => {
                        rec.push(h.labels[i][cell].to_string());
                        rec.push(h.weather[i].name().to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
                w.write_record(&rec).map_err(fmt_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_clients`].
pub fn read_clients(path: &Path) -> Result<Vec<ClientDataset>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format { what: "dataset", detail };
    let version = first
        .trim()
        .strip_prefix(&format!("# {DATASET_FORMAT} v"))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| bad(format!("missing version line, got {:?}", first.trim())))?;
    if version != DATASET_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut r = csv::Reader::from_reader(reader);
    let dim = r.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(6);

    struct Partial {
        agent: Agent,
        ids: Vec<u64>,
        cells: Vec<Vec<Vec<f64>>>,
        labels: Vec<Vec<Option<usize>>>,
        weather: Vec<Option<Weather>>,
    }
    let mut by_client: BTreeMap<usize, Partial> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("short record {rec:?}")));
        let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| bad(format!("bad number in {rec:?}"))) };
        let sid: u64 = field(0)?.parse().map_err(|_| bad("bad sample id".into()))?;
        let cid: usize = field(1)?.parse().map_err(|_| bad("bad client id".into()))?;
        let agent = Agent::parse(field(2)?).ok_or_else(|| bad("bad agent".into()))?;
        let feats = (0..dim).map(|j| num(4 + j)).collect::<Result<Vec<_>>>()?;
        let label = match field(4 + dim)? {
            "" => None,
            s => Some(s.parse().map_err(|_| bad("bad label".into()))?),
        };
        let weather = match field(5 + dim)? {
            "" => None,
            s => Some(Weather::parse(s).ok_or_else(|| bad("bad weather".into()))?),
        };
        let p = by_client.entry(cid).or_insert_with(|| Partial {
            agent,
            ids: Vec::new(),
            cells: Vec::new(),
            labels: Vec::new(),
            weather: Vec::new(),
        });
        if p.ids.last() != Some(&sid) {
            p.ids.push(sid);
            p.cells.push(Vec::new());
            p.labels.push(Vec::new());
            p.weather.push(weather);
        }
        p.cells.last_mut().expect("pushed").push(feats);
        p.labels.last_mut().expect("pushed").push(label);
    }
    by_client
        .into_iter()
        .map(|(id, p)| {
            let samples = p
                .cells
                .into_iter()
                .map(|rows| {
                    let n = rows.len();
                    Array2::from_shape_vec((n, dim), rows.concat()).map_err(|e| bad(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            let ds = ClientDataset::new(id, p.agent, p.ids, samples)?;
            let labels: Option<Vec<Vec<usize>>> =
                p.labels.into_iter().map(|l| l.into_iter().collect()).collect();
            let weather: Option<Vec<Weather>> = p.weather.into_iter().collect();
            match (labels, weather) {
                (Some(labels), Some(weather)) => ds.with_hidden(HiddenTruth { labels, weather }),
                _ => Ok(ds),
            }
        })
        .collect()
}
