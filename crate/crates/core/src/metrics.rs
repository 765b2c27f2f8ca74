//! Segmentation metrics and the run ledger.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{Agent, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{stack_cells, Mode, ParamVector, SegNet, Weather, WeatherClassifier};

/// Square confusion matrix, rows are labels and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n: usize) -> Self {
        Confusion { n, counts: vec![0; n * n] }
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.n + pred]
    }

    pub fn add(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(Error::usage(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= self.n) {
            return Err(Error::usage(format!("class {bad} out of range for {} classes", self.n)));
        }
        for (&p, &l) in preds.iter().zip(labels) {
            self.counts[l * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn row_sum(&self, label: usize) -> u64 {
        (0..self.n).map(|p| self.get(label, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.n).map(|l| self.get(l, pred)).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` if the class is absent from both
    /// labels and predictions.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let union = self.row_sum(class) + self.col_sum(class) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| (0..self.n).map(|c| self.get(c, c)).sum::<u64>() as f64 / t as f64)
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Confusion> {
    let mut c = Confusion::new(n_classes);
    c.add(preds, labels)?;
    Ok(c)
}

/// Mean IoU over the classes present in labels or predictions.
pub fn miou(conf: &Confusion) -> Option<f64> {
    miou_over(conf, &(0..conf.n).collect::<Vec<_>>())
}

/// Mean IoU restricted to `classes`, skipping undefined ones.
pub fn miou_over(conf: &Confusion, classes: &[usize]) -> Option<f64> {
    let ious: Vec<f64> = classes.iter().filter_map(|&c| conf.iou(c)).collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Per-class IoU averaged over car and drone for `shared` classes, car IoU
/// for the rest, then the mean over classes.
pub fn combined_score(car: &Confusion, drone: &Confusion, shared: &[usize]) -> Result<Option<f64>> {
    if let Some(bad) = shared.iter().find(|&&c| c >= car.n || c >= drone.n) {
        return Err(Error::usage(format!("shared class {bad} missing from a confusion matrix")));
    }
    let mut vals = Vec::new();
    for c in 0..car.n {
        let v = if shared.contains(&c) {
            match (car.iou(c), drone.iou(c)) {
                (Some(a), Some(b)) => Some((a + b) / 2.0),
                (a, b) => a.or(b),
            }
        } else {
            car.iou(c)
        };
        vals.extend(v);
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

/// Relabels predictions through a total mapping.
pub fn class_remap(preds: &[usize], mapping: &[usize]) -> Result<Vec<usize>> {
    preds
        .iter()
        .map(|&p| {
            mapping
                .get(p)
                .copied()
                .ok_or_else(|| Error::usage(format!("class {p} has no mapping")))
        })
        .collect()
}

/// Scores of one model on a labeled evaluation set. Scores are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub car_miou: Option<f64>,
    pub drone_miou: Option<f64>,
    pub all_miou: Option<f64>,
    pub combined: Option<f64>,
    pub per_weather: BTreeMap<Weather, Option<f64>>,
    pub weather_accuracy: Option<f64>,
    pub car: Confusion,
    pub drone: Confusion,
    pub per_weather_confusion: BTreeMap<Weather, Confusion>,
    pub drone_classes: Vec<usize>,
}

impl EvalReport {
    /// Rebuilds every score from the stored confusion matrices.
    pub fn from_confusions(
        car: Confusion,
        drone: Confusion,
        per_weather_confusion: BTreeMap<Weather, Confusion>,
        drone_classes: Vec<usize>,
        weather_accuracy: Option<f64>,
    ) -> Result<EvalReport> {
        let mut all = car.clone();
        all.merge(&drone)?;
        Ok(EvalReport {
            car_miou: miou(&car),
            drone_miou: miou_over(&drone, &drone_classes),
            all_miou: miou(&all),
            combined: combined_score(&car, &drone, &drone_classes)?,
            per_weather: per_weather_confusion.iter().map(|(w, c)| (*w, miou(c))).collect(),
            weather_accuracy,
            car,
            drone,
            per_weather_confusion,
            drone_classes,
        })
    }
}

/// Evaluates `model` sample by sample. With `weather_bn` each sample goes
/// through the bank its predicted weather selects, otherwise through the
/// clear bank.
pub fn evaluate(
    net: &SegNet,
    model: &ParamVector,
    classifier: &WeatherClassifier,
    weather_bn: bool,
    test: &LabeledDataset,
    drone_classes: &[usize],
) -> Result<EvalReport> {
    let n = net.shape.classes;
    let refs: Vec<_> = test.samples.iter().map(|s| &s.cells).collect();
    let predicted = classifier.classify(&refs)?;
    let weather_hits = test.samples.iter().zip(&predicted).filter(|(s, w)| s.weather == **w).count();
    let mut car = Confusion::new(n);
    let mut drone = Confusion::new(n);
    let mut per_weather: BTreeMap<Weather, Confusion> = Weather::ALL.iter().map(|w| (*w, Confusion::new(n))).collect();
    for bank in Weather::ALL {
        let idx: Vec<usize> = (0..test.len())
            .filter(|&i| if weather_bn { predicted[i] == bank } else { bank == Weather::Clear })
            .collect();
        if idx.is_empty() {
            continue;
        }
        // eval mode is row-independent, so one pass per bank is equivalent to per-sample passes
        let x = stack_cells(&idx.iter().map(|&i| refs[i]).collect::<Vec<_>>())?;
        let preds = net.forward_pure(model, x.view(), bank, Mode::Eval)?.predictions();
        let mut offset = 0;
        for &i in &idx {
            let s = &test.samples[i];
            let p = &preds[offset..offset + s.labels.len()];
            offset += s.labels.len();
            match s.agent {
                Agent::Car => car.add(p, &s.labels)?,
                Agent::Drone => drone.add(p, &s.labels)?,
            }
            per_weather.get_mut(&s.weather).expect("all weathers").add(p, &s.labels)?;
        }
    }
    let acc = (!test.is_empty()).then(|| weather_hits as f64 / test.len() as f64);
    EvalReport::from_confusions(car, drone, per_weather, drone_classes.to_vec(), acc)
}

/// Hex SHA-256 of the parameter values and layout.
pub fn digest(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for seg in params.segments() {
        h.update(seg.name.as_bytes());
        for d in &seg.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &seg.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub agent: Agent,
    pub samples: usize,
    pub steps: usize,
    pub loss_st: f64,
    pub loss_cl: f64,
    pub gamma: f64,
    pub trained_banks: Vec<Weather>,
    pub bank_batches: [usize; 4],
    pub skipped_classes: usize,
    pub params_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedClient {
    pub client: usize,
    pub error: String,
}

/// Ledger entry for one round. Round 0 is pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub clients: Vec<ClientRecord>,
    pub failed: Vec<FailedClient>,
    /// Set when no valid update arrived and the global state was kept.
    pub skipped: bool,
    pub gamma: f64,
    pub queue_len: usize,
    pub banks_updated: Vec<Weather>,
    pub proto_counts: BTreeMap<usize, u64>,
    pub model_digest: String,
    pub eval: Option<EvalReport>,
    pub wall_ms: Option<u64>,
}

pub const LEDGER_SCHEMA: &str = "fedhyp-ledger";
pub const LEDGER_VERSION: u32 = 1;

/// First line of every ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerHeader {
    pub schema: String,
    pub version: u32,
    pub config: RunConfig,
}

/// Append-only JSON-lines ledger plus a CSV of headline scores.
///
/// CSV columns: `round,car_miou,drone_miou,all_miou,combined,clear,night,rain,fog,gamma`,
/// scores in percent, empty cells for rounds without evaluation.
pub struct LedgerWriter {
    path: PathBuf,
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    last_round: Option<usize>,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "round", "car_miou", "drone_miou", "all_miou", "combined", "clear", "night", "rain", "fog", "gamma",
];

impl LedgerWriter {
    /// Creates `ledger.jsonl` and `rounds.csv` in `dir`.
    pub fn create(dir: &Path, cfg: &RunConfig) -> Result<LedgerWriter> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ledger.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut jsonl = BufWriter::new(file);
        let header = LedgerHeader {
            schema: LEDGER_SCHEMA.into(),
            version: LEDGER_VERSION,
            config: cfg.clone(),
        };
        let line = serde_json::to_string(&header).expect("header serialises");
        writeln!(jsonl, "{line}").map_err(|e| Error::io(&path, e))?;
        let csv_path = dir.join("rounds.csv");
        let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| Error::Format {
            what: "csv",
            detail: e.to_string(),
        })?;
        csv.write_record(CSV_COLUMNS).map_err(|e| Error::Format {
            what: "csv",
            detail: e.to_string(),
        })?;
        Ok(LedgerWriter {
            path,
            jsonl,
            csv,
            last_round: None,
        })
    }

    pub fn append(&mut self, rec: &RoundRecord) -> Result<()> {
        if self.last_round.is_some_and(|r| rec.round <= r) {
            return Err(Error::usage(format!("ledger rounds must increase, got {} after {:?}", rec.round, self.last_round)));
        }
        self.last_round = Some(rec.round);
        let line = serde_json::to_string(rec).expect("record serialises");
        writeln!(self.jsonl, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.jsonl.flush().map_err(|e| Error::io(&self.path, e))?;
        let pct = |v: Option<f64>| v.map(|x| format!("{:.4}", 100.0 * x)).unwrap_or_default();
        let mut row = vec![rec.round.to_string()];
        match &rec.eval {
            Some(e) => {
                row.extend([e.car_miou, e.drone_miou, e.all_miou, e.combined].map(pct));
                row.extend(Weather::ALL.iter().map(|w| pct(e.per_weather.get(w).copied().flatten())));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 8)),
        }
        row.push(format!("{}", rec.gamma));
        let err = |e: csv::Error| Error::Format {
            what: "csv",
            detail: e.to_string(),
        };
        self.csv.write_record(&row).map_err(err)?;
        self.csv.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a ledger back into its header and records.
pub fn read_ledger(path: &Path) -> Result<(LedgerHeader, Vec<RoundRecord>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format { what: "ledger", detail };
    let mut lines = text.lines();
    let header: LedgerHeader =
        serde_json::from_str(lines.next().ok_or_else(|| bad("empty ledger".into()))?).map_err(|e| bad(e.to_string()))?;
    if header.schema != LEDGER_SCHEMA || header.version != LEDGER_VERSION {
        return Err(bad(format!("unsupported ledger {} v{}", header.schema, header.version)));
    }
    let records = lines
        .map(|l| serde_json::from_str(l).map_err(|e| bad(e.to_string())))
        .collect::<Result<Vec<RoundRecord>>>()?;
    Ok((header, records))
}
