//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Run with
//! `cargo test -p fedhyp --test acceptance`.

#![allow(clippy::field_reassign_with_default)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fedhyp::config::Toggles;
use fedhyp::data::{self, Agent, Scenario, ScenarioConfig, World};
use fedhyp::hypgeom::{self, raw, GradInputs, GradOp};
use fedhyp::metrics::RoundRecord;
use fedhyp::model::ParamVector;
use fedhyp::prototype::{self, ClassEstimate, EmaMode, Geometry, PrototypeSet};
use fedhyp::server::{self, ModelContribution, RoundPlan};
use fedhyp::{Curvature, ExpMapVariant, RunConfig, Simulator, Weather};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_ball_point(rng: &mut ChaCha8Rng, dim: usize, gamma: f64, max_frac: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&dir).max(1e-12);
    let r = rng.random_range(0.0..max_frac) / gamma.sqrt();
    dir.iter().map(|d| d / n * r).collect()
}

fn hyperbolic_identities() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    let cases = 2000;
    let mut closure_fail = 0;
    for _ in 0..cases {
        let dim = rng.random_range(2..9);
        let gamma = rng.random_range(0.01..2.0);
        let x = random_ball_point(&mut rng, dim, gamma, 0.99);
        let y = random_ball_point(&mut rng, dim, gamma, 0.99);
        let zero = vec![0.0; dim];

        let id = raw::mobius_add(&zero, &x, gamma).unwrap();
        let e: Vec<f64> = id.iter().zip(&x).map(|(a, b)| a - b).collect();
        worst[0] = worst[0].max(norm(&e) / norm(&x).max(1e-12));

        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        worst[1] = worst[1].max(norm(&raw::mobius_add(&neg, &x, gamma).unwrap()));

        let z = raw::mobius_add(&x, &y, gamma).unwrap();
        if gamma * norm(&z).powi(2) >= 1.0 {
            closure_fail += 1;
        }

        let a = random_ball_point(&mut rng, dim, 1.0, 0.9);
        let b = random_ball_point(&mut rng, dim, 1.0, 0.9);
        let eu = norm(&a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>());
        let d = raw::distance(&a, &b, 1e-8);
        if eu > 0.0 {
            worst[3] = worst[3].max((d - 2.0 * eu).abs() / eu);
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst[0] < 1e-12 && worst[1] < 1e-9 && closure_fail == 0 && worst[3] < 1e-3 && elapsed < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "{cases} cases: identity {:.1e}, inverse {:.1e}, closure failures {closure_fail}, flat-limit rel {:.1e} (< 1e-3), {:.2?} (< 5 s)",
            worst[0], worst[1], worst[3], elapsed
        ),
    )
}

fn frechet_oracle(points: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let cost = |m: &[f64]| points.iter().map(|p| raw::distance(m, p, gamma).powi(2)).sum::<f64>();
    let dim = points[0].len();
    let mut m: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64).collect();
    let mut step = 0.1;
    let mut f = cost(&m);
    for _ in 0..5000 {
        let g = hypgeom::central_diff(cost, &m, 1e-7);
        let gn = norm(&g);
        if gn < 1e-11 {
            break;
        }
        loop {
            let cand: Vec<f64> = m.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let fc = cost(&cand);
            if gamma * norm(&cand).powi(2) < 1.0 && fc < f {
                m = cand;
                f = fc;
                step *= 1.2;
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                return m;
            }
        }
    }
    m
}

fn midpoint_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut worst_pair: f64 = 0.0;
    for _ in 0..50 {
        let gamma = rng.random_range(0.1..1.0);
        let dim = rng.random_range(2..5);
        let n = rng.random_range(3..=10);
        let centre = random_ball_point(&mut rng, dim, gamma, 0.8);
        // tight clusters: offsets of about 0.1 in hyperbolic distance, i.e. tangent
        // vectors scaled down by the conformal factor at the centre
        let lambda = 2.0 / (1.0 - gamma * norm(&centre).powi(2));
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| 0.1 / lambda * rng.sample::<f64, _>(StandardNormal)).collect();
                raw::exp_map(&centre, &v, gamma, ExpMapVariant::Standard)
            })
            .collect();
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let mid = raw::midpoint(&refs, None, gamma).unwrap();
        let oracle = frechet_oracle(&points, gamma);
        worst = worst.max(raw::distance(&mid, &oracle, gamma));
        // two points: the midpoint is the exact minimiser
        let pair = raw::midpoint(&refs[..2], None, gamma).unwrap();
        worst_pair = worst_pair.max(raw::distance(&pair, &frechet_oracle(&points[..2], gamma), gamma));
    }
    let elapsed = t0.elapsed();
    outcome(
        worst < 1e-2 && elapsed < Duration::from_secs(30),
        format!(
            "50 sets: max ball distance to the brute-force minimiser {worst:.2e} (< 1e-2; two-point sets {worst_pair:.1e}), {elapsed:.2?} (< 30 s)"
        ),
    )
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let h = 1e-5;
    let mut report = Vec::new();
    let mut pass = true;
    let ops = [
        ("distance", GradOp::Distance),
        ("exp map (printed)", GradOp::ExpMap(ExpMapVariant::Printed)),
        ("exp map (standard)", GradOp::ExpMap(ExpMapVariant::Standard)),
    ];
    for (name, op) in ops {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let dim = rng.random_range(2..6);
            let gamma = rng.random_range(0.01..2.0);
            let x = random_ball_point(&mut rng, dim, gamma, 0.9);
            let y = match op {
                GradOp::ExpMap(ExpMapVariant::Printed) => loop {
                    // stay clear of the printed map's pole at gamma |v|^2 = 1
                    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
                    if (1.0 - gamma * norm(&v).powi(2)).abs() > 0.2 {
                        break v;
                    }
                },
                GradOp::ExpMap(_) => (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
                _ => random_ball_point(&mut rng, dim, gamma, 0.9),
            };
            let upstream = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inputs = GradInputs { x, y, gamma, upstream };
            worst = worst.max(hypgeom::grad_check(op, &inputs, h).unwrap());
        }
        pass &= worst < 1e-4;
        report.push(format!("{name} {worst:.1e}"));
    }

    // clustering loss, including its curvature partial
    let mut worst_cl: f64 = 0.0;
    let mut worst_gamma: f64 = 0.0;
    for trial in 0..100 {
        let g: f64 = rng.random_range(0.05..1.5);
        let c = Curvature::new(g).unwrap();
        let n = rng.random_range(3..12);
        let dim = 3;
        let var = if trial % 2 == 0 { ExpMapVariant::Printed } else { ExpMapVariant::Standard };
        let feats = ndarray::Array2::from_shape_fn((n, dim), |_| rng.random_range(-0.5..0.5) / g.sqrt());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut protos = PrototypeSet::new();
        for k in 0..3 {
            protos.insert(k, random_ball_point(&mut rng, dim, g, 0.8), Geometry::Hyperbolic, c);
        }
        let grad = prototype::clustering_loss_grad(feats.view(), &labels, &protos, Geometry::Hyperbolic, c, var).unwrap();
        let mut flat: Vec<f64> = feats.iter().copied().collect();
        flat.push(g);
        let f = |p: &[f64]| {
            let m = ndarray::Array2::from_shape_vec((n, dim), p[..n * dim].to_vec()).unwrap();
            let c = Curvature::new(p[n * dim]).unwrap();
            prototype::clustering_loss(m.view(), &labels, &protos, Geometry::Hyperbolic, c, var).unwrap().0
        };
        let numeric = hypgeom::central_diff(f, &flat, h);
        let mut analytic: Vec<f64> = grad.d_features.iter().copied().collect();
        analytic.push(grad.d_gamma);
        worst_cl = worst_cl.max(hypgeom::max_rel_error(&analytic, &numeric));
        worst_gamma = worst_gamma.max(hypgeom::max_rel_error(&analytic[n * dim..], &numeric[n * dim..]));
    }
    pass &= worst_cl < 1e-4 && worst_gamma < 1e-4;
    report.push(format!("clustering loss {worst_cl:.1e}"));
    report.push(format!("gamma {worst_gamma:.1e}"));
    outcome(pass, format!("max relative error over 100 cases each (< 1e-4): {}", report.join(", ")))
}

fn scalar(v: f64) -> ParamVector {
    let mut p = ParamVector::new();
    p.push("w", vec![1], vec![v]).unwrap();
    p
}

fn queue_case(values: &[f64], previous: f64, queue: &[f64]) -> f64 {
    let models: Vec<ParamVector> = values.iter().map(|&v| scalar(v)).collect();
    let none = BTreeSet::new();
    let contribs: Vec<_> = models
        .iter()
        .map(|m| ModelContribution {
            params: m,
            trained_banks: &none,
            sample_count: 1,
        })
        .collect();
    let q: VecDeque<ParamVector> = queue.iter().map(|&v| scalar(v)).collect();
    server::aggregate_models(&contribs, &scalar(previous), &q, false).unwrap().data("w").unwrap()[0]
}

fn aggregation_algebra() -> Outcome {
    let mut fails = Vec::new();
    // queue: Q = 0, 1, 5
    let cases: [(&[f64], f64, &[f64], f64); 3] = [
        (&[2.0, 4.0], 0.0, &[], 3.0),
        (&[2.0, 4.0], 0.0, &[0.0], 1.5),
        (&[2.0, 4.0], 0.0, &[0.0, 1.0, 2.0, 3.0, 9.0], (3.0 + 15.0) / 6.0),
    ];
    for (values, prev, queue, want) in cases {
        let got = queue_case(values, prev, queue);
        if got != want {
            fails.push(format!("queue {queue:?}: {got} != {want}"));
        }
    }

    // prototypes: normalised weights; dyadic values make every evaluation order exact
    let c = Curvature::new(1.0).unwrap();
    let set = |coords: Vec<f64>, count: u64| {
        let mut p = PrototypeSet::new();
        p.insert(0, coords, Geometry::Euclidean, c);
        p.set_count(0, count);
        p
    };
    let (a, b) = (set(vec![0.25, 0.0], 1), set(vec![0.0, 0.5], 3));
    let prev = set(vec![0.5, -0.25], 0);
    let got = server::aggregate_prototypes(&[&a, &b], &prev, 0.75, Geometry::Euclidean, c).unwrap();
    // 0.75 * prev + 0.25 * (0.25 a + 0.75 b)
    let want = [0.390625, -0.09375];
    if got.get(0).unwrap() != want {
        fails.push(format!("prototypes {:?} != {want:?}", got.get(0)));
    }
    // the 0.85 case: 0.85 is not a binary fraction, so compare to within a few ulps
    let (a, b) = (set(vec![0.4, 0.0], 1), set(vec![0.0, 0.8], 3));
    let got = server::aggregate_prototypes(&[&a, &b], &set(vec![0.0, 0.0], 0), 0.85, Geometry::Euclidean, c).unwrap();
    let want = [0.85 * 0.0 + 0.15 * (0.25 * 0.4), 0.85 * 0.0 + 0.15 * (0.75 * 0.8)];
    let ulps = got.get(0).unwrap().iter().zip(&want).map(|(g, w)| (g - w).abs() / (w * f64::EPSILON)).fold(0.0, f64::max);
    if ulps > 4.0 {
        fails.push(format!("prototypes with smoothing 0.85 off by {ulps:.1} ulp"));
    }
    let same = server::aggregate_prototypes(&[&a, &a], &a, 0.3, Geometry::Euclidean, c).unwrap();
    if same.get(0) != a.get(0) {
        fails.push("identical prototypes are not a fixed point".into());
    }

    // curvature FedAvg
    let g = server::aggregate_curvature(&[(Curvature::new(0.1).unwrap(), 10), (Curvature::new(0.3).unwrap(), 30)]).unwrap();
    if g.gamma() != 0.25 {
        fails.push(format!("curvature {} != 0.25", g.gamma()));
    }
    let pass = fails.is_empty();
    outcome(
        pass,
        if pass {
            "queue Q=0,1,5 -> 3, 1.5, 3; prototype weights 0.25/0.75 exact (0.85 smoothing within 4 ulp); curvature 0.25 exact".into()
        } else {
            fails.join("; ")
        },
    )
}

fn ema() -> Outcome {
    let c = Curvature::new(1.0).unwrap();
    let target = vec![0.3, -0.4];
    let start = vec![-0.2, 0.1];
    let mut est = BTreeMap::new();
    est.insert(0, ClassEstimate { coords: target.clone(), count: 1 });
    let mut base = PrototypeSet::new();
    base.insert(0, start.clone(), Geometry::Hyperbolic, c);

    let mut one = base.clone();
    one.ema_update(&est, 1.0, Geometry::Hyperbolic, EmaMode::Coordinate, c).unwrap();
    let mut zero = base.clone();
    zero.ema_update(&est, 0.0, Geometry::Hyperbolic, EmaMode::Coordinate, c).unwrap();
    let degenerate = one.get(0) == base.get(0) && zero.get(0) == Some(&target[..]);

    let beta: f64 = 0.85;
    let gap0 = norm(&start.iter().zip(&target).map(|(a, b)| a - b).collect::<Vec<_>>());
    let mut p = base;
    let mut within = true;
    let mut last = gap0;
    for t in 1..=100 {
        p.ema_update(&est, beta, Geometry::Hyperbolic, EmaMode::Coordinate, c).unwrap();
        last = norm(&p.get(0).unwrap().iter().zip(&target).map(|(a, b)| a - b).collect::<Vec<_>>());
        // plus one rounding unit per step on coordinates of order one
        within &= last <= beta.powi(t) * gap0 + t as f64 * f64::EPSILON;
    }
    outcome(
        degenerate && within,
        format!("beta=1 keeps, beta=0 jumps: {degenerate}; beta=0.85 within beta^t bound for 100 steps: {within} (final gap {last:.1e})"),
    )
}

fn bits(p: &ParamVector, weather: Weather) -> Vec<u64> {
    let prefix = format!("bn.{weather}.");
    p.segments()
        .iter()
        .filter(|s| s.name.starts_with(&prefix))
        .flat_map(|s| s.data.iter().map(|v| v.to_bits()))
        .collect()
}

fn weather_bn_partition() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.scenario = Scenario::III;
    cfg.rounds = 2;
    let mut sim = Simulator::new(cfg).unwrap();
    // one scripted round first, so the banks differ from their common initial value
    sim.step().unwrap();
    // Rain clients: rain by ground truth and routed to the rain bank by the classifier
    let rain: Vec<usize> = sim
        .clients()
        .iter()
        .filter(|c| c.hidden().is_some_and(|h| h.weather.iter().all(|w| *w == Weather::Rain)))
        .filter(|c| {
            let refs: Vec<_> = c.samples().iter().collect();
            sim.classifier().classify(&refs).unwrap().iter().all(|w| *w == Weather::Rain)
        })
        .map(|c| c.id)
        .take(5)
        .collect();
    assert!(!rain.is_empty(), "no rain client routed entirely to the rain bank");
    let before = sim.state().model.clone();
    let round = sim.state().round + 1;
    let rec = sim
        .step_with(RoundPlan {
            round,
            participants: rain.clone(),
            seed: 0,
        })
        .unwrap()
        .clone();
    let after = &sim.state().model;
    let untouched = [Weather::Clear, Weather::Night, Weather::Fog]
        .iter()
        .all(|w| bits(&before, *w) == bits(after, *w));
    let changed = bits(&before, Weather::Rain) != bits(after, Weather::Rain);
    outcome(
        untouched && changed,
        format!(
            "clients {rain:?}, banks updated {:?}: clear/night/fog bit-identical {untouched}, rain changed {changed}",
            rec.banks_updated
        ),
    )
}

fn combined_series(records: &[RoundRecord], from: usize) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.round >= from)
        .filter_map(|r| r.eval.as_ref().and_then(|e| e.combined))
        .map(|v| 100.0 * v)
        .collect()
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

struct Runs {
    seeds: Vec<u64>,
    full: Vec<Vec<RoundRecord>>,
    base: Vec<Vec<RoundRecord>>,
    base_queue: Vec<Vec<RoundRecord>>,
    elapsed: Duration,
}

fn directional_runs() -> Runs {
    let t0 = Instant::now();
    let seeds = vec![0u64, 1, 2];
    let mut base_queue_toggles = Toggles::baseline();
    base_queue_toggles.queue_agg = true;
    let variants = [Toggles::default(), Toggles::baseline(), base_queue_toggles];
    let jobs: Vec<(u64, Toggles)> = seeds
        .iter()
        .flat_map(|&s| variants.iter().map(move |t| (s, t.clone())))
        .collect();
    let results: Vec<Vec<RoundRecord>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(seed, toggles)| {
                scope.spawn(move || {
                    let mut cfg = RunConfig::default();
                    cfg.seed = *seed;
                    cfg.scenario = Scenario::I;
                    cfg.toggles = toggles.clone();
                    server::run(cfg).unwrap()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut it = results.into_iter();
    let (mut full, mut base, mut base_queue) = (Vec::new(), Vec::new(), Vec::new());
    for _ in &seeds {
        full.push(it.next().unwrap());
        base.push(it.next().unwrap());
        base_queue.push(it.next().unwrap());
    }
    Runs {
        seeds,
        full,
        base,
        base_queue,
        elapsed: t0.elapsed(),
    }
}

fn directional(runs: &Runs) -> Outcome {
    let last = |r: &Vec<RoundRecord>| *combined_series(r, 0).last().unwrap();
    let first = |r: &Vec<RoundRecord>| combined_series(r, 0)[0];
    let n = runs.seeds.len() as f64;
    let source = runs.full.iter().map(first).sum::<f64>() / n;
    let full = runs.full.iter().map(last).sum::<f64>() / n;
    let base = runs.base.iter().map(last).sum::<f64>() / n;
    let per_seed: Vec<String> = runs
        .seeds
        .iter()
        .enumerate()
        .map(|(i, s)| format!("seed {s}: {:.1}/{:.1}/{:.1}", first(&runs.full[i]), last(&runs.full[i]), last(&runs.base[i])))
        .collect();
    let pass = full >= source + 5.0 && full >= base + 1.0 && runs.elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "source-only {source:.2}, adapted {full:.2} (+{:.2}, need +5), baseline {base:.2} (full +{:.2}, need +1), {:.1?} for all runs (< 10 min) [{}]",
            full - source,
            full - base,
            runs.elapsed,
            per_seed.join("; ")
        ),
    )
}

fn queue_stability(runs: &Runs) -> Outcome {
    let n = runs.seeds.len() as f64;
    let var_base: Vec<f64> = runs.base.iter().map(|r| sample_variance(&combined_series(r, 50))).collect();
    let var_queue: Vec<f64> = runs.base_queue.iter().map(|r| sample_variance(&combined_series(r, 50))).collect();
    let mb = var_base.iter().sum::<f64>() / n;
    let mq = var_queue.iter().sum::<f64>() / n;
    outcome(
        mq < mb,
        format!(
            "variance of the combined score over rounds 50-100: with queue {mq:.3} vs without {mb:.3} (per seed {:?} vs {:?})",
            var_queue.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            var_base.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn determinism() -> Outcome {
    let ledger = |workers: usize| {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.rounds = 6;
        cfg.workers = workers;
        let dir = tempfile::tempdir().unwrap();
        let mut w = fedhyp::metrics::LedgerWriter::create(dir.path(), &cfg).unwrap();
        for rec in server::run(cfg).unwrap() {
            w.append(&rec).unwrap();
        }
        drop(w);
        let jsonl = std::fs::read(dir.path().join("ledger.jsonl")).unwrap();
        let csv = std::fs::read(dir.path().join("rounds.csv")).unwrap();
        // the header echoes the worker count; compare the records only
        let body: Vec<u8> = jsonl.splitn(2, |b| *b == b'\n').nth(1).unwrap().to_vec();
        (jsonl, body, csv)
    };
    let a = ledger(1);
    let b = ledger(1);
    let c = ledger(4);
    let same = a == b;
    let workers = a.1 == c.1 && a.2 == c.2;
    outcome(
        same && workers,
        format!("two runs byte-identical: {same}; records identical with 4 workers: {workers}"),
    )
}

fn scenario_populations() -> Outcome {
    let cfg = RunConfig::default();
    let world = World::generate(&cfg.data, 0).unwrap();
    let mut fails = Vec::new();
    let mut summary = Vec::new();
    for (scenario, n_car, n_drone) in [(Scenario::I, 32, 8), (Scenario::II, 32, 32), (Scenario::III, 32, 32)] {
        let sc = ScenarioConfig::new(scenario, cfg.data.weather_mix, 0);
        let clients = data::gen_target(&world, &sc, 0).unwrap();
        let cars = clients.iter().filter(|c| c.agent == Agent::Car).count();
        let drones = clients.iter().filter(|c| c.agent == Agent::Drone).count();
        if (cars, drones) != (n_car, n_drone) {
            fails.push(format!("{scenario:?}: {cars}+{drones}"));
        }
        for c in &clients {
            let (lo, hi) = if c.agent == Agent::Car { (69, 72) } else { (24, 25) };
            if !(lo..=hi).contains(&c.len()) {
                fails.push(format!("{scenario:?} client {} has {} samples", c.id, c.len()));
            }
        }
        if scenario == Scenario::III {
            let single = clients.iter().all(|c| {
                let w: BTreeSet<Weather> = c.hidden().unwrap().weather.iter().copied().collect();
                w.len() == 1
            });
            if !single {
                fails.push("scenario III client with mixed weather".into());
            }
        }
        summary.push(format!("{} = {cars}+{drones}", clients.len()));
    }
    let pass = fails.is_empty();
    outcome(
        pass,
        if pass {
            format!("{}; cars 69-72, drones 24-25 samples; III single weather per client", summary.join(", "))
        } else {
            fails.join("; ")
        },
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] {n:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "hyperbolic identities", hyperbolic_identities());
    record(2, "midpoint vs brute-force mean", midpoint_oracle());
    record(3, "gradient checks", gradient_checks());
    record(4, "aggregation algebra", aggregation_algebra());
    record(5, "prototype smoothing", ema());
    record(6, "weather batch-norm partition", weather_bn_partition());
    let runs = directional_runs();
    record(7, "adaptation beats source-only and baseline", directional(&runs));
    record(8, "queue reduces late-round variance", queue_stability(&runs));
    record(9, "determinism", determinism());
    record(10, "scenario populations", scenario_populations());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
