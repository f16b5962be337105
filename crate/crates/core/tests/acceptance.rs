//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng};

use fedtraj::diffcore::{checkpoint, OptimizerState, ParameterVector};
use fedtraj::experiment::{self, ExperimentConfig};
use fedtraj::fedsim::{self, aggregate, comm_cost, update_lambda, FedConfig};
use fedtraj::gradcheck::check_gradients;
use fedtraj::metrics::{mae_rmse_of, point_errors, recall_precision};
use fedtraj::model::{constraint_mask, LteConfig, LteModel, ModelSection};
use fedtraj::roadnet::{generate_grid_network, project_onto_segment, GridSpec, MapMatchedPoint, RoadNetwork};
use fedtraj::seed::Rng;
use fedtraj::trajdata::{
    downsample, generate_synthetic_trajectories, make_pairs, IncompleteTrajectory, MapMatchedTrajectory,
    MatchLattice, MatchParams, PartitionMode, RawPoint, RawTrajectory,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// 1. gradient fidelity

fn hexagon() -> RoadNetwork {
    let coords: Vec<(f64, f64)> = (0..6)
        .map(|i| {
            let a = i as f64 * std::f64::consts::PI / 3.0;
            (150.0 + 120.0 * a.cos(), 150.0 + 120.0 * a.sin())
        })
        .collect();
    let links: Vec<(usize, usize)> = (0..6).flat_map(|i| [(i, (i + 1) % 6), ((i + 1) % 6, i)]).collect();
    RoadNetwork::new(&coords, &links).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let net = hexagon();
    let grid = GridSpec::covering(&net, 60.0).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = Rng::seed_from_u64(1000 + seed);
        let section = ModelSection {
            hidden_dim: 8,
            seg_embed_dim: 4,
            dropout: 0.5,
            blocks: 1 + (seed as usize % 2),
            ..ModelSection::default()
        };
        let cfg = LteConfig::from_section(&section, &net, &grid, 5).unwrap();
        if cfg.num_segments != 12 {
            return Err(format!("fixture has {} segments", cfg.num_segments));
        }
        let points: Vec<MapMatchedPoint> = (0..5)
            .map(|k| MapMatchedPoint::new(rng.gen_range(0..12), rng.gen_range(0.05..0.95), k as f64 * 15.0))
            .collect();
        let truth = MapMatchedTrajectory::new(points.clone(), 15.0).unwrap();
        let mut kept = vec![points[0]];
        kept.extend(points[1..4].iter().filter(|_| rng.gen_bool(0.3)).copied());
        kept.push(points[4]);
        let icp = IncompleteTrajectory::new(kept, 15.0).unwrap();
        let student = LteModel::new(cfg.clone(), seed).unwrap();
        let teacher = LteModel::new(cfg, seed + 500).unwrap();
        let sample = student.prepare(&icp, Some(&truth), &net, &grid).unwrap();
        let lambda = rng.gen_range(0.1..2.0);
        let report = check_gradients(&student, &sample, Some(&teacher), 1.0, lambda, seed, 1e-4).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-3, || format!("max relative error {worst:.3e}"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {worst:.2e} over 20 seeds in {:.1}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 2. lambda schedule

fn lambda_schedule() -> Outcome {
    let cases = [
        // (acc_tea, acc_stu, l_t, lambda0, expected)
        (0.3, 0.5, 0.6, 5.0, 0.0),
        (0.5, 0.5, 0.6, 5.0, 0.0),
        (0.5, 0.5, 0.4, 5.0, 0.5),
        (0.6, 0.6, 0.6, 2.0, 0.2),
        (0.7, 0.5, 0.6, 5.0, 5.0),
        (0.9, 0.1, 0.4, 3.0, 3.0),
        (0.45, 0.2, 0.9, 1.0, 1.0),
        (0.6, 0.5, 0.4, 5.0, 5.0 * 10f64.powf(-0.5)),
    ];
    for (tea, stu, lt, l0, want) in cases {
        let got = update_lambda(tea, stu, lt, l0).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-9, || format!("update_lambda({tea}, {stu}, {lt}, {l0}) = {got}, want {want}"))?;
    }
    Ok(format!("{} table rows exact to 1e-9", cases.len()))
}

// ---------------------------------------------------------------------------
// 3. aggregation oracle

fn aggregation_oracle() -> Outcome {
    let mut rng = Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let k = rng.gen_range(1..=16);
        let n = rng.gen_range(1..400);
        let layout = Arc::new(fedtraj::diffcore::Layout::new(vec![fedtraj::diffcore::Segment::new("p", &[n], 1)]));
        let vecs: Vec<ParameterVector> = (0..k)
            .map(|_| {
                let v = (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
                ParameterVector::new(layout.clone(), v).unwrap()
            })
            .collect();
        let got = aggregate(&vecs).map_err(|e| e.to_string())?;
        for i in 0..n {
            let mut sum = 0.0f64;
            for v in vecs.iter().rev() {
                sum += v.values()[i] as f64;
            }
            let oracle = sum / k as f64;
            let rel = (got.values()[i] as f64 - oracle).abs() / oracle.abs().max(1e-30);
            worst = worst.max(if oracle.abs() < 1e-6 { (got.values()[i] as f64 - oracle).abs() } else { rel });
        }
        let same = aggregate(&vec![vecs[0].clone(); k]).map_err(|e| e.to_string())?;
        ensure(same == vecs[0], || format!("trial {trial}: identical vectors are not a fixed point"))?;
    }
    ensure(worst < 1e-6, || format!("worst relative deviation {worst:.3e}"))?;
    Ok(format!("worst relative deviation {worst:.2e}; fixed point exact"))
}

// ---------------------------------------------------------------------------
// 4. constraint mask

fn constraint_mask_correctness() -> Outcome {
    let line = RoadNetwork::new(&[(0.0, 0.0), (1000.0, 0.0)], &[(0, 1)]).unwrap();
    let w = constraint_mask(&line, (400.0, 125f64.sqrt()), 125.0, 300.0)[0];
    ensure((w - (-1f64).exp()).abs() <= 1e-9, || format!("weight at sqrt(125) is {w}"))?;

    let net = generate_grid_network(6, 6, 100.0, 0).unwrap();
    let grid = GridSpec::covering(&net, 100.0).unwrap();
    let section = ModelSection { hidden_dim: 12, seg_embed_dim: 6, ..ModelSection::default() };
    let cfg = LteConfig::from_section(&section, &net, &grid, 10).unwrap();
    let mut rng = Rng::seed_from_u64(4);
    let mut steps = 0;
    for seed in 0..20 {
        let model = LteModel::new(cfg.clone(), seed).unwrap();
        let mut hidden = model.initial_hidden(&[0.0; 12]);
        let (mut e, mut r) = (0usize, 0.5);
        for _ in 0..25 {
            let anchor = (rng.gen_range(-50.0..550.0), rng.gen_range(-50.0..550.0));
            let radius = rng.gen_range(30.0..300.0);
            let mask = constraint_mask(&net, anchor, 125.0, radius);
            let out = model.decode_step(&hidden, e, r, &mask).map_err(|er| er.to_string())?;
            let sum: f64 = out.probs.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-6, || format!("probabilities sum to {sum}"))?;
            for (k, edge) in net.edges().iter().enumerate() {
                let (d, _) = net.project(edge.id, anchor.0, anchor.1).unwrap();
                if d > radius && mask.iter().any(|m| *m > 0.0) {
                    ensure(out.probs[k] == 0.0, || format!("edge {k} at {d:.1} m > {radius:.1} m has p = {}", out.probs[k]))?;
                }
            }
            hidden = out.hidden;
            e = out.segment;
            r = out.ratio;
            steps += 1;
        }
    }
    Ok(format!("{steps} decode steps normalized; out-of-radius mass exactly 0; e^-1 weight exact"))
}

// ---------------------------------------------------------------------------
// 5. network distance oracle

fn random_network(rng: &mut Rng, max_nodes: usize) -> RoadNetwork {
    let n = rng.gen_range(2..=max_nodes);
    let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..1000.0), rng.gen_range(0.0..1000.0))).collect();
    let mut links = Vec::new();
    for from in 0..n {
        for _ in 0..rng.gen_range(1..=3) {
            let to = rng.gen_range(0..n);
            if to != from && !links.contains(&(from, to)) {
                links.push((from, to));
            }
        }
    }
    RoadNetwork::new(&coords, &links).unwrap()
}

/// Directed distance by inserting both points as graph nodes and running a
/// quadratic-time Dijkstra on the augmented graph.
fn augmented_distance(net: &RoadNetwork, a: &MapMatchedPoint, b: &MapMatchedPoint) -> Option<f64> {
    let n = net.nodes().len();
    let (ia, ib) = (n, n + 1);
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n + 2];
    for e in net.edges() {
        let mut stops: Vec<(f64, usize)> = Vec::new();
        if a.edge == e.id {
            stops.push((a.r, ia));
        }
        if b.edge == e.id {
            stops.push((b.r, ib));
        }
        stops.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        let mut prev = (0.0, e.from);
        for &(r, node) in &stops {
            adj[prev.1].push((node, (r - prev.0) * e.length));
            prev = (r, node);
        }
        adj[prev.1].push((e.to, (1.0 - prev.0) * e.length));
    }
    let mut dist = vec![f64::INFINITY; n + 2];
    let mut done = vec![false; n + 2];
    dist[ia] = 0.0;
    loop {
        let mut best = None;
        for v in 0..n + 2 {
            if !done[v] && dist[v].is_finite() && best.is_none_or(|u: usize| dist[v] < dist[u]) {
                best = Some(v);
            }
        }
        let Some(u) = best else { break };
        done[u] = true;
        for &(v, w) in &adj[u] {
            if dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
            }
        }
    }
    // a and b at the same spot on one edge
    if a.edge == b.edge && a.r == b.r {
        return Some(0.0);
    }
    dist[ib].is_finite().then_some(dist[ib])
}

fn rn_distance_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(5);
    let mut compared = 0;
    for _ in 0..100 {
        let net = random_network(&mut rng, 25);
        for _ in 0..20 {
            let pick = |rng: &mut Rng| MapMatchedPoint::new(rng.gen_range(0..net.num_edges()), rng.gen_range(0.0..=1.0), 0.0);
            let a = pick(&mut rng);
            let b = if rng.gen_bool(0.2) { MapMatchedPoint::new(a.edge, rng.gen_range(0.0..=1.0), 0.0) } else { pick(&mut rng) };
            let want = match (augmented_distance(&net, &a, &b), augmented_distance(&net, &b, &a)) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (x, y) => x.or(y),
            };
            let got = net.rn_distance(&a, &b).map_err(|e| e.to_string())?;
            match (got, want) {
                (None, None) => {}
                (Some(g), Some(w)) => {
                    ensure((g - w).abs() <= 1e-6 * w.max(1.0), || format!("{a:?} {b:?}: {g} vs oracle {w}"))?;
                }
                _ => return Err(format!("{a:?} {b:?}: {got:?} vs oracle {want:?}")),
            }
            compared += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("{compared} pairs on 100 networks agree in {:.2}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 6. HMM matcher oracle

fn hmm_oracle() -> Outcome {
    let params = MatchParams { sigma: 10.0, beta: 5.0, radius: 60.0, epsilon: 15.0 };
    let mut total_sequences = 0u64;
    let mut ties = 0;
    for seed in 0..100u64 {
        let mut rng = Rng::seed_from_u64(600 + seed);
        // bidirectional ring plus chords, at most 12 directed edges
        let n = rng.gen_range(3..=5);
        let coords: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n as f64 + rng.gen_range(-0.2..0.2);
                (200.0 + 150.0 * a.cos(), 200.0 + 150.0 * a.sin())
            })
            .collect();
        let mut links: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, (i + 1) % n), ((i + 1) % n, i)]).collect();
        while links.len() < 12 && rng.gen_bool(0.6) {
            let (u, v) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if u != v && !links.contains(&(u, v)) {
                links.push((u, v));
            }
        }
        let links: Vec<(usize, usize)> = links.into_iter().take(12).collect();
        let net = RoadNetwork::new(&coords, &links).unwrap();

        let len = rng.gen_range(2..=6);
        let raw_points: Vec<RawPoint> = (0..len)
            .map(|k| {
                let e = &net.edges()[rng.gen_range(0..net.num_edges())];
                let (a, b) = (&net.nodes()[e.from], &net.nodes()[e.to]);
                let r = rng.gen_range(0.0..1.0);
                RawPoint {
                    x: a.x + r * (b.x - a.x) + rng.gen_range(-15.0..15.0),
                    y: a.y + r * (b.y - a.y) + rng.gen_range(-15.0..15.0),
                    t: k as f64 * 15.0,
                }
            })
            .collect();
        let raw = RawTrajectory::new(raw_points.clone()).unwrap();
        let lattice = MatchLattice::build(&net, &raw, params).map_err(|e| e.to_string())?;
        let (path, score) = lattice.viterbi(&net).map_err(|e| e.to_string())?;

        // independent candidate sets, emissions and transitions
        let cands: Vec<Vec<(usize, f64, f64)>> = raw_points
            .iter()
            .map(|p| {
                net.edges()
                    .iter()
                    .filter_map(|e| {
                        let (a, b) = (&net.nodes()[e.from], &net.nodes()[e.to]);
                        let (d, r) = project_onto_segment(a.x, a.y, b.x, b.y, p.x, p.y);
                        (d <= params.radius).then_some((e.id, r, d))
                    })
                    .collect()
            })
            .collect();
        let emit: Vec<Vec<f64>> =
            cands.iter().map(|cs| cs.iter().map(|c| -0.5 * (c.2 / params.sigma).powi(2)).collect()).collect();
        let trans: Vec<Vec<Vec<f64>>> = (0..len - 1)
            .map(|s| {
                let straight = (raw_points[s + 1].x - raw_points[s].x).hypot(raw_points[s + 1].y - raw_points[s].y);
                cands[s]
                    .iter()
                    .map(|a| {
                        cands[s + 1]
                            .iter()
                            .map(|b| {
                                let pa = MapMatchedPoint::new(a.0, a.1, 0.0);
                                let pb = MapMatchedPoint::new(b.0, b.1, 0.0);
                                match augmented_distance(&net, &pa, &pb) {
                                    Some(route) => -(route - straight).abs() / params.beta,
                                    None => f64::NEG_INFINITY,
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let score_of = |idx: &[usize]| -> f64 {
            let mut s = emit[0][idx[0]];
            for k in 1..len {
                s += trans[k - 1][idx[k - 1]][idx[k]] + emit[k][idx[k]];
            }
            s
        };
        let mut idx = vec![0usize; len];
        'enumerate: loop {
            let s = score_of(&idx);
            if s > best.0 {
                best = (s, idx.clone());
            }
            total_sequences += 1;
            let mut k = len;
            loop {
                if k == 0 {
                    break 'enumerate;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < cands[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
        let same_sets = lattice.candidates.iter().zip(&cands).all(|(l, c)| l.iter().map(|x| x.edge).eq(c.iter().map(|x| x.0)));
        ensure(same_sets, || format!("seed {seed}: candidate sets differ"))?;
        let tol = 1e-9 * best.0.abs().max(1.0);
        // symmetric two-way roads can produce exact ties; any optimal path is accepted
        ensure((score_of(&path) - best.0).abs() <= tol, || {
            format!("seed {seed}: viterbi path {path:?} scores {} vs optimum {:?} {}", score_of(&path), best.1, best.0)
        })?;
        if path != best.1 {
            ties += 1;
        }
        ensure((score - best.0).abs() <= tol, || format!("seed {seed}: reported score {score} vs {}", best.0))?;
    }
    Ok(format!("100 seeds optimal; {total_sequences} sequences enumerated, {ties} exact ties"))
}

// ---------------------------------------------------------------------------
// 7. memorization

fn memorization() -> Outcome {
    let start = Instant::now();
    let net = generate_grid_network(8, 8, 100.0, 0).unwrap();
    let grid = GridSpec::covering(&net, 100.0).unwrap();
    let truths = generate_synthetic_trajectories(&net, 50, 30, 15.0, 7).unwrap();
    let pairs = make_pairs(truths, 0.125, 7).unwrap();
    let section = ModelSection {
        hidden_dim: 64,
        seg_embed_dim: 16,
        dropout: 0.0,
        gamma: 5e4,
        mask_radius: 1000.0,
        ..ModelSection::default()
    };
    let cfg = LteConfig::from_section(&section, &net, &grid, 30).unwrap();
    let mut model = LteModel::new(cfg, 0).unwrap();
    let samples: Vec<_> = pairs
        .iter()
        .map(|p| model.prepare(&p.observed, Some(&p.truth), &net, &grid))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let refs: Vec<_> = samples.iter().collect();
    let mut opt = OptimizerState::sgd(0.5);
    for epoch in 0..200u64 {
        let mut rng = fedtraj::seed::rng_for(0, "memorize", &[epoch]);
        fedsim::train_epoch(&mut model, &refs, &mut opt, 4, None, 0.0, &mut rng).map_err(|e| e.to_string())?;
    }
    let mut recall = 0.0;
    let mut dists = Vec::new();
    for p in &pairs {
        let out = model.recover(&p.observed, &net, &grid).map_err(|e| e.to_string())?;
        recall += recall_precision(&out, &p.truth).unwrap().0;
        dists.extend(point_errors(&net, &out, &p.truth).unwrap());
    }
    recall /= pairs.len() as f64;
    let (mae, _) = mae_rmse_of(&dists).unwrap();
    let elapsed = start.elapsed();
    let detail = format!("recall {recall:.4}, MAE {mae:.1} m, {:.1}s", elapsed.as_secs_f64());
    ensure(recall >= 0.95 && mae < 50.0 && elapsed < Duration::from_secs(300), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8 and 9. federated fixtures

fn fed_fixture(trajectories: usize, keep: f64, partition: PartitionMode, lambda0: f64, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(0);
    cfg.data.trajectories = trajectories;
    cfg.data.keep_ratio = keep;
    cfg.data.partition = partition;
    cfg.model = ModelSection { hidden_dim: 32, seg_embed_dim: 16, dropout: 0.0, gamma: 5e4, mask_radius: 1000.0, ..ModelSection::default() };
    cfg.fed = FedConfig {
        rounds,
        clients: 4,
        fraction: 1.0,
        local_epochs: 4,
        lambda0,
        l_t: 0.4,
        teacher_cycles: 3,
        teacher_fraction: 1.0,
        batch_size: 4,
        lr: 0.5,
        seed: 0,
        ..FedConfig::default()
    };
    cfg
}

struct FedRun {
    test_recall: f64,
    curve: Vec<f64>,
}

fn run_fixture(cfg: &ExperimentConfig) -> Result<FedRun, String> {
    let net = cfg.network().map_err(|e| e.to_string())?;
    let grid = cfg.grid(&net).map_err(|e| e.to_string())?;
    let data = experiment::generate_dataset(cfg, &net).map_err(|e| e.to_string())?;
    let init = cfg.init_model(&net).map_err(|e| e.to_string())?;
    let clients = fedsim::prepare_clients(data.clients, &init, &net, &grid, &cfg.fed).map_err(|e| e.to_string())?;
    let teacher = if cfg.fed.lambda0 > 0.0 {
        Some(fedsim::train_teacher(&clients, &init, &cfg.fed).map_err(|e| e.to_string())?.0)
    } else {
        None
    };
    let (global, records) = fedsim::run_rounds(&clients, &init, teacher.as_ref(), &cfg.fed, 1).map_err(|e| e.to_string())?;
    let report = experiment::evaluate_model(&global, &net, &grid, &clients).map_err(|e| e.to_string())?;
    Ok(FedRun { test_recall: report.recall, curve: records.iter().map(|r| r.global_recall).collect() })
}

fn keep_ratio_trend() -> Outcome {
    let mut recalls = Vec::new();
    for keep in [0.0625, 0.125, 0.25] {
        let run = run_fixture(&fed_fixture(400, keep, PartitionMode::Iid, 0.05, 6))?;
        recalls.push(run.test_recall);
    }
    let detail = format!("recall@6.25% {:.4}, @12.5% {:.4}, @25% {:.4}", recalls[0], recalls[1], recalls[2]);
    ensure(recalls[2] >= recalls[1] - 0.02 && recalls[1] >= recalls[0] - 0.02, || detail.clone())?;
    Ok(detail)
}

/// First round (1-based) whose validation recall reaches `target`.
fn rounds_to_reach(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&r| r >= target).map(|i| i + 1)
}

fn federation_benefit() -> Outcome {
    let full = run_fixture(&fed_fixture(800, 0.125, PartitionMode::Spatial, 0.05, 10))?;
    let plain = run_fixture(&fed_fixture(800, 0.125, PartitionMode::Spatial, 0.0, 10))?;
    let target = *plain.curve.last().unwrap();
    let plain_rounds = rounds_to_reach(&plain.curve, target).unwrap();
    let full_rounds = rounds_to_reach(&full.curve, target);
    let detail = format!(
        "test recall {:.4} vs FedAvg {:.4}; reaches {:.4} at round {} vs {}",
        full.test_recall,
        plain.test_recall,
        target,
        full_rounds.map_or("never".to_string(), |r| r.to_string()),
        plain_rounds
    );
    ensure(full.test_recall >= plain.test_recall - 0.02, || detail.clone())?;
    ensure(full_rounds.is_some_and(|r| r <= plain_rounds), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 10. determinism and exchange

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(11);
    cfg.output = dir.to_path_buf();
    cfg.data.grid_rows = 4;
    cfg.data.grid_cols = 4;
    cfg.data.trajectories = 60;
    cfg.data.traj_len = 12;
    cfg.model = ModelSection { hidden_dim: 12, seg_embed_dim: 6, gamma: 5e4, mask_radius: 1000.0, ..ModelSection::default() };
    cfg.fed.clients = 3;
    cfg.fed.rounds = 3;
    cfg.fed.fraction = 0.67;
    cfg.fed.local_epochs = 1;
    cfg.fed.batch_size = 4;
    cfg.fed.lr = 0.3;
    cfg.fed.lambda0 = 0.05;
    cfg.fed.teacher_fraction = 0.5;
    cfg
}

fn determinism_and_exchange() -> Outcome {
    let mut finals = Vec::new();
    for workers in [1, 2] {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = small_config(tmp.path());
        cfg.fed.workers = workers;
        let net = cfg.network().map_err(|e| e.to_string())?;
        let data = experiment::generate_dataset(&cfg, &net).map_err(|e| e.to_string())?;
        experiment::write_dataset(tmp.path(), &net, &data).map_err(|e| e.to_string())?;
        let out = experiment::train(&cfg, tmp.path(), false).map_err(|e| e.to_string())?;
        let global = out.global.unwrap();
        let n = global.num_params() as u64;
        for r in &out.records {
            ensure(r.bytes == 2 * r.sampled.len() as u64 * 4 * n, || format!("round {} bytes {}", r.round, r.bytes))?;
            ensure(r.bytes == comm_cost(n as usize, r.sampled.len(), 1), || "comm_cost disagrees".into())?;
        }
        let loaded = checkpoint::load(&tmp.path().join(experiment::GLOBAL_FILE)).map_err(|e| e.to_string())?;
        ensure(loaded == *global.params(), || "checkpoint round trip is not bit-exact".into())?;
        let mut other = cfg.init_model(&net).map_err(|e| e.to_string())?;
        other.load(&global.flatten()).map_err(|e| e.to_string())?;
        ensure(other.flatten().values().iter().zip(global.params().values()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            "flatten/load round trip is not bit-exact".into()
        })?;
        finals.push(global.flatten());
    }
    let bits = |p: &ParameterVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&finals[0]) == bits(&finals[1]), || "final parameters differ between runs".into())?;
    Ok(format!("{} parameters identical across runs; checkpoint, flatten/load and byte accounting exact", finals[0].len()))
}

// ---------------------------------------------------------------------------
// 11. recovery contract

fn recovery_contract() -> Outcome {
    let net = generate_grid_network(6, 6, 100.0, 0).unwrap();
    let grid = GridSpec::covering(&net, 100.0).unwrap();
    let section = ModelSection { hidden_dim: 16, seg_embed_dim: 8, ..ModelSection::default() };
    let cfg = LteConfig::from_section(&section, &net, &grid, 40).unwrap();
    let models: Vec<LteModel> = (0..5).map(|s| LteModel::new(cfg.clone(), s).unwrap()).collect();
    let mut rng = Rng::seed_from_u64(11);
    for case in 0..1000u64 {
        let len = rng.gen_range(2..=40);
        let eps = [1.0, 15.0, 30.0][rng.gen_range(0..3)];
        let truth = &generate_synthetic_trajectories(&net, 1, len, eps, case).unwrap()[0];
        let shifted: Vec<MapMatchedPoint> = {
            let offset = rng.gen_range(0..1000) as f64 * eps;
            truth.points().iter().map(|p| MapMatchedPoint::new(p.edge, p.r, p.t + offset)).collect()
        };
        let truth = MapMatchedTrajectory::new(shifted, eps).unwrap();
        let icp = downsample(&truth, rng.gen_range(0.0..=1.0), case).map_err(|e| e.to_string())?;
        let out = models[case as usize % 5].recover(&icp, &net, &grid).map_err(|e| e.to_string())?;
        let expected = ((icp.t_end() - icp.t_start()) / eps).round() as usize + 1;
        ensure(out.len() == expected, || format!("case {case}: {} points, want {expected}", out.len()))?;
        for obs in icp.points() {
            ensure(out.points().contains(obs), || format!("case {case}: observed {obs:?} not preserved"))?;
        }
        ensure(out.points().iter().all(|p| (0.0..=1.0).contains(&p.r)), || format!("case {case}: ratio outside [0, 1]"))?;
    }
    Ok("1000 fuzzed inputs honour grid count, observed points and ratio range".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("gradient fidelity", gradient_fidelity),
        ("lambda schedule", lambda_schedule),
        ("aggregation oracle", aggregation_oracle),
        ("constraint mask", constraint_mask_correctness),
        ("rn_distance oracle", rn_distance_oracle),
        ("HMM matcher oracle", hmm_oracle),
        ("memorization fixture", memorization),
        ("keep-ratio trend", keep_ratio_trend),
        ("federation benefit", federation_benefit),
        ("determinism and exchange", determinism_and_exchange),
        ("recovery contract", recovery_contract),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
