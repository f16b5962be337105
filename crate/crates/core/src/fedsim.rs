//! Synchronous federated training: cyclic teacher pre-training across
//! clients, distillation-regularized local training with an adaptive
//! weight, client sampling and unweighted parameter averaging.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{OptimizerKind, OptimizerState, ParameterVector};
use crate::error::{Error, Result};
use crate::metrics::edge_set_scores;
use crate::model::{LteModel, Objective, PreparedSample};
use crate::roadnet::{GridSpec, RoadNetwork};
use crate::seed::{rng_for, Rng};
use crate::trajdata::ClientDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub clients: usize,
    pub fraction: f64,
    pub local_epochs: usize,
    pub lambda0: f64,
    pub l_t: f64,
    pub teacher_cycles: usize,
    pub teacher_fraction: f64,
    /// Teacher-stage early stop: minimum gain in mean validation recall per cycle.
    pub teacher_min_gain: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: Option<f64>,
    pub optimizer: OptimizerKind,
    pub workers: usize,
    /// Set from the experiment's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            clients: 20,
            fraction: 1.0,
            local_epochs: 1,
            lambda0: 5.0,
            l_t: 0.4,
            teacher_cycles: 2,
            teacher_fraction: 0.2,
            teacher_min_gain: 0.005,
            batch_size: 32,
            lr: 0.001,
            clip: Some(5.0),
            optimizer: OptimizerKind::Sgd,
            workers: 1,
            seed: 0,
        }
    }
}

impl FedConfig {
    /// Checks the invariants. `rounds` and `local_epochs` may be zero, which
    /// the CLI uses for teacher-only runs and tests use for no-op rounds.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.clients == 0 || self.teacher_cycles == 0 || self.batch_size == 0 || self.workers == 0 {
            return bad("clients, teacher_cycles, batch_size and workers must be >= 1");
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad("fraction must lie in (0, 1]");
        }
        if !(self.teacher_fraction > 0.0 && self.teacher_fraction <= 1.0) {
            return bad("teacher_fraction must lie in (0, 1]");
        }
        if !(self.lambda0 >= 0.0) {
            return Err(Error::NegativeLambda(self.lambda0));
        }
        if !(0.0..=1.0).contains(&self.l_t) {
            return bad("l_t must lie in [0, 1]");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Result<OptimizerState> {
        OptimizerState::new(self.lr, self.clip, self.optimizer)
    }
}

/// `0` when the teacher is no better than the student and the student is
/// still below the threshold; otherwise `λ0 · 10^(min(1, 5·(acc_tea − acc_stu)) − 1)`.
pub fn update_lambda(acc_tea: f64, acc_stu: f64, l_t: f64, lambda0: f64) -> Result<f64> {
    for a in [acc_tea, acc_stu, l_t] {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::AccuracyOutOfRange(a));
        }
    }
    if !(lambda0 >= 0.0) {
        return Err(Error::NegativeLambda(lambda0));
    }
    if acc_tea <= acc_stu && acc_stu < l_t {
        return Ok(0.0);
    }
    let exponent = ((acc_tea - acc_stu) * 5.0).min(1.0) - 1.0;
    Ok(lambda0 * 10f64.powf(exponent))
}

/// Mean per-trajectory segment recall of free-running recovery.
pub fn validation_accuracy(model: &LteModel, valid: &[PreparedSample]) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::EmptySet("validation set is empty".into()));
    }
    let mut total = 0.0;
    for s in valid {
        let truth = s
            .truth()
            .ok_or_else(|| Error::InvalidTrajectory("validation sample has no ground truth".into()))?;
        let pred = model.recover_prepared(s)?;
        let (recall, _) = edge_set_scores(pred.points().iter().map(|p| p.edge), truth.iter().map(|t| t.0))?;
        total += recall;
    }
    Ok(total / valid.len() as f64)
}

/// A client's prepared splits plus its seeded teacher subset.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub dataset: ClientDataset,
    pub train: Vec<PreparedSample>,
    pub valid: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    /// Indices into `train` used during teacher pre-training.
    pub teacher_subset: Vec<usize>,
}

impl ClientState {
    pub fn new(
        dataset: ClientDataset,
        model: &LteModel,
        net: &RoadNetwork,
        grid: &GridSpec,
        teacher_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let prep = |pairs: &[crate::trajdata::TrajectoryPair]| -> Result<Vec<PreparedSample>> {
            pairs.iter().map(|p| model.prepare(&p.observed, Some(&p.truth), net, grid)).collect()
        };
        let train = prep(&dataset.train)?;
        let valid = prep(&dataset.valid)?;
        let test = prep(&dataset.test)?;
        let n = train.len();
        let k = ((teacher_fraction * n as f64).round() as usize).clamp(1, n.max(1));
        let mut teacher_subset = if n == 0 {
            Vec::new()
        } else {
            let mut rng = rng_for(seed, "teacher-subset", &[dataset.id as u64]);
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        };
        teacher_subset.sort_unstable();
        Ok(Self { id: dataset.id, dataset, train, valid, test, teacher_subset })
    }
}

/// Prepare every client dataset against the model's vocabulary.
pub fn prepare_clients(
    datasets: Vec<ClientDataset>,
    model: &LteModel,
    net: &RoadNetwork,
    grid: &GridSpec,
    cfg: &FedConfig,
) -> Result<Vec<ClientState>> {
    datasets
        .into_iter()
        .map(|d| ClientState::new(d, model, net, grid, cfg.teacher_fraction, cfg.seed))
        .collect()
}

/// One shuffled pass of mini-batch descent. With a `reference` model and a
/// non-zero `lambda` each sample also pays the distillation penalty against
/// the reference's outputs on the same decoder inputs. Returns the mean
/// per-sample total loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut LteModel,
    samples: &[&PreparedSample],
    opt: &mut OptimizerState,
    batch_size: usize,
    reference: Option<&LteModel>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet("no training samples".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mu = model.config().mu;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut grad = model.zero_grad();
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        grad.clear();
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let sample = samples[i];
            let distill = lambda != 0.0 && reference.is_some();
            let mut pass = model.forward_train(sample, Some(&mut *rng), None, distill)?;
            let reps = match reference {
                Some(t) if distill => Some(t.teacher_reps(sample, &pass.inputs()?)?),
                _ => None,
            };
            let objective = Objective { mu, lambda, teacher: reps.as_deref() };
            total += model.backward(&mut pass, &objective, scale, &mut grad)?.total;
        }
        opt.step(model.params_mut(), &mut grad)?;
    }
    Ok(total / samples.len() as f64)
}

/// Summary of the cyclic teacher stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub cycles_run: usize,
    /// Mean validation recall across clients before training and after each cycle.
    pub recall_history: Vec<f64>,
    /// Per visit (cycle, client): whether the incoming knowledge was kept.
    pub preserved: Vec<(usize, usize, bool)>,
}

fn mean_valid_recall(model: &LteModel, clients: &[ClientState]) -> Result<f64> {
    let mut total = 0.0;
    for c in clients {
        total += validation_accuracy(model, &c.valid)?;
    }
    Ok(total / clients.len() as f64)
}

/// Cyclic teacher pre-training. A single model visits the clients in order.
/// On arrival it is scored on the client's validation split; when the score
/// reaches `l_t` a frozen copy becomes the distillation reference for the
/// local epochs, otherwise training proceeds without one. The very first
/// visit has nothing to transfer and trains plainly.
pub fn train_teacher(clients: &[ClientState], init: &LteModel, cfg: &FedConfig) -> Result<(LteModel, TeacherReport)> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::EmptySet("no clients".into()));
    }
    let mut model = init.clone();
    let mut opt = cfg.optimizer()?;
    let mut best = mean_valid_recall(&model, clients)?;
    let mut report = TeacherReport { cycles_run: 0, recall_history: vec![best], preserved: Vec::new() };
    for cycle in 0..cfg.teacher_cycles {
        for (i, client) in clients.iter().enumerate() {
            if client.teacher_subset.is_empty() {
                return Err(Error::Client {
                    client: client.id,
                    source: Box::new(Error::EmptySet("teacher subset is empty".into())),
                });
            }
            let subset: Vec<&PreparedSample> = client.teacher_subset.iter().map(|&j| &client.train[j]).collect();
            let reference = if cycle == 0 && i == 0 {
                None
            } else {
                let acc = validation_accuracy(&model, &client.valid)?;
                let keep = acc >= cfg.l_t;
                report.preserved.push((cycle, client.id, keep));
                keep.then(|| model.clone())
            };
            for epoch in 0..cfg.local_epochs {
                let lambda = match &reference {
                    Some(r) if cfg.lambda0 > 0.0 => update_lambda(
                        validation_accuracy(r, &client.valid)?,
                        validation_accuracy(&model, &client.valid)?,
                        cfg.l_t,
                        cfg.lambda0,
                    )?,
                    _ => 0.0,
                };
                let mut rng = rng_for(cfg.seed, "teacher", &[cycle as u64, client.id as u64, epoch as u64]);
                train_epoch(&mut model, &subset, &mut opt, cfg.batch_size, reference.as_ref(), lambda, &mut rng)
                    .map_err(|e| Error::Client { client: client.id, source: Box::new(e) })?;
            }
        }
        report.cycles_run = cycle + 1;
        let score = mean_valid_recall(&model, clients)?;
        report.recall_history.push(score);
        if score - best < cfg.teacher_min_gain {
            break;
        }
        best = score;
    }
    Ok((model, report))
}

/// Telemetry of one client within a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: usize,
    pub recall_before: f64,
    pub recall_after: f64,
    pub lambdas: Vec<f64>,
}

/// Local training of one client starting from the broadcast parameters.
pub fn local_train(
    client: &ClientState,
    global: &ParameterVector,
    template: &LteModel,
    teacher: Option<&LteModel>,
    cfg: &FedConfig,
    round: usize,
) -> Result<(ParameterVector, ClientRound)> {
    let mut model = template.clone();
    model.load(global)?;
    if client.train.is_empty() {
        return Err(Error::EmptySet("training split is empty".into()));
    }
    let recall_before = validation_accuracy(&model, &client.valid)?;
    let samples: Vec<&PreparedSample> = client.train.iter().collect();
    let mut opt = cfg.optimizer()?;
    let mut lambdas = Vec::with_capacity(cfg.local_epochs);
    let acc_tea = match teacher {
        Some(t) if cfg.lambda0 > 0.0 && cfg.local_epochs > 0 => Some(validation_accuracy(t, &client.valid)?),
        _ => None,
    };
    for epoch in 0..cfg.local_epochs {
        let lambda = match acc_tea {
            Some(acc_tea) => {
                let acc_stu = if epoch == 0 { recall_before } else { validation_accuracy(&model, &client.valid)? };
                update_lambda(acc_tea, acc_stu, cfg.l_t, cfg.lambda0)?
            }
            None => 0.0,
        };
        lambdas.push(lambda);
        let mut rng = rng_for(cfg.seed, "local", &[round as u64, client.id as u64, epoch as u64]);
        train_epoch(&mut model, &samples, &mut opt, cfg.batch_size, teacher, lambda, &mut rng)?;
    }
    let recall_after =
        if cfg.local_epochs == 0 { recall_before } else { validation_accuracy(&model, &client.valid)? };
    Ok((model.flatten(), ClientRound { client: client.id, recall_before, recall_after, lambdas }))
}

/// Elementwise mean, accumulated in `f64`.
pub fn aggregate(params: &[ParameterVector]) -> Result<ParameterVector> {
    let first = params.first().ok_or_else(|| Error::EmptySet("nothing to aggregate".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for p in params {
        p.check_layout(first.layout())?;
        acc.iter_mut().zip(p.values()).for_each(|(a, v)| *a += f64::from(*v));
    }
    let n = params.len() as f64;
    ParameterVector::new(first.layout().clone(), acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// `max(1, round(F·N))` distinct client ids, sorted, fixed per (seed, round).
pub fn sample_clients(n: usize, fraction: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig("fraction must lie in (0, 1]".into()));
    }
    if n == 0 {
        return Err(Error::EmptySet("no clients to sample".into()));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = rng_for(seed, "sample", &[round as u64]);
    let mut ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Bytes exchanged: each participant downloads and uploads every `f32`.
pub fn comm_cost(param_count: usize, participants: usize, rounds: usize) -> u64 {
    (rounds as u64) * (participants as u64) * (param_count as u64) * 4 * 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientRound>,
    pub global_recall: f64,
    pub bytes: u64,
}

impl RoundRecord {
    pub fn mean_lambda(&self) -> f64 {
        let all: Vec<f64> = self.clients.iter().flat_map(|c| c.lambdas.iter().copied()).collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    }
}

/// Run rounds `first_round..first_round + cfg.rounds`, starting from `global`.
/// Sampled clients train in parallel on at most `cfg.workers` threads and are
/// reduced in id order; any failing client aborts the round.
pub fn run_rounds(
    clients: &[ClientState],
    global: &LteModel,
    teacher: Option<&LteModel>,
    cfg: &FedConfig,
    first_round: usize,
) -> Result<(LteModel, Vec<RoundRecord>)> {
    cfg.validate()?;
    if clients.len() != cfg.clients {
        return Err(Error::InvalidConfig(format!("config names {} clients, {} given", cfg.clients, clients.len())));
    }
    if let Some(t) = teacher {
        t.params().check_layout(global.layout())?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut model = global.clone();
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in first_round..first_round + cfg.rounds {
        let sampled = sample_clients(clients.len(), cfg.fraction, cfg.seed, round)?;
        let broadcast = model.flatten();
        let results: Vec<Result<(ParameterVector, ClientRound)>> = pool.install(|| {
            sampled
                .par_iter()
                .map(|&i| local_train(&clients[i], &broadcast, &model, teacher, cfg, round))
                .collect()
        });
        let mut params = Vec::with_capacity(results.len());
        let mut stats = Vec::with_capacity(results.len());
        for (&i, r) in sampled.iter().zip(results) {
            let (p, s) = r.map_err(|e| Error::Client { client: clients[i].id, source: Box::new(e) })?;
            params.push(p);
            stats.push(s);
        }
        model.load(&aggregate(&params)?)?;
        records.push(RoundRecord {
            round,
            sampled: sampled.iter().map(|&i| clients[i].id).collect(),
            clients: stats,
            global_recall: mean_valid_recall(&model, clients)?,
            bytes: comm_cost(model.num_params(), sampled.len(), 1),
        });
    }
    Ok((model, records))
}

pub const ROUNDS_CSV_HEADER: &str = "round,sampled_ids,mean_lambda,global_recall,bytes";

/// One telemetry row per round.
pub fn write_rounds_csv(path: &Path, records: &[RoundRecord], append: bool) -> Result<()> {
    let fresh = !append || !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
    if fresh {
        writeln!(f, "{ROUNDS_CSV_HEADER}")?;
    }
    for r in records {
        let ids: Vec<String> = r.sampled.iter().map(|i| i.to_string()).collect();
        writeln!(f, "{},{},{},{},{}", r.round, ids.join(";"), r.mean_lambda(), r.global_recall, r.bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Layout;
    use crate::diffcore::Segment;
    use rand::{Rng as _, SeedableRng};
    use std::sync::Arc;

    #[test]
    fn lambda_schedule() {
        assert_eq!(update_lambda(0.3, 0.5, 0.6, 5.0).unwrap(), 0.0);
        assert!((update_lambda(0.7, 0.5, 0.6, 5.0).unwrap() - 5.0).abs() < 1e-12);
        assert!((update_lambda(0.5, 0.5, 0.4, 5.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(update_lambda(1.2, 0.5, 0.4, 5.0), Err(Error::AccuracyOutOfRange(_))));
        let mut prev = 0.0;
        for i in 0..=100 {
            let diff = i as f64 / 100.0 * 0.5;
            let l = update_lambda(0.5 + diff, 0.5, 0.4, 5.0).unwrap();
            assert!(l >= prev && l <= 5.0);
            prev = l;
        }
    }

    #[test]
    fn aggregation() {
        let layout = Arc::new(Layout::new(vec![Segment::new("w", &[2], 1)]));
        let a = ParameterVector::new(layout.clone(), vec![1.0, 2.0]).unwrap();
        let b = ParameterVector::new(layout.clone(), vec![3.0, 4.0]).unwrap();
        assert_eq!(aggregate(&[a.clone(), b]).unwrap().values(), &[2.0, 3.0]);
        assert_eq!(aggregate(std::slice::from_ref(&a)).unwrap(), a);
        assert!(aggregate(&[]).is_err());

        let mut rng = Rng::seed_from_u64(0);
        let v: Vec<f32> = (0..2).map(|_| rng.gen()).collect();
        let v = ParameterVector::new(layout.clone(), v).unwrap();
        assert_eq!(aggregate(&vec![v.clone(); 7]).unwrap(), v);

        let other = Arc::new(Layout::new(vec![Segment::new("u", &[2], 1)]));
        let c = ParameterVector::new(other, vec![0.0, 0.0]).unwrap();
        assert!(matches!(aggregate(&[a, c]), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn sampling() {
        assert_eq!(sample_clients(5, 1.0, 3, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        let s = sample_clients(20, 0.2, 3, 1).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s, sample_clients(20, 0.2, 3, 1).unwrap());
        assert_eq!(sample_clients(3, 0.01, 3, 1).unwrap().len(), 1);
    }

    #[test]
    fn cost() {
        assert_eq!(comm_cost(1000, 4, 1), 32000);
        assert_eq!(comm_cost(1000, 0, 9), 0);
        assert_eq!(comm_cost(10, 3, 6), 2 * comm_cost(10, 3, 3));
    }
}
