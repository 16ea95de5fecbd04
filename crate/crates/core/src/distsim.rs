//! Lockstep data-parallel simulation of Dion and CurvaDion.
//!
//! Every worker holds a full replica of all layers and differs only in the
//! data it sees. On a sync step the per-worker power-iteration inputs `B_i Q`
//! are mean-reduced before orthonormalization, then `B_iᵀ P` is mean-reduced
//! to form `R`; the residual buffers and the pre-update parameters are
//! averaged as well, so all replicas leave the step bitwise identical. On a
//! local step each worker keeps its whole buffer and takes a plain gradient
//! step. Reductions always run in ascending worker order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dion::{
    apply_local_update, apply_sync_update, apply_weight_decay, error_feedback, is_zero, DionConfig,
    LayerState,
};
use crate::error::{Error, Result};
use crate::matrix::{
    column_normalize, frobenius_norm, matmul, matmul_tn, orthonormalize_columns,
    random_orthonormal, Matrix, MatrixError,
};
use crate::problems::{Batch, Problem};
use crate::trigger::{decide, global_max_rmmc, layer_rmmc, SyncPolicy};

pub const FLAG_BYTES: u64 = 4;
pub const BYTES_PER_VALUE: u64 = 4;

/// Seed domains so that Q0, fallback redraws and batches never share a stream.
const Q0_DOMAIN: u64 = 0x5130;
const REDRAW_DOMAIN: u64 = 0x5244;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CommConvention {
    /// Parameter count times four bytes per synchronized step.
    #[default]
    Fullgrad,
    /// `Σ (m r + n r)` times four bytes per synchronized step.
    Lowrank,
}

impl CommConvention {
    pub fn name(&self) -> &'static str {
        match self {
            CommConvention::Fullgrad => "fullgrad",
            CommConvention::Lowrank => "lowrank",
        }
    }

    pub fn sync_bytes(&self, shapes: &[(usize, usize)], cfg: &DionConfig) -> u64 {
        shapes
            .iter()
            .map(|&(m, n)| {
                let values = match self {
                    CommConvention::Fullgrad => m * n,
                    CommConvention::Lowrank => {
                        let r = cfg.rank_for(m, n);
                        m * r + n * r
                    }
                };
                values as u64 * BYTES_PER_VALUE
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub full_sync_bytes_per_step: u64,
    pub flag_bytes_per_step: u64,
    pub charge_flag: bool,
    pub total_bytes: u64,
    pub sync_count: u64,
    pub step_count: u64,
}

impl CommLedger {
    pub fn new(full_sync_bytes: u64, flag_bytes: u64, charge_flag: bool) -> Self {
        CommLedger {
            full_sync_bytes_per_step: full_sync_bytes,
            flag_bytes_per_step: flag_bytes,
            charge_flag,
            total_bytes: 0,
            sync_count: 0,
            step_count: 0,
        }
    }

    pub fn for_policy(policy: &SyncPolicy, full_sync_bytes: u64) -> Self {
        CommLedger::new(full_sync_bytes, FLAG_BYTES, policy.uses_flag())
    }

    /// `steps · flag + syncs · full`, with the flag term only when charged.
    pub fn expected_total(&self) -> u64 {
        let flag = if self.charge_flag {
            self.step_count * self.flag_bytes_per_step
        } else {
            0
        };
        flag + self.sync_count * self.full_sync_bytes_per_step
    }
}

pub fn account_step(ledger: &CommLedger, synced: bool) -> CommLedger {
    let mut l = *ledger;
    l.step_count += 1;
    if l.charge_flag {
        l.total_bytes += l.flag_bytes_per_step;
    }
    if synced {
        l.sync_count += 1;
        l.total_bytes += l.full_sync_bytes_per_step;
    }
    l
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worker {
    pub id: usize,
    pub layers: Vec<LayerState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mean_loss: f64,
    pub global_rmmc: f64,
    pub synced: bool,
    pub bytes_cum: u64,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: SyncPolicy,
    pub seed: u64,
    pub steps: u64,
    pub n_workers: usize,
    pub final_loss: f64,
    pub mean_divergence: f64,
    pub final_divergence: f64,
    pub sync_count: u64,
    pub sync_rate: f64,
    pub sync_steps: Vec<u64>,
    pub comm: CommConvention,
    pub total_bytes: u64,
    pub total_bytes_fullgrad: u64,
    pub total_bytes_lowrank: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_workers: usize,
    pub policy: SyncPolicy,
    pub dion: DionConfig,
    pub steps: u64,
    pub seed: u64,
    pub comm: CommConvention,
    /// Overrides the convention's per-sync byte count when set.
    pub full_sync_bytes: Option<u64>,
    /// Evaluate worker gradients on a thread pool.
    pub parallel: bool,
    /// Thread cap for parallel mode; `None` lets the pool decide.
    pub threads: Option<usize>,
}

impl SimConfig {
    pub fn new(n_workers: usize, policy: SyncPolicy, dion: DionConfig, steps: u64, seed: u64) -> Self {
        SimConfig {
            n_workers,
            policy,
            dion,
            steps,
            seed,
            comm: CommConvention::default(),
            full_sync_bytes: None,
            parallel: false,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 {
            return Err(Error::config("n_workers", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be at least 1"));
        }
        self.policy.validate()?;
        self.dion.validate()
    }
}

pub fn all_reduce_mean(per_worker: &[Matrix]) -> Result<Matrix> {
    let (first, rest) = per_worker
        .split_first()
        .ok_or_else(|| Error::Precondition("all_reduce_mean needs at least one matrix".into()))?;
    let mut acc = first.clone();
    for m in rest {
        acc = acc.add(m)?;
    }
    if rest.is_empty() {
        return Ok(acc);
    }
    Ok(acc.scale(1.0 / per_worker.len() as f64))
}

pub fn all_reduce_max(per_worker: &[f64]) -> Result<f64> {
    global_max_rmmc(&[per_worker.to_vec()])
}

/// Largest Frobenius distance between any two workers on any layer.
pub fn worker_divergence(workers: &[Worker]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in workers.iter().enumerate() {
        for b in &workers[i + 1..] {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                let d = frobenius_norm(&la.x.sub(&lb.x).expect("replicas share shapes"));
                best = best.max(d);
            }
        }
    }
    best
}

pub fn initial_workers(problem: &dyn Problem, cfg: &SimConfig) -> Result<Vec<Worker>> {
    let x0 = problem.init_params(cfg.seed);
    let shapes = problem.layer_shapes();
    if x0.len() != shapes.len() {
        return Err(Error::Precondition("problem init returned the wrong layer count".into()));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (l, (&(m, n), x)) in shapes.iter().zip(x0).enumerate() {
        let r = cfg.dion.rank_for(m, n);
        layers.push(LayerState::new(x, r, q0_seed(cfg.seed, l))?);
    }
    Ok((0..cfg.n_workers)
        .map(|id| Worker {
            id,
            layers: layers.clone(),
        })
        .collect())
}

pub fn q0_seed(seed: u64, layer: usize) -> u64 {
    mix(&[seed, Q0_DOMAIN, layer as u64])
}

pub fn redraw_seed(seed: u64, step: u64, layer: usize, iteration: usize) -> u64 {
    mix(&[seed, REDRAW_DOMAIN, step, layer as u64, iteration as u64])
}

/// SplitMix64 over a word sequence.
fn mix(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// `orth(mean_i B_i Q)` with one re-draw of `Q` on rank deficiency.
fn reduced_p(buffers: &[&Matrix], q: &Matrix, redraw: u64) -> Result<(Matrix, Matrix)> {
    let attempt = |q: &Matrix| -> Result<Matrix> {
        let inputs = buffers
            .iter()
            .map(|b| matmul(b, q))
            .collect::<Result<Vec<_>, MatrixError>>()?;
        Ok(orthonormalize_columns(&all_reduce_mean(&inputs)?)?)
    };
    match attempt(q) {
        Ok(p) => Ok((p, q.clone())),
        Err(Error::Matrix(MatrixError::RankDeficient { .. })) => {
            let fresh = random_orthonormal(q.rows(), q.cols(), redraw)?;
            Ok((attempt(&fresh)?, fresh))
        }
        Err(e) => Err(e),
    }
}

/// Synchronized update of one layer across all workers.
fn sync_layer(
    workers: &mut [Worker],
    buffers: &[Matrix],
    layer: usize,
    cfg: &SimConfig,
    step: u64,
) -> Result<()> {
    let d = &cfg.dion;
    let refs: Vec<&Matrix> = buffers.iter().collect();
    let xs: Vec<Matrix> = workers.iter().map(|w| w.layers[layer].x.clone()).collect();
    let x_mean = all_reduce_mean(&xs)?;

    if buffers.iter().all(is_zero) {
        let x = apply_weight_decay(&x_mean, d.eta, d.weight_decay);
        for w in workers.iter_mut() {
            let s = &mut w.layers[layer];
            s.x = x.clone();
            s.m = Matrix::zeros(x.rows(), x.cols());
        }
        return Ok(());
    }

    let mut q = workers[0].layers[layer].q.clone();
    let mut pr = None;
    for it in 0..d.power_iters {
        let (p, _) = reduced_p(&refs, &q, redraw_seed(cfg.seed, step, layer, it))?;
        let rs = buffers
            .iter()
            .map(|b| matmul_tn(b, &p))
            .collect::<Result<Vec<_>, MatrixError>>()?;
        let r = all_reduce_mean(&rs)?;
        q = column_normalize(&r)?;
        pr = Some((p, r));
    }
    let (p, r) = pr.expect("power_iters >= 1");
    let residuals = buffers
        .iter()
        .map(|b| error_feedback(b, &p, &r, d.mu))
        .collect::<Result<Vec<_>, MatrixError>>()?;
    let m = all_reduce_mean(&residuals)?;
    let x = apply_weight_decay(&x_mean, d.eta, d.weight_decay);
    let x = apply_sync_update(&x, &p, &q, d.eta)?;
    for w in workers.iter_mut() {
        let s = &mut w.layers[layer];
        s.x = x.clone();
        s.m = m.clone();
        s.q = q.clone();
    }
    Ok(())
}

/// Runs `f` on every worker, optionally on a rayon pool, keeping index order.
fn per_worker<T: Send>(
    workers: &[Worker],
    pool: Option<&rayon::ThreadPool>,
    f: impl Fn(&Worker) -> T + Sync + Send,
) -> Vec<T> {
    match pool {
        Some(pool) => pool.install(|| workers.par_iter().map(&f).collect()),
        None => workers.iter().map(f).collect(),
    }
}

pub struct SimOutput {
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    pub workers: Vec<Worker>,
}

pub fn simulate(problem: &dyn Problem, cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let shapes = problem.layer_shapes().to_vec();
    let mut workers = initial_workers(problem, cfg)?;
    let pool = if cfg.parallel {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = cfg.threads {
            b = b.num_threads(t);
        }
        Some(
            b.build()
                .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let full_bytes = cfg
        .full_sync_bytes
        .unwrap_or_else(|| cfg.comm.sync_bytes(&shapes, &cfg.dion));
    let mut ledger = CommLedger::for_policy(&cfg.policy, full_bytes);
    let mut ledger_fg = CommLedger::for_policy(&cfg.policy, CommConvention::Fullgrad.sync_bytes(&shapes, &cfg.dion));
    let mut ledger_lr = CommLedger::for_policy(&cfg.policy, CommConvention::Lowrank.sync_bytes(&shapes, &cfg.dion));
    let eps = cfg.policy.epsilon();
    let n = cfg.n_workers;
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut sync_steps = Vec::new();

    for step in 1..=cfg.steps {
        let grads: Vec<Vec<Matrix>> = per_worker(&workers, pool.as_ref(), |w| {
            let params: Vec<Matrix> = w.layers.iter().map(|l| l.x.clone()).collect();
            problem.gradient(&params, &Batch::new(step, w.id, n, cfg.seed))
        });

        // buffers[l][i]: layer l of worker i.
        let mut buffers: Vec<Vec<Matrix>> = vec![Vec::with_capacity(n); shapes.len()];
        let mut rmmc = vec![vec![0.0; shapes.len()]; n];
        for (i, w) in workers.iter_mut().enumerate() {
            for (l, s) in w.layers.iter_mut().enumerate() {
                let b = s.m.add(&grads[i][l])?;
                let cur = frobenius_norm(&b);
                rmmc[i][l] = layer_rmmc(s.prev_norm, cur, eps);
                s.prev_norm = cur;
                buffers[l].push(b);
            }
        }
        let global = global_max_rmmc(&rmmc)?;
        let synced = decide(&cfg.policy, step, global);

        if synced {
            for (l, bufs) in buffers.iter().enumerate() {
                sync_layer(&mut workers, bufs, l, cfg, step)?;
            }
            sync_steps.push(step);
        } else {
            let d = &cfg.dion;
            for (i, w) in workers.iter_mut().enumerate() {
                for (l, s) in w.layers.iter_mut().enumerate() {
                    s.m = std::mem::replace(&mut buffers[l][i], Matrix::zeros(0, 0));
                    let x = apply_weight_decay(&s.x, d.eta, d.weight_decay);
                    s.x = apply_local_update(&x, &grads[i][l], d.eta_local())?;
                }
            }
        }

        ledger = account_step(&ledger, synced);
        ledger_fg = account_step(&ledger_fg, synced);
        ledger_lr = account_step(&ledger_lr, synced);

        let losses = per_worker(&workers, pool.as_ref(), |w| {
            let params: Vec<Matrix> = w.layers.iter().map(|l| l.x.clone()).collect();
            problem.loss(&params, &Batch::new(step, w.id, n, cfg.seed))
        });
        let mean_loss = losses.iter().sum::<f64>() / n as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
            });
        }
        records.push(StepRecord {
            step,
            mean_loss,
            global_rmmc: global,
            synced,
            bytes_cum: ledger.total_bytes,
            divergence: worker_divergence(&workers),
        });
    }

    let steps = cfg.steps;
    let last = records.last().expect("steps >= 1");
    let summary = RunSummary {
        policy: cfg.policy,
        seed: cfg.seed,
        steps,
        n_workers: n,
        final_loss: last.mean_loss,
        mean_divergence: records.iter().map(|r| r.divergence).sum::<f64>() / steps as f64,
        final_divergence: last.divergence,
        sync_count: ledger.sync_count,
        sync_rate: ledger.sync_count as f64 / steps as f64,
        sync_steps,
        comm: cfg.comm,
        total_bytes: ledger.total_bytes,
        total_bytes_fullgrad: ledger_fg.total_bytes,
        total_bytes_lowrank: ledger_lr.total_bytes,
    };
    Ok(SimOutput {
        records,
        summary,
        workers,
    })
}

/// Fraction of syncs after step 1 lying within `window` steps of a switch.
/// `None` when there are no such syncs.
pub fn near_switch_fraction(sync_steps: &[u64], switches: &[u64], window: u64) -> Option<f64> {
    let later: Vec<u64> = sync_steps.iter().copied().filter(|&s| s > 1).collect();
    if later.is_empty() {
        return None;
    }
    let near = later
        .iter()
        .filter(|&&s| switches.iter().any(|&w| s.abs_diff(w) <= window))
        .count();
    Some(near as f64 / later.len() as f64)
}
