//! Episodic training, evaluation, the ablation table and the λ sweep.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episode, Dataset, Episode, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{forward_on, map_forward, AblationMode, ModelDims, ModelParams};
use crate::tape::GradTape;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let shapes: Vec<(usize, usize)> = params.named().iter().map(|(_, m)| m.shape()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected adaptive-moment update. `params` and `grads` are
/// matched by position; a non-finite gradient aborts before anything moves.
pub fn optimizer_step(
    params: &mut [(String, &mut Matrix)],
    grads: &[&Matrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "optimizer got {} parameters, {} gradients and {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!("gradient shape mismatch for `{name}`")));
        }
        if !g.is_finite() {
            return Err(Error::TrainingDiverged { param: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            w[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub eval_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub alpha: f64,
    pub mu: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    pub mode: AblationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            episodes_per_epoch: 100,
            val_episodes: 100,
            eval_episodes: 1000,
            n_way: 5,
            k_shot: 1,
            queries: 15,
            alpha: 0.2,
            mu: 1.0,
            lr: 0.001,
            lr_decay: 0.1,
            decay_every: 8,
            embed_dim: 32,
            hidden: 64,
            seed: 0,
            mode: AblationMode::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be >= 0, got {}", self.mu));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive".into());
        }
        if self.n_way == 0 || self.k_shot == 0 || self.queries == 0 {
            return bad("n_way, k_shot and queries must be positive".into());
        }
        if self.queries % self.n_way != 0 {
            return bad(format!(
                "queries ({}) must be a multiple of n_way ({})",
                self.queries, self.n_way
            ));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return bad("embed_dim and hidden must be positive".into());
        }
        self.mode.validate()
    }

    pub fn dims(&self, ds: &Dataset) -> ModelDims {
        ModelDims {
            d_v: ds.feature_dim(),
            d_a: ds.attribute_dim(),
            embed: self.embed_dim,
            hidden: self.hidden,
        }
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = (epoch.saturating_sub(1) / self.decay_every) as i32;
        self.lr * self.lr_decay.powi(drops)
    }
}

// Independent rng streams derived from one seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 1 << 40;
const STREAM_EVAL: u64 = 2 << 40;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rng used to draw evaluation episode `index` for `seed`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    stream_rng(seed, STREAM_EVAL + index as u64)
}

pub fn init_params(ds: &Dataset, cfg: &TrainConfig) -> ModelParams {
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    ModelParams::random(cfg.dims(ds), &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent.
    pub val_acc: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!(
            "epoch {} train_loss {} val_acc {} lr {}",
            self.epoch,
            sig6(self.train_loss),
            sig6(self.val_acc),
            sig6(self.lr)
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 when nothing was trained.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn render(&self) -> String {
        self.epochs.iter().map(|e| e.line() + "\n").collect()
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch.checked_sub(1)?).map(|e| e.val_acc)
    }
}

/// Decimal rendering with 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    // Exponent after rounding to 6 significant digits.
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    let decimals = (5 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

fn episodes_for(ds: &Dataset, split: Split, cfg: &TrainConfig, count: usize, stream: u64) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, stream + i as u64);
            sample_episode(ds, split, cfg.n_way, cfg.k_shot, cfg.queries, &mut rng)
        })
        .collect()
}

fn mean_accuracy(params: &ModelParams, episodes: &[Episode], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        let out = map_forward(ep, params, cfg.mode, cfg.alpha, cfg.mu)?;
        total += out.accuracy(ep.query_labels_for_eval());
    }
    Ok(100.0 * total / episodes.len().max(1) as f64)
}

/// Forward, backward and one optimizer step on a single episode. Returns
/// the total loss before the update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    episode: &Episode,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape)?;
    let graph = forward_on(&mut tape, &bound, episode, cfg.mode, cfg.alpha, cfg.mu)?;
    let loss = tape.scalar(graph.total_loss);
    let grads = tape.backward(graph.total_loss)?;
    let mut named = params.named_mut();
    let mut ordered = Vec::with_capacity(named.len());
    for (name, _) in named.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for `{name}`")))?;
        ordered.push(g);
    }
    optimizer_step(&mut named, &ordered, state, lr)?;
    Ok(loss)
}

/// Trains from fresh parameters and returns the ones with the best
/// validation accuracy (earliest epoch on ties). Validation uses the same
/// episodes every epoch.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    train_with_progress(ds, cfg, |_| {})
}

pub fn train_with_progress(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let mut params = init_params(ds, cfg);
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }
    let val = episodes_for(ds, Split::Val, cfg, cfg.val_episodes, STREAM_VAL)?;
    let mut train_rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let mut state = AdamState::for_params(&params);
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(ds, Split::Train, cfg.n_way, cfg.k_shot, cfg.queries, &mut train_rng)?;
            loss_sum += train_step(&mut params, &mut state, &ep, cfg, lr)?;
        }
        let val_acc = mean_accuracy(&params, &val, cfg)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / cfg.episodes_per_epoch.max(1) as f64,
            val_acc,
            lr,
        };
        on_epoch(&record);
        log.epochs.push(record);
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, params.clone()));
            log.best_epoch = epoch;
        }
    }
    let (_, kept) = best.expect("at least one epoch ran");
    Ok((kept, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-episode accuracy, percent.
    pub accuracy: f64,
    /// Half-width of the 95% interval, percent.
    pub ci95: f64,
    pub episode_count: usize,
    pub lambda_mean_support: Option<f64>,
    /// `None` when queries are never fused.
    pub lambda_mean_query: Option<f64>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    /// Largest `|Σ_j p_ij − 1|` over all query rows seen.
    pub max_prob_sum_error: f64,
    pub mode: AblationMode,
    pub mode_label: String,
    pub split: Split,
    pub seed: u64,
    /// Seconds. Left out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// `(mean, 1.96·std/√n)` with the population standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

struct EpisodeStats {
    accuracy: f64,
    lambda_support: Vec<f64>,
    lambda_query: Vec<f64>,
    max_prob_sum_error: f64,
}

fn eval_one(params: &ModelParams, ds: &Dataset, split: Split, cfg: &TrainConfig, index: usize) -> Result<EpisodeStats> {
    let mut rng = episode_rng(cfg.seed, index);
    let ep = sample_episode(ds, split, cfg.n_way, cfg.k_shot, cfg.queries, &mut rng)?;
    let out = map_forward(&ep, params, cfg.mode, cfg.alpha, cfg.mu)?;
    let max_prob_sum_error = (0..out.probs.rows())
        .map(|i| (out.probs.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(EpisodeStats {
        accuracy: out.accuracy(ep.query_labels_for_eval()),
        lambda_support: out.lambda_support,
        lambda_query: out.lambda_query,
        max_prob_sum_error,
    })
}

/// Scores `params` on `episode_count` episodes of `split`. Episode `i` is
/// drawn from its own rng stream, so `threads > 0` (a rayon pool of that
/// size) yields exactly the single-threaded report.
pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    split: Split,
    cfg: &TrainConfig,
    episode_count: usize,
    threads: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    if ds.classes_in(split).is_empty() {
        return Err(Error::InvalidConfig(format!("split {split} has no classes")));
    }
    let start = Instant::now();
    let stats: Vec<EpisodeStats> = if threads == 0 {
        (0..episode_count)
            .map(|i| eval_one(params, ds, split, cfg, i))
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;
        pool.install(|| {
            (0..episode_count)
                .into_par_iter()
                .map(|i| eval_one(params, ds, split, cfg, i))
                .collect::<Result<Vec<_>>>()
        })?
    };

    let accs: Vec<f64> = stats.iter().map(|s| 100.0 * s.accuracy).collect();
    let (accuracy, ci95) = mean_ci95(&accs);
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let support: Vec<f64> = stats.iter().flat_map(|s| s.lambda_support.iter().copied()).collect();
    let query: Vec<f64> = stats.iter().flat_map(|s| s.lambda_query.iter().copied()).collect();
    let all = support.iter().chain(&query);
    let lambda_min = all.clone().copied().reduce(f64::min);
    let lambda_max = all.copied().reduce(f64::max);
    Ok(EvalReport {
        accuracy,
        ci95,
        episode_count,
        lambda_mean_support: mean(support),
        lambda_mean_query: mean(query),
        lambda_min,
        lambda_max,
        max_prob_sum_error: stats.iter().map(|s| s.max_prob_sum_error).fold(0.0, f64::max),
        mode: cfg.mode,
        mode_label: cfg.mode.label(),
        split,
        seed: cfg.seed,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub report: EvalReport,
}

/// Trains and tests one model per row of [`AblationMode::TABLE`], all from
/// the same seed, data and schedule. The aux setting of `base` is kept.
pub fn ablation_run(ds: &Dataset, base: &TrainConfig, threads: usize) -> Result<Vec<AblationRow>> {
    AblationMode::TABLE
        .iter()
        .map(|&flags| {
            let cfg = TrainConfig {
                mode: AblationMode { aux: base.mode.aux, ..flags },
                ..base.clone()
            };
            let (params, log) = train(ds, &cfg)?;
            let report = evaluate(&params, ds, Split::Test, &cfg, cfg.eval_episodes, threads)?;
            Ok(AblationRow {
                label: cfg.mode.label(),
                best_epoch: log.best_epoch,
                best_val_acc: log.best_val_acc(),
                report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub k_shot: usize,
    pub lambda_mean_support: Option<f64>,
    pub lambda_mean_query: Option<f64>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub accuracy: f64,
    /// Whether the mean query weight exceeds the mean support weight.
    pub query_above_support: Option<bool>,
}

/// Trains one model per shot count and reports its mean fusion weights on
/// the test split.
pub fn lambda_sweep(ds: &Dataset, base: &TrainConfig, shots: &[usize], threads: usize) -> Result<Vec<LambdaRow>> {
    if shots.is_empty() {
        return Err(Error::InvalidConfig("shot list is empty".into()));
    }
    shots
        .iter()
        .map(|&k| {
            let cfg = TrainConfig { k_shot: k, ..base.clone() };
            let (params, _) = train(ds, &cfg)?;
            let r = evaluate(&params, ds, Split::Test, &cfg, cfg.eval_episodes, threads)?;
            Ok(LambdaRow {
                k_shot: k,
                lambda_mean_support: r.lambda_mean_support,
                lambda_mean_query: r.lambda_mean_query,
                lambda_min: r.lambda_min,
                lambda_max: r.lambda_max,
                accuracy: r.accuracy,
                query_above_support: r.lambda_mean_query.zip(r.lambda_mean_support).map(|(q, s)| q > s),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_generate, SynthSpec};

    #[test]
    fn zero_gradient_step_is_noop() {
        let mut w = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let before = w.clone();
        let g = Matrix::zeros(1, 2);
        let mut state = AdamState::new(&[(1, 2)]);
        optimizer_step(&mut [("w".into(), &mut w)], &[&g], &mut state, 0.1).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let mut w = Matrix::scalar(0.5);
        let mut state = AdamState::new(&[(1, 1)]);
        let (lr, g1, g2) = (0.01, 0.3, -0.7);
        for g in [g1, g2] {
            optimizer_step(&mut [("w".into(), &mut w)], &[&Matrix::scalar(g)], &mut state, lr).unwrap();
        }
        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let x1 = 0.5 - lr * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((w.get(0, 0) - x2).abs() < 1e-12);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut w = Matrix::scalar(0.0);
        let mut state = AdamState::new(&[(1, 1)]);
        let g = Matrix::scalar(3.0);
        let mut prev = 0.0;
        for _ in 0..200 {
            optimizer_step(&mut [("w".into(), &mut w)], &[&g], &mut state, 0.01).unwrap();
            let step = prev - w.get(0, 0);
            prev = w.get(0, 0);
            assert!((step - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut w = Matrix::scalar(1.0);
        let mut state = AdamState::new(&[(1, 1)]);
        let err = optimizer_step(&mut [("f.0.bias".into(), &mut w)], &[&Matrix::filled(1, 1, f64::NAN)], &mut state, 0.1);
        assert!(matches!(err, Err(Error::TrainingDiverged { param }) if param == "f.0.bias"));
        assert_eq!(w.get(0, 0), 1.0);
    }

    #[test]
    fn config_ranges() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { alpha: 1.5, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 1.5, ..Default::default() },
            TrainConfig { queries: 7, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 0.001);
        assert_eq!(cfg.lr_at(8), 0.001);
        assert!((cfg.lr_at(9) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(17) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.001), "0.00100000");
        assert_eq!(sig6(45.678912), "45.6789");
        assert_eq!(sig6(100.0), "100.000");
        assert_eq!(sig6(1.6094379), "1.60944");
        assert_eq!(sig6(9.9999996), "10.0000");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(0.00999999996), "0.0100000");
    }

    #[test]
    fn ci95_matches_formula() {
        let accs = [20.0, 40.0, 60.0, 80.0];
        let (mean, ci) = mean_ci95(&accs);
        assert_eq!(mean, 50.0);
        let std = (500.0f64).sqrt();
        assert!((ci - 1.96 * std / 2.0).abs() < 1e-12);
        assert_eq!(mean_ci95(&[70.0; 5]).1, 0.0);
    }

    fn small() -> Dataset {
        let spec = SynthSpec {
            train_classes: 6,
            val_classes: 5,
            test_classes: 5,
            samples_per_class: 8,
            d_v: 6,
            d_a: 4,
            ..Default::default()
        };
        synth_generate(&spec, 3).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            episodes_per_epoch: 3,
            val_episodes: 4,
            embed_dim: 4,
            hidden: 6,
            queries: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let ds = small();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let (params, log) = train(&ds, &cfg).unwrap();
        assert_eq!(params, init_params(&ds, &cfg));
        assert!(log.epochs.is_empty());
        assert_eq!(log.best_epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let ds = small();
        let cfg = tiny_cfg();
        let (p1, l1) = train(&ds, &cfg).unwrap();
        let (p2, l2) = train(&ds, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert_eq!(l1.epochs.len(), 2);
        let best = l1.epochs.iter().map(|e| e.val_acc).fold(f64::MIN, f64::max);
        assert_eq!(l1.best_val_acc(), Some(best));
        assert!(l1.render().starts_with("epoch 1 train_loss "));
    }

    #[test]
    fn parallel_eval_matches_sequential() {
        let ds = small();
        let cfg = tiny_cfg();
        let params = init_params(&ds, &cfg);
        let a = evaluate(&params, &ds, Split::Test, &cfg, 12, 0).unwrap();
        let b = evaluate(&params, &ds, Split::Test, &cfg, 12, 3).unwrap();
        let c = evaluate(&params, &ds, Split::Test, &cfg, 12, 0).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
        assert!(a.max_prob_sum_error < 1e-9);
        assert!(a.lambda_min.unwrap() > 0.0 && a.lambda_max.unwrap() < 1.0);
    }
}
