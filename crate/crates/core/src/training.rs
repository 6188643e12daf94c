//! Minibatch training with periodic validation and patience-based early
//! stopping on NDCG@10.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::evaluation::{evaluate, EvalError, EvalReport, DEFAULT_KS};
use crate::model::{loss_and_grads, MaskRouting, ModelConfig, ModelError, ModelParams};
use crate::numerics::Tensor;

/// Learning rates the grid driver sweeps.
pub const LEARNING_RATE_GRID: [f64; 4] = [1e-3, 5e-4, 1e-4, 5e-5];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("history io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_steps: 1600,
            eval_every: 100,
            patience: 2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("batch_size, eval_every and patience must be positive");
        }
        if self.max_steps < self.eval_every {
            return bad("max_steps must be at least eval_every");
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One optimizer update on the mean cross-entropy of `batch`. Per-example
/// gradients are computed in parallel and summed in batch order.
pub fn step(
    params: &mut ModelParams,
    model: &ModelConfig,
    batch: &[&Example],
    state: &mut AdamState,
    cfg: &TrainConfig,
    routing: MaskRouting,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptySplit("batch"));
    }
    let at = state.t as usize + 1;
    let per_example = batch
        .par_iter()
        .map(|(prompt, target)| loss_and_grads(prompt, *target, params, model, routing))
        .collect::<Result<Vec<_>, _>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut iter = per_example.into_iter();
    let (first_loss, mut grads) = iter.next().expect("non-empty batch");
    loss += first_loss;
    for (l, g) in iter {
        loss += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b));
    }
    loss *= scale;
    grads.iter_mut().for_each(|g| g.scale_in_place(scale));

    if !loss.is_finite() {
        return Err(TrainError::Diverged {
            step: at,
            what: format!("loss {loss}"),
        });
    }
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::Diverged {
            step: at,
            what: format!("non-finite gradient for {}", params.names()[i]),
        });
    }
    state.apply(params, &grads, cfg);
    Ok(loss)
}

/// Patience rule: stop once `patience` consecutive evaluations fail to be
/// strictly better than the best so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    misses: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            misses: 0,
        }
    }

    pub fn observe(&mut self, step: usize, metric: f64) -> Observation {
        let improved = match self.best {
            None => !metric.is_nan(),
            Some((_, b)) => metric > b,
        };
        if improved {
            self.best = Some((step, metric));
            self.misses = 0;
        } else {
            self.misses += 1;
        }
        Observation {
            improved,
            stop: self.misses >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxSteps => "max_steps",
            StopReason::EarlyStop => "early_stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Mean minibatch loss since the previous evaluation.
    pub train_loss: f64,
    pub hr5: f64,
    pub ndcg5: f64,
    pub hr10: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    pub best_step: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best_record(&self) -> Option<&EvalRecord> {
        self.records.iter().find(|r| r.step == self.best_step)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,train_loss,hr5,ndcg5,hr10,ndcg10")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.train_loss, r.hr5, r.ndcg5, r.hr10, r.ndcg10
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: ModelParams,
    pub final_params: ModelParams,
    pub history: TrainHistory,
}

/// Deterministic reshuffle-per-epoch batch order.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains with a caller-supplied validation function returning the report
/// used for model selection (NDCG@10).
pub fn train_with<F>(
    init: ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Example],
    routing: MaskRouting,
    mut validate: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&ModelParams) -> Result<EvalReport, TrainError>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let mut params = init;
    let mut best_params = params.clone();
    let mut state = AdamState::new(&params);
    let mut sampler = BatchSampler::new(train.len(), cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut records = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stop_reason = StopReason::MaxSteps;

    for step_no in 1..=cfg.max_steps {
        let idx = sampler.next_batch(cfg.batch_size.min(train.len()));
        let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        loss_sum += step(&mut params, model, &batch, &mut state, cfg, routing)?;
        loss_count += 1;

        if step_no % cfg.eval_every == 0 {
            let report = validate(&params)?;
            let metric = |k, hr: bool| report.at(k).map_or(0.0, |m| if hr { m.hr } else { m.ndcg });
            let rec = EvalRecord {
                step: step_no,
                train_loss: loss_sum / loss_count as f64,
                hr5: metric(5, true),
                ndcg5: metric(5, false),
                hr10: metric(10, true),
                ndcg10: metric(10, false),
            };
            loss_sum = 0.0;
            loss_count = 0;
            log::info!(
                "step {step_no}: loss {:.4} valid H@10 {:.4} N@10 {:.4}",
                rec.train_loss,
                rec.hr10,
                rec.ndcg10
            );
            let obs = stopper.observe(step_no, rec.ndcg10);
            records.push(rec);
            if obs.improved {
                best_params = params.clone();
            }
            if obs.stop {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        best_params,
        final_params: params,
        history: TrainHistory {
            records,
            best_step: stopper.best().map_or(0, |(s, _)| s),
            stop_reason,
        },
    })
}

/// Trains on `train`, validating on `valid` every `eval_every` steps.
pub fn train(
    init: ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Example],
    valid: &[Example],
    routing: MaskRouting,
) -> Result<TrainOutcome, TrainError> {
    if valid.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }
    train_with(init, model, cfg, train_set, routing, |p| {
        Ok(evaluate(p, model, valid, "valid", &DEFAULT_KS)?.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::CutoffMetrics;
    use crate::mask::{build_schedule, BlockOrder, LayerSchedule, Scheme};
    use crate::segmentation::{tokenize_prompt, ItemCatalog, PromptTemplate};

    fn setup(schedule: LayerSchedule) -> (ModelConfig, Vec<Example>) {
        let cat = ItemCatalog::new(
            vec![
                vec![3, 4],
                vec![5, 6, 7],
                vec![8],
                vec![9, 10],
                vec![11, 12, 13],
            ],
            14,
        )
        .unwrap();
        let t = PromptTemplate::standard();
        let examples = (0..12)
            .map(|i| {
                let h = [i % 5, (i + 1) % 5, (i + 3) % 5];
                (tokenize_prompt(&h, &cat, &t).unwrap(), (i + 2) % 5)
            })
            .collect();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: schedule.len(),
            ffn_dim: 16,
            max_seq_len: 16,
            vocab_size: 14,
            n_items: 5,
            schedule,
            seed: 3,
        };
        (cfg, examples)
    }

    fn report(ndcg10: f64) -> EvalReport {
        EvalReport {
            split: "valid".into(),
            n_examples: 1,
            metrics: vec![CutoffMetrics {
                k: 10,
                hr: ndcg10,
                ndcg: ndcg10,
            }],
        }
    }

    #[test]
    fn patience_trace() {
        let mut es = EarlyStopping::new(2);
        let obs: Vec<_> = [0.10, 0.20, 0.15, 0.18]
            .iter()
            .enumerate()
            .map(|(i, &m)| es.observe((i + 1) * 100, m))
            .collect();
        assert!(obs[..3].iter().all(|o| !o.stop));
        assert!(obs[3].stop);
        assert_eq!(es.best(), Some((200, 0.20)));
        // ties do not count as improvement
        let mut es = EarlyStopping::new(2);
        es.observe(1, 0.5);
        assert!(!es.observe(2, 0.5).improved);
    }

    #[test]
    fn early_stop_returns_best_params() {
        let (cfg, ex) = setup(LayerSchedule::uniform(1, Scheme::Or));
        let tc = TrainConfig {
            batch_size: 4,
            max_steps: 1600,
            eval_every: 100,
            ..TrainConfig::default()
        };
        let scripted = [0.10, 0.20, 0.15, 0.18];
        let mut seen = Vec::new();
        let out = train_with(
            ModelParams::init(&cfg).unwrap(),
            &cfg,
            &tc,
            &ex,
            MaskRouting::Scheduled,
            |p| {
                seen.push(p.clone());
                Ok(report(scripted[seen.len() - 1]))
            },
        )
        .unwrap();
        assert_eq!(out.history.records.len(), 4);
        assert_eq!(out.history.stop_reason, StopReason::EarlyStop);
        assert_eq!(out.history.best_step, 200);
        assert_eq!(out.best_params, seen[1]);
        assert_eq!(out.final_params, seen[3]);
    }

    #[test]
    fn improving_runs_to_max_steps() {
        let (cfg, ex) = setup(LayerSchedule::uniform(1, Scheme::Or));
        let tc = TrainConfig {
            batch_size: 2,
            max_steps: 30,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let mut k = 0.0;
        let out = train_with(
            ModelParams::init(&cfg).unwrap(),
            &cfg,
            &tc,
            &ex,
            MaskRouting::Scheduled,
            |_| {
                k += 0.1;
                Ok(report(k))
            },
        )
        .unwrap();
        assert_eq!(out.history.stop_reason, StopReason::MaxSteps);
        assert_eq!(out.history.best_step, 30);
        let steps: Vec<usize> = out.history.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 30]);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (cfg, ex) = setup(LayerSchedule::uniform(2, Scheme::Or));
        let mut params = ModelParams::init(&cfg).unwrap();
        let before = params.clone();
        let tc = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&params);
        let batch: Vec<&Example> = ex.iter().take(3).collect();
        let loss = step(
            &mut params,
            &cfg,
            &batch,
            &mut st,
            &tc,
            MaskRouting::Scheduled,
        )
        .unwrap();
        assert!(loss.is_finite());
        assert_eq!(params, before);
    }

    #[test]
    fn single_example_overfits() {
        let sched = build_schedule(3, 1, 1, BlockOrder::CANONICAL, Scheme::Cr).unwrap();
        let (cfg, ex) = setup(sched);
        let mut params = ModelParams::init(&cfg).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&params);
        let batch = vec![&ex[0]];
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = step(
                &mut params,
                &cfg,
                &batch,
                &mut st,
                &tc,
                MaskRouting::Scheduled,
            )
            .unwrap();
        }
        assert!(last < 0.1, "loss {last}");
    }

    #[test]
    fn non_finite_params_diverge() {
        let (cfg, ex) = setup(LayerSchedule::uniform(1, Scheme::Or));
        let mut params = ModelParams::init(&cfg).unwrap();
        let last = params.tensors().len() - 1;
        params.tensors_mut()[last].data_mut()[0] = f64::NAN;
        let mut st = AdamState::new(&params);
        let batch: Vec<&Example> = ex.iter().collect();
        let err = step(
            &mut params,
            &cfg,
            &batch,
            &mut st,
            &TrainConfig::default(),
            MaskRouting::Scheduled,
        );
        assert!(matches!(err, Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn all_or_matches_causal_training() {
        let (cfg, ex) = setup(LayerSchedule::uniform(2, Scheme::Or));
        let tc = TrainConfig {
            batch_size: 3,
            max_steps: 20,
            eval_every: 10,
            ..TrainConfig::default()
        };
        let run = |routing| {
            train(
                ModelParams::init(&cfg).unwrap(),
                &cfg,
                &tc,
                &ex,
                &ex[..4],
                routing,
            )
            .unwrap()
        };
        let a = run(MaskRouting::Scheduled);
        let b = run(MaskRouting::CausalReference);
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.max_steps = 50;
        assert!(c.validate().is_err());
    }
}
