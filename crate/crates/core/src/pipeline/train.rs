use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{RecognizerConfig, TrainConfig};
use super::data::{Corpus, Example};
use super::model::{AccentNormalizer, Recognizer, CHECKPOINT_FILE, CONFIG_FILE};
use crate::datagen::Split;
use crate::decoder::ConditionMask;
use crate::duration::{duration_cfm_loss, DurationRatio};
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, cfm_loss_with_draw, sample_condition_mask, FlowDraw};
use crate::numerics::optim::Optimizer;
use crate::numerics::{checkpoint, GradBuffer, Graph, Precision, Tensor, Var};
use crate::seed::derived_rng;

pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cfm: f64,
    pub ctc: f64,
    pub dur: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub train: LossBreakdown,
    pub val_cfm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<TrainLogEntry>,
    pub final_val_cfm: f64,
}

/// Builds the composite loss of one example on `g`:
/// `cfm + λ_ctc · ctc / |labels| + λ_dur · dur`. Terms with zero weight are
/// left out of the graph.
pub fn example_loss<R: Rng>(
    model: &AccentNormalizer,
    g: &mut Graph,
    example: &Example,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    model.check_speaker(&example.speaker)?;
    let content = model.encoder.forward(g, &example.source);
    let speaker = g.input(Tensor::row_vector(example.speaker.values().to_vec()));

    let mask = sample_condition_mask(rng, config.p_uncond, config.p_content_drop)?;
    let decoder = &model.decoder;
    let cfm = cfm_loss(g, &example.target, rng, |g, xt, t| decoder.forward(g, xt, t, content, speaker, mask))?;
    let mut total = cfm;
    let mut parts = LossBreakdown {
        cfm: g.scalar(cfm),
        ..LossBreakdown::default()
    };

    let lambda_ctc = config.effective_lambda_ctc();
    if lambda_ctc > 0.0 {
        let logp = model.ctc_head.forward(g, content);
        let ctc = g.ctc_loss(logp, example.labels.symbols());
        if g.scalar(ctc).is_infinite() {
            warn!("{}: labels do not fit the encoded frames, skipping its ctc term", example.utt_id);
        } else {
            let ctc = g.scale(ctc, 1.0 / example.labels.len().max(1) as f64);
            parts.ctc = g.scalar(ctc);
            let weighted = g.scale(ctc, lambda_ctc);
            total = g.add(total, weighted);
        }
    }

    if config.lambda_dur > 0.0 {
        let dur_speaker = g.input(Tensor::row_vector(model.duration_speaker(&example.speaker)));
        let ratio = DurationRatio::new(example.true_ratio())?;
        let dur = duration_cfm_loss(g, &model.duration, ratio, content, dur_speaker, rng);
        parts.dur = g.scalar(dur);
        let weighted = g.scale(dur, config.lambda_dur);
        total = g.add(total, weighted);
    }
    parts.total = g.scalar(total);
    Ok((total, parts))
}

/// Learning rate after linear warm-up and a cosine decay to a tenth.
pub fn learning_rate(config: &TrainConfig, step: usize) -> f64 {
    let base = config.learning_rate;
    if step < config.warmup_steps {
        return base * (step + 1) as f64 / config.warmup_steps as f64;
    }
    let span = config.n_steps.saturating_sub(config.warmup_steps).max(1);
    let progress = ((step - config.warmup_steps) as f64 / span as f64).min(1.0);
    base * (0.1 + 0.9 * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Mean flow-matching loss over fixed draws, with full conditioning.
pub fn validation_cfm_loss(model: &AccentNormalizer, examples: &[&Example], draws: usize, seed: u64) -> Result<f64> {
    if examples.is_empty() || draws == 0 {
        return Err(Error::InvalidArgument("validation needs examples and draws".into()));
    }
    let mut sum = 0.0;
    for example in examples {
        let content = model.content(&example.source)?;
        for k in 0..draws {
            let mut rng = derived_rng(seed, "validation", &format!("{}#{k}", example.utt_id));
            let draw = FlowDraw::sample(&mut rng, example.target.rows(), example.target.cols());
            let mut g = Graph::new(&model.store);
            let c = g.input(content.frames.clone());
            let s = g.input(Tensor::row_vector(example.speaker.values().to_vec()));
            let loss = cfm_loss_with_draw(&mut g, &example.target, &draw, |g, xt, t| {
                model.decoder.forward(g, xt, t, c, s, ConditionMask::FULL)
            })?;
            sum += g.scalar(loss);
        }
    }
    Ok(sum / (examples.len() * draws) as f64)
}

fn clip(grads: &mut GradBuffer, max_norm: f64) {
    if max_norm > 0.0 {
        let norm = grads.global_norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
}

/// Cycles through shuffled epochs of `n` indices.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains the full model on the corpus' training split.
pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<(AccentNormalizer, TrainReport)> {
    config.validate()?;
    let train_set = corpus.split(Split::Train);
    let val_set = corpus.split(Split::Val);
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("corpus has no training rows".into()));
    }
    let val_set = if val_set.is_empty() { train_set.clone() } else { val_set };

    let mut model = AccentNormalizer::new(&config.model, config.ablate, config.seed, Precision::F32)?;
    info!(
        "training {} parameters on {} pairs for {} steps (ablation: {})",
        model.store.num_values(),
        train_set.len(),
        config.n_steps,
        config.ablate
    );
    let mut opt = Optimizer::new(config.optimizer, &model.store);
    let mut grads = GradBuffer::zeros_like(&model.store);
    let mut rng = derived_rng(config.seed, "train", "");
    let mut sampler = BatchSampler::new(train_set.len());
    let mut history = Vec::new();
    let mut running = LossBreakdown::default();
    let mut running_n = 0usize;

    for step in 0..config.n_steps {
        grads.clear();
        let mut step_loss = LossBreakdown::default();
        for _ in 0..config.batch_size {
            let example = train_set[sampler.next(&mut rng)];
            let mut g = Graph::new(&model.store);
            let (loss, parts) = example_loss(&model, &mut g, example, config, &mut rng)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step} on {}: cfm {} ctc {} dur {}",
                    example.utt_id, parts.cfm, parts.ctc, parts.dur
                )));
            }
            g.backward(loss)?.accumulate_into(&mut grads, 1.0 / config.batch_size as f64);
            let w = 1.0 / config.batch_size as f64;
            step_loss.cfm += w * parts.cfm;
            step_loss.ctc += w * parts.ctc;
            step_loss.dur += w * parts.dur;
            step_loss.total += w * parts.total;
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        clip(&mut grads, config.grad_clip);
        opt.step(&mut model.store, &grads, learning_rate(config, step));

        running.cfm += step_loss.cfm;
        running.ctc += step_loss.ctc;
        running.dur += step_loss.dur;
        running.total += step_loss.total;
        running_n += 1;
        let last = step + 1 == config.n_steps;
        let log_now = config.log_every > 0 && (step + 1) % config.log_every == 0;
        let val_now = last || (config.val_every > 0 && (step + 1) % config.val_every == 0);
        if log_now || val_now || step == 0 {
            let n = running_n as f64;
            let mean = LossBreakdown {
                cfm: running.cfm / n,
                ctc: running.ctc / n,
                dur: running.dur / n,
                total: running.total / n,
            };
            let val_cfm = if val_now {
                Some(validation_cfm_loss(&model, &val_set, config.val_draws.max(1), config.seed)?)
            } else {
                None
            };
            info!(
                "step {:>6}  loss {:.4}  cfm {:.4}  ctc {:.4}  dur {:.4}{}",
                step + 1,
                mean.total,
                mean.cfm,
                mean.ctc,
                mean.dur,
                val_cfm.map(|v| format!("  val_cfm {v:.4}")).unwrap_or_default()
            );
            history.push(TrainLogEntry {
                step: step + 1,
                train: mean,
                val_cfm,
            });
            running = LossBreakdown::default();
            running_n = 0;
        }
    }
    let final_val_cfm = match history.last().and_then(|h| h.val_cfm) {
        Some(v) => v,
        None => validation_cfm_loss(&model, &val_set, config.val_draws.max(1), config.seed)?,
    };
    Ok((model, TrainReport { history, final_val_cfm }))
}

/// Writes `checkpoint.bin`, the resolved `config.toml` and `metrics.json`.
pub fn save_trained(model: &AccentNormalizer, config: &TrainConfig, report: &TrainReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    checkpoint::save(&model.store, &dir.join(CHECKPOINT_FILE))?;
    config.save(&dir.join(CONFIG_FILE))?;
    let metrics = serde_json::to_string_pretty(report).expect("report serializes");
    let path = dir.join(METRICS_FILE);
    fs::write(&path, metrics + "\n").map_err(|e| Error::io(&path, e))
}

/// Trains the native-only recognizer on target features of the training split.
pub fn train_recognizer(config: &TrainConfig, corpus: &Corpus) -> Result<Recognizer> {
    config.validate()?;
    let settings: &RecognizerConfig = &config.recognizer;
    let train_set = corpus.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("corpus has no training rows".into()));
    }
    let mut recognizer = Recognizer::new(&config.model, settings.seed)?;
    let mut opt = Optimizer::new(config.optimizer, &recognizer.store);
    let mut grads = GradBuffer::zeros_like(&recognizer.store);
    let mut rng = derived_rng(settings.seed, "recognizer", "");
    let mut sampler = BatchSampler::new(train_set.len());
    let schedule = TrainConfig {
        n_steps: settings.n_steps,
        learning_rate: settings.learning_rate,
        ..config.clone()
    };
    for step in 0..settings.n_steps {
        grads.clear();
        let mut mean = 0.0;
        for _ in 0..settings.batch_size {
            let example = train_set[sampler.next(&mut rng)];
            let mut g = Graph::new(&recognizer.store);
            let content = recognizer.encoder.forward(&mut g, &example.target);
            let logp = recognizer.head.forward(&mut g, content);
            let ctc = g.ctc_loss(logp, example.labels.symbols());
            if g.scalar(ctc).is_infinite() {
                warn!("{}: labels do not fit the encoded frames, skipped", example.utt_id);
                continue;
            }
            let ctc = g.scale(ctc, 1.0 / example.labels.len().max(1) as f64);
            let value = g.scalar(ctc);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "recognizer loss at step {step} on {}",
                    example.utt_id
                )));
            }
            mean += value / settings.batch_size as f64;
            g.backward(ctc)?.accumulate_into(&mut grads, 1.0 / settings.batch_size as f64);
        }
        clip(&mut grads, config.grad_clip);
        opt.step(&mut recognizer.store, &grads, learning_rate(&schedule, step));
        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            info!("recognizer step {:>6}  ctc {:.4}", step + 1, mean);
        } else {
            debug!("recognizer step {:>6}  ctc {:.4}", step + 1, mean);
        }
    }
    Ok(recognizer)
}
