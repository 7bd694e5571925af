//! Built-in numerical suites: CTC against path enumeration, analytic
//! gradients against finite differences, and RoPE shift invariance.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{ctc_brute_force, ctc_loss, LogProbLattice};
use crate::decoder::{ConditionMask, Decoder, DecoderConfig};
use crate::duration::{duration_cfm_loss_with_draw, DurationConfig, DurationPredictor, DurationRatio, ScalarDraw};
use crate::encoder::{CtcHead, Encoder, EncoderConfig};
use crate::error::Result;
use crate::flow::{cfm_loss_with_draw, FlowDraw};
use crate::numerics::gradcheck::{graph_grad_check, randomize};
use crate::numerics::nn::FeedForward;
use crate::numerics::{adaln_block, apply_rope, AdaLnModulation, Init, ParamStore, Precision, Tensor, TimeEmbedding};

pub const CTC_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ROPE_TOLERANCE: f64 = 1e-6;
const FD_EPS: f64 = 1e-4;

/// One measured quantity and the bound it must stay under.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "{verdict} {} ({:.2}s)", self.name, self.seconds)?;
        for c in &self.checks {
            let mark = if c.passed() { "ok" } else { "FAILED" };
            writeln!(
                f,
                "  {mark:<6} {:<28} worst {:.3e} < {:.0e} over {} case(s)",
                c.name, c.worst, c.tolerance, c.cases
            )?;
        }
        Ok(())
    }
}

fn timed(name: &'static str, run: impl FnOnce() -> Result<Vec<Check>>) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = run()?;
    Ok(SuiteReport {
        name,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn random_lattice<R: Rng>(rng: &mut R, frames: usize, vocab: usize) -> Result<LogProbLattice> {
    let logits = Init::Normal(1.5).build(&[frames, vocab], rng);
    LogProbLattice::from_logits(&logits)
}

/// Forward–backward loss against enumeration of every path, for
/// `T ≤ 6`, `V ≤ 4`, `|labels| ≤ 3`, `lattices_per_cell` lattices per
/// `(T, V, |labels|)` cell.
pub fn ctc_oracle_suite(seed: u64, lattices_per_cell: usize) -> Result<SuiteReport> {
    timed("ctc-oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checks = Vec::new();
        for frames in 1..=6 {
            let mut worst: f64 = 0.0;
            let mut cases = 0;
            for vocab in 2..=4 {
                for n_labels in 0..=3 {
                    for _ in 0..lattices_per_cell {
                        let labels: Vec<usize> = (0..n_labels).map(|_| rng.random_range(1..vocab)).collect();
                        let lattice = random_lattice(&mut rng, frames, vocab)?;
                        let fast = ctc_loss(&lattice, &labels).loss;
                        let slow = ctc_brute_force(&lattice, &labels)?;
                        let diff = match (fast.is_finite(), slow.is_finite()) {
                            (true, true) => (fast - slow).abs(),
                            (false, false) => 0.0,
                            _ => f64::INFINITY,
                        };
                        worst = worst.max(diff);
                        cases += 1;
                    }
                }
            }
            checks.push(Check {
                name: format!("loss vs enumeration, T={frames}"),
                worst,
                tolerance: CTC_TOLERANCE,
                cases,
            });
        }
        Ok(checks)
    })
}

fn grad_check(name: &str, err: f64) -> Check {
    Check {
        name: name.to_string(),
        worst: err,
        tolerance: GRADIENT_TOLERANCE,
        cases: 1,
    }
}

fn encoder_config() -> EncoderConfig {
    EncoderConfig {
        input_dim: 4,
        model_dim: 8,
        n_layers: 1,
        n_heads: 2,
        frontend_stride: 2,
        vocab_size: 4,
        ffn_mult: 1,
    }
}

fn decoder_config() -> DecoderConfig {
    DecoderConfig {
        feature_dim: 3,
        content_dim: 4,
        speaker_dim: 2,
        model_dim: 8,
        n_layers: 1,
        n_heads: 2,
        time_dim: 6,
        ffn_mult: 1,
        position_scaling: true,
        speaker_conditioning: true,
    }
}

/// Relative error of analytic against central-difference gradients for
/// every trainable block, in 64-bit parameters at widths of at most 8.
pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    timed("gradient-check", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checks = Vec::new();

        let mut store = ParamStore::new(Precision::F64);
        let encoder = Encoder::new(&mut store, "encoder", encoder_config(), &mut rng)?;
        randomize(&mut store, 0.4, &mut rng);
        let x = Init::Normal(1.0).build(&[7, 4], &mut rng);
        let err = graph_grad_check(&mut store, FD_EPS, |g| {
            let c = encoder.forward(g, &x);
            let sq = g.square(c);
            g.mean(sq)
        })?;
        checks.push(grad_check("encoder block", err));

        let mut store = ParamStore::new(Precision::F64);
        let decoder = Decoder::new(&mut store, "decoder", decoder_config(), &mut rng)?;
        randomize(&mut store, 0.4, &mut rng);
        let x_t = Init::Normal(1.0).build(&[5, 3], &mut rng);
        let content = Init::Normal(1.0).build(&[4, 4], &mut rng);
        let target = Init::Normal(1.0).build(&[5, 3], &mut rng);
        let err = graph_grad_check(&mut store, FD_EPS, |g| {
            let xv = g.input(x_t.clone());
            let cv = g.leaf(content.clone());
            let sv = g.input(Tensor::row_vector(vec![0.6, -0.8]));
            let v = decoder.forward(g, xv, 0.35, cv, sv, ConditionMask::FULL);
            let tv = g.input(target.clone());
            g.mse(v, tv)
        })?;
        checks.push(grad_check("decoder block", err));

        let mut store = ParamStore::new(Precision::F64);
        let time = TimeEmbedding::new(&mut store, "time", 6, &mut rng)?;
        let modulation = AdaLnModulation::new(&mut store, "mod", 6, 8, &mut rng)?;
        let ffn = FeedForward::new(&mut store, "ffn", 8, 8, &mut rng)?;
        randomize(&mut store, 0.5, &mut rng);
        let h = Init::Normal(1.0).build(&[3, 8], &mut rng);
        let err = graph_grad_check(&mut store, FD_EPS, |g| {
            let hv = g.input(h.clone());
            let te = time.forward(g, 0.4);
            let act = g.silu(te);
            let y = adaln_block(g, hv, act, &modulation, |g, z| ffn.forward(g, z));
            let sq = g.square(y);
            g.mean(sq)
        })?;
        checks.push(grad_check("adaln", err));

        let mut store = ParamStore::new(Precision::F64);
        let head = CtcHead::new(&mut store, "head", 8, 4, &mut rng)?;
        randomize(&mut store, 0.5, &mut rng);
        let frames = Init::Normal(1.0).build(&[6, 8], &mut rng);
        let err = graph_grad_check(&mut store, FD_EPS, |g| {
            let c = g.input(frames.clone());
            let logp = head.forward(g, c);
            g.ctc_loss(logp, &[1, 3, 3])
        })?;
        checks.push(grad_check("ctc through log-softmax", err));

        let mut store = ParamStore::new(Precision::F64);
        let decoder = Decoder::new(&mut store, "decoder", decoder_config(), &mut rng)?;
        randomize(&mut store, 0.4, &mut rng);
        let x1 = Init::Normal(1.0).build(&[5, 3], &mut rng);
        let draw = FlowDraw::sample(&mut rng, 5, 3);
        let err = graph_grad_check(&mut store, FD_EPS, |g| {
            let cv = g.input(content.clone());
            let sv = g.input(Tensor::row_vector(vec![0.6, -0.8]));
            cfm_loss_with_draw(g, &x1, &draw, |g, xt, t| {
                decoder.forward(g, xt, t, cv, sv, ConditionMask::CONTENT_ONLY)
            })
            .expect("draw matches target shape")
        })?;
        checks.push(grad_check("flow-matching loss", err));

        let mut store = ParamStore::new(Precision::F64);
        let duration_config = DurationConfig {
            content_dim: 4,
            speaker_dim: 2,
            model_dim: 8,
            n_layers: 1,
            n_heads: 2,
            time_dim: 8,
            ffn_mult: 1,
        };
        let predictor = DurationPredictor::new(&mut store, "duration", duration_config, &mut rng)?;
        randomize(&mut store, 0.4, &mut rng);
        let ratio = DurationRatio::new(0.77)?;
        let draw = ScalarDraw { r0: 0.3, t: 0.6 };
        let err = graph_grad_check(&mut store, FD_EPS, |g| {
            let cv = g.leaf(content.clone());
            let sv = g.input(Tensor::row_vector(vec![0.6, 0.8]));
            duration_cfm_loss_with_draw(g, &predictor, ratio, cv, sv, draw)
        })?;
        checks.push(grad_check("duration loss", err));
        Ok(checks)
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `<rope(q, p1), rope(k, p2)>` must not change when both positions shift by
/// the same real offset.
pub fn rope_suite(seed: u64, draws: usize) -> Result<SuiteReport> {
    timed("rope-relative-position", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checks = Vec::new();
        for head_dim in [2, 4, 8, 16] {
            let mut worst: f64 = 0.0;
            for _ in 0..draws {
                let q = Init::Normal(1.0).build(&[1, head_dim], &mut rng).into_data();
                let k = Init::Normal(1.0).build(&[1, head_dim], &mut rng).into_data();
                let p1 = rng.random_range(0.0..200.0);
                let p2 = rng.random_range(0.0..200.0);
                let d = rng.random_range(-100.0..100.0);
                let qk = |a: f64, b: f64| -> Result<f64> {
                    let rq = apply_rope(std::slice::from_ref(&q), &[a], crate::numerics::ROPE_BASE)?;
                    let rk = apply_rope(std::slice::from_ref(&k), &[b], crate::numerics::ROPE_BASE)?;
                    Ok(dot(&rq[0], &rk[0]))
                };
                worst = worst.max((qk(p1, p2)? - qk(p1 + d, p2 + d)?).abs());
            }
            checks.push(Check {
                name: format!("shift identity, head dim {head_dim}"),
                worst,
                tolerance: ROPE_TOLERANCE,
                cases: draws,
            });
        }
        Ok(checks)
    })
}

/// The suites run by the `selftest` command.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        ctc_oracle_suite(seed, 200)?,
        gradient_suite(seed)?,
        rope_suite(seed, 100)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_suites_pass() {
        assert!(ctc_oracle_suite(1, 5).unwrap().passed());
        assert!(rope_suite(1, 10).unwrap().passed());
        let grads = gradient_suite(1).unwrap();
        assert!(grads.passed(), "{grads}");
        assert_eq!(grads.checks.len(), 6);
    }

    #[test]
    fn failing_checks_are_reported() {
        let c = Check {
            name: "x".into(),
            worst: f64::NAN,
            tolerance: 1.0,
            cases: 1,
        };
        assert!(!c.passed());
        let report = SuiteReport {
            name: "demo",
            checks: vec![c],
            seconds: 0.0,
        };
        assert!(report.to_string().starts_with("FAIL demo"));
    }
}
