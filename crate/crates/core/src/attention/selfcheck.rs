//! The invariant suite behind `reshape attn selfcheck`.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

pub const TOY_TOKENS: usize = 8;
pub const TOY_WIDTH: usize = 8;
pub const TOY_HIDDEN: usize = 16;
pub const TOY_SAMPLES: usize = 16;
pub const TOY_SEED: u64 = 7;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the per-entry relative gradient error.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Schedule used by the toy: 50 steps, β from 1e-3 to 0.2.
pub fn toy_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(50, 1e-3, 0.2).expect("constant schedule is valid")
}

/// The fixed-seed 16-sample training setup.
pub fn toy_setup() -> (ToyDenoiser, Vec<ToySample>, TrainConfig) {
    let denoiser = ToyDenoiser::init(TOY_WIDTH, TOY_HIDDEN, toy_schedule(), TOY_SEED);
    let data = make_toy_dataset(TOY_SAMPLES, TOY_TOKENS, TOY_WIDTH, TOY_SEED + 1);
    let cfg = TrainConfig { steps: 200, learning_rate: 0.5, seed: TOY_SEED + 2, eval_draws: 8 };
    (denoiser, data, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn random_weights(rng: &mut ChaCha8Rng, d: usize) -> AttentionWeights {
    AttentionWeights { w_q: random(rng, d, d), w_k: random(rng, d, d), w_v: random(rng, d, d) }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

pub fn softmax_rows_check(seed: u64) -> CheckResult {
    check("softmax rows sum to 1", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (n, m, d) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=32));
            let scale = rng.gen_range(0.1..20.0);
            let p = attention_probs(&(random(&mut rng, n, d) * scale), &random(&mut rng, m, d))?;
            for row in p.row_iter() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
        Ok((worst <= 1e-12, format!("max |row sum - 1| = {worst:.3e}")))
    })
}

pub fn duplicate_reference_check(seed: u64) -> CheckResult {
    check("reference attention with y = z equals self-attention", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let (n, d) = (rng.gen_range(1..=16), rng.gen_range(1..=32));
            let z = random(&mut rng, n, d);
            let w = random_weights(&mut rng, d);
            let got = reference_self_attention(&z, &z, &w)?;
            let plain = attention(&(&z * &w.w_q), &(&z * &w.w_k), &(&z * &w.w_v))?;
            worst = worst.max((got - plain).abs().max());
        }
        Ok((worst <= 1e-9, format!("max abs diff over 100 draws = {worst:.3e}")))
    })
}

pub fn dual_stream_check(seed: u64) -> CheckResult {
    check("dual cross-attention additivity and stream swap", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ok = true;
        for _ in 0..100 {
            let (n, mt, mi, d) =
                (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=32));
            let z = random(&mut rng, n, d);
            let (text, image) = (random(&mut rng, mt, d), random(&mut rng, mi, d));
            let wt = random_weights(&mut rng, d);
            let mut wi = random_weights(&mut rng, d);
            wi.w_q = wt.w_q.clone();
            let both = dual_cross_attention(&z, &text, &image, &wt, &wi)?;
            ok &= both == dual_cross_attention(&z, &image, &text, &wi, &wt)?;
            wi.w_v.fill(0.0);
            ok &= dual_cross_attention(&z, &text, &image, &wt, &wi)? == cross_attention(&z, &text, &wt)?;
        }
        Ok((ok, if ok { "exact over 100 draws".into() } else { "identity violated".into() }))
    })
}

pub fn noising_endpoints_check() -> CheckResult {
    check("forward noising endpoints", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (z0, eps) = (random(&mut rng, 8, 8), random(&mut rng, 8, 8));
        let s = NoiseSchedule::new(vec![1.0, 0.25, 1e-300])?;
        let at0 = add_noise(&z0, 0, &eps, &s)? == z0;
        let mid = (add_noise(&z0, 1, &eps, &s)? - (&z0 * 0.5 + &eps * 0.75f64.sqrt())).abs().max() < 1e-15;
        let end = (add_noise(&z0, 2, &eps, &s)? - &eps).abs().max() < 1e-140;
        Ok((at0 && mid && end, format!("t=0 exact: {at0}, quarter: {mid}, pure noise: {end}")))
    })
}

pub fn gradient_check() -> CheckResult {
    check("toy denoiser gradients match finite differences", || {
        let (denoiser, data, _) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED + 3);
        let mut worst: Option<GradCheck> = None;
        for s in data.iter().take(3) {
            let t = rng.gen_range(1..denoiser.schedule.len());
            let eps = random(&mut rng, TOY_TOKENS, TOY_WIDTH);
            for c in finite_difference_check(&denoiser, &s.z0, t, &s.bundle, &eps, GRAD_STEP, GRAD_FLOOR)? {
                if worst.as_ref().is_none_or(|w| c.max_rel_err > w.max_rel_err) {
                    worst = Some(c);
                }
            }
        }
        let w = worst.expect("twelve parameters checked");
        Ok((
            w.max_rel_err <= GRAD_TOLERANCE,
            format!("{} parameters, worst {} rel err {:.3e}", denoiser.num_parameters(), w.name, w.max_rel_err),
        ))
    })
}

pub fn training_check() -> CheckResult {
    check("toy training halves the loss in 200 steps", || {
        let start = Instant::now();
        let (denoiser, data, cfg) = toy_setup();
        let out = train_toy(denoiser, &data, &cfg)?;
        let secs = start.elapsed().as_secs_f64();
        let ratio = out.final_loss / out.initial_loss;
        Ok((
            ratio < 0.5 && secs < 60.0,
            format!("loss {:.4} -> {:.4} (ratio {ratio:.3}) in {secs:.2}s", out.initial_loss, out.final_loss),
        ))
    })
}

/// Runs every check.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        softmax_rows_check(100),
        duplicate_reference_check(101),
        dual_stream_check(102),
        noising_endpoints_check(),
        gradient_check(),
        training_check(),
    ]
}
