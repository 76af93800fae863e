//! A one-layer denoiser with explicit parameters and hand-written backward
//! pass, trained on the noise-prediction objective.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    add_noise, attention_probs, check_finite, vstack, AttentionError, AttentionWeights, FeatureSeq, NoiseSchedule,
    Result,
};

/// Everything the denoiser is conditioned on besides the noisy latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// Prompt embedding tokens, M×d.
    pub text_tokens: FeatureSeq,
    /// Image-prompt embedding tokens, M'×d.
    pub image_tokens: FeatureSeq,
    /// Reference-image features concatenated into self-attention.
    pub reference_seq: FeatureSeq,
    /// N×d residual added to the input tokens.
    pub depth_tokens: FeatureSeq,
}

impl ConditioningBundle {
    fn validate(&self, n: usize, d: usize) -> Result<()> {
        for (name, m) in [
            ("text_tokens", &self.text_tokens),
            ("image_tokens", &self.image_tokens),
            ("reference_seq", &self.reference_seq),
            ("depth_tokens", &self.depth_tokens),
        ] {
            if m.ncols() != d {
                return Err(AttentionError::Dimension(format!("{name} has width {}, expected {d}", m.ncols())));
            }
            check_finite(name, m)?;
        }
        if self.depth_tokens.nrows() != n {
            return Err(AttentionError::Dimension(format!(
                "depth_tokens has {} rows, latent has {n}",
                self.depth_tokens.nrows()
            )));
        }
        if self.text_tokens.nrows() == 0 || self.image_tokens.nrows() == 0 {
            return Err(AttentionError::Dimension("cross-attention context is empty".into()));
        }
        Ok(())
    }
}

/// Position-wise `tanh(h W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

/// Noise predictor: input embedding, one reference self-attention block,
/// one dual cross-attention block (text and image streams sharing `cross_q`)
/// and an MLP head. Both attention blocks are residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub reference: AttentionWeights,
    pub cross_q: DMatrix<f64>,
    pub text_k: DMatrix<f64>,
    pub text_v: DMatrix<f64>,
    pub image_k: DMatrix<f64>,
    pub image_v: DMatrix<f64>,
    pub mlp: Mlp,
    pub schedule: NoiseSchedule,
}

/// Parameter-shaped gradient, in [`ToyDenoiser::PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<DMatrix<f64>>);

impl ToyDenoiser {
    pub const PARAM_NAMES: [&'static str; 12] = [
        "ref.w_q",
        "ref.w_k",
        "ref.w_v",
        "cross.w_q",
        "text.w_k",
        "text.w_v",
        "image.w_k",
        "image.w_v",
        "mlp.w1",
        "mlp.b1",
        "mlp.w2",
        "mlp.b2",
    ];

    /// Seeded initialization: every weight matrix entry is drawn from
    /// N(0, 1/fan_in) with a ChaCha8 stream, in `PARAM_NAMES` order; biases
    /// start at zero.
    pub fn init(width: usize, hidden: usize, schedule: NoiseSchedule, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| {
            let sigma = 1.0 / (r as f64).sqrt();
            DMatrix::from_fn(r, c, |_, _| {
                let x: f64 = StandardNormal.sample(&mut rng);
                sigma * x
            })
        };
        let d = width;
        let reference = AttentionWeights { w_q: draw(d, d), w_k: draw(d, d), w_v: draw(d, d) };
        let (cross_q, text_k, text_v, image_k, image_v) = (draw(d, d), draw(d, d), draw(d, d), draw(d, d), draw(d, d));
        let (w1, w2) = (draw(d, hidden), draw(hidden, d));
        ToyDenoiser {
            reference,
            cross_q,
            text_k,
            text_v,
            image_k,
            image_v,
            mlp: Mlp { w1, b1: DMatrix::zeros(1, hidden), w2, b2: DMatrix::zeros(1, d) },
            schedule,
        }
    }

    pub fn width(&self) -> usize {
        self.cross_q.nrows()
    }

    pub fn params(&self) -> [&DMatrix<f64>; 12] {
        [
            &self.reference.w_q,
            &self.reference.w_k,
            &self.reference.w_v,
            &self.cross_q,
            &self.text_k,
            &self.text_v,
            &self.image_k,
            &self.image_v,
            &self.mlp.w1,
            &self.mlp.b1,
            &self.mlp.w2,
            &self.mlp.b2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut DMatrix<f64>; 12] {
        [
            &mut self.reference.w_q,
            &mut self.reference.w_k,
            &mut self.reference.w_v,
            &mut self.cross_q,
            &mut self.text_k,
            &mut self.text_v,
            &mut self.image_k,
            &mut self.image_v,
            &mut self.mlp.w1,
            &mut self.mlp.b1,
            &mut self.mlp.w2,
            &mut self.mlp.b2,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        let d = self.width();
        let h = self.mlp.w1.ncols();
        let shapes = [(d, d), (d, d), (d, d), (d, d), (d, d), (d, d), (d, d), (d, d), (d, h), (1, h), (h, d), (1, d)];
        for ((p, name), want) in self.params().iter().zip(Self::PARAM_NAMES).zip(shapes) {
            if p.shape() != want {
                return Err(AttentionError::Dimension(format!("{name} is {:?}, expected {want:?}", p.shape())));
            }
            check_finite(name, p)?;
        }
        Ok(())
    }

    /// Predicted noise for latent `z_t` at timestep `t`.
    pub fn predict(&self, z_t: &FeatureSeq, t: usize, bundle: &ConditioningBundle) -> Result<FeatureSeq> {
        Ok(self.forward(z_t, t, bundle)?.out)
    }

    fn forward(&self, z_t: &FeatureSeq, t: usize, bundle: &ConditioningBundle) -> Result<Forward> {
        self.validate()?;
        let d = self.width();
        if z_t.ncols() != d {
            return Err(AttentionError::Dimension(format!("latent has width {}, expected {d}", z_t.ncols())));
        }
        check_finite("z_t", z_t)?;
        bundle.validate(z_t.nrows(), d)?;
        self.schedule.alpha_bar(t)?;

        let temb = timestep_embedding(t, d);
        let mut h0 = z_t + &bundle.depth_tokens;
        for mut row in h0.row_iter_mut() {
            row += &temb;
        }

        let r = &self.reference;
        let x = vstack(&h0, &bundle.reference_seq);
        let q1 = &h0 * &r.w_q;
        let (k1, v1) = (&x * &r.w_k, &x * &r.w_v);
        let p1 = attention_probs(&q1, &k1)?;
        let h1 = &h0 + &p1 * &v1;

        let qc = &h1 * &self.cross_q;
        let (kt, vt) = (&bundle.text_tokens * &self.text_k, &bundle.text_tokens * &self.text_v);
        let (ki, vi) = (&bundle.image_tokens * &self.image_k, &bundle.image_tokens * &self.image_v);
        let pt = attention_probs(&qc, &kt)?;
        let pi = attention_probs(&qc, &ki)?;
        let h2 = &h1 + &pt * &vt + &pi * &vi;

        let mut u = &h2 * &self.mlp.w1;
        for mut row in u.row_iter_mut() {
            row += self.mlp.b1.row(0);
        }
        let g = u.map(f64::tanh);
        let mut out = &g * &self.mlp.w2;
        for mut row in out.row_iter_mut() {
            row += self.mlp.b2.row(0);
        }
        Ok(Forward { h0, x, q1, k1, v1, p1, h1, qc, kt, vt, pt, ki, vi, pi, h2, g, out })
    }
}

struct Forward {
    h0: DMatrix<f64>,
    x: DMatrix<f64>,
    q1: DMatrix<f64>,
    k1: DMatrix<f64>,
    v1: DMatrix<f64>,
    p1: DMatrix<f64>,
    h1: DMatrix<f64>,
    qc: DMatrix<f64>,
    kt: DMatrix<f64>,
    vt: DMatrix<f64>,
    pt: DMatrix<f64>,
    ki: DMatrix<f64>,
    vi: DMatrix<f64>,
    pi: DMatrix<f64>,
    h2: DMatrix<f64>,
    g: DMatrix<f64>,
    out: DMatrix<f64>,
}

/// Sinusoidal timestep embedding of width `d`: entry 2i is sin(t·ω_i) and
/// entry 2i+1 is cos(t·ω_i), with ω_i = 10000^(−2i/d).
pub fn timestep_embedding(t: usize, d: usize) -> nalgebra::RowDVector<f64> {
    nalgebra::RowDVector::from_fn(d, |_, j| {
        let i = (j / 2) as f64;
        let arg = t as f64 * 10000f64.powf(-2.0 * i / d as f64);
        if j % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Mean over all entries of (ε − ε̂(z_t, t, bundle))², with z_t obtained by
/// noising `z0` with `eps` under the denoiser's schedule.
pub fn denoising_loss(
    denoiser: &ToyDenoiser,
    z0: &FeatureSeq,
    t: usize,
    bundle: &ConditioningBundle,
    eps: &FeatureSeq,
) -> Result<f64> {
    let z_t = add_noise(z0, t, eps, &denoiser.schedule)?;
    let pred = denoiser.predict(&z_t, t, bundle)?;
    Ok((pred - eps).norm_squared() / eps.len() as f64)
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, c| m.column(c).sum())
}

/// Gradients of `softmax(Q Kᵀ·s) V` given the upstream gradient of its output.
fn attention_backward(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    p: &DMatrix<f64>,
    d_out: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = p.transpose() * d_out;
    let dp = d_out * v.transpose();
    let mut ds = dp.component_mul(p);
    for (i, mut row) in ds.row_iter_mut().enumerate() {
        let dot: f64 = row.sum();
        for (j, x) in row.iter_mut().enumerate() {
            *x -= p[(i, j)] * dot;
        }
    }
    let dq = &ds * k * scale;
    let dk = ds.transpose() * q * scale;
    (dq, dk, dv)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradients(
    denoiser: &ToyDenoiser,
    z0: &FeatureSeq,
    t: usize,
    bundle: &ConditioningBundle,
    eps: &FeatureSeq,
) -> Result<(f64, Gradients)> {
    let z_t = add_noise(z0, t, eps, &denoiser.schedule)?;
    let f = denoiser.forward(&z_t, t, bundle)?;
    let resid = &f.out - eps;
    let loss = resid.norm_squared() / eps.len() as f64;

    let d_out = resid * (2.0 / eps.len() as f64);
    let mlp = &denoiser.mlp;
    let d_w2 = f.g.transpose() * &d_out;
    let d_b2 = column_sums(&d_out);
    let d_u = (&d_out * mlp.w2.transpose()).zip_map(&f.g, |dg, g| dg * (1.0 - g * g));
    let d_w1 = f.h2.transpose() * &d_u;
    let d_b1 = column_sums(&d_u);
    let d_h2 = &d_u * mlp.w1.transpose();

    let (dq_t, dk_t, dv_t) = attention_backward(&f.qc, &f.kt, &f.vt, &f.pt, &d_h2);
    let (dq_i, dk_i, dv_i) = attention_backward(&f.qc, &f.ki, &f.vi, &f.pi, &d_h2);
    let d_qc = dq_t + dq_i;
    let d_cross_q = f.h1.transpose() * &d_qc;
    let d_text_k = bundle.text_tokens.transpose() * dk_t;
    let d_text_v = bundle.text_tokens.transpose() * dv_t;
    let d_image_k = bundle.image_tokens.transpose() * dk_i;
    let d_image_v = bundle.image_tokens.transpose() * dv_i;
    let d_h1 = &d_h2 + d_qc * denoiser.cross_q.transpose();

    let (dq1, dk1, dv1) = attention_backward(&f.q1, &f.k1, &f.v1, &f.p1, &d_h1);
    let d_ref_q = f.h0.transpose() * dq1;
    let d_ref_k = f.x.transpose() * dk1;
    let d_ref_v = f.x.transpose() * dv1;

    Ok((
        loss,
        Gradients(vec![
            d_ref_q, d_ref_k, d_ref_v, d_cross_q, d_text_k, d_text_v, d_image_k, d_image_v, d_w1, d_b1, d_w2, d_b2,
        ]),
    ))
}

/// Worst-case agreement between the analytic gradient of one parameter and
/// its central finite difference.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub entries: usize,
    /// Max over entries of |a − n| / max(|a|, |n|, `floor`).
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares every analytic gradient entry with `(L(p+h) − L(p−h)) / 2h`.
/// The relative error denominator is floored so entries whose true gradient
/// is zero are judged by absolute error instead.
pub fn finite_difference_check(
    denoiser: &ToyDenoiser,
    z0: &FeatureSeq,
    t: usize,
    bundle: &ConditioningBundle,
    eps: &FeatureSeq,
    h: f64,
    floor: f64,
) -> Result<Vec<GradCheck>> {
    let (_, grads) = loss_and_gradients(denoiser, z0, t, bundle, eps)?;
    let mut probe = denoiser.clone();
    let mut report = Vec::new();
    for (p, name) in ToyDenoiser::PARAM_NAMES.iter().enumerate() {
        let mut check = GradCheck { name, entries: grads.0[p].len(), max_rel_err: 0.0, max_abs_err: 0.0 };
        for idx in 0..grads.0[p].len() {
            let orig = probe.params()[p][idx];
            probe.params_mut()[p][idx] = orig + h;
            let plus = denoising_loss(&probe, z0, t, bundle, eps)?;
            probe.params_mut()[p][idx] = orig - h;
            let minus = denoising_loss(&probe, z0, t, bundle, eps)?;
            probe.params_mut()[p][idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.0[p][idx];
            let abs = (analytic - numeric).abs();
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(abs / analytic.abs().max(numeric.abs()).max(floor));
        }
        report.push(check);
    }
    Ok(report)
}

/// One training example: a clean latent and what it is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub z0: FeatureSeq,
    pub bundle: ConditioningBundle,
}

/// Seeded toy set. Latents are standard normal; the reference features are
/// the latent plus small noise and the depth residual is half the latent, so
/// the conditioning carries information about `z0`.
pub fn make_toy_dataset(count: usize, tokens: usize, width: usize, seed: u64) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    (0..count)
        .map(|_| {
            let z0: FeatureSeq = normal(tokens, width);
            let reference_seq = &z0 + normal(tokens, width) * 0.1;
            let bundle = ConditioningBundle {
                text_tokens: normal(4, width),
                image_tokens: normal(2, width),
                reference_seq,
                depth_tokens: &z0 * 0.5,
            };
            ToySample { z0, bundle }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Seeds the per-step (t, ε) draws.
    pub seed: u64,
    /// Fixed (t, ε) draws per sample used for the before/after evaluation.
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 200, learning_rate: 0.1, seed: 0, eval_draws: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub denoiser: ToyDenoiser,
    /// Mean loss over the set at each step, before that step's update.
    pub loss_trace: Vec<f64>,
    /// Mean loss on the fixed evaluation draws with the initial parameters.
    pub initial_loss: f64,
    /// The same evaluation with the trained parameters.
    pub final_loss: f64,
}

type Draw = (usize, FeatureSeq);

fn draw_noise(rng: &mut ChaCha8Rng, schedule: &NoiseSchedule, shape: (usize, usize)) -> Draw {
    let t = rng.gen_range(1..schedule.len());
    let eps = DMatrix::from_fn(shape.0, shape.1, |_, _| StandardNormal.sample(rng));
    (t, eps)
}

fn mean_loss(denoiser: &ToyDenoiser, dataset: &[ToySample], draws: &[Vec<Draw>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (s, per_sample) in dataset.iter().zip(draws) {
        for (t, eps) in per_sample {
            total += denoising_loss(denoiser, &s.z0, *t, &s.bundle, eps)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Full-batch gradient descent on the mean denoising loss. Each step draws a
/// fresh timestep and noise for every sample.
pub fn train_toy(initial: ToyDenoiser, dataset: &[ToySample], config: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(AttentionError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval: Vec<Vec<Draw>> = dataset
        .iter()
        .map(|s| (0..config.eval_draws.max(1)).map(|_| draw_noise(&mut rng, &initial.schedule, s.z0.shape())).collect())
        .collect();
    let initial_loss = mean_loss(&initial, dataset, &eval)?;

    let mut denoiser = initial;
    let mut loss_trace = Vec::with_capacity(config.steps);
    let scale = 1.0 / dataset.len() as f64;
    for step in 0..config.steps {
        let mut loss = 0.0;
        let mut acc: Option<Gradients> = None;
        for s in dataset {
            let (t, eps) = draw_noise(&mut rng, &denoiser.schedule, s.z0.shape());
            let (l, g) = loss_and_gradients(&denoiser, &s.z0, t, &s.bundle, &eps)?;
            loss += l * scale;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.0.iter_mut().zip(&g.0).for_each(|(a, g)| *a += g),
            }
        }
        if !loss.is_finite() {
            return Err(AttentionError::Diverged { step, loss });
        }
        loss_trace.push(loss);
        let grads = acc.expect("dataset is non-empty");
        for (p, g) in denoiser.params_mut().into_iter().zip(&grads.0) {
            *p -= g * (config.learning_rate * scale);
        }
        if denoiser.params().iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(AttentionError::Diverged { step, loss: f64::NAN });
        }
    }
    let final_loss = mean_loss(&denoiser, dataset, &eval)?;
    Ok(TrainOutcome { denoiser, loss_trace, initial_loss, final_loss })
}
