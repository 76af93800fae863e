use super::{check_finite, AttentionError, FeatureSeq, Result};

/// Cumulative signal levels ᾱ_t for t = 0..T, with ᾱ_0 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Checks that the levels start at 1, lie in (0, 1] and never increase.
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        match alpha_bar.first() {
            None => return Err(AttentionError::InvalidSchedule("empty".into())),
            Some(&a) if a != 1.0 => {
                return Err(AttentionError::InvalidSchedule(format!("alpha_bar[0] = {a}, expected 1")))
            }
            _ => {}
        }
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(AttentionError::InvalidSchedule(format!("alpha_bar[{t}] = {a} outside (0, 1]")));
            }
            if t > 0 && a > alpha_bar[t - 1] {
                return Err(AttentionError::InvalidSchedule(format!("alpha_bar increases at t = {t}")));
            }
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// DDPM linear-β schedule: ᾱ_t = Π_{s=1..t} (1 − β_s) with β running
    /// linearly from `beta_start` to `beta_end` over t = 1..len-1.
    pub fn linear(len: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if len < 2 {
            return Err(AttentionError::InvalidSchedule("need at least two timesteps".into()));
        }
        let mut alpha_bar = Vec::with_capacity(len);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..len {
            let frac = if len > 2 { (t - 1) as f64 / (len - 2) as f64 } else { 0.0 };
            acc *= 1.0 - (beta_start + frac * (beta_end - beta_start));
            alpha_bar.push(acc);
        }
        Self::new(alpha_bar)
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(AttentionError::TimestepOutOfRange { t, len: self.len() })
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn add_noise(z0: &FeatureSeq, t: usize, eps: &FeatureSeq, schedule: &NoiseSchedule) -> Result<FeatureSeq> {
    let a = schedule.alpha_bar(t)?;
    if z0.shape() != eps.shape() {
        return Err(AttentionError::Dimension(format!("z0 is {:?} but noise is {:?}", z0.shape(), eps.shape())));
    }
    check_finite("z0", z0)?;
    check_finite("noise", eps)?;
    Ok(z0 * a.sqrt() + eps * (1.0 - a).sqrt())
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(NoiseSchedule::new(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.6]).is_err());
        assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.0]).is_err());
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.len(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(999).unwrap() < 1e-3);
        assert!(matches!(s.alpha_bar(1000), Err(AttentionError::TimestepOutOfRange { t: 1000, len: 1000 })));
    }

    #[test]
    fn endpoints() {
        let mut r = rng(10);
        let (z0, eps) = (random(&mut r, 4, 3), random(&mut r, 4, 3));
        let s = NoiseSchedule::new(vec![1.0, 0.25, 1e-300]).unwrap();
        assert_eq!(add_noise(&z0, 0, &eps, &s).unwrap(), z0);
        let quarter = add_noise(&z0, 1, &eps, &s).unwrap();
        let want = &z0 * 0.5 + &eps * 0.75f64.sqrt();
        assert!((quarter - want).abs().max() < 1e-15);
        let pure = add_noise(&z0, 2, &eps, &s).unwrap();
        assert!((pure - &eps).abs().max() < 1e-140);
        assert!(add_noise(&z0, 3, &eps, &s).is_err());
        assert!(add_noise(&z0, 1, &random(&mut r, 3, 3), &s).is_err());
    }

    #[test]
    fn squared_norm_expectation() {
        let mut r = rng(11);
        let z0 = random(&mut r, 4, 4);
        let s = NoiseSchedule::new(vec![1.0, 0.3]).unwrap();
        let (a, dim) = (0.3, 16.0);
        let draws = 10_000;
        let mut samples = Vec::with_capacity(draws);
        for _ in 0..draws {
            let eps = FeatureSeq::from_fn(4, 4, |_, _| StandardNormal.sample(&mut r));
            samples.push(add_noise(&z0, 1, &eps, &s).unwrap().norm_squared());
        }
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let want = a * z0.norm_squared() + (1.0 - a) * dim;
        // Var‖z_t‖² = 2(1−ᾱ)²·dim + 4ᾱ(1−ᾱ)‖z0‖² for Gaussian ε.
        let var = 2.0 * (1.0 - a) * (1.0 - a) * dim + 4.0 * a * (1.0 - a) * z0.norm_squared();
        let sigma = (var / draws as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * sigma, "{mean} vs {want} (σ {sigma})");
    }
}
