//! Offline-versus-online pruning under calibration/test domain shift.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{calibrate_offline, prune_offline, prune_online_tracked, build_layer, LayerLoss, Method, Mode, PruneConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::scoring::{self, ActivationStats};
use crate::sparse;

/// One CSV row: `trial,layer,method,calib_domain,test_domain,rho,loss`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftRow {
    pub trial: usize,
    pub layer: String,
    pub method: String,
    pub calib_domain: String,
    pub test_domain: String,
    pub rho: f64,
    pub loss: f64,
}

impl ShiftRow {
    pub const CSV_HEADER: &'static str = "trial,layer,method,calib_domain,test_domain,rho,loss";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:e}",
            self.trial, self.layer, self.method, self.calib_domain, self.test_domain, self.rho, self.loss
        )
    }

    pub fn write_csv(rows: &[ShiftRow]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in rows {
            let _ = writeln!(out, "{}", r.to_csv());
        }
        out
    }
}

/// Sampling plan for [`shift_experiment`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftSpec {
    pub trials: usize,
    pub prompt_len: usize,
    pub calib_len: usize,
    pub seed: u64,
}

fn random_window(rng: &mut ChaCha8Rng, n: usize, len: usize) -> usize {
    rng.gen_range(0..=n - len)
}

/// For each trial, draws a domain-B prompt, a domain-A calibration window
/// and a disjoint domain-B calibration window, then records per-layer losses
/// on the prompt for offline pruning calibrated on A, offline calibrated on
/// B, and online pruning on the prompt itself.
pub fn shift_experiment(
    model: &Model,
    domain_a: &[u32],
    domain_b: &[u32],
    cfg: &PruneConfig,
    spec: &ShiftSpec,
) -> Result<Vec<ShiftRow>> {
    if spec.prompt_len == 0 || spec.calib_len == 0 {
        return Err(Error::Config("prompt and calibration lengths must be positive".into()));
    }
    if spec.prompt_len > model.config.max_seq {
        return Err(Error::SequenceTooLong {
            len: spec.prompt_len,
            max_seq: model.config.max_seq,
        });
    }
    if domain_a.len() < spec.calib_len || domain_b.len() < spec.prompt_len + spec.calib_len {
        return Err(Error::Config(format!(
            "domains too short: A has {} tokens (need {}), B has {} (need {})",
            domain_a.len(),
            spec.calib_len,
            domain_b.len(),
            spec.prompt_len + spec.calib_len
        )));
    }
    let offline = PruneConfig {
        mode: Mode::Offline,
        ..cfg.clone()
    };
    let online = PruneConfig {
        mode: Mode::Online,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::new();
    for trial in 0..spec.trials {
        let p = random_window(&mut rng, domain_b.len(), spec.prompt_len);
        let prompt = &domain_b[p..p + spec.prompt_len];
        let a = random_window(&mut rng, domain_a.len(), spec.calib_len);
        let calib_a = &domain_a[a..a + spec.calib_len];
        // Disjoint from the prompt: take it from the larger free side.
        let (lo, hi) = (p, domain_b.len() - (p + spec.prompt_len));
        let b = if hi >= spec.calib_len && (hi >= lo || lo < spec.calib_len) {
            p + spec.prompt_len + random_window(&mut rng, hi, spec.calib_len)
        } else {
            random_window(&mut rng, lo, spec.calib_len)
        };
        let calib_b = &domain_b[b..b + spec.calib_len];

        let mut push = |losses: Vec<LayerLoss>, calib: &str, mode: Mode| {
            for l in losses {
                rows.push(ShiftRow {
                    trial,
                    layer: l.id.to_string(),
                    method: format!("{mode}-{}", cfg.method),
                    calib_domain: calib.into(),
                    test_domain: "B".into(),
                    rho: cfg.rho,
                    loss: l.loss,
                });
            }
        };
        for (calib, name) in [(calib_a, "A"), (calib_b, "B")] {
            let record = calibrate_offline(model, calib, &offline, name)?;
            let pruned = prune_offline(model, &record, &offline)?;
            push(pruned.forward_tracked(prompt)?.1, name, Mode::Offline);
        }
        push(prune_online_tracked(model, prompt, &online)?.losses, "prompt", Mode::Online);
    }
    Ok(rows)
}

/// Mean per-layer loss of each (trial, method, calibration) group.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSummary {
    pub trial: usize,
    pub method: String,
    pub calib_domain: String,
    pub mean_loss: f64,
}

pub fn summarize_shift(rows: &[ShiftRow]) -> Vec<ShiftSummary> {
    let mut groups: BTreeMap<(usize, String, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = groups
            .entry((r.trial, r.method.clone(), r.calib_domain.clone()))
            .or_default();
        e.0 += r.loss;
        e.1 += 1;
    }
    groups
        .into_iter()
        .map(|((trial, method, calib_domain), (sum, n))| ShiftSummary {
            trial,
            method,
            calib_domain,
            mean_loss: sum / n as f64,
        })
        .collect()
}

/// Haar-distributed orthogonal matrix via Gram–Schmidt on Gaussian columns.
pub fn random_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i] as f32)
}

/// Zero-mean Gaussian activations with covariance `R diag(s²) Rᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomain {
    pub rotation: Matrix,
    pub scales: Vec<f32>,
}

impl SyntheticDomain {
    /// Random rotation with standard deviations log-spaced from 1 to
    /// `sqrt(condition)`, so the covariance has the given condition number.
    pub fn random<R: Rng + ?Sized>(d: usize, condition: f64, rng: &mut R) -> Self {
        let top = condition.sqrt().ln();
        let scales = (0..d)
            .map(|i| {
                let f = if d > 1 { i as f64 / (d - 1) as f64 } else { 0.0 };
                (f * top).exp() as f32
            })
            .collect();
        Self {
            rotation: random_rotation(d, rng),
            scales,
        }
    }

    pub fn covariance_condition(&self) -> f64 {
        let (lo, hi) = self
            .scales
            .iter()
            .fold((f64::INFINITY, 0f64), |(lo, hi), &s| (lo.min(f64::from(s)), hi.max(f64::from(s))));
        (hi / lo).powi(2)
    }

    /// `d × tokens` sample.
    pub fn sample<R: Rng + ?Sized>(&self, tokens: usize, rng: &mut R) -> Matrix {
        let d = self.scales.len();
        let z: Vec<f64> = (0..d * tokens).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_fn(d, tokens, |i, t| {
            let mut acc = 0f64;
            for j in 0..d {
                acc += f64::from(self.rotation.get(i, j)) * f64::from(self.scales[j]) * z[j * tokens + t];
            }
            acc as f32
        })
    }
}

/// Single-layer domain-shift simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShift {
    pub d_in: usize,
    pub d_out: usize,
    pub calib_tokens: usize,
    pub test_tokens: usize,
    /// Covariance condition number of each domain.
    pub condition: f64,
    pub cfg: PruneConfig,
}

impl Default for SyntheticShift {
    fn default() -> Self {
        Self {
            d_in: 64,
            d_out: 32,
            calib_tokens: 128,
            test_tokens: 64,
            condition: 100.0,
            cfg: PruneConfig::offline(0.5, Method::Wanda),
        }
    }
}

/// Losses on one domain-B test prompt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTrial {
    /// Wanda calibrated on domain A.
    pub offline_mismatched: f64,
    /// Wanda calibrated on a separate domain-B sample.
    pub offline_matched: f64,
    /// Wanda calibrated on the test prompt itself.
    pub online: f64,
    pub magnitude: f64,
}

impl SyntheticTrial {
    pub fn rows(&self, trial: usize, rho: f64) -> Vec<ShiftRow> {
        [
            ("offline-wanda", "A", self.offline_mismatched),
            ("offline-wanda", "B", self.offline_matched),
            ("online-wanda", "prompt", self.online),
            ("magnitude", "none", self.magnitude),
        ]
        .into_iter()
        .map(|(method, calib, loss)| ShiftRow {
            trial,
            layer: "synthetic".into(),
            method: method.into(),
            calib_domain: calib.into(),
            test_domain: "B".into(),
            rho,
            loss,
        })
        .collect()
    }
}

/// Draws two rotated domains, a weight matrix, calibration sets and a test
/// prompt, and returns the approximation loss of each pruning variant on
/// the prompt.
pub fn synthetic_shift_trial<R: Rng + ?Sized>(spec: &SyntheticShift, rng: &mut R) -> Result<SyntheticTrial> {
    let domain_a = SyntheticDomain::random(spec.d_in, spec.condition, rng);
    let domain_b = SyntheticDomain::random(spec.d_in, spec.condition, rng);
    let w = Matrix::random_normal(spec.d_out, spec.d_in, 1.0, rng);
    let calib_a = domain_a.sample(spec.calib_tokens, rng);
    let calib_b = domain_b.sample(spec.calib_tokens, rng);
    let prompt = domain_b.sample(spec.test_tokens, rng);

    let wanda = PruneConfig {
        method: Method::Wanda,
        ..spec.cfg.clone()
    };
    let loss_with = |stats: Option<&ActivationStats>, cfg: &PruneConfig| -> Result<f64> {
        let layer = build_layer(&w, stats, cfg)?;
        sparse::approx_loss(&w, &layer.weights, &prompt)
    };
    let stats = |x: &Matrix| scoring::collect_stats(x, false, wanda.lambda_policy);
    Ok(SyntheticTrial {
        offline_mismatched: loss_with(Some(&stats(&calib_a)?), &wanda)?,
        offline_matched: loss_with(Some(&stats(&calib_b)?), &wanda)?,
        online: loss_with(Some(&stats(&prompt)?), &wanda)?,
        magnitude: loss_with(
            None,
            &PruneConfig {
                method: Method::Magnitude,
                ..spec.cfg.clone()
            },
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_rotation(12, &mut rng);
        let rrt = matmul(&r, &r.transpose()).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rrt.get(i, j) - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn domain_condition_number() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dom = SyntheticDomain::random(16, 100.0, &mut rng);
        assert!((dom.covariance_condition() - 100.0).abs() < 1e-3);
        let x = dom.sample(20000, &mut rng);
        // Total variance = Σ s².
        let expected: f64 = dom.scales.iter().map(|&s| f64::from(s).powi(2)).sum();
        let got = x.frobenius_sq() / 20000.0;
        assert!((got / expected - 1.0).abs() < 0.05, "{got} vs {expected}");
    }

    #[test]
    fn full_density_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SyntheticShift {
            cfg: PruneConfig::offline(1.0, Method::Wanda),
            ..SyntheticShift::default()
        };
        let t = synthetic_shift_trial(&spec, &mut rng).unwrap();
        assert_eq!(
            (t.offline_mismatched, t.offline_matched, t.online, t.magnitude),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn csv_rows() {
        let t = SyntheticTrial {
            offline_mismatched: 1.0,
            offline_matched: 0.5,
            online: 0.25,
            magnitude: 2.0,
        };
        let csv = ShiftRow::write_csv(&t.rows(7, 0.5));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], ShiftRow::CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[3], "7,synthetic,online-wanda,prompt,B,0.5,2.5e-1");
    }
}
