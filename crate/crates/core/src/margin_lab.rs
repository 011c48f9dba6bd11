//! Monte-Carlo check of the one-step margin growth of NT-Xent.
//!
//! Each trial draws a positive, an anchor, `R` negatives and a held-out
//! probe. With probability `p` a negative is a fresh random direction
//! (another instance); otherwise it sits at cosine `intra_similarity` from
//! the positive (same instance). One gradient step of size `lambda` is
//! applied to the anchor and the resulting changes of the positive and
//! probe cosines are recorded.

use serde::{Deserialize, Serialize};

use crate::contrastive::one_step_margin_delta;
use crate::error::{Error, Result};
use crate::numcore::{dot, RngStream};
use crate::tree_sum;

/// How the anchor is placed relative to the positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// The anchor equals the positive.
    #[default]
    Converged,
    /// The anchor is an independent random direction.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub dim: usize,
    pub negatives: usize,
    pub p_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub temperature: f64,
    pub trials: usize,
    pub intra_similarity: f64,
    pub anchor: AnchorMode,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            negatives: 16,
            p_grid: vec![0.5, 0.6, 0.75, 0.9, 1.0],
            lambda_grid: vec![0.01, 0.05, 0.1, 0.2],
            temperature: 1.0,
            trials: 10_000,
            intra_similarity: 1.0,
            anchor: AnchorMode::Converged,
            seed: 0,
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.negatives == 0 || self.trials == 0 {
            return Err(Error::config("dim >= 2, negatives >= 1 and trials >= 1 are required"));
        }
        if self.p_grid.is_empty() || self.lambda_grid.is_empty() {
            return Err(Error::config("p_grid and lambda_grid must be non-empty"));
        }
        if self.p_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("p values must lie in [0, 1]"));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("step sizes must be finite and >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.intra_similarity) {
            return Err(Error::config("intra_similarity must lie in [-1, 1]"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("lab config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn random_unit(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector at cosine `c` from the unit vector `u`.
fn at_cosine(u: &[f64], c: f64, rng: &mut RngStream) -> Vec<f64> {
    if c >= 1.0 {
        return u.to_vec();
    }
    let r = random_unit(u.len(), rng);
    let proj = dot(&r, u);
    let mut perp: Vec<f64> = r.iter().zip(u).map(|(a, b)| a - proj * b).collect();
    let n = dot(&perp, &perp).sqrt();
    perp.iter_mut().for_each(|v| *v /= n);
    let s = (1.0 - c * c).max(0.0).sqrt();
    u.iter().zip(&perp).map(|(a, b)| c * a + s * b).collect()
}

/// One draw of the generative model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialGeometry {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    /// Held-out inter-instance direction used to measure the negative shift.
    pub probe: Vec<f64>,
}

pub fn sample_geometry(cfg: &LabConfig, p: f64, rng: &mut RngStream) -> TrialGeometry {
    let positive = random_unit(cfg.dim, rng);
    let anchor = match cfg.anchor {
        AnchorMode::Converged => positive.clone(),
        AnchorMode::Independent => random_unit(cfg.dim, rng),
    };
    let negatives = (0..cfg.negatives)
        .map(|_| {
            if rng.bernoulli(p) {
                random_unit(cfg.dim, rng)
            } else {
                at_cosine(&positive, cfg.intra_similarity, rng)
            }
        })
        .collect();
    let probe = random_unit(cfg.dim, rng);
    TrialGeometry {
        anchor,
        positive,
        negatives,
        probe,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialResult {
    pub ds_plus: f64,
    pub ds_minus: f64,
    pub sum_alpha: f64,
    /// `(lambda/T) sum_r alpha_r (1 - <z-_r, z+>)`.
    pub exact: f64,
    /// `|sum alpha - (1 - e^{s+}/Z)|`.
    pub identity_gap: f64,
}

pub fn evaluate_trial(g: &TrialGeometry, t: f64, lambda: f64) -> TrialResult {
    let negs: Vec<&[f64]> = g.negatives.iter().map(Vec::as_slice).collect();
    let d = one_step_margin_delta(&g.anchor, &g.positive, &negs, &[&g.probe], t, lambda);
    TrialResult {
        ds_plus: d.ds_plus,
        ds_minus: d.ds_minus[0],
        sum_alpha: d.sum_alpha,
        exact: d.ds_plus_closed_form,
        identity_gap: (d.sum_alpha - d.sum_alpha_identity).abs(),
    }
}

pub fn simulate_trial(cfg: &LabConfig, p: f64, lambda: f64, rng: &mut RngStream) -> TrialResult {
    let g = sample_geometry(cfg, p, rng);
    evaluate_trial(&g, cfg.temperature, lambda)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = tree_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = tree_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub p: f64,
    pub lambda: f64,
    pub mean_ds_plus: f64,
    pub se_ds_plus: f64,
    pub mean_ds_minus: f64,
    pub se_ds_minus: f64,
    pub mean_sum_alpha: f64,
    /// `(lambda/T) p E[sum alpha]`.
    pub predicted: f64,
    /// Mean of the exact per-trial algebra.
    pub mean_exact: f64,
    /// `p lambda`, the proportionality without the softmax weights.
    pub simplified: f64,
    pub mean_margin: f64,
    pub se_margin: f64,
    /// Largest per-trial gap in the weight identity.
    pub max_identity_gap: f64,
}

/// Runs every `(p, lambda)` cell. Trials for one `p` reuse the same draws
/// across step sizes.
pub fn run_grid(cfg: &LabConfig) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for (pi, &p) in cfg.p_grid.iter().enumerate() {
        let root = RngStream::new(cfg.seed, pi as u64);
        let geoms: Vec<TrialGeometry> = (0..cfg.trials)
            .map(|i| sample_geometry(cfg, p, &mut root.derive(i as u64)))
            .collect();
        for &lambda in &cfg.lambda_grid {
            let res: Vec<TrialResult> = geoms.iter().map(|g| evaluate_trial(g, cfg.temperature, lambda)).collect();
            let col = |f: fn(&TrialResult) -> f64| res.iter().map(f).collect::<Vec<_>>();
            let (mean_ds_plus, se_ds_plus) = mean_se(&col(|r| r.ds_plus));
            let (mean_ds_minus, se_ds_minus) = mean_se(&col(|r| r.ds_minus));
            let (mean_sum_alpha, _) = mean_se(&col(|r| r.sum_alpha));
            let (mean_exact, _) = mean_se(&col(|r| r.exact));
            let (mean_margin, se_margin) = mean_se(&col(|r| r.ds_plus - r.ds_minus));
            rows.push(GridRow {
                p,
                lambda,
                mean_ds_plus,
                se_ds_plus,
                mean_ds_minus,
                se_ds_minus,
                mean_sum_alpha,
                predicted: lambda / cfg.temperature * p * mean_sum_alpha,
                mean_exact,
                simplified: p * lambda,
                mean_margin,
                se_margin,
                max_identity_gap: res.iter().map(|r| r.identity_gap).fold(0.0, f64::max),
            });
        }
    }
    Ok(rows)
}

pub const GRID_HEADER: &str = "p,lambda,mean_ds_plus,se_ds_plus,mean_ds_minus,se_ds_minus,mean_sum_alpha,predicted";

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.p, r.lambda, r.mean_ds_plus, r.se_ds_plus, r.mean_ds_minus, r.se_ds_minus, r.mean_sum_alpha, r.predicted
        ));
    }
    out
}

/// Least-squares line through `(x, y)`: `(slope, intercept, R^2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(anchor: AnchorMode) -> LabConfig {
        LabConfig {
            dim: 32,
            negatives: 4,
            p_grid: vec![0.0, 0.5, 1.0],
            lambda_grid: vec![0.0, 0.1],
            trials: 200,
            anchor,
            ..LabConfig::default()
        }
    }

    #[test]
    fn single_orthogonal_negative() {
        let cfg = LabConfig {
            dim: 4096,
            negatives: 1,
            trials: 2000,
            p_grid: vec![1.0],
            lambda_grid: vec![0.1],
            ..LabConfig::default()
        };
        let row = &run_grid(&cfg).unwrap()[0];
        let alpha = 1.0 / (std::f64::consts::E + 1.0);
        assert!((row.mean_ds_plus - 0.1 * alpha).abs() < 1e-3);
    }

    #[test]
    fn degenerate_cells() {
        let rows = run_grid(&small(AnchorMode::Converged)).unwrap();
        for r in &rows {
            if r.p == 0.0 || r.lambda == 0.0 {
                assert_eq!(r.mean_ds_plus, 0.0);
            }
            if r.lambda == 0.0 {
                assert_eq!(r.mean_ds_minus, 0.0);
            }
            assert!(r.max_identity_gap < 1e-12);
            assert!((r.mean_ds_plus - r.mean_exact).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_header() {
        let rows = run_grid(&small(AnchorMode::Independent)).unwrap();
        let csv = grid_csv(&rows);
        assert!(csv.starts_with(GRID_HEADER));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn cosine_construction() {
        let mut rng = RngStream::new(1, 1);
        let u = random_unit(16, &mut rng);
        let v = at_cosine(&u, 0.3, &mut rng);
        assert!((dot(&u, &v) - 0.3).abs() < 1e-12);
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_is_exact_on_a_line() {
        let (s, i, r2) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_json() {
        let c = LabConfig::from_json(r#"{"dim": 8, "anchor": "independent"}"#).unwrap();
        assert_eq!(c.anchor, AnchorMode::Independent);
        assert!(LabConfig::from_json(r#"{"p_grid": [1.5]}"#).is_err());
        assert!(LabConfig::from_json(r#"{"nope": 1}"#).is_err());
    }
}
