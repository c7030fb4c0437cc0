//! Scalar loss algebra: NLL, log-odds, the odds-ratio loss, the
//! probability-ratio baseline, the combined objective and its λ ramp.
//!
//! Every function takes *average* response log-probabilities (`ln P` per
//! token). Derivatives are returned in closed form so the training loop can
//! seed the tape directly with `∂L/∂avg_logprob`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(1 − e^x)` for `x < 0`, switching formulas at `−ln 2`.
pub fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_logprob(a: f64) -> Result<()> {
    if a.is_nan() {
        return Err(Error::Numeric("log-probability is NaN".into()));
    }
    if a > 0.0 {
        return Err(Error::Data(format!("log-probability {a} exceeds 0")));
    }
    Ok(())
}

/// `−avg_logprob_pos`.
pub fn nll_loss(avg_logprob_pos: f64) -> Result<f64> {
    check_logprob(avg_logprob_pos)?;
    Ok(-avg_logprob_pos)
}

/// `ln(P / (1 − P))` with `P = exp(avg_logprob)`.
pub fn log_odds(avg_logprob: f64) -> Result<f64> {
    check_logprob(avg_logprob)?;
    if avg_logprob >= 0.0 {
        return Err(Error::DegenerateProbability(avg_logprob));
    }
    Ok(avg_logprob - log1mexp(avg_logprob))
}

/// `d log_odds / d avg_logprob = 1 / (1 − P)`.
pub fn log_odds_derivative(avg_logprob: f64) -> Result<f64> {
    log_odds(avg_logprob)?;
    Ok(-1.0 / avg_logprob.exp_m1())
}

/// Returns `(loss, log_odds_ratio)` with `loss = softplus(−log_odds_ratio)`.
pub fn odds_ratio_loss(avg_logprob_pos: f64, avg_logprob_neg: f64) -> Result<(f64, f64)> {
    let z = log_odds(avg_logprob_pos)? - log_odds(avg_logprob_neg)?;
    Ok((softplus(-z), z))
}

/// `(∂L_OR/∂avg_logprob_pos, ∂L_OR/∂avg_logprob_neg)`.
pub fn odds_ratio_grads(avg_logprob_pos: f64, avg_logprob_neg: f64) -> Result<(f64, f64)> {
    let (_, z) = odds_ratio_loss(avg_logprob_pos, avg_logprob_neg)?;
    let s = sigmoid(-z);
    Ok((
        -s * log_odds_derivative(avg_logprob_pos)?,
        s * log_odds_derivative(avg_logprob_neg)?,
    ))
}

/// `−(avg_logprob_pos − avg_logprob_neg)`; its gradients are `(−1, +1)`.
pub fn probability_ratio_loss(avg_logprob_pos: f64, avg_logprob_neg: f64) -> Result<f64> {
    check_logprob(avg_logprob_pos)?;
    check_logprob(avg_logprob_neg)?;
    Ok(-(avg_logprob_pos - avg_logprob_neg))
}

/// `(log_odds_ratio, reward_margin)`.
pub fn diagnostics(avg_logprob_pos: f64, avg_logprob_neg: f64) -> Result<(f64, f64)> {
    let (_, z) = odds_ratio_loss(avg_logprob_pos, avg_logprob_neg)?;
    Ok((z, avg_logprob_pos - avg_logprob_neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    /// Contrastive term (odds-ratio, or probability-ratio for that baseline).
    pub or_loss: f64,
    pub lambda: f64,
    pub total: f64,
    pub log_odds_ratio: f64,
    pub reward_margin: f64,
}

/// `total = nll + λ·or_loss`; exactly `nll` when `λ = 0`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn combined_loss(nll: f64, or_loss: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let total = if lambda == 0.0 { nll } else { nll + lambda * or_loss };
    Ok(LossBreakdown {
        nll,
        or_loss,
        lambda,
        total,
        log_odds_ratio: 0.0,
        reward_margin: 0.0,
    })
}

impl LossBreakdown {
    /// Field-wise arithmetic mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            nll: avg(|b| b.nll),
            or_loss: avg(|b| b.or_loss),
            lambda: avg(|b| b.lambda),
            total: avg(|b| b.total),
            log_odds_ratio: avg(|b| b.log_odds_ratio),
            reward_margin: avg(|b| b.reward_margin),
        }
    }

    pub const CSV_HEADER: &'static str = "step,nll,or_loss,lambda,total,log_odds_ratio,reward_margin";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.nll, self.or_loss, self.lambda, self.total, self.log_odds_ratio, self.reward_margin
        )
    }
}

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossKind {
    /// NLL plus λ-weighted odds-ratio term.
    #[default]
    #[serde(rename = "nll_plus_or", alias = "or")]
    Or,
    /// NLL plus λ-weighted probability-ratio term.
    #[serde(rename = "nll_plus_pr", alias = "pr")]
    Pr,
    /// NLL only; negatives are never scored.
    #[serde(rename = "nll_only", alias = "sft")]
    Sft,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "or" | "nll_plus_or" => Ok(LossKind::Or),
            "pr" | "nll_plus_pr" => Ok(LossKind::Pr),
            "sft" | "nll_only" => Ok(LossKind::Sft),
            _ => Err(Error::Config(format!("unknown loss {s:?} (expected or, pr or sft)"))),
        }
    }
}

/// How a sequence probability enters the odds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OddsMode {
    /// `P = exp(mean token log-prob)`.
    #[default]
    LengthNormalized,
    /// `P = exp(sum of token log-probs)`.
    RawProduct,
}

/// Per-sample loss with derivatives with respect to the two average
/// log-probabilities. `neg_len`/`pos_len` scale the contrastive inputs in
/// [`OddsMode::RawProduct`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub breakdown: LossBreakdown,
    pub d_pos: f64,
    /// `None` when the negative does not enter the gradient.
    pub d_neg: Option<f64>,
}

pub fn sample_loss(
    kind: LossKind,
    mode: OddsMode,
    lambda: f64,
    avg_pos: f64,
    avg_neg: Option<f64>,
    pos_len: usize,
    neg_len: usize,
) -> Result<SampleLoss> {
    let nll = nll_loss(avg_pos)?;
    let Some(avg_neg) = avg_neg else {
        if kind != LossKind::Sft && lambda > 0.0 {
            return Err(Error::Data("contrastive loss needs a negative response".into()));
        }
        return Ok(SampleLoss {
            breakdown: combined_loss(nll, 0.0, lambda)?,
            d_pos: -1.0,
            d_neg: None,
        });
    };
    let (sp, sn) = match mode {
        OddsMode::LengthNormalized => (1.0, 1.0),
        OddsMode::RawProduct => (pos_len as f64, neg_len as f64),
    };
    let (zp, zn) = (avg_pos * sp, avg_neg * sn);
    let (term, gp, gn) = match kind {
        LossKind::Or | LossKind::Sft => {
            let (l, _) = odds_ratio_loss(zp, zn)?;
            let (gp, gn) = odds_ratio_grads(zp, zn)?;
            (l, gp * sp, gn * sn)
        }
        LossKind::Pr => (probability_ratio_loss(avg_pos, avg_neg)?, -1.0, 1.0),
    };
    let (log_odds_ratio, _) = diagnostics(zp, zn)?;
    let active = kind != LossKind::Sft && lambda > 0.0;
    let lam = if kind == LossKind::Sft { 0.0 } else { lambda };
    let mut breakdown = combined_loss(nll, term, lam)?;
    breakdown.log_odds_ratio = log_odds_ratio;
    breakdown.reward_margin = avg_pos - avg_neg;
    Ok(SampleLoss {
        breakdown,
        d_pos: if active { -1.0 + lambda * gp } else { -1.0 },
        d_neg: active.then_some(lambda * gn),
    })
}

/// Linear ramp of λ from 0 to `lambda_max` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda_max: f64,
    pub total_steps: usize,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            lambda_max: 0.3,
            total_steps: 0,
        }
    }
}

pub fn lambda_at(schedule: &LambdaSchedule, step: usize) -> f64 {
    if schedule.total_steps == 0 {
        return schedule.lambda_max;
    }
    let frac = (step as f64 / schedule.total_steps as f64).min(1.0);
    frac * schedule.lambda_max
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    const GRID: [f64; 5] = [0.01, 0.1, 0.5, 0.9, 0.99];

    #[test]
    fn nll_examples() {
        assert_eq!(nll_loss(0.0).unwrap(), 0.0);
        assert_eq!(nll_loss(-1.5).unwrap(), 1.5);
        let v = 50.0f64;
        assert_eq!(nll_loss(-v.ln()).unwrap(), v.ln());
        assert!(nll_loss(0.1).is_err());
    }

    #[test]
    fn log_odds_examples() {
        assert_eq!(log_odds(0.5f64.ln()).unwrap(), 0.0);
        assert!((log_odds(0.8f64.ln()).unwrap() - 4f64.ln()).abs() < 1e-12);
        // ln(P/(1-P)) = ln P - ln(1-P) and ln(1-1e-300) rounds to -1e-300.
        let a = 1e-300f64.ln();
        let lo = log_odds(a).unwrap();
        assert!(lo.is_finite());
        assert!((lo - a).abs() < 1e-12);
        assert!(matches!(log_odds(0.0), Err(Error::DegenerateProbability(_))));
        assert!(log_odds(f64::NAN).is_err());
    }

    #[test]
    fn log1mexp_matches_direct_formula_on_both_branches() {
        for &x in &[-1e-10, -0.1, -LN_2 + 1e-9, -LN_2 - 1e-9, -1.0, -20.0] {
            let direct = (1.0 - x.exp()).ln();
            let tol = if x > -1e-6 { 1e-3 } else { 1e-12 };
            assert!((log1mexp(x) - direct).abs() <= tol * direct.abs().max(1.0), "{x}");
        }
        // Near zero the direct formula loses all precision; ln(-x) is the limit.
        assert!((log1mexp(-1e-12) - (1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn odds_ratio_examples() {
        let (l, z) = odds_ratio_loss(-1.0, -1.0).unwrap();
        assert_eq!(z, 0.0);
        assert!((l - LN_2).abs() < 1e-12);
        let (l, z) = odds_ratio_loss(0.8f64.ln(), 0.5f64.ln()).unwrap();
        assert!((z - 4f64.ln()).abs() < 1e-12);
        assert!((l + (0.8f64).ln()).abs() < 1e-12);
        let (l, _) = odds_ratio_loss(0.5f64.ln(), 0.8f64.ln()).unwrap();
        assert!((l + (0.2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn probability_ratio_examples() {
        assert_eq!(probability_ratio_loss(-1.0, -1.0).unwrap(), 0.0);
        assert_eq!(probability_ratio_loss(-0.5, -1.5).unwrap(), -1.0);
        assert_eq!(probability_ratio_loss(-1.5, -0.5).unwrap(), 1.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn combined_examples() {
        assert_eq!(combined_loss(1.0, 0.6931, 0.0).unwrap().total, 1.0);
        assert!((combined_loss(1.0, 0.5, 0.3).unwrap().total - 1.15).abs() < 1e-15);
        assert!((combined_loss(0.0, 0.6931, 0.3).unwrap().total - 0.20793).abs() < 1e-12);
        assert!(combined_loss(1.0, 0.5, -0.1).is_err());
        // λ = 0 ignores even a non-finite contrastive term.
        assert_eq!(combined_loss(2.0, f64::INFINITY, 0.0).unwrap().total, 2.0);
    }

    #[test]
    fn lambda_ramp() {
        let s = LambdaSchedule {
            lambda_max: 0.3,
            total_steps: 100,
        };
        assert_eq!(lambda_at(&s, 0), 0.0);
        assert_eq!(lambda_at(&s, 100), 0.3);
        assert_eq!(lambda_at(&s, 50), 0.15);
        assert_eq!(lambda_at(&s, 500), 0.3);
        let c = LambdaSchedule {
            lambda_max: 0.3,
            total_steps: 0,
        };
        assert_eq!(lambda_at(&c, 7), 0.3);
    }

    #[test]
    fn diagnostics_examples() {
        assert_eq!(diagnostics(-1.0, -1.0).unwrap(), (0.0, 0.0));
        let (z, m) = diagnostics(0.8f64.ln(), 0.5f64.ln()).unwrap();
        assert!((z - 4f64.ln()).abs() < 1e-12);
        assert!((m - 1.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn analytic_grads_match_finite_differences() {
        let h = 1e-5;
        for &pp in &GRID {
            for &pn in &GRID {
                let (a, b) = (pp.ln(), pn.ln());
                let (gp, gn) = odds_ratio_grads(a, b).unwrap();
                let f = |x: f64, y: f64| odds_ratio_loss(x, y).unwrap().0;
                let np = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
                let nn = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
                assert!((gp - np).abs() / np.abs() < 1e-4, "{pp} {pn}: {gp} vs {np}");
                assert!((gn - nn).abs() / nn.abs() < 1e-4, "{pp} {pn}: {gn} vs {nn}");
                assert!(gp < 0.0 && gn > 0.0);
            }
        }
    }

    #[test]
    fn negative_gradient_is_bounded_in_log_odds_and_vanishes_for_unlikely_negatives() {
        // With respect to the negative's log-odds the factor is σ(−z) ≤ 1.
        for i in 1..50 {
            for j in 1..50 {
                let (a, b) = ((i as f64 / 50.0).ln(), (j as f64 / 50.0).ln());
                let (_, z) = odds_ratio_loss(a, b).unwrap();
                let s = sigmoid(-z);
                assert!(s > 0.0 && s <= 1.0);
            }
        }
        let (_, gn) = odds_ratio_grads(0.5f64.ln(), 1e-6f64.ln()).unwrap();
        assert!(gn < 1e-5, "{gn}");
        let pr = 1.0;
        assert!(gn < pr);
    }

    #[test]
    fn sample_loss_sft_and_zero_lambda_skip_the_negative() {
        let s = sample_loss(LossKind::Or, OddsMode::LengthNormalized, 0.0, -1.0, Some(-0.5), 3, 4).unwrap();
        assert_eq!(s.d_neg, None);
        assert_eq!(s.d_pos, -1.0);
        assert_eq!(s.breakdown.total, 1.0);
        let t = sample_loss(LossKind::Sft, OddsMode::LengthNormalized, 0.3, -1.0, None, 3, 0).unwrap();
        assert_eq!(t.breakdown.total, 1.0);
        assert!(sample_loss(LossKind::Or, OddsMode::LengthNormalized, 0.3, -1.0, None, 3, 0).is_err());
    }

    #[test]
    fn sample_loss_gradients_combine_terms() {
        let (a, b) = (0.6f64.ln(), 0.4f64.ln());
        let s = sample_loss(LossKind::Or, OddsMode::LengthNormalized, 0.3, a, Some(b), 3, 4).unwrap();
        let (gp, gn) = odds_ratio_grads(a, b).unwrap();
        assert_eq!(s.d_pos, -1.0 + 0.3 * gp);
        assert_eq!(s.d_neg, Some(0.3 * gn));
        let p = sample_loss(LossKind::Pr, OddsMode::LengthNormalized, 0.3, a, Some(b), 3, 4).unwrap();
        assert_eq!(p.d_neg, Some(0.3));
        assert!((p.breakdown.total - (-a + 0.3 * (b - a))).abs() < 1e-15);
        // Raw product: odds over exp(len × mean).
        let r = sample_loss(LossKind::Or, OddsMode::RawProduct, 0.3, -0.1, Some(-0.2), 3, 4).unwrap();
        let (l, _) = odds_ratio_loss(-0.3, -0.8).unwrap();
        assert!((r.breakdown.or_loss - l).abs() < 1e-15);
    }

    #[test]
    fn csv_row_format() {
        let b = combined_loss(1.0, 0.5, 0.25).unwrap();
        assert_eq!(b.csv_row(3), "3,1,0.5,0.25,1.125,0,0");
        assert_eq!(LossBreakdown::CSV_HEADER.split(',').count(), 7);
    }

    proptest! {
        #[test]
        fn log_odds_strictly_increasing(p in 1e-6f64..0.999, d in 1e-4f64..0.5) {
            let q = (p + d).min(0.9999);
            prop_assume!(q > p);
            prop_assert!(log_odds(q.ln()).unwrap() > log_odds(p.ln()).unwrap());
        }

        #[test]
        fn or_loss_positive_and_decreasing(a in -30.0f64..-1e-6, b in -30.0f64..-1e-6, c in -30.0f64..-1e-6) {
            let (l1, z1) = odds_ratio_loss(a, b).unwrap();
            prop_assert!(l1 > 0.0);
            let (l2, z2) = odds_ratio_loss(a, c).unwrap();
            if z1 < z2 { prop_assert!(l1 >= l2); }
        }

        #[test]
        fn breakdown_invariants(a in -10.0f64..-1e-6, b in -10.0f64..-1e-6, lam in 0.0f64..1.0) {
            let s = sample_loss(LossKind::Or, OddsMode::LengthNormalized, lam, a, Some(b), 2, 2).unwrap().breakdown;
            prop_assert_eq!(s.total, if lam == 0.0 { s.nll } else { s.nll + lam * s.or_loss });
            prop_assert!((s.or_loss - softplus(-s.log_odds_ratio)).abs() < 1e-12);
            prop_assert!(s.or_loss > 0.0);
            prop_assert_eq!(s.log_odds_ratio.signum() == s.reward_margin.signum() || s.reward_margin == 0.0, true);
        }
    }
}
