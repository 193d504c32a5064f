//! One-way ANOVA and Bonferroni-corrected pooled t-tests, with the F and t
//! tails computed from the regularized incomplete beta function.

use serde::Serialize;

use crate::error::{Error, Result};

/// ln Γ(x) for x > 0 (Lanczos, g = 7, nine coefficients).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for I_x(a, b) (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// P(F > f) for an F(d1, d2) variable.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// Two-sided P(|T| >= |t|) for Student's t with `df` degrees of freedom.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sum_sq_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Statistics("ANOVA needs at least two groups of at least two values".into()));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Statistics("non-finite value in ANOVA input".into()));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let grand = mean(&all);
    let ss_between: f64 = groups.iter().map(|g| g.len() as f64 * (mean(g) - grand).powi(2)).sum();
    let ss_within: f64 = groups.iter().map(|g| sum_sq_dev(g)).sum();
    let df_between = groups.len() - 1;
    let df_within = all.len() - groups.len();
    let scale = ss_between.abs().max(ss_within.abs()).max(f64::MIN_POSITIVE);
    if ss_between / scale < 1e-14 {
        return Ok(AnovaResult {
            f: 0.0,
            df_between,
            df_within,
            p: 1.0,
        });
    }
    if ss_within / scale < 1e-14 {
        return Err(Error::Statistics("zero within-group variance with differing group means".into()));
    }
    let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
    Ok(AnovaResult {
        f,
        df_between,
        df_within,
        p: f_survival(f, df_between as f64, df_within as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairTest {
    pub first: usize,
    pub second: usize,
    pub t: f64,
    pub df: usize,
    pub p_raw: f64,
    pub p_corrected: f64,
}

/// Pooled-variance t statistic for two samples.
pub fn pooled_t(a: &[f64], b: &[f64]) -> Result<(f64, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Statistics("t-test needs at least two values per group".into()));
    }
    let df = a.len() + b.len() - 2;
    let sp2 = (sum_sq_dev(a) + sum_sq_dev(b)) / df as f64;
    let diff = mean(a) - mean(b);
    let se = (sp2 * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt();
    let scale = diff.abs().max(se).max(f64::MIN_POSITIVE);
    if diff.abs() / scale < 1e-14 {
        return Ok((0.0, df));
    }
    if se / scale < 1e-14 {
        return Err(Error::Statistics("zero pooled variance with differing means".into()));
    }
    Ok((diff / se, df))
}

/// Every pair `(i, j)`, `i < j`; corrected p = min(1, p × number of pairs).
pub fn bonferroni_pairwise(groups: &[Vec<f64>]) -> Result<Vec<PairTest>> {
    if groups.len() < 2 {
        return Err(Error::Statistics("pairwise tests need at least two groups".into()));
    }
    let pairs = groups.len() * (groups.len() - 1) / 2;
    let mut out = Vec::with_capacity(pairs);
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (t, df) = pooled_t(&groups[i], &groups[j])?;
            let p_raw = t_two_sided(t, df as f64);
            out.push(PairTest {
                first: i,
                second: j,
                t,
                df,
                p_raw,
                p_corrected: (p_raw * pairs as f64).min(1.0),
            });
        }
    }
    Ok(out)
}
