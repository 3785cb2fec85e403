//! Regularized incomplete beta function and the t / F tail probabilities
//! and quantiles built on it. Self-contained: log-gamma by a Lanczos
//! series, the incomplete beta by the standard continued fraction with
//! modified Lentz evaluation.
//!
//! Tail identities used throughout:
//!
//! ```text
//! P(T > t)   = I_{ν/(ν+t²)}(ν/2, 1/2) / 2          (t ≥ 0)
//! P(F > f)   = I_{d2/(d2+d1·f)}(d2/2, d1/2)
//! ```

/// ln Γ(x) for x > 0 (Lanczos, g = 7, 9 terms; ~1e-15 relative accuracy).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (Lentz's method).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
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

/// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "reg_inc_beta needs positive parameters");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value for a t statistic with ν degrees of freedom.
pub fn t_two_sided_p(t: f64, nu: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = nu / (nu + t * t);
    reg_inc_beta(nu / 2.0, 0.5, x).min(1.0)
}

/// Upper-tail P(T > t) for t ≥ 0.
pub fn t_upper_p(t: f64, nu: f64) -> f64 {
    t_two_sided_p(t.abs(), nu) / 2.0
}

/// Upper-tail P(F > f) with (d1, d2) degrees of freedom.
pub fn f_upper_p(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if !f.is_finite() {
        return 0.0;
    }
    reg_inc_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// Quantile t_{ν,q} (q in (0,1)) by bisection + Newton refinement on the CDF.
pub fn t_quantile(q: f64, nu: f64) -> f64 {
    assert!((0.0..1.0).contains(&q) && q > 0.0);
    if (q - 0.5).abs() < 1e-15 {
        return 0.0;
    }
    let target = q;
    let cdf = |t: f64| -> f64 {
        if t >= 0.0 {
            1.0 - t_upper_p(t, nu)
        } else {
            t_upper_p(-t, nu)
        }
    };
    // bracket
    let (mut lo, mut hi) = (-1.0, 1.0);
    while cdf(lo) > target {
        lo *= 2.0;
        if lo < -1e10 {
            break;
        }
    }
    while cdf(hi) < target {
        hi *= 2.0;
        if hi > 1e10 {
            break;
        }
    }
    // bisection to ~1e-12, then a couple of Newton steps with the density
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + hi.abs()) {
            break;
        }
    }
    let mut t = 0.5 * (lo + hi);
    let ln_norm = ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln();
    for _ in 0..3 {
        let pdf = (ln_norm - (nu + 1.0) / 2.0 * (1.0 + t * t / nu).ln()).exp();
        if pdf <= 0.0 {
            break;
        }
        t -= (cdf(t) - target) / pdf;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracle values computed with 40-digit arithmetic (mpmath betainc /
    // findroot) and frozen here.
    const IBETA_CASES: [(f64, f64, f64, f64); 10] = [
        (0.5, 0.5, 0.25, 0.33333333333333333333),
        (2.0, 3.0, 0.4, 0.52480000000000003837),
        (14.5, 0.5, 0.999, 0.86589514854588085148),
        (0.5, 14.5, 0.001, 0.13410485145411909088),
        (5.0, 5.0, 0.5, 0.5),
        (30.0, 1.5, 0.98, 0.74769035923648658578),
        (1.5, 29.0, 0.02, 0.24262000619204764707),
        (100.0, 100.0, 0.55, 0.92161206728777970083),
        (0.1, 0.9, 0.3, 0.87467605827338327301),
        (9.0, 1.0, 0.77, 0.095151694449171456756),
    ];

    const T_CASES: [(f64, f64, f64); 8] = [
        (1.0, 5.0, 0.1816087338245613128),
        (2.045, 29.0, 0.025012037961205837003),
        (0.5, 3.0, 0.32572398242407549722),
        (4.2, 11.0, 0.00074279230647715825622),
        (2.776, 4.0, 0.025011389159988206115),
        (1.96, 1000.0, 0.025136592477874359217),
        (0.0, 7.0, 0.5),
        (12.0, 2.0, 0.0034364668385792300706),
    ];

    const F_CASES: [(f64, f64, f64, f64); 6] = [
        (1.0, 3.0, 29.0, 0.4068422548088724548),
        (2.93, 3.0, 29.0, 0.050211677608084001913),
        (0.2, 3.0, 10.0, 0.89401811142072087163),
        (5.5, 1.0, 24.0, 0.027617720240958692641),
        (3.1, 4.0, 62.0, 0.021648701197810375742),
        (10.0, 3.0, 5.0, 0.014888525723791659782),
    ];

    const T_QUANTILES: [(f64, f64, f64); 6] = [
        (0.975, 29.0, 2.0452296421327038745),
        (0.975, 4.0, 2.7764451051977934898),
        (0.975, 24.0, 2.0638985616280254157),
        (0.95, 11.0, 1.7958848187040435683),
        (0.975, 62.0, 1.9989715170333785613),
        (0.995, 9.0, 3.2498355415921257205),
    ];

    #[test]
    fn incomplete_beta_matches_oracle_to_1e12() {
        for (a, b, x, want) in IBETA_CASES {
            let got = reg_inc_beta(a, b, x);
            assert!(
                (got - want).abs() < 1e-12,
                "I_{x}({a},{b}) = {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn t_tail_matches_oracle() {
        for (t, nu, want) in T_CASES {
            let got = t_upper_p(t, nu);
            assert!((got - want).abs() < 1e-12, "t={t} nu={nu}: {got} vs {want}");
        }
    }

    #[test]
    fn f_tail_matches_oracle() {
        for (f, d1, d2, want) in F_CASES {
            let got = f_upper_p(f, d1, d2);
            assert!(
                (got - want).abs() < 1e-12,
                "f={f} ({d1},{d2}): {got} vs {want}"
            );
        }
    }

    #[test]
    fn t_quantile_matches_oracle() {
        for (q, nu, want) in T_QUANTILES {
            let got = t_quantile(q, nu);
            assert!((got - want).abs() < 1e-10, "q={q} nu={nu}: {got} vs {want}");
        }
    }

    #[test]
    fn p_values_monotone_in_statistic() {
        let mut last = 1.0;
        for k in 0..60 {
            let t = k as f64 * 0.25;
            let p = t_two_sided_p(t, 14.0);
            assert!(p <= last + 1e-15);
            last = p;
        }
    }
}
