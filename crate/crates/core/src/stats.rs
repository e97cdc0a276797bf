//! Estimators: Wilson intervals, the population/parity Bell fidelity,
//! parity and Ramsey fringe fits, exponential decay fits, and scan CSV io.

use std::f64::consts::{LN_2, PI};
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{LduError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub method: String,
}

impl IntervalEstimate {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn halfwidth(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Wilson score interval for `k` successes in `n` trials. `value` is the
/// raw proportion `k/n`; the interval center is available via `center()`.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> Result<IntervalEstimate> {
    if n == 0 {
        return Err(LduError::InvalidParameter("wilson interval needs n >= 1".into()));
    }
    if k > n {
        return Err(LduError::InvalidParameter(format!("k = {k} exceeds n = {n}")));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(LduError::InvalidParameter(format!("z = {z} must be positive")));
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    Ok(IntervalEstimate { value: p, lo: lo.min(p), hi: hi.max(p), method: format!("wilson z={z}") })
}

/// Bell-state fidelity from the `|00>`, `|11>` populations and the parity
/// oscillation amplitude.
pub fn bell_fidelity(rho00: f64, rho11: f64, amplitude: f64) -> Result<f64> {
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    if !unit(rho00) || !unit(rho11) || !(-1.0..=1.0).contains(&amplitude) {
        return Err(LduError::InvalidParameter(format!(
            "bell fidelity inputs out of range: ({rho00}, {rho11}, {amplitude})"
        )));
    }
    Ok(0.5 * (rho00 + rho11) + 0.5 * amplitude)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub phi_rad: f64,
    pub n: u64,
    pub k: u64,
}

/// Successes `k` out of `n` at each analysis phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanData {
    pub points: Vec<ScanPoint>,
}

pub const SCAN_SCHEMA: &str = "# ldu-scan v1";

impl ScanData {
    pub fn new(points: Vec<ScanPoint>) -> Result<ScanData> {
        let s = ScanData { points };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.k > p.n {
                return Err(LduError::InvalidParameter(format!("scan point {i}: k = {} > n = {}", p.k, p.n)));
            }
            if !p.phi_rad.is_finite() {
                return Err(LduError::InvalidParameter(format!("scan point {i}: phase is not finite")));
            }
            if self.points[..i].iter().any(|q| q.phi_rad == p.phi_rad) {
                return Err(LduError::InvalidParameter(format!("scan point {i}: repeated phase {}", p.phi_rad)));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SCAN_SCHEMA}")?;
        let mut wr = csv::Writer::from_writer(w);
        for p in &self.points {
            wr.serialize(p)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<ScanData> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let points = rd.deserialize().collect::<std::result::Result<Vec<ScanPoint>, _>>()?;
        ScanData::new(points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl FitParam {
    fn symmetric(name: &str, value: f64, sigma: f64) -> FitParam {
        FitParam { name: name.into(), value, sigma, lo: value - sigma, hi: value + sigma }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: String,
    pub params: Vec<FitParam>,
    pub residual_norm: f64,
    pub converged: bool,
    /// The optimum sits on a constraint (e.g. a fringe touching 0 or 1).
    pub at_boundary: bool,
}

impl FitResult {
    /// A fitted parameter; fails for unconverged fits.
    pub fn param(&self, name: &str) -> Result<&FitParam> {
        if !self.converged {
            return Err(LduError::Fit(format!("{} did not converge", self.method)));
        }
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| LduError::Fit(format!("{} has no parameter `{name}`", self.method)))
    }

    pub fn value(&self, name: &str) -> Result<f64> {
        self.param(name).map(|p| p.value)
    }
}

fn distinct_phases(scan: &ScanData) -> usize {
    let mut phis: Vec<f64> = scan.points.iter().map(|p| p.phi_rad).collect();
    phis.sort_by(f64::total_cmp);
    phis.dedup();
    phis.len()
}

/// Weighted least squares of the parity `2k/n - 1` against
/// `A cos(2 phi + delta) + c`. Parameters: `amplitude` (>= 0), `phase`
/// (delta), `offset`.
pub fn fit_parity(scan: &ScanData) -> Result<FitResult> {
    scan.validate()?;
    let pts: Vec<&ScanPoint> = scan.points.iter().filter(|p| p.n > 0).collect();
    let m = pts.len();
    if m < 6 || distinct_phases(scan) < 6 {
        return Err(LduError::Fit(format!("parity fit needs at least 6 distinct phases, got {m}")));
    }
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.phi_rad), h.max(p.phi_rad)));
    if hi - lo < PI * (1.0 - 1.0 / m as f64) - 1e-9 {
        return Err(LduError::Fit("parity scan does not cover a full period of the 2 phi oscillation".into()));
    }
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    let mut rows = Vec::with_capacity(m);
    for p in &pts {
        let n = p.n as f64;
        let y = 2.0 * p.k as f64 / n - 1.0;
        // binomial error of the parity, with a regularized proportion so that
        // points at k = 0 or k = n keep a finite weight
        let pr = (p.k as f64 + 0.5) / (n + 1.0);
        let sigma = 2.0 * (pr * (1.0 - pr) / n).sqrt();
        let v = Vector3::new((2.0 * p.phi_rad).cos(), (2.0 * p.phi_rad).sin(), 1.0);
        let w = 1.0 / (sigma * sigma);
        ata += w * v * v.transpose();
        atb += w * y * v;
        rows.push((v, y, sigma));
    }
    let cov = ata.try_inverse().ok_or_else(|| LduError::Fit("parity design matrix is singular".into()))?;
    let beta = cov * atb;
    let (a, b, c) = (beta[0], beta[1], beta[2]);
    let amp = a.hypot(b);
    let delta = (-b).atan2(a);
    let chi2: f64 = rows.iter().map(|(v, y, s)| ((y - v.dot(&beta)) / s).powi(2)).sum();
    // amplitude error by linear propagation through (a, b)
    let (sa, sb) = if amp > 0.0 {
        let g = Vector3::new(a / amp, b / amp, 0.0);
        let gp = Vector3::new(b / (amp * amp), a / (amp * amp), 0.0);
        ((g.transpose() * cov * g)[0].sqrt(), (gp.transpose() * cov * gp)[0].sqrt())
    } else {
        (cov[(0, 0)].max(cov[(1, 1)]).sqrt(), PI)
    };
    Ok(FitResult {
        method: "parity weighted least squares".into(),
        params: vec![
            FitParam::symmetric("amplitude", amp, sa),
            FitParam::symmetric("phase", delta, sb),
            FitParam::symmetric("offset", c, cov[(2, 2)].sqrt()),
        ],
        residual_norm: chi2.sqrt(),
        converged: true,
        at_boundary: false,
    })
}

struct Fringe<'a> {
    pts: &'a [ScanPoint],
}

impl Fringe<'_> {
    fn basis(phi: f64) -> Vector3<f64> {
        Vector3::new(1.0, phi.cos(), phi.sin())
    }

    fn probs(&self, x: &Vector3<f64>) -> Vec<f64> {
        self.pts.iter().map(|p| Self::basis(p.phi_rad).dot(x)).collect()
    }

    fn feasible(&self, x: &Vector3<f64>) -> bool {
        self.probs(x).iter().all(|&p| p > 0.0 && p < 1.0)
    }

    fn loglik_at(pts: &[ScanPoint], probs: &[f64]) -> f64 {
        pts.iter()
            .zip(probs)
            .map(|(pt, &p)| {
                let (k, f) = (pt.k as f64, (pt.n - pt.k) as f64);
                let a = if pt.k > 0 { k * p.ln() } else { 0.0 };
                let b = if pt.n > pt.k { f * (1.0 - p).ln() } else { 0.0 };
                a + b
            })
            .sum()
    }

    /// Objective, gradient and Hessian with barrier weight `mu`.
    fn eval(&self, x: &Vector3<f64>, mu: f64) -> (f64, Vector3<f64>, Matrix3<f64>) {
        let mut f = 0.0;
        let mut g = Vector3::zeros();
        let mut h = Matrix3::zeros();
        for pt in self.pts {
            let v = Self::basis(pt.phi_rad);
            let p = v.dot(x);
            let q = 1.0 - p;
            let (k, nk) = (pt.k as f64, (pt.n - pt.k) as f64);
            f += if pt.k > 0 { k * p.ln() } else { 0.0 } + if pt.n > pt.k { nk * q.ln() } else { 0.0 };
            f += mu * (p.ln() + q.ln());
            let w = k / p - nk / q + mu * (1.0 / p - 1.0 / q);
            let c = k / (p * p) + nk / (q * q) + mu * (1.0 / (p * p) + 1.0 / (q * q));
            g += w * v;
            h -= c * v * v.transpose();
        }
        (f, g, h)
    }

    /// Damped Newton ascent at fixed `mu`, staying strictly feasible.
    fn newton(&self, mut x: Vector3<f64>, mu: f64) -> (Vector3<f64>, bool) {
        for _ in 0..100 {
            let (f, g, h) = self.eval(&x, mu);
            let Some(hinv) = h.try_inverse() else { return (x, false) };
            let dx = -(hinv * g);
            let decrement = g.dot(&dx);
            if dx.norm() < 1e-15 {
                return (x, true);
            }
            // near the optimum the objective change drowns in rounding, so
            // the full step is taken without the sufficient-increase test
            if decrement.abs() < 1e-6 && self.feasible(&(x + dx)) {
                x += dx;
                continue;
            }
            let mut t = 1.0;
            loop {
                let cand = x + t * dx;
                if self.feasible(&cand) && self.eval(&cand, mu).0 >= f + 0.25 * t * decrement {
                    x = cand;
                    break;
                }
                t *= 0.5;
                if t < 1e-20 {
                    return (x, true);
                }
            }
        }
        (x, true)
    }
}

/// Binomial maximum likelihood fit of `p = m + (C/2) cos(phi - phi0)`.
///
/// The interval on `C` is where the likelihood, with `m` and `phi0` held at
/// their optimum, stays within a factor of 2 of its maximum. Parameters:
/// `contrast`, `phase`, `mean`.
pub fn fit_ramsey_mle(scan: &ScanData) -> Result<FitResult> {
    scan.validate()?;
    let pts: Vec<ScanPoint> = scan.points.iter().copied().filter(|p| p.n > 0).collect();
    if pts.len() < 5 {
        return Err(LduError::Fit(format!("ramsey fit needs at least 5 points, got {}", pts.len())));
    }
    if distinct_phases(scan) < 3 {
        return Err(LduError::Fit("degenerate scan: fewer than 3 distinct phases".into()));
    }
    let fr = Fringe { pts: &pts };
    let total_n: f64 = pts.iter().map(|p| p.n as f64).sum();
    let mean0 = (pts.iter().map(|p| p.k as f64).sum::<f64>() / total_n).clamp(0.05, 0.95);
    let mut x = Vector3::new(mean0, 0.0, 0.0);
    let mut ok = true;
    let mut mu = total_n;
    while mu > 1e-13 {
        let (nx, conv) = fr.newton(x, mu);
        x = nx;
        ok &= conv;
        mu *= 0.1;
    }
    // polish without the barrier when the optimum is interior
    let margin = 1e-7;
    let interior = |x: &Vector3<f64>| fr.probs(x).iter().all(|&p| p > margin && p < 1.0 - margin);
    let mut at_boundary = !interior(&x);
    if !at_boundary {
        let (px, conv) = fr.newton(x, 0.0);
        if conv && interior(&px) {
            x = px;
        } else {
            at_boundary = true;
        }
    }
    let (m, a, b) = (x[0], x[1], x[2]);
    let c_hat = 2.0 * a.hypot(b);
    let phi0 = b.atan2(a);

    // conditional likelihood in C with m, phi0 fixed
    let cosines: Vec<f64> = pts.iter().map(|p| (p.phi_rad - phi0).cos()).collect();
    let ll_c = |c: f64| {
        let probs: Vec<f64> = cosines.iter().map(|&cs| m + 0.5 * c * cs).collect();
        if probs.iter().zip(&pts).any(|(&p, pt)| (p <= 0.0 && pt.k > 0) || (p >= 1.0 && pt.k < pt.n) || !(0.0..=1.0).contains(&p)) {
            return f64::NEG_INFINITY;
        }
        Fringe::loglik_at(&pts, &probs)
    };
    let c_max = cosines
        .iter()
        .filter(|cs| cs.abs() > 1e-15)
        .map(|&cs| if cs > 0.0 { 2.0 * (1.0 - m) / cs } else { 2.0 * m / -cs })
        .fold(f64::INFINITY, f64::min);
    let ll_max = ll_c(c_hat);
    let target = ll_max - LN_2;
    let bisect = |mut inside: f64, mut outside: f64| {
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if ll_c(mid) >= target {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let lo = if ll_c(0.0) >= target { 0.0 } else { bisect(c_hat, 0.0) };
    let hi = if ll_c(c_max) >= target {
        at_boundary = true;
        c_max
    } else {
        bisect(c_hat, c_max)
    };

    let (_, _, h) = fr.eval(&x, 0.0);
    let cov = (-h).try_inverse().unwrap_or_else(|| Matrix3::from_element(f64::NAN));
    let sm = cov[(0, 0)].sqrt();
    let r2 = a * a + b * b;
    let sphi = if r2 > 0.0 {
        let g = Vector3::new(0.0, -b / r2, a / r2);
        (g.transpose() * cov * g)[0].sqrt()
    } else {
        PI
    };
    let probs = fr.probs(&x);
    let dev: f64 = pts
        .iter()
        .zip(&probs)
        .map(|(pt, &p)| {
            let f = pt.k as f64 / pt.n as f64;
            (f - p).powi(2) * pt.n as f64 / (p * (1.0 - p)).max(1e-12)
        })
        .sum();
    Ok(FitResult {
        method: "ramsey binomial mle".into(),
        params: vec![
            FitParam { name: "contrast".into(), value: c_hat, sigma: 0.5 * (hi - lo), lo, hi },
            FitParam::symmetric("phase", phi0, sphi),
            FitParam::symmetric("mean", m, sm),
        ],
        residual_norm: dev.sqrt(),
        converged: ok && x.iter().all(|v| v.is_finite()),
        at_boundary,
    })
}

/// Gradient of the fringe log-likelihood in `(m, a, b)` at a fitted result;
/// zero at an interior optimum.
pub fn ramsey_gradient(scan: &ScanData, fit: &FitResult) -> Result<[f64; 3]> {
    let c = fit.value("contrast")?;
    let phi0 = fit.value("phase")?;
    let m = fit.value("mean")?;
    let x = Vector3::new(m, 0.5 * c * phi0.cos(), 0.5 * c * phi0.sin());
    let pts: Vec<ScanPoint> = scan.points.iter().copied().filter(|p| p.n > 0).collect();
    let (_, g, _) = Fringe { pts: &pts }.eval(&x, 0.0);
    Ok([g[0], g[1], g[2]])
}

/// Treatment of the long-time level in [`fit_exp_decay`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Floor {
    None,
    Fixed(f64),
    Free,
}

/// Weighted least squares of `y = a exp(-x / tau) (+ c)` by
/// Levenberg-Marquardt. Weights are inverse squared interval halfwidths;
/// if every halfwidth is zero the fit is unweighted. Parameters:
/// `amplitude`, `tau`, and `floor` when it is fitted.
pub fn fit_exp_decay(x: &[f64], y: &[IntervalEstimate], floor: Floor) -> Result<FitResult> {
    let m = x.len();
    if m != y.len() {
        return Err(LduError::DimensionMismatch { expected: m, got: y.len() });
    }
    let np = if floor == Floor::Free { 3 } else { 2 };
    if m < np.max(3) {
        return Err(LduError::Fit(format!("decay fit needs at least {} points", np.max(3))));
    }
    if x.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LduError::Fit("x must be non-negative and strictly increasing".into()));
    }
    let hw: Vec<f64> = y.iter().map(|e| e.halfwidth()).collect();
    let min_pos = hw.iter().copied().filter(|&h| h > 0.0).fold(f64::INFINITY, f64::min);
    let sig: Vec<f64> = hw.iter().map(|&h| if min_pos.is_finite() { h.max(min_pos) } else { 1.0 }).collect();
    let yv: Vec<f64> = y.iter().map(|e| e.value).collect();

    let c0 = match floor {
        Floor::None => 0.0,
        Floor::Fixed(c) => c,
        Floor::Free => {
            let lo = yv.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = yv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            lo - 0.05 * (hi - lo).max(1e-12)
        }
    };
    // log-linear start on the points above the floor
    let lin: Vec<(f64, f64)> = x.iter().zip(&yv).filter(|(_, &v)| v - c0 > 0.0).map(|(&a, &v)| (a, (v - c0).ln())).collect();
    let (a0, tau0) = if lin.len() >= 2 {
        let k = lin.len() as f64;
        let mx = lin.iter().map(|p| p.0).sum::<f64>() / k;
        let my = lin.iter().map(|p| p.1).sum::<f64>() / k;
        let sxx: f64 = lin.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = lin.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let span = x[m - 1] - x[0];
        let tau = if slope < 0.0 { (-1.0 / slope).min(100.0 * span.max(1e-300)) } else { span.max(1e-300) };
        ((my - slope * mx).exp(), tau)
    } else {
        (yv[0] - c0, (x[m - 1] - x[0]) / 2.0)
    };

    let model = |p: &DVector<f64>, xi: f64| -> f64 {
        let c = match floor {
            Floor::None => 0.0,
            Floor::Fixed(c) => c,
            Floor::Free => p[2],
        };
        p[0] * (-xi / p[1]).exp() + c
    };
    let residuals = |p: &DVector<f64>| DVector::from_fn(m, |i, _| (yv[i] - model(p, x[i])) / sig[i]);
    let jacobian = |p: &DVector<f64>| {
        DMatrix::from_fn(m, np, |i, j| {
            let e = (-x[i] / p[1]).exp();
            -(match j {
                0 => e,
                1 => p[0] * e * x[i] / (p[1] * p[1]),
                _ => 1.0,
            }) / sig[i]
        })
    };
    let mut p = DVector::from_vec(if np == 3 { vec![a0, tau0, c0] } else { vec![a0, tau0] });
    let mut r = residuals(&p);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..500 {
        let j = jacobian(&p);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for d in 0..np {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.clone().cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = &p + &step;
            if cand[1] <= 0.0 || !cand.iter().all(|v| v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let rc = residuals(&cand);
            let cc = rc.norm_squared();
            if cc <= cost {
                let rel_step = step.iter().zip(cand.iter()).map(|(s, v)| s.abs() / v.abs().max(1e-300)).fold(0.0, f64::max);
                let small = (cost - cc) <= 1e-15 * cost.max(1e-300) || rel_step < 1e-13;
                p = cand;
                r = rc;
                cost = cc;
                lambda = (lambda * 0.1).max(1e-15);
                improved = true;
                if small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !improved {
            // no downhill step at any damping: already at the minimum
            converged = g.norm() <= 1e-8 * (1.0 + cost.sqrt()) || cost < 1e-24;
            break;
        }
    }
    let j = jacobian(&p);
    let cov = (j.transpose() * &j).try_inverse();
    let sd = |i: usize| cov.as_ref().map_or(f64::NAN, |c| c[(i, i)].max(0.0).sqrt());
    let mut params = vec![FitParam::symmetric("amplitude", p[0], sd(0)), FitParam::symmetric("tau", p[1], sd(1))];
    if np == 3 {
        params.push(FitParam::symmetric("floor", p[2], sd(2)));
    }
    Ok(FitResult {
        method: "exponential decay weighted least squares".into(),
        params,
        residual_norm: cost.sqrt(),
        converged,
        at_boundary: false,
    })
}
