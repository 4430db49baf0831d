//! Source recovery from a visibility scan: `|v|²(Δy)` → intensity
//! autocorrelation, a pixelated double-slit model of that autocorrelation,
//! and a maximum-likelihood fit of the model parameters.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::estimator::{csv_error, VisibilityPoint};

pub const MIN_BASELINES: usize = 16;
pub const MODEL_OVERSAMPLING: usize = 8;
/// Smallest slit width, in output grid steps, the pixel model accepts.
pub const MIN_WIDTH_STEPS: f64 = 4.0;

const ARCMIN_PER_RAD: f64 = 180.0 * 60.0 / PI;
const IMAG_TOL: f64 = 1e-10;
const N_PARAMS: usize = 5;
const MM: f64 = 1e-3;

/// `|v|²` samples behind a native-grid curve, kept for error propagation.
#[derive(Debug, Clone, PartialEq)]
struct Spectrum {
    x: Vec<f64>,
    /// Per-component variance `2/N` of each visibility estimate.
    s2: Vec<f64>,
    c0: f64,
    /// `C = F x` with `F_{k0} = 1`, `F_{km} = 2 cos(2π k m / M)`.
    f: DMatrix<f64>,
}

impl Spectrum {
    /// Covariance of `C / C0` when the true `|V|²` is `x_true`:
    /// `Var x_m = 4 x_m s_m² + 4 s_m⁴`.
    fn covariance(&self, x_true: &[f64]) -> DMatrix<f64> {
        let n = self.x.len();
        let fd = DMatrix::from_fn(self.f.nrows(), n, |k, j| {
            let s2 = self.s2[j];
            self.f[(k, j)] * (4.0 * x_true[j].max(0.0) * s2 + 4.0 * s2 * s2)
        });
        &fd * self.f.transpose() / (self.c0 * self.c0)
    }

    /// `|V|²` samples whose transform is the normalized curve `c`.
    fn invert(&self, c: &[f64]) -> Option<Vec<f64>> {
        let rhs = DVector::from_iterator(c.len(), c.iter().map(|v| v * self.c0));
        self.f.clone().lu().solve(&rhs).map(|x| x.iter().copied().collect())
    }
}

/// One-sided autocorrelation on `δx_k ≥ 0`; the curve is even in `δx`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocorrCurve {
    pub delta_x: Vec<f64>,
    pub values: Vec<f64>,
    pub theta_arcmin: Vec<f64>,
    spectrum: Option<Spectrum>,
}

impl AutocorrCurve {
    /// A curve without noise information, e.g. a model evaluation.
    pub fn from_values(delta_x: Vec<f64>, values: Vec<f64>, distance: f64) -> Result<Self> {
        if delta_x.len() != values.len() || delta_x.len() < 2 {
            return Err(Error::invalid("values", "need matching grids of at least two points"));
        }
        if delta_x.windows(2).any(|w| !(w[1] > w[0])) || delta_x[0] != 0.0 {
            return Err(Error::invalid("delta_x", "grid must start at 0 and increase"));
        }
        Ok(Self {
            theta_arcmin: delta_x.iter().map(|d| d / distance * ARCMIN_PER_RAD).collect(),
            delta_x,
            values,
            spectrum: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.delta_x.get(1).copied().unwrap_or(0.0) - self.delta_x[0]
    }

    /// Covariance of `values` implied by the measured `|v|²`; present for
    /// unpadded curves whose points all carry events.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        self.spectrum.as_ref().map(|s| s.covariance(&s.x))
    }

    pub fn noise(&self) -> Option<Vec<f64>> {
        self.covariance()
            .map(|c| (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect())
    }

    /// `(δx, C)` over the full symmetric range, negative lags first.
    pub fn mirrored(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let mut x = Vec::with_capacity(2 * n - 1);
        let mut c = Vec::with_capacity(2 * n - 1);
        for k in (1..n).rev() {
            x.push(-self.delta_x[k]);
            c.push(self.values[k]);
        }
        x.extend_from_slice(&self.delta_x);
        c.extend_from_slice(&self.values);
        (x, c)
    }

    /// Local maxima of the mirrored curve above `min_height`, as `(δx, C)`.
    pub fn peaks(&self, min_height: f64) -> Vec<(f64, f64)> {
        let (x, c) = self.mirrored();
        (1..c.len() - 1)
            .filter(|&i| c[i] > min_height && c[i] > c[i - 1] && c[i] >= c[i + 1])
            .map(|i| (x[i], c[i]))
            .collect()
    }
}

/// Baseline step of a uniform grid starting at zero.
fn uniform_step(points: &[VisibilityPoint]) -> Result<f64> {
    let n = points.len();
    let step = (points[n - 1].baseline - points[0].baseline) / (n - 1) as f64;
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid("scan", "baselines must be distinct and finite"));
    }
    if points[0].baseline.abs() > 1e-6 * step {
        return Err(Error::invalid(
            "scan",
            format!("baseline grid must start at 0, starts at {}", points[0].baseline),
        ));
    }
    for (k, p) in points.iter().enumerate() {
        if (p.baseline - k as f64 * step).abs() > 1e-6 * step {
            return Err(Error::invalid(
                "scan",
                format!("baseline grid is not uniform at point {k} ({} m)", p.baseline),
            ));
        }
    }
    Ok(step)
}

/// Autocorrelation on the native grid `δx_k = k λz / (M Δ)`, `M = 2N − 1`.
pub fn autocorrelation_from_visibility(
    points: &[VisibilityPoint],
    wavelength: f64,
    distance: f64,
) -> Result<AutocorrCurve> {
    autocorrelation_zero_padded(points, wavelength, distance, 1)
}

/// As [`autocorrelation_from_visibility`] with the symmetrized `|v|²`
/// sequence zero padded to `pad × M` samples, which interpolates the curve
/// onto a `pad`-times finer grid. Padded curves carry no covariance.
///
/// Each point's visibility noise is taken as `2/N` per component, the
/// large-sample variance of the estimator, rather than from its own `|v|`.
pub fn autocorrelation_zero_padded(
    points: &[VisibilityPoint],
    wavelength: f64,
    distance: f64,
    pad: usize,
) -> Result<AutocorrCurve> {
    ensure_finite("wavelength", wavelength)?;
    ensure_finite("distance", distance)?;
    if wavelength <= 0.0 || distance <= 0.0 {
        return Err(Error::invalid("wavelength", "wavelength and distance must be positive"));
    }
    if pad == 0 {
        return Err(Error::invalid("pad", "must be at least 1"));
    }
    if points.len() < MIN_BASELINES {
        return Err(Error::InsufficientData(format!(
            "{} baselines, need at least {MIN_BASELINES}",
            points.len()
        )));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.baseline.total_cmp(&b.baseline));
    let step = uniform_step(&pts)?;
    if pts.iter().any(|p| !p.v2_unbiased.is_finite()) {
        return Err(Error::invalid("scan", "non-finite |v|²"));
    }

    let n = pts.len();
    let m = 2 * n - 1;
    let len = pad * m;
    let x: Vec<f64> = pts.iter().map(|p| p.v2_unbiased).collect();

    // full DFT of the even extension x_{-m} = x_m
    let n_out = len.div_ceil(2);
    let mut re = vec![0.0; n_out];
    let mut im = vec![0.0; n_out];
    for (k, (r, i)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
        for (j, &xj) in x.iter().enumerate() {
            let lags: &[i64] = if j == 0 { &[0] } else { &[j as i64, -(j as i64)] };
            for &lag in lags {
                let arg = 2.0 * PI * ((k as i64 * lag).rem_euclid(len as i64)) as f64 / len as f64;
                *r += xj * arg.cos();
                *i -= xj * arg.sin();
            }
        }
    }
    let c0 = re[0];
    if !(c0.is_finite() && c0 > 0.0) {
        return Err(Error::Numerical(format!(
            "autocorrelation at zero lag is {c0}; the scan carries no power"
        )));
    }
    let scale = re.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let worst = im.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if worst > IMAG_TOL * scale {
        return Err(Error::Numerical(format!(
            "transform has imaginary part {worst:e} relative to {scale:e}"
        )));
    }

    let dx_step = wavelength * distance / (len as f64 * step);
    let delta_x: Vec<f64> = (0..n_out).map(|k| k as f64 * dx_step).collect();
    let theta_arcmin = delta_x.iter().map(|d| d / distance * ARCMIN_PER_RAD).collect();
    let values: Vec<f64> = re.iter().map(|v| v / c0).collect();

    let spectrum = if pad == 1 && pts.iter().all(|p| p.n_events > 0) {
        let f = DMatrix::from_fn(n_out, n, |k, j| {
            if j == 0 {
                1.0
            } else {
                2.0 * (2.0 * PI * ((k * j) % m) as f64 / m as f64).cos()
            }
        });
        Some(Spectrum {
            s2: pts.iter().map(|p| 2.0 / p.n_events as f64).collect(),
            x,
            c0,
            f,
        })
    } else {
        None
    };

    Ok(AutocorrCurve {
        delta_x,
        values,
        theta_arcmin,
        spectrum,
    })
}

/// Fraction of the pixel `[x − h/2, x + h/2]` inside `[lo, hi]`.
fn coverage(x: f64, h: f64, lo: f64, hi: f64) -> f64 {
    let a = (x - 0.5 * h).max(lo);
    let b = (x + 0.5 * h).min(hi);
    ((b - a) / h).max(0.0)
}

/// Pixel model of the double-slit autocorrelation at the points `grid`,
/// computed on a fine grid of spacing `h`. No validation.
fn model_values(sigma: f64, d: f64, w: f64, h: f64, grid: &[f64]) -> Vec<f64> {
    let half = ((d + 0.5 * w) / h).ceil() as i64 + 2;
    let profile: Vec<f64> = (-half..=half)
        .map(|i| {
            let x = i as f64 * h;
            let c = coverage(x, h, -d - 0.5 * w, -d + 0.5 * w) + coverage(x, h, d - 0.5 * w, d + 0.5 * w);
            if c > 0.0 {
                c * (-2.0 * x * x / (sigma * sigma)).exp()
            } else {
                0.0
            }
        })
        .collect();
    let max_lag = grid.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let n_lags = ((max_lag / h).floor() as usize + 2).min(profile.len());
    let auto: Vec<f64> = (0..n_lags)
        .map(|l| profile.iter().zip(&profile[l..]).map(|(a, b)| a * b).sum())
        .collect();
    let peak = auto[0];
    grid.iter()
        .map(|&g| {
            let t = g.abs() / h;
            let i = t.floor() as usize;
            let frac = t - i as f64;
            let a = auto.get(i).copied().unwrap_or(0.0);
            let b = auto.get(i + 1).copied().unwrap_or(0.0);
            (a + frac * (b - a)) / peak
        })
        .collect()
}

fn grid_step(grid: &[f64]) -> Result<f64> {
    let mut sorted: Vec<f64> = grid.iter().map(|g| g.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|s| *s > 0.0)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))))
        .ok_or_else(|| Error::invalid("grid", "needs at least two distinct |δx| values"))
}

/// Autocorrelation, normalized to 1 at zero lag, of a double slit (centres
/// `±d`, width `w`) under a Gaussian beam of radius `σ`. The slit profile
/// is rendered on a grid `MODEL_OVERSAMPLING` times finer than `grid`,
/// with edge pixels weighted by the covered fraction.
pub fn model_autocorrelation(sigma: f64, d: f64, w: f64, grid: &[f64]) -> Result<Vec<f64>> {
    for (name, v) in [("sigma", sigma), ("d", d), ("w", w)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(name, format!("must be positive and finite, got {v}")));
        }
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("grid", "non-finite lag"));
    }
    let step = grid_step(grid)?;
    if w / step < MIN_WIDTH_STEPS {
        return Err(Error::invalid(
            "grid",
            format!("step {step:e} m too coarse for slit width {w:e} m"),
        ));
    }
    Ok(model_values(sigma, d, w, step / MODEL_OVERSAMPLING as f64, grid))
}

/// Model parameters. Lengths in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitParams {
    pub sigma: f64,
    pub d: f64,
    pub w: f64,
    pub scale: f64,
    pub offset: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            sigma: 1.5e-3,
            d: 0.5e-3,
            w: 0.45e-3,
            scale: 1.0,
            offset: 0.0,
        }
    }
}

impl FitParams {
    fn to_internal(self) -> [f64; N_PARAMS] {
        [self.sigma / MM, self.d / MM, self.w / MM, self.scale, self.offset]
    }

    fn from_internal(q: &[f64; N_PARAMS]) -> Self {
        Self {
            sigma: q[0] * MM,
            d: q[1] * MM,
            w: q[2] * MM,
            scale: q[3],
            offset: q[4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub starts: usize,
    pub max_iterations: usize,
    /// Relative spread of the perturbed starting points.
    pub perturbation: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 5,
            max_iterations: 500,
            perturbation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: FitParams,
    /// Parameter covariance in metres for `σ, d, w`; `None` when the
    /// Gauss–Newton Hessian is degenerate.
    pub covariance: Option<SMatrix<f64, N_PARAMS, N_PARAMS>>,
    pub log_likelihood: f64,
    pub chi2: f64,
    pub n_points: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Whether residuals were whitened by the curve covariance.
    pub weighted: bool,
}

impl FitResult {
    pub fn errors(&self) -> Option<FitParams> {
        self.covariance.map(|c| FitParams {
            sigma: c[(0, 0)].sqrt(),
            d: c[(1, 1)].sqrt(),
            w: c[(2, 2)].sqrt(),
            scale: c[(3, 3)].sqrt(),
            offset: c[(4, 4)].sqrt(),
        })
    }

    pub fn model(&self, grid: &[f64], step: f64) -> Vec<f64> {
        let p = self.params;
        model_values(p.sigma, p.d, p.w, step / MODEL_OVERSAMPLING as f64, grid)
            .into_iter()
            .map(|c| p.scale * c + p.offset)
            .collect()
    }
}

struct LmOutcome {
    q: [f64; N_PARAMS],
    cost: f64,
    jac: DMatrix<f64>,
    iterations: usize,
    converged: bool,
}

fn jacobian<F>(f: &F, q: &[f64; N_PARAMS], r0: &DVector<f64>) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64; N_PARAMS]) -> Option<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(r0.len(), N_PARAMS);
    for j in 0..N_PARAMS {
        let h = 1e-6 * q[j].abs().max(0.1);
        let mut up = *q;
        let mut down = *q;
        up[j] += h;
        down[j] -= h;
        let col = match (f(&up), f(&down)) {
            (Some(a), Some(b)) => (a - b) / (2.0 * h),
            (Some(a), None) => (a - r0) / h,
            (None, Some(b)) => (r0 - b) / h,
            (None, None) => return None,
        };
        jac.set_column(j, &col);
    }
    Some(jac)
}

/// Damped Gauss–Newton on `½|r(q)|²`. `f` returns `None` outside the
/// admissible region.
fn levenberg_marquardt<F>(f: &F, q0: [f64; N_PARAMS], max_iterations: usize) -> Result<LmOutcome>
where
    F: Fn(&[f64; N_PARAMS]) -> Option<DVector<f64>>,
{
    let mut q = q0;
    let mut r = f(&q).ok_or_else(|| Error::invalid("initial", "starting point outside the model domain"))?;
    let mut cost = 0.5 * r.norm_squared();
    let mut jac = jacobian(f, &q, &r).ok_or_else(|| Error::Numerical("jacobian undefined at start".into()))?;
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() <= 1e-14 * (1.0 + cost) || cost < 1e-30 {
            converged = true;
            break;
        }
        let mut a = jtj.clone();
        for i in 0..N_PARAMS {
            a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let step = match a.cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                lambda *= 10.0;
                continue;
            }
        };
        let mut trial = q;
        for i in 0..N_PARAMS {
            trial[i] += step[i];
        }
        match f(&trial) {
            Some(rt) if 0.5 * rt.norm_squared() < cost => {
                let new_cost = 0.5 * rt.norm_squared();
                let small_step = step
                    .iter()
                    .zip(&q)
                    .all(|(s, x)| s.abs() <= 1e-10 * (x.abs() + 1e-6));
                let small_gain = cost - new_cost <= 1e-14 * cost;
                q = trial;
                r = rt;
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                match jacobian(f, &q, &r) {
                    Some(j) => jac = j,
                    None => return Err(Error::Numerical("jacobian undefined".into())),
                }
                if small_step || small_gain {
                    converged = true;
                    break;
                }
            }
            _ => {
                lambda *= 4.0;
                if lambda > 1e16 {
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(LmOutcome {
        q,
        cost,
        jac,
        iterations,
        converged,
    })
}

fn perturbed_starts(q0: [f64; N_PARAMS], starts: usize, spread: f64) -> Vec<[f64; N_PARAMS]> {
    const PATTERN: [[f64; 3]; 4] = [[1.0, -0.5, 1.0], [-1.0, 0.5, -1.0], [1.0, 0.25, -1.0], [-1.0, -0.25, 1.0]];
    (0..starts.max(1))
        .map(|i| {
            let mut q = q0;
            if i > 0 {
                let p = PATTERN[(i - 1) % PATTERN.len()];
                let amp = spread * (1 + (i - 1) / PATTERN.len()) as f64;
                for k in 0..3 {
                    q[k] *= 1.0 + amp * p[k];
                }
            }
            q
        })
        .collect()
}

/// Cholesky factor of the curve covariance and its log-determinant.
type Whitening = (nalgebra::Cholesky<f64, nalgebra::Dyn>, f64);

fn whitening(spectrum: &Spectrum, x_true: &[f64]) -> Result<Whitening> {
    let chol = spectrum
        .covariance(x_true)
        .cholesky()
        .ok_or_else(|| Error::Numerical("autocorrelation covariance is not positive definite".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((chol, log_det))
}

/// Best of the LM runs started from `starts`.
fn best_of_starts(
    curve: &AutocorrCurve,
    white: Option<&Whitening>,
    starts: &[[f64; N_PARAMS]],
    max_iterations: usize,
) -> Result<LmOutcome> {
    let n = curve.len();
    let data = DVector::from_column_slice(&curve.values);
    let h = curve.step() / MODEL_OVERSAMPLING as f64;
    let residual = |q: &[f64; N_PARAMS]| -> Option<DVector<f64>> {
        if q[..3].iter().any(|v| !(*v > 0.0)) || q[0] > 1e3 {
            return None;
        }
        let model = model_values(q[0] * MM, q[1] * MM, q[2] * MM, h, &curve.delta_x);
        let r = DVector::from_iterator(n, model.iter().zip(data.iter()).map(|(m, c)| q[3] * m + q[4] - c));
        match white {
            Some((chol, _)) => chol.l().solve_lower_triangular(&r),
            None => Some(r),
        }
    };
    let outcomes: Vec<Result<LmOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = starts
            .iter()
            .map(|&q| {
                let residual = &residual;
                s.spawn(move || levenberg_marquardt(residual, q, max_iterations))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("fit thread panicked".into()))))
            .collect()
    });
    let mut best: Option<LmOutcome> = None;
    let mut first_err = None;
    for o in outcomes {
        match o {
            Ok(o) if o.cost.is_finite() => {
                if best.as_ref().is_none_or(|b| o.cost < b.cost) {
                    best = Some(o);
                }
            }
            Ok(_) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Numerical("no start produced a finite residual".into())),
    }
}

/// Reweighting passes after the first fit.
const REWEIGHT_PASSES: usize = 3;

/// Gaussian maximum-likelihood fit of `scale · model(σ, d, w) + offset` to
/// the curve, from `initial` and `opts.starts − 1` perturbations of it.
///
/// When the curve carries its `|v|²` samples the residuals are whitened by
/// the transform covariance (generalized least squares). That covariance
/// depends on the true `|V|²`, so the first pass uses the measured values
/// and later passes the ones implied by the current fit. Without samples
/// every point gets unit weight and the parameter covariance is scaled by
/// the residual variance.
pub fn fit_autocorrelation(curve: &AutocorrCurve, initial: &FitParams, opts: &FitOptions) -> Result<FitResult> {
    let n = curve.len();
    if n < 5 * N_PARAMS {
        return Err(Error::InsufficientData(format!(
            "{n} curve points, need at least {}",
            5 * N_PARAMS
        )));
    }
    if !(curve.step() > 0.0) {
        return Err(Error::invalid("curve", "grid must be increasing"));
    }
    let q0 = initial.to_internal();
    if q0[..3].iter().any(|v| !(v.is_finite() && *v > 0.0)) || !q0[3].is_finite() || !q0[4].is_finite() {
        return Err(Error::invalid("initial", "σ, d, w must be positive and all parameters finite"));
    }

    let mut starts = perturbed_starts(q0, opts.starts, opts.perturbation);
    let (best, white) = match &curve.spectrum {
        None => (best_of_starts(curve, None, &starts, opts.max_iterations)?, None),
        Some(sp) => {
            let mut x_true = sp.x.clone();
            let mut white = whitening(sp, &x_true)?;
            let mut best = best_of_starts(curve, Some(&white), &starts, opts.max_iterations)?;
            let h = curve.step() / MODEL_OVERSAMPLING as f64;
            for _ in 0..REWEIGHT_PASSES {
                let p = FitParams::from_internal(&best.q);
                let fitted: Vec<f64> = model_values(p.sigma, p.d, p.w, h, &curve.delta_x)
                    .into_iter()
                    .map(|c| p.scale * c + p.offset)
                    .collect();
                x_true = sp
                    .invert(&fitted)
                    .ok_or_else(|| Error::Numerical("transform matrix is singular".into()))?;
                white = whitening(sp, &x_true)?;
                starts = vec![best.q];
                best = best_of_starts(curve, Some(&white), &starts, opts.max_iterations)?;
            }
            (best, Some(white))
        }
    };

    let chi2 = 2.0 * best.cost;
    let dof = (n - N_PARAMS) as f64;
    let jtj = best.jac.transpose() * &best.jac;
    let covariance = jtj.clone().cholesky().and_then(|ch| {
        let inv = ch.inverse();
        let cond = jtj.diagonal().amax() * inv.diagonal().amax();
        if !(cond.is_finite() && cond < 1e14) {
            return None;
        }
        let noise = if white.is_some() { 1.0 } else { chi2 / dof };
        let units = [MM, MM, MM, 1.0, 1.0];
        Some(SMatrix::<f64, N_PARAMS, N_PARAMS>::from_fn(|i, j| {
            inv[(i, j)] * units[i] * units[j] * noise
        }))
    });
    let log_likelihood = match &white {
        Some((_, log_det)) => -0.5 * (chi2 + log_det + n as f64 * (2.0 * PI).ln()),
        None => {
            let s2 = (chi2 / n as f64).max(f64::MIN_POSITIVE);
            -0.5 * n as f64 * (s2.ln() + 1.0 + (2.0 * PI).ln())
        }
    };
    Ok(FitResult {
        params: FitParams::from_internal(&best.q),
        covariance,
        log_likelihood,
        chi2,
        n_points: n,
        iterations: best.iterations,
        converged: best.converged,
        weighted: white.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitErrors {
    pub sigma_m: f64,
    pub d_m: f64,
    pub w_m: f64,
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub sigma_m: f64,
    pub d_m: f64,
    pub w_m: f64,
    pub scale: f64,
    pub offset: f64,
    pub errors: Option<FitErrors>,
    pub loglik: f64,
    pub chi2: f64,
    pub n_points: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&FitResult> for FitReport {
    fn from(f: &FitResult) -> Self {
        let p = f.params;
        Self {
            sigma_m: p.sigma,
            d_m: p.d,
            w_m: p.w,
            scale: p.scale,
            offset: p.offset,
            errors: f.errors().map(|e| FitErrors {
                sigma_m: e.sigma,
                d_m: e.d,
                w_m: e.w,
                scale: e.scale,
                offset: e.offset,
            }),
            loglik: f.log_likelihood,
            chi2: f.chi2,
            n_points: f.n_points,
            iterations: f.iterations,
            converged: f.converged,
        }
    }
}

pub fn write_fit_json(path: &Path, fit: &FitResult) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &FitReport::from(fit)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_fit_json(path: &Path) -> Result<FitReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct AutocorrRow {
    delta_x_m: f64,
    theta_arcmin: f64,
    #[serde(rename = "C")]
    c: f64,
    #[serde(rename = "C_model")]
    c_model: Option<f64>,
}

/// Writes the mirrored curve, with the fitted model when given.
pub fn write_autocorrelation_csv(path: &Path, curve: &AutocorrCurve, distance: f64, fit: Option<&FitResult>) -> Result<()> {
    let (x, c) = curve.mirrored();
    let model = fit.map(|f| f.model(&x, curve.step()));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for (i, (&dx, &cv)) in x.iter().zip(&c).enumerate() {
        let row = AutocorrRow {
            delta_x_m: dx,
            theta_arcmin: dx / distance * ARCMIN_PER_RAD,
            c: cv,
            c_model: model.as_ref().map(|m| m[i]),
        };
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    const LZ: (f64, f64) = (830e-9, 1.02);

    fn scan(v2: impl Fn(f64) -> f64, n: usize, step: f64, err: f64) -> Vec<VisibilityPoint> {
        (0..n)
            .map(|k| {
                let b = k as f64 * step;
                let x = v2(b);
                VisibilityPoint {
                    baseline: b,
                    v: Complex64::new(x.max(0.0).sqrt(), 0.0),
                    std_error: err,
                    n_events: 10_000,
                    v2_unbiased: x,
                }
            })
            .collect()
    }

    fn delta_pair(d: f64) -> impl Fn(f64) -> f64 {
        move |b| (2.0 * PI * d * b / (LZ.0 * LZ.1)).cos().powi(2)
    }

    #[test]
    fn point_source_gives_discrete_delta() {
        let c = autocorrelation_from_visibility(&scan(|_| 1.0, 61, 1e-4, 0.0), LZ.0, LZ.1).unwrap();
        assert_eq!(c.values[0], 1.0);
        assert!(c.values[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(c.covariance().is_some());
        let mut pts = scan(|_| 1.0, 61, 1e-4, 0.0);
        pts[3].n_events = 0;
        let c = autocorrelation_from_visibility(&pts, LZ.0, LZ.1).unwrap();
        assert!(c.covariance().is_none());
    }

    #[test]
    fn grid_spacing_and_angles() {
        let c = autocorrelation_from_visibility(&scan(|_| 1.0, 61, 1e-4, 0.0), LZ.0, LZ.1).unwrap();
        let dx = LZ.0 * LZ.1 / (121.0 * 1e-4);
        assert!((c.step() - dx).abs() < 1e-15);
        assert_eq!(c.len(), 61);
        assert!((c.theta_arcmin[10] - 10.0 * dx / LZ.1 * ARCMIN_PER_RAD).abs() < 1e-12);
    }

    #[test]
    fn delta_pair_peaks_on_grid() {
        // d chosen so that 2d falls exactly on the native grid
        let (n, step) = (61usize, 1e-4);
        let dx = LZ.0 * LZ.1 / ((2 * n - 1) as f64 * step);
        let d = 7.0 * dx;
        let c = autocorrelation_from_visibility(&scan(delta_pair(d), n, step, 0.0), LZ.0, LZ.1).unwrap();
        assert!((c.values[14] - 0.5).abs() < 1e-12, "{}", c.values[14]);
        for (k, v) in c.values.iter().enumerate() {
            if k != 0 && k != 14 {
                assert!(v.abs() < 1e-12);
            }
        }
        let peaks = c.peaks(0.1);
        assert_eq!(peaks.len(), 3);
        assert!((peaks[0].0 + 2.0 * d).abs() < 1e-12);
    }

    #[test]
    fn zero_padding_locates_off_grid_delta_pair() {
        let d = 0.5e-3;
        let c = autocorrelation_zero_padded(&scan(delta_pair(d), 61, 1e-4, 0.0), LZ.0, LZ.1, 8).unwrap();
        let peaks = c.peaks(0.1);
        let centre = peaks.iter().find(|p| p.0 == 0.0).unwrap().1;
        let side = peaks.iter().filter(|p| p.0 > 0.0).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!((side.0 - 2.0 * d).abs() < c.step(), "{}", side.0);
        assert!((side.1 / centre - 0.5).abs() < 0.02, "{}", side.1 / centre);
    }

    #[test]
    fn gaussian_source_matches_analytic_autocorrelation() {
        // I ∝ exp(-x²/2s²): |j|² = exp(-(2π s Δy/λz)²), C = exp(-δx²/4s²)
        let s = 0.3e-3;
        let lz = LZ.0 * LZ.1;
        let v2 = |b: f64| (-(2.0 * PI * s * b / lz).powi(2)).exp();
        let c = autocorrelation_from_visibility(&scan(v2, 64, 5e-5, 0.0), LZ.0, LZ.1).unwrap();
        for (x, v) in c.delta_x.iter().zip(&c.values) {
            let want = (-x * x / (4.0 * s * s)).exp();
            assert!((v - want).abs() < 1e-3, "δx {x}: {v} vs {want}");
        }
    }

    #[test]
    fn rejects_bad_grids() {
        let mut pts = scan(|_| 1.0, 20, 1e-4, 0.0);
        assert!(autocorrelation_from_visibility(&pts[..10], LZ.0, LZ.1).is_err());
        pts[5].baseline += 3e-5;
        assert!(matches!(
            autocorrelation_from_visibility(&pts, LZ.0, LZ.1),
            Err(Error::InvalidParameter { .. })
        ));
        let shifted: Vec<_> = scan(|_| 1.0, 20, 1e-4, 0.0)
            .into_iter()
            .map(|mut p| {
                p.baseline += 1e-4;
                p
            })
            .collect();
        assert!(autocorrelation_from_visibility(&shifted, LZ.0, LZ.1).is_err());
    }

    #[test]
    fn unsorted_input_is_accepted() {
        let mut pts = scan(delta_pair(0.4e-3), 30, 1e-4, 0.01);
        let sorted = autocorrelation_from_visibility(&pts, LZ.0, LZ.1).unwrap();
        pts.reverse();
        let c = autocorrelation_from_visibility(&pts, LZ.0, LZ.1).unwrap();
        assert_eq!(c.values, sorted.values);
    }

    #[test]
    fn covariance_is_symmetric_positive_definite() {
        let pts = scan(delta_pair(0.4e-3), 30, 1e-4, 0.01);
        let c = autocorrelation_from_visibility(&pts, LZ.0, LZ.1).unwrap();
        let cov = c.covariance().unwrap();
        assert!((&cov - cov.transpose()).amax() < 1e-15 * cov.amax());
        assert!(cov.cholesky().is_some());
    }

    #[test]
    fn wide_beam_single_slit_is_a_triangle() {
        let w = 0.5e-3;
        let grid: Vec<f64> = (0..80).map(|k| k as f64 * 1e-5).collect();
        // d = w/2 makes the slits abut into one slit of width 2w
        let c = model_autocorrelation(1e3, 0.5 * w, w, &grid).unwrap();
        for (x, v) in grid.iter().zip(&c) {
            let want = (1.0 - x / (2.0 * w)).max(0.0);
            assert!((v - want).abs() < 2e-3, "δx {x}: {v} vs {want}");
        }
    }

    #[test]
    fn narrow_slits_approach_delta_pair() {
        let d = 1e-3;
        let grid: Vec<f64> = (0..400).map(|k| k as f64 * 1e-5).collect();
        let c = model_autocorrelation(1e3, d, 4e-5, &grid).unwrap();
        let side = c[200];
        assert!((side - 0.5).abs() < 1e-6, "{side}");
        assert!(c[100] < 1e-12 && c[300] < 1e-12);
    }

    #[test]
    fn gaussian_envelope_suppresses_side_peaks() {
        let grid: Vec<f64> = (0..200).map(|k| k as f64 * 1e-5).collect();
        let side = |sigma: f64| model_autocorrelation(sigma, 0.5e-3, 0.5e-3, &grid).unwrap()[100];
        assert!(side(1.7e-3) < 0.5);
        assert!(side(1.0e-3) < side(1.7e-3));
        assert!(side(1.7e-3) < side(5.0e-3));
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let grid = [0.0, 2e-4, 4e-4];
        assert!(model_autocorrelation(1.7e-3, 0.5e-3, 0.5e-3, &grid).is_err());
        assert!(model_autocorrelation(1.7e-3, 0.5e-3, -0.5e-3, &[0.0, 1e-5]).is_err());
    }

    fn synthetic(truth: FitParams, n: usize, step: f64) -> AutocorrCurve {
        let delta_x: Vec<f64> = (0..n).map(|k| k as f64 * step).collect();
        let values = model_autocorrelation(truth.sigma, truth.d, truth.w, &delta_x)
            .unwrap()
            .into_iter()
            .map(|c| truth.scale * c + truth.offset)
            .collect();
        AutocorrCurve::from_values(delta_x, values, LZ.1).unwrap()
    }

    const TRUTH: FitParams = FitParams {
        sigma: 1.784e-3,
        d: 1.006e-3,
        w: 0.476e-3,
        scale: 1.0,
        offset: 0.0,
    };

    #[test]
    fn noiseless_model_is_recovered() {
        let step = LZ.0 * LZ.1 / (121.0 * 1e-4);
        let curve = synthetic(TRUTH, 61, step);
        let guess = FitParams {
            sigma: 1.5e-3,
            d: 1.05e-3,
            w: 0.45e-3,
            ..FitParams::default()
        };
        let fit = fit_autocorrelation(&curve, &guess, &FitOptions::default()).unwrap();
        let p = fit.params;
        for (got, want) in [(p.sigma, TRUTH.sigma), (p.d, TRUTH.d), (p.w, TRUTH.w)] {
            assert!((got / want - 1.0).abs() < 1e-4, "{got} vs {want}");
        }
        assert!(fit.converged);
        assert!(!fit.weighted);
    }

    #[test]
    fn starts_thirty_percent_off_reach_the_same_optimum() {
        let step = LZ.0 * LZ.1 / (121.0 * 1e-4);
        let curve = synthetic(TRUTH, 61, step);
        for f in [0.7, 1.3] {
            for g in [0.7, 1.3] {
                let guess = FitParams {
                    sigma: TRUTH.sigma * f,
                    d: TRUTH.d * g,
                    w: TRUTH.w * f,
                    scale: 1.0,
                    offset: 0.0,
                };
                let p = fit_autocorrelation(&curve, &guess, &FitOptions::default()).unwrap().params;
                assert!((p.d / TRUTH.d - 1.0).abs() < 1e-4, "start ({f}, {g}): d {}", p.d);
                assert!((p.w / TRUTH.w - 1.0).abs() < 1e-4, "start ({f}, {g}): w {}", p.w);
                assert!((p.sigma / TRUTH.sigma - 1.0).abs() < 1e-4, "start ({f}, {g}): σ {}", p.sigma);
            }
        }
    }

    #[test]
    fn too_few_points_and_bad_guess_are_rejected() {
        let curve = synthetic(TRUTH, 20, 7e-5);
        assert!(matches!(
            fit_autocorrelation(&curve, &FitParams::default(), &FitOptions::default()),
            Err(Error::InsufficientData(_))
        ));
        let curve = synthetic(TRUTH, 61, 7e-5);
        let bad = FitParams {
            w: -1.0,
            ..FitParams::default()
        };
        assert!(fit_autocorrelation(&curve, &bad, &FitOptions::default()).is_err());
    }

    #[test]
    fn weighted_fit_reports_errors_and_writes_files() {
        let d = 0.5e-3;
        let source = crate::optics::SourceModel::default();
        let pts: Vec<VisibilityPoint> = (0..61)
            .map(|k| {
                let b = k as f64 * 1e-4;
                let j = crate::optics::coherence_vcz(&source, -b, 0.0).unwrap();
                let v = 0.244 * j.norm();
                VisibilityPoint {
                    baseline: b,
                    v: Complex64::new(v, 0.0),
                    std_error: 0.014,
                    n_events: 10_000,
                    v2_unbiased: v * v,
                }
            })
            .collect();
        let curve = autocorrelation_from_visibility(&pts, LZ.0, LZ.1).unwrap();
        let fit = fit_autocorrelation(&curve, &FitParams::default(), &FitOptions::default()).unwrap();
        assert!(fit.weighted);
        let err = fit.errors().unwrap();
        assert!((fit.params.d - d).abs() < 3.0 * err.d + 5e-6, "d {} ± {}", fit.params.d, err.d);
        assert!((fit.params.w - 0.5e-3).abs() < 3.0 * err.w + 1e-5, "w {} ± {}", fit.params.w, err.w);
        let cov = fit.covariance.unwrap();
        assert!((cov - cov.transpose()).amax() < 1e-12 * cov.amax());

        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("fit.json");
        write_fit_json(&json, &fit).unwrap();
        let back = read_fit_json(&json).unwrap();
        assert_eq!(back, FitReport::from(&fit));
        let csv_path = dir.path().join("autocorrelation.csv");
        write_autocorrelation_csv(&csv_path, &curve, LZ.1, Some(&fit)).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("delta_x_m,theta_arcmin,C,C_model"));
        assert_eq!(text.lines().count(), 1 + 2 * curve.len() - 1);
    }
}
