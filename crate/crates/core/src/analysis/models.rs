//! The fit models and their starting-point heuristics.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{fit, AnalysisError, FitParam, FitResult, Model, ModelSpec, ParamDef};

pub const MODEL_IDS: &[&str] = &[
    "multi-gaussian",
    "gaussians",
    "lorentzian-sum",
    "rabi",
    "monoexp",
    "biexp",
    "stretched-exp-cos",
    "sinc2",
    "power-law",
];

fn span(x: &[f64]) -> f64 {
    let (lo, hi) = min_max(x);
    (hi - lo).max(f64::MIN_POSITIVE)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Sorted copy of the (x, y) pairs.
fn sorted(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    (idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| y[i]).collect())
}

/// Least-squares coefficients of `y ≈ Σ c_k cols[k]`.
fn linear_lstsq(cols: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let a = DMatrix::from_fn(n, cols.len(), |i, k| cols[k][i]);
    let b = DVector::from_column_slice(y);
    match a.svd(true, true).solve(&b, 1e-12) {
        Ok(c) if c.iter().all(|v| v.is_finite()) => c.iter().copied().collect(),
        _ => vec![0.0; cols.len()],
    }
}

/// Frequency with the largest least-squares sinusoid power, scanned from
/// one cycle per record up to the mean-spacing Nyquist limit.
fn dominant_frequency(x: &[f64], y: &[f64]) -> f64 {
    let t = span(x);
    let n = x.len().max(2);
    let nyquist = 0.5 * (n - 1) as f64 / t;
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let steps = 8 * n;
    let mut best = (0.0, 1.0 / t);
    for k in 1..=steps {
        let f = (0.5 + (nyquist / (1.0 / t) - 0.5) * k as f64 / steps as f64) / t;
        let (mut c, mut s) = (0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let ph = 2.0 * PI * f * xi;
            c += (yi - mean) * ph.cos();
            s += (yi - mean) * ph.sin();
        }
        let p = c * c + s * s;
        if p > best.0 {
            best = (p, f);
        }
    }
    best.1
}

/// x positions splitting the weight `w` into `n` equal parts (midpoints).
fn quantile_centers(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        let (lo, hi) = min_max(x);
        return (0..n).map(|k| lo + (hi - lo) * (k as f64 + 0.5) / n as f64).collect();
    }
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut k = 0;
    for i in 0..x.len() {
        acc += w[i];
        while k < n && acc >= total * (k as f64 + 0.5) / n as f64 {
            out.push(x[i]);
            k += 1;
        }
    }
    while out.len() < n {
        out.push(*x.last().unwrap_or(&0.0));
    }
    out
}

fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

// ---------------------------------------------------------------- peaks

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineShape {
    /// `a exp(−ln2 (x−f)²/w²)`, `w` the HWHM.
    Gaussian,
    /// `a / (1 + (x−f)²/w²)`, `w` the HWHM.
    Lorentzian,
}

impl LineShape {
    fn eval(self, a: f64, f: f64, w: f64, x: f64) -> f64 {
        let u = (x - f) / w;
        match self {
            LineShape::Gaussian => a * (-std::f64::consts::LN_2 * u * u).exp(),
            LineShape::Lorentzian => a / (1.0 + u * u),
        }
    }
}

/// Sum of `n` lines. Parameters `a1..an, f1..fn`, then either one shared
/// half-width `lw` or per-line `w1..wn`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakSum {
    pub shape: LineShape,
    pub n: usize,
    pub shared_width: bool,
    /// Default value of the shared width; held fixed unless released.
    pub fixed_width: Option<f64>,
}

impl PeakSum {
    fn width(&self, p: &[f64], k: usize) -> f64 {
        if self.shared_width {
            p[2 * self.n]
        } else {
            p[2 * self.n + k]
        }
    }
}

impl Model for PeakSum {
    fn id(&self) -> String {
        match (self.shape, self.shared_width) {
            (LineShape::Gaussian, true) => "multi-gaussian",
            (LineShape::Gaussian, false) => "gaussians",
            (LineShape::Lorentzian, _) => "lorentzian-sum",
        }
        .to_string()
    }

    fn params(&self) -> Vec<ParamDef> {
        let mut v: Vec<ParamDef> = (1..=self.n).map(|k| ParamDef::unbounded(format!("a{k}"))).collect();
        v.extend((1..=self.n).map(|k| ParamDef::unbounded(format!("f{k}"))));
        if self.shared_width {
            v.push(ParamDef::new("lw", 0.0, f64::INFINITY));
        } else {
            v.extend((1..=self.n).map(|k| ParamDef::new(format!("w{k}"), 0.0, f64::INFINITY)));
        }
        v
    }

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        (0..self.n).map(|k| self.shape.eval(p[k], p[self.n + k], self.width(p, k), x)).sum()
    }

    fn default_fixed(&self) -> Vec<(String, f64)> {
        match (self.shared_width, self.fixed_width) {
            (true, Some(w)) => vec![("lw".to_string(), w)],
            _ => Vec::new(),
        }
    }

    fn guesses(&self, x: &[f64], y: &[f64], known: &[Option<f64>]) -> Vec<Vec<f64>> {
        let n = self.n;
        let (xs, ys) = sorted(x, y);
        let sign = if ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).abs()
            >= ys.iter().cloned().fold(f64::INFINITY, f64::min).abs()
        {
            1.0
        } else {
            -1.0
        };
        let w: Vec<f64> = ys.iter().map(|v| (sign * v).max(0.0)).collect();
        let wmax = w.iter().cloned().fold(0.0, f64::max);
        // support: where the signal exceeds a tenth of its maximum
        let support: Vec<f64> =
            xs.iter().zip(&w).filter(|(_, &w)| w > 0.1 * wmax).map(|(&x, _)| x).collect();
        let (s_lo, s_hi) = if support.is_empty() { min_max(&xs) } else { min_max(&support) };
        let dx = xs.windows(2).map(|p| p[1] - p[0]).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
        let dx = if dx.is_finite() { dx } else { span(&xs) };
        let width_guess = ((s_hi - s_lo) / (2.0 * n as f64)).max(dx);

        let mut center_sets = vec![quantile_centers(&xs, &w, n)];
        // local maxima of the signal, strongest first
        let mut peaks: Vec<(f64, f64)> = (1..xs.len().saturating_sub(1))
            .filter(|&i| w[i] > w[i - 1] && w[i] >= w[i + 1] && w[i] > 0.05 * wmax)
            .map(|i| (w[i], xs[i]))
            .collect();
        peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
        if peaks.len() >= n {
            let mut c: Vec<f64> = peaks[..n].iter().map(|p| p.1).collect();
            c.sort_by(f64::total_cmp);
            center_sets.push(c);
        }
        center_sets.push((0..n).map(|k| s_lo + (s_hi - s_lo) * (k as f64 + 0.5) / n as f64).collect());

        let mut widths = vec![width_guess];
        if n > 1 {
            widths.push(((s_hi - s_lo) / (4.0 * n as f64)).max(dx));
        }
        let mut out = Vec::new();
        for centers in &center_sets {
            for &wg in &widths {
                let mut p = vec![0.0; self.params().len()];
                for k in 0..n {
                    p[n + k] = known[n + k].unwrap_or(centers[k]);
                }
                if self.shared_width {
                    p[2 * n] = known[2 * n].unwrap_or(wg);
                } else {
                    for k in 0..n {
                        p[2 * n + k] = known[2 * n + k].unwrap_or(wg);
                    }
                }
                let cols: Vec<Vec<f64>> = (0..n)
                    .map(|k| xs.iter().map(|&x| self.shape.eval(1.0, p[n + k], self.width(&p, k), x)).collect())
                    .collect();
                let amps = linear_lstsq(&cols, &ys);
                for k in 0..n {
                    p[k] = known[k].unwrap_or(amps[k]);
                }
                out.push(p);
            }
        }
        out
    }

    fn scales(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let a = max_abs(y);
        let w = span(x) / (2.0 * self.n as f64);
        let mut s = vec![a; self.n];
        s.extend(vec![w; self.n]);
        s.extend(vec![w; if self.shared_width { 1 } else { self.n }]);
        s
    }

    fn canonicalize(&self, p: &mut [f64]) {
        let n = self.n;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| p[n + a].total_cmp(&p[n + b]));
        let old = p.to_vec();
        for (new, &k) in order.iter().enumerate() {
            p[new] = old[k];
            p[n + new] = old[n + k];
            if !self.shared_width {
                p[2 * n + new] = old[2 * n + k];
            }
        }
    }

    fn derived(&self, p: &[f64]) -> Vec<(String, f64)> {
        let n = self.n;
        let total: f64 = p[..n].iter().sum();
        if total != 0.0 {
            let c = (0..n).map(|k| p[k] * p[n + k]).sum::<f64>() / total;
            vec![("center".to_string(), c)]
        } else {
            Vec::new()
        }
    }
}

/// `n` Gaussians sharing the half-width `lw` (held fixed).
pub fn fit_multi_gaussian(x: &[f64], y: &[f64], n_lines: usize, lw: f64) -> Result<FitResult, AnalysisError> {
    let m = PeakSum { shape: LineShape::Gaussian, n: n_lines, shared_width: true, fixed_width: Some(lw) };
    fit(&m, x, y, &ModelSpec::new(&m.id()))
}

/// `n` Gaussians with independent widths.
pub fn fit_gaussians(x: &[f64], y: &[f64], n_lines: usize) -> Result<FitResult, AnalysisError> {
    let m = PeakSum { shape: LineShape::Gaussian, n: n_lines, shared_width: false, fixed_width: None };
    fit(&m, x, y, &ModelSpec::new(&m.id()))
}

/// `n` Lorentzians sharing the half-width `lw` (held fixed). The derived
/// `center` is the amplitude-weighted mean position.
pub fn fit_lorentzian_sum(x: &[f64], y: &[f64], n_lines: usize, lw: f64) -> Result<FitResult, AnalysisError> {
    let m = PeakSum { shape: LineShape::Lorentzian, n: n_lines, shared_width: true, fixed_width: Some(lw) };
    fit(&m, x, y, &ModelSpec::new(&m.id()))
}

// ---------------------------------------------------------------- Rabi

/// `1 − c/2 + c/2 cos(2πνt + φ)(a e^{−bt} + m e^{−nt})`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rabi;

impl Model for Rabi {
    fn id(&self) -> String {
        "rabi".into()
    }

    fn params(&self) -> Vec<ParamDef> {
        vec![
            ParamDef::new("c", 0.0, 2.0),
            ParamDef::positive("nu"),
            ParamDef::new("phi", -4.0 * PI, 4.0 * PI),
            ParamDef::positive("a"),
            ParamDef::positive("b"),
            ParamDef::positive("m"),
            ParamDef::positive("n"),
        ]
    }

    fn eval(&self, p: &[f64], t: f64) -> f64 {
        let env = p[3] * (-p[4] * t).exp() + p[5] * (-p[6] * t).exp();
        1.0 - p[0] / 2.0 + p[0] / 2.0 * (2.0 * PI * p[1] * t + p[2]).cos() * env
    }

    fn guesses(&self, x: &[f64], y: &[f64], known: &[Option<f64>]) -> Vec<Vec<f64>> {
        let t = span(x);
        let t0 = min_max(x).0;
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let c = known[0].unwrap_or((2.0 * (1.0 - mean)).clamp(1e-6, 2.0));
        let resid: Vec<f64> = y.iter().map(|v| v - (1.0 - c / 2.0)).collect();
        let nu = known[1].unwrap_or_else(|| dominant_frequency(x, &resid));
        let decay = 2.0 / t;
        let ex: Vec<f64> = x.iter().map(|&x| (-decay * (x - t0)).exp()).collect();
        let cols = vec![
            x.iter().zip(&ex).map(|(&x, e)| e * (2.0 * PI * nu * x).cos()).collect::<Vec<_>>(),
            x.iter().zip(&ex).map(|(&x, e)| e * (2.0 * PI * nu * x).sin()).collect::<Vec<_>>(),
        ];
        let ab = linear_lstsq(&cols, &resid);
        let amp = ab[0].hypot(ab[1]);
        let phi = known[2].unwrap_or((-ab[1]).atan2(ab[0]));
        let env = (amp / (c / 2.0) * (decay * t0).exp().min(1e3)).max(1e-3);
        let mut out = Vec::new();
        for (fa, rb, rn) in [(0.7, 0.5, 5.0), (0.5, 1.0, 10.0), (0.8, 0.2, 3.0), (0.3, 2.0, 20.0)] {
            out.push(vec![c, nu, phi, fa * env, rb / t, (1.0 - fa) * env, rn / t]);
        }
        out
    }

    fn scales(&self, x: &[f64], _y: &[f64]) -> Vec<f64> {
        let t = span(x);
        vec![0.1, 1.0 / t, 1.0, 1.0, 1.0 / t, 1.0, 1.0 / t]
    }

    fn canonicalize(&self, p: &mut [f64]) {
        p[2] = wrap_phase(p[2]);
        if p[6] < p[4] {
            p.swap(3, 5);
            p.swap(4, 6);
        }
    }
}

pub fn fit_rabi(x: &[f64], y: &[f64]) -> Result<FitResult, AnalysisError> {
    fit(&Rabi, x, y, &ModelSpec::new("rabi"))
}

// --------------------------------------------------------- exponentials

/// Log-linear estimate `(a, T)` of `a e^{−x/T}` from the points carrying
/// the dominant sign.
fn loglinear(x: &[f64], y: &[f64]) -> (f64, f64) {
    let sign = if y.iter().sum::<f64>() >= 0.0 { 1.0 } else { -1.0 };
    let peak = max_abs(y);
    let pts: Vec<(f64, f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, &v)| sign * v > 1e-3 * peak)
        .map(|(&x, &v)| (x, (sign * v).ln(), v * v))
        .collect();
    if pts.len() < 2 || peak == 0.0 {
        return (sign * peak, span(x) / 2.0);
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let tau = if slope < 0.0 { -1.0 / slope } else { span(x) };
    (sign * (my - slope * mx).exp(), tau.min(100.0 * span(x)))
}

/// `a e^{−x/t1}`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MonoExp;

impl Model for MonoExp {
    fn id(&self) -> String {
        "monoexp".into()
    }

    fn params(&self) -> Vec<ParamDef> {
        vec![ParamDef::unbounded("a"), ParamDef::new("t1", 0.0, f64::INFINITY)]
    }

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        p[0] * (-x / p[1]).exp()
    }

    fn guesses(&self, x: &[f64], y: &[f64], known: &[Option<f64>]) -> Vec<Vec<f64>> {
        let (_, t) = loglinear(x, y);
        let t = known[1].unwrap_or(t);
        let col: Vec<f64> = x.iter().map(|&x| (-x / t).exp()).collect();
        let a = known[0].unwrap_or_else(|| linear_lstsq(&[col], y)[0]);
        vec![vec![a, t], vec![a, 0.3 * span(x)], vec![a, 3.0 * span(x)]]
    }

    fn scales(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![max_abs(y), span(x)]
    }
}

pub fn fit_monoexp(x: &[f64], y: &[f64]) -> Result<FitResult, AnalysisError> {
    fit(&MonoExp, x, y, &ModelSpec::new("monoexp"))
}

/// `a e^{−x/ta} + b e^{−x/tb}` with `ta ≤ tb`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BiExp;

impl Model for BiExp {
    fn id(&self) -> String {
        "biexp".into()
    }

    fn params(&self) -> Vec<ParamDef> {
        vec![
            ParamDef::unbounded("a"),
            ParamDef::new("ta", 0.0, f64::INFINITY),
            ParamDef::unbounded("b"),
            ParamDef::new("tb", 0.0, f64::INFINITY),
        ]
    }

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        p[0] * (-x / p[1]).exp() + p[2] * (-x / p[3]).exp()
    }

    fn guesses(&self, x: &[f64], y: &[f64], known: &[Option<f64>]) -> Vec<Vec<f64>> {
        let (_, t) = loglinear(x, y);
        let mut out = Vec::new();
        for fa in [0.1, 0.25, 0.5] {
            for fb in [1.5, 3.0, 6.0] {
                let ta = known[1].unwrap_or(fa * t);
                let tb = known[3].unwrap_or(fb * t);
                let cols = vec![
                    x.iter().map(|&x| (-x / ta).exp()).collect::<Vec<_>>(),
                    x.iter().map(|&x| (-x / tb).exp()).collect::<Vec<_>>(),
                ];
                let c = linear_lstsq(&cols, y);
                out.push(vec![known[0].unwrap_or(c[0]), ta, known[2].unwrap_or(c[1]), tb]);
            }
        }
        out
    }

    fn scales(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let a = max_abs(y);
        vec![a, span(x), a, span(x)]
    }

    fn canonicalize(&self, p: &mut [f64]) {
        if p[3] < p[1] {
            p.swap(0, 2);
            p.swap(1, 3);
        }
    }
}

pub fn fit_biexp(x: &[f64], y: &[f64]) -> Result<FitResult, AnalysisError> {
    fit(&BiExp, x, y, &ModelSpec::new("biexp"))
}

/// `a exp(−(k x/t2)^c) + b e^{−d x} cos(2π f x)`.
///
/// `k` converts the sweep axis to the total free-evolution time (2 for an
/// echo swept in τ, 1 when swept in 2τ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StretchedExpCos {
    pub k: f64,
}

impl Default for StretchedExpCos {
    fn default() -> Self {
        Self { k: 2.0 }
    }
}

impl Model for StretchedExpCos {
    fn id(&self) -> String {
        "stretched-exp-cos".into()
    }

    fn params(&self) -> Vec<ParamDef> {
        vec![
            ParamDef::unbounded("a"),
            ParamDef::new("t2", 0.0, f64::INFINITY),
            ParamDef::new("c", 0.1, 10.0),
            ParamDef::unbounded("b"),
            ParamDef::positive("d"),
            ParamDef::positive("f"),
        ]
    }

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        p[0] * (-(self.k * x / p[1]).abs().powf(p[2])).exp()
            + p[3] * (-p[4] * x).exp() * (2.0 * PI * p[5] * x).cos()
    }

    fn guesses(&self, x: &[f64], y: &[f64], known: &[Option<f64>]) -> Vec<Vec<f64>> {
        let t = span(x);
        let (xs, ys) = sorted(x, y);
        // decay alone, from the 1/e crossing of a smoothed trace
        let a0 = known[0].unwrap_or(ys[0]);
        let x_e = xs
            .iter()
            .zip(&ys)
            .find(|(_, &v)| v.abs() < a0.abs() / std::f64::consts::E)
            .map(|(&x, _)| x)
            .unwrap_or(t / 2.0);
        let t2 = known[1].unwrap_or((self.k * x_e).max(f64::MIN_POSITIVE));
        let mut out = Vec::new();
        for c in [1.0, 1.5, 2.0] {
            let c = known[2].unwrap_or(c);
            let decay: Vec<f64> = xs.iter().map(|&x| (-(self.k * x / t2).powf(c)).exp()).collect();
            let a = known[0].unwrap_or_else(|| linear_lstsq(std::slice::from_ref(&decay), &ys)[0]);
            let resid: Vec<f64> = ys.iter().zip(&decay).map(|(v, d)| v - a * d).collect();
            let f = known[5].unwrap_or_else(|| dominant_frequency(&xs, &resid));
            for rate in [2.0 / t, 8.0 / t] {
                let d = known[4].unwrap_or(rate);
                let col: Vec<f64> = xs.iter().map(|&x| (-d * x).exp() * (2.0 * PI * f * x).cos()).collect();
                let b = known[3].unwrap_or_else(|| linear_lstsq(&[col], &resid)[0]);
                out.push(vec![a, t2, c, b, d, f]);
            }
        }
        out
    }

    fn scales(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let t = span(x);
        let a = max_abs(y);
        vec![a, t, 0.1, a, 1.0 / t, 1.0 / t]
    }
}

/// Stretched exponential plus damped cosine on an echo swept in τ
/// (total evolution time 2τ).
pub fn fit_stretched_exp_cos(x: &[f64], y: &[f64]) -> Result<FitResult, AnalysisError> {
    let m = StretchedExpCos::default();
    fit(&m, x, y, &ModelSpec::new(&m.id()))
}

// ---------------------------------------------------------------- sinc²

/// `a/2 · sinc²(2π τ N (ν − ν₀))`. Only the product τN is identifiable, so
/// `tau` is held fixed at the value given here by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinc2 {
    pub tau: f64,
}

impl Model for Sinc2 {
    fn id(&self) -> String {
        "sinc2".into()
    }

    fn params(&self) -> Vec<ParamDef> {
        vec![
            ParamDef::unbounded("a"),
            ParamDef::new("tau", 0.0, f64::INFINITY),
            ParamDef::new("n", 0.0, f64::INFINITY),
            ParamDef::unbounded("nu0"),
        ]
    }

    fn eval(&self, p: &[f64], nu: f64) -> f64 {
        let u = 2.0 * PI * p[1] * p[2] * (nu - p[3]);
        let s = if u.abs() < 1e-8 { 1.0 - u * u / 6.0 } else { u.sin() / u };
        p[0] / 2.0 * s * s
    }

    fn default_fixed(&self) -> Vec<(String, f64)> {
        vec![("tau".to_string(), self.tau)]
    }

    fn guesses(&self, x: &[f64], y: &[f64], known: &[Option<f64>]) -> Vec<Vec<f64>> {
        let (xs, ys) = sorted(x, y);
        let (lo, hi) = min_max(&ys);
        let sign = if hi.abs() >= lo.abs() { 1.0 } else { -1.0 };
        let i0 = (0..ys.len()).max_by(|&a, &b| (sign * ys[a]).total_cmp(&(sign * ys[b]))).unwrap_or(0);
        let peak = sign * ys[i0];
        let nu0 = known[3].unwrap_or(xs[i0]);
        let half = |dir: isize| {
            let mut i = i0 as isize;
            while i >= 0 && (i as usize) < xs.len() && sign * ys[i as usize] > peak / 2.0 {
                i += dir;
            }
            let i = i.clamp(0, xs.len() as isize - 1) as usize;
            (xs[i] - xs[i0]).abs()
        };
        let hw = (0.5 * (half(1) + half(-1))).max(span(&xs) / xs.len() as f64);
        let tau = known[1].unwrap_or(self.tau);
        // sinc²(u) = ½ at u = 1.39156
        let n0 = known[2].unwrap_or(1.39156 / (2.0 * PI * tau * hw));
        let a = known[0].unwrap_or(2.0 * sign * peak);
        [0.5, 1.0, 2.0].iter().map(|s| vec![a, tau, n0 * s, nu0]).collect()
    }

    fn scales(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![max_abs(y), self.tau, 1.0, span(x) / 10.0]
    }
}

pub fn fit_sinc2(x: &[f64], y: &[f64], tau: f64) -> Result<FitResult, AnalysisError> {
    let m = Sinc2 { tau };
    fit(&m, x, y, &ModelSpec::new("sinc2"))
}

// ------------------------------------------------------------ power law

/// `y = a x^s` by linear regression of `ln y` on `ln x`. Uncertainties are
/// the regression standard errors (for `a`, propagated from `ln a`).
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<FitResult, AnalysisError> {
    super::check_data(x, y)?;
    if x.len() < 4 {
        return Err(AnalysisError::InsufficientData { needed: 4, free: 2, got: x.len() });
    }
    if let Some(i) = (0..x.len()).find(|&i| !(x[i] > 0.0 && y[i] > 0.0)) {
        return Err(AnalysisError::Invalid(format!("power-law fit needs positive data (index {i})")));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(AnalysisError::Invalid("power-law fit needs at least two distinct x".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let s = sxy / sxx;
    let ln_a = my - s * mx;
    let ssr_log: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - ln_a - s * a).powi(2)).sum();
    let s2 = ssr_log / (n - 2.0);
    let var_s = s2 / sxx;
    let var_ln_a = s2 * (1.0 / n + mx * mx / sxx);
    let cov_ln_a_s = -s2 * mx / sxx;
    let a = ln_a.exp();
    let covariance = DMatrix::from_row_slice(2, 2, &[a * a * var_ln_a, a * cov_ln_a_s, a * cov_ln_a_s, var_s]);
    let ssr: f64 = x.iter().zip(y).map(|(&x, &y)| (y - a * x.powf(s)).powi(2)).sum();
    let my_lin = y.iter().sum::<f64>() / n;
    let sst: f64 = y.iter().map(|v| (v - my_lin).powi(2)).sum();
    Ok(FitResult {
        model: "power-law".into(),
        params: vec![
            FitParam { name: "a".into(), value: a, stderr: covariance[(0, 0)].sqrt(), fixed: false },
            FitParam { name: "s".into(), value: s, stderr: var_s.sqrt(), fixed: false },
        ],
        residual_norm: ssr.sqrt(),
        r_squared: if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 },
        converged: true,
        iterations: 1,
        covariance,
        derived: Vec::new(),
        warnings: Vec::new(),
    })
}

// ------------------------------------------------------------- registry

/// Builds a model from its id. `lines` sets the component count of the
/// peak models; `fixed` supplies values the model needs at construction
/// (`lw` for the shared-width peak sums, `tau` for `sinc2`). Returns `None`
/// for `power-law`, which is fitted in closed form by [`fit_power_law`].
pub fn model_by_id(
    id: &str,
    lines: usize,
    fixed: &std::collections::BTreeMap<String, f64>,
) -> Result<Option<Box<dyn Model>>, AnalysisError> {
    let need = |name: &str| {
        fixed
            .get(name)
            .copied()
            .ok_or_else(|| AnalysisError::Invalid(format!("model `{id}` needs a fixed `{name}`")))
    };
    let lines = lines.max(1);
    Ok(Some(match id {
        "multi-gaussian" => Box::new(PeakSum {
            shape: LineShape::Gaussian,
            n: lines,
            shared_width: true,
            fixed_width: Some(fixed.get("lw").copied().unwrap_or(22e6)),
        }),
        "gaussians" => Box::new(PeakSum { shape: LineShape::Gaussian, n: lines, shared_width: false, fixed_width: None }),
        "lorentzian-sum" => Box::new(PeakSum {
            shape: LineShape::Lorentzian,
            n: lines,
            shared_width: true,
            fixed_width: Some(need("lw")?),
        }),
        "rabi" => Box::new(Rabi),
        "monoexp" => Box::new(MonoExp),
        "biexp" => Box::new(BiExp),
        "stretched-exp-cos" => Box::new(StretchedExpCos::default()),
        "sinc2" => Box::new(Sinc2 { tau: need("tau")? }),
        "power-law" => return Ok(None),
        other => return Err(AnalysisError::UnknownModel(other.to_string())),
    }))
}
