//! Curve fitting: a bounded Levenberg–Marquardt driver, the model zoo used
//! for sweep data, baseline removal and FFT peak estimation.
//!
//! Every fit returns a [`FitResult`]; a fit that fails to converge is
//! reported through `converged = false`, never by panicking.

mod lm;
mod models;
mod spectral;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rayon::prelude::*;

pub use models::{
    fit_biexp, fit_gaussians, fit_lorentzian_sum, fit_monoexp, fit_multi_gaussian, fit_power_law, fit_rabi,
    fit_sinc2, fit_stretched_exp_cos, model_by_id, BiExp, LineShape, MonoExp, PeakSum, Rabi, Sinc2,
    StretchedExpCos, MODEL_IDS,
};
pub use spectral::{baseline_subtract, fft_peak, power_spectrum, Baseline, FftPeak, Spectrum, Window};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("need at least {needed} data points for {free} free parameters, got {got}")]
    InsufficientData { needed: usize, free: usize, got: usize },
    #[error("x and y lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite data at index {0}")]
    NonFinite(usize),
    #[error("model `{model}` has no parameter `{name}`")]
    UnknownParameter { model: String, name: String },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("parameter `{0}` is both fixed and free")]
    FixedAndFree(String),
    #[error("invalid bounds for `{name}`: [{lower}, {upper}]")]
    InvalidBounds { name: String, lower: f64, upper: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("no peak away from zero frequency")]
    NoPeak,
}

/// One parameter of a model: name and default bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl ParamDef {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Self { name: name.into(), lower, upper }
    }

    pub fn unbounded(name: impl Into<String>) -> Self {
        Self::new(name, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn positive(name: impl Into<String>) -> Self {
        Self::new(name, 0.0, f64::INFINITY)
    }
}

/// A fit model `y = f(p, x)`.
pub trait Model: Sync {
    fn id(&self) -> String;
    fn params(&self) -> Vec<ParamDef>;
    fn eval(&self, p: &[f64], x: f64) -> f64;

    /// Parameters held fixed unless the caller frees them.
    fn default_fixed(&self) -> Vec<(String, f64)> {
        Vec::new()
    }

    /// Starting points. `known[j]` carries fixed or user-supplied values,
    /// which the guesses should honour when they inform other parameters.
    fn guesses(&self, x: &[f64], y: &[f64], known: &[Option<f64>]) -> Vec<Vec<f64>>;

    /// Typical size of each parameter's variation.
    fn scales(&self, x: &[f64], y: &[f64]) -> Vec<f64>;

    /// Maps a solution to its canonical representative (component order,
    /// phase wrapping). Must leave the model curve unchanged.
    fn canonicalize(&self, _p: &mut [f64]) {}

    /// Quantities computed from the fitted parameters.
    fn derived(&self, _p: &[f64]) -> Vec<(String, f64)> {
        Vec::new()
    }
}

/// What to fit and how: fixed values, starting values, bounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelSpec {
    pub model: String,
    pub fixed: BTreeMap<String, f64>,
    /// Parameters the model fixes by default that should be fitted.
    pub free: BTreeSet<String>,
    pub initial: BTreeMap<String, f64>,
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub max_iter: usize,
}

impl ModelSpec {
    pub fn new(model: &str) -> Self {
        Self { model: model.to_string(), max_iter: 500, ..Default::default() }
    }

    pub fn fix(mut self, name: &str, value: f64) -> Self {
        self.fixed.insert(name.to_string(), value);
        self
    }

    pub fn release(mut self, name: &str) -> Self {
        self.free.insert(name.to_string());
        self
    }

    pub fn start(mut self, name: &str, value: f64) -> Self {
        self.initial.insert(name.to_string(), value);
        self
    }

    pub fn bound(mut self, name: &str, lower: f64, upper: f64) -> Self {
        self.bounds.insert(name.to_string(), (lower, upper));
        self
    }

    pub fn validate(&self, names: &[String]) -> Result<(), AnalysisError> {
        let known = |name: &String| {
            if names.contains(name) {
                Ok(())
            } else {
                Err(AnalysisError::UnknownParameter { model: self.model.clone(), name: name.clone() })
            }
        };
        for name in self.fixed.keys().chain(&self.free).chain(self.initial.keys()).chain(self.bounds.keys()) {
            known(name)?;
        }
        if let Some(name) = self.fixed.keys().find(|n| self.free.contains(*n)) {
            return Err(AnalysisError::FixedAndFree(name.clone()));
        }
        for (name, &(lower, upper)) in &self.bounds {
            if lower.is_nan() || upper.is_nan() || lower >= upper {
                return Err(AnalysisError::InvalidBounds { name: name.clone(), lower, upper });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    /// 1σ uncertainty (zero for fixed parameters).
    pub stderr: f64,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: String,
    pub params: Vec<FitParam>,
    /// sqrt of the residual sum of squares.
    pub residual_norm: f64,
    pub r_squared: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Full parameter covariance (rows/columns of fixed parameters are zero),
    /// scaled by the reduced χ².
    pub covariance: DMatrix<f64>,
    pub derived: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<&FitParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.param(name).map(|p| p.value).or_else(|| self.derived_value(name))
    }

    pub fn stderr(&self, name: &str) -> Option<f64> {
        self.param(name).map(|p| p.stderr)
    }

    pub fn derived_value(&self, name: &str) -> Option<f64> {
        self.derived.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    /// Flat `key=value` pairs, all keys prefixed with `fit.`.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("fit.model".to_string(), self.model.clone()),
            ("fit.converged".to_string(), self.converged.to_string()),
            ("fit.iterations".to_string(), self.iterations.to_string()),
            ("fit.residual_norm".to_string(), format!("{:e}", self.residual_norm)),
            ("fit.r_squared".to_string(), format!("{:e}", self.r_squared)),
        ];
        for p in &self.params {
            kv.push((format!("fit.param.{}", p.name), format!("{:e}", p.value)));
            kv.push((format!("fit.stderr.{}", p.name), format!("{:e}", p.stderr)));
            if p.fixed {
                kv.push((format!("fit.fixed.{}", p.name), "true".to_string()));
            }
        }
        for (name, v) in &self.derived {
            kv.push((format!("fit.derived.{name}"), format!("{v:e}")));
        }
        let cov: Vec<String> = self.covariance.transpose().iter().map(|v| format!("{v:e}")).collect();
        kv.push(("fit.covariance".to_string(), cov.join(" ")));
        for (k, w) in self.warnings.iter().enumerate() {
            kv.push((format!("fit.warning.{k}"), w.replace('\n', " ")));
        }
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Inverse of [`FitResult::to_kv`]; keys without the `fit.` prefix are
    /// ignored so a whole CSV metadata block can be passed in.
    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, AnalysisError> {
        let bad = |k: &str| AnalysisError::Invalid(format!("bad fit entry `{k}`"));
        let num = |k: &str, v: &str| v.trim().parse::<f64>().map_err(|_| bad(k));
        let mut out = FitResult {
            model: String::new(),
            params: Vec::new(),
            residual_norm: f64::NAN,
            r_squared: f64::NAN,
            converged: false,
            iterations: 0,
            covariance: DMatrix::zeros(0, 0),
            derived: Vec::new(),
            warnings: Vec::new(),
        };
        let mut cov = Vec::new();
        for (k, v) in pairs {
            let Some(key) = k.strip_prefix("fit.") else { continue };
            match key {
                "model" => out.model = v.to_string(),
                "converged" => out.converged = v.trim().parse().map_err(|_| bad(k))?,
                "iterations" => out.iterations = v.trim().parse().map_err(|_| bad(k))?,
                "residual_norm" => out.residual_norm = num(k, v)?,
                "r_squared" => out.r_squared = num(k, v)?,
                "covariance" => {
                    cov = v.split_whitespace().map(|t| num(k, t)).collect::<Result<_, _>>()?;
                }
                _ => {
                    let (kind, name) = key.split_once('.').ok_or_else(|| bad(k))?;
                    match kind {
                        "param" => out.params.push(FitParam {
                            name: name.to_string(),
                            value: num(k, v)?,
                            stderr: 0.0,
                            fixed: false,
                        }),
                        "stderr" => {
                            let p = out.params.iter_mut().find(|p| p.name == name).ok_or_else(|| bad(k))?;
                            p.stderr = num(k, v)?;
                        }
                        "fixed" => {
                            let p = out.params.iter_mut().find(|p| p.name == name).ok_or_else(|| bad(k))?;
                            p.fixed = v.trim() == "true";
                        }
                        "derived" => out.derived.push((name.to_string(), num(k, v)?)),
                        "warning" => out.warnings.push(v.to_string()),
                        _ => return Err(bad(k)),
                    }
                }
            }
        }
        let n = out.params.len();
        if cov.len() != n * n {
            return Err(AnalysisError::Invalid(format!("covariance has {} entries for {n} parameters", cov.len())));
        }
        out.covariance = DMatrix::from_row_slice(n, n, &cov);
        Ok(out)
    }
}

/// Model evaluated at every `x`.
pub fn evaluate(model: &dyn Model, p: &[f64], x: &[f64]) -> Vec<f64> {
    x.iter().map(|&x| model.eval(p, x)).collect()
}

fn check_data(x: &[f64], y: &[f64]) -> Result<(), AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if let Some(i) = (0..x.len()).find(|&i| !x[i].is_finite() || !y[i].is_finite()) {
        return Err(AnalysisError::NonFinite(i));
    }
    Ok(())
}

/// Fits `model` to `(x, y)`.
///
/// Every starting point from [`Model::guesses`] (with fixed and initial
/// values applied) is refined; the lowest residual wins. Uncertainties come
/// from the pseudo-inverse of `JᵀJ` scaled by the reduced χ².
pub fn fit(model: &dyn Model, x: &[f64], y: &[f64], spec: &ModelSpec) -> Result<FitResult, AnalysisError> {
    check_data(x, y)?;
    let defs = model.params();
    let names: Vec<String> = defs.iter().map(|d| d.name.clone()).collect();
    spec.validate(&names)?;
    let np = defs.len();
    let index = |name: &str| names.iter().position(|n| n == name).expect("validated name");

    let mut fixed: Vec<Option<f64>> = vec![None; np];
    for (name, v) in model.default_fixed() {
        if !spec.free.contains(&name) {
            fixed[index(&name)] = Some(v);
        }
    }
    for (name, &v) in &spec.fixed {
        fixed[index(name)] = Some(v);
    }
    let n_free = fixed.iter().filter(|f| f.is_none()).count();
    if x.len() < 2 * n_free || x.is_empty() {
        return Err(AnalysisError::InsufficientData { needed: (2 * n_free).max(1), free: n_free, got: x.len() });
    }

    let mut lower: Vec<f64> = defs.iter().map(|d| d.lower).collect();
    let mut upper: Vec<f64> = defs.iter().map(|d| d.upper).collect();
    for (name, &(lo, hi)) in &spec.bounds {
        let j = index(name);
        lower[j] = lo;
        upper[j] = hi;
    }
    let mut known = fixed.clone();
    for (name, &v) in &spec.initial {
        let j = index(name);
        if known[j].is_none() {
            known[j] = Some(v);
        }
    }
    let starts: Vec<Vec<f64>> = model
        .guesses(x, y, &known)
        .into_iter()
        .map(|mut g| {
            for j in 0..np {
                if let Some(v) = known[j] {
                    g[j] = v;
                }
                if fixed[j].is_none() {
                    g[j] = g[j].clamp(lower[j], upper[j]);
                }
            }
            g
        })
        .collect();
    // fixed values may sit outside the default bounds; honour them exactly
    for j in 0..np {
        if let Some(v) = fixed[j] {
            lower[j] = lower[j].min(v);
            upper[j] = upper[j].max(v);
        }
    }

    let scale: Vec<f64> = model
        .scales(x, y)
        .into_iter()
        .map(|s| if s.is_finite() && s > 0.0 { s } else { 1.0 })
        .collect();
    let f = |p: &[f64], x: f64| model.eval(p, x);
    let problem = lm::Problem {
        f: &f,
        x,
        y,
        free: fixed.iter().map(|f| f.is_none()).collect(),
        lower,
        upper,
        scale: scale.clone(),
        max_iter: if spec.max_iter == 0 { 500 } else { spec.max_iter },
    };
    let outcomes: Vec<lm::Outcome> = starts.par_iter().map(|s| problem.solve(s)).collect();
    let best = outcomes
        .into_iter()
        .filter(|o| o.ssr.is_finite())
        .min_by(|a, b| a.ssr.total_cmp(&b.ssr))
        .unwrap_or(lm::Outcome {
            p: starts.first().cloned().unwrap_or_else(|| vec![0.0; np]),
            ssr: f64::NAN,
            converged: false,
            iterations: 0,
        });

    let mut p = best.p;
    model.canonicalize(&mut p);
    let ssr: f64 = x.iter().zip(y).map(|(&x, &y)| (y - model.eval(&p, x)).powi(2)).sum();
    let free_idx: Vec<usize> = (0..np).filter(|&j| fixed[j].is_none()).collect();
    let dof = x.len() - n_free;
    let s2 = if dof > 0 { ssr / dof as f64 } else { 0.0 };
    let mut covariance = DMatrix::zeros(np, np);
    let mut warnings = Vec::new();
    if !free_idx.is_empty() && ssr.is_finite() {
        let info = problem.information(&p);
        match info.clone().pseudo_inverse(1e-12 * info.amax().max(f64::MIN_POSITIVE)) {
            Ok(inv) => {
                for (a, &i) in free_idx.iter().enumerate() {
                    for (b, &j) in free_idx.iter().enumerate() {
                        covariance[(i, j)] = inv[(a, b)] * scale[i] * scale[j] * s2;
                    }
                }
            }
            Err(_) => warnings.push("covariance unavailable".to_string()),
        }
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if sst > 0.0 {
        1.0 - ssr / sst
    } else if ssr == 0.0 {
        1.0
    } else {
        0.0
    };
    let converged = best.converged && ssr.is_finite() && p.iter().all(|v| v.is_finite());
    if !converged {
        warnings.push("optimizer did not converge".to_string());
    }
    let params = (0..np)
        .map(|j| FitParam {
            name: names[j].clone(),
            value: p[j],
            stderr: covariance[(j, j)].max(0.0).sqrt(),
            fixed: fixed[j].is_some(),
        })
        .collect();
    Ok(FitResult {
        model: model.id(),
        params,
        residual_norm: ssr.sqrt(),
        r_squared,
        converged,
        iterations: best.iterations,
        covariance,
        derived: model.derived(&p),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Line;

    impl Model for Line {
        fn id(&self) -> String {
            "line".into()
        }
        fn params(&self) -> Vec<ParamDef> {
            vec![ParamDef::unbounded("a"), ParamDef::unbounded("b")]
        }
        fn eval(&self, p: &[f64], x: f64) -> f64 {
            p[0] + p[1] * x
        }
        fn guesses(&self, _: &[f64], _: &[f64], _: &[Option<f64>]) -> Vec<Vec<f64>> {
            vec![vec![0.0, 0.0]]
        }
        fn scales(&self, _: &[f64], _: &[f64]) -> Vec<f64> {
            vec![1.0, 1.0]
        }
    }

    #[test]
    fn line_fit_matches_ordinary_least_squares() {
        let x: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let noise = [0.1, -0.2, 0.05, 0.0, 0.3, -0.1, -0.25, 0.15, 0.02, -0.07];
        let y: Vec<f64> = x.iter().zip(noise).map(|(x, e)| 1.0 + 2.0 * x + e).collect();
        let r = fit(&Line, &x, &y, &ModelSpec::new("line")).unwrap();
        // closed form
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(x, y)| (x - mx) * (y - my)).sum();
        let b = sxy / sxx;
        let a = my - b * mx;
        assert!((r.value("a").unwrap() - a).abs() < 1e-9);
        assert!((r.value("b").unwrap() - b).abs() < 1e-9);
        let s2 = r.residual_norm.powi(2) / (n - 2.0);
        assert!((r.stderr("b").unwrap() - (s2 / sxx).sqrt()).abs() < 1e-6 * (s2 / sxx).sqrt());
    }

    #[test]
    fn spec_rejects_unknown_and_conflicting_names() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let err = fit(&Line, &x, &x, &ModelSpec::new("line").fix("c", 1.0)).unwrap_err();
        assert!(matches!(err, AnalysisError::UnknownParameter { .. }));
        let err = fit(&Line, &x, &x, &ModelSpec::new("line").fix("a", 1.0).release("a")).unwrap_err();
        assert_eq!(err, AnalysisError::FixedAndFree("a".into()));
    }

    #[test]
    fn too_few_points_is_an_error() {
        let x = [0.0, 1.0, 2.0];
        let err = fit(&Line, &x, &x, &ModelSpec::new("line")).unwrap_err();
        assert!(matches!(err, AnalysisError::InsufficientData { needed: 4, .. }));
        assert!(fit(&Line, &x, &x, &ModelSpec::new("line").fix("a", 0.0)).is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let x: Vec<f64> = (0..8).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| 0.5 - 0.25 * x + 0.01 * (x * 7.0).sin()).collect();
        let r = fit(&Line, &x, &y, &ModelSpec::new("line").fix("a", 0.5)).unwrap();
        let kv = r.to_kv();
        let back = FitResult::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back.model, r.model);
        assert_eq!(back.params.len(), 2);
        assert!(back.params[0].fixed);
        for (a, b) in back.params.iter().zip(&r.params) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.stderr, b.stderr);
        }
        assert_eq!(back.covariance, r.covariance);
    }
}
