#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Batch front end of the simulator: configuration files, protocol
//! planning, CSV/SVG output and offline fitting.

pub mod config;
pub mod plot;
pub mod protocols;

use std::collections::BTreeMap;

use spinlab::analysis::{baseline_subtract, FitResult};
use spinlab::engine::SweepResult;

use protocols::{BaselineKind, FitPlan};

/// Options of `spinlab fit`. Unset options are taken from the `fit.opt.*`
/// metadata that `spinlab run` writes when the CSV was fitted with the
/// same model.
#[derive(Debug, Clone, Default)]
pub struct FitRequest {
    pub model: String,
    pub lines: Option<usize>,
    pub fixed: BTreeMap<String, f64>,
    pub release: Vec<String>,
    pub lw: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<f64>,
    /// Fraction of the axis at each end used for a linear baseline. When
    /// absent, a baseline recorded in the CSV is subtracted.
    pub baseline_edges: Option<f64>,
    /// Axis interval to fit.
    pub range: Option<(f64, f64)>,
}

fn meta_f64(r: &SweepResult, key: &str) -> Result<Option<f64>, String> {
    r.meta_value(key)
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("metadata `{key}`: `{v}` is not a number")))
        .transpose()
}

/// Parses `lo,hi`.
pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("`{}` is not a number", lo.trim()))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("`{}` is not a number", hi.trim()))?;
    if !(hi > lo) {
        return Err(format!("range `{s}` is empty"));
    }
    Ok((lo, hi))
}

/// Parses `name=value[,name=value...]`.
pub fn parse_assignments(s: &str) -> Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| format!("expected name=value, got `{item}`"))?;
        let v: f64 = v.trim().parse().map_err(|_| format!("`{}` is not a number", v.trim()))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

/// Fills unset options from the CSV's recorded fit of the same model.
fn with_recorded(req: &FitRequest, r: &SweepResult) -> Result<FitRequest, String> {
    let mut req = req.clone();
    if r.meta_value("fit.model") != Some(req.model.as_str()) {
        return Ok(req);
    }
    if req.lines.is_none() {
        req.lines = r.meta_value("fit.opt.lines").map(|v| v.parse().map_err(|_| format!("metadata `fit.opt.lines`: `{v}`"))).transpose()?;
    }
    if req.fixed.is_empty() {
        req.fixed = parse_assignments(r.meta_value("fit.opt.fix").unwrap_or(""))?;
    }
    if req.release.is_empty() {
        req.release = r.meta_value("fit.opt.release").map(|v| v.split(',').map(|s| s.trim().to_string()).collect()).unwrap_or_default();
    }
    req.lw = req.lw.or(meta_f64(r, "fit.opt.lw")?);
    req.tau = req.tau.or(meta_f64(r, "fit.opt.tau")?);
    req.k = req.k.or(meta_f64(r, "fit.opt.k")?);
    if req.range.is_none() {
        req.range = r.meta_value("fit.opt.range").map(parse_range).transpose()?;
    }
    Ok(req)
}

/// Fits the curve stored in a result CSV.
pub fn fit_csv(text: &str, req: &FitRequest) -> Result<FitResult, String> {
    let r = SweepResult::from_csv(text).map_err(|e| e.to_string())?;
    if r.is_empty() {
        return Err("CSV has no data rows".into());
    }
    let req = with_recorded(req, &r)?;
    let tau = req.tau.map_or_else(|| meta_f64(&r, "tau"), |t| Ok(Some(t)))?;
    let plan = FitPlan {
        model: req.model.clone(),
        lines: req.lines.unwrap_or(1).max(1),
        fixed: req.fixed.clone(),
        release: req.release.clone(),
        lw: req.lw,
        tau,
        k: req.k,
        baseline: BaselineKind::None,
        baseline_width: 0.1,
        power_law: false,
    };
    let y = match req.baseline_edges {
        Some(w) if w > 0.0 && w < 0.5 => {
            let (lo, hi) = (r.axis[0], r.axis[r.len() - 1]);
            let span = w * (hi - lo);
            baseline_subtract(&r.axis, &r.contrast, &[(lo, lo + span), (hi - span, hi)])
                .map_err(|e| e.to_string())?
                .corrected
        }
        Some(w) => return Err(format!("baseline edge fraction must be in (0, 0.5), got {w}")),
        None => {
            let offset = meta_f64(&r, "baseline.no_rf")?.unwrap_or(0.0);
            let slope = meta_f64(&r, "baseline.slope")?.unwrap_or(0.0);
            let intercept = meta_f64(&r, "baseline.intercept")?.unwrap_or(0.0);
            r.axis.iter().zip(&r.contrast).map(|(&x, &y)| y - offset - intercept - slope * x).collect()
        }
    };
    let (x, y): (Vec<f64>, Vec<f64>) = match req.range {
        Some((lo, hi)) => r.axis.iter().zip(&y).filter(|(&x, _)| x >= lo && x <= hi).map(|(&x, &y)| (x, y)).unzip(),
        None => (r.axis.clone(), y),
    };
    if x.is_empty() {
        return Err("no data points inside the fit range".into());
    }
    let model = plan.model(tau)?;
    plan.run(model.as_deref(), &x, &y)
}
