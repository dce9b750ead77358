//! Baseline removal and FFT peak estimation.

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::models::{LineShape, PeakSum};
use super::{check_data, fit, AnalysisError, FitResult, Model, ModelSpec};

/// Result of [`baseline_subtract`].
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub corrected: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub warnings: Vec<String>,
}

/// Fits a straight line to the points whose x falls in any of `regions`
/// (inclusive intervals) and subtracts it everywhere.
///
/// Warns when the in-region residuals contain outliers beyond five robust
/// standard deviations, which usually means the region overlaps the signal.
pub fn baseline_subtract(x: &[f64], y: &[f64], regions: &[(f64, f64)]) -> Result<Baseline, AnalysisError> {
    check_data(x, y)?;
    let inside = |v: f64| regions.iter().any(|&(a, b)| v >= a.min(b) && v <= a.max(b));
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(&x, _)| inside(x)).map(|(&x, &y)| (x, y)).collect();
    if pts.len() < 2 {
        return Err(AnalysisError::InsufficientData { needed: 2, free: 2, got: pts.len() });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;

    let mut warnings = Vec::new();
    let resid: Vec<f64> = pts.iter().map(|p| p.1 - intercept - slope * p.0).collect();
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 0 {
            0.5 * (v[m - 1] + v[m])
        } else {
            v[m]
        }
    };
    let med = median(&mut resid.clone());
    let sigma = 1.4826 * median(&mut resid.iter().map(|r| (r - med).abs()).collect());
    let worst = resid.iter().fold(0.0f64, |m, r| m.max((r - med).abs()));
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst > 5.0 * sigma && worst > 1e-9 * scale {
        warnings.push(format!(
            "baseline region contains structure: residual {worst:.3e} exceeds 5 robust sigma ({sigma:.3e})"
        ));
    }
    Ok(Baseline {
        corrected: x.iter().zip(y).map(|(&x, &y)| y - intercept - slope * x).collect(),
        slope,
        intercept,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    None,
    Hann,
}

/// One-sided magnitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub frequency: Vec<f64>,
    pub magnitude: Vec<f64>,
}

/// Magnitude spectrum of a trace sampled every `dt`: mean removed,
/// optionally windowed, zero-padded to the next power of two ≥ 8× the
/// length. Magnitudes are normalised so a unit-amplitude tone peaks at 1
/// (without window).
pub fn power_spectrum(trace: &[f64], dt: f64, window: Window) -> Result<Spectrum, AnalysisError> {
    if trace.len() < 4 {
        return Err(AnalysisError::InsufficientData { needed: 4, free: 0, got: trace.len() });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(AnalysisError::Invalid(format!("sample interval must be positive, got {dt}")));
    }
    if let Some(i) = trace.iter().position(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite(i));
    }
    let n = trace.len();
    let mean = trace.iter().sum::<f64>() / n as f64;
    let n_fft = (8 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = trace
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = match window {
                Window::None => 1.0,
                Window::Hann => 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos(),
            };
            Complex64::new((v - mean) * w, 0.0)
        })
        .collect();
    buf.resize(n_fft, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let half = n_fft / 2 + 1;
    let norm = 2.0 / n as f64;
    Ok(Spectrum {
        frequency: (0..half).map(|k| k as f64 / (n_fft as f64 * dt)).collect(),
        magnitude: buf[..half].iter().map(|c| c.norm() * norm).collect(),
    })
}

/// Peak of the magnitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct FftPeak {
    pub frequency: f64,
    /// Full width at half maximum of the magnitude peak, Hz.
    pub fwhm: f64,
    /// Single-Lorentzian fit to the peak region.
    pub fit: FitResult,
    pub spectrum: Spectrum,
}

/// Strongest spectral peak away from DC, its half-maximum width (linear
/// interpolation between bins) and a Lorentzian fit around it.
pub fn fft_peak(trace: &[f64], dt: f64, window: Window) -> Result<FftPeak, AnalysisError> {
    let spectrum = power_spectrum(trace, dt, window)?;
    let m = &spectrum.magnitude;
    let f = &spectrum.frequency;
    let start = (1..m.len() - 1).find(|&k| m[k] <= m[k + 1]).ok_or(AnalysisError::NoPeak)?;
    let k0 = (start..m.len()).max_by(|&a, &b| m[a].total_cmp(&m[b])).ok_or(AnalysisError::NoPeak)?;
    let level = trace.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(m[k0] > 1e-9 * level) {
        return Err(AnalysisError::NoPeak);
    }
    let half = m[k0] / 2.0;
    let edge = |dir: isize| -> f64 {
        let mut k = k0 as isize;
        while k + dir >= 0 && ((k + dir) as usize) < m.len() && m[(k + dir) as usize] > half {
            k += dir;
        }
        let (a, b) = (k as usize, (k + dir).clamp(0, m.len() as isize - 1) as usize);
        if a == b || m[a] == m[b] {
            return f[a];
        }
        f[a] + (f[b] - f[a]) * (m[a] - half) / (m[a] - m[b])
    };
    let fwhm = edge(1) - edge(-1);

    let lo = f[k0] - 3.0 * fwhm;
    let hi = f[k0] + 3.0 * fwhm;
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        f.iter().zip(m).filter(|(&x, _)| x >= lo && x <= hi).map(|(&x, &y)| (x, y)).unzip();
    let model = PeakSum { shape: LineShape::Lorentzian, n: 1, shared_width: true, fixed_width: None };
    let spec = ModelSpec::new(&model.id()).start("f1", f[k0]).start("lw", fwhm / 2.0).start("a1", m[k0]);
    let fit = fit(&model, &xs, &ys, &spec)?;
    Ok(FftPeak { frequency: f[k0], fwhm, fit, spectrum })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_only_is_removed_entirely() {
        let x: Vec<f64> = (0..50).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| 0.3 + 0.01 * x).collect();
        let b = baseline_subtract(&x, &y, &[(0.0, 49.0)]).unwrap();
        assert!(b.corrected.iter().all(|v| v.abs() < 1e-12));
        assert!(b.warnings.is_empty());
    }

    #[test]
    fn dip_preserved_and_misuse_flagged() {
        let x: Vec<f64> = (0..200).map(|k| k as f64).collect();
        let dip = |x: f64| -0.05 * (-(x - 100.0f64).powi(2) / 50.0).exp();
        let y: Vec<f64> = x.iter().map(|&x| 1.0 + 1e-3 * x + dip(x)).collect();
        let b = baseline_subtract(&x, &y, &[(0.0, 60.0), (140.0, 199.0)]).unwrap();
        assert!(b.warnings.is_empty());
        for (&x, v) in x.iter().zip(&b.corrected) {
            assert!((v - dip(x)).abs() < 1e-9);
        }
        let bad = baseline_subtract(&x, &y, &[(0.0, 199.0)]).unwrap();
        assert_eq!(bad.warnings.len(), 1);
    }

    #[test]
    fn tone_peak_and_width() {
        let dt = 1.0 / 20_000.0;
        let trace: Vec<f64> = (0..40_000).map(|k| (2.0 * std::f64::consts::PI * 1000.0 * k as f64 * dt).cos()).collect();
        let p = fft_peak(&trace, dt, Window::None).unwrap();
        assert!((p.frequency - 1000.0).abs() < 0.1);
        assert!(p.fwhm <= 1.0);
        assert!((p.fit.value("f1").unwrap() - 1000.0).abs() < 0.1);
    }

    #[test]
    fn dc_has_no_peak() {
        let trace = vec![0.1; 1000];
        assert_eq!(fft_peak(&trace, 1e-3, Window::None).unwrap_err(), AnalysisError::NoPeak);
    }
}
