//! Synthetic data-generating processes with SNR-calibrated Gaussian noise.
//!
//! Regression processes sample features i.i.d. U(0,1) and add N(0, sigma2)
//! noise, with sigma2 = Var(f(X)) / SNR. Var(f(X)) is estimated once per
//! process by Monte Carlo under a fixed internal calibration seed and
//! cached, so sigma2 is a controlled constant across the trials of a sweep
//! rather than per-trial noise.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use once_cell::sync::Lazy;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, RngStream};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Monte-Carlo draws used to estimate Var(f(X)).
pub const CALIBRATION_DRAWS: usize = 1_000_000;

const CALIBRATION_SEED: u64 = 0x5EED_CA11_B4A7_E001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpName {
    Mars,
    MarsAdd,
    HMars,
    HMarsAdd,
    Hidden2d,
    Band2dClass,
    Sphere3dClass,
}

impl DgpName {
    pub const ALL: [DgpName; 7] = [
        DgpName::Mars,
        DgpName::MarsAdd,
        DgpName::HMars,
        DgpName::HMarsAdd,
        DgpName::Hidden2d,
        DgpName::Band2dClass,
        DgpName::Sphere3dClass,
    ];

    /// Number of features the truth function reads.
    pub fn base_p(self) -> usize {
        match self {
            DgpName::Mars | DgpName::MarsAdd => 5,
            DgpName::HMars | DgpName::HMarsAdd => 7,
            DgpName::Hidden2d | DgpName::Band2dClass => 2,
            DgpName::Sphere3dClass => 3,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, DgpName::Band2dClass | DgpName::Sphere3dClass)
    }

    /// Feature sampling domain. The sphere process samples from
    /// [-0.5, 1.5]^3 so that both classes occupy volume; everything else
    /// uses the unit hypercube.
    pub fn domain(self) -> (f64, f64) {
        match self {
            DgpName::Sphere3dClass => (-0.5, 1.5),
            _ => (0.0, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DgpName::Mars => "mars",
            DgpName::MarsAdd => "marsadd",
            DgpName::HMars => "hmars",
            DgpName::HMarsAdd => "hmarsadd",
            DgpName::Hidden2d => "hidden2d",
            DgpName::Band2dClass => "band2d_class",
            DgpName::Sphere3dClass => "sphere3d_class",
        }
    }

    pub fn parse(s: &str) -> Result<DgpName> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown DGP `{s}`")))
    }
}

impl std::fmt::Display for DgpName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A data-generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: DgpName,
    pub n: usize,
    /// Signal-to-noise ratio Var(f(X)) / Var(eps); regression only.
    pub snr: Option<f64>,
    /// Non-informative U(0,1) features appended after the base features.
    pub extra_noise_features: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("sample count n must be at least 1"));
        }
        if self.name.is_classification() {
            return Ok(());
        }
        match self.snr {
            Some(s) if s > 0.0 => Ok(()),
            Some(s) => Err(Error::invalid(format!("snr must be positive, got {s}"))),
            None => Err(Error::invalid(format!(
                "regression DGP `{}` requires snr",
                self.name
            ))),
        }
    }

    pub fn p(&self) -> usize {
        self.name.base_p() + self.extra_noise_features
    }
}

/// A generated dataset plus the calibrated noise variance.
#[derive(Debug, Clone)]
pub struct GeneratedData<T> {
    pub dataset: Dataset<T>,
    /// Noise variance used for the response (0 for classification).
    pub sigma2: f64,
    pub spec: DgpSpec,
}

fn band(x: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&x) {
        1.0
    } else {
        0.0
    }
}

fn mars(x: &[f64]) -> f64 {
    10.0 * (std::f64::consts::PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.05).powi(2)
        + 10.0 * x[3]
        + 5.0 * x[4]
}

fn marsadd(x: &[f64]) -> f64 {
    0.1 * (4.0 * x[0]).exp() + 4.0 / (1.0 + (-20.0 * (x[1] - 0.5)).exp())
        + 3.0 * x[2]
        + 2.0 * x[3]
        + x[4]
}

/// Noiseless f(x) for regression, or the class-1 probability for
/// classification. Extra appended noise features are ignored.
pub fn eval_truth<T: Scalar>(name: DgpName, x: &[T]) -> Result<f64> {
    if x.len() < name.base_p() {
        return Err(Error::invalid(format!(
            "`{name}` needs at least {} features, got {}",
            name.base_p(),
            x.len()
        )));
    }
    let x: Vec<f64> = x.iter().map(|v| v.to_real()).collect();
    Ok(match name {
        DgpName::Mars => mars(&x),
        DgpName::MarsAdd => marsadd(&x),
        DgpName::HMars => {
            mars(&x) - 30.0 * band(x[5], 0.6, 0.65) - 35.0 * band(x[6], 0.55, 0.6)
        }
        DgpName::HMarsAdd => {
            marsadd(&x) - 10.0 * band(x[5], 0.6, 0.65) - 7.5 * band(x[6], 0.55, 0.6)
        }
        DgpName::Hidden2d => x[0] - band(x[1], 0.6, 0.65),
        DgpName::Band2dClass => {
            // The 0.9-probability band takes precedence; all other points
            // are positive with probability x1.
            if band(x[1], 0.6, 0.65) == 1.0 {
                0.9
            } else {
                x[0]
            }
        }
        DgpName::Sphere3dClass => {
            let d2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2) + (x[2] - 0.5).powi(2);
            if d2 <= 1.0 {
                0.9
            } else {
                0.1
            }
        }
    })
}

static TRUTH_VARIANCE_CACHE: Lazy<Mutex<HashMap<DgpName, f64>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// Monte-Carlo estimate of Var(f(X)) under the process's feature
/// distribution, using a fixed internal calibration seed. Cached per
/// process name.
pub fn truth_variance(name: DgpName) -> Result<f64> {
    if name.is_classification() {
        return Err(Error::invalid(format!(
            "`{name}` is a classification DGP; noise calibration applies to regression"
        )));
    }
    if let Some(&v) = TRUTH_VARIANCE_CACHE.lock().unwrap().get(&name) {
        return Ok(v);
    }
    let mut rng = RngStream::new(CALIBRATION_SEED).child(name.base_p() as u64).rng();
    let p = name.base_p();
    let mut x = vec![0.0f64; p];
    // Welford accumulation.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for i in 0..CALIBRATION_DRAWS {
        for v in x.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let f = eval_truth(name, &x)?;
        let delta = f - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (f - mean);
    }
    let var = m2 / (CALIBRATION_DRAWS - 1) as f64;
    TRUTH_VARIANCE_CACHE.lock().unwrap().insert(name, var);
    Ok(var)
}

/// Noise variance achieving the requested SNR: Var(f(X)) / snr.
pub fn calibrate_sigma2(name: DgpName, snr: f64) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    Ok(truth_variance(name)? / snr)
}

/// Generate a dataset per the spec. Deterministic per seed.
pub fn generate<T: Scalar>(spec: &DgpSpec) -> Result<GeneratedData<T>> {
    spec.validate()?;
    let p = spec.p();
    let n = spec.n;
    let root = RngStream::new(spec.seed);
    let mut feat_rng = root.child(0).rng();
    let mut resp_rng = root.child(1).rng();
    let (lo, hi) = spec.name.domain();

    let mut columns: Vec<Vec<T>> = vec![Vec::with_capacity(n); p];
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        for col in columns.iter_mut() {
            col.push(T::from_real(lo + (hi - lo) * feat_rng.gen::<f64>()));
        }
    }
    let mut row = vec![T::zero(); p];
    for i in 0..n {
        for (j, col) in columns.iter().enumerate() {
            row[j] = col[i];
        }
        truth.push(eval_truth(spec.name, &row)?);
    }

    let (response, sigma2): (Vec<f64>, f64) = if spec.name.is_classification() {
        let labels = truth
            .iter()
            .map(|&prob| {
                let d = Bernoulli::new(prob)
                    .map_err(|e| Error::runtime(format!("bad class probability {prob}: {e}")))?;
                Ok(if d.sample(&mut resp_rng) { 1.0 } else { 0.0 })
            })
            .collect::<Result<Vec<f64>>>()?;
        (labels, 0.0)
    } else {
        let sigma2 = calibrate_sigma2(spec.name, spec.snr.unwrap())?;
        let normal = Normal::new(0.0, sigma2.sqrt())
            .map_err(|e| Error::runtime(format!("bad sigma2 {sigma2}: {e}")))?;
        let ys = truth.iter().map(|&f| f + normal.sample(&mut resp_rng)).collect();
        (ys, sigma2)
    };

    let feature_names = (0..p).map(|j| format!("x{}", j + 1)).collect();
    let dataset = Dataset::new(
        columns,
        response.into_iter().map(T::from_real).collect(),
        Some(truth.into_iter().map(T::from_real).collect()),
        feature_names,
    )?;
    Ok(GeneratedData {
        dataset,
        sigma2,
        spec: spec.clone(),
    })
}

/// Sidecar metadata written next to generated dataset CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: DgpSpec,
    pub sigma2: f64,
    /// Monte-Carlo Var(f(X)) used for calibration (regression only).
    pub calibration_variance: Option<f64>,
    pub seed: u64,
}

/// Write the dataset CSV plus a `.json` sidecar with the spec, sigma2, and
/// calibration variance.
pub fn write_with_sidecar<T: Scalar>(data: &GeneratedData<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    data.dataset.to_csv_path(path)?;
    let sidecar = Sidecar {
        spec: data.spec.clone(),
        sigma2: data.sigma2,
        calibration_variance: (!data.spec.name.is_classification())
            .then(|| truth_variance(data.spec.name))
            .transpose()?,
        seed: data.spec.seed,
    };
    let sidecar_path = path.with_extension("json");
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden2d_truth_values() {
        assert_eq!(eval_truth(DgpName::Hidden2d, &[0.5, 0.62]).unwrap(), -0.5);
        assert_eq!(eval_truth(DgpName::Hidden2d, &[0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn mars_truth_value() {
        // 10 sin(pi/4) + 0 + 0 + 0 at x = (0.5, 0.5, 0.05, 0, 0).
        let f = eval_truth(DgpName::Mars, &[0.5, 0.5, 0.05, 0.0, 0.0]).unwrap();
        assert!((f - 7.0711).abs() < 5e-4, "got {f}");
    }

    #[test]
    fn band2d_probabilities() {
        assert_eq!(eval_truth(DgpName::Band2dClass, &[0.1, 0.62]).unwrap(), 0.9);
        assert_eq!(eval_truth(DgpName::Band2dClass, &[0.3, 0.2]).unwrap(), 0.3);
    }

    #[test]
    fn truth_rejects_short_input() {
        assert!(eval_truth(DgpName::Mars, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn hmars_reduces_to_mars_without_bands() {
        // f_hMARS(x) + 30*1(band6) + 35*1(band7) == f_MARS(x[0..5]) exactly.
        let mut rng = RngStream::new(17).rng();
        for _ in 0..200 {
            let x: Vec<f64> = (0..7).map(|_| rng.gen::<f64>()).collect();
            let h = eval_truth(DgpName::HMars, &x).unwrap();
            let m = eval_truth(DgpName::Mars, &x[..5]).unwrap();
            let back = h + 30.0 * band(x[5], 0.6, 0.65) + 35.0 * band(x[6], 0.55, 0.6);
            assert!((back - m).abs() < 1e-12 * m.abs().max(1.0));
            let ha = eval_truth(DgpName::HMarsAdd, &x).unwrap();
            let ma = eval_truth(DgpName::MarsAdd, &x[..5]).unwrap();
            let back = ha + 10.0 * band(x[5], 0.6, 0.65) + 7.5 * band(x[6], 0.55, 0.6);
            assert!((back - ma).abs() < 1e-12 * ma.abs().max(1.0));
        }
    }

    #[test]
    fn hidden2d_calibration_matches_closed_form() {
        // Var(f) = Var(X1) + Var(1(band)) = 1/12 + 0.05*0.95.
        let expected = 1.0 / 12.0 + 0.05 * 0.95;
        let var = truth_variance(DgpName::Hidden2d).unwrap();
        assert!(
            (var - expected).abs() / expected < 0.01,
            "MC variance {var} vs closed form {expected}"
        );
        let sigma2 = calibrate_sigma2(DgpName::Hidden2d, 6.0).unwrap();
        assert!((sigma2 - expected / 6.0).abs() / (expected / 6.0) < 0.01);
        // snr = 1 forces sigma2 = Var(f); doubling snr halves sigma2.
        assert_eq!(calibrate_sigma2(DgpName::Hidden2d, 1.0).unwrap(), var);
        assert_eq!(
            calibrate_sigma2(DgpName::Hidden2d, 2.0).unwrap(),
            var / 2.0
        );
    }

    #[test]
    fn calibration_rejects_classification() {
        assert!(calibrate_sigma2(DgpName::Band2dClass, 1.0).is_err());
    }

    #[test]
    fn generated_noise_variance_matches_sigma2() {
        let spec = DgpSpec {
            name: DgpName::Hidden2d,
            n: 1000,
            snr: Some(6.0),
            extra_noise_features: 0,
            seed: 5,
        };
        let gd = generate::<f64>(&spec).unwrap();
        let resid: Vec<f64> = gd
            .dataset
            .response()
            .iter()
            .zip(gd.dataset.truth().unwrap())
            .map(|(y, f)| y - f)
            .collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!(
            (var - gd.sigma2).abs() / gd.sigma2 < 0.15,
            "sample noise variance {var} vs sigma2 {}",
            gd.sigma2
        );
    }

    #[test]
    fn extra_noise_features_leave_truth_unchanged() {
        let base = DgpSpec {
            name: DgpName::HMars,
            n: 50,
            snr: Some(2.0),
            extra_noise_features: 0,
            seed: 9,
        };
        let extra = DgpSpec {
            extra_noise_features: 3,
            ..base.clone()
        };
        let gd = generate::<f64>(&extra).unwrap();
        assert_eq!(gd.dataset.n_features(), 10);
        // Truth only reads the first 7 columns.
        for i in 0..gd.dataset.n_rows() {
            let row = gd.dataset.row(i);
            let f = eval_truth(DgpName::HMars, &row[..7]).unwrap();
            assert_eq!(gd.dataset.truth().unwrap()[i], f);
        }
    }

    #[test]
    fn sphere_labels_follow_the_stated_probabilities() {
        let spec = DgpSpec {
            name: DgpName::Sphere3dClass,
            n: 10_000,
            snr: None,
            extra_noise_features: 0,
            seed: 3,
        };
        let gd = generate::<f64>(&spec).unwrap();
        let (mut inside_pos, mut inside, mut outside_pos, mut outside) = (0u32, 0u32, 0u32, 0u32);
        for i in 0..gd.dataset.n_rows() {
            let row = gd.dataset.row(i);
            let d2 = (row[0] - 0.5).powi(2) + (row[1] - 0.5).powi(2) + (row[2] - 0.5).powi(2);
            let pos = gd.dataset.response()[i] == 1.0;
            if d2 <= 1.0 {
                inside += 1;
                inside_pos += pos as u32;
            } else {
                outside += 1;
                outside_pos += pos as u32;
            }
        }
        assert!(inside > 0 && outside > 0);
        let p_in = inside_pos as f64 / inside as f64;
        let p_out = outside_pos as f64 / outside as f64;
        assert!((p_in - 0.9).abs() < 0.02, "inside positive rate {p_in}");
        assert!((p_out - 0.1).abs() < 0.02, "outside positive rate {p_out}");
    }

    #[test]
    fn hidden2d_band_activation_rate() {
        let spec = DgpSpec {
            name: DgpName::Hidden2d,
            n: 10_000,
            snr: Some(6.0),
            extra_noise_features: 0,
            seed: 12,
        };
        let gd = generate::<f64>(&spec).unwrap();
        let active = gd
            .dataset
            .feature(1)
            .iter()
            .filter(|&&v| (0.6..=0.65).contains(&v))
            .count();
        let rate = active as f64 / 10_000.0;
        assert!((rate - 0.05).abs() < 0.015, "band activation rate {rate}");
    }

    #[test]
    fn empirical_snr_converges() {
        // Var(truth) / Var(response - truth) over 20 seeds at n = 10_000.
        let mut ratios = Vec::new();
        for seed in 0..20 {
            let spec = DgpSpec {
                name: DgpName::Mars,
                n: 10_000,
                snr: Some(3.0),
                extra_noise_features: 0,
                seed,
            };
            let gd = generate::<f64>(&spec).unwrap();
            let truth = gd.dataset.truth().unwrap();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            };
            let resid: Vec<f64> = gd
                .dataset
                .response()
                .iter()
                .zip(truth)
                .map(|(y, f)| y - f)
                .collect();
            ratios.push(var(truth) / var(&resid));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 3.0).abs() / 3.0 < 0.10, "empirical SNR {mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DgpSpec {
            name: DgpName::HMarsAdd,
            n: 100,
            snr: Some(1.0),
            extra_noise_features: 2,
            seed: 77,
        };
        let a = generate::<f64>(&spec).unwrap();
        let b = generate::<f64>(&spec).unwrap();
        assert_eq!(a.dataset.response(), b.dataset.response());
        assert_eq!(a.dataset.feature(8), b.dataset.feature(8));
    }
}
