//! Seeded, parallel, resumable experiment campaigns.
//!
//! A campaign is a recipe plus grids (DGP, SNR, mtry, n, ...). Each
//! (grid point, trial) pair is an independent job keyed by a child RNG
//! stream, so results are identical for any worker count. Rows are appended
//! to `results.csv` as jobs finish and the table is rewritten in canonical
//! job order on completion; rerunning a campaign with the same config and
//! output directory skips completed jobs.
//!
//! Layout: `<output_dir>/<recipe>/<config_hash>/results.csv` plus
//! `manifest.json` and recipe-specific side files (per-point error tables,
//! serialized example trees, DoF-matching audits).

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    bias_variance_decompose, effective_dof, match_trim_dof, mse, percent_decrease, DofMatch,
    DEFAULT_MAXNODES_GRID,
};
use crate::dataset::{train_test_split, Dataset, RngStream};
use crate::dgp::{calibrate_sigma2, generate, DgpName, DgpSpec};
use crate::ensemble::{fit_forest_with_stream, Forest, ForestConfig};
use crate::error::{Error, Result};
use crate::tree::{Task, TreeConfig};
use crate::Real;

/// Named experiment recipes, one per study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    TrimVsSfs,
    Hidden2dSingle,
    Hidden2dSweep,
    HmarsSweep,
    BvdSweep,
    MtryNoiseFeatures,
    FirstDepth,
    SphereDemo,
    Band2dDemo,
}

impl Recipe {
    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::TrimVsSfs => "trim_vs_sfs",
            Recipe::Hidden2dSingle => "hidden2d_single",
            Recipe::Hidden2dSweep => "hidden2d_sweep",
            Recipe::HmarsSweep => "hmars_sweep",
            Recipe::BvdSweep => "bvd_sweep",
            Recipe::MtryNoiseFeatures => "mtry_noise_features",
            Recipe::FirstDepth => "first_depth",
            Recipe::SphereDemo => "sphere_demo",
            Recipe::Band2dDemo => "band2d_demo",
        }
    }
}

impl std::fmt::Display for Recipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ten evenly log-spaced SNR points from 0.042 to 6, endpoints inclusive.
pub fn snr_log_grid() -> Vec<f64> {
    let (lo, hi) = (0.042f64.log10(), 6.0f64.log10());
    (0..10)
        .map(|i| match i {
            0 => 0.042,
            9 => 6.0,
            _ => 10f64.powf(lo + (hi - lo) * i as f64 / 9.0),
        })
        .collect()
}

/// Campaign configuration as read from JSON. Unset fields take
/// recipe-specific defaults; `maxnodes: 0` requests full-depth trees.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    #[serde(default)]
    pub dgps: Option<Vec<DgpName>>,
    #[serde(default)]
    pub snr_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub mtry_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub n_trees: Option<usize>,
    #[serde(default)]
    pub maxnodes: Option<usize>,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub extra_noise_features: Option<Vec<usize>>,
    /// Replication budget for effective-DoF estimation (TRIM matching).
    #[serde(default)]
    pub dof_replications: Option<usize>,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn new(recipe: Recipe, master_seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            recipe,
            dgps: None,
            snr_grid: None,
            mtry_grid: None,
            n_grid: None,
            n_trees: None,
            maxnodes: None,
            trials: None,
            extra_noise_features: None,
            dof_replications: None,
            master_seed,
            output_dir: Some(output_dir.into()),
        }
    }

    /// Fill recipe defaults and validate invariants.
    pub fn normalized(&self) -> Result<NormalizedConfig> {
        use Recipe::*;
        let r = self.recipe;
        let dgps = self.dgps.clone().unwrap_or_else(|| match r {
            TrimVsSfs => vec![DgpName::Mars],
            Hidden2dSingle | Hidden2dSweep => vec![DgpName::Hidden2d],
            HmarsSweep => vec![DgpName::HMars],
            BvdSweep => vec![DgpName::HMars],
            MtryNoiseFeatures => vec![DgpName::HMars, DgpName::HMarsAdd],
            FirstDepth => vec![DgpName::HMars],
            SphereDemo => vec![DgpName::Sphere3dClass],
            Band2dDemo => vec![DgpName::Band2dClass],
        });
        let snr_grid = self.snr_grid.clone().unwrap_or_else(|| match r {
            Hidden2dSingle => vec![6.0, 0.042],
            BvdSweep | MtryNoiseFeatures | FirstDepth => vec![6.0],
            SphereDemo | Band2dDemo => vec![6.0], // unused by classification
            _ => snr_log_grid(),
        });
        let mtry_grid = self.mtry_grid.clone().unwrap_or_else(|| match r {
            TrimVsSfs | Hidden2dSweep | HmarsSweep => vec![0.33],
            Hidden2dSingle | Band2dDemo => vec![0.5],
            SphereDemo => vec![0.33],
            BvdSweep | MtryNoiseFeatures | FirstDepth => {
                (1..=10).map(|i| i as f64 / 10.0).collect()
            }
        });
        let n_grid = self.n_grid.clone().unwrap_or_else(|| match r {
            Hidden2dSingle | Hidden2dSweep | HmarsSweep | BvdSweep | MtryNoiseFeatures
            | FirstDepth => vec![1000],
            SphereDemo | Band2dDemo => vec![10_000],
            TrimVsSfs => vec![200],
        });
        let n_trees = self.n_trees.unwrap_or(match r {
            Hidden2dSingle => 500,
            _ => 100,
        });
        // maxnodes: absent -> recipe default; 0 -> full depth.
        let maxnodes = match self.maxnodes {
            Some(0) => None,
            Some(m) => Some(m),
            None => match r {
                Hidden2dSingle | SphereDemo | Band2dDemo => None,
                _ => Some(200),
            },
        };
        // Leaf budget used by the TRIM model in the classification demos.
        let trim_maxnodes = match r {
            SphereDemo | Band2dDemo => self.maxnodes.filter(|&m| m > 0).or(Some(8)),
            _ => maxnodes,
        };
        let trials = self.trials.unwrap_or(match r {
            Hidden2dSingle => 20,
            SphereDemo | Band2dDemo => 1,
            _ => 100,
        });
        let extra_noise_features = self.extra_noise_features.clone().unwrap_or_else(|| match r {
            MtryNoiseFeatures => vec![0, 1, 3, 5],
            FirstDepth => vec![5],
            _ => vec![0],
        });
        let dof_replications = self.dof_replications.unwrap_or(40);
        let output_dir = self
            .output_dir
            .clone()
            .ok_or_else(|| Error::invalid("output_dir is not set (flag, config, or FORESTLAB_OUT)"))?;

        let cfg = NormalizedConfig {
            recipe: r,
            dgps,
            snr_grid,
            mtry_grid,
            n_grid,
            n_trees,
            maxnodes,
            trim_maxnodes,
            trials,
            extra_noise_features,
            dof_replications,
            master_seed: self.master_seed,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fully resolved campaign configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedConfig {
    pub recipe: Recipe,
    pub dgps: Vec<DgpName>,
    pub snr_grid: Vec<f64>,
    pub mtry_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub n_trees: usize,
    /// Leaf budget for bagging/SFS models; `None` grows full depth.
    pub maxnodes: Option<usize>,
    /// Leaf budget for the TRIM model in the classification demos.
    pub trim_maxnodes: Option<usize>,
    pub trials: usize,
    pub extra_noise_features: Vec<usize>,
    pub dof_replications: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
}

impl NormalizedConfig {
    fn validate(&self) -> Result<()> {
        use Recipe::*;
        if self.dgps.is_empty()
            || self.snr_grid.is_empty()
            || self.mtry_grid.is_empty()
            || self.n_grid.is_empty()
            || self.extra_noise_features.is_empty()
        {
            return Err(Error::invalid("all campaign grids must be non-empty"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        if self.n_trees == 0 {
            return Err(Error::invalid("n_trees must be at least 1"));
        }
        if self.dof_replications < 2 {
            return Err(Error::invalid("dof_replications must be at least 2"));
        }
        for &snr in &self.snr_grid {
            if !(snr > 0.0) {
                return Err(Error::invalid(format!("snr must be positive, got {snr}")));
            }
        }
        for &m in &self.mtry_grid {
            if !(m > 0.0 && m <= 1.0) {
                return Err(Error::invalid(format!("mtry must lie in (0,1], got {m}")));
            }
        }
        for &n in &self.n_grid {
            if n < 4 {
                return Err(Error::invalid(format!("n must be at least 4, got {n}")));
            }
        }
        let requires = |allowed: &[DgpName]| -> Result<()> {
            for d in &self.dgps {
                if !allowed.contains(d) {
                    return Err(Error::invalid(format!(
                        "recipe `{}` does not support DGP `{d}`",
                        self.recipe
                    )));
                }
            }
            Ok(())
        };
        match self.recipe {
            TrimVsSfs => requires(&[
                DgpName::Mars,
                DgpName::MarsAdd,
                DgpName::HMars,
                DgpName::HMarsAdd,
            ])?,
            Hidden2dSingle => requires(&[DgpName::Hidden2d])?,
            Hidden2dSweep | HmarsSweep | BvdSweep | MtryNoiseFeatures => requires(&[
                DgpName::Mars,
                DgpName::MarsAdd,
                DgpName::HMars,
                DgpName::HMarsAdd,
                DgpName::Hidden2d,
            ])?,
            FirstDepth => {
                requires(&[DgpName::HMars, DgpName::HMarsAdd])?;
                if self.extra_noise_features.iter().any(|&e| e == 0) {
                    return Err(Error::invalid(
                        "first_depth needs at least one appended noise feature",
                    ));
                }
            }
            SphereDemo => requires(&[DgpName::Sphere3dClass])?,
            Band2dDemo => requires(&[DgpName::Band2dClass])?,
        }
        Ok(())
    }

    /// Hash of the semantic configuration (everything except the output
    /// directory), used to key the campaign directory and stamp every row.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct HashKey<'a> {
            recipe: Recipe,
            dgps: &'a [DgpName],
            snr_grid: &'a [f64],
            mtry_grid: &'a [f64],
            n_grid: &'a [usize],
            n_trees: usize,
            maxnodes: Option<usize>,
            trim_maxnodes: Option<usize>,
            trials: usize,
            extra_noise_features: &'a [usize],
            dof_replications: usize,
            master_seed: u64,
        }
        let key = HashKey {
            recipe: self.recipe,
            dgps: &self.dgps,
            snr_grid: &self.snr_grid,
            mtry_grid: &self.mtry_grid,
            n_grid: &self.n_grid,
            n_trees: self.n_trees,
            maxnodes: self.maxnodes,
            trim_maxnodes: self.trim_maxnodes,
            trials: self.trials,
            extra_noise_features: &self.extra_noise_features,
            dof_replications: self.dof_replications,
            master_seed: self.master_seed,
        };
        let json = serde_json::to_string(&key).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }

    pub fn campaign_dir(&self) -> PathBuf {
        self.output_dir
            .join(self.recipe.as_str())
            .join(self.config_hash())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub version: String,
    pub schema: Vec<String>,
    pub config: NormalizedConfig,
}

#[derive(Debug, Clone)]
pub struct CampaignSummary {
    pub dir: PathBuf,
    pub results_path: PathBuf,
    pub total_rows: usize,
    pub jobs_run: usize,
    pub jobs_skipped: usize,
}

type Row = Vec<String>;

#[derive(Debug, Clone)]
enum JobParams {
    TrimTrial {
        dgp: DgpName,
        n: usize,
        snr: f64,
        mtry: f64,
    },
    Hidden2dSingleTrial {
        snr: f64,
        trial: usize,
    },
    SweepTrial {
        dgp: DgpName,
        n: usize,
        snr: f64,
        mtry: f64,
    },
    BvdPoint {
        dgp: DgpName,
        n: usize,
        snr: f64,
        mtry: f64,
        extra: usize,
        test_index: u64,
    },
    FirstDepthTrial {
        dgp: DgpName,
        n: usize,
        snr: f64,
        extra: usize,
        mtry: f64,
    },
    Demo {
        dgp: DgpName,
    },
}

#[derive(Debug, Clone)]
struct Job {
    index: usize,
    key: Vec<String>,
    expected_rows: usize,
    params: JobParams,
}

fn fnum(v: f64) -> String {
    format!("{v}")
}

struct Plan {
    schema: Vec<&'static str>,
    key_cols: usize,
    jobs: Vec<Job>,
}

fn build_plan(cfg: &NormalizedConfig, hash: &str) -> Plan {
    use Recipe::*;
    let mut jobs = Vec::new();
    let push = |key: Vec<String>, expected_rows: usize, params: JobParams, jobs: &mut Vec<Job>| {
        let index = jobs.len();
        jobs.push(Job {
            index,
            key,
            expected_rows,
            params,
        });
    };
    let base_key = |rest: &[String]| -> Vec<String> {
        let mut key = vec![hash.to_string(), cfg.recipe.as_str().to_string()];
        key.extend_from_slice(rest);
        key
    };

    let (schema, key_cols): (Vec<&'static str>, usize) = match cfg.recipe {
        TrimVsSfs => {
            for &dgp in &cfg.dgps {
                for &n in &cfg.n_grid {
                    for &snr in &cfg.snr_grid {
                        for &mtry in &cfg.mtry_grid {
                            for trial in 0..cfg.trials {
                                push(
                                    base_key(&[
                                        dgp.to_string(),
                                        n.to_string(),
                                        fnum(snr),
                                        fnum(mtry),
                                        trial.to_string(),
                                    ]),
                                    3,
                                    JobParams::TrimTrial {
                                        dgp,
                                        n,
                                        snr,
                                        mtry,
                                    },
                                    &mut jobs,
                                );
                            }
                        }
                    }
                }
            }
            (
                vec![
                    "config_hash",
                    "recipe",
                    "dgp",
                    "n",
                    "snr",
                    "sfs_mtry",
                    "trial",
                    "model",
                    "mtry",
                    "maxnodes",
                    "train_mse",
                    "test_mse",
                    "err_diff_vs_bagging",
                    "pct_test_decrease_vs_bagging",
                    "seed",
                ],
                7,
            )
        }
        Hidden2dSingle => {
            for &snr in &cfg.snr_grid {
                for trial in 0..cfg.trials {
                    push(
                        base_key(&[fnum(snr), trial.to_string()]),
                        2,
                        JobParams::Hidden2dSingleTrial { snr, trial },
                        &mut jobs,
                    );
                }
            }
            (
                vec![
                    "config_hash",
                    "recipe",
                    "snr",
                    "trial",
                    "model",
                    "mtry",
                    "train_mse",
                    "test_mse",
                    "pct_train_decrease_vs_bagging",
                    "pct_test_decrease_vs_bagging",
                    "seed",
                ],
                4,
            )
        }
        Hidden2dSweep | HmarsSweep => {
            for &dgp in &cfg.dgps {
                for &n in &cfg.n_grid {
                    for &snr in &cfg.snr_grid {
                        for &mtry in &cfg.mtry_grid {
                            for trial in 0..cfg.trials {
                                push(
                                    base_key(&[
                                        dgp.to_string(),
                                        n.to_string(),
                                        fnum(snr),
                                        fnum(mtry),
                                        trial.to_string(),
                                    ]),
                                    2,
                                    JobParams::SweepTrial {
                                        dgp,
                                        n,
                                        snr,
                                        mtry,
                                    },
                                    &mut jobs,
                                );
                            }
                        }
                    }
                }
            }
            (
                vec![
                    "config_hash",
                    "recipe",
                    "dgp",
                    "n",
                    "snr",
                    "sfs_mtry",
                    "trial",
                    "model",
                    "train_mse",
                    "test_mse",
                    "err_diff_vs_bagging",
                    "pct_train_decrease_vs_bagging",
                    "pct_test_decrease_vs_bagging",
                    "seed",
                ],
                7,
            )
        }
        BvdSweep | MtryNoiseFeatures => {
            let mut test_index = 0u64;
            for &dgp in &cfg.dgps {
                for &n in &cfg.n_grid {
                    for &snr in &cfg.snr_grid {
                        for &extra in &cfg.extra_noise_features {
                            for &mtry in &cfg.mtry_grid {
                                push(
                                    base_key(&[
                                        dgp.to_string(),
                                        n.to_string(),
                                        fnum(snr),
                                        fnum(mtry),
                                        extra.to_string(),
                                    ]),
                                    1,
                                    JobParams::BvdPoint {
                                        dgp,
                                        n,
                                        snr,
                                        mtry,
                                        extra,
                                        test_index,
                                    },
                                    &mut jobs,
                                );
                            }
                            test_index += 1;
                        }
                    }
                }
            }
            (
                vec![
                    "config_hash",
                    "recipe",
                    "dgp",
                    "n",
                    "snr",
                    "mtry",
                    "extra_noise_features",
                    "trials",
                    "bias2",
                    "variance",
                    "noise",
                    "total_mse",
                    "seed",
                ],
                7,
            )
        }
        FirstDepth => {
            for &dgp in &cfg.dgps {
                for &n in &cfg.n_grid {
                    for &snr in &cfg.snr_grid {
                        for &extra in &cfg.extra_noise_features {
                            for &mtry in &cfg.mtry_grid {
                                for trial in 0..cfg.trials {
                                    push(
                                        base_key(&[
                                            dgp.to_string(),
                                            n.to_string(),
                                            fnum(snr),
                                            extra.to_string(),
                                            fnum(mtry),
                                            trial.to_string(),
                                        ]),
                                        dgp.base_p() + extra,
                                        JobParams::FirstDepthTrial {
                                            dgp,
                                            n,
                                            snr,
                                            extra,
                                            mtry,
                                        },
                                        &mut jobs,
                                    );
                                }
                            }
                        }
                    }
                }
            }
            (
                vec![
                    "config_hash",
                    "recipe",
                    "dgp",
                    "n",
                    "snr",
                    "extra_noise_features",
                    "mtry",
                    "trial",
                    "feature",
                    "group",
                    "mean_first_depth",
                    "usage_fraction",
                    "seed",
                ],
                8,
            )
        }
        Band2dDemo => {
            for &dgp in &cfg.dgps {
                push(
                    base_key(&[dgp.to_string()]),
                    200 * 200,
                    JobParams::Demo { dgp },
                    &mut jobs,
                );
            }
            (
                vec![
                    "config_hash",
                    "recipe",
                    "dgp",
                    "x1",
                    "x2",
                    "p_true",
                    "pred_bagging",
                    "pred_trim",
                    "pred_sfs",
                    "seed",
                ],
                3,
            )
        }
        SphereDemo => {
            for &dgp in &cfg.dgps {
                push(
                    base_key(&[dgp.to_string()]),
                    cfg.n_grid[0],
                    JobParams::Demo { dgp },
                    &mut jobs,
                );
            }
            (
                vec![
                    "config_hash",
                    "recipe",
                    "dgp",
                    "x1",
                    "x2",
                    "x3",
                    "y",
                    "pred_bagging",
                    "pred_trim",
                    "pred_sfs",
                    "seed",
                ],
                3,
            )
        }
    };
    Plan {
        schema,
        key_cols,
        jobs,
    }
}

/// Everything a job needs besides its own parameters.
struct CampaignCtx<'a> {
    cfg: &'a NormalizedConfig,
    dir: PathBuf,
    /// Matched TRIM leaf budgets keyed by (dgp, n, snr-bits, mtry-bits).
    trim_budgets: HashMap<(DgpName, usize, u64, u64), usize>,
}

fn regression_tree_config(mtry: f64, maxnodes: Option<usize>) -> TreeConfig {
    TreeConfig::new(Task::Regression)
        .with_mtry(mtry)
        .with_max_leaf_nodes(maxnodes)
}

fn fit_regression_forest(
    data: &Dataset<Real>,
    mtry: f64,
    maxnodes: Option<usize>,
    n_trees: usize,
    stream: &RngStream,
) -> Result<Forest<Real>> {
    let config = ForestConfig::new(n_trees, regression_tree_config(mtry, maxnodes), stream.key());
    fit_forest_with_stream(data, &config, stream)
}

struct FitEval {
    forest: Forest<Real>,
    train_mse: f64,
    test_mse: f64,
}

fn fit_eval(
    train: &Dataset<Real>,
    test: &Dataset<Real>,
    mtry: f64,
    maxnodes: Option<usize>,
    n_trees: usize,
    stream: &RngStream,
) -> Result<FitEval> {
    let forest = fit_regression_forest(train, mtry, maxnodes, n_trees, stream)?;
    let train_mse = mse(&forest.predict(train)?, train.response())?;
    let test_mse = mse(&forest.predict(test)?, test.response())?;
    Ok(FitEval {
        forest,
        train_mse,
        test_mse,
    })
}

/// Effective DoF of a bagged regression forest on a fixed design.
fn forest_dof_on_design(
    design: &Dataset<Real>,
    truth: &[f64],
    sigma2: f64,
    mtry: f64,
    maxnodes: Option<usize>,
    n_trees: usize,
    replications: usize,
    stream: &RngStream,
) -> Result<crate::analysis::DofEstimate> {
    let columns: Vec<Vec<f64>> = (0..design.n_features())
        .map(|j| design.feature(j).to_vec())
        .collect();
    let names = design.feature_names().to_vec();
    effective_dof(truth, sigma2, replications, stream, |y, rep_stream| {
        let data = Dataset::new(columns.clone(), y.to_vec(), None, names.clone())?;
        let forest = fit_regression_forest(&data, mtry, maxnodes, n_trees, rep_stream)?;
        forest.predict(&data).map(|v| v.to_vec())
    })
}

/// Compute the DoF-matched TRIM budget for one sweep point: estimate the
/// SFS forest's DoF on a fixed design, then walk the maxnodes grid.
#[allow(clippy::too_many_arguments)]
fn match_point_budget(
    cfg: &NormalizedConfig,
    dgp: DgpName,
    n: usize,
    snr: f64,
    mtry: f64,
    stream: &RngStream,
) -> Result<(DofMatch, crate::analysis::DofEstimate)> {
    let n_train = ((n as f64) * 0.5).round() as usize;
    let sigma2 = calibrate_sigma2(dgp, snr)?;
    let design_spec = DgpSpec {
        name: dgp,
        n: n_train,
        snr: Some(snr),
        extra_noise_features: 0,
        seed: stream.child(0).key(),
    };
    let design = generate::<Real>(&design_spec)?;
    let truth: Vec<f64> = design.dataset.truth().unwrap().to_vec();

    let sfs = forest_dof_on_design(
        &design.dataset,
        &truth,
        sigma2,
        mtry,
        cfg.maxnodes,
        cfg.n_trees,
        cfg.dof_replications,
        &stream.child(1),
    )?;

    let grid: Vec<usize> = DEFAULT_MAXNODES_GRID
        .iter()
        .copied()
        .filter(|&m| cfg.maxnodes.map_or(true, |cap| m <= cap))
        .collect();
    let mut branch = 0u64;
    let matched = match_trim_dof(&sfs, &grid, |maxnodes| {
        branch += 1;
        forest_dof_on_design(
            &design.dataset,
            &truth,
            sigma2,
            1.0,
            Some(maxnodes),
            cfg.n_trees,
            cfg.dof_replications,
            &stream.child(1 + branch),
        )
    })?;
    Ok((matched, sfs))
}

fn run_job(ctx: &CampaignCtx, job: &Job) -> Result<(Vec<Row>, f64)> {
    let cfg = ctx.cfg;
    let stream = RngStream::new(cfg.master_seed).child(0).child(job.index as u64);
    let seed = stream.key();
    let started = Instant::now();
    let mut rows: Vec<Row> = Vec::with_capacity(job.expected_rows);

    match &job.params {
        JobParams::TrimTrial {
            dgp,
            n,
            snr,
            mtry,
        } => {
            let budget = *ctx
                .trim_budgets
                .get(&(*dgp, *n, snr.to_bits(), mtry.to_bits()))
                .expect("TRIM budget precomputed for every point");
            let gd = generate::<Real>(&DgpSpec {
                name: *dgp,
                n: *n,
                snr: Some(*snr),
                extra_noise_features: 0,
                seed: stream.child(0).key(),
            })?;
            let split = train_test_split(&gd.dataset, 0.5, &stream.child(1))?;
            let train = gd.dataset.subset(&split.train)?;
            let test = gd.dataset.subset(&split.test)?;
            let bagging = fit_eval(&train, &test, 1.0, cfg.maxnodes, cfg.n_trees, &stream.child(2))?;
            let sfs = fit_eval(&train, &test, *mtry, cfg.maxnodes, cfg.n_trees, &stream.child(3))?;
            let trim = fit_eval(&train, &test, 1.0, Some(budget), cfg.n_trees, &stream.child(4))?;
            let models = [
                ("bagging", 1.0, cfg.maxnodes, &bagging),
                ("sfs", *mtry, cfg.maxnodes, &sfs),
                ("trim", 1.0, Some(budget), &trim),
            ];
            for (name, m, nodes, fit) in models {
                let mut row = job.key.clone();
                row.extend([
                    name.to_string(),
                    fnum(m),
                    nodes.map_or("none".into(), |v| v.to_string()),
                    fnum(fit.train_mse),
                    fnum(fit.test_mse),
                    fnum(bagging.test_mse - fit.test_mse),
                    fnum(percent_decrease(bagging.test_mse, fit.test_mse)?),
                    seed.to_string(),
                ]);
                rows.push(row);
            }
        }
        JobParams::Hidden2dSingleTrial { snr, trial } => {
            let n = cfg.n_grid[0];
            let gd = generate::<Real>(&DgpSpec {
                name: DgpName::Hidden2d,
                n,
                snr: Some(*snr),
                extra_noise_features: 0,
                seed: stream.child(0).key(),
            })?;
            let split = train_test_split(&gd.dataset, 0.5, &stream.child(1))?;
            let train = gd.dataset.subset(&split.train)?;
            let test = gd.dataset.subset(&split.test)?;
            let sfs_mtry = cfg.mtry_grid[0];
            let bagging = fit_eval(&train, &test, 1.0, cfg.maxnodes, cfg.n_trees, &stream.child(2))?;
            let sfs = fit_eval(&train, &test, sfs_mtry, cfg.maxnodes, cfg.n_trees, &stream.child(3))?;
            for (name, m, fit) in [("bagging", 1.0, &bagging), ("sfs", sfs_mtry, &sfs)] {
                let mut row = job.key.clone();
                row.extend([
                    name.to_string(),
                    fnum(m),
                    fnum(fit.train_mse),
                    fnum(fit.test_mse),
                    fnum(percent_decrease(bagging.train_mse, fit.train_mse)?),
                    fnum(percent_decrease(bagging.test_mse, fit.test_mse)?),
                    seed.to_string(),
                ]);
                rows.push(row);
            }

            // Per-point squared errors across the full dataset (train and
            // test flags), plus one example tree per ensemble on trial 0.
            let points_path = ctx
                .dir
                .join(format!("points_snr{}_trial{trial}.csv", fnum(*snr)));
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record([
                "x1",
                "x2",
                "y",
                "f_true",
                "set",
                "sq_err_bagging",
                "sq_err_sfs",
            ])
            .map_err(Error::from)?;
            let is_train: std::collections::HashSet<usize> = split.train.iter().copied().collect();
            for i in 0..gd.dataset.n_rows() {
                let x = gd.dataset.row(i);
                let y = gd.dataset.response()[i];
                let eb = bagging.forest.predict_row(&x)? - y;
                let es = sfs.forest.predict_row(&x)? - y;
                wtr.write_record([
                    fnum(x[0]),
                    fnum(x[1]),
                    fnum(y),
                    fnum(gd.dataset.truth().unwrap()[i]),
                    if is_train.contains(&i) { "train" } else { "test" }.to_string(),
                    fnum(eb * eb),
                    fnum(es * es),
                ])
                .map_err(Error::from)?;
            }
            let bytes = wtr.into_inner().map_err(|e| Error::runtime(e.to_string()))?;
            write_atomic(&points_path, &bytes)?;
            if *trial == 0 {
                for (name, fit) in [("bagging", &bagging), ("sfs", &sfs)] {
                    let path = ctx.dir.join(format!("tree_{name}_snr{}.txt", fnum(*snr)));
                    write_atomic(&path, fit.forest.trees()[0].to_text().as_bytes())?;
                }
            }
        }
        JobParams::SweepTrial {
            dgp,
            n,
            snr,
            mtry,
        } => {
            let gd = generate::<Real>(&DgpSpec {
                name: *dgp,
                n: *n,
                snr: Some(*snr),
                extra_noise_features: 0,
                seed: stream.child(0).key(),
            })?;
            let split = train_test_split(&gd.dataset, 0.5, &stream.child(1))?;
            let train = gd.dataset.subset(&split.train)?;
            let test = gd.dataset.subset(&split.test)?;
            let bagging = fit_eval(&train, &test, 1.0, cfg.maxnodes, cfg.n_trees, &stream.child(2))?;
            let sfs = fit_eval(&train, &test, *mtry, cfg.maxnodes, cfg.n_trees, &stream.child(3))?;
            for (name, fit) in [("bagging", &bagging), ("sfs", &sfs)] {
                let mut row = job.key.clone();
                row.extend([
                    name.to_string(),
                    fnum(fit.train_mse),
                    fnum(fit.test_mse),
                    fnum(bagging.test_mse - fit.test_mse),
                    fnum(percent_decrease(bagging.train_mse, fit.train_mse)?),
                    fnum(percent_decrease(bagging.test_mse, fit.test_mse)?),
                    seed.to_string(),
                ]);
                rows.push(row);
            }
        }
        JobParams::BvdPoint {
            dgp,
            n,
            snr,
            mtry,
            extra,
            test_index,
        } => {
            let sigma2 = calibrate_sigma2(*dgp, *snr)?;
            // Shared noiseless test set: one draw per (dgp, n, snr, extra)
            // point, identical across the mtry grid.
            let test_stream = RngStream::new(cfg.master_seed).child(2).child(*test_index);
            let test = generate::<Real>(&DgpSpec {
                name: *dgp,
                n: 2000,
                snr: Some(*snr),
                extra_noise_features: *extra,
                seed: test_stream.key(),
            })?;
            let truth: Vec<f64> = test.dataset.truth().unwrap().to_vec();

            let preds: Vec<Vec<f64>> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| {
                    let tstream = stream.child(t as u64);
                    let gd = generate::<Real>(&DgpSpec {
                        name: *dgp,
                        n: *n,
                        snr: Some(*snr),
                        extra_noise_features: *extra,
                        seed: tstream.child(0).key(),
                    })?;
                    let forest = fit_regression_forest(
                        &gd.dataset,
                        *mtry,
                        cfg.maxnodes,
                        cfg.n_trees,
                        &tstream.child(1),
                    )?;
                    forest.predict(&test.dataset).map(|v| v.to_vec())
                })
                .collect::<Result<_>>()?;
            let d = bias_variance_decompose(&preds, &truth, sigma2)?;
            let mut row = job.key.clone();
            row.extend([
                cfg.trials.to_string(),
                fnum(d.bias2),
                fnum(d.variance),
                fnum(d.noise),
                fnum(d.total_mse),
                seed.to_string(),
            ]);
            rows.push(row);
        }
        JobParams::FirstDepthTrial {
            dgp,
            n,
            snr,
            extra,
            mtry,
        } => {
            let gd = generate::<Real>(&DgpSpec {
                name: *dgp,
                n: *n,
                snr: Some(*snr),
                extra_noise_features: *extra,
                seed: stream.child(0).key(),
            })?;
            let forest = fit_regression_forest(
                &gd.dataset,
                *mtry,
                cfg.maxnodes,
                cfg.n_trees,
                &stream.child(1),
            )?;
            let base_p = dgp.base_p();
            for j in 0..gd.dataset.n_features() {
                let group = if j >= base_p {
                    "noise"
                } else if j == 5 || j == 6 {
                    "hidden"
                } else {
                    "smooth"
                };
                let (mean, usage) = forest.average_first_depth(j)?;
                let mut row = job.key.clone();
                row.extend([
                    gd.dataset.feature_names()[j].clone(),
                    group.to_string(),
                    mean.map_or(String::new(), fnum),
                    fnum(usage),
                    seed.to_string(),
                ]);
                rows.push(row);
            }
        }
        JobParams::Demo { dgp } => {
            let n = cfg.n_grid[0];
            let gd = generate::<Real>(&DgpSpec {
                name: *dgp,
                n,
                snr: None,
                extra_noise_features: 0,
                seed: stream.child(0).key(),
            })?;
            let task_cfg = |mtry: f64, maxnodes: Option<usize>| {
                TreeConfig::new(Task::Classification)
                    .with_mtry(mtry)
                    .with_max_leaf_nodes(maxnodes)
            };
            let fit = |mtry: f64, maxnodes: Option<usize>, branch: u64| -> Result<Forest<Real>> {
                let s = stream.child(branch);
                let config = ForestConfig::new(cfg.n_trees, task_cfg(mtry, maxnodes), s.key());
                fit_forest_with_stream(&gd.dataset, &config, &s)
            };
            let bagging = fit(1.0, cfg.maxnodes, 1)?;
            let trim = fit(1.0, cfg.trim_maxnodes, 2)?;
            let sfs = fit(cfg.mtry_grid[0], cfg.maxnodes, 3)?;

            match dgp {
                DgpName::Band2dClass => {
                    // Dense 200x200 lattice over the unit square.
                    for i in 0..200 {
                        for jj in 0..200 {
                            let x = [i as f64 / 199.0, jj as f64 / 199.0];
                            let p_true = crate::dgp::eval_truth(DgpName::Band2dClass, &x)?;
                            let mut row = job.key.clone();
                            row.extend([
                                fnum(x[0]),
                                fnum(x[1]),
                                fnum(p_true),
                                bagging.predict_class(&x)?.to_string(),
                                trim.predict_class(&x)?.to_string(),
                                sfs.predict_class(&x)?.to_string(),
                                seed.to_string(),
                            ]);
                            rows.push(row);
                        }
                    }
                }
                DgpName::Sphere3dClass => {
                    for i in 0..gd.dataset.n_rows() {
                        let x = gd.dataset.row(i);
                        let mut row = job.key.clone();
                        row.extend([
                            fnum(x[0]),
                            fnum(x[1]),
                            fnum(x[2]),
                            fnum(gd.dataset.response()[i]),
                            bagging.predict_class(&x)?.to_string(),
                            trim.predict_class(&x)?.to_string(),
                            sfs.predict_class(&x)?.to_string(),
                            seed.to_string(),
                        ]);
                        rows.push(row);
                    }
                }
                other => {
                    return Err(Error::invalid(format!("`{other}` is not a demo DGP")));
                }
            }
        }
    }

    debug_assert_eq!(rows.len(), job.expected_rows);
    Ok((rows, started.elapsed().as_secs_f64()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_existing_rows(
    path: &Path,
    schema: &[&'static str],
    hash: &str,
    key_cols: usize,
) -> Result<HashMap<String, Vec<Row>>> {
    let mut by_key: HashMap<String, Vec<Row>> = HashMap::new();
    if !path.exists() {
        return Ok(by_key);
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    if headers != schema {
        return Err(Error::format(format!(
            "existing results.csv schema {headers:?} does not match the recipe schema"
        )));
    }
    for record in rdr.records() {
        let record = record?;
        let row: Row = record.iter().map(|f| f.to_string()).collect();
        if row.len() != schema.len() {
            return Err(Error::format("existing results.csv row has wrong arity"));
        }
        if row[0] != hash {
            return Err(Error::format(format!(
                "results.csv contains rows for config hash {}, expected {hash}; refusing to append",
                row[0]
            )));
        }
        let key = row[..key_cols].join("\u{1f}");
        by_key.entry(key).or_default().push(row);
    }
    Ok(by_key)
}

/// Run (or resume) a campaign with the given worker count.
pub fn run_campaign(config: &ExperimentConfig, workers: usize) -> Result<CampaignSummary> {
    let cfg = config.normalized()?;
    if workers == 0 {
        return Err(Error::invalid("workers must be at least 1"));
    }
    let hash = cfg.config_hash();
    let dir = cfg.campaign_dir();
    std::fs::create_dir_all(&dir)?;
    let plan = build_plan(&cfg, &hash);
    let results_path = dir.join("results.csv");
    let manifest_path = dir.join("manifest.json");

    let manifest = Manifest {
        config_hash: hash.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        schema: plan.schema.iter().map(|s| s.to_string()).collect(),
        config: cfg.clone(),
    };
    if manifest_path.exists() {
        let existing: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if existing.config_hash != hash {
            return Err(Error::format(format!(
                "manifest hash {} does not match config hash {hash}",
                existing.config_hash
            )));
        }
    } else {
        write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    }

    let mut by_key = load_existing_rows(&results_path, &plan.schema, &hash, plan.key_cols)?;
    // Drop groups that do not match a job or are incomplete.
    let job_by_key: HashMap<String, &Job> = plan
        .jobs
        .iter()
        .map(|j| (j.key.join("\u{1f}"), j))
        .collect();
    for (key, rows) in by_key.iter() {
        match job_by_key.get(key) {
            Some(job) if rows.len() == job.expected_rows => {}
            Some(_) => {}
            None => {
                return Err(Error::format(
                    "results.csv contains rows that do not correspond to any configured job",
                ));
            }
        }
    }
    by_key.retain(|key, rows| {
        job_by_key
            .get(key)
            .is_some_and(|job| rows.len() == job.expected_rows)
    });

    let missing: Vec<&Job> = plan
        .jobs
        .iter()
        .filter(|j| !by_key.contains_key(&j.key.join("\u{1f}")))
        .collect();
    let jobs_skipped = plan.jobs.len() - missing.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::runtime(format!("failed to build worker pool: {e}")))?;

    let mut ctx = CampaignCtx {
        cfg: &cfg,
        dir: dir.clone(),
        trim_budgets: HashMap::new(),
    };

    // TRIM recipe: match leaf budgets once per grid point before the
    // trial jobs, and persist the audit trail.
    if cfg.recipe == Recipe::TrimVsSfs && !missing.is_empty() {
        let mut points: Vec<(usize, DgpName, usize, f64, f64)> = Vec::new();
        let mut point_index = 0usize;
        for &dgp in &cfg.dgps {
            for &n in &cfg.n_grid {
                for &snr in &cfg.snr_grid {
                    for &mtry in &cfg.mtry_grid {
                        points.push((point_index, dgp, n, snr, mtry));
                        point_index += 1;
                    }
                }
            }
        }
        let match_root = RngStream::new(cfg.master_seed).child(1);
        let matched: Vec<(DgpName, usize, f64, f64, DofMatch, crate::analysis::DofEstimate)> =
            pool.install(|| {
                points
                    .par_iter()
                    .map(|&(idx, dgp, n, snr, mtry)| {
                        let (m, sfs) = match_point_budget(
                            &cfg,
                            dgp,
                            n,
                            snr,
                            mtry,
                            &match_root.child(idx as u64),
                        )?;
                        Ok((dgp, n, snr, mtry, m, sfs))
                    })
                    .collect::<Result<_>>()
            })?;
        let mut audit = csv::Writer::from_writer(Vec::new());
        audit
            .write_record([
                "dgp",
                "n",
                "snr",
                "sfs_mtry",
                "maxnodes",
                "dof",
                "dof_se",
                "target_dof",
                "chosen",
                "monotone",
            ])
            .map_err(Error::from)?;
        for (dgp, n, snr, mtry, m, _sfs) in &matched {
            for (nodes, est) in &m.estimates {
                audit
                    .write_record([
                        dgp.to_string(),
                        n.to_string(),
                        fnum(*snr),
                        fnum(*mtry),
                        nodes.to_string(),
                        fnum(est.dof),
                        fnum(est.standard_error),
                        fnum(m.target_dof),
                        (*nodes == m.chosen_maxnodes).to_string(),
                        m.monotone.to_string(),
                    ])
                    .map_err(Error::from)?;
            }
            ctx.trim_budgets
                .insert((*dgp, *n, snr.to_bits(), mtry.to_bits()), m.chosen_maxnodes);
        }
        let bytes = audit.into_inner().map_err(|e| Error::runtime(e.to_string()))?;
        write_atomic(&dir.join("dof_match.csv"), &bytes)?;
    }

    // Run missing jobs, appending rows as they complete so partial
    // campaigns remain resumable; the final table is rewritten in canonical
    // job order below. Wall times go to a sidecar so results.csv stays
    // deterministic and byte-identical across resumes and worker counts.
    let jobs_run = missing.len();
    if !missing.is_empty() {
        let file_exists = results_path.exists();
        let append_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&results_path)?;
        let mut append_wtr = csv::Writer::from_writer(append_file);
        if !file_exists {
            append_wtr.write_record(&plan.schema)?;
            append_wtr.flush()?;
        }
        let appender = Mutex::new(append_wtr);

        let timings_path = dir.join("timings.csv");
        let timings_exist = timings_path.exists();
        let timings_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&timings_path)?;
        let mut timings_wtr = csv::Writer::from_writer(timings_file);
        if !timings_exist {
            timings_wtr.write_record(["job", "wall_time"])?;
            timings_wtr.flush()?;
        }
        let timer = Mutex::new(timings_wtr);

        let new_rows: Vec<(String, Vec<Row>)> = pool.install(|| {
            missing
                .par_iter()
                .map(|job| {
                    let (rows, secs) = run_job(&ctx, job)?;
                    {
                        let mut wtr = appender.lock().unwrap();
                        for row in &rows {
                            wtr.write_record(row)?;
                        }
                        wtr.flush()?;
                    }
                    {
                        let mut wtr = timer.lock().unwrap();
                        wtr.write_record([job.key[2..].join("/"), format!("{secs:.3}")])?;
                        wtr.flush()?;
                    }
                    Ok((job.key.join("\u{1f}"), rows))
                })
                .collect::<Result<_>>()
        })?;
        drop(appender);
        for (key, rows) in new_rows {
            by_key.insert(key, rows);
        }
    }

    // Canonical rewrite: rows in job enumeration order.
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(&plan.schema)?;
    let mut total_rows = 0usize;
    for job in &plan.jobs {
        let rows = by_key
            .get(&job.key.join("\u{1f}"))
            .ok_or_else(|| Error::runtime("job produced no rows"))?;
        for row in rows {
            wtr.write_record(row)?;
            total_rows += 1;
        }
    }
    let bytes = wtr.into_inner().map_err(|e| Error::runtime(e.to_string()))?;
    write_atomic(&results_path, &bytes)?;

    Ok(CampaignSummary {
        dir,
        results_path,
        total_rows,
        jobs_run,
        jobs_skipped,
    })
}
