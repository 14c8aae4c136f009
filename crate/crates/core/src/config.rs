//! Run configuration and the shared structured-text config loader.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerConfig;
use crate::error::{Error, Result};
use crate::gmm::{CovarianceKind, MixtureConfig};
use crate::graph::GraphDims;

/// Every hyperparameter of a training and evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_classes: usize,
    #[serde(alias = "L")]
    pub l: usize,
    #[serde(alias = "T")]
    pub t: usize,
    #[serde(alias = "M")]
    pub m: usize,
    #[serde(alias = "D_vis")]
    pub d_vis: usize,
    pub scales: Vec<usize>,
    pub k_init: usize,
    /// Mixture weight below which a kernel is pruned at epoch end.
    pub prune_threshold: f64,
    /// Weight of the covariance penalty.
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub d_phi: usize,
    pub d_coord: usize,
    pub d_edge_c: usize,
    /// Hidden width of the coordinate networks.
    pub graph_hidden: usize,
    /// Hidden width of each membership network.
    pub membership_hidden: usize,
    /// Sub-graphs sampled per (video, scale).
    pub subgraph_budget: usize,
    /// Test-time budget; the training budget when absent.
    pub test_budget: Option<usize>,
    /// Sub-graph vectors per optimization step.
    pub batch_size: usize,
    /// Videos pooled into one step's sub-graph draw.
    pub videos_per_batch: usize,
    pub ema_decay: f64,
    pub var_floor: f64,
    /// Batch mass below which a kernel sits out of that step's loss.
    pub min_kernel_mass: f64,
    pub covariance: CovarianceKind,
    /// Learning-rate multiplier for the shared graph networks.
    pub graph_lr_scale: f64,
    /// Joint gradient-norm ceiling per step; no clipping when absent.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_classes: 5,
            l: 4,
            t: 16,
            m: 8,
            d_vis: 64,
            scales: vec![3, 4, 5],
            k_init: 6,
            prune_threshold: 0.02,
            lambda: 0.05,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay: 0.1,
            decay_every: 20,
            epochs: 50,
            d_phi: 64,
            d_coord: 32,
            d_edge_c: 32,
            graph_hidden: 64,
            membership_hidden: 32,
            subgraph_budget: 2048,
            test_budget: None,
            batch_size: 32,
            videos_per_batch: 1,
            ema_decay: 0.9,
            var_floor: 1e-6,
            min_kernel_mass: 1.0,
            covariance: CovarianceKind::Diagonal,
            graph_lr_scale: 0.001,
            grad_clip: Some(10.0),
            seed: 0,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be >= 1")));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = load_structured(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("l", self.l),
            ("t", self.t),
            ("m", self.m),
            ("d_vis", self.d_vis),
            ("k_init", self.k_init),
            ("d_phi", self.d_phi),
            ("d_coord", self.d_coord),
            ("d_edge_c", self.d_edge_c),
            ("graph_hidden", self.graph_hidden),
            ("membership_hidden", self.membership_hidden),
            ("subgraph_budget", self.subgraph_budget),
            ("batch_size", self.batch_size),
            ("videos_per_batch", self.videos_per_batch),
        ] {
            positive(name, v)?;
        }
        if self.test_budget == Some(0) {
            return Err(Error::Config("test_budget must be >= 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("scales must not be empty".into()));
        }
        let mut sorted = self.scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.scales {
            return Err(Error::Config("scales must be strictly increasing".into()));
        }
        let n = self.l * self.m;
        if let Some(&s) = self.scales.iter().find(|&&s| s < 2 || s > n) {
            return Err(Error::Config(format!("scale {s} outside [2, L·M = {n}]")));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return Err(Error::Config("prune_threshold must lie in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if !(self.var_floor > 0.0 && self.var_floor.is_finite()) {
            return Err(Error::Config("var_floor must be > 0".into()));
        }
        if !(self.graph_lr_scale >= 0.0 && self.graph_lr_scale.is_finite()) {
            return Err(Error::Config("graph_lr_scale must be >= 0".into()));
        }
        if !(self.min_kernel_mass >= 0.0 && self.min_kernel_mass.is_finite()) {
            return Err(Error::Config("min_kernel_mass must be >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("grad_clip must be > 0".into()));
            }
        }
        if self.covariance == CovarianceKind::Full {
            let big = self.scales.iter().map(|&s| self.graph_dims().d_x(s)).max().unwrap_or(0);
            if big > 16 {
                return Err(Error::Config(format!(
                    "full covariance is limited to D_x <= 16, largest scale gives {big}"
                )));
            }
        }
        self.optimizer().validate()
    }

    pub fn graph_dims(&self) -> GraphDims {
        GraphDims {
            d_vis: self.d_vis,
            t: self.t,
            d_phi: self.d_phi,
            d_coord: self.d_coord,
            d_edge_c: self.d_edge_c,
            hidden: self.graph_hidden,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
            decay_every: self.decay_every,
            epochs: self.epochs,
        }
    }

    pub fn mixture(&self) -> MixtureConfig {
        MixtureConfig {
            lambda: self.lambda,
            var_floor: self.var_floor,
            covariance: self.covariance,
            min_mass: self.min_kernel_mass,
        }
    }

    pub fn test_budget(&self) -> usize {
        self.test_budget.unwrap_or(self.subgraph_budget)
    }
}

/// Reads a config file as JSON when its first non-blank character is `{`,
/// otherwise as `key = value` TOML. Unknown keys are errors when the target
/// type denies them.
pub fn load_structured<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_structured(&text).map_err(|m| Error::Config(format!("{}: {m}", path.display())))
}

pub fn parse_structured<T: DeserializeOwned>(text: &str) -> std::result::Result<T, String> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| e.to_string())
    } else {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}
