//! Pipeline configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use roadsurf::enhance::DEFAULT_ENHANCE_CLASSES;
use roadsurf::io::ClassTable;
use roadsurf::loss::LossWeights;
use roadsurf::occlusion::{
    SupervisionPolicy, DEFAULT_DILATION_RADIUS, DEFAULT_NON_GROUND_CLASSES, DEFAULT_OCCLUDER_CLASSES,
};
use roadsurf::optim::OptimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    pub enabled: bool,
    pub classes: Vec<String>,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            classes: names(&DEFAULT_ENHANCE_CLASSES),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Supervise occluded pixels with the inpainted image when one exists.
    pub use_inpainted: bool,
    pub occluder_classes: Vec<String>,
    /// Pixels of these classes are never supervised.
    pub non_ground_classes: Vec<String>,
    pub dilation_radius: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            use_inpainted: true,
            occluder_classes: names(&DEFAULT_OCCLUDER_CLASSES),
            non_ground_classes: names(&DEFAULT_NON_GROUND_CLASSES),
            dilation_radius: DEFAULT_DILATION_RADIUS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    /// Meters per cell.
    pub resolution: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self { resolution: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Root of every random stream; copied into `optim.seed`.
    pub seed: u64,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub enhance: EnhanceConfig,
    pub occlusion: OcclusionConfig,
    pub bev: BevConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            seed: 0,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            enhance: EnhanceConfig::default(),
            occlusion: OcclusionConfig::default(),
            bev: BevConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        cfg.optim.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml_str(&text).with_context(|| format!("config {}", p.display()))
            }
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.optim.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("dataset", &self.dataset), ("out", &self.out)] {
            if matches!(p, Some(p) if p.as_os_str().is_empty()) {
                bail!("{key} path is empty");
            }
        }
        self.optim.validate()?;
        self.loss.validate()?;
        if !(self.bev.resolution > 0.0 && self.bev.resolution.is_finite()) {
            bail!("bev.resolution must be positive");
        }
        Ok(())
    }

    /// Checks that every class the config names exists in `classes`.
    pub fn check_classes(&self, classes: &ClassTable) -> Result<()> {
        let lists = [
            ("enhance.classes", &self.enhance.classes),
            ("occlusion.occluder_classes", &self.occlusion.occluder_classes),
            ("occlusion.non_ground_classes", &self.occlusion.non_ground_classes),
        ];
        for (key, list) in lists {
            for name in list {
                if classes.index_of(name).is_none() {
                    bail!("{key}: class `{name}` is not in classes.json");
                }
            }
        }
        Ok(())
    }

    pub fn enhance_class_ids(&self, classes: &ClassTable) -> Result<Vec<u16>> {
        self.check_classes(classes)?;
        Ok(self
            .enhance
            .classes
            .iter()
            .filter_map(|n| classes.index_of(n))
            .collect())
    }

    pub fn policy(&self, classes: &ClassTable) -> Result<SupervisionPolicy> {
        self.check_classes(classes)?;
        let mut p = SupervisionPolicy::from_names(
            &classes.names,
            &self.occlusion.occluder_classes,
            &self.occlusion.non_ground_classes,
            self.occlusion.dilation_radius,
        )?;
        p.use_inpainted = self.occlusion.use_inpainted;
        p.use_enhanced = self.enhance.enabled;
        Ok(p)
    }

    /// SHA-256 of the canonical JSON form, excluding paths and the iteration
    /// count so that resumed runs hash the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = None;
        c.out = None;
        c.optim.iterations = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
