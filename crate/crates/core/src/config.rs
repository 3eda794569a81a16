//! Model, sparsity and run configuration.
//!
//! All structs reject unknown JSON keys. Missing keys take the desk-scale
//! defaults.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use trilevel_tensor::cosine_schedule;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub use_cls_token: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 6,
            d_model: 128,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            use_cls_token: true,
        }
    }
}

impl ViTConfig {
    /// DeiT-Tiny geometry at 224×224.
    pub fn deit_tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth: 12,
            d_model: 192,
            heads: 3,
            mlp_ratio: 4,
            num_classes: 1000,
            use_cls_token: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.num_classes < 2 {
            return bad("depth, channels, mlp_ratio must be >= 1 and num_classes >= 2".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length L = N (+1 with a class token).
    pub fn tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    /// `key=value` lines, the checkpoint header format.
    pub fn to_kv_text(&self) -> String {
        format!(
            "image_size={}\npatch_size={}\nchannels={}\ndepth={}\nd_model={}\nheads={}\nmlp_ratio={}\nnum_classes={}\nuse_cls_token={}\n",
            self.image_size,
            self.patch_size,
            self.channels,
            self.depth,
            self.d_model,
            self.heads,
            self.mlp_ratio,
            self.num_classes,
            self.use_cls_token
        )
    }

    /// Parses [`Self::to_kv_text`] output; extra keys are returned untouched.
    pub fn from_kv_text(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = Self::default();
        let mut seen = 0;
        let mut extra = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("malformed header line `{line}`")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| CoreError::Config(format!("bad value for {k}: `{v}`")))
            };
            match k {
                "image_size" => cfg.image_size = num()?,
                "patch_size" => cfg.patch_size = num()?,
                "channels" => cfg.channels = num()?,
                "depth" => cfg.depth = num()?,
                "d_model" => cfg.d_model = num()?,
                "heads" => cfg.heads = num()?,
                "mlp_ratio" => cfg.mlp_ratio = num()?,
                "num_classes" => cfg.num_classes = num()?,
                "use_cls_token" => {
                    cfg.use_cls_token = v
                        .parse()
                        .map_err(|_| CoreError::Config(format!("bad value for {k}: `{v}`")))?
                }
                _ => {
                    extra.push((k.to_string(), v.to_string()));
                    continue;
                }
            }
            seen += 1;
        }
        if seen != 9 {
            return Err(CoreError::Config(format!(
                "model header has {seen} of 9 required keys"
            )));
        }
        cfg.validate()?;
        Ok((cfg, extra))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TiebreakDirection {
    /// Lower attention variance is treated as less informative (removed first).
    #[default]
    LowVarianceFirst,
    HighVarianceFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RemovalPolicy {
    /// Forgetting counts with the attention-variance tiebreak.
    #[default]
    Forgetting,
    /// Uniformly random eviction at the same cadence (baseline).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsityConfig {
    pub r_e: f64,
    pub r_t: f64,
    pub r_a: f64,
    /// 1-based indices of the layers a selector runs in front of.
    pub prune_layers: Vec<usize>,
    pub rt_warmup_epochs: usize,
    pub update_period_epochs: usize,
    /// n: percent of |D| exchanged per remove-and-restore step.
    pub removal_step_pct: f64,
    /// m: percent of |D| removed up front; derived from `r_e` when absent.
    pub initial_removal_pct: Option<f64>,
    /// 1-based layer whose attention feeds the example statistic.
    pub variance_layer: Option<usize>,
    pub tiebreak_direction: TiebreakDirection,
    pub removal_policy: RemovalPolicy,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            r_e: 1.0,
            r_t: 1.0,
            r_a: 1.0,
            prune_layers: Vec::new(),
            rt_warmup_epochs: 0,
            update_period_epochs: 10,
            removal_step_pct: 5.0,
            initial_removal_pct: None,
            variance_layer: None,
            tiebreak_direction: TiebreakDirection::default(),
            removal_policy: RemovalPolicy::default(),
        }
    }
}

impl SparsityConfig {
    /// All three levels at ratio `rho` with the given selector layers.
    pub fn tri_level(rho: f64, prune_layers: Vec<usize>) -> Self {
        Self {
            r_e: rho,
            r_t: rho,
            r_a: rho,
            prune_layers,
            ..Self::default()
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        for (name, r) in [("r_e", self.r_e), ("r_t", self.r_t), ("r_a", self.r_a)] {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} = {r} must lie in (0, 1]"));
            }
        }
        if self.prune_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("prune_layers {:?} must be strictly increasing", self.prune_layers));
        }
        if let Some(&p) = self.prune_layers.iter().find(|&&p| p < 2 || p > depth) {
            return bad(format!("prune layer {p} must lie in [2, {depth}]"));
        }
        if self.update_period_epochs == 0 {
            return bad("update_period_epochs must be >= 1".into());
        }
        let m = self.initial_removal_pct();
        if let Some(given) = self.initial_removal_pct {
            if (given - (1.0 - self.r_e) * 100.0).abs() > 1e-6 {
                return bad(format!("initial_removal_pct {given} disagrees with r_e {}", self.r_e));
            }
        }
        if m > 0.0 && !(self.removal_step_pct > 0.0 && self.removal_step_pct <= m + 1e-9) {
            return bad(format!(
                "removal_step_pct {} must lie in (0, initial_removal_pct {m}]",
                self.removal_step_pct
            ));
        }
        if let Some(v) = self.variance_layer {
            if v == 0 || v > depth {
                return bad(format!("variance_layer {v} must lie in [1, {depth}]"));
            }
        }
        Ok(())
    }

    /// m, in percent of the full dataset.
    pub fn initial_removal_pct(&self) -> f64 {
        self.initial_removal_pct
            .unwrap_or_else(|| ((1.0 - self.r_e) * 100.0 * 1e9).round() / 1e9)
    }

    /// Token keep ratio after the cosine warm-up from 1.0.
    pub fn effective_r_t(&self, epoch: usize) -> f64 {
        if self.rt_warmup_epochs == 0 {
            self.r_t
        } else {
            cosine_schedule(epoch, self.rt_warmup_epochs, 1.0, self.r_t)
        }
    }

    pub fn has_selectors(&self) -> bool {
        !self.prune_layers.is_empty()
    }

    /// Layer feeding the example statistic: the one before the first
    /// selector when selectors run, the last layer otherwise.
    pub fn variance_layer_for(&self, depth: usize) -> usize {
        self.variance_layer.unwrap_or_else(|| match self.prune_layers.first() {
            Some(&p) => p - 1,
            None => depth,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic { train: usize, test: usize },
}

impl DatasetKind {
    pub const SYNTHETIC_DEFAULT: DatasetKind = DatasetKind::Synthetic {
        train: 2000,
        test: 500,
    };

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::Mnist),
            "cifar10" => Ok(Self::Cifar10),
            "synthetic" => Ok(Self::SYNTHETIC_DEFAULT),
            other => {
                let sizes = other.strip_prefix("synthetic:").and_then(|s| s.split_once('/'));
                match sizes.map(|(a, b)| (a.parse(), b.parse())) {
                    Some((Ok(train), Ok(test))) => Ok(Self::Synthetic { train, test }),
                    _ => Err(CoreError::Config(format!("unknown dataset `{other}`"))),
                }
            }
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mnist => write!(f, "mnist"),
            Self::Cifar10 => write!(f, "cifar10"),
            Self::Synthetic { train, test } => write!(f, "synthetic({train}/{test})"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticSizes {
    train: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DatasetRepr {
    Name(String),
    Synthetic {
        synthetic: SyntheticSizes,
    },
}

impl Serialize for DatasetKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Mnist => DatasetRepr::Name("mnist".into()),
            Self::Cifar10 => DatasetRepr::Name("cifar10".into()),
            Self::Synthetic { train, test } => DatasetRepr::Synthetic {
                synthetic: SyntheticSizes {
                    train: *train,
                    test: *test,
                },
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DatasetKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match DatasetRepr::deserialize(d)? {
            DatasetRepr::Name(n) => DatasetKind::parse(&n).map_err(serde::de::Error::custom),
            DatasetRepr::Synthetic { synthetic } => Ok(DatasetKind::Synthetic {
                train: synthetic.train,
                test: synthetic.test,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub sparsity: SparsityConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub lr_warmup_epochs: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::default(),
            sparsity: SparsityConfig {
                prune_layers: vec![2, 4, 6],
                rt_warmup_epochs: 5,
                ..SparsityConfig::default()
            },
            epochs: 60,
            batch_size: 128,
            base_lr: 5e-4,
            weight_decay: 0.05,
            lr_warmup_epochs: 5,
            seed: 0,
            dataset: DatasetKind::Cifar10,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sparsity.validate(self.model.depth)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(CoreError::Config(
                "base_lr must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_names() {
        assert_eq!(DatasetKind::parse("cifar10").unwrap(), DatasetKind::Cifar10);
        assert_eq!(
            DatasetKind::parse("synthetic:1000/300").unwrap(),
            DatasetKind::Synthetic { train: 1000, test: 300 }
        );
        assert!(DatasetKind::parse("synthetic:1000").is_err());
        assert!(DatasetKind::parse("imagenet").is_err());
    }

    #[test]
    fn token_arithmetic() {
        let c = ViTConfig::default();
        assert_eq!((c.num_patches(), c.tokens()), (64, 65));
        let c = ViTConfig {
            image_size: 28,
            patch_size: 7,
            channels: 1,
            ..ViTConfig::default()
        };
        assert_eq!((c.num_patches(), c.tokens()), (16, 17));
        assert_eq!(ViTConfig::deit_tiny().num_patches(), 196);
    }

    #[test]
    fn invalid_model_configs() {
        let c = ViTConfig {
            image_size: 30,
            ..ViTConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ViTConfig {
            heads: 3,
            ..ViTConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn sparsity_validation() {
        let mut s = SparsityConfig::tri_level(0.7, vec![2, 4, 6]);
        assert!(s.validate(6).is_ok());
        s.prune_layers = vec![1, 3];
        assert!(s.validate(6).is_err());
        s.prune_layers = vec![4, 3];
        assert!(s.validate(6).is_err());
        s.prune_layers = vec![3, 7];
        assert!(s.validate(6).is_err());
        let s = SparsityConfig {
            r_a: 0.0,
            ..SparsityConfig::default()
        };
        assert!(s.validate(6).is_err());
        let s = SparsityConfig {
            r_e: 0.9,
            removal_step_pct: 20.0,
            ..SparsityConfig::default()
        };
        assert!(s.validate(6).is_err());
        let s = SparsityConfig {
            r_e: 0.8,
            initial_removal_pct: Some(10.0),
            ..SparsityConfig::default()
        };
        assert!(s.validate(6).is_err());
    }

    #[test]
    fn derived_removal_pct_is_clean() {
        let s = SparsityConfig {
            r_e: 0.8,
            ..SparsityConfig::default()
        };
        assert_eq!(s.initial_removal_pct(), 20.0);
        let s = SparsityConfig {
            r_e: 0.9,
            ..SparsityConfig::default()
        };
        assert_eq!(s.initial_removal_pct(), 10.0);
    }

    #[test]
    fn warmup_endpoints() {
        let s = SparsityConfig {
            r_t: 0.7,
            rt_warmup_epochs: 10,
            ..SparsityConfig::default()
        };
        assert_eq!(s.effective_r_t(0), 1.0);
        assert_eq!(s.effective_r_t(10), 0.7);
        assert_eq!(s.effective_r_t(50), 0.7);
        assert!((s.effective_r_t(5) - 0.85).abs() < 1e-12);
    }

    #[test]
    fn variance_layer_defaults() {
        let s = SparsityConfig::tri_level(0.9, vec![2, 4, 6]);
        assert_eq!(s.variance_layer_for(6), 1);
        let s = SparsityConfig {
            r_e: 0.8,
            ..SparsityConfig::default()
        };
        assert_eq!(s.variance_layer_for(6), 6);
    }

    #[test]
    fn run_config_json_is_fail_closed() {
        let ok = r#"{"epochs": 3, "dataset": "synthetic", "sparsity": {"r_t": 0.9}}"#;
        let cfg = RunConfig::from_json(ok).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.dataset, DatasetKind::SYNTHETIC_DEFAULT);
        assert!(RunConfig::from_json(r#"{"epochs": 3, "bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sparsity": {"r_x": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"epochs": 0}"#).is_err());

        let sized = r#"{"dataset": {"synthetic": {"train": 64, "test": 16}}}"#;
        let cfg = RunConfig::from_json(sized).unwrap();
        assert_eq!(cfg.dataset, DatasetKind::Synthetic { train: 64, test: 16 });
        let back = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&back).unwrap(), cfg);
    }

    #[test]
    fn kv_header_round_trip() {
        let c = ViTConfig::deit_tiny();
        let (back, extra) = ViTConfig::from_kv_text(&(c.to_kv_text() + "dtype=f32\n")).unwrap();
        assert_eq!(back, c);
        assert_eq!(extra, vec![("dtype".to_string(), "f32".to_string())]);
        assert!(ViTConfig::from_kv_text("depth=3\n").is_err());
    }
}
