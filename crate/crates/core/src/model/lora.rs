use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::rng::{mix, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 3] = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value];

    pub fn short(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
        }
    }

    fn from_short(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.short() == s)
    }

    /// Name of the base projection this target adapts.
    pub fn weight_name(self, layer: usize) -> String {
        format!("layers.{layer}.w{}", self.short())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub every_n: usize,
    pub targets: Vec<LoraTarget>,
    /// Defaults to `rank`, giving a unit scale.
    pub alpha: f64,
}

impl LoraConfig {
    pub fn new(rank: usize, every_n: usize) -> Self {
        Self {
            rank,
            every_n,
            targets: LoraTarget::ALL.to_vec(),
            alpha: rank as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(ModelError::Config("lora rank must be >= 1".into()));
        }
        if self.every_n == 0 {
            return Err(ModelError::Config("lora every_n must be >= 1".into()));
        }
        if self.targets.is_empty() {
            return Err(ModelError::Config("lora targets must be non-empty".into()));
        }
        if !self.alpha.is_finite() {
            return Err(ModelError::Config("lora alpha must be finite".into()));
        }
        Ok(())
    }

    /// Benchmark grids only use strides that divide the usual depths.
    pub fn validate_benchmark(&self) -> Result<()> {
        self.validate()?;
        if ![1, 2, 4].contains(&self.every_n) {
            return Err(ModelError::Config("benchmark every_n must be 1, 2 or 4".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn adapted_layers(&self, layers: usize) -> Vec<usize> {
        (0..layers).filter(|i| i % self.every_n == 0).collect()
    }
}

/// One low-rank update `ΔW = scale · B·A` for a `d×d` projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub layer: usize,
    pub target: LoraTarget,
    /// `r × d`
    pub a: Tensor,
    /// `d × r`, zero at initialization
    pub b: Tensor,
}

impl LoraPair {
    pub fn a_name(&self) -> String {
        format!("lora.{}.{}.a", self.layer, self.target.short())
    }

    pub fn b_name(&self) -> String {
        format!("lora.{}.{}.b", self.layer, self.target.short())
    }

    pub fn delta(&self, scale: f64) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(scale))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapterSet {
    pub config: LoraConfig,
    pub hidden: usize,
    pub pairs: Vec<LoraPair>,
}

impl LoraAdapterSet {
    /// `A` entries are uniform in `±1/√d`; `B` starts at zero so the adapted
    /// model equals the base model.
    pub fn new(config: &LoraConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = model.hidden;
        let bound = 1.0 / (d as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("non-empty range");
        let mut rng = seeded(mix(seed, 0x10_4A));
        let mut targets = config.targets.clone();
        targets.sort();
        targets.dedup();
        let mut pairs = Vec::new();
        for layer in config.adapted_layers(model.layers) {
            for &target in &targets {
                let a = (0..config.rank * d).map(|_| dist.sample(&mut rng)).collect();
                pairs.push(LoraPair {
                    layer,
                    target,
                    a: Tensor::new(vec![config.rank, d], a)?,
                    b: Tensor::zeros(&[d, config.rank]),
                });
            }
        }
        Ok(Self {
            config: LoraConfig {
                targets,
                ..config.clone()
            },
            hidden: d,
            pairs,
        })
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.pairs.iter().map(|p| p.layer).collect();
        l.dedup();
        l
    }

    pub fn pair(&self, layer: usize, target: LoraTarget) -> Option<&LoraPair> {
        self.pairs.iter().find(|p| p.layer == layer && p.target == target)
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.pairs
            .iter()
            .flat_map(|p| [(p.a_name(), &p.a), (p.b_name(), &p.b)])
            .collect()
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let unknown = || ModelError::UnknownParam(name.to_string());
        let parts: Vec<&str> = name.split('.').collect();
        let [prefix, layer, target, which] = parts[..] else {
            return Err(unknown());
        };
        if prefix != "lora" {
            return Err(unknown());
        }
        let layer: usize = layer.parse().map_err(|_| unknown())?;
        let target = LoraTarget::from_short(target).ok_or_else(unknown)?;
        let pair = self
            .pairs
            .iter_mut()
            .find(|p| p.layer == layer && p.target == target)
            .ok_or_else(unknown)?;
        match which {
            "a" => Ok(&mut pair.a),
            "b" => Ok(&mut pair.b),
            _ => Err(unknown()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.pairs.iter().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Rebuilds a set from named tensors as stored in a checkpoint.
    pub fn from_named(config: LoraConfig, hidden: usize, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = Self {
            config,
            hidden,
            pairs: Vec::new(),
        };
        for (name, t) in tensors {
            let parts: Vec<&str> = name.split('.').collect();
            let bad = || ModelError::Checkpoint(format!("bad adapter tensor name {name}"));
            let [_, layer, target, _] = parts[..] else {
                return Err(bad());
            };
            let layer: usize = layer.parse().map_err(|_| bad())?;
            let target = LoraTarget::from_short(target).ok_or_else(bad)?;
            if set.pair(layer, target).is_none() {
                set.pairs.push(LoraPair {
                    layer,
                    target,
                    a: Tensor::zeros(&[set.config.rank, hidden]),
                    b: Tensor::zeros(&[hidden, set.config.rank]),
                });
            }
            let slot = set.get_mut(&name)?;
            if slot.shape() != t.shape() {
                return Err(ModelError::Shape(format!("{name}: {:?}", t.shape())));
            }
            *slot = t;
        }
        Ok(set)
    }
}

/// Folds the adapters into the adapted projections. Merging the same
/// parameters twice is refused.
pub fn merge_lora(params: &ModelParams, adapters: &LoraAdapterSet) -> Result<ModelParams> {
    if params.lora_merged {
        return Err(ModelError::AlreadyMerged);
    }
    let mut out = params.clone();
    let scale = adapters.scale();
    for p in &adapters.pairs {
        let delta = p.delta(scale)?;
        let w = out.get_mut(&p.target.weight_name(p.layer))?;
        if w.shape() != delta.shape() {
            return Err(ModelError::Shape(format!(
                "adapter {:?} vs weight {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        w.add_assign(&delta);
    }
    out.lora_merged = true;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum CountMode {
    Lora {
        rank: usize,
        every_n: usize,
        targets: usize,
    },
    /// Every Q, K and V projection.
    FullAttn,
    EmbeddingOnly {
        rows: usize,
    },
    /// Every tensor of [`ModelParams`].
    All {
        vocab_size: usize,
        context_len: usize,
        mlp_hidden: usize,
    },
}

pub fn count_trainable_params(d: usize, layers: usize, mode: &CountMode) -> u64 {
    let (d, l) = (d as u64, layers as u64);
    match *mode {
        CountMode::Lora {
            rank,
            every_n,
            targets,
        } => 2 * d * rank as u64 * targets as u64 * l.div_ceil(every_n.max(1) as u64),
        CountMode::FullAttn => 3 * d * d * l,
        CountMode::EmbeddingOnly { rows } => rows as u64 * d,
        CountMode::All {
            vocab_size,
            context_len,
            mlp_hidden,
        } => {
            let (v, c, m) = (vocab_size as u64, context_len as u64, mlp_hidden as u64);
            let per_layer = 4 * d * d + 3 * d * m + 2 * d;
            2 * v * d + c * d + l * per_layer + d
        }
    }
}

/// Millions with one decimal, rounded to nearest.
pub fn format_millions(count: u64) -> String {
    format!("{:.1}M", count as f64 / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lora(rank: usize, every_n: usize) -> CountMode {
        CountMode::Lora {
            rank,
            every_n,
            targets: 3,
        }
    }

    #[test]
    fn large_scale_counts() {
        assert_eq!(count_trainable_params(4096, 32, &lora(16, 1)), 12_582_912);
        assert_eq!(count_trainable_params(4096, 32, &lora(256, 1)), 201_326_592);
        assert_eq!(count_trainable_params(4096, 32, &CountMode::FullAttn), 1_610_612_736);
        assert_eq!(format_millions(12_582_912), "12.6M");
        assert_eq!(format_millions(1_610_612_736), "1610.6M");
        assert_eq!(format_millions(count_trainable_params(4096, 32, &lora(16, 2))), "6.3M");
    }

    #[test]
    fn stride_equal_to_depth_adapts_one_layer() {
        for l in [1, 3, 4, 32] {
            let c = LoraConfig::new(2, l);
            assert_eq!(c.adapted_layers(l), vec![0]);
            assert_eq!(
                count_trainable_params(8, l, &lora(2, l)),
                count_trainable_params(8, 1, &lora(2, 1))
            );
        }
        assert_eq!(LoraConfig::new(2, 2).adapted_layers(5), vec![0, 2, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(LoraConfig::new(0, 1).validate().is_err());
        assert!(LoraConfig::new(1, 0).validate().is_err());
        assert!(LoraConfig::new(1, 3).validate_benchmark().is_err());
        let mut c = LoraConfig::new(2, 1);
        c.targets.clear();
        assert!(c.validate().is_err());
        assert_eq!(LoraConfig::new(4, 1).scale(), 1.0);
    }

    proptest! {
        #[test]
        fn adapter_set_size_matches_count(rank in 1usize..5, every_n in 1usize..5, layers in 1usize..6, half in 1usize..5) {
            let d = half * 2;
            let model = ModelConfig {
                layers,
                hidden: d,
                heads: 2,
                vocab_size: 10,
                context_len: 8,
                text_max: 2,
                rms_eps: 1e-5,
            };
            let set = LoraAdapterSet::new(&LoraConfig::new(rank, every_n), &model, 3).unwrap();
            prop_assert_eq!(
                set.param_count() as u64,
                count_trainable_params(d, layers, &lora(rank, every_n))
            );
            prop_assert!(set.pairs.iter().all(|p| p.b.data().iter().all(|&v| v == 0.0)));
        }
    }
}
