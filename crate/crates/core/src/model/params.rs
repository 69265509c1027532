use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Provenance, Result};
use crate::rng::{mix, seeded, Rng};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// All transformer weights. Projections are stored `in × out` and applied
/// as `x · W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub head: Tensor,
    pub provenance: Provenance,
    pub lora_merged: bool,
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

impl ModelParams {
    /// Scaled-normal initialization (std 0.02; residual output projections
    /// use 0.02/√(2L)); norm gains start at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let m = config.mlp_hidden();
        let out_std = INIT_STD / (2.0 * config.layers as f64).sqrt();
        let mut rng = seeded(mix(seed, 0x1417));
        let tok_emb = normal(&mut rng, &[config.vocab_size, d], INIT_STD);
        let pos_emb = normal(&mut rng, &[config.context_len, d], INIT_STD);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::ones(&[d]),
                wq: normal(&mut rng, &[d, d], INIT_STD),
                wk: normal(&mut rng, &[d, d], INIT_STD),
                wv: normal(&mut rng, &[d, d], INIT_STD),
                wo: normal(&mut rng, &[d, d], out_std),
                mlp_norm: Tensor::ones(&[d]),
                w_gate: normal(&mut rng, &[d, m], INIT_STD),
                w_up: normal(&mut rng, &[d, m], INIT_STD),
                w_down: normal(&mut rng, &[m, d], out_std),
            })
            .collect();
        let head = normal(&mut rng, &[d, config.vocab_size], INIT_STD);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::ones(&[d]),
            head,
            provenance: Provenance::Init,
            lora_merged: false,
        })
    }

    /// Grows the embedding table and output head for newly registered
    /// placeholder tokens, drawing the new entries like the originals.
    pub fn extend_vocab(&mut self, new_tokens: usize, seed: u64) {
        if new_tokens == 0 {
            return;
        }
        let d = self.config.hidden;
        let mut rng = seeded(mix(seed, 0x9E11 + self.config.vocab_size as u64));
        let rows = normal(&mut rng, &[new_tokens, d], INIT_STD);
        let cols = normal(&mut rng, &[d, new_tokens], INIT_STD);
        self.tok_emb.push_rows(&rows).expect("row width matches");
        self.head.push_cols(&cols).expect("column height matches");
        self.config.vocab_size += new_tokens;
    }

    /// Tensors in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let unknown = || ModelError::UnknownParam(name.to_string());
        match name {
            "tok_emb" => return Ok(&mut self.tok_emb),
            "pos_emb" => return Ok(&mut self.pos_emb),
            "final_norm" => return Ok(&mut self.final_norm),
            "head" => return Ok(&mut self.head),
            _ => {}
        }
        let rest = name.strip_prefix("layers.").ok_or_else(unknown)?;
        let (idx, field) = rest.split_once('.').ok_or_else(unknown)?;
        let idx: usize = idx.parse().map_err(|_| unknown())?;
        let l = self.layers.get_mut(idx).ok_or_else(unknown)?;
        Ok(match field {
            "attn_norm" => &mut l.attn_norm,
            "wq" => &mut l.wq,
            "wk" => &mut l.wk,
            "wv" => &mut l.wv,
            "wo" => &mut l.wo,
            "mlp_norm" => &mut l.mlp_norm,
            "w_gate" => &mut l.w_gate,
            "w_up" => &mut l.w_up,
            "w_down" => &mut l.w_down,
            _ => return Err(unknown()),
        })
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{count_trainable_params, CountMode};

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 4,
            vocab_size: 40,
            context_len: 24,
            text_max: 8,
            rms_eps: 1e-5,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&cfg(), 7).unwrap();
        let b = ModelParams::init(&cfg(), 7).unwrap();
        for ((_, x), (_, y)) in a.named().iter().zip(b.named()) {
            assert!(x.bit_eq(y));
        }
        let c = ModelParams::init(&cfg(), 8).unwrap();
        assert!(!a.tok_emb.bit_eq(&c.tok_emb));
    }

    #[test]
    fn count_matches_closed_form() {
        let c = cfg();
        let p = ModelParams::init(&c, 1).unwrap();
        let closed = count_trainable_params(
            c.hidden,
            c.layers,
            &CountMode::All {
                vocab_size: c.vocab_size,
                context_len: c.context_len,
                mlp_hidden: c.mlp_hidden(),
            },
        );
        assert_eq!(p.param_count() as u64, closed);
    }

    #[test]
    fn embedding_magnitude_matches_half_normal() {
        // E|X| = σ√(2/π); Var|X| = σ²(1 - 2/π)
        let c = ModelConfig { vocab_size: 400, hidden: 64, ..cfg() };
        let p = ModelParams::init(&c, 3).unwrap();
        let n = p.tok_emb.len() as f64;
        let mean = p.tok_emb.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        let expect = INIT_STD * (2.0 / std::f64::consts::PI).sqrt();
        let sd = INIT_STD * (1.0 - 2.0 / std::f64::consts::PI).sqrt() / n.sqrt();
        assert!((mean - expect).abs() < 3.0 * sd, "{mean} vs {expect} ± {sd}");
    }

    #[test]
    fn extend_vocab_grows_both_ends() {
        let mut p = ModelParams::init(&cfg(), 1).unwrap();
        let before = p.tok_emb.clone();
        p.extend_vocab(3, 5);
        assert_eq!(p.tok_emb.shape(), &[43, 16]);
        assert_eq!(p.head.shape(), &[16, 43]);
        assert_eq!(p.config.vocab_size, 43);
        assert_eq!(&p.tok_emb.data()[..before.len()], before.data());
    }

    #[test]
    fn named_lookup() {
        let mut p = ModelParams::init(&cfg(), 1).unwrap();
        assert_eq!(p.get("layers.1.wq").unwrap().shape(), &[16, 16]);
        p.get_mut("layers.1.w_down").unwrap().data_mut()[0] = 9.0;
        assert_eq!(p.layers[1].w_down.data()[0], 9.0);
        assert!(p.get_mut("layers.7.wq").is_err());
        assert!(p.get("nope").is_err());
    }
}
