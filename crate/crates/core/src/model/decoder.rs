//! Tape-free incremental decoder with a key/value cache, used for inference.

use super::lora::LoraPair;
use super::tape::checked_ids;
use super::{LoraAdapterSet, LoraTarget, ModelError, ModelParams, Result};
use crate::tensor::kernels::{dot, matmul_acc, rms_norm_row, silu, softmax_in_place};
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, SPECIALS};

/// `out = x · w (+ scale · (x·B)·A)` for a single row.
fn project(x: &[f64], w: &Tensor, lora: Option<&LoraPair>, scale: f64, out: &mut [f64]) {
    let (k, n) = (w.rows(), w.cols());
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_acc(x, w.data(), out, 1, k, n);
    if let Some(p) = lora {
        let r = p.a.rows();
        let mut low = vec![0.0; r];
        matmul_acc(x, p.b.data(), &mut low, 1, k, r);
        let mut delta = vec![0.0; n];
        matmul_acc(&low, p.a.data(), &mut delta, 1, r, n);
        for (o, d) in out.iter_mut().zip(delta) {
            *o += scale * d;
        }
    }
}

/// Streams tokens one at a time through the model, caching keys and values.
#[derive(Clone, Debug)]
pub struct Decoder<'p> {
    params: &'p ModelParams,
    adapters: Option<&'p LoraAdapterSet>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    next_pos: usize,
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p ModelParams, adapters: Option<&'p LoraAdapterSet>) -> Self {
        let l = params.layers.len();
        Self {
            params,
            adapters,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
            next_pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn next_position(&self) -> usize {
        self.next_pos
    }

    fn lora(&self, layer: usize, target: LoraTarget) -> Option<&'p LoraPair> {
        self.adapters.and_then(|a| a.pair(layer, target))
    }

    /// Feeds every token of `seq` using the anchored position layout and
    /// returns the logits row after the last token.
    pub fn prefill(&mut self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let cfg = &self.params.config;
        let positions = cfg.positions(seq, SPECIALS.img_start)?;
        let mut last = Vec::new();
        for (&id, &pos) in seq.ids.iter().zip(&positions) {
            last = self.step(id, pos)?;
        }
        Ok(last)
    }

    /// Feeds one token at the position following the previous one.
    pub fn push(&mut self, id: u32) -> Result<Vec<f64>> {
        self.step(id, self.next_pos)
    }

    /// Feeds one token at an explicit position and returns the full logits
    /// row predicting the next token.
    pub fn step(&mut self, id: u32, pos: usize) -> Result<Vec<f64>> {
        let p = self.params;
        let cfg = &p.config;
        if (id as usize) >= cfg.vocab_size {
            return Err(ModelError::BadToken {
                id,
                size: cfg.vocab_size,
            });
        }
        if pos >= cfg.context_len || self.len >= cfg.context_len {
            return Err(ModelError::Overlong {
                needed: pos.max(self.len) + 1,
                limit: cfg.context_len,
            });
        }
        let d = cfg.hidden;
        let (heads, hd) = (cfg.heads, cfg.head_dim());
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let scale = self.adapters.map_or(1.0, |a| a.scale());
        let t = self.len + 1;

        let mut x: Vec<f64> = p
            .tok_emb
            .row(id as usize)
            .iter()
            .zip(p.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut h = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut attn = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut scores = vec![0.0; t];
        let m = cfg.mlp_hidden();
        let mut gate = vec![0.0; m];
        let mut up = vec![0.0; m];

        for (li, layer) in p.layers.iter().enumerate() {
            rms_norm_row(&x, layer.attn_norm.data(), cfg.rms_eps, &mut h);
            project(&h, &layer.wq, self.lora(li, LoraTarget::Query), scale, &mut q);
            project(&h, &layer.wk, self.lora(li, LoraTarget::Key), scale, &mut k);
            project(&h, &layer.wv, self.lora(li, LoraTarget::Value), scale, &mut v);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (keys, values) = (&self.keys[li], &self.values[li]);
            for hi in 0..heads {
                let (s, e) = (hi * hd, (hi + 1) * hd);
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc = dot(&q[s..e], &keys[j * d + s..j * d + e]) * inv_sqrt;
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[s..e];
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, &pj) in scores.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&values[j * d + s..j * d + e]) {
                        *o += pj * vv;
                    }
                }
            }
            project(&attn, &layer.wo, None, 1.0, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            rms_norm_row(&x, layer.mlp_norm.data(), cfg.rms_eps, &mut h);
            project(&h, &layer.w_gate, None, 1.0, &mut gate);
            project(&h, &layer.w_up, None, 1.0, &mut up);
            for (g, u) in gate.iter_mut().zip(&up) {
                *g = silu(*g) * u;
            }
            project(&gate, &layer.w_down, None, 1.0, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }
        rms_norm_row(&x.clone(), p.final_norm.data(), cfg.rms_eps, &mut x);
        let mut logits = vec![0.0; cfg.vocab_size];
        matmul_acc(&x, p.head.data(), &mut logits, 1, d, cfg.vocab_size);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(ModelError::Tensor(crate::tensor::TensorError::NonFinite("decoder")));
        }
        self.len = t;
        self.next_pos = pos + 1;
        Ok(logits)
    }
}

/// Logits for every position of `seq` (`T × V`); row `t` scores token `t+1`.
pub fn forward_logits(
    params: &ModelParams,
    seq: &TokenSequence,
    adapters: Option<&LoraAdapterSet>,
) -> Result<Tensor> {
    let cfg = &params.config;
    checked_ids(seq, cfg.vocab_size)?;
    let positions = cfg.positions(seq, SPECIALS.img_start)?;
    let mut dec = Decoder::new(params, adapters);
    let mut data = Vec::with_capacity(seq.ids.len() * cfg.vocab_size);
    for (&id, &pos) in seq.ids.iter().zip(&positions) {
        data.extend(dec.step(id, pos)?);
    }
    Ok(Tensor::new(vec![seq.ids.len(), cfg.vocab_size], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{merge_lora, LoraConfig, ModelConfig};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn cfg(layers: usize, hidden: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            layers,
            hidden,
            heads,
            vocab_size: 24,
            context_len: 20,
            text_max: 6,
            rms_eps: 1e-5,
        }
    }

    fn random_seq(seed: u64, n: usize) -> TokenSequence {
        let mut rng = seeded(seed);
        let mut ids: Vec<u32> = (0..3).map(|_| rng.random_range(5..24)).collect();
        ids.push(2);
        ids.extend((0..n).map(|_| rng.random_range(5..24)));
        TokenSequence::new(ids, 4)
    }

    fn random_adapters(p: &ModelParams, rank: usize, every_n: usize, seed: u64) -> LoraAdapterSet {
        let mut set = LoraAdapterSet::new(&LoraConfig::new(rank, every_n), &p.config, seed).unwrap();
        let mut rng = seeded(seed + 1);
        for pair in &mut set.pairs {
            for v in pair.b.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        set
    }

    #[test]
    fn rejects_overlong_and_bad_tokens() {
        let p = ModelParams::init(&cfg(1, 8, 2), 1).unwrap();
        assert!(matches!(
            forward_logits(&p, &random_seq(1, 15), None),
            Err(ModelError::Overlong { .. })
        ));
        let bad = TokenSequence::new(vec![0, 99], 2);
        assert!(matches!(forward_logits(&p, &bad, None), Err(ModelError::BadToken { .. })));
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let p = ModelParams::init(&ModelConfig::desk(90), 11).unwrap();
        let mut ids = vec![0u32, 10, 11, 2];
        let mut rng = seeded(4);
        ids.extend((0..60).map(|_| rng.random_range(0..90u32)));
        let seq = TokenSequence::new(ids, 4);
        let logits = forward_logits(&p, &seq, None).unwrap();
        let mut total = 0.0;
        let n = seq.ids.len() - 1;
        for t in 0..n {
            let row = Tensor::vector(logits.row(t).to_vec());
            total += crate::tensor::cross_entropy_from_logits(&row, seq.ids[t + 1] as usize).unwrap();
        }
        let mean = total / n as f64;
        let uniform = 90f64.ln();
        assert!((mean - uniform).abs() < 0.05 * uniform, "{mean} vs {uniform}");
    }

    #[test]
    fn kv_prefill_matches_full_forward() {
        let p = ModelParams::init(&cfg(2, 8, 2), 3).unwrap();
        let seq = random_seq(5, 6);
        let full = forward_logits(&p, &seq, None).unwrap();
        let mut dec = Decoder::new(&p, None);
        let head = TokenSequence::new(seq.ids[..6].to_vec(), 4);
        dec.prefill(&head).unwrap();
        let mut last = Vec::new();
        for &id in &seq.ids[6..] {
            last = dec.push(id).unwrap();
        }
        assert_eq!(&last[..], full.row(seq.ids.len() - 1));
    }

    #[test]
    fn merge_twice_is_refused() {
        let p = ModelParams::init(&cfg(2, 8, 2), 3).unwrap();
        let set = random_adapters(&p, 2, 1, 7);
        let merged = merge_lora(&p, &set).unwrap();
        assert!(matches!(merge_lora(&merged, &set), Err(ModelError::AlreadyMerged)));
        let zero = LoraAdapterSet::new(&LoraConfig::new(2, 1), &p.config, 7).unwrap();
        let same = merge_lora(&p, &zero).unwrap();
        for ((_, a), (_, b)) in same.named().iter().zip(p.named()) {
            assert!(a.bit_eq(b));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prefix_perturbation_leaves_earlier_rows(
            layers in 1usize..3, heads in 1usize..3, seed in 0u64..1000,
            j in 1usize..10, with_lora in any::<bool>(),
        ) {
            let p = ModelParams::init(&cfg(layers, 4 * heads, heads), seed).unwrap();
            let set = random_adapters(&p, 2, 1, seed);
            let adapters = with_lora.then_some(&set);
            let seq = random_seq(seed, 6);
            // position 3 holds IMG_START, which anchors the layout
            prop_assume!(j != 3);
            let mut other = seq.clone();
            other.ids[j] = if other.ids[j] == 5 { 6 } else { 5 };
            let a = forward_logits(&p, &seq, adapters).unwrap();
            let b = forward_logits(&p, &other, adapters).unwrap();
            for t in 0..j {
                prop_assert!(a.row(t).iter().zip(b.row(t)).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }

        #[test]
        fn zero_adapters_are_identity_and_merge_matches(
            layers in 1usize..4, heads in 1usize..3, rank in 1usize..4,
            every_n in 1usize..3, seed in 0u64..1000,
        ) {
            let p = ModelParams::init(&cfg(layers, 4 * heads, heads), seed).unwrap();
            let seq = random_seq(seed, 5);
            let base = forward_logits(&p, &seq, None).unwrap();
            let zero = LoraAdapterSet::new(&LoraConfig::new(rank, every_n), &p.config, seed).unwrap();
            prop_assert!(forward_logits(&p, &seq, Some(&zero)).unwrap().bit_eq(&base));

            let set = random_adapters(&p, rank, every_n, seed);
            let adapted = forward_logits(&p, &seq, Some(&set)).unwrap();
            let merged = forward_logits(&merge_lora(&p, &set).unwrap(), &seq, None).unwrap();
            prop_assert!(adapted.max_abs_diff(&merged) < 1e-10);
            prop_assert!(adapted.max_abs_diff(&base) > 0.0);
        }
    }
}
