//! Differentiable forward pass on the autodiff tape, used for training.

use std::ops::Range;

use super::{LoraAdapterSet, LoraTarget, ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{TokenSequence, SPECIALS};

/// Added to attention scores above the diagonal; softmax maps it to an exact 0.
const MASKED: f64 = -1e30;

#[derive(Clone, Debug)]
struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
    /// `(A, B)` per target in query, key, value order.
    lora: [Option<(Var, Var)>; 3],
}

/// Model parameters bound as leaves of one [`Graph`].
#[derive(Clone, Debug)]
pub struct TapeModel {
    config: ModelConfig,
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
    head: Var,
    lora_scale: f64,
    vars: Vec<(String, Var)>,
}

/// Binds parameters by reference; tensors for which `trainable` holds
/// receive gradients.
pub fn bind<'a>(
    g: &mut Graph<'a>,
    params: &'a ModelParams,
    adapters: Option<&'a LoraAdapterSet>,
    trainable: impl Fn(&str) -> bool,
) -> TapeModel {
    TapeModel::bind_with(g, params, adapters, |g, name, t| {
        if trainable(name) {
            g.param(t)
        } else {
            g.constant(t)
        }
    })
}

fn target_slot(t: LoraTarget) -> usize {
    match t {
        LoraTarget::Query => 0,
        LoraTarget::Key => 1,
        LoraTarget::Value => 2,
    }
}

impl TapeModel {
    /// Binds every tensor through `leaf`, which decides how each one enters
    /// the graph (borrowed, cloned, trainable or constant).
    pub fn bind_with<'a, 'p, F>(
        g: &mut Graph<'a>,
        params: &'p ModelParams,
        adapters: Option<&'p LoraAdapterSet>,
        mut leaf: F,
    ) -> TapeModel
    where
        F: FnMut(&mut Graph<'a>, &str, &'p Tensor) -> Var,
    {
        let mut vars = Vec::new();
        let mut take = |g: &mut Graph<'a>, name: String, t: &'p Tensor| {
            let v = leaf(g, &name, t);
            vars.push((name, v));
            v
        };
        let tok_emb = take(g, "tok_emb".into(), &params.tok_emb);
        let pos_emb = take(g, "pos_emb".into(), &params.pos_emb);
        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, l) in params.layers.iter().enumerate() {
            let n = |f: &str| format!("layers.{i}.{f}");
            let mut lv = LayerVars {
                attn_norm: take(g, n("attn_norm"), &l.attn_norm),
                wq: take(g, n("wq"), &l.wq),
                wk: take(g, n("wk"), &l.wk),
                wv: take(g, n("wv"), &l.wv),
                wo: take(g, n("wo"), &l.wo),
                mlp_norm: take(g, n("mlp_norm"), &l.mlp_norm),
                w_gate: take(g, n("w_gate"), &l.w_gate),
                w_up: take(g, n("w_up"), &l.w_up),
                w_down: take(g, n("w_down"), &l.w_down),
                lora: [None, None, None],
            };
            if let Some(set) = adapters {
                for p in set.pairs.iter().filter(|p| p.layer == i) {
                    let a = take(g, p.a_name(), &p.a);
                    let b = take(g, p.b_name(), &p.b);
                    lv.lora[target_slot(p.target)] = Some((a, b));
                }
            }
            layers.push(lv);
        }
        let final_norm = take(g, "final_norm".into(), &params.final_norm);
        let head = take(g, "head".into(), &params.head);
        TapeModel {
            config: params.config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
            lora_scale: adapters.map_or(1.0, |a| a.scale()),
            vars,
        }
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    fn project(&self, g: &mut Graph<'_>, h: Var, w: Var, lora: Option<(Var, Var)>) -> Result<Var> {
        let base = g.matmul(h, w)?;
        let Some((a, b)) = lora else {
            return Ok(base);
        };
        let low = g.matmul(h, b)?;
        let low = g.matmul(low, a)?;
        let low = g.scale(low, self.lora_scale)?;
        Ok(g.add(base, low)?)
    }

    /// Final-normed hidden states (`T × d`) for a token sequence.
    pub fn hidden(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<Var> {
        let cfg = &self.config;
        let positions = cfg.positions(seq, SPECIALS.img_start)?;
        let ids = checked_ids(seq, cfg.vocab_size)?;
        let t = ids.len();
        let (heads, hd) = (cfg.heads, cfg.head_dim());

        let tok = g.gather(self.tok_emb, &ids)?;
        let pos = g.gather(self.pos_emb, &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                mask[i * t + j] = MASKED;
            }
        }
        let mask = g.constant_owned(Tensor::new(vec![t, t], mask)?);
        let inv_sqrt = 1.0 / (hd as f64).sqrt();

        for l in &self.layers {
            let h = g.rms_norm(x, l.attn_norm, cfg.rms_eps)?;
            let q = self.project(g, h, l.wq, l.lora[0])?;
            let k = self.project(g, h, l.wk, l.lora[1])?;
            let v = self.project(g, h, l.wv, l.lora[2])?;
            let mut outs = Vec::with_capacity(heads);
            for hi in 0..heads {
                let (s, e) = (hi * hd, (hi + 1) * hd);
                let qh = g.slice(q, 1, s, e)?;
                let kh = g.slice(k, 1, s, e)?;
                let vh = g.slice(v, 1, s, e)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let scores = g.add(scores, mask)?;
                let probs = g.softmax(scores)?;
                outs.push(g.matmul(probs, vh)?);
            }
            let attn = g.concat(&outs, 1)?;
            let attn = g.matmul(attn, l.wo)?;
            x = g.add(x, attn)?;

            let h = g.rms_norm(x, l.mlp_norm, cfg.rms_eps)?;
            let gate = g.matmul(h, l.w_gate)?;
            let gate = g.silu(gate)?;
            let up = g.matmul(h, l.w_up)?;
            let m = g.mul(gate, up)?;
            let m = g.matmul(m, l.w_down)?;
            x = g.add(x, m)?;
        }
        Ok(g.rms_norm(x, self.final_norm, cfg.rms_eps)?)
    }

    /// Full-vocabulary logits (`T × V`); row `t` scores token `t + 1`.
    pub fn logits(&self, g: &mut Graph<'_>, seq: &TokenSequence) -> Result<Var> {
        let h = self.hidden(g, seq)?;
        Ok(g.matmul(h, self.head)?)
    }

    /// Logits over the image columns only, for the rows that predict the
    /// trailing image run of `seq`. Returns the logits and the target codes.
    pub fn image_logits(
        &self,
        g: &mut Graph<'_>,
        seq: &TokenSequence,
        image_cols: Range<usize>,
    ) -> Result<(Var, Vec<usize>)> {
        let n = seq.ids.len();
        let tl = seq.text_len;
        if tl == 0 || tl >= n {
            return Err(ModelError::Shape(format!(
                "sequence of {n} tokens has no image run after text_len {tl}"
            )));
        }
        let mut targets = Vec::with_capacity(n - tl);
        for &id in &seq.ids[tl..] {
            let id = id as usize;
            if !image_cols.contains(&id) {
                return Err(ModelError::Shape(format!("token {id} in image run is not an image code")));
            }
            targets.push(id - image_cols.start);
        }
        let h = self.hidden(g, seq)?;
        let rows = g.slice(h, 0, tl - 1, n - 1)?;
        let head = g.slice(self.head, 1, image_cols.start, image_cols.end)?;
        Ok((g.matmul(rows, head)?, targets))
    }
}

/// Mean next-token cross-entropy over the image positions of `seq`, with the
/// softmax taken over the image columns only.
pub fn image_loss(
    g: &mut Graph<'_>,
    model: &TapeModel,
    seq: &TokenSequence,
    image_cols: Range<usize>,
) -> Result<Var> {
    let (logits, targets) = model.image_logits(g, seq, image_cols)?;
    Ok(g.cross_entropy(logits, &targets)?)
}

pub(crate) fn checked_ids(seq: &TokenSequence, vocab_size: usize) -> Result<Vec<usize>> {
    seq.ids
        .iter()
        .map(|&id| {
            if (id as usize) < vocab_size {
                Ok(id as usize)
            } else {
                Err(ModelError::BadToken { id, size: vocab_size })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, LoraConfig};
    use crate::rng::seeded;
    use crate::tensor::finite_difference_check;
    use rand_distr::{Distribution, Normal};

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            vocab_size: 20,
            context_len: 16,
            text_max: 5,
            rms_eps: 1e-5,
        }
    }

    fn seq() -> TokenSequence {
        TokenSequence::new(vec![0, 6, 7, 2, 12, 15, 13, 19], 4)
    }

    /// Perturbs every weight so gradients are far from zero.
    fn jitter(p: &mut ModelParams, std: f64, seed: u64) {
        let mut rng = seeded(seed);
        let dist = Normal::new(0.0, std).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        for n in names {
            for v in p.get_mut(&n).unwrap().data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }

    #[test]
    fn tape_matches_decoder() {
        let mut p = ModelParams::init(&cfg(), 3).unwrap();
        jitter(&mut p, 0.2, 1);
        let mut set = LoraAdapterSet::new(&LoraConfig::new(2, 1), &p.config, 4).unwrap();
        for pair in &mut set.pairs {
            pair.b = Tensor::full(pair.b.shape(), 0.1);
        }
        let mut g = Graph::new();
        let m = bind(&mut g, &p, Some(&set), |_| false);
        let lv = m.logits(&mut g, &seq()).unwrap();
        let dec = forward_logits(&p, &seq(), Some(&set)).unwrap();
        assert!(g.value(lv).max_abs_diff(&dec) < 1e-10);
    }

    #[test]
    fn uniform_head_gives_log_image_codes() {
        let mut p = ModelParams::init(&cfg(), 3).unwrap();
        p.head = Tensor::zeros(p.head.shape());
        let mut g = Graph::new();
        let m = bind(&mut g, &p, None, |_| false);
        let l = image_loss(&mut g, &m, &seq(), 10..20).unwrap();
        assert!((g.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn only_image_run_is_targeted() {
        let p = ModelParams::init(&cfg(), 3).unwrap();
        let mut g = Graph::new();
        let m = bind(&mut g, &p, None, |_| false);
        let (logits, targets) = m.image_logits(&mut g, &seq(), 10..20).unwrap();
        assert_eq!(targets, vec![2, 5, 3, 9]);
        assert_eq!(g.shape(logits), &[4, 10]);
        let bad = TokenSequence::new(vec![0, 6, 2, 12, 3], 3);
        assert!(image_loss(&mut g, &m, &bad, 10..20).is_err());
    }

    #[test]
    fn gradcheck_every_tensor() {
        let mut p = ModelParams::init(&cfg(), 5).unwrap();
        jitter(&mut p, 0.3, 9);
        let mut set = LoraAdapterSet::new(&LoraConfig::new(2, 2), &p.config, 4).unwrap();
        for pair in &mut set.pairs {
            pair.b = Tensor::full(pair.b.shape(), 0.2);
        }
        let mut names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        names.extend(set.named().into_iter().map(|(n, _)| n));
        let mut worst = 0.0f64;
        for name in names {
            let x = p
                .get(&name)
                .ok()
                .cloned()
                .unwrap_or_else(|| set.named().into_iter().find(|(n, _)| *n == name).unwrap().1.clone());
            let err = finite_difference_check(
                |g, xv| {
                    let m = TapeModel::bind_with(g, &p, Some(&set), |g, n, t| {
                        if n == name {
                            xv
                        } else {
                            g.constant_owned(t.clone())
                        }
                    });
                    image_loss(g, &m, &seq(), 10..20).map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => crate::tensor::TensorError::Invalid(other.to_string()),
                    })
                },
                &x,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
