//! Guided, image-split-constrained autoregressive decoding.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::model::{Decoder, LoraAdapterSet, ModelError, ModelParams};
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, TokenSequence, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("sampler config: {0}")]
    Config(String),
    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// How the unconditional branch of guidance is conditioned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncondMode {
    /// `UNCOND, IMG_START` followed by the image tokens generated so far.
    #[default]
    Standard,
    /// `UNCOND, IMG_START` only; the same logits serve every step.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub cfg_scale: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    #[serde(default)]
    pub uncond_mode: UncondMode,
}

impl SamplerConfig {
    /// Guidance 4.0 and top-k over the whole image split.
    pub fn new(vocab: &Vocabulary, grid_h: usize, grid_w: usize) -> Self {
        Self {
            cfg_scale: 4.0,
            top_k: vocab.image_codes(),
            temperature: 1.0,
            seed: 0,
            grid_h,
            grid_w,
            uncond_mode: UncondMode::Standard,
        }
    }

    pub fn max_image_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(SamplerError::Config("cfg_scale must be finite and >= 0".into()));
        }
        if self.top_k == 0 {
            return Err(SamplerError::Config("top_k must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SamplerError::Config("temperature must be positive".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(SamplerError::Config("grid dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn combine_one(c: f64, u: f64, s: f64) -> f64 {
    // s·c + (1−s)·u; the endpoints return an input verbatim so signed zeros survive
    if s == 1.0 || c == u {
        c
    } else if s == 0.0 {
        u
    } else {
        s * c + (1.0 - s) * u
    }
}

/// Guided logits `s·(cond − uncond) + uncond`.
pub fn cfg_combine(l_cond: &Tensor, l_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if l_cond.shape() != l_uncond.shape() {
        return Err(SamplerError::Shape(l_cond.shape().to_vec(), l_uncond.shape().to_vec()));
    }
    let data = l_cond
        .data()
        .iter()
        .zip(l_uncond.data())
        .map(|(&c, &u)| combine_one(c, u, s))
        .collect();
    Ok(Tensor::new(l_cond.shape().to_vec(), data).expect("same shape"))
}

/// Excludes every id outside the image split by setting it to `-∞`.
pub fn restrict_to_image_split(logits: &mut [f64], vocab: &Vocabulary) {
    let range = vocab.image_range();
    for (i, l) in logits.iter_mut().enumerate() {
        if !range.contains(&i) {
            *l = f64::NEG_INFINITY;
        }
    }
}

/// Keeps the `k` largest finite entries (ties go to the lower id) and sets
/// the rest to `-∞`.
pub fn top_k_filter(logits: &mut [f64], k: usize) {
    let mut finite: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
    if k >= finite.len() {
        return;
    }
    finite.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for &i in &finite[k..] {
        logits[i] = f64::NEG_INFINITY;
    }
}

/// Softmax that treats `-∞` entries as excluded.
pub fn masked_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// Inverse-CDF draw in id order.
fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Next-token distribution from conditional and unconditional logits:
/// guidance, image-split restriction, temperature, top-k, softmax.
pub fn next_token_probs(cond: &[f64], uncond: Option<&[f64]>, vocab: &Vocabulary, config: &SamplerConfig) -> Vec<f64> {
    let mut l: Vec<f64> = match uncond {
        Some(u) => cond.iter().zip(u).map(|(&c, &u)| combine_one(c, u, config.cfg_scale)).collect(),
        None => cond.to_vec(),
    };
    restrict_to_image_split(&mut l, vocab);
    if config.temperature != 1.0 {
        l.iter_mut().for_each(|v| *v /= config.temperature);
    }
    top_k_filter(&mut l, config.top_k);
    masked_softmax(&l)
}

/// Samples `grid_h·grid_w` image tokens after `prompt`, which must end with
/// `IMG_START`. Returns the token run including both image brackets.
pub fn generate_tokens(
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    prompt: &TokenSequence,
    vocab: &Vocabulary,
    config: &SamplerConfig,
) -> Result<Vec<TokenId>> {
    config.validate()?;
    if !prompt.ends_with_img_start(vocab) || prompt.text_len != prompt.ids.len() {
        return Err(SamplerError::MalformedPrompt("prompt must end with IMG_START".into()));
    }
    let n = config.max_image_tokens();
    let pcfg = &params.config;
    let needed = pcfg.text_max + n + 1;
    if needed > pcfg.context_len {
        return Err(ModelError::Overlong {
            needed,
            limit: pcfg.context_len,
        }
        .into());
    }
    let guided = config.cfg_scale != 1.0;
    let mut cond = Decoder::new(params, adapters);
    let mut cond_logits = cond.prefill(prompt)?;
    let mut uncond = Decoder::new(params, adapters);
    let mut uncond_logits = if guided { uncond.prefill(&vocab.uncond_prompt())? } else { Vec::new() };
    let track_uncond = guided && config.uncond_mode == UncondMode::Standard;

    let mut rng = seeded(config.seed);
    let sp = vocab.specials();
    let mut run = Vec::with_capacity(n + 2);
    run.push(sp.img_start);
    for i in 0..n {
        let probs = next_token_probs(&cond_logits, guided.then_some(&uncond_logits[..]), vocab, config);
        let id = draw(&probs, rng.random::<f64>()) as TokenId;
        run.push(id);
        if i + 1 < n {
            cond_logits = cond.push(id)?;
            if track_uncond {
                uncond_logits = uncond.push(id)?;
            }
        }
    }
    run.push(sp.img_end);
    Ok(run)
}

pub fn generate_image(
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    prompt: &TokenSequence,
    vocab: &Vocabulary,
    config: &SamplerConfig,
) -> Result<Grid> {
    let run = generate_tokens(params, adapters, prompt, vocab, config)?;
    Ok(vocab.decode_image_tokens(&run, config.grid_h, config.grid_w)?)
}

/// Generated grid artifact as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub prompt: Vec<TokenId>,
    pub grid: Grid,
    pub seed: u64,
}

/// Fixed palette colour for an image code.
pub fn palette(code: u16) -> [u8; 3] {
    // golden-angle hue walk, two brightness bands
    let hue = (code as f64 * 137.507_764) % 360.0;
    let v = if code % 2 == 0 { 0.95 } else { 0.7 };
    let s = 0.75;
    let c = v * s;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round() as u8)
}

/// Binary PPM with each cell drawn as a `cell × cell` square.
pub fn write_ppm<W: Write>(mut w: W, grid: &Grid, cell: usize) -> Result<()> {
    let (h, wd) = grid.dims();
    write!(w, "P6\n{} {}\n255\n", wd * cell, h * cell)?;
    for r in 0..h * cell {
        for c in 0..wd * cell {
            w.write_all(&palette(grid.get(r / cell, c / cell)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::VocabConfig;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn bit_eq(a: &Tensor, b: &Tensor) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(&VocabConfig {
            words: vec!["a".into(), "dog".into()],
            image_codes: 6,
            class_names: vec![],
        })
        .unwrap()
    }

    fn model(v: &Vocabulary) -> ModelParams {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            vocab_size: v.size(),
            context_len: 12,
            text_max: 4,
            rms_eps: 1e-5,
        };
        let mut p = ModelParams::init(&cfg, 2).unwrap();
        // sharpen the output so draws are far from uniform
        p.head = p.head.scale(60.0);
        p
    }

    #[test]
    fn guidance_examples() {
        let c = Tensor::vector(vec![2.0, 0.0]);
        let u = Tensor::vector(vec![1.0, 1.0]);
        assert_eq!(cfg_combine(&c, &u, 4.0).unwrap().data(), &[5.0, -3.0]);
        let c = Tensor::vector(vec![0.1, -7.3, 1e-300, -0.0]);
        let u = Tensor::vector(vec![0.3, 2.9, -4.0, -0.0]);
        assert!(bit_eq(&cfg_combine(&c, &u, 1.0).unwrap(), &c));
        assert!(bit_eq(&cfg_combine(&c, &u, 0.0).unwrap(), &u));
        assert!(cfg_combine(&c, &Tensor::vector(vec![1.0]), 1.0).is_err());
        let (c, u) = (Tensor::vector(vec![-0.0]), Tensor::vector(vec![9.75]));
        assert!(bit_eq(&cfg_combine(&c, &u, 1.0).unwrap(), &c));
        assert!(bit_eq(&cfg_combine(&u, &c, 0.0).unwrap(), &c));
    }

    #[test]
    fn restriction_and_top_k() {
        let v = vocab();
        let mut l: Vec<f64> = (0..v.size()).map(|i| i as f64 * 0.1).collect();
        let orig = l.clone();
        restrict_to_image_split(&mut l, &v);
        let p = masked_softmax(&l);
        for i in 0..v.size() {
            if v.is_image(i as u32) {
                assert_eq!(l[i], orig[i]);
            } else {
                assert_eq!(p[i], 0.0);
            }
        }
        assert!((v.image_range().map(|i| p[i]).sum::<f64>() - 1.0).abs() < 1e-12);

        let mut l = vec![3.0, 1.0, 2.0];
        top_k_filter(&mut l, 2);
        assert_eq!(l, vec![3.0, f64::NEG_INFINITY, 2.0]);
        let mut tie = vec![1.0, 1.0, 1.0];
        top_k_filter(&mut tie, 1);
        assert_eq!(tie, vec![1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let mut l = vec![0.5, -1.0];
        top_k_filter(&mut l, 5);
        assert_eq!(l, vec![0.5, -1.0]);
    }

    #[test]
    fn top_one_is_argmax() {
        let v = vocab();
        let p = model(&v);
        let prompt = v.encode_text("a dog").unwrap();
        let mut cfg = SamplerConfig::new(&v, 2, 2);
        cfg.top_k = 1;
        cfg.cfg_scale = 1.0;
        for seed in 0..5 {
            cfg.seed = seed;
            let run = generate_tokens(&p, None, &prompt, &v, &cfg).unwrap();
            let mut dec = Decoder::new(&p, None);
            let mut logits = dec.prefill(&prompt).unwrap();
            for &id in &run[1..run.len() - 1] {
                let mut l = logits.clone();
                restrict_to_image_split(&mut l, &v);
                let best = (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a))).unwrap();
                assert_eq!(id as usize, best);
                logits = dec.push(id).unwrap();
            }
        }
    }

    #[test]
    fn generation_is_seeded_and_well_formed() {
        let v = vocab();
        let p = model(&v);
        let prompt = v.encode_text("a dog").unwrap();
        let cfg = SamplerConfig { seed: 9, ..SamplerConfig::new(&v, 2, 3) };
        let a = generate_image(&p, None, &prompt, &v, &cfg).unwrap();
        let b = generate_image(&p, None, &prompt, &v, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (2, 3));
        assert!(a.codes().iter().all(|&c| (c as usize) < v.image_codes()));
        let literal = SamplerConfig { uncond_mode: UncondMode::Literal, ..cfg.clone() };
        generate_image(&p, None, &prompt, &v, &literal).unwrap();

        let bad = TokenSequence::new(vec![0, 5], 2);
        assert!(matches!(generate_image(&p, None, &bad, &v, &cfg), Err(SamplerError::MalformedPrompt(_))));
        let big = SamplerConfig { grid_h: 3, grid_w: 3, ..cfg };
        assert!(generate_image(&p, None, &prompt, &v, &big).is_err());
    }

    #[test]
    fn unit_guidance_matches_conditional_distribution() {
        let v = vocab();
        let p = model(&v);
        let prompt = v.encode_text("a dog").unwrap();
        let mut dec = Decoder::new(&p, None);
        let mut cond = dec.prefill(&prompt).unwrap();
        restrict_to_image_split(&mut cond, &v);
        let expected = masked_softmax(&cond);

        let draws = 10_000;
        let mut counts = vec![0usize; v.size()];
        let mut cfg = SamplerConfig::new(&v, 1, 1);
        cfg.cfg_scale = 1.0;
        for seed in 0..draws {
            cfg.seed = seed as u64;
            let run = generate_tokens(&p, None, &prompt, &v, &cfg).unwrap();
            counts[run[1] as usize] += 1;
        }
        // pool cells with small expected counts so the statistic is valid
        let (mut stat, mut bins) = (0.0, 0usize);
        let (mut pool_obs, mut pool_exp) = (0.0, 0.0);
        for i in v.image_range() {
            let e = expected[i] * draws as f64;
            if e < 5.0 {
                pool_obs += counts[i] as f64;
                pool_exp += e;
                continue;
            }
            stat += (counts[i] as f64 - e).powi(2) / e;
            bins += 1;
        }
        if pool_exp > 0.0 {
            stat += (pool_obs - pool_exp).powi(2) / pool_exp;
            bins += 1;
        }
        assert!(bins >= 2);
        let pval = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
        assert!(pval > 0.01, "chi-square {stat} on {bins} bins, p = {pval}");
    }

    #[test]
    fn ppm_has_expected_size() {
        let g = Grid::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let mut buf = Vec::new();
        write_ppm(&mut buf, &g, 4).unwrap();
        let header = b"P6\n12 8\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(buf.len(), header.len() + 12 * 8 * 3);
    }

    proptest! {
        #[test]
        fn guidance_is_affine_in_scale(
            c in prop::collection::vec(-5.0f64..5.0, 4),
            u in prop::collection::vec(-5.0f64..5.0, 4),
            a in 0.0f64..8.0, b in 0.0f64..8.0,
        ) {
            let (c, u) = (Tensor::vector(c), Tensor::vector(u));
            let mid = cfg_combine(&c, &u, (a + b) / 2.0).unwrap();
            let ea = cfg_combine(&c, &u, a).unwrap();
            let eb = cfg_combine(&c, &u, b).unwrap();
            for i in 0..4 {
                let avg = (ea.data()[i] + eb.data()[i]) / 2.0;
                prop_assert!((mid.data()[i] - avg).abs() < 1e-9);
            }
            prop_assert!(bit_eq(&cfg_combine(&c, &c, a).unwrap(), &c));
        }

        #[test]
        fn samples_stay_in_image_split(
            s in 0.0f64..6.0, k in 1usize..8, temp in 0.2f64..3.0, seed in 0u64..500,
        ) {
            let v = vocab();
            let p = model(&v);
            let prompt = v.encode_text("a dog").unwrap();
            let cfg = SamplerConfig {
                cfg_scale: s,
                top_k: k,
                temperature: temp,
                seed,
                ..SamplerConfig::new(&v, 2, 2)
            };
            let run = generate_tokens(&p, None, &prompt, &v, &cfg).unwrap();
            prop_assert!(run[1..run.len() - 1].iter().all(|&id| v.is_image(id)));
        }
    }
}
