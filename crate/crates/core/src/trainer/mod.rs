//! Pretraining of the base model and the two personalization stages.
//!
//! Every run is sequential and seeded, so identical inputs give
//! bit-identical parameters and loss traces.

mod batch;
mod optim;

pub use batch::{build_personalization_batch, personalization_template};
pub use optim::{AdamConfig, GradMap, OptimizerState};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    bind, image_loss, select_trainable, LoraAdapterSet, ModelConfig, ModelError, ModelParams, Provenance, Selection,
    Stage,
};
use crate::rng::{mix, seeded};
use crate::tensor::{Graph, TensorError};
use crate::vocab::{per_image_name, TokenSequence, VocabError, Vocabulary, IDENT};
use crate::world::Example;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("train config: {0}")]
    Config(String),
    #[error("stage order: expected parameters from {expected:?}, found {found:?}")]
    StageOrder { expected: Provenance, found: Provenance },
    #[error("placeholder {0} is not registered")]
    MissingPlaceholder(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub steps: usize,
    pub batch_pairs: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warm-up length; the rate is constant afterwards.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Stage 2 only: keep training the placeholder rows.
    #[serde(default)]
    pub stage2_train_embeddings: bool,
}

impl TrainConfig {
    fn base(stage: Stage, lr: f64, steps: usize) -> Self {
        Self {
            stage,
            lr,
            steps,
            batch_pairs: 8,
            seed: 0,
            grad_clip: None,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            stage2_train_embeddings: false,
        }
    }

    pub fn pretrain() -> Self {
        Self {
            grad_clip: Some(1.0),
            warmup_steps: 50,
            ..Self::base(Stage::Pretrain, 3e-3, 2000)
        }
    }

    pub fn stage1() -> Self {
        Self::base(Stage::Stage1, 0.01, 300)
    }

    /// The large-model rate of 5e-6 is scaled up for desk-scale widths.
    pub fn stage2_full() -> Self {
        Self::base(Stage::Stage2Full, 5e-4, 70)
    }

    pub fn stage2_lora() -> Self {
        Self::base(Stage::Stage2Lora, 5e-4, 120)
    }

    /// A zero rate or zero steps is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if self.batch_pairs == 0 {
            return Err(TrainError::Config("batch_pairs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::Config("invalid optimizer constants".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    fn adam(&self, step: usize) -> AdamConfig {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        AdamConfig {
            lr: self.lr * warm,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }
}

/// `(step, loss)` pairs, one per optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub points: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn push(&mut self, step: usize, loss: f64) {
        self.points.push((step, loss));
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    /// Mean loss over the step window `range` (clamped to the trace).
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let l = self.losses();
        let s = range.start.min(l.len());
        let e = range.end.min(l.len());
        if s == e {
            return f64::NAN;
        }
        l[s..e].iter().sum::<f64>() / (e - s) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.points {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }
}

/// Training sequence for an example: caption followed by the image codes.
pub fn example_sequence(vocab: &Vocabulary, ex: &Example) -> Result<TokenSequence> {
    Ok(ex.caption_sequence().with_image(vocab, &ex.image)?)
}

/// Mean image-position loss over the batch and the gradient of every
/// selected tensor.
pub fn loss_step(
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    batch: &[Example],
    selection: &Selection,
    vocab: &Vocabulary,
) -> Result<(f64, GradMap)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let seqs = batch
        .iter()
        .map(|e| example_sequence(vocab, e))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let model = bind(&mut g, params, adapters, |n| selection.contains(n));
    let mut total = None;
    for s in &seqs {
        let l = image_loss(&mut g, &model, s, vocab.image_range())?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let root = g.scale(total.expect("non-empty batch"), 1.0 / seqs.len() as f64)?;
    let loss = g.value(root).item()?;
    let mut grads = g.backward(root)?;

    let mut out = GradMap::new();
    for sel in &selection.tensors {
        let var = model
            .var(&sel.name)
            .ok_or_else(|| TrainError::Model(ModelError::UnknownParam(sel.name.clone())))?;
        let shape_src = g.value(var);
        let full = grads
            .take(var)
            .unwrap_or_else(|| crate::tensor::Tensor::zeros(shape_src.shape()));
        let grad = match &sel.rows {
            Some(rows) => full.select_rows(rows)?,
            None => full,
        };
        out.insert(sel.name.clone(), grad);
    }
    Ok((loss, out))
}

fn run_steps(
    params: &mut ModelParams,
    mut adapters: Option<&mut LoraAdapterSet>,
    selection: &Selection,
    config: &TrainConfig,
    vocab: &Vocabulary,
    mut next_batch: impl FnMut(usize) -> Result<Vec<Example>>,
) -> Result<LossTrace> {
    let mut state = OptimizerState::new(selection, params, adapters.as_deref())?;
    let mut trace = LossTrace::default();
    for step in 0..config.steps {
        let batch = next_batch(step)?;
        let (loss, grads) = loss_step(params, adapters.as_deref(), &batch, selection, vocab)?;
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step, loss });
        }
        trace.push(step, loss);
        state
            .apply(&config.adam(step), selection, &grads, params, adapters.as_deref_mut())
            .map_err(|e| match e {
                TrainError::Divergence { .. } => TrainError::Divergence { step, loss },
                other => other,
            })?;
    }
    Ok(trace)
}

/// Trains a fresh model on the corpus with uniformly drawn minibatches.
pub fn pretrain(
    corpus: &[Example],
    vocab: &Vocabulary,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, LossTrace)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Config("empty corpus".into()));
    }
    if model.vocab_size != vocab.size() {
        return Err(TrainError::Config(format!(
            "model vocabulary {} != {}",
            model.vocab_size,
            vocab.size()
        )));
    }
    let mut params = ModelParams::init(model, mix(config.seed, 1))?;
    let selection = select_trainable(&params, None, Stage::Pretrain, &[])?;
    let mut rng = seeded(mix(config.seed, 2));
    let trace = run_steps(&mut params, None, &selection, config, vocab, |_| {
        Ok((0..config.batch_pairs)
            .map(|_| corpus[rng.random_range(0..corpus.len())].clone())
            .collect())
    })?;
    params.provenance = Provenance::Pretrained;
    Ok((params, trace))
}

/// Ids of `[V]` and of `S_1..S_n` for the references' indices.
pub fn placeholder_rows(vocab: &Vocabulary, refs: &[Example]) -> Result<Vec<usize>> {
    let mut names = vec![IDENT.to_string()];
    let mut idx: Vec<usize> = refs.iter().map(|r| r.meta.reference_index.unwrap_or(1)).collect();
    idx.sort_unstable();
    idx.dedup();
    names.extend(idx.into_iter().map(per_image_name));
    names
        .iter()
        .map(|n| {
            vocab
                .id(n)
                .map(|id| id as usize)
                .map_err(|_| TrainError::MissingPlaceholder(n.clone()))
        })
        .collect()
}

fn check_vocab(params: &ModelParams, vocab: &Vocabulary) -> Result<()> {
    if params.config.vocab_size != vocab.size() {
        return Err(TrainError::Config(format!(
            "parameters cover {} tokens but the vocabulary has {}; extend the embeddings after registering placeholders",
            params.config.vocab_size,
            vocab.size()
        )));
    }
    Ok(())
}

fn require(params: &ModelParams, expected: Provenance) -> Result<()> {
    if params.provenance != expected {
        return Err(TrainError::StageOrder {
            expected,
            found: params.provenance,
        });
    }
    Ok(())
}

/// Stage 1: optimizes only the placeholder embedding rows.
pub fn personalize_stage1(
    params: &ModelParams,
    refs: &[Example],
    vocab: &Vocabulary,
    class: Option<&str>,
    config: &TrainConfig,
) -> Result<(ModelParams, LossTrace)> {
    config.validate()?;
    require(params, Provenance::Pretrained)?;
    check_vocab(params, vocab)?;
    let rows = placeholder_rows(vocab, refs)?;
    let mut out = params.clone();
    let selection = select_trainable(&out, None, Stage::Stage1, &rows)?;
    let mut rng = seeded(mix(config.seed, 0x51));
    let trace = run_steps(&mut out, None, &selection, config, vocab, |step| {
        build_personalization_batch(refs, vocab, class, config.batch_pairs, step, &mut rng)
    })?;
    out.provenance = Provenance::Stage1;
    Ok((out, trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub params: ModelParams,
    pub adapters: Option<LoraAdapterSet>,
    pub trace: LossTrace,
}

/// Stage 2: fine-tunes every Q/K/V projection, or only the adapters when
/// `adapters` is given. Requires stage-1 parameters.
pub fn personalize_stage2(
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    refs: &[Example],
    vocab: &Vocabulary,
    class: Option<&str>,
    config: &TrainConfig,
) -> Result<Stage2Output> {
    config.validate()?;
    require(params, Provenance::Stage1)?;
    check_vocab(params, vocab)?;
    let mut out = params.clone();
    let mut set = adapters.cloned();
    let stage = if set.is_some() { Stage::Stage2Lora } else { Stage::Stage2Full };
    let mut selection = select_trainable(&out, set.as_ref(), stage, &[])?;
    if config.stage2_train_embeddings {
        selection = selection.with_rows("tok_emb", &placeholder_rows(vocab, refs)?);
    }
    let mut rng = seeded(mix(config.seed, 0x52));
    let trace = run_steps(&mut out, set.as_mut(), &selection, config, vocab, |step| {
        build_personalization_batch(refs, vocab, class, config.batch_pairs, step, &mut rng)
    })?;
    out.provenance = match stage {
        Stage::Stage2Lora => Provenance::Stage2Lora,
        _ => Provenance::Stage2Full,
    };
    Ok(Stage2Output {
        params: out,
        adapters: set,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, LoraConfig};
    use crate::tensor::Tensor;
    use crate::world::{World, WorldConfig};

    struct Fixture {
        world: World,
        vocab: Vocabulary,
        refs: Vec<Example>,
        params: ModelParams,
    }

    fn tiny_model(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            vocab_size,
            context_len: 80,
            text_max: 14,
            rms_eps: 1e-5,
        }
    }

    fn fixture() -> Fixture {
        let world = World::generate(&WorldConfig::small(), 5).unwrap();
        let mut vocab = world.vocabulary().unwrap();
        let mut params = ModelParams::init(&tiny_model(vocab.size()), 1).unwrap();
        params.provenance = Provenance::Pretrained;
        let subject = world.held_out_subjects().next().unwrap().clone();
        let refs = world.sample_reference_set(&subject, 3, 2).unwrap();
        let before = vocab.size();
        vocab.register_placeholder(IDENT).unwrap();
        for i in 1..=3 {
            vocab.register_placeholder(&per_image_name(i)).unwrap();
        }
        params.extend_vocab(vocab.size() - before, 9);
        Fixture {
            world,
            vocab,
            refs,
            params,
        }
    }

    fn quick(mut c: TrainConfig, steps: usize) -> TrainConfig {
        c.steps = steps;
        c.batch_pairs = 2;
        c
    }

    #[test]
    fn uniform_logits_give_log_of_image_split() {
        let f = fixture();
        let mut p = f.params.clone();
        p.head = Tensor::zeros(p.head.shape());
        let sel = select_trainable(&p, None, Stage::Stage2Full, &[]).unwrap();
        let batch = build_personalization_batch(&f.refs, &f.vocab, Some("dog"), 2, 0, &mut seeded(0)).unwrap();
        let (loss, grads) = loss_step(&p, None, &batch, &sel, &f.vocab).unwrap();
        assert!((loss - 64f64.ln()).abs() < 1e-9);
        let keys: Vec<&str> = grads.keys().map(|k| k.as_str()).collect();
        let mut names = sel.names();
        names.sort();
        assert_eq!(keys, names);
    }

    #[test]
    fn duplicated_example_keeps_the_mean() {
        let f = fixture();
        let sel = select_trainable(&f.params, None, Stage::Stage2Full, &[]).unwrap();
        let batch = build_personalization_batch(&f.refs, &f.vocab, Some("dog"), 2, 0, &mut seeded(0)).unwrap();
        let (one, _) = loss_step(&f.params, None, &batch[..1], &sel, &f.vocab).unwrap();
        let two = vec![batch[0].clone(), batch[0].clone()];
        let (twice, _) = loss_step(&f.params, None, &two, &sel, &f.vocab).unwrap();
        assert!((one - twice).abs() < 1e-12);
        assert!(matches!(
            loss_step(&f.params, None, &[], &sel, &f.vocab),
            Err(TrainError::EmptyBatch)
        ));
    }

    #[test]
    fn zero_gradient_step_is_a_no_op() {
        let f = fixture();
        let mut p = f.params.clone();
        let sel = select_trainable(&p, None, Stage::Stage2Full, &[]).unwrap();
        let mut state = OptimizerState::new(&sel, &p, None).unwrap();
        let grads: GradMap = sel
            .tensors
            .iter()
            .map(|s| (s.name.clone(), Tensor::zeros(p.get(&s.name).unwrap().shape())))
            .collect();
        state.apply(&AdamConfig::default(), &sel, &grads, &mut p, None).unwrap();
        assert_eq!(p, f.params);
    }

    #[test]
    fn stage1_touches_only_placeholder_rows() {
        let f = fixture();
        let (p, trace) = personalize_stage1(&f.params, &f.refs, &f.vocab, Some("dog"), &quick(TrainConfig::stage1(), 3))
            .unwrap();
        assert_eq!(trace.points.len(), 3);
        let rows = placeholder_rows(&f.vocab, &f.refs).unwrap();
        for (name, t) in p.named() {
            let before = f.params.get(&name).unwrap();
            if name != "tok_emb" {
                assert!(t.bit_eq(before), "{name} changed");
                continue;
            }
            for r in 0..t.rows() {
                let same = t.row(r).iter().zip(before.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
                if !rows.contains(&r) {
                    assert!(same, "row {r} changed");
                } else if r == rows[0] {
                    assert!(!same, "identifier row did not move");
                }
            }
        }
        assert_eq!(p.provenance, Provenance::Stage1);

        let mut zero = quick(TrainConfig::stage1(), 2);
        zero.lr = 0.0;
        let (same, _) = personalize_stage1(&f.params, &f.refs, &f.vocab, Some("dog"), &zero).unwrap();
        assert_eq!(same.named(), f.params.named());
    }

    #[test]
    fn stage2_full_freezes_everything_but_qkv() {
        let f = fixture();
        assert!(matches!(
            personalize_stage2(&f.params, None, &f.refs, &f.vocab, Some("dog"), &TrainConfig::stage2_full()),
            Err(TrainError::StageOrder { .. })
        ));
        let (s1, _) =
            personalize_stage1(&f.params, &f.refs, &f.vocab, Some("dog"), &quick(TrainConfig::stage1(), 1)).unwrap();
        let out = personalize_stage2(&s1, None, &f.refs, &f.vocab, Some("dog"), &quick(TrainConfig::stage2_full(), 2))
            .unwrap();
        for (name, t) in out.params.named() {
            let qkv = name.ends_with(".wq") || name.ends_with(".wk") || name.ends_with(".wv");
            assert_eq!(t.bit_eq(s1.get(&name).unwrap()), !qkv, "{name}");
        }
        assert_eq!(out.params.provenance, Provenance::Stage2Full);
    }

    #[test]
    fn stage2_lora_zero_steps_is_identity() {
        let f = fixture();
        let (s1, _) =
            personalize_stage1(&f.params, &f.refs, &f.vocab, Some("dog"), &quick(TrainConfig::stage1(), 1)).unwrap();
        let set = LoraAdapterSet::new(&LoraConfig::new(2, 1), &s1.config, 3).unwrap();
        let out = personalize_stage2(&s1, Some(&set), &f.refs, &f.vocab, Some("dog"), &quick(TrainConfig::stage2_lora(), 0))
            .unwrap();
        let seq = example_sequence(&f.vocab, &build_personalization_batch(&f.refs, &f.vocab, Some("dog"), 2, 0, &mut seeded(4)).unwrap()[0]).unwrap();
        let a = forward_logits(&s1, &seq, None).unwrap();
        let b = forward_logits(&out.params, &seq, out.adapters.as_ref()).unwrap();
        assert!(a.bit_eq(&b));

        let trained = personalize_stage2(&s1, Some(&set), &f.refs, &f.vocab, Some("dog"), &quick(TrainConfig::stage2_lora(), 2))
            .unwrap();
        for (name, t) in trained.params.named() {
            assert!(t.bit_eq(s1.get(&name).unwrap()), "{name}");
        }
        assert_ne!(trained.adapters.unwrap(), set);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let f = fixture();
        let base = f.world.vocabulary().unwrap();
        let corpus = f.world.sample_pretrain_corpus(&base, 40, 1, &[]).unwrap();
        let cfg = quick(TrainConfig::pretrain(), 3);
        let model = tiny_model(base.size());
        let (a, ta) = pretrain(&corpus, &base, &model, &cfg).unwrap();
        let (b, tb) = pretrain(&corpus, &base, &model, &cfg).unwrap();
        assert_eq!(a.named(), b.named());
        assert_eq!(ta, tb);
        let (z, _) = pretrain(&corpus, &base, &model, &quick(TrainConfig::pretrain(), 0)).unwrap();
        let init = ModelParams::init(&model, mix(cfg.seed, 1)).unwrap();
        assert_eq!(z.named(), init.named());
        assert!(ta.to_csv().starts_with("step,loss\n0,"));
    }
}
