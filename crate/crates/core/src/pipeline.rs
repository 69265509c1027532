//! End-to-end runs driven by one serializable config: world, base model,
//! two-stage personalization, evaluation and ablation grids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    class_prior_probe, default_threads, run_benchmark, AblationReport, AblationRow, BenchSettings, ClassPriorResult,
    EvalError, EvalModel, EvalReport, EvalTask, GenerationRecord, ReportMeta,
};
use crate::model::{
    count_trainable_params, CountMode, LoraAdapterSet, LoraConfig, ModelConfig, ModelError, ModelParams, Provenance,
};
use crate::rng::{mix, mix3};
use crate::sampler::{SamplerConfig, SamplerError, UncondMode};
use crate::trainer::{
    personalize_stage1, personalize_stage2, pretrain, LossTrace, Stage2Output, TrainConfig, TrainError,
};
use crate::vocab::{per_image_name, VocabError, Vocabulary, IDENT};
use crate::world::{Example, SubjectSpec, World, WorldConfig, WorldError};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Width and depth used for the reference parameter column of ablations.
pub const REFERENCE_WIDTH: usize = 4096;
pub const REFERENCE_DEPTH: usize = 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

impl PipelineError {
    /// Process exit status: 2 config, 3 integrity, 4 stage order, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Integrity(_) | PipelineError::Eval(EvalError::VocabMismatch { .. }) => 3,
            PipelineError::Model(ModelError::Checkpoint(_)) => 3,
            PipelineError::Train(TrainError::StageOrder { .. }) => 4,
            PipelineError::Train(TrainError::Divergence { .. }) => 5,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Model shape without the vocabulary size, which follows the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub context_len: usize,
    pub text_max: usize,
    pub rms_eps: f64,
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            vocab_size,
            context_len: self.context_len,
            text_max: self.text_max,
            rms_eps: self.rms_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub cfg_scale: f64,
    /// `None` keeps the whole image split.
    pub top_k: Option<usize>,
    pub temperature: f64,
    pub uncond_mode: UncondMode,
}

impl SamplerSettings {
    pub fn build(&self, vocab: &Vocabulary, world: &WorldConfig, seed: u64) -> SamplerConfig {
        SamplerConfig {
            cfg_scale: self.cfg_scale,
            top_k: self.top_k.unwrap_or(vocab.image_codes()),
            temperature: self.temperature,
            seed,
            grid_h: world.grid_h,
            grid_w: world.grid_w,
            uncond_mode: self.uncond_mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizeSettings {
    /// Reference images per subject (3..=5).
    pub references: usize,
    /// Start the identifier embedding from the class word's embedding.
    pub init_from_class: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Held-out subjects evaluated, taken round-robin over classes.
    pub subjects: usize,
    pub prompts: usize,
    pub class_prior_samples: usize,
    pub chance_samples: usize,
    /// Worker threads for generation; 0 uses every available core.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub ranks: Vec<usize>,
    pub strides: Vec<usize>,
    /// Large-model ranks the toy ranks stand in for, index-aligned.
    pub reference_ranks: Vec<usize>,
}

/// Everything a run needs. Seeds of the individual stages are derived from
/// `seed` by [`RunConfig::with_seed`] and stored explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub world_seed: u64,
    pub world: WorldConfig,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub model: ModelShape,
    pub pretrain: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2_full: TrainConfig,
    pub stage2_lora: TrainConfig,
    pub lora: LoraConfig,
    pub personalize: PersonalizeSettings,
    pub sampler: SamplerSettings,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
}

impl RunConfig {
    /// Desk-scale preset: 8×8 sprite world, 4-layer width-32 model.
    pub fn bench() -> Self {
        Self {
            format_version: RUN_CONFIG_VERSION,
            seed: 0,
            world_seed: 0,
            world: WorldConfig::small(),
            corpus_size: 10_000,
            corpus_seed: 0,
            model: ModelShape {
                layers: 4,
                hidden: 32,
                heads: 4,
                context_len: 80,
                text_max: 14,
                rms_eps: 1e-5,
            },
            pretrain: TrainConfig {
                steps: 3000,
                ..TrainConfig::pretrain()
            },
            stage1: TrainConfig::stage1(),
            stage2_full: TrainConfig::stage2_full(),
            stage2_lora: TrainConfig::stage2_lora(),
            lora: LoraConfig::new(4, 1),
            personalize: PersonalizeSettings {
                references: 4,
                init_from_class: true,
            },
            sampler: SamplerSettings {
                // Guidance above 1 degrades identifier fidelity at this width.
                cfg_scale: 1.0,
                top_k: Some(16),
                temperature: 1.0,
                uncond_mode: UncondMode::Standard,
            },
            eval: EvalSettings {
                subjects: 2,
                prompts: 25,
                class_prior_samples: 16,
                chance_samples: crate::eval::CHANCE_SAMPLES,
                threads: 0,
            },
            ablation: AblationSettings {
                ranks: vec![2, 4, 8],
                strides: vec![1, 2, 4],
                reference_ranks: vec![16, 64, 256],
            },
        }
        .with_seed(7)
    }

    /// Seconds-scale preset exercising every stage: one subject, short
    /// schedules, a 2-layer width-16 model.
    pub fn smoke() -> Self {
        let mut c = Self::bench();
        c.corpus_size = 400;
        c.model.layers = 2;
        c.model.hidden = 16;
        c.model.heads = 2;
        c.pretrain.steps = 30;
        c.pretrain.warmup_steps = 5;
        c.pretrain.batch_pairs = 4;
        for t in [&mut c.stage1, &mut c.stage2_full, &mut c.stage2_lora] {
            t.steps = 4;
            t.batch_pairs = 2;
        }
        c.eval.subjects = 1;
        c.eval.prompts = 5;
        c.eval.class_prior_samples = 2;
        c.eval.chance_samples = 200;
        c.ablation.ranks = vec![2];
        c.ablation.strides = vec![1, 2];
        c.ablation.reference_ranks = vec![16];
        let seed = c.seed;
        c.with_seed(seed)
    }

    /// Sets the master seed and re-derives every stage seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world_seed = mix(seed, 0x57);
        self.corpus_seed = mix(seed, 0xC0);
        self.pretrain.seed = mix(seed, 0x50);
        self.stage1.seed = mix(seed, 0x51);
        self.stage2_full.seed = mix(seed, 0x52);
        self.stage2_lora.seed = mix(seed, 0x53);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != RUN_CONFIG_VERSION {
            return Err(PipelineError::Config(format!(
                "config version {} (expected {RUN_CONFIG_VERSION})",
                self.format_version
            )));
        }
        self.world.validate()?;
        self.model.config(2).validate()?;
        for t in [&self.pretrain, &self.stage1, &self.stage2_full, &self.stage2_lora] {
            t.validate()?;
        }
        self.lora.validate()?;
        if !(3..=5).contains(&self.personalize.references) {
            return Err(WorldError::RefCount(self.personalize.references).into());
        }
        if self.eval.subjects == 0 || self.eval.prompts == 0 {
            return Err(PipelineError::Config("eval needs subjects and prompts".into()));
        }
        if self.ablation.ranks.len() != self.ablation.reference_ranks.len() {
            return Err(PipelineError::Config("ablation ranks and reference ranks differ in length".into()));
        }
        let fits = self.model.text_max + self.world.grid_h * self.world.grid_w < self.model.context_len;
        if !fits {
            return Err(PipelineError::Config("context too short for prompt plus image".into()));
        }
        Ok(())
    }

    pub fn threads(&self) -> usize {
        if self.eval.threads == 0 {
            default_threads()
        } else {
            self.eval.threads
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| PipelineError::Config(format!("config json: {e}")))
    }
}

pub fn build_world(cfg: &RunConfig) -> Result<(World, Vocabulary)> {
    let world = World::generate(&cfg.world, cfg.world_seed)?;
    let vocab = world.vocabulary()?;
    Ok((world, vocab))
}

/// Held-out subjects used for evaluation, alternating between classes.
pub fn eval_subjects<'w>(cfg: &RunConfig, world: &'w World) -> Vec<&'w SubjectSpec> {
    let mut held: Vec<(usize, &SubjectSpec)> = Vec::new();
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    for s in world.held_out_subjects() {
        let k = seen.entry(s.class_id).or_insert(0);
        held.push((*k, s));
        *k += 1;
    }
    held.sort_by_key(|(k, s)| (*k, s.class_id, s.subject_id));
    held.into_iter().take(cfg.eval.subjects).map(|(_, s)| s).collect()
}

pub fn reference_set(cfg: &RunConfig, world: &World, subject: &SubjectSpec) -> Result<Vec<Example>> {
    Ok(world.sample_reference_set(subject, cfg.personalize.references, mix(cfg.seed, 0x2EF))?)
}

pub fn pretrain_corpus(cfg: &RunConfig, world: &World, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let held: Vec<u32> = world.held_out_subjects().map(|s| s.subject_id).collect();
    Ok(world.sample_pretrain_corpus(vocab, cfg.corpus_size, cfg.corpus_seed, &held)?)
}

pub fn pretrain_base(cfg: &RunConfig, world: &World, vocab: &Vocabulary) -> Result<(ModelParams, LossTrace)> {
    let corpus = pretrain_corpus(cfg, world, vocab)?;
    Ok(pretrain(&corpus, vocab, &cfg.model.config(vocab.size()), &cfg.pretrain)?)
}

/// Base vocabulary plus `[V]` and one per-image token per reference.
pub fn personal_vocab(base: &Vocabulary, references: usize) -> Result<Vocabulary> {
    let mut v = base.clone();
    v.register_placeholder(IDENT)?;
    for i in 1..=references {
        v.register_placeholder(&per_image_name(i))?;
    }
    Ok(v)
}

/// Base parameters with rows for the placeholder tokens. The identifier row
/// optionally starts as a copy of the class word's row.
pub fn extend_for_placeholders(
    cfg: &RunConfig,
    base: &ModelParams,
    personal: &Vocabulary,
    class_word: Option<&str>,
) -> Result<ModelParams> {
    if base.provenance != Provenance::Pretrained {
        return Err(TrainError::StageOrder {
            expected: Provenance::Pretrained,
            found: base.provenance,
        }
        .into());
    }
    let extra = personal
        .size()
        .checked_sub(base.config.vocab_size)
        .ok_or_else(|| PipelineError::Integrity("personal vocabulary smaller than the model's".into()))?;
    let mut p = base.clone();
    p.extend_vocab(extra, mix(cfg.seed, 0xE7));
    if let (true, Some(word)) = (cfg.personalize.init_from_class, class_word) {
        let src = p.tok_emb.row(personal.id(word)? as usize).to_vec();
        p.tok_emb.row_mut(personal.id(IDENT)? as usize).copy_from_slice(&src);
    }
    Ok(p)
}

/// How stage 2 adapts the transformer.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage2Kind {
    Full,
    Lora(LoraConfig),
}

/// A subject's personalized models.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRun {
    pub subject: SubjectSpec,
    pub refs: Vec<Example>,
    pub vocab: Vocabulary,
    pub stage1: ModelParams,
    pub stage1_trace: LossTrace,
}

/// Stage 1 for one subject, from the shared base model.
pub fn run_stage1(
    cfg: &RunConfig,
    world: &World,
    base: &ModelParams,
    base_vocab: &Vocabulary,
    subject: &SubjectSpec,
    with_class: bool,
) -> Result<SubjectRun> {
    let refs = reference_set(cfg, world, subject)?;
    let vocab = personal_vocab(base_vocab, refs.len())?;
    let class = with_class.then(|| world.config.classes[subject.class_id].as_str());
    let params = extend_for_placeholders(cfg, base, &vocab, class)?;
    let tc = TrainConfig {
        seed: mix(cfg.stage1.seed, subject.subject_id as u64),
        ..cfg.stage1.clone()
    };
    let (stage1, trace) = personalize_stage1(&params, &refs, &vocab, class, &tc)?;
    Ok(SubjectRun {
        subject: subject.clone(),
        refs,
        vocab,
        stage1,
        stage1_trace: trace,
    })
}

pub fn run_stage2(cfg: &RunConfig, world: &World, run: &SubjectRun, kind: &Stage2Kind, with_class: bool) -> Result<Stage2Output> {
    let class = with_class.then(|| world.config.classes[run.subject.class_id].as_str());
    let sid = run.subject.subject_id as u64;
    match kind {
        Stage2Kind::Full => {
            let tc = TrainConfig {
                seed: mix(cfg.stage2_full.seed, sid),
                ..cfg.stage2_full.clone()
            };
            Ok(personalize_stage2(&run.stage1, None, &run.refs, &run.vocab, class, &tc)?)
        }
        Stage2Kind::Lora(lc) => {
            let tc = TrainConfig {
                seed: mix(cfg.stage2_lora.seed, sid),
                ..cfg.stage2_lora.clone()
            };
            let adapters = LoraAdapterSet::new(lc, &run.stage1.config, mix3(tc.seed, lc.rank as u64, lc.every_n as u64))?;
            Ok(personalize_stage2(&run.stage1, Some(&adapters), &run.refs, &run.vocab, class, &tc)?)
        }
    }
}

/// Scores one model on one subject's prompt suite.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_subject(
    cfg: &RunConfig,
    world: &World,
    subject: &SubjectSpec,
    refs: &[Example],
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    vocab: &Vocabulary,
    use_identifier: bool,
    use_class: bool,
) -> Result<Vec<GenerationRecord>> {
    let hash = vocab.hash();
    let model = EvalModel {
        params,
        adapters,
        vocab,
        checkpoint_vocab_hash: &hash,
    };
    let mut task = EvalTask::new(
        world,
        subject,
        refs.iter().map(|e| e.image.clone()).collect(),
        cfg.eval.prompts,
        use_identifier,
    );
    task.use_class = use_class;
    let sampler = cfg.sampler.build(vocab, &world.config, cfg.seed);
    let settings = BenchSettings {
        chance_samples: 1,
        threads: cfg.threads(),
        ..BenchSettings::new("", mix(cfg.seed, 0xE0))
    };
    Ok(run_benchmark(world, &model, &[task], &sampler, &settings)?.generations)
}

/// Report metadata shared by every method of a run.
pub fn report_meta(cfg: &RunConfig, world: &World, subjects: &[&SubjectSpec], vocab_hash: &str) -> Result<ReportMeta> {
    let mut chance = BTreeMap::new();
    for s in subjects {
        let c = crate::eval::chance_level(&world.config, &s.sprite, cfg.eval.chance_samples, mix(world.seed, s.subject_id as u64))?;
        chance.insert(s.subject_id, c);
    }
    Ok(ReportMeta {
        run_seed: mix(cfg.seed, 0xE0),
        world_seed: world.seed,
        vocab_hash: vocab_hash.to_string(),
        chance_level: chance,
        sampler: cfg.sampler.build(&world.vocabulary()?, &world.config, cfg.seed),
        extra: BTreeMap::new(),
    })
}

/// Class-prior probe on identifier-free prompts.
pub fn probe_class_prior(
    cfg: &RunConfig,
    world: &World,
    params: &ModelParams,
    vocab: &Vocabulary,
    class_id: usize,
) -> Result<ClassPriorResult> {
    let hash = vocab.hash();
    let model = EvalModel {
        params,
        adapters: None,
        vocab,
        checkpoint_vocab_hash: &hash,
    };
    let sampler = cfg.sampler.build(vocab, &world.config, mix(cfg.seed, 0xC1A5));
    Ok(class_prior_probe(
        world,
        &model,
        class_id,
        cfg.eval.class_prior_samples,
        &sampler,
        cfg.threads(),
    )?)
}

/// Class-prior accuracy and diversity before and after stage 2, averaged
/// over the evaluated subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorComparison {
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub diversity_before: f64,
    pub diversity_after: f64,
}

/// Reports of a full run: base model on identifier-free prompts, stage 1
/// alone, and stage 1 followed by full Q/K/V fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct FullRun {
    pub base: EvalReport,
    pub stage1: EvalReport,
    pub stage2: EvalReport,
    pub prior: PriorComparison,
    pub pretrain_trace: LossTrace,
}

impl FullRun {
    pub fn reports(&self) -> [&EvalReport; 3] {
        [&self.base, &self.stage1, &self.stage2]
    }
}

/// Runs every stage from the world to the three evaluation reports.
pub fn run_full(cfg: &RunConfig) -> Result<FullRun> {
    cfg.validate()?;
    let (world, vocab) = build_world(cfg)?;
    let (base, trace) = pretrain_base(cfg, &world, &vocab)?;
    run_from_base(cfg, &world, &vocab, &base, trace)
}

/// [`run_full`] after pretraining.
pub fn run_from_base(
    cfg: &RunConfig,
    world: &World,
    vocab: &Vocabulary,
    base: &ModelParams,
    pretrain_trace: LossTrace,
) -> Result<FullRun> {
    let subjects = eval_subjects(cfg, world);
    let mut records: [Vec<GenerationRecord>; 3] = Default::default();
    let mut prior = [0.0f64; 4];
    let mut personal_hash = String::new();
    for subject in &subjects {
        let run = run_stage1(cfg, world, base, vocab, subject, true)?;
        let s2 = run_stage2(cfg, world, &run, &Stage2Kind::Full, true)?;
        records[0].extend(evaluate_subject(cfg, world, subject, &run.refs, base, None, vocab, false, true)?);
        records[1].extend(evaluate_subject(cfg, world, subject, &run.refs, &run.stage1, None, &run.vocab, true, true)?);
        records[2].extend(evaluate_subject(cfg, world, subject, &run.refs, &s2.params, None, &run.vocab, true, true)?);
        let before = probe_class_prior(cfg, world, base, vocab, subject.class_id)?;
        let after = probe_class_prior(cfg, world, &s2.params, &run.vocab, subject.class_id)?;
        prior[0] += before.accuracy;
        prior[1] += after.accuracy;
        prior[2] += before.diversity;
        prior[3] += after.diversity;
        personal_hash = run.vocab.hash();
    }
    let n = subjects.len() as f64;
    let base_meta = report_meta(cfg, world, &subjects, &vocab.hash())?;
    let personal_meta = ReportMeta {
        vocab_hash: personal_hash,
        ..base_meta.clone()
    };
    let [r0, r1, r2] = records;
    Ok(FullRun {
        base: EvalReport::aggregate("base model", &r0, base_meta)?,
        stage1: EvalReport::aggregate("stage 1 only", &r1, personal_meta.clone())?,
        stage2: EvalReport::aggregate("stage 1 + stage 2 (full Q/K/V)", &r2, personal_meta)?,
        prior: PriorComparison {
            accuracy_before: prior[0] / n,
            accuracy_after: prior[1] / n,
            diversity_before: prior[2] / n,
            diversity_after: prior[3] / n,
        },
        pretrain_trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationGrid {
    Lora,
    NoClassName,
    EmbeddingOnly,
}

fn lora_mode(rank: usize, every_n: usize) -> CountMode {
    CountMode::Lora {
        rank,
        every_n,
        targets: 3,
    }
}

/// Table-shaped ablation over the evaluated subjects, from a shared base.
pub fn run_ablation(
    cfg: &RunConfig,
    world: &World,
    vocab: &Vocabulary,
    base: &ModelParams,
    grid: AblationGrid,
) -> Result<AblationReport> {
    let subjects = eval_subjects(cfg, world);
    let (d, l) = (cfg.model.hidden, cfg.model.layers);
    let mut report = AblationReport::new();
    report.meta.insert("grid".into(), format!("{grid:?}"));
    report.meta.insert("seed".into(), cfg.seed.to_string());

    // (label, stage-2 kind or None for stage 1 only, with class word)
    let mut variants: Vec<(AblationRow, Option<Stage2Kind>, bool)> = Vec::new();
    let full_row = |method: &str| AblationRow {
        method: method.into(),
        rank: None,
        every_n: None,
        trainable_params: count_trainable_params(d, l, &CountMode::FullAttn),
        reference_params: Some(count_trainable_params(REFERENCE_WIDTH, REFERENCE_DEPTH, &CountMode::FullAttn)),
        fidelity: 0.0,
        prompt_following: 0.0,
        note: None,
    };
    match grid {
        AblationGrid::Lora => {
            for (ri, &rank) in cfg.ablation.ranks.iter().enumerate() {
                for &every_n in &cfg.ablation.strides {
                    let lc = LoraConfig {
                        rank,
                        every_n,
                        ..cfg.lora.clone()
                    };
                    let lc = LoraConfig { alpha: rank as f64, ..lc };
                    variants.push((
                        AblationRow {
                            method: "LoRA".into(),
                            rank: Some(rank),
                            every_n: Some(every_n),
                            trainable_params: count_trainable_params(d, l, &lora_mode(rank, every_n)),
                            reference_params: Some(count_trainable_params(
                                REFERENCE_WIDTH,
                                REFERENCE_DEPTH,
                                &lora_mode(cfg.ablation.reference_ranks[ri], every_n),
                            )),
                            fidelity: 0.0,
                            prompt_following: 0.0,
                            note: None,
                        },
                        Some(Stage2Kind::Lora(lc)),
                        true,
                    ));
                }
            }
            variants.push((full_row("Full Q/K/V"), Some(Stage2Kind::Full), true));
        }
        AblationGrid::NoClassName => {
            variants.push((full_row("with class name"), Some(Stage2Kind::Full), true));
            variants.push((full_row("w/o class name"), Some(Stage2Kind::Full), false));
        }
        AblationGrid::EmbeddingOnly => {
            let rows = 1 + cfg.personalize.references;
            variants.push((
                AblationRow {
                    method: "Embedding only".into(),
                    rank: None,
                    every_n: None,
                    trainable_params: count_trainable_params(d, l, &CountMode::EmbeddingOnly { rows }),
                    reference_params: Some(count_trainable_params(
                        REFERENCE_WIDTH,
                        REFERENCE_DEPTH,
                        &CountMode::EmbeddingOnly { rows },
                    )),
                    fidelity: 0.0,
                    prompt_following: 0.0,
                    note: Some("w/o transformer layers".into()),
                },
                None,
                true,
            ));
        }
    }

    let mut stage1_runs: BTreeMap<(u32, bool), SubjectRun> = BTreeMap::new();
    for (mut row, kind, with_class) in variants {
        let mut records = Vec::new();
        for subject in &subjects {
            let key = (subject.subject_id, with_class);
            if !stage1_runs.contains_key(&key) {
                stage1_runs.insert(key, run_stage1(cfg, world, base, vocab, subject, with_class)?);
            }
            let run = &stage1_runs[&key];
            let recs = match &kind {
                None => evaluate_subject(cfg, world, subject, &run.refs, &run.stage1, None, &run.vocab, true, with_class)?,
                Some(k) => {
                    let s2 = run_stage2(cfg, world, run, k, with_class)?;
                    evaluate_subject(
                        cfg,
                        world,
                        subject,
                        &run.refs,
                        &s2.params,
                        s2.adapters.as_ref(),
                        &run.vocab,
                        true,
                        with_class,
                    )?
                }
            };
            records.extend(recs);
        }
        let meta = report_meta(cfg, world, &subjects, "")?;
        let rep = EvalReport::aggregate(&row.method, &records, meta)?;
        row.fidelity = rep.fidelity;
        row.prompt_following = rep.prompt_following;
        report.rows.push(row);
    }
    Ok(report)
}
