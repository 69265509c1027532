//! Benchmark runner: generation over prompt suites, scoring and reports.

mod metrics;
mod report;

pub use metrics::{
    best_window, chance_level, diversity, ordered_mean, prompt_following, sprite_region, subject_fidelity,
    template_match, WindowMatch,
};
pub use report::{
    render_methods, render_report, AblationReport, AblationRow, EvalReport, GenerationRecord, PromptKind,
    ReportFormat, ReportMeta, SubjectRow, REPORT_VERSION,
};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::grid::Grid;
use crate::model::{LoraAdapterSet, ModelParams};
use crate::rng::{mix, mix3};
use crate::sampler::{generate_image, SamplerConfig, SamplerError};
use crate::vocab::{PromptTemplate, Purpose, TokenSequence, VocabError, Vocabulary};
use crate::world::{EvalPrompt, Expectation, SubjectSpec, World};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("diversity needs at least 2 grids, got {0}")]
    TooFewGrids(usize),
    #[error("vocabulary hash {found} does not match checkpoint hash {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Share of sprite cells a class-prior generation must reproduce to count
/// as an instance of the class.
pub const CLASS_MATCH_THRESHOLD: f64 = 0.6;

/// Chance-level Monte Carlo sample count.
pub const CHANCE_SAMPLES: usize = 10_000;

/// A model ready for evaluation, with the vocabulary hash recorded in its
/// checkpoint.
#[derive(Clone, Copy, Debug)]
pub struct EvalModel<'a> {
    pub params: &'a ModelParams,
    pub adapters: Option<&'a LoraAdapterSet>,
    pub vocab: &'a Vocabulary,
    pub checkpoint_vocab_hash: &'a str,
}

impl EvalModel<'_> {
    fn check_vocab(&self) -> Result<()> {
        let found = self.vocab.hash();
        if found != self.checkpoint_vocab_hash {
            return Err(EvalError::VocabMismatch {
                expected: self.checkpoint_vocab_hash.to_string(),
                found,
            });
        }
        Ok(())
    }

    fn generate(&self, prompt: &TokenSequence, sampler: &SamplerConfig, seed: u64) -> Result<Grid> {
        let cfg = SamplerConfig {
            seed,
            ..sampler.clone()
        };
        Ok(generate_image(self.params, self.adapters, prompt, self.vocab, &cfg)?)
    }
}

/// One subject's prompt suite. Without the identifier, prompts are
/// instantiated with `{IDENT}` removed, as for a model never personalized;
/// without the class, the class word is dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub subject: SubjectSpec,
    pub refs: Vec<Grid>,
    pub prompts: Vec<EvalPrompt>,
    pub use_identifier: bool,
    pub use_class: bool,
}

impl EvalTask {
    pub fn new(world: &World, subject: &SubjectSpec, refs: Vec<Grid>, prompt_count: usize, use_identifier: bool) -> Self {
        Self {
            subject: subject.clone(),
            refs,
            prompts: world.sample_eval_prompts(subject.class_id, prompt_count),
            use_identifier,
            use_class: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub method: String,
    pub run_seed: u64,
    pub chance_samples: usize,
    pub threads: usize,
}

impl BenchSettings {
    pub fn new(method: &str, run_seed: u64) -> Self {
        Self {
            method: method.to_string(),
            run_seed,
            chance_samples: CHANCE_SAMPLES,
            threads: default_threads(),
        }
    }
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Maps `f` over `items` on up to `threads` scoped workers. Output order
/// matches input order, so results do not depend on the thread count.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(t)
                        .step_by(threads)
                        .map(|(i, x)| (i, f(x)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn prompt_kind(e: &Expectation) -> PromptKind {
    match e {
        Expectation::Recontext { .. } => PromptKind::Recontext,
        Expectation::PropertyMod { .. } => PromptKind::PropertyMod,
        Expectation::Reconstruction => PromptKind::Reconstruction,
    }
}

fn describe(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    seq.ids[1..seq.text_len - 1]
        .iter()
        .map(|&id| vocab.token_name(id))
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_grid(world: &World, sampler: &SamplerConfig) -> Result<()> {
    if (sampler.grid_h, sampler.grid_w) != (world.config.grid_h, world.config.grid_w) {
        return Err(EvalError::Config(format!(
            "sampler grid {}x{} does not match world grid {}x{}",
            sampler.grid_h, sampler.grid_w, world.config.grid_h, world.config.grid_w
        )));
    }
    Ok(())
}

/// Report plus every scored generation behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRun {
    pub report: EvalReport,
    pub generations: Vec<GenerationRecord>,
}

/// One generation per prompt per task, seeded by run seed, subject and
/// prompt index; scored against the task's references and expectations.
pub fn run_benchmark(
    world: &World,
    model: &EvalModel,
    tasks: &[EvalTask],
    sampler: &SamplerConfig,
    settings: &BenchSettings,
) -> Result<BenchmarkRun> {
    model.check_vocab()?;
    check_grid(world, sampler)?;
    if tasks.is_empty() {
        return Err(EvalError::Config("no evaluation tasks".into()));
    }
    let mut jobs = Vec::new();
    for task in tasks {
        if task.prompts.is_empty() || task.refs.is_empty() {
            return Err(EvalError::Config(format!(
                "subject {} needs prompts and references",
                task.subject.subject_id
            )));
        }
        let class = world
            .config
            .classes
            .get(task.subject.class_id)
            .ok_or_else(|| EvalError::Config(format!("unknown class {}", task.subject.class_id)))?;
        for (i, p) in task.prompts.iter().enumerate() {
            let mut template = if task.use_identifier {
                p.template.clone()
            } else {
                p.template.without_ident()
            };
            if !task.use_class {
                template = template.without_class();
            }
            let seq = model.vocab.encode_prompt(&template, Some(class), None)?;
            let seed = mix3(settings.run_seed, task.subject.subject_id as u64, i as u64);
            jobs.push((task, i, p, seq, seed));
        }
    }

    let results = par_map(&jobs, settings.threads, |(task, i, p, seq, seed)| -> Result<GenerationRecord> {
        let grid = model.generate(seq, sampler, *seed)?;
        Ok(GenerationRecord {
            subject_id: task.subject.subject_id,
            prompt_index: *i,
            kind: prompt_kind(&p.expectation),
            prompt: describe(model.vocab, seq),
            seed: *seed,
            fidelity: subject_fidelity(&grid, &task.refs, &task.subject.sprite)?,
            prompt_following: prompt_following(&grid, &p.expectation, &world.config)?,
            grid,
        })
    });
    let generations = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut chance = BTreeMap::new();
    for task in tasks {
        let id = task.subject.subject_id;
        if !chance.contains_key(&id) {
            let c = chance_level(
                &world.config,
                &task.subject.sprite,
                settings.chance_samples,
                mix(world.seed, id as u64),
            )?;
            chance.insert(id, c);
        }
    }
    let meta = ReportMeta {
        run_seed: settings.run_seed,
        world_seed: world.seed,
        vocab_hash: model.checkpoint_vocab_hash.to_string(),
        chance_level: chance,
        sampler: sampler.clone(),
        extra: BTreeMap::new(),
    };
    let report = EvalReport::aggregate(&settings.method, &generations, meta)?;
    Ok(BenchmarkRun { report, generations })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPriorResult {
    pub accuracy: f64,
    pub diversity: f64,
    pub grids: Vec<Grid>,
}

/// Identifier-free prompts for a class: even indices plain, odd ones placed
/// in the backgrounds in turn.
pub fn class_prior_prompts(world: &World, n: usize) -> Result<Vec<PromptTemplate>> {
    (0..n)
        .map(|i| {
            let pattern = if i % 2 == 0 {
                "a photo of a {CLASS}".to_string()
            } else {
                let ctx = &world.config.contexts[(i / 2) % world.config.contexts.len()];
                format!("a photo of a {{CLASS}} in the {ctx}")
            };
            Ok(PromptTemplate::parse(&pattern, Purpose::ClassPrior)?)
        })
        .collect()
}

/// Generates `n` identifier-free images of a class. Accuracy is the share
/// matching some generic sprite of the class at [`CLASS_MATCH_THRESHOLD`] or
/// better.
pub fn class_prior_probe(
    world: &World,
    model: &EvalModel,
    class_id: usize,
    n: usize,
    sampler: &SamplerConfig,
    threads: usize,
) -> Result<ClassPriorResult> {
    if n < 2 {
        return Err(EvalError::TooFewGrids(n));
    }
    model.check_vocab()?;
    check_grid(world, sampler)?;
    let class = world
        .config
        .classes
        .get(class_id)
        .ok_or_else(|| EvalError::Config(format!("unknown class {class_id}")))?;
    let generic: Vec<&SubjectSpec> = world.generic_subjects(class_id).collect();
    let prompts = class_prior_prompts(world, n)?
        .iter()
        .map(|t| model.vocab.encode_prompt(t, Some(class), None))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let indexed: Vec<(usize, TokenSequence)> = prompts.into_iter().enumerate().collect();
    let grids = par_map(&indexed, threads, |(i, seq)| {
        model.generate(seq, sampler, mix3(sampler.seed, class_id as u64, *i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    for g in &grids {
        let mut best = 0.0f64;
        for s in &generic {
            best = best.max(template_match(g, &s.sprite)?);
        }
        hits += usize::from(best >= CLASS_MATCH_THRESHOLD);
    }
    Ok(ClassPriorResult {
        accuracy: hits as f64 / n as f64,
        diversity: diversity(&grids)?,
        grids,
    })
}
