use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use arpersona::eval::{render_methods, EvalReport, ReportFormat};
use arpersona::model::{
    count_trainable_params, format_millions, load_checkpoint, write_checkpoint, Checkpoint, CountMode, ModelParams,
    Provenance,
};
use arpersona::pipeline::{
    evaluate_subject, eval_subjects, report_meta, run_ablation, run_from_base, run_stage1, run_stage2, RunConfig,
    Stage2Kind, SubjectRun,
};
use arpersona::rng::mix;
use arpersona::sampler::{generate_image, write_ppm, GeneratedImage};
use arpersona::trainer::{pretrain, LossTrace};
use arpersona::vocab::Vocabulary;
use arpersona::world::{from_jsonl, to_jsonl, Example, World};

use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::{Cli, Command, GenerateArgs, ParamsArgs, ParamsMode, PersonalizeArgs, Preset};

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Params(args) = &cli.command {
        return params(args);
    }
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Worldgen => worldgen(&ctx),
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Personalize(a) => personalize(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Eval(a) => eval(&ctx, a.checkpoint.as_deref()),
        Command::Ablate(a) => ablate(&ctx, a.grid.into()),
        Command::Params(_) => unreachable!(),
    }
}

/// Effective config plus the run directory.
struct Context {
    cfg: RunConfig,
    cfg_json: String,
    out: PathBuf,
    strict: bool,
    started: Instant,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self> {
        let g = &cli.global;
        let in_run = g.out.join("config.json");
        let file = match &g.config {
            Some(p) if !p.exists() => return Err(CliError::Missing(p.clone())),
            Some(p) => Some(p.clone()),
            None if in_run.exists() => Some(in_run),
            None => None,
        };
        if g.strict_repro && g.seed.is_none() && file.is_none() {
            return Err(CliError::Config(
                "--strict-repro needs --seed or a config file carrying the seed".into(),
            ));
        }
        let mut cfg = match &file {
            Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(CliError::io(p))?)?,
            None => match g.preset {
                Preset::Bench => RunConfig::bench(),
                Preset::Smoke => RunConfig::smoke(),
            },
        };
        if let Some(seed) = g.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(t) = g.threads {
            cfg.eval.threads = t;
        }
        cfg.validate()?;
        let cfg_json = cfg.to_json();
        eprintln!("effective config:\n{cfg_json}");
        Ok(Self {
            cfg,
            cfg_json,
            out: g.out.clone(),
            strict: g.strict_repro,
            started: Instant::now(),
        })
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, self.cfg.seed, &self.cfg_json)
    }

    fn finish(&self, mut m: Manifest) -> Result<()> {
        if !self.strict {
            m.elapsed_secs = Some(self.started.elapsed().as_secs_f64());
        }
        m.write(&self.out)?;
        eprintln!("wrote {}", self.out.join(crate::manifest::manifest_name(&m.command)).display());
        Ok(())
    }

    fn load_world(&self, m: &mut Manifest) -> Result<(World, Vocabulary)> {
        m.input(&self.out, "world.json", "worldgen")?;
        m.input(&self.out, "vocab.json", "worldgen")?;
        let world: World = serde_json::from_str(&read(&self.out.join("world.json"))?)
            .map_err(|e| CliError::Integrity(format!("world.json: {e}")))?;
        let vocab = Vocabulary::from_json(&read(&self.out.join("vocab.json"))?)?;
        if vocab.hash() != world.vocabulary()?.hash() {
            return Err(CliError::Integrity("vocab.json does not belong to world.json".into()));
        }
        Ok((world, vocab))
    }

    fn load_base(&self, m: &mut Manifest, vocab: &Vocabulary) -> Result<ModelParams> {
        m.input(&self.out, "base.ckpt", "pretrain")?;
        load_model(&self.out.join("base.ckpt"), vocab).map(|c| c.params)
    }
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(CliError::io(path))
}

fn json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s.into_bytes()
}

fn ckpt_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    Ok(buf)
}

/// Loads a checkpoint and checks it was trained against `vocab`.
fn load_model(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let (ckpt, _) = load_checkpoint(path)?;
    if ckpt.vocab_hash != vocab.hash() {
        return Err(CliError::Integrity(format!(
            "{} was trained with vocabulary {}, not {}",
            path.display(),
            ckpt.vocab_hash,
            vocab.hash()
        )));
    }
    Ok(ckpt)
}

fn worldgen(ctx: &Context) -> Result<()> {
    let out = &ctx.out;
    match fs::create_dir(out) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && out.is_dir() => {}
        Err(e) => return Err(CliError::Config(format!("cannot create {}: {e}", out.display()))),
    }
    let cfg = &ctx.cfg;
    let world = World::generate(&cfg.world, cfg.world_seed)?;
    let vocab = world.vocabulary()?;
    let corpus = arpersona::pipeline::pretrain_corpus(cfg, &world, &vocab)?;
    let mut m = ctx.manifest("worldgen");
    m.output(out, "config.json", ctx.cfg_json.as_bytes())?;
    m.output(out, "world.json", &json(&world))?;
    m.output(out, "subjects.json", &json(&world.subjects))?;
    m.output(out, "vocab.json", vocab.to_json().as_bytes())?;
    m.output(out, "corpus.jsonl", to_jsonl(&corpus).as_bytes())?;
    println!(
        "world: {} subjects, {} corpus pairs, vocabulary {} ({})",
        world.subjects.len(),
        corpus.len(),
        vocab.size(),
        vocab.hash()
    );
    ctx.finish(m)
}

fn cmd_pretrain(ctx: &Context) -> Result<()> {
    let mut m = ctx.manifest("pretrain");
    let (_, vocab) = ctx.load_world(&mut m)?;
    m.input(&ctx.out, "corpus.jsonl", "worldgen")?;
    let corpus = from_jsonl(&read(&ctx.out.join("corpus.jsonl"))?)
        .map_err(|e| CliError::Integrity(format!("corpus.jsonl: {e}")))?;
    let model = ctx.cfg.model.config(vocab.size());
    let (params, trace) = pretrain(&corpus, &vocab, &model, &ctx.cfg.pretrain)?;
    let steps = trace.losses().len();
    println!(
        "pretrained {} parameters; mean loss over the last 50 steps {:.4}",
        params.param_count(),
        trace.window_mean(steps.saturating_sub(50)..steps)
    );
    m.output(&ctx.out, "base.ckpt", &ckpt_bytes(&Checkpoint::new(params, vocab.hash()))?)?;
    m.output(&ctx.out, "pretrain_loss.csv", trace.to_csv().as_bytes())?;
    ctx.finish(m)
}

fn subject_dir(id: u32) -> String {
    format!("subject_{id}")
}

fn personalize(ctx: &Context, args: &PersonalizeArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut m = ctx.manifest("personalize");
    let (world, vocab) = ctx.load_world(&mut m)?;

    let run = if args.stage2_only {
        let from = args
            .from
            .as_ref()
            .ok_or_else(|| CliError::StageOrder("--stage2-only needs a stage-1 checkpoint via --from".into()))?;
        load_stage1(&world, from)?
    } else {
        let base = ctx.load_base(&mut m, &vocab)?;
        let subject = match args.subject {
            Some(id) => world.subject(id)?,
            None => eval_subjects(cfg, &world)[0],
        };
        if subject.generic {
            return Err(CliError::Config(format!("subject {} is not held out", subject.subject_id)));
        }
        let run = run_stage1(cfg, &world, &base, &vocab, subject, true)?;
        let dir = subject_dir(subject.subject_id);
        let mut ckpt = Checkpoint::new(run.stage1.clone(), run.vocab.hash());
        ckpt.meta.insert("subject_id".into(), subject.subject_id.to_string());
        m.output(&ctx.out, &format!("{dir}/vocab.json"), run.vocab.to_json().as_bytes())?;
        m.output(&ctx.out, &format!("{dir}/refs.jsonl"), to_jsonl(&run.refs).as_bytes())?;
        m.output(&ctx.out, &format!("{dir}/stage1.ckpt"), &ckpt_bytes(&ckpt)?)?;
        m.output(&ctx.out, &format!("{dir}/stage1_loss.csv"), run.stage1_trace.to_csv().as_bytes())?;
        println!("stage 1 done for subject {}", subject.subject_id);
        run
    };

    if !args.stage1_only {
        let kind = if args.lora {
            Stage2Kind::Lora(cfg.lora.clone())
        } else {
            Stage2Kind::Full
        };
        let out = run_stage2(cfg, &world, &run, &kind, true)?;
        let dir = subject_dir(run.subject.subject_id);
        let name = if args.lora { "stage2_lora" } else { "stage2" };
        let mut ckpt = Checkpoint::new(out.params, run.vocab.hash());
        ckpt.adapters = out.adapters;
        ckpt.meta.insert("subject_id".into(), run.subject.subject_id.to_string());
        m.output(&ctx.out, &format!("{dir}/{name}.ckpt"), &ckpt_bytes(&ckpt)?)?;
        m.output(&ctx.out, &format!("{dir}/{name}_loss.csv"), out.trace.to_csv().as_bytes())?;
        println!("stage 2 ({name}) done for subject {}", run.subject.subject_id);
    }
    ctx.finish(m)
}

/// A stage-1 checkpoint with the personal vocabulary and references stored
/// beside it.
fn load_stage1(world: &World, path: &Path) -> Result<SubjectRun> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::from_json(&read(&dir.join("vocab.json"))?)?;
    let ckpt = load_model(path, &vocab)?;
    if ckpt.params.provenance != Provenance::Stage1 {
        return Err(CliError::StageOrder(format!(
            "{} holds {:?} parameters; stage 2 needs a stage-1 checkpoint",
            path.display(),
            ckpt.params.provenance
        )));
    }
    let refs = load_refs(dir)?;
    let id = subject_of(&ckpt)?;
    Ok(SubjectRun {
        subject: world.subject(id)?.clone(),
        refs,
        vocab,
        stage1: ckpt.params,
        stage1_trace: LossTrace::default(),
    })
}

fn load_refs(dir: &Path) -> Result<Vec<Example>> {
    from_jsonl(&read(&dir.join("refs.jsonl"))?).map_err(|e| CliError::Integrity(format!("refs.jsonl: {e}")))
}

fn subject_of(ckpt: &Checkpoint) -> Result<u32> {
    ckpt.meta
        .get("subject_id")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Integrity("checkpoint carries no subject id".into()))
}

fn generate(ctx: &Context, args: &GenerateArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut m = ctx.manifest("generate");
    let (world, _) = ctx.load_world(&mut m)?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| ctx.out.join("base.ckpt"));
    let vocab_path = args
        .vocab
        .clone()
        .unwrap_or_else(|| ckpt_path.parent().unwrap_or(Path::new(".")).join("vocab.json"));
    let vocab = Vocabulary::from_json(&read(&vocab_path)?)?;
    let ckpt = load_model(&ckpt_path, &vocab)?;
    m.inputs.insert(ckpt_path.display().to_string(), crate::manifest::hash_file(&ckpt_path)?);
    let prompt = vocab.encode_text(&args.prompt)?;
    let mut images = Vec::new();
    for i in 0..args.samples {
        let seed = mix(cfg.seed, 0x6E0 + i as u64);
        let sampler = cfg.sampler.build(&vocab, &world.config, seed);
        let grid = generate_image(&ckpt.params, ckpt.adapters.as_ref(), &prompt, &vocab, &sampler)?;
        let mut ppm = Vec::new();
        write_ppm(&mut ppm, &grid, args.cell)?;
        m.output(&ctx.out, &format!("generated/sample_{i}.ppm"), &ppm)?;
        images.push(GeneratedImage {
            prompt: prompt.ids.clone(),
            grid,
            seed,
        });
    }
    m.output(&ctx.out, "generated/samples.json", &json(&images))?;
    for (i, img) in images.iter().enumerate() {
        println!("sample {i} (seed {}):", img.seed);
        for row in img.grid.rows() {
            println!("  {}", row.iter().map(|c| format!("{c:2}")).collect::<Vec<_>>().join(" "));
        }
    }
    ctx.finish(m)
}

fn eval(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut m = ctx.manifest("eval");
    let (world, vocab) = ctx.load_world(&mut m)?;
    if let Some(path) = checkpoint {
        let dir = path.parent().unwrap_or(Path::new("."));
        let pvocab = Vocabulary::from_json(&read(&dir.join("vocab.json"))?)?;
        let ckpt = load_model(path, &pvocab)?;
        m.inputs.insert(path.display().to_string(), crate::manifest::hash_file(path)?);
        let subject = world.subject(subject_of(&ckpt)?)?;
        let refs = load_refs(dir)?;
        let records = evaluate_subject(
            cfg,
            &world,
            subject,
            &refs,
            &ckpt.params,
            ckpt.adapters.as_ref(),
            &pvocab,
            true,
            true,
        )?;
        let meta = report_meta(cfg, &world, &[subject], &pvocab.hash())?;
        let method = format!("{:?}", ckpt.params.provenance);
        let report = EvalReport::aggregate(&method, &records, meta).map_err(arpersona::pipeline::PipelineError::from)?;
        let name = format!("eval/report_subject_{}.json", subject.subject_id);
        m.output(&ctx.out, &name, report.to_json().as_bytes())?;
        print!("{}", arpersona::eval::render_report(&report, ReportFormat::Markdown));
        return ctx.finish(m);
    }

    let base = ctx.load_base(&mut m, &vocab)?;
    let run = run_from_base(cfg, &world, &vocab, &base, LossTrace::default())?;
    m.output(&ctx.out, "eval/report_base.json", run.base.to_json().as_bytes())?;
    m.output(&ctx.out, "eval/report_stage1.json", run.stage1.to_json().as_bytes())?;
    m.output(&ctx.out, "eval/report_stage2.json", run.stage2.to_json().as_bytes())?;
    m.output(&ctx.out, "eval/class_prior.json", &json(&run.prior))?;
    let table = render_methods(&run.reports().map(|r| r.clone()));
    m.output(&ctx.out, "eval/report.md", table.as_bytes())?;
    print!("{table}");
    println!(
        "class prior: accuracy {:.3} -> {:.3}, diversity {:.3} -> {:.3}",
        run.prior.accuracy_before, run.prior.accuracy_after, run.prior.diversity_before, run.prior.diversity_after
    );
    ctx.finish(m)
}

fn ablate(ctx: &Context, grid: arpersona::pipeline::AblationGrid) -> Result<()> {
    let mut m = ctx.manifest("ablate");
    let (world, vocab) = ctx.load_world(&mut m)?;
    let base = ctx.load_base(&mut m, &vocab)?;
    let report = run_ablation(&ctx.cfg, &world, &vocab, &base, grid)?;
    let stem = serde_json::to_value(grid).expect("grid serializes");
    let stem = stem.as_str().expect("unit variant");
    m.output(&ctx.out, &format!("ablation/{stem}.json"), report.to_json().as_bytes())?;
    let md = report.to_markdown();
    m.output(&ctx.out, &format!("ablation/{stem}.md"), md.as_bytes())?;
    print!("{md}");
    // one manifest per grid so the three grids can share a run directory
    m.command = format!("ablate-{stem}");
    ctx.finish(m)
}

fn params(args: &ParamsArgs) -> Result<()> {
    let mode = match args.mode {
        ParamsMode::Lora => CountMode::Lora {
            rank: args.rank,
            every_n: args.every_n,
            targets: args.targets,
        },
        ParamsMode::FullAttn => CountMode::FullAttn,
        ParamsMode::EmbeddingOnly => CountMode::EmbeddingOnly { rows: args.rows },
    };
    if args.every_n == 0 || args.layers == 0 || args.d == 0 {
        return Err(CliError::Config("d, layers and every-n must be positive".into()));
    }
    let n = count_trainable_params(args.d, args.layers, &mode);
    println!("{n} ({})", format_millions(n));
    Ok(())
}
