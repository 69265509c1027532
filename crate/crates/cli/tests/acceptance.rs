//! Acceptance gate: one PASS/FAIL line per criterion. Runs as a plain binary
//! (`harness = false`) so the lines are printed regardless of capture.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use arpersona::eval::AblationReport;
use arpersona::model::{
    count_trainable_params, forward_logits, format_millions, image_loss, merge_lora, CountMode, LoraAdapterSet,
    LoraConfig, LoraTarget, ModelConfig, ModelError, ModelParams, TapeModel,
};
use arpersona::pipeline::{
    build_world, eval_subjects, extend_for_placeholders, personal_vocab, pretrain_base, reference_set, run_ablation,
    run_from_base, AblationGrid, FullRun, RunConfig,
};
use arpersona::sampler::cfg_combine;
use arpersona::tensor::{finite_difference_check, Tensor, TensorError};
use arpersona::trainer::{
    build_personalization_batch, personalize_stage1, personalize_stage2, placeholder_rows, LossTrace,
};
use arpersona::vocab::{per_image_name, TokenSequence, Vocabulary};
use arpersona::world::World;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Pretrained bench model shared by the pipeline criteria.
struct Bench {
    cfg: RunConfig,
    world: World,
    vocab: Vocabulary,
    base: ModelParams,
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let cfg = RunConfig::bench();
        let (world, vocab) = build_world(&cfg).expect("bench world");
        let t = Instant::now();
        let (base, _) = pretrain_base(&cfg, &world, &vocab).expect("pretraining");
        println!("  (pretrained bench base in {:.0?})", t.elapsed());
        Bench {
            cfg,
            world,
            vocab,
            base,
        }
    })
}

fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let b = bench();
        run_from_base(&b.cfg, &b.world, &b.vocab, &b.base, LossTrace::default()).expect("full run")
    })
}

fn parameter_accounting() -> Check {
    let expected = [12.6, 6.3, 3.2, 50.4, 25.2, 12.6, 201.4, 100.7, 50.4, 1610.6];
    let mut got = Vec::new();
    for rank in [16, 64, 256] {
        for every_n in [1, 2, 4] {
            let mode = CountMode::Lora {
                rank,
                every_n,
                targets: 3,
            };
            got.push(format_millions(count_trainable_params(4096, 32, &mode)));
        }
    }
    got.push(format_millions(count_trainable_params(4096, 32, &CountMode::FullAttn)));
    let mismatches: Vec<String> = got
        .iter()
        .zip(expected)
        .filter(|(g, e)| **g != format!("{e:.1}M"))
        .map(|(g, e)| format!("{g} vs {e:.1}M"))
        .collect();
    ensure(mismatches.is_empty(), format!("rows {got:?}; mismatches {mismatches:?}"))
}

fn cfg_formula() -> Check {
    let c = Tensor::vector(vec![2.0, 0.0]);
    let u = Tensor::vector(vec![1.0, 1.0]);
    let worked = cfg_combine(&c, &u, 4.0).map_err(|e| e.to_string())?;
    let mut ok = worked.bit_eq(&Tensor::vector(vec![5.0, -3.0]));
    let c = Tensor::vector(vec![0.1, -7.25, 3.0e-9, 1.0e12, -0.0]);
    let u = Tensor::vector(vec![2.5, 0.3, -1.0e-300, 4.0, 9.75]);
    ok &= cfg_combine(&c, &u, 0.0).map_err(|e| e.to_string())?.bit_eq(&u);
    ok &= cfg_combine(&c, &u, 1.0).map_err(|e| e.to_string())?.bit_eq(&c);
    ensure(ok, format!("s=4 example gives {:?}", worked.data()))
}

fn prompt_mixing() -> Check {
    let cfg = RunConfig::bench();
    let (world, vocab) = build_world(&cfg).map_err(|e| e.to_string())?;
    let subject = eval_subjects(&cfg, &world)[0];
    let refs = reference_set(&cfg, &world, subject).map_err(|e| e.to_string())?;
    let pv = personal_vocab(&vocab, refs.len()).map_err(|e| e.to_string())?;
    let per_image: Vec<u32> = (1..=refs.len()).map(|i| pv.id(&per_image_name(i)).unwrap()).collect();
    let class = world.config.classes[subject.class_id].clone();
    let mut rng = arpersona::rng::seeded(1);
    let mut splits = Vec::new();
    for step in 0..200 {
        let batch = build_personalization_batch(&refs, &pv, Some(&class), 8, step, &mut rng).map_err(|e| e.to_string())?;
        let with_s = batch
            .iter()
            .filter(|ex| ex.caption.iter().any(|id| per_image.contains(id)))
            .count();
        splits.push((batch.len() - with_s, with_s));
    }
    let bad = splits.iter().filter(|s| **s != (4, 4)).count();
    ensure(bad == 0, format!("200 steps, {bad} without a 4/4 split"))
}

/// Small deterministic perturbation so no gradient sits at a symmetric zero.
fn jitter(p: &mut ModelParams, amp: f64) {
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    for (k, n) in names.iter().enumerate() {
        for (i, v) in p.get_mut(n).unwrap().data_mut().iter_mut().enumerate() {
            *v += amp * ((i as f64 * 12.9898 + k as f64 * 78.233).sin() * 43_758.545).fract();
        }
    }
}

fn gradient_correctness() -> Check {
    let t = Instant::now();
    let cfg = ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        vocab_size: 20,
        context_len: 16,
        text_max: 5,
        rms_eps: 1e-5,
    };
    let mut p = ModelParams::init(&cfg, 5).map_err(|e| e.to_string())?;
    jitter(&mut p, 0.3);
    let seq = TokenSequence::new(vec![0, 6, 7, 2, 12, 15, 13, 19], 4);
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    let mut worst = 0.0f64;
    for name in &names {
        let x = p.get(name).unwrap().clone();
        let err = finite_difference_check(
            |g, xv| {
                let m = TapeModel::bind_with(g, &p, None, |g, n, t| {
                    if n == name {
                        xv
                    } else {
                        g.constant_owned(t.clone())
                    }
                });
                image_loss(g, &m, &seq, 10..20).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::Invalid(other.to_string()),
                })
            },
            &x,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-4 && secs < 60.0,
        format!("{} tensors, max relative error {worst:.2e}, {secs:.1}s", names.len()),
    )
}

fn stage_isolation() -> Check {
    let mut cfg = RunConfig::smoke();
    cfg.stage1.steps = 6;
    cfg.stage2_full.steps = 6;
    cfg.stage2_full.lr = 1e-2;
    let (world, vocab) = build_world(&cfg).map_err(|e| e.to_string())?;
    let (base, _) = pretrain_base(&cfg, &world, &vocab).map_err(|e| e.to_string())?;
    let subject = eval_subjects(&cfg, &world)[0];
    let refs = reference_set(&cfg, &world, subject).map_err(|e| e.to_string())?;
    let pv = personal_vocab(&vocab, refs.len()).map_err(|e| e.to_string())?;
    let class = world.config.classes[subject.class_id].clone();
    let start = extend_for_placeholders(&cfg, &base, &pv, Some(&class)).map_err(|e| e.to_string())?;
    let (s1, _) = personalize_stage1(&start, &refs, &pv, Some(&class), &cfg.stage1).map_err(|e| e.to_string())?;
    let s2 = personalize_stage2(&s1, None, &refs, &pv, Some(&class), &cfg.stage2_full)
        .map_err(|e| e.to_string())?
        .params;

    let rows = placeholder_rows(&pv, &refs).map_err(|e| e.to_string())?;
    let qkv: Vec<String> = (0..cfg.model.layers)
        .flat_map(|l| LoraTarget::ALL.map(|t| t.weight_name(l)))
        .collect();
    let mut leaks = Vec::new();
    for (name, before) in start.named() {
        let after = s1.get(&name).unwrap();
        if name == "tok_emb" {
            for r in 0..before.rows() {
                let same = before.row(r).iter().zip(after.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
                if !same && !rows.contains(&r) {
                    leaks.push(format!("stage 1 moved tok_emb row {r}"));
                }
            }
        } else if !before.bit_eq(after) {
            leaks.push(format!("stage 1 moved {name}"));
        }
    }
    for (name, before) in s1.named() {
        if !qkv.contains(&name) && !before.bit_eq(s2.get(&name).unwrap()) {
            leaks.push(format!("stage 2 moved {name}"));
        }
    }
    let s1_trained = rows.iter().any(|&r| start.tok_emb.row(r) != s1.tok_emb.row(r));
    let s2_trained = qkv.iter().all(|n| !s1.get(n).unwrap().bit_eq(s2.get(n).unwrap()));
    ensure(
        leaks.is_empty() && s1_trained && s2_trained,
        format!("leaks {leaks:?}; placeholders trained {s1_trained}; every Q/K/V trained {s2_trained}"),
    )
}

fn two_stage_ordering() -> Check {
    let t = Instant::now();
    let run = full_run();
    let (b, s1, s2) = (run.base.fidelity, run.stage1.fidelity, run.stage2.fidelity);
    ensure(
        s2 - s1 >= 0.10 && s1 - b >= 0.05,
        format!("fidelity base {b:.3}, stage 1 {s1:.3}, stage 1+2 {s2:.3} ({:.0?} after pretraining)", t.elapsed()),
    )
}

fn prompt_following_retention() -> Check {
    let run = full_run();
    let base = run.base.recontext_following.ok_or("base report has no recontext prompts")?;
    let tuned = run.stage2.recontext_following.ok_or("stage-2 report has no recontext prompts")?;
    ensure(
        tuned >= 0.9 * base,
        format!("recontext following base {base:.3}, personalized {tuned:.3} (ratio {:.3})", tuned / base),
    )
}

fn class_prior_preservation() -> Check {
    let p = &full_run().prior;
    ensure(
        p.diversity_after >= 0.8 * p.diversity_before && p.accuracy_before - p.accuracy_after <= 0.1,
        format!(
            "accuracy {:.3} -> {:.3}, diversity {:.3} -> {:.3}",
            p.accuracy_before, p.accuracy_after, p.diversity_before, p.diversity_after
        ),
    )
}

fn lora_monotonicity() -> Check {
    let b = bench();
    let report: AblationReport =
        run_ablation(&b.cfg, &b.world, &b.vocab, &b.base, AblationGrid::Lora).map_err(|e| e.to_string())?;
    let fid = |rank: usize, n: usize| {
        report
            .rows
            .iter()
            .find(|r| r.rank == Some(rank) && r.every_n == Some(n))
            .map(|r| r.fidelity)
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for &rank in &b.cfg.ablation.ranks {
        let (one, four) = (fid(rank, 1).ok_or("missing N=1 row")?, fid(rank, 4).ok_or("missing N=4 row")?);
        ok &= one >= four;
        parts.push(format!("r={rank}: N=1 {one:.3} vs N=4 {four:.3}"));
    }
    ensure(ok, parts.join("; "))
}

fn lora_identities() -> Check {
    let cfg = RunConfig::bench();
    let (_, vocab) = build_world(&cfg).map_err(|e| e.to_string())?;
    let mut p = ModelParams::init(&cfg.model.config(vocab.size()), 3).map_err(|e| e.to_string())?;
    jitter(&mut p, 0.1);
    let seq = vocab.encode_text("a photo of a dog in the jungle").map_err(|e| e.to_string())?;
    let mut set = LoraAdapterSet::new(&LoraConfig::new(4, 1), &p.config, 9).map_err(|e| e.to_string())?;
    let plain = forward_logits(&p, &seq, None).map_err(|e| e.to_string())?;
    let zero = forward_logits(&p, &seq, Some(&set)).map_err(|e| e.to_string())?;
    let unchanged = plain.bit_eq(&zero);
    for (i, pair) in set.pairs.iter_mut().enumerate() {
        pair.b = pair.a.transpose().map(|v| v * (0.5 + i as f64 * 0.1));
    }
    let adapted = forward_logits(&p, &seq, Some(&set)).map_err(|e| e.to_string())?;
    let merged = merge_lora(&p, &set).map_err(|e| e.to_string())?;
    let merged_logits = forward_logits(&merged, &seq, None).map_err(|e| e.to_string())?;
    let diff = adapted.max_abs_diff(&merged_logits);
    let moved = adapted.max_abs_diff(&plain);
    ensure(
        unchanged && diff <= 1e-10 && moved > 1e-6,
        format!("zero-init bit-identical {unchanged}; merged vs adapter {diff:.2e}; adapter effect {moved:.2e}"),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_arpersona"))
        .args(["--preset", "smoke", "--seed", "11", "--strict-repro", "--out"])
        .arg(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")))
    }
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        for cmd in [&["worldgen"][..], &["pretrain"], &["personalize"], &["eval"], &["ablate", "--grid", "lora"]] {
            run_cli(d, cmd)?;
        }
    }
    let files = [
        "manifest.worldgen.json",
        "manifest.pretrain.json",
        "manifest.personalize.json",
        "manifest.eval.json",
        "manifest.ablate-lora.json",
        "eval/report_base.json",
        "eval/report_stage1.json",
        "eval/report_stage2.json",
        "eval/class_prior.json",
        "eval/report.md",
        "ablation/lora.json",
    ];
    let mut differing = Vec::new();
    for f in files {
        let a = std::fs::read(dirs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dirs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            differing.push(f);
        }
    }
    ensure(
        differing.is_empty(),
        format!("{} artifacts compared across two runs; differing {differing:?}", files.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("parameter accounting at d=4096, L=32", parameter_accounting),
        ("CFG formula", cfg_formula),
        ("1:1 prompt mixing", prompt_mixing),
        ("gradient correctness", gradient_correctness),
        ("stage isolation", stage_isolation),
        ("two-stage fidelity ordering", two_stage_ordering),
        ("prompt-following retention", prompt_following_retention),
        ("class-prior preservation", class_prior_preservation),
        ("LoRA layer-count trend", lora_monotonicity),
        ("LoRA identities", lora_identities),
        ("strict-repro determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {:>2} {name}: {detail} [{:.1?}]", i + 1, t.elapsed());
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
