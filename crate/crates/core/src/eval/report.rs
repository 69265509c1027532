use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{diversity, ordered_mean};
use super::{EvalError, Result};
use crate::grid::Grid;
use crate::model::format_millions;
use crate::sampler::SamplerConfig;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    Recontext,
    PropertyMod,
    Reconstruction,
}

/// One scored generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub subject_id: u32,
    pub prompt_index: usize,
    pub kind: PromptKind,
    pub prompt: String,
    pub seed: u64,
    pub fidelity: f64,
    pub prompt_following: f64,
    pub grid: Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject_id: u32,
    pub generations: usize,
    pub fidelity: f64,
    pub prompt_following: f64,
    /// Prompt following over re-contextualization prompts only.
    pub recontext_following: Option<f64>,
    pub diversity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub run_seed: u64,
    pub world_seed: u64,
    pub vocab_hash: String,
    /// Direct sprite match of uniformly random grids, per subject.
    pub chance_level: BTreeMap<u32, f64>,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub method: String,
    pub subjects: Vec<SubjectRow>,
    pub fidelity: f64,
    pub prompt_following: f64,
    pub recontext_following: Option<f64>,
    pub diversity: Option<f64>,
    pub meta: ReportMeta,
}

impl EvalReport {
    /// Reduces scored generations to per-subject rows (ordered by subject
    /// id) and unweighted means over subjects. Input order does not matter.
    pub fn aggregate(method: &str, records: &[GenerationRecord], meta: ReportMeta) -> Result<Self> {
        if records.is_empty() {
            return Err(EvalError::Config("no generations to aggregate".into()));
        }
        let mut by_subject: BTreeMap<u32, Vec<&GenerationRecord>> = BTreeMap::new();
        for r in records {
            by_subject.entry(r.subject_id).or_default().push(r);
        }
        let mut subjects = Vec::with_capacity(by_subject.len());
        for (id, mut recs) in by_subject {
            recs.sort_by_key(|r| r.prompt_index);
            let fid: Vec<f64> = recs.iter().map(|r| r.fidelity).collect();
            let pf: Vec<f64> = recs.iter().map(|r| r.prompt_following).collect();
            let rc: Vec<f64> = recs
                .iter()
                .filter(|r| r.kind == PromptKind::Recontext)
                .map(|r| r.prompt_following)
                .collect();
            let grids: Vec<Grid> = recs.iter().map(|r| r.grid.clone()).collect();
            subjects.push(SubjectRow {
                subject_id: id,
                generations: recs.len(),
                fidelity: ordered_mean(&fid).expect("non-empty"),
                prompt_following: ordered_mean(&pf).expect("non-empty"),
                recontext_following: ordered_mean(&rc),
                diversity: diversity(&grids).ok(),
            });
        }
        let col = |f: &dyn Fn(&SubjectRow) -> Option<f64>| {
            let v: Vec<f64> = subjects.iter().filter_map(f).collect();
            ordered_mean(&v)
        };
        Ok(Self {
            format_version: REPORT_VERSION,
            method: method.to_string(),
            fidelity: col(&|s| Some(s.fidelity)).expect("non-empty"),
            prompt_following: col(&|s| Some(s.prompt_following)).expect("non-empty"),
            recontext_following: col(&|s| s.recontext_following),
            diversity: col(&|s| s.diversity),
            subjects,
            meta,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| EvalError::Config(format!("report json: {e}")))?;
        if r.format_version != REPORT_VERSION {
            return Err(EvalError::Config(format!(
                "report version {} (expected {REPORT_VERSION})",
                r.format_version
            )));
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Markdown,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Method-level table followed by a per-subject breakdown.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Markdown => {
            let mut s = render_methods(std::slice::from_ref(report));
            s.push_str("\n| Subject | Generations | Fidelity↑ | PromptFollow↑ | Recontext↑ | Diversity |\n");
            s.push_str("|---|---|---|---|---|---|\n");
            for row in &report.subjects {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.3} | {:.3} | {} | {} |",
                    row.subject_id,
                    row.generations,
                    row.fidelity,
                    row.prompt_following,
                    opt(row.recontext_following),
                    opt(row.diversity)
                );
            }
            s
        }
    }
}

/// One row per report: Method, Fidelity↑, PromptFollow↑.
pub fn render_methods(reports: &[EvalReport]) -> String {
    let mut s = String::from("| Method | Fidelity↑ | PromptFollow↑ |\n|---|---|---|\n");
    for r in reports {
        let _ = writeln!(s, "| {} | {:.3} | {:.3} |", r.method, r.fidelity, r.prompt_following);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub rank: Option<usize>,
    pub every_n: Option<usize>,
    /// Exact trainable scalars at the evaluated model size.
    pub trainable_params: u64,
    /// The same configuration counted at width 4096 and depth 32.
    pub reference_params: Option<u64>,
    pub fidelity: f64,
    pub prompt_following: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format_version: u32,
    pub rows: Vec<AblationRow>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Default for AblationReport {
    fn default() -> Self {
        Self::new()
    }
}

impl AblationReport {
    pub fn new() -> Self {
        Self {
            format_version: REPORT_VERSION,
            rows: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| EvalError::Config(format!("ablation json: {e}")))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Method | Rank | Every N Layer | # Trainable Parameters | Params @ d=4096, L=32 | Fidelity↑ | PromptFollow↑ |\n\
             |---|---|---|---|---|---|---|\n",
        );
        let dash = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        for r in &self.rows {
            let method = match &r.note {
                Some(n) => format!("{} ({n})", r.method),
                None => r.method.clone(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {:.3} | {:.3} |",
                method,
                dash(r.rank),
                dash(r.every_n),
                r.trainable_params,
                r.reference_params.map_or_else(|| "-".to_string(), format_millions),
                r.fidelity,
                r.prompt_following
            );
        }
        s
    }
}
