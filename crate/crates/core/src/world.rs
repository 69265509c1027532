//! Procedural "sprite world": subjects are small code patterns stamped onto
//! per-cell random backgrounds.
//!
//! Code layout of the image split: `0..background_codes` are background
//! codes, split into disjoint supports (one per background); the rest are
//! sprite codes. The top `modifiers.len()` sprite codes are recolor targets,
//! and each class owns an equal slice of what remains.
//!
//! A subject's sprite is its class prototype with some named style patches
//! applied, plus a few random cell changes of its own. Captions may name the
//! styles, so a trained model can express style combinations it never saw
//! together, but never a held-out subject's own cell changes.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::rng::{mix, mix3, seeded, Rng};
use crate::vocab::{Purpose, PromptTemplate, TokenId, TokenSequence, VocabConfig, VocabError, Vocabulary};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world config: {0}")]
    Config(String),
    #[error("sprite of size {k} at {pos:?} does not fit a {h}x{w} grid")]
    OutOfBounds {
        k: usize,
        pos: (usize, usize),
        h: usize,
        w: usize,
    },
    #[error("reference set size {0} outside 3..=5")]
    RefCount(usize),
    #[error("unknown subject {0}")]
    UnknownSubject(u32),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Neutral caption prefixes cycled by the corpus and personalization batches.
pub const NEUTRAL_PREFIXES: [&str; 10] = [
    "a photo of",
    "a rendition of",
    "a picture of",
    "a close up photo of",
    "a good photo of",
    "a cropped photo of",
    "a bright photo of",
    "a dark photo of",
    "a clean photo of",
    "a rendering of",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub image_codes: usize,
    pub background_codes: usize,
    /// One context word per background.
    pub contexts: Vec<String>,
    pub classes: Vec<String>,
    pub modifiers: Vec<String>,
    /// Named variations shared by every class; each recolors a fixed,
    /// class-specific set of sprite cells.
    pub styles: Vec<String>,
    /// Cells owned by each style; styles of one class never overlap.
    pub style_cells: usize,
    /// Styles carried by every held-out subject.
    pub personal_styles: usize,
    /// Share of context and plain captions that name the subject's styles.
    pub style_caption_rate: f64,
    pub sprite_size: usize,
    pub generic_per_class: usize,
    pub personal_per_class: usize,
    /// Cells changed from the class prototype for generic subjects.
    pub generic_mutations: usize,
    /// Cells changed from the class prototype for held-out subjects.
    pub personal_mutations: usize,
    /// Sprite corners lie on multiples of this stride.
    pub anchor_stride: usize,
    pub flip_prob: f64,
    pub uncond_rate: f64,
    pub no_context_rate: f64,
    pub modifier_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            image_codes: 64,
            background_codes: 32,
            contexts: [
                "jungle", "beach", "snow", "city", "desert", "forest", "kitchen", "garden",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            classes: ["dog", "cat", "backpack", "boot"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            modifiers: ["red", "blue", "green", "yellow", "purple"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            styles: ["spotted", "striped", "fluffy", "tiny"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            style_cells: 3,
            personal_styles: 2,
            style_caption_rate: 0.8,
            sprite_size: 4,
            generic_per_class: 20,
            personal_per_class: 2,
            generic_mutations: 1,
            personal_mutations: 3,
            anchor_stride: 4,
            flip_prob: 0.0,
            uncond_rate: 0.1,
            no_context_rate: 0.2,
            modifier_rate: 0.1,
        }
    }
}

impl WorldConfig {
    /// Reduced world used by the test suites: 8×8 grids.
    pub fn small() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let err = |m: String| Err(WorldError::Config(m));
        let k = self.sprite_size;
        if !(3..=6).contains(&k) {
            return err(format!("sprite size {k} outside 3..=6"));
        }
        if self.grid_h < k || self.grid_w < k {
            return err("grid smaller than sprite".into());
        }
        if self.background_codes == 0 || self.background_codes >= self.image_codes {
            return err("background codes must leave room for sprite codes".into());
        }
        let n_bg = self.contexts.len();
        if n_bg == 0 || self.background_codes / n_bg == 0 {
            return err("not enough background codes for the context list".into());
        }
        if self.classes.is_empty() {
            return err("no classes".into());
        }
        let sprite_codes = self.image_codes - self.background_codes;
        if sprite_codes <= self.modifiers.len()
            || (sprite_codes - self.modifiers.len()) / self.classes.len() < 2
        {
            return err("not enough sprite codes per class".into());
        }
        if self.anchor_stride == 0 {
            return err("anchor stride must be positive".into());
        }
        if self.generic_mutations >= k * k || self.personal_mutations >= k * k {
            return err("mutation count must be below sprite area".into());
        }
        if self.styles.len() * self.style_cells > k * k {
            return err("style cells exceed sprite area".into());
        }
        if self.personal_styles > self.styles.len()
            || self.personal_styles * self.style_cells + self.personal_mutations > k * k
        {
            return err("held-out subjects need more styles or cells than exist".into());
        }
        for p in [
            self.flip_prob,
            self.uncond_rate,
            self.no_context_rate,
            self.modifier_rate,
            self.style_caption_rate,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("probability {p} outside [0, 1]"));
            }
        }
        if self.uncond_rate + self.no_context_rate + self.modifier_rate > 1.0 {
            return err("caption rates sum above 1".into());
        }
        Ok(())
    }

    pub fn vocab_config(&self) -> VocabConfig {
        let mut words: Vec<String> = Vec::new();
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for p in NEUTRAL_PREFIXES {
            for w in p.split_whitespace() {
                push(w);
            }
        }
        push("in");
        push("the");
        for w in self
            .classes
            .iter()
            .chain(&self.contexts)
            .chain(&self.modifiers)
            .chain(&self.styles)
        {
            push(w);
        }
        VocabConfig {
            words,
            image_codes: self.image_codes,
            class_names: self.classes.clone(),
        }
    }

    pub fn anchors(&self) -> Vec<(usize, usize)> {
        let k = self.sprite_size;
        let rows: Vec<usize> = (0..=self.grid_h - k).step_by(self.anchor_stride).collect();
        let cols: Vec<usize> = (0..=self.grid_w - k).step_by(self.anchor_stride).collect();
        rows.iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect()
    }

    fn codes_per_background(&self) -> usize {
        self.background_codes / self.contexts.len()
    }

    fn codes_per_class(&self) -> usize {
        (self.image_codes - self.background_codes - self.modifiers.len()) / self.classes.len()
    }

    pub fn class_codes(&self, class_id: usize) -> std::ops::Range<u16> {
        let per = self.codes_per_class();
        let start = self.background_codes + class_id * per;
        start as u16..(start + per) as u16
    }

    pub fn modifier_code(&self, modifier_id: usize) -> u16 {
        (self.image_codes - self.modifiers.len() + modifier_id) as u16
    }

    pub fn is_sprite_code(&self, code: u16) -> bool {
        (code as usize) >= self.background_codes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: u32,
    pub class_id: usize,
    pub sprite: Grid,
    /// Generic subjects feed the pretraining corpus; the rest are held out.
    pub generic: bool,
    /// Indices into the world's style list, ascending.
    #[serde(default)]
    pub styles: Vec<usize>,
}

/// Cells (row-major index) and codes a style writes onto a class prototype.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StylePatch {
    pub cells: Vec<(usize, u16)>,
}

impl StylePatch {
    fn apply(&self, sprite: &mut Grid) {
        let w = sprite.width();
        for &(cell, code) in &self.cells {
            sprite.set(cell / w, cell % w, code);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background_id: usize,
    pub position: (usize, usize),
    pub flip: bool,
}

/// Categorical code distribution for one background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub codes: Vec<u16>,
    pub weights: Vec<f64>,
}

impl Background {
    pub fn support(&self) -> &[u16] {
        &self.codes
    }

    fn sample(&self, rng: &mut Rng) -> u16 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, w) in self.codes.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return *c;
            }
        }
        *self.codes.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub subject_id: u32,
    pub class_id: usize,
    pub background_id: usize,
    pub position: (usize, usize),
    pub flip: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modifier: Option<usize>,
    #[serde(default)]
    pub uncond: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_index: Option<usize>,
}

/// A caption/image training pair. `caption` holds the text ids, ending in
/// `IMG_START` (empty for unfilled reference images).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub caption: Vec<TokenId>,
    pub image: Grid,
    pub meta: ExampleMeta,
}

impl Example {
    pub fn caption_sequence(&self) -> TokenSequence {
        TokenSequence::new(self.caption.clone(), self.caption.len())
    }
}

/// What a generated image must show to follow its prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Expectation {
    Recontext {
        background_id: usize,
        support: Vec<u16>,
    },
    PropertyMod {
        modifier_id: usize,
        code: u16,
        /// Expected share of sprite-range cells carrying the modifier code.
        target_fraction: f64,
    },
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub template: PromptTemplate,
    pub expectation: Expectation,
}

/// A generated world: backgrounds, class prototypes and subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub backgrounds: Vec<Background>,
    pub prototypes: Vec<Grid>,
    /// `style_patches[class][style]`.
    pub style_patches: Vec<Vec<StylePatch>>,
    pub subjects: Vec<SubjectSpec>,
}

impl World {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self, WorldError> {
        config.validate()?;
        let mut rng = seeded(mix(seed, 0x5752));
        let per_bg = config.codes_per_background();
        let backgrounds = (0..config.contexts.len())
            .map(|b| {
                let codes: Vec<u16> = (b * per_bg..(b + 1) * per_bg).map(|c| c as u16).collect();
                let raw: Vec<f64> = codes.iter().map(|_| rng.random_range(0.5..1.5)).collect();
                let total: f64 = raw.iter().sum();
                Background {
                    codes,
                    weights: raw.iter().map(|w| w / total).collect(),
                }
            })
            .collect();

        let k = config.sprite_size;
        let prototypes: Vec<Grid> = (0..config.classes.len())
            .map(|c| {
                let range = config.class_codes(c);
                let dominant = range.start;
                loop {
                    let codes: Vec<u16> = (0..k * k)
                        .map(|_| {
                            if rng.random_bool(0.4) {
                                dominant
                            } else {
                                rng.random_range(range.clone())
                            }
                        })
                        .collect();
                    let g = Grid::new(k, k, codes).unwrap();
                    if g.codes().iter().any(|&x| x != g.codes()[0]) {
                        break g;
                    }
                }
            })
            .collect();

        let style_patches: Vec<Vec<StylePatch>> = prototypes
            .iter()
            .enumerate()
            .map(|(c, proto)| {
                let mut cells: Vec<usize> = (0..k * k).collect();
                cells.shuffle(&mut rng);
                cells
                    .chunks(config.style_cells.max(1))
                    .take(config.styles.len())
                    .map(|chunk| {
                        let mut cells: Vec<(usize, u16)> = chunk
                            .iter()
                            .map(|&cell| {
                                let old = proto.codes()[cell];
                                let choices: Vec<u16> = config.class_codes(c).filter(|&x| x != old).collect();
                                (cell, choices[rng.random_range(0..choices.len())])
                            })
                            .collect();
                        cells.sort_unstable();
                        StylePatch { cells }
                    })
                    .collect()
            })
            .collect();

        let mut subjects = Vec::new();
        let mut next_id = 0u32;
        for generic in [true, false] {
            let (per_class, mutations) = if generic {
                (config.generic_per_class, config.generic_mutations)
            } else {
                (config.personal_per_class, config.personal_mutations)
            };
            for (class_id, proto) in prototypes.iter().enumerate() {
                let mut seen: BTreeSet<Vec<u16>> = BTreeSet::new();
                seen.insert(proto.codes().to_vec());
                for s in subjects.iter().filter(|s: &&SubjectSpec| s.class_id == class_id) {
                    seen.insert(s.sprite.codes().to_vec());
                }
                let mut made = 0;
                while made < per_class {
                    let n_styles = if generic {
                        rng.random_range(0..=config.styles.len().min(2))
                    } else {
                        config.personal_styles
                    };
                    let mut styles: Vec<usize> = (0..config.styles.len()).collect();
                    styles.shuffle(&mut rng);
                    styles.truncate(n_styles);
                    styles.sort_unstable();
                    let mut sprite = proto.clone();
                    let mut styled = BTreeSet::new();
                    for &st in &styles {
                        let patch = &style_patches[class_id][st];
                        patch.apply(&mut sprite);
                        styled.extend(patch.cells.iter().map(|&(cell, _)| cell));
                    }
                    let free: Vec<usize> = (0..k * k).filter(|c| !styled.contains(c)).collect();
                    let sprite = mutate(&sprite, &free, mutations, config.class_codes(class_id), &mut rng);
                    if sprite.codes().iter().all(|&x| x == sprite.codes()[0])
                        || !seen.insert(sprite.codes().to_vec())
                    {
                        continue;
                    }
                    subjects.push(SubjectSpec {
                        subject_id: next_id,
                        class_id,
                        sprite,
                        generic,
                        styles,
                    });
                    next_id += 1;
                    made += 1;
                }
            }
        }

        Ok(Self {
            config: config.clone(),
            seed,
            backgrounds,
            prototypes,
            style_patches,
            subjects,
        })
    }

    pub fn subject(&self, id: u32) -> Result<&SubjectSpec, WorldError> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == id)
            .ok_or(WorldError::UnknownSubject(id))
    }

    pub fn held_out_subjects(&self) -> impl Iterator<Item = &SubjectSpec> {
        self.subjects.iter().filter(|s| !s.generic)
    }

    pub fn generic_subjects(&self, class_id: usize) -> impl Iterator<Item = &SubjectSpec> {
        self.subjects
            .iter()
            .filter(move |s| s.generic && s.class_id == class_id)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, WorldError> {
        Ok(Vocabulary::build(&self.config.vocab_config())?)
    }

    /// Stamps the (optionally mirrored) sprite over a sampled background.
    pub fn render_scene(&self, sprite: &Grid, scene: &SceneSpec, seed: u64) -> Result<Grid, WorldError> {
        let (h, w) = (self.config.grid_h, self.config.grid_w);
        let k = sprite.height();
        let (r, c) = scene.position;
        if r + k > h || c + sprite.width() > w {
            return Err(WorldError::OutOfBounds {
                k,
                pos: scene.position,
                h,
                w,
            });
        }
        let bg = self
            .backgrounds
            .get(scene.background_id)
            .ok_or_else(|| WorldError::Config(format!("no background {}", scene.background_id)))?;
        let mut rng = seeded(seed);
        let codes = (0..h * w).map(|_| bg.sample(&mut rng)).collect();
        let mut grid = Grid::new(h, w, codes).unwrap();
        let patch = if scene.flip { sprite.flipped() } else { sprite.clone() };
        grid.paste(r, c, &patch);
        Ok(grid)
    }

    /// Sprite with its dominant code replaced by the modifier's code.
    pub fn modified_sprite(&self, sprite: &Grid, modifier_id: usize) -> Grid {
        let dom = sprite.dominant_code();
        let code = self.config.modifier_code(modifier_id);
        let mut out = sprite.clone();
        for r in 0..out.height() {
            for c in 0..out.width() {
                if out.get(r, c) == dom {
                    out.set(r, c, code);
                }
            }
        }
        out
    }

    fn random_scene(&self, rng: &mut Rng) -> SceneSpec {
        let anchors = self.config.anchors();
        SceneSpec {
            background_id: rng.random_range(0..self.backgrounds.len()),
            position: anchors[rng.random_range(0..anchors.len())],
            flip: rng.random_bool(self.config.flip_prob),
        }
    }

    fn caption_words(
        &self,
        prefix: &str,
        modifier: Option<usize>,
        styles: &[usize],
        class_id: usize,
        context: Option<usize>,
    ) -> String {
        let mut s = format!("{prefix} a");
        if let Some(m) = modifier {
            s.push(' ');
            s.push_str(&self.config.modifiers[m]);
        }
        for &st in styles {
            s.push(' ');
            s.push_str(&self.config.styles[st]);
        }
        s.push(' ');
        s.push_str(&self.config.classes[class_id]);
        if let Some(b) = context {
            s.push_str(" in the ");
            s.push_str(&self.config.contexts[b]);
        }
        s
    }

    /// Pretraining pairs over generic subjects. The first
    /// `classes × backgrounds` examples cover every pair once.
    pub fn sample_pretrain_corpus(
        &self,
        vocab: &Vocabulary,
        count: usize,
        seed: u64,
        held_out: &[u32],
    ) -> Result<Vec<Example>, WorldError> {
        let cfg = &self.config;
        if cfg.classes.len() < 4 || cfg.contexts.len() < 8 || cfg.generic_per_class < 20 {
            return Err(WorldError::Config(
                "corpus needs >= 4 classes, >= 8 backgrounds and >= 20 generic subjects per class".into(),
            ));
        }
        let pairs = cfg.classes.len() * cfg.contexts.len();
        if count < pairs {
            return Err(WorldError::Config(format!(
                "{count} examples cannot cover {pairs} class x background pairs"
            )));
        }
        let pools: Vec<Vec<&SubjectSpec>> = (0..cfg.classes.len())
            .map(|c| {
                self.generic_subjects(c)
                    .filter(|s| !held_out.contains(&s.subject_id))
                    .collect()
            })
            .collect();
        if pools.iter().any(|p| p.is_empty()) {
            return Err(WorldError::Config("a class has no usable generic subjects".into()));
        }

        let mut rng = seeded(mix(seed, 0xC0));
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let (class_id, scene, kind) = if i < pairs {
                let class_id = i / cfg.contexts.len();
                let mut scene = self.random_scene(&mut rng);
                scene.background_id = i % cfg.contexts.len();
                (class_id, scene, CaptionKind::Context)
            } else {
                let class_id = rng.random_range(0..cfg.classes.len());
                let scene = self.random_scene(&mut rng);
                let u: f64 = rng.random();
                let kind = if u < cfg.uncond_rate {
                    CaptionKind::Uncond
                } else if u < cfg.uncond_rate + cfg.no_context_rate {
                    CaptionKind::NoContext
                } else if u < cfg.uncond_rate + cfg.no_context_rate + cfg.modifier_rate {
                    CaptionKind::Modifier(rng.random_range(0..cfg.modifiers.len().max(1)))
                } else {
                    CaptionKind::Context
                };
                (class_id, scene, kind)
            };
            let pool = &pools[class_id];
            let subject = pool[rng.random_range(0..pool.len())];
            let prefix = NEUTRAL_PREFIXES[rng.random_range(0..NEUTRAL_PREFIXES.len())];
            let modifier = match kind {
                CaptionKind::Modifier(m) if !cfg.modifiers.is_empty() => Some(m),
                _ => None,
            };
            let sprite = match modifier {
                Some(m) => self.modified_sprite(&subject.sprite, m),
                None => subject.sprite.clone(),
            };
            let image = self.render_scene(&sprite, &scene, rng.random())?;
            let named = rng.random_bool(cfg.style_caption_rate);
            let styles: &[usize] = if named && modifier.is_none() { &subject.styles } else { &[] };
            let caption = match kind {
                CaptionKind::Uncond => vocab.uncond_prompt().ids,
                CaptionKind::NoContext => vocab
                    .encode_text(&self.caption_words(prefix, None, styles, class_id, None))?
                    .ids,
                _ => vocab
                    .encode_text(&self.caption_words(
                        prefix,
                        modifier,
                        styles,
                        class_id,
                        Some(scene.background_id),
                    ))?
                    .ids,
            };
            out.push(Example {
                caption,
                image,
                meta: ExampleMeta {
                    subject_id: subject.subject_id,
                    class_id,
                    background_id: scene.background_id,
                    position: scene.position,
                    flip: scene.flip,
                    modifier,
                    uncond: kind == CaptionKind::Uncond,
                    reference_index: None,
                },
            });
        }
        Ok(out)
    }

    /// `n` reference images of one subject on pairwise distinct backgrounds,
    /// using at least two distinct positions. Captions are left empty.
    pub fn sample_reference_set(&self, subject: &SubjectSpec, n: usize, seed: u64) -> Result<Vec<Example>, WorldError> {
        if !(3..=5).contains(&n) {
            return Err(WorldError::RefCount(n));
        }
        if self.backgrounds.len() < n {
            return Err(WorldError::Config(format!(
                "{} backgrounds cannot give {n} distinct references",
                self.backgrounds.len()
            )));
        }
        let anchors = self.config.anchors();
        let mut rng = seeded(mix3(seed, subject.subject_id as u64, 0x2EF));
        let mut bgs: Vec<usize> = (0..self.backgrounds.len()).collect();
        bgs.shuffle(&mut rng);
        let mut positions: Vec<(usize, usize)> = (0..n)
            .map(|_| anchors[rng.random_range(0..anchors.len())])
            .collect();
        if anchors.len() > 1 && positions.iter().all(|&p| p == positions[0]) {
            let other = anchors.iter().copied().find(|&a| a != positions[0]).unwrap();
            positions[n - 1] = other;
        }
        (0..n)
            .map(|i| {
                let scene = SceneSpec {
                    background_id: bgs[i],
                    position: positions[i],
                    flip: rng.random_bool(self.config.flip_prob),
                };
                let image = self.render_scene(&subject.sprite, &scene, rng.random())?;
                Ok(Example {
                    caption: Vec::new(),
                    image,
                    meta: ExampleMeta {
                        subject_id: subject.subject_id,
                        class_id: subject.class_id,
                        background_id: scene.background_id,
                        position: scene.position,
                        flip: scene.flip,
                        modifier: None,
                        uncond: false,
                        reference_index: Some(i + 1),
                    },
                })
            })
            .collect()
    }

    /// Fixed prompt suite for one class: 60% re-contextualization, 20%
    /// property modification, the rest plain reconstruction (15/5/5 at 25).
    pub fn sample_eval_prompts(&self, class_id: usize, count: usize) -> Vec<EvalPrompt> {
        let cfg = &self.config;
        let n_recontext = (count * 3 + 2) / 5;
        let n_modify = if cfg.modifiers.is_empty() { 0 } else { (count + 2) / 5 };
        let n_recon = count - n_recontext - n_modify;
        let proto = &self.prototypes[class_id];
        let dom = proto.dominant_code();
        let target_fraction =
            proto.codes().iter().filter(|&&c| c == dom).count() as f64 / proto.codes().len() as f64;

        let mut out = Vec::with_capacity(count);
        for i in 0..n_recontext {
            let b = i % cfg.contexts.len();
            let prefix = NEUTRAL_PREFIXES[(i / cfg.contexts.len()) % 3];
            let pattern = format!("{prefix} {{IDENT}} {{CLASS}} in the {}", cfg.contexts[b]);
            out.push(EvalPrompt {
                template: PromptTemplate::parse(&pattern, Purpose::Recontext).unwrap(),
                expectation: Expectation::Recontext {
                    background_id: b,
                    support: self.backgrounds[b].codes.clone(),
                },
            });
        }
        for i in 0..n_modify {
            let m = i % cfg.modifiers.len();
            let pattern = format!("a photo of {} {{IDENT}} {{CLASS}}", cfg.modifiers[m]);
            out.push(EvalPrompt {
                template: PromptTemplate::parse(&pattern, Purpose::PropertyMod).unwrap(),
                expectation: Expectation::PropertyMod {
                    modifier_id: m,
                    code: cfg.modifier_code(m),
                    target_fraction,
                },
            });
        }
        for _ in 0..n_recon {
            out.push(EvalPrompt {
                template: PromptTemplate::parse("a photo of {IDENT} {CLASS}", Purpose::Reconstruction).unwrap(),
                expectation: Expectation::Reconstruction,
            });
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CaptionKind {
    Context,
    NoContext,
    Modifier(usize),
    Uncond,
}

/// Recodes `n` of the `free` cells to other codes from `codes`.
fn mutate(proto: &Grid, free: &[usize], n: usize, codes: std::ops::Range<u16>, rng: &mut Rng) -> Grid {
    let mut out = proto.clone();
    let mut cells = free.to_vec();
    cells.shuffle(rng);
    let w = proto.width();
    for &cell in cells.iter().take(n) {
        let (r, c) = (cell / w, cell % w);
        let old = out.get(r, c);
        let choices: Vec<u16> = codes.clone().filter(|&x| x != old).collect();
        out.set(r, c, choices[rng.random_range(0..choices.len())]);
    }
    out
}

/// Serializes examples as JSON Lines.
pub fn to_jsonl(examples: &[Example]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(e).expect("example serializes"));
        s.push('\n');
    }
    s
}

pub fn from_jsonl(s: &str) -> Result<Vec<Example>, serde_json::Error> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
