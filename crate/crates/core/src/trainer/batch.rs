use rand::Rng as _;

use super::{Result, TrainError};
use crate::rng::Rng;
use crate::vocab::{PromptTemplate, Purpose, Vocabulary};
use crate::world::{Example, NEUTRAL_PREFIXES};

/// Caption pattern for one personalization slot: format A for even slots,
/// format B (with the reference's per-image token) for odd ones.
pub fn personalization_template(prefix: &str, with_class: bool, per_image: bool) -> Result<PromptTemplate> {
    let mut pattern = format!("{prefix} {{IDENT}}");
    if with_class {
        pattern.push_str(" {CLASS}");
    }
    if per_image {
        pattern.push_str(" {PERIMG}");
    }
    Ok(PromptTemplate::parse(&pattern, Purpose::Training)?)
}

/// Builds `size` captioned reference pairs. Slots alternate between the two
/// caption formats, so any even size is an exact 1:1 split. Prefixes cycle
/// through the neutral list across slots and steps. `class = None` drops the
/// class word.
pub fn build_personalization_batch(
    refs: &[Example],
    vocab: &Vocabulary,
    class: Option<&str>,
    size: usize,
    step_index: usize,
    rng: &mut Rng,
) -> Result<Vec<Example>> {
    if size < 2 {
        return Err(TrainError::Config("personalization batches need at least 2 slots".into()));
    }
    if refs.is_empty() {
        return Err(TrainError::Config("no reference images".into()));
    }
    let mut out = Vec::with_capacity(size);
    for slot in 0..size {
        let r = &refs[rng.random_range(0..refs.len())];
        let index = r.meta.reference_index.unwrap_or(1);
        let prefix = NEUTRAL_PREFIXES[(step_index * size + slot) % NEUTRAL_PREFIXES.len()];
        let per_image = slot % 2 == 1;
        let template = personalization_template(prefix, class.is_some(), per_image)?;
        let seq = vocab.encode_prompt(&template, class, per_image.then_some(index))?;
        let mut meta = r.meta.clone();
        meta.reference_index = Some(index);
        out.push(Example {
            caption: seq.ids,
            image: r.image.clone(),
            meta,
        });
    }
    Ok(out)
}
