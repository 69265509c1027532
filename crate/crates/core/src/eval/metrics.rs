//! Exact scoring oracles for generated grids.

use super::{EvalError, Result};
use crate::grid::Grid;
use crate::rng::seeded;
use crate::world::{Expectation, WorldConfig};
use rand::Rng as _;

/// Best window placement of a template: matching cells, corner, mirrored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowMatch {
    pub matches: usize,
    pub position: (usize, usize),
    pub flipped: bool,
}

fn check_fits(grid: &Grid, template: &Grid) -> Result<()> {
    if template.height() > grid.height() || template.width() > grid.width() {
        return Err(EvalError::Dimension(format!(
            "template {:?} does not fit grid {:?}",
            template.dims(),
            grid.dims()
        )));
    }
    Ok(())
}

/// Exhaustive search over every corner and both mirrorings of `template`.
/// Ties keep the first hit in raster order, unmirrored first.
pub fn best_window(grid: &Grid, template: &Grid) -> Result<WindowMatch> {
    check_fits(grid, template)?;
    let (kh, kw) = template.dims();
    let mirrored = template.flipped();
    let mut best = WindowMatch {
        matches: 0,
        position: (0, 0),
        flipped: false,
    };
    let mut first = true;
    for (flipped, t) in [(false, template), (true, &mirrored)] {
        for r in 0..=grid.height() - kh {
            for c in 0..=grid.width() - kw {
                let mut m = 0;
                for i in 0..kh {
                    for j in 0..kw {
                        m += usize::from(grid.get(r + i, c + j) == t.get(i, j));
                    }
                }
                if first || m > best.matches {
                    best = WindowMatch {
                        matches: m,
                        position: (r, c),
                        flipped,
                    };
                    first = false;
                }
            }
        }
    }
    Ok(best)
}

/// Fraction of template cells matched at the best placement.
pub fn template_match(grid: &Grid, template: &Grid) -> Result<f64> {
    let m = best_window(grid, template)?;
    Ok(m.matches as f64 / template.codes().len() as f64)
}

/// Subject similarity of a generation to its reference set.
///
/// Averages the direct match against the subject's sprite with, per
/// reference, the match against the sprite-sized block that reference
/// actually shows. References that contain the sprite verbatim make both
/// terms equal.
pub fn subject_fidelity(gen: &Grid, refs: &[Grid], sprite: &Grid) -> Result<f64> {
    if refs.is_empty() {
        return Err(EvalError::Dimension("no reference grids".into()));
    }
    if let Some(r) = refs.iter().find(|r| r.dims() != gen.dims()) {
        return Err(EvalError::Dimension(format!(
            "reference {:?} vs generation {:?}",
            r.dims(),
            gen.dims()
        )));
    }
    let direct = template_match(gen, sprite)?;
    let (kh, kw) = sprite.dims();
    let mut total = 0.0;
    for r in refs {
        let loc = best_window(r, sprite)?;
        let mut shown = r.window(loc.position.0, loc.position.1, kh, kw);
        if loc.flipped {
            shown = shown.flipped();
        }
        total += 0.5 * (direct + template_match(gen, &shown)?);
    }
    Ok(total / refs.len() as f64)
}

/// Corner of the `k×k` block holding the most sprite-range codes.
pub fn sprite_region(gen: &Grid, cfg: &WorldConfig) -> Result<(usize, usize)> {
    let k = cfg.sprite_size;
    if k == 0 || k > gen.height() || k > gen.width() {
        return Err(EvalError::Dimension(format!("sprite size {k} vs grid {:?}", gen.dims())));
    }
    let mut best = ((0, 0), 0usize);
    for r in 0..=gen.height() - k {
        for c in 0..=gen.width() - k {
            let n = gen
                .window(r, c, k, k)
                .codes()
                .iter()
                .filter(|&&x| cfg.is_sprite_code(x))
                .count();
            if n > best.1 {
                best = ((r, c), n);
            }
        }
    }
    Ok(best.0)
}

/// How well a generation shows what its prompt asked for.
///
/// Re-contextualization scores the share of cells outside the sprite region
/// drawn from the requested background; property modification scores the
/// modifier code's share of the sprite region against its expected share,
/// capped at 1; reconstruction always scores 1.
pub fn prompt_following(gen: &Grid, expectation: &Expectation, cfg: &WorldConfig) -> Result<f64> {
    let k = cfg.sprite_size;
    let (r0, c0) = sprite_region(gen, cfg)?;
    let inside = |r: usize, c: usize| (r0..r0 + k).contains(&r) && (c0..c0 + k).contains(&c);
    match expectation {
        Expectation::Reconstruction => Ok(1.0),
        Expectation::Recontext { support, .. } => {
            let (mut hit, mut total) = (0usize, 0usize);
            for r in 0..gen.height() {
                for c in 0..gen.width() {
                    if !inside(r, c) {
                        total += 1;
                        hit += usize::from(support.contains(&gen.get(r, c)));
                    }
                }
            }
            Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
        }
        Expectation::PropertyMod {
            code, target_fraction, ..
        } => {
            let n = gen.window(r0, c0, k, k).codes().iter().filter(|&&x| x == *code).count();
            let share = n as f64 / (k * k) as f64;
            Ok(if *target_fraction <= 0.0 {
                1.0
            } else {
                (share / target_fraction).min(1.0)
            })
        }
    }
}

/// Mean pairwise Hamming distance, normalized by cell count.
pub fn diversity(grids: &[Grid]) -> Result<f64> {
    if grids.len() < 2 {
        return Err(EvalError::TooFewGrids(grids.len()));
    }
    let dims = grids[0].dims();
    if let Some(g) = grids.iter().find(|g| g.dims() != dims) {
        return Err(EvalError::Dimension(format!("{:?} vs {:?}", g.dims(), dims)));
    }
    // integer accumulation keeps the result independent of grid order
    let mut diff = 0u64;
    for i in 0..grids.len() {
        for j in i + 1..grids.len() {
            diff += grids[i]
                .codes()
                .iter()
                .zip(grids[j].codes())
                .filter(|(a, b)| a != b)
                .count() as u64;
        }
    }
    let pairs = (grids.len() * (grids.len() - 1) / 2) as u64;
    Ok(diff as f64 / (pairs * grids[0].codes().len() as u64) as f64)
}

/// Expected direct sprite match of a uniformly random grid, by Monte Carlo.
pub fn chance_level(cfg: &WorldConfig, sprite: &Grid, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let cells = cfg.grid_h * cfg.grid_w;
    let mut total = 0usize;
    for _ in 0..samples {
        let codes = (0..cells).map(|_| rng.random_range(0..cfg.image_codes as u16)).collect();
        let g = Grid::new(cfg.grid_h, cfg.grid_w, codes).expect("non-empty grid");
        total += best_window(&g, sprite)?.matches;
    }
    Ok(total as f64 / (samples * sprite.codes().len()) as f64)
}

/// Mean of `values` summed in sorted order, so any permutation of the input
/// gives the same bits.
pub fn ordered_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{SceneSpec, World};
    use proptest::prelude::*;

    fn world() -> World {
        World::generate(&WorldConfig::small(), 5).unwrap()
    }

    fn refs(w: &World, id: u32) -> Vec<Grid> {
        let s = w.subject(id).unwrap();
        w.sample_reference_set(s, 4, 3)
            .unwrap()
            .into_iter()
            .map(|e| e.image)
            .collect()
    }

    #[test]
    fn references_score_one_against_their_set() {
        let w = world();
        for s in w.held_out_subjects() {
            let r = refs(&w, s.subject_id);
            for g in &r {
                assert_eq!(subject_fidelity(g, &r, &s.sprite).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn one_corrupted_cell_costs_one_sixteenth() {
        let w = world();
        let s = w.held_out_subjects().next().unwrap();
        let scene = SceneSpec {
            background_id: 0,
            position: (4, 0),
            flip: false,
        };
        let mut g = w.render_scene(&s.sprite, &scene, 1).unwrap();
        // a background code cannot match any sprite cell
        g.set(5, 2, 0);
        assert_eq!(template_match(&g, &s.sprite).unwrap(), 15.0 / 16.0);
        let r = refs(&w, s.subject_id);
        assert_eq!(subject_fidelity(&g, &r, &s.sprite).unwrap(), 15.0 / 16.0);
    }

    #[test]
    fn sprite_free_grid_scores_below_chance() {
        let w = world();
        let s = w.held_out_subjects().next().unwrap();
        let chance = chance_level(&w.config, &s.sprite, 10_000, 9).unwrap();
        // uniform codes: a handful of the 16 cells line up at the best window
        assert!(chance > 0.0 && chance < 0.5, "{chance}");
        let scene = SceneSpec {
            background_id: 2,
            position: (0, 4),
            flip: false,
        };
        let mut g = w.render_scene(&s.sprite, &scene, 4).unwrap();
        let filler = w.backgrounds[2].codes[0];
        for r in 0..4 {
            for c in 4..8 {
                g.set(r, c, filler);
            }
        }
        let f = subject_fidelity(&g, &refs(&w, s.subject_id), &s.sprite).unwrap();
        assert!(f <= chance, "{f} > {chance}");
    }

    #[test]
    fn background_following() {
        let w = world();
        let s = w.held_out_subjects().next().unwrap();
        for b in 0..w.backgrounds.len() {
            let scene = SceneSpec {
                background_id: b,
                position: (4, 4),
                flip: false,
            };
            let g = w.render_scene(&s.sprite, &scene, b as u64).unwrap();
            let want = Expectation::Recontext {
                background_id: b,
                support: w.backgrounds[b].codes.clone(),
            };
            assert!(prompt_following(&g, &want, &w.config).unwrap() >= 0.95);
            let other = (b + 1) % w.backgrounds.len();
            let wrong = Expectation::Recontext {
                background_id: other,
                support: w.backgrounds[other].codes.clone(),
            };
            assert!(prompt_following(&g, &wrong, &w.config).unwrap() <= 0.05);
            assert_eq!(prompt_following(&g, &Expectation::Reconstruction, &w.config).unwrap(), 1.0);
        }
    }

    #[test]
    fn property_following() {
        let w = world();
        let s = w.held_out_subjects().next().unwrap();
        let prompts = w.sample_eval_prompts(s.class_id, 25);
        let modify = prompts
            .iter()
            .find(|p| matches!(p.expectation, Expectation::PropertyMod { .. }))
            .unwrap();
        let Expectation::PropertyMod { modifier_id, .. } = modify.expectation else {
            unreachable!()
        };
        let scene = SceneSpec {
            background_id: 1,
            position: (0, 0),
            flip: false,
        };
        let plain = w.render_scene(&s.sprite, &scene, 2).unwrap();
        let modded = w.render_scene(&w.modified_sprite(&s.sprite, modifier_id), &scene, 2).unwrap();
        assert_eq!(prompt_following(&plain, &modify.expectation, &w.config).unwrap(), 0.0);
        assert!(prompt_following(&modded, &modify.expectation, &w.config).unwrap() > 0.5);
    }

    #[test]
    fn diversity_examples() {
        let g = Grid::filled(8, 8, 3);
        assert_eq!(diversity(&[g.clone(), g.clone(), g.clone()]).unwrap(), 0.0);
        assert!(matches!(diversity(&[g]), Err(EvalError::TooFewGrids(1))));

        let mut rng = seeded(11);
        let random: Vec<Grid> = (0..40)
            .map(|_| Grid::new(8, 8, (0..64).map(|_| rng.random_range(0..64u16)).collect()).unwrap())
            .collect();
        let d = diversity(&random).unwrap();
        assert!((d - 63.0 / 64.0).abs() < 0.01, "{d}");

        let w = world();
        let s = w.held_out_subjects().next().unwrap();
        let render = |b: usize, seed: u64| {
            let scene = SceneSpec {
                background_id: b,
                position: (0, 0),
                flip: false,
            };
            w.render_scene(&s.sprite, &scene, seed).unwrap()
        };
        let within: Vec<Grid> = (0..6).map(|i| render(0, i)).collect();
        let across: Vec<Grid> = (0..6).map(|i| render(i as usize % 2, i)).collect();
        assert!(diversity(&across).unwrap() > diversity(&within).unwrap());
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let g = Grid::filled(8, 8, 40);
        let small = Grid::filled(4, 4, 40);
        assert!(subject_fidelity(&g, &[small.clone()], &small).is_err());
        assert!(subject_fidelity(&small, &[small.clone()], &Grid::filled(5, 5, 1)).is_err());
        assert!(diversity(&[g, small]).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = Grid> {
        prop::collection::vec(0u16..64, 64).prop_map(|c| Grid::new(8, 8, c).unwrap())
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_flip_symmetric(gen in arb_grid(), other in arb_grid(), idx in 0usize..64) {
            let w = world();
            let s = w.held_out_subjects().nth(idx % 8).unwrap();
            let refs = vec![other.clone(), gen.clone()];
            let f = subject_fidelity(&gen, &refs, &s.sprite).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let ff = subject_fidelity(&gen.flipped(), &refs, &s.sprite).unwrap();
            prop_assert_eq!(f, ff);
            for p in w.sample_eval_prompts(s.class_id, 25) {
                let pf = prompt_following(&gen, &p.expectation, &w.config).unwrap();
                prop_assert!((0.0..=1.0).contains(&pf));
            }
            let d = diversity(&[gen, other]).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
