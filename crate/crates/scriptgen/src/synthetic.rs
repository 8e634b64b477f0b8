//! Procedurally generated script corpora for experiments and tests.
//!
//! Tasks come from a small template grammar: each task instantiates a
//! (template, object, branch) combination. The branch is revealed only by
//! the caption of the second step, so the next step is a deterministic
//! function of the previous step plus its caption cue. Train/valid/test
//! splits use disjoint combinations but share all templates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Split, StepPair, Task};

/// The constant uninformative caption injected by `noise_caption`.
pub const NOISE_CAPTION: &str = "a blurry photo of a wooden table";

const OBJECTS: [&str; 24] = [
    "rose", "tulip", "fern", "cactus", "ivy", "basil", "maple", "orchid", "lily", "mint", "daisy",
    "moss", "bonsai", "clover", "sage", "thyme", "willow", "lotus", "bamboo", "peony", "aster",
    "nettle", "yarrow", "sorrel",
];

const TEMPLATE_COUNT: usize = 4;

struct StepSpec {
    step: String,
    caption: String,
}

fn template_steps(template: usize, obj: &str, branch: bool) -> (String, Option<String>, Vec<StepSpec>) {
    let s = |step: &str, caption: &str| StepSpec { step: step.to_string(), caption: caption.to_string() };
    match template {
        0 => (
            format!("grow a pot of {obj}"),
            Some("starting from seeds".to_string()),
            vec![
                s(&format!("gather the {obj} seeds"), &format!("a packet of {obj} seeds")),
                s(
                    &format!("plant the {obj} seeds in the pot"),
                    if branch { "bright sun over the garden" } else { "grey clouds over the garden" },
                ),
                s(
                    &if branch {
                        format!("move the {obj} pot into the shade")
                    } else {
                        format!("cover the {obj} pot with a clear sheet")
                    },
                    &format!("a young {obj} sprout in the pot"),
                ),
                s(&format!("water the {obj} sprout"), &format!("drops of water on the {obj} leaves")),
                s(&format!("trim the weak {obj} leaves"), "clean scissors beside the pot"),
            ],
        ),
        1 => (
            format!("repot an overgrown {obj}"),
            Some("repotting safely".to_string()),
            vec![
                s(&format!("lift the {obj} out of the old pot"), &format!("tangled {obj} roots in soil")),
                s(
                    &format!("check the {obj} roots"),
                    if branch { "white healthy roots" } else { "brown rotten roots" },
                ),
                s(
                    &if branch {
                        format!("set the {obj} in a bigger pot")
                    } else {
                        format!("cut away the rotten {obj} roots")
                    },
                    &format!("a trowel beside the {obj}"),
                ),
                s(&format!("press fresh soil around the {obj}"), "fresh dark soil in the pot"),
                s(&format!("water the {obj} well"), "a full watering can"),
            ],
        ),
        2 => (
            format!("grow a new {obj} from a cutting"),
            None,
            vec![
                s(&format!("cut a stem from the {obj}"), &format!("scissors above a {obj} stem")),
                s(
                    &format!("dip the {obj} stem in rooting powder"),
                    if branch { "a glass jar of water" } else { "a tray of moist sand" },
                ),
                s(
                    &if branch {
                        format!("stand the {obj} stem in the jar")
                    } else {
                        format!("push the {obj} stem into the sand")
                    },
                    &format!("a small {obj} cutting"),
                ),
                s(&format!("wait for the {obj} roots to grow"), "tiny white roots on the cutting"),
                s(&format!("plant the {obj} cutting outside"), "a garden bed with fresh holes"),
            ],
        ),
        _ => (
            format!("harvest the {obj} patch"),
            Some("gathering the harvest".to_string()),
            vec![
                s(&format!("inspect the {obj} patch"), &format!("rows of {obj} in the garden")),
                s(
                    &format!("pick the ripe {obj}"),
                    &if branch {
                        format!("a full basket of {obj}")
                    } else {
                        "a half empty basket".to_string()
                    },
                ),
                s(
                    &if branch {
                        format!("carry the {obj} basket inside")
                    } else {
                        format!("leave the rest of the {obj} for tomorrow")
                    },
                    &format!("a basket of {obj} on the kitchen table"),
                ),
                s(&format!("rinse the {obj} in cold water"), &format!("water running over the {obj}")),
                s(&format!("store the {obj} in the pantry"), "glass jars on a shelf"),
            ],
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub train_tasks: usize,
    pub valid_tasks: usize,
    pub test_tasks: usize,
    pub seed: u64,
    /// Replace the first caption of every task with [`NOISE_CAPTION`].
    pub noise_caption: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { train_tasks: 160, valid_tasks: 16, test_tasks: 16, seed: 7, noise_caption: false }
    }
}

pub struct SyntheticData {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

fn make_task(id: String, template: usize, obj: &str, branch: bool, noise: bool) -> Task {
    let (goal, subgoal, specs) = template_steps(template, obj, branch);
    let steps = specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| StepPair {
            index: i + 1,
            step_text: spec.step,
            caption_text: if noise && i == 0 { NOISE_CAPTION.to_string() } else { spec.caption },
        })
        .collect();
    Task { id, goal, subgoal, steps }
}

/// Generate the three splits. Combinations are shuffled by the seed and
/// dealt to test, valid, then train; when a split needs more tasks than
/// there are unused combinations, combinations repeat under fresh ids.
pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    let mut combos: Vec<(usize, usize, bool)> = Vec::new();
    for template in 0..TEMPLATE_COUNT {
        for obj in 0..OBJECTS.len() {
            for branch in [true, false] {
                combos.push((template, obj, branch));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    combos.shuffle(&mut rng);

    // deal each split its own combination range; a split needing more
    // tasks than it has combinations repeats within its own range, so
    // held-out content can never leak into train
    let n_test = spec.test_tasks.min(combos.len().saturating_sub(2));
    let n_valid = spec.valid_tasks.min(combos.len() - n_test - 1);
    let take = |allocation: &[(usize, usize, bool)], n: usize, split: Split| -> Corpus {
        let mut tasks = Vec::with_capacity(n);
        for i in 0..n {
            let (template, obj, branch) = allocation[i % allocation.len()];
            let id = format!(
                "syn-{split}-{i:03}-t{template}-{}-{}",
                OBJECTS[obj],
                if branch { "a" } else { "b" }
            );
            tasks.push(make_task(id, template, OBJECTS[obj], branch, spec.noise_caption));
        }
        Corpus { split, tasks }
    };

    let test = take(&combos[..n_test], spec.test_tasks, Split::Test);
    let valid = take(&combos[n_test..n_test + n_valid], spec.valid_tasks, Split::Valid);
    let train = take(&combos[n_test + n_valid..], spec.train_tasks, Split::Train);
    SyntheticData { train, valid, test }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.train.tasks, b.train.tasks);
        assert_eq!(a.valid.tasks, b.valid.tasks);
        assert_eq!(a.test.tasks, b.test.tasks);
    }

    #[test]
    fn next_step_is_a_function_of_prev_step_and_caption() {
        let data = generate(&SyntheticSpec::default());
        let mut transitions: HashMap<(String, String), String> = HashMap::new();
        for corpus in [&data.train, &data.valid, &data.test] {
            for task in &corpus.tasks {
                for w in task.steps.windows(2) {
                    let key = (w[0].step_text.clone(), w[0].caption_text.clone());
                    let next = w[1].step_text.clone();
                    if let Some(existing) = transitions.insert(key.clone(), next.clone()) {
                        assert_eq!(existing, next, "ambiguous transition for {key:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn splits_use_disjoint_combinations_when_possible() {
        let data = generate(&SyntheticSpec::default());
        let combo = |id: &str| -> String {
            // id suffix after the per-split counter identifies the combo
            id.splitn(4, '-').nth(3).unwrap().to_string()
        };
        let train: std::collections::HashSet<String> =
            data.train.tasks.iter().map(|t| combo(&t.id)).collect();
        for task in data.valid.tasks.iter().chain(&data.test.tasks) {
            assert!(!train.contains(&combo(&task.id)), "{} leaked into train", task.id);
        }
    }

    #[test]
    fn noise_flag_rewrites_first_captions_only() {
        let spec = SyntheticSpec { noise_caption: true, ..Default::default() };
        let data = generate(&spec);
        for task in &data.train.tasks {
            assert_eq!(task.steps[0].caption_text, NOISE_CAPTION);
            for step in &task.steps[1..] {
                assert_ne!(step.caption_text, NOISE_CAPTION);
            }
        }
        let clean = generate(&SyntheticSpec::default());
        assert!(clean.train.tasks.iter().all(|t| t.steps[0].caption_text != NOISE_CAPTION));
    }

    #[test]
    fn branch_cue_lives_in_second_caption() {
        // two tasks differing only in branch have identical first two steps
        let a = make_task("a".into(), 0, "rose", true, false);
        let b = make_task("b".into(), 0, "rose", false, false);
        assert_eq!(a.steps[0].step_text, b.steps[0].step_text);
        assert_eq!(a.steps[0].caption_text, b.steps[0].caption_text);
        assert_eq!(a.steps[1].step_text, b.steps[1].step_text);
        assert_ne!(a.steps[1].caption_text, b.steps[1].caption_text);
        assert_ne!(a.steps[2].step_text, b.steps[2].step_text);
    }
}
