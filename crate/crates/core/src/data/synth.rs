//! Synthetic desk-scale corpus.
//!
//! Each example draws a latent scene (actor, action, object, room, sound).
//! The start and end frames encode only {actor, room}; the two middle frames
//! encode {action, object}; the audio vector encodes {sound}. Captions and
//! summaries mention all five attributes, and the ten templated QA pairs
//! reveal {action, object, sound} — so for an agent that only sees the two
//! outer frames, the dialog is the only path to those three attributes.

use super::features::{FeatureSet, AUDIO_DIM, FRAMES, REGIONS, VISUAL_DIM};
use super::manifest::{DialogueRecord, Split, ROUNDS};
use super::FeatureStore;
use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const ATTR_ACTORS: [&str; 4] = ["man", "woman", "boy", "girl"];
pub const ATTR_ACTIONS: [&str; 4] = ["jumps", "waves", "claps", "spins"];
pub const ATTR_OBJECTS: [&str; 4] = ["ball", "book", "cup", "hat"];
pub const ATTR_ROOMS: [&str; 3] = ["kitchen", "garage", "office"];
pub const ATTR_SOUNDS: [&str; 3] = ["music", "barking", "thunder"];

// Features are pure attribute bases with no per-video noise: videos sharing
// an attribute are indistinguishable through that channel, so a model cannot
// memorize summaries from a video's feature signature — fitting the training
// descriptions forces it to read the dialog history.
// bases are fixed across datasets so probes trained on one corpus transfer
const BASIS_SEED: u64 = 0xBA5E;

/// The latent scene behind one synthetic example.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub actor: usize,
    pub action: usize,
    pub object: usize,
    pub room: usize,
    pub sound: usize,
}

impl Scene {
    pub fn actor_token(&self) -> &'static str {
        ATTR_ACTORS[self.actor]
    }
    pub fn action_token(&self) -> &'static str {
        ATTR_ACTIONS[self.action]
    }
    pub fn object_token(&self) -> &'static str {
        ATTR_OBJECTS[self.object]
    }
    pub fn room_token(&self) -> &'static str {
        ATTR_ROOMS[self.room]
    }
    pub fn sound_token(&self) -> &'static str {
        ATTR_SOUNDS[self.sound]
    }
}

/// Generated records, features and the latent scenes behind them.
pub struct SynthCorpus {
    pub records: Vec<DialogueRecord>,
    pub features: FeatureStore,
    pub scenes: Vec<Scene>,
}

struct Bases {
    actor: Vec<Array1<f32>>,
    action: Vec<Array1<f32>>,
    object: Vec<Array1<f32>>,
    room: Vec<Array1<f32>>,
    sound: Vec<Array1<f32>>,
}

fn basis_vec(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f32> {
    Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0f32..1.0))
}

fn bases() -> Bases {
    let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED);
    let mut mk = |n: usize, dim: usize| (0..n).map(|_| basis_vec(&mut rng, dim)).collect::<Vec<_>>();
    Bases {
        actor: mk(ATTR_ACTORS.len(), VISUAL_DIM),
        action: mk(ATTR_ACTIONS.len(), VISUAL_DIM),
        object: mk(ATTR_OBJECTS.len(), VISUAL_DIM),
        room: mk(ATTR_ROOMS.len(), VISUAL_DIM),
        sound: mk(ATTR_SOUNDS.len(), AUDIO_DIM),
    }
}

fn caption_text(s: &Scene) -> String {
    format!(
        "the {} {} with a {} in the {} as {} plays",
        s.actor_token(),
        s.action_token(),
        s.object_token(),
        s.room_token(),
        s.sound_token()
    )
}

fn summary_text(s: &Scene) -> String {
    format!(
        "a {} {} with a {} in the {} while {} plays",
        s.actor_token(),
        s.action_token(),
        s.object_token(),
        s.room_token(),
        s.sound_token()
    )
}

fn qa_pairs(s: &Scene) -> Vec<(String, String)> {
    // deterministic distractors: the next entry in each attribute table
    let object2 = ATTR_OBJECTS[(s.object + 1) % ATTR_OBJECTS.len()];
    let room2 = ATTR_ROOMS[(s.room + 1) % ATTR_ROOMS.len()];
    let sound2 = ATTR_SOUNDS[(s.sound + 1) % ATTR_SOUNDS.len()];
    vec![
        ("who is it".into(), format!("a {}", s.actor_token())),
        ("what happens".into(), format!("they {}", s.action_token())),
        ("what object".into(), format!("a {}", s.object_token())),
        ("which room".into(), format!("the {}", s.room_token())),
        ("what sound".into(), format!("{} plays", s.sound_token())),
        ("any more detail".into(), format!("they {} again", s.action_token())),
        (format!("is it a {object2}"), format!("no a {}", s.object_token())),
        (format!("is it a {room2}"), format!("no the {}", s.room_token())),
        (format!("do you hear {sound2}"), format!("no {}", s.sound_token())),
        (
            "summary please".into(),
            format!(
                "{} {} {} {} {}",
                s.actor_token(),
                s.action_token(),
                s.object_token(),
                s.room_token(),
                s.sound_token()
            ),
        ),
    ]
}

fn features_for(s: &Scene, bases: &Bases) -> FeatureSet {
    let mut visual = Array3::<f32>::zeros((FRAMES, REGIONS, VISUAL_DIM));
    for frame in 0..FRAMES {
        let outer = frame == 0 || frame == FRAMES - 1;
        for region in 0..REGIONS {
            let base = if outer {
                if region % 2 == 0 { &bases.actor[s.actor] } else { &bases.room[s.room] }
            } else if region % 2 == 0 {
                &bases.action[s.action]
            } else {
                &bases.object[s.object]
            };
            for d in 0..VISUAL_DIM {
                visual[[frame, region, d]] = base[d];
            }
        }
    }
    let audio = bases.sound[s.sound].clone();
    FeatureSet::new(visual, audio).expect("synthetic shapes are exact")
}

/// Generate a deterministic synthetic corpus of `n` examples. All records
/// come out with `Split::Train`; use [`assign_splits`] to carve out val/test.
pub fn synth_dataset(n: usize, seed: u64) -> SynthCorpus {
    assert!(n >= 1, "n must be >= 1");
    let bases = bases();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut features = FeatureStore::new();
    let mut scenes = Vec::with_capacity(n);
    for idx in 0..n {
        let scene = Scene {
            actor: rng.gen_range(0..ATTR_ACTORS.len()),
            action: rng.gen_range(0..ATTR_ACTIONS.len()),
            object: rng.gen_range(0..ATTR_OBJECTS.len()),
            room: rng.gen_range(0..ATTR_ROOMS.len()),
            sound: rng.gen_range(0..ATTR_SOUNDS.len()),
        };
        let video_id = format!("synth-{seed}-{idx:04}");
        let pairs = qa_pairs(&scene);
        debug_assert_eq!(pairs.len(), ROUNDS);
        records.push(DialogueRecord {
            video_id: video_id.clone(),
            caption: caption_text(&scene),
            qa_pairs: pairs,
            summary: summary_text(&scene),
            split: Split::Train,
        });
        features.insert(&video_id, features_for(&scene, &bases));
        scenes.push(scene);
    }
    SynthCorpus { records, features, scenes }
}

/// Reassign splits in place: first `n_train` records stay train, the next
/// `n_val` become val, the rest test.
pub fn assign_splits(records: &mut [DialogueRecord], n_train: usize, n_val: usize) {
    for (i, rec) in records.iter_mut().enumerate() {
        rec.split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
}

/// Every distinct terminal the template grammar can emit.
pub fn grammar_terminals() -> std::collections::BTreeSet<String> {
    let mut set = std::collections::BTreeSet::new();
    for actor in 0..ATTR_ACTORS.len() {
        for action in 0..ATTR_ACTIONS.len() {
            for object in 0..ATTR_OBJECTS.len() {
                for room in 0..ATTR_ROOMS.len() {
                    for sound in 0..ATTR_SOUNDS.len() {
                        let s = Scene { actor, action, object, room, sound };
                        for text in [caption_text(&s), summary_text(&s)] {
                            set.extend(super::vocab::tokenize_text(&text));
                        }
                        for (q, a) in qa_pairs(&s) {
                            set.extend(super::vocab::tokenize_text(&q));
                            set.extend(super::vocab::tokenize_text(&a));
                        }
                    }
                }
            }
        }
    }
    set
}
