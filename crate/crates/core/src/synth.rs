//! Synthetic worlds with a known label/object correlation and planted
//! memorization, used as ground truth for the tests.
//!
//! Each sample draws a class uniformly. Every object appears independently
//! with rate [`BACKGROUND_RATE`]; a class's own signature object (object
//! index = class index) is additionally emitted with probability `ρ`.
//! Embeddings are `[label one-hot, 0.5 · object indicators] + N(0, σ²)`,
//! row-normalized. Training samples carry the label block only when
//! memorized.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    save_annotations, save_embeddings, save_labels, AnnotationTable, EmbeddingMatrix, LabelTable,
    SampleId, ScoredObject,
};
use crate::error::{Error, Result};
use crate::knn;
use crate::report::Meta;

pub const BACKGROUND_RATE: f64 = 0.1;
pub const LABEL_WEIGHT: f32 = 1.0;
pub const OBJECT_WEIGHT: f32 = 0.5;

// independent ChaCha streams derived from the one seed
const STREAM_TRAIN: u64 = 0;
const STREAM_PUBLIC: u64 = 1;
const STREAM_MEMORIZE: u64 = 2;
const STREAM_HELD_OUT: u64 = 3;
const STREAM_NOISE_TARGET: u64 = 4;
const STREAM_NOISE_REF: u64 = 5;
const STREAM_NOISE_CAPTION: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_classes: usize,
    pub n_objects: usize,
    pub correlation_strength: f64,
    pub mem_rate: f64,
    pub n_train: usize,
    pub n_public: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_classes: 10,
            n_objects: 50,
            correlation_strength: 0.0,
            mem_rate: 0.2,
            n_train: 5000,
            n_public: 20000,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.n_classes == 0 || self.n_objects == 0 || self.n_train == 0 || self.n_public == 0 {
            return bad("all counts must be positive");
        }
        if self.n_objects < self.n_classes {
            return bad("need at least one signature object per class (n_objects >= n_classes)");
        }
        if !(0.0..=1.0).contains(&self.correlation_strength) {
            return bad("correlation_strength must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mem_rate) {
            return bad("mem_rate must be in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.n_classes + self.n_objects
    }

    pub fn n_memorized(&self) -> usize {
        (self.mem_rate * self.n_train as f64).round() as usize
    }

    /// Probability that a sample of class `t` shows object `t`.
    pub fn signature_rate(&self) -> f64 {
        BACKGROUND_RATE + (1.0 - BACKGROUND_RATE) * self.correlation_strength
    }

    pub fn class_names(&self) -> Vec<String> {
        names("c", self.n_classes)
    }

    pub fn object_names(&self) -> Vec<String> {
        names("o", self.n_objects)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Zero-padded names so lexicographic order equals index order.
fn names(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

fn sample_ids(prefix: &str, n: usize) -> Vec<SampleId> {
    names(prefix, n)
        .into_iter()
        .map(|s| SampleId::new(s).expect("generated ids are valid"))
        .collect()
}

/// One drawn sample: class and detected objects with scores in (0.3, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub class: usize,
    pub objects: Vec<ScoredObject>,
}

impl Draw {
    pub fn object_set(&self) -> BTreeSet<usize> {
        self.objects.iter().map(|&(o, _)| o).collect()
    }
}

fn draw(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Draw {
    let class = rng.random_range(0..spec.n_classes);
    let sig = spec.signature_rate();
    let mut objects = Vec::new();
    for o in 0..spec.n_objects {
        let p = if o == class { sig } else { BACKGROUND_RATE };
        if rng.random_bool(p) {
            objects.push((o, 1.0 - 0.7 * rng.random::<f64>()));
        }
    }
    Draw { class, objects }
}

fn draws(spec: &WorldSpec, n: usize, stream: u64) -> Vec<Draw> {
    let mut rng = spec.rng(stream);
    (0..n).map(|_| draw(spec, &mut rng)).collect()
}

/// Fresh samples from the same distribution, disjoint from train and public.
pub fn held_out(spec: &WorldSpec, n: usize) -> Result<Vec<Draw>> {
    spec.validate()?;
    Ok(draws(spec, n, STREAM_HELD_OUT))
}

/// Builds one embedding row; `label` adds the label block, `objects` the
/// object block.
fn embed_row(
    spec: &WorldSpec,
    d: &Draw,
    label: bool,
    objects: bool,
    noise: &mut ChaCha8Rng,
) -> Vec<f32> {
    let mut row = vec![0.0f32; spec.embed_dim()];
    if label {
        row[d.class] = LABEL_WEIGHT;
    }
    if objects {
        for &(o, _) in &d.objects {
            row[spec.n_classes + o] = OBJECT_WEIGHT;
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in row.iter_mut() {
            let z: f64 = noise.sample(StandardNormal);
            *v += (spec.noise_sigma * z) as f32;
        }
    }
    if row.iter().all(|&v| v == 0.0) {
        // no signal and no noise: fall back to the uniform direction
        row.fill(1.0);
    }
    row
}

fn matrix(ids: &[SampleId], rows: Vec<Vec<f32>>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_rows(ids.to_vec(), &rows)?.normalize_rows()
}

fn label_table(spec: &WorldSpec, ids: &[SampleId], draws: &[Draw]) -> Result<LabelTable> {
    let classes = spec.class_names();
    let pairs: Vec<(SampleId, String)> = ids
        .iter()
        .zip(draws)
        .map(|(id, d)| (id.clone(), classes[d.class].clone()))
        .collect();
    LabelTable::with_classes(classes, pairs)
}

fn annotation_table(spec: &WorldSpec, ids: &[SampleId], draws: &[Draw]) -> Result<AnnotationTable> {
    let vocab = spec.object_names();
    let samples: Vec<(SampleId, Vec<(String, f64)>)> = ids
        .iter()
        .zip(draws)
        .map(|(id, d)| {
            let objs = d.objects.iter().map(|&(o, s)| (vocab[o].clone(), s)).collect();
            (id.clone(), objs)
        })
        .collect();
    AnnotationTable::with_vocabulary(vocab, samples)
}

fn choose_memorized(spec: &WorldSpec) -> Vec<bool> {
    let mut order: Vec<usize> = (0..spec.n_train).collect();
    order.shuffle(&mut spec.rng(STREAM_MEMORIZE));
    let mut flags = vec![false; spec.n_train];
    for &i in &order[..spec.n_memorized()] {
        flags[i] = true;
    }
    flags
}

#[derive(Clone, Debug)]
pub struct Split {
    pub embeddings: EmbeddingMatrix,
    pub labels: LabelTable,
    pub annotations: AnnotationTable,
}

/// A generated image world. `train.embeddings` plays the target model's
/// background-crop embeddings.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub train: Split,
    pub public: Split,
    pub memorized_ids: BTreeSet<SampleId>,
}

pub fn generate(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let train_draws = draws(spec, spec.n_train, STREAM_TRAIN);
    let public_draws = draws(spec, spec.n_public, STREAM_PUBLIC);
    let train_ids = sample_ids("train", spec.n_train);
    let public_ids = sample_ids("public", spec.n_public);
    let memorized = choose_memorized(spec);

    let mut noise = spec.rng(STREAM_NOISE_TARGET);
    let train_rows = train_draws
        .iter()
        .zip(&memorized)
        .map(|(d, &m)| embed_row(spec, d, m, true, &mut noise))
        .collect();
    let public_rows = public_draws
        .iter()
        .map(|d| embed_row(spec, d, true, true, &mut noise))
        .collect();

    Ok(World {
        spec: spec.clone(),
        train: Split {
            embeddings: matrix(&train_ids, train_rows)?,
            labels: label_table(spec, &train_ids, &train_draws)?,
            annotations: annotation_table(spec, &train_ids, &train_draws)?,
        },
        public: Split {
            embeddings: matrix(&public_ids, public_rows)?,
            labels: label_table(spec, &public_ids, &public_draws)?,
            annotations: annotation_table(spec, &public_ids, &public_draws)?,
        },
        memorized_ids: memorized_set(&train_ids, &memorized),
    })
}

fn memorized_set(ids: &[SampleId], flags: &[bool]) -> BTreeSet<SampleId> {
    ids.iter()
        .zip(flags)
        .filter(|(_, &m)| m)
        .map(|(id, _)| id.clone())
        .collect()
}

/// A generated vision-language world. Captions of memorized training
/// samples carry their image's object block under the target model; all
/// other captions, and every caption under the reference model, carry the
/// label block only. Public images and captions carry both blocks.
#[derive(Clone, Debug)]
pub struct VlmWorld {
    pub spec: WorldSpec,
    pub target_train_captions: EmbeddingMatrix,
    pub target_public_images: EmbeddingMatrix,
    pub target_public_captions: EmbeddingMatrix,
    pub ref_train_captions: EmbeddingMatrix,
    pub ref_public_captions: EmbeddingMatrix,
    pub train_objects: AnnotationTable,
    pub public_objects: AnnotationTable,
    pub train_labels: LabelTable,
    pub public_labels: LabelTable,
    pub memorized_ids: BTreeSet<SampleId>,
}

pub fn generate_vlm(spec: &WorldSpec) -> Result<VlmWorld> {
    spec.validate()?;
    let train_draws = draws(spec, spec.n_train, STREAM_TRAIN);
    let public_draws = draws(spec, spec.n_public, STREAM_PUBLIC);
    let train_ids = sample_ids("train", spec.n_train);
    let public_ids = sample_ids("public", spec.n_public);
    let memorized = choose_memorized(spec);

    let mut target_noise = spec.rng(STREAM_NOISE_TARGET);
    let mut caption_noise = spec.rng(STREAM_NOISE_CAPTION);
    let mut ref_noise = spec.rng(STREAM_NOISE_REF);

    let rows = |draws: &[Draw], flags: &dyn Fn(usize) -> bool, noise: &mut ChaCha8Rng| {
        draws
            .iter()
            .enumerate()
            .map(|(i, d)| embed_row(spec, d, true, flags(i), noise))
            .collect::<Vec<_>>()
    };

    let target_train = rows(&train_draws, &|i| memorized[i], &mut target_noise);
    let target_images = rows(&public_draws, &|_| true, &mut target_noise);
    let target_captions = rows(&public_draws, &|_| true, &mut caption_noise);
    let ref_train = rows(&train_draws, &|_| false, &mut ref_noise);
    let ref_public = rows(&public_draws, &|_| true, &mut ref_noise);

    Ok(VlmWorld {
        spec: spec.clone(),
        target_train_captions: matrix(&train_ids, target_train)?,
        target_public_images: matrix(&public_ids, target_images)?,
        target_public_captions: matrix(&public_ids, target_captions)?,
        ref_train_captions: matrix(&train_ids, ref_train)?,
        ref_public_captions: matrix(&public_ids, ref_public)?,
        train_objects: annotation_table(spec, &train_ids, &train_draws)?,
        public_objects: annotation_table(spec, &public_ids, &public_draws)?,
        train_labels: label_table(spec, &train_ids, &train_draws)?,
        public_labels: label_table(spec, &public_ids, &public_draws)?,
        memorized_ids: memorized_set(&train_ids, &memorized),
    })
}

/// Exact class posterior given the full object set (present and absent
/// objects), with argmax ties broken by lowest class index.
pub fn bayes_optimal(spec: &WorldSpec, objects: &BTreeSet<usize>) -> (usize, Vec<f64>) {
    let q = spec.signature_rate();
    // likelihood ratio against the all-background hypothesis
    let present = q / BACKGROUND_RATE;
    let absent = (1.0 - q) / (1.0 - BACKGROUND_RATE);
    let factors: Vec<f64> = (0..spec.n_classes)
        .map(|c| if objects.contains(&c) { present } else { absent })
        .collect();
    let total: f64 = factors.iter().sum();
    let posterior = if total > 0.0 {
        factors.iter().map(|f| f / total).collect()
    } else {
        vec![1.0 / spec.n_classes as f64; spec.n_classes]
    };
    (knn::argmax(&posterior), posterior)
}

/// Expected accuracy of the Bayes-optimal predictor when exact ties are
/// broken uniformly at random.
pub fn correlation_accuracy(spec: &WorldSpec) -> f64 {
    let c = spec.n_classes;
    let q = spec.signature_rate();
    let b = BACKGROUND_RATE;
    // own signature present with j other signatures: a (j+1)-way tie
    let with_sig: f64 = (0..c).map(|j| binomial(c - 1, j, b) / (j + 1) as f64).sum();
    // own signature absent: correct only if no signature shows at all
    let without_sig = (1.0 - b).powi(c as i32 - 1) / c as f64;
    q * with_sig + (1.0 - q) * without_sig
}

/// Binomial pmf, evaluated in log space so large `n` stays finite.
fn binomial(n: usize, k: usize, p: f64) -> f64 {
    let ln_coef: f64 = (0..k).map(|i| ((n - i) as f64 / (i + 1) as f64).ln()).sum();
    (ln_coef + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

/// Expected déjà vu score of an attacker that is always right on memorized
/// samples and correlation-optimal otherwise, against a correlation-optimal
/// reference.
pub fn planted_dv_expectation(spec: &WorldSpec) -> f64 {
    spec.mem_rate * (1.0 - correlation_accuracy(spec))
}

#[derive(Serialize)]
struct Truth<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<&'a Meta>,
    memorized_ids: &'a BTreeSet<SampleId>,
    spec: &'a WorldSpec,
    expected_dv: f64,
}

fn write_truth(
    dir: &Path,
    spec: &WorldSpec,
    memorized: &BTreeSet<SampleId>,
    meta: Option<&Meta>,
) -> Result<()> {
    crate::report::write_json(
        &dir.join(TRUTH_FILE),
        &Truth {
            meta,
            memorized_ids: memorized,
            spec,
            expected_dv: planted_dv_expectation(spec),
        },
    )
}

pub const TRUTH_FILE: &str = "world_truth.json";

impl World {
    /// Writes the world as standard input files under `dir`, plus the
    /// ground-truth file.
    pub fn save(&self, dir: &Path, meta: Option<&Meta>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_embeddings(&dir.join("train_embeddings.dvem"), &self.train.embeddings)?;
        save_embeddings(&dir.join("public_embeddings.dvem"), &self.public.embeddings)?;
        save_labels(&dir.join("train_labels.csv"), &self.train.labels)?;
        save_labels(&dir.join("public_labels.csv"), &self.public.labels)?;
        save_annotations(&dir.join("train_annotations.jsonl"), &self.train.annotations)?;
        save_annotations(&dir.join("public_annotations.jsonl"), &self.public.annotations)?;
        write_truth(dir, &self.spec, &self.memorized_ids, meta)
    }
}

impl VlmWorld {
    pub fn save(&self, dir: &Path, meta: Option<&Meta>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_embeddings(&dir.join("target_train_captions.dvem"), &self.target_train_captions)?;
        save_embeddings(&dir.join("target_public_images.dvem"), &self.target_public_images)?;
        save_embeddings(&dir.join("target_public_captions.dvem"), &self.target_public_captions)?;
        save_embeddings(&dir.join("ref_train_captions.dvem"), &self.ref_train_captions)?;
        save_embeddings(&dir.join("ref_public_captions.dvem"), &self.ref_public_captions)?;
        save_annotations(&dir.join("train_objects.jsonl"), &self.train_objects)?;
        save_annotations(&dir.join("public_objects.jsonl"), &self.public_objects)?;
        save_labels(&dir.join("train_labels.csv"), &self.train_labels)?;
        save_labels(&dir.join("public_labels.csv"), &self.public_labels)?;
        write_truth(dir, &self.spec, &self.memorized_ids, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldSpec {
        WorldSpec {
            n_classes: 4,
            n_objects: 8,
            correlation_strength: 0.5,
            mem_rate: 0.25,
            n_train: 40,
            n_public: 60,
            noise_sigma: 0.05,
            seed,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(small(0).validate().is_ok());
        let bad = [
            WorldSpec { n_classes: 0, ..small(0) },
            WorldSpec { n_objects: 3, ..small(0) },
            WorldSpec { correlation_strength: 1.5, ..small(0) },
            WorldSpec { mem_rate: -0.1, ..small(0) },
            WorldSpec { noise_sigma: f64::NAN, ..small(0) },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))), "{s:?}");
        }
    }

    #[test]
    fn memorized_count_and_determinism() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        assert_eq!(a.memorized_ids.len(), 10);
        assert_eq!(a.memorized_ids, b.memorized_ids);
        assert_eq!(a.train.embeddings, b.train.embeddings);
        assert_eq!(a.public.annotations, b.public.annotations);
        let c = generate(&small(8)).unwrap();
        assert_ne!(a.train.embeddings, c.train.embeddings);
    }

    #[test]
    fn label_block_only_on_memorized_rows() {
        let spec = WorldSpec {
            noise_sigma: 0.0,
            ..small(3)
        };
        let w = generate(&spec).unwrap();
        for (i, id) in w.train.embeddings.ids().iter().enumerate() {
            let row = w.train.embeddings.row(i);
            let label_mass: f32 = row[..spec.n_classes].iter().map(|v| v.abs()).sum();
            let objs = w.train.annotations.get(id).unwrap();
            if w.memorized_ids.contains(id) {
                let t = w.train.labels.get(id).unwrap();
                assert!(row[t] > 0.0);
            } else if !objs.is_empty() {
                assert_eq!(label_mass, 0.0);
            }
        }
        for i in 0..w.public.embeddings.len() {
            let id = &w.public.embeddings.ids()[i];
            let t = w.public.labels.get(id).unwrap();
            assert!(w.public.embeddings.row(i)[t] > 0.0);
        }
    }

    #[test]
    fn bayes_cases() {
        let spec = WorldSpec {
            correlation_strength: 0.0,
            ..small(0)
        };
        let (arg, post) = bayes_optimal(&spec, &BTreeSet::from([1, 5]));
        assert_eq!(arg, 0);
        assert!(post.iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let spec = WorldSpec {
            correlation_strength: 0.9,
            ..small(0)
        };
        let (arg, post) = bayes_optimal(&spec, &BTreeSet::from([2]));
        assert_eq!(arg, 2);
        assert!(post[2] > 0.9);
        let (_, empty) = bayes_optimal(&spec, &BTreeSet::new());
        assert!(empty.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn expectation_closed_forms() {
        let s = WorldSpec {
            n_classes: 10,
            n_objects: 50,
            correlation_strength: 0.0,
            mem_rate: 0.2,
            ..WorldSpec::default()
        };
        assert!((correlation_accuracy(&s) - 0.1).abs() < 1e-12);
        assert!((planted_dv_expectation(&s) - 0.18).abs() < 1e-12);
        assert_eq!(planted_dv_expectation(&WorldSpec { mem_rate: 0.0, ..s.clone() }), 0.0);
        let big = WorldSpec {
            n_classes: 5000,
            n_objects: 5000,
            mem_rate: 1.0,
            ..s
        };
        assert!(planted_dv_expectation(&big) > 0.999);
    }

    #[test]
    fn correlation_accuracy_matches_simulation() {
        let spec = WorldSpec {
            correlation_strength: 0.6,
            ..small(11)
        };
        let samples = held_out(&spec, 40_000).unwrap();
        // random tie-breaking averaged exactly: credit 1/|ties| when the true class is tied
        let mut acc = 0.0;
        for d in &samples {
            let (_, post) = bayes_optimal(&spec, &d.object_set());
            let best = post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<usize> = (0..post.len()).filter(|&c| post[c] == best).collect();
            if ties.contains(&d.class) {
                acc += 1.0 / ties.len() as f64;
            }
        }
        acc /= samples.len() as f64;
        assert!((acc - correlation_accuracy(&spec)).abs() < 0.01, "{acc}");
    }

    #[test]
    fn vlm_world_shapes() {
        let w = generate_vlm(&small(5)).unwrap();
        assert_eq!(w.target_train_captions.len(), 40);
        assert_eq!(w.ref_public_captions.len(), 60);
        assert_eq!(w.memorized_ids.len(), 10);
        assert!(w.target_public_images.is_normalized());
        assert_ne!(w.target_public_images, w.target_public_captions);
    }
}
