//! Synthetic caption/feature corpora.
//!
//! Every image belongs to one cluster and takes one value in each of a few
//! attribute slots. Its feature vector is the cluster centroid plus one
//! vector per attribute value plus Gaussian noise; its captions name the
//! cluster (through one of several synonyms) and spell out the attributes,
//! wrapped in filler words. Matching a caption to its image therefore needs
//! both the cluster and the attributes, which keeps 1-of-6 ranking from
//! being decided by cluster identity alone.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{make_eval_pairs, write_eval_pairs, Label};
use crate::image::{save_features, FeatureSet, ImageFeature};
use crate::train::rng_from_seed;
use crate::vocab::{write_captions, Caption};

const NOUNS: [[&str; 2]; 8] = [
    ["dog", "puppy"],
    ["cat", "kitten"],
    ["car", "vehicle"],
    ["bird", "sparrow"],
    ["boat", "ship"],
    ["horse", "pony"],
    ["house", "cottage"],
    ["tree", "oak"],
];

const COLOURS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];

const SCENES: [&str; 6] = [
    "on the beach",
    "in the snow",
    "in a park",
    "near a river",
    "on a street",
    "in a field",
];

const OPENERS: [&str; 3] = ["a", "the", "one"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub clusters: usize,
    pub dim: usize,
    /// Number of attribute slots (0, 1 or 2 use the built-in word lists).
    pub slots: usize,
    pub values_per_slot: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub captions_per_image: usize,
    pub cluster_scale: f64,
    pub attribute_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            dim: 64,
            slots: 2,
            values_per_slot: 6,
            train_pairs: 500,
            dev_pairs: 150,
            test_pairs: 150,
            captions_per_image: 1,
            cluster_scale: 1.0,
            attribute_scale: 1.0,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.dim == 0 || self.captions_per_image == 0 {
            return Err(Error::Usage("clusters, dim and captions per image must be positive".into()));
        }
        if self.slots > 0 && self.values_per_slot == 0 {
            return Err(Error::Usage("attribute slots need at least one value".into()));
        }
        if self.train_pairs == 0 || self.dev_pairs == 0 {
            return Err(Error::Usage("train and dev splits must be non-empty".into()));
        }
        if !(self.noise >= 0.0) || !(self.cluster_scale >= 0.0) || !(self.attribute_scale >= 0.0) {
            return Err(Error::Usage("scales and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Hidden generative factors of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFactors {
    pub image_id: String,
    pub cluster: usize,
    pub attributes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Vec<Caption>,
    pub dev: Vec<Caption>,
    pub test: Vec<Caption>,
    pub features: FeatureSet,
    pub factors: Vec<ImageFactors>,
    /// One single-sentence answer per test caption: `(answer_id, text)`.
    pub answers: Vec<(String, String)>,
    /// Each answer with its own image (relevant) and a random other test
    /// image (irrelevant).
    pub eval_pairs: Vec<(String, String, Label)>,
}

fn noun(cluster: usize, synonym: usize) -> String {
    match NOUNS.get(cluster) {
        Some(words) => words[synonym % 2].to_string(),
        None => format!("{}{cluster}", ["thing", "object"][synonym % 2]),
    }
}

fn attribute_words(slot: usize, value: usize) -> String {
    match slot {
        0 if value < COLOURS.len() => COLOURS[value].to_string(),
        1 if value < SCENES.len() => SCENES[value].to_string(),
        _ => format!("with trait{slot}x{value}"),
    }
}

fn caption<R: Rng + ?Sized>(f: &ImageFactors, rng: &mut R) -> String {
    let opener = OPENERS.choose(rng).expect("non-empty");
    let mut words = vec![opener.to_string()];
    if let Some(&colour) = f.attributes.first() {
        words.push(attribute_words(0, colour));
    }
    words.push(noun(f.cluster, rng.random_range(0..2)));
    for (slot, &value) in f.attributes.iter().enumerate().skip(1) {
        words.push(attribute_words(slot, value));
    }
    words.join(" ")
}

fn gaussian_vectors<R: Rng + ?Sized>(n: usize, dim: usize, scale: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| (0..dim).map(|_| scale * normal.sample(rng)).collect())
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng: ChaCha8Rng = rng_from_seed(cfg.seed);
    let centroids = gaussian_vectors(cfg.clusters, cfg.dim, cfg.cluster_scale, &mut rng);
    let attribute_vectors: Vec<Vec<Vec<f64>>> = (0..cfg.slots)
        .map(|_| gaussian_vectors(cfg.values_per_slot, cfg.dim, cfg.attribute_scale, &mut rng))
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut features = FeatureSet::new();
    let mut factors = Vec::new();
    let mut splits: [Vec<Caption>; 3] = Default::default();
    let mut next_image = 0usize;
    for (split, pairs) in [cfg.train_pairs, cfg.dev_pairs, cfg.test_pairs].into_iter().enumerate() {
        let mut made = 0;
        while made < pairs {
            let f = ImageFactors {
                image_id: format!("img{next_image:05}"),
                cluster: rng.random_range(0..cfg.clusters),
                attributes: (0..cfg.slots).map(|_| rng.random_range(0..cfg.values_per_slot)).collect(),
            };
            next_image += 1;
            let mut values = centroids[f.cluster].clone();
            for (slot, &v) in f.attributes.iter().enumerate() {
                for (x, a) in values.iter_mut().zip(&attribute_vectors[slot][v]) {
                    *x += a;
                }
            }
            for x in values.iter_mut() {
                *x += cfg.noise * normal.sample(&mut rng);
            }
            features.insert(ImageFeature {
                image_id: f.image_id.clone(),
                values,
            })?;
            for _ in 0..cfg.captions_per_image.min(pairs - made) {
                splits[split].push(Caption {
                    image_id: f.image_id.clone(),
                    text: caption(&f, &mut rng),
                });
                made += 1;
            }
            factors.push(f);
        }
    }
    let [train, dev, test] = splits;

    let answers: Vec<(String, String)> = test
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("ans{i:05}"), c.text.clone()))
        .collect();
    let eval_pairs = if test.is_empty() {
        Vec::new()
    } else {
        let mut pool: Vec<String> = test.iter().map(|c| c.image_id.clone()).collect();
        pool.dedup();
        let owners: Vec<(String, String)> = answers
            .iter()
            .zip(&test)
            .map(|((a, _), c)| (a.clone(), c.image_id.clone()))
            .collect();
        make_eval_pairs(&owners, &pool, &mut rng)?
    };

    Ok(SynthData {
        train,
        dev,
        test,
        features,
        factors,
        answers,
        eval_pairs,
    })
}

/// Writes `train.tsv`, `dev.tsv`, `test.tsv`, `features.tsv`,
/// `answers.tsv` and `eval_pairs.tsv` into `dir`.
pub fn write_dataset(data: &SynthData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_captions(&dir.join("train.tsv"), &data.train)?;
    write_captions(&dir.join("dev.tsv"), &data.dev)?;
    write_captions(&dir.join("test.tsv"), &data.test)?;
    save_features(&dir.join("features.tsv"), &data.features)?;
    let answers: String = data.answers.iter().map(|(a, t)| format!("{a}\t{t}\n")).collect();
    let path = dir.join("answers.tsv");
    fs::write(&path, answers).map_err(|e| Error::io(&path, e))?;
    write_eval_pairs(&dir.join("eval_pairs.tsv"), &data.eval_pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn sizes_and_disjoint_splits() {
        let cfg = SynthConfig {
            train_pairs: 51,
            dev_pairs: 10,
            test_pairs: 7,
            captions_per_image: 2,
            ..SynthConfig::default()
        };
        let d = generate(&cfg).unwrap();
        assert_eq!((d.train.len(), d.dev.len(), d.test.len()), (51, 10, 7));
        assert_eq!(d.features.dim(), Some(64));
        assert_eq!(d.features.len(), 26 + 5 + 4);
        let ids = |s: &[Caption]| s.iter().map(|c| c.image_id.clone()).collect::<HashSet<_>>();
        assert!(ids(&d.train).is_disjoint(&ids(&d.dev)));
        assert!(ids(&d.dev).is_disjoint(&ids(&d.test)));
        assert_eq!(d.eval_pairs.len(), 14);
        for (a, img, label) in &d.eval_pairs {
            let idx: usize = a[3..].parse().unwrap();
            assert_eq!(*label == Label::Relevant, *img == d.test[idx].image_id);
        }
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig {
            train_pairs: 20,
            dev_pairs: 5,
            test_pairs: 5,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().features, generate(&other).unwrap().features);
    }

    #[test]
    fn captions_name_the_cluster_and_attributes() {
        let d = generate(&SynthConfig {
            train_pairs: 40,
            dev_pairs: 2,
            test_pairs: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        for c in &d.train {
            let f = d.factors.iter().find(|f| f.image_id == c.image_id).unwrap();
            assert!(NOUNS[f.cluster].iter().any(|n| c.text.split(' ').any(|w| w == *n)), "{}", c.text);
            assert!(c.text.contains(COLOURS[f.attributes[0]]));
            assert!(c.text.ends_with(SCENES[f.attributes[1]]));
        }
    }

    #[test]
    fn features_sit_near_their_factors() {
        // Images sharing every factor are much closer than images sharing none.
        let d = generate(&SynthConfig {
            train_pairs: 400,
            dev_pairs: 2,
            test_pairs: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        let dist = |a: &ImageFactors, b: &ImageFactors| {
            let x = &d.features.get(&a.image_id).unwrap().values;
            let y = &d.features.get(&b.image_id).unwrap().values;
            x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
        };
        let (mut same, mut diff) = (vec![], vec![]);
        for (i, a) in d.factors.iter().enumerate() {
            for b in &d.factors[i + 1..] {
                if a.cluster == b.cluster && a.attributes == b.attributes {
                    same.push(dist(a, b));
                } else if a.cluster != b.cluster && a.attributes.iter().zip(&b.attributes).all(|(p, q)| p != q) {
                    diff.push(dist(a, b));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // 2·K·noise² vs 2·K·(noise² + cluster² + 2·attribute²)
        assert!((mean(&same) - 2.0 * 64.0 * 0.09).abs() < 3.0, "{}", mean(&same));
        assert!(mean(&diff) > 10.0 * mean(&same));
    }

    #[test]
    fn extra_clusters_and_slots_get_generated_words() {
        let d = generate(&SynthConfig {
            clusters: 12,
            slots: 3,
            values_per_slot: 9,
            train_pairs: 60,
            dev_pairs: 2,
            test_pairs: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(d.train.iter().any(|c| c.text.contains("trait2x")));
    }

    #[test]
    fn write_dataset_produces_readable_files() {
        let d = generate(&SynthConfig {
            train_pairs: 10,
            dev_pairs: 4,
            test_pairs: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        assert_eq!(crate::vocab::read_captions(&dir.path().join("train.tsv")).unwrap(), d.train);
        assert_eq!(crate::image::load_features(&dir.path().join("features.tsv")).unwrap(), d.features);
        let pairs = crate::eval::read_eval_pairs(&dir.path().join("eval_pairs.tsv")).unwrap();
        assert_eq!(pairs, d.eval_pairs);
    }
}
