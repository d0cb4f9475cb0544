//! Batch assembly, parameter initialization, ADAM, and the epoch loop with
//! dev-set model selection.

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_rank, make_rank_trials, RankTrial};
use crate::image::FeatureSet;
use crate::loss::{cross_entropy_loss, hinge_loss, LossKind, TrainingBatch};
use crate::model::{batch_scores, ForwardConfig, Model, ModelDims, ModelParams};
use crate::tensor::{Mode, Tape, Tensor};
use crate::vocab::{Caption, Sentence, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub margin: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub gating: bool,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            batch_size: 32,
            dropout: 0.5,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            margin: 0.2,
            epochs: 300,
            seed: 0,
            loss: LossKind::CrossEntropy,
            gating: true,
            embed_dim: 300,
            hidden: 300,
        }
    }
}

impl Hyperparams {
    /// Defaults sized for a laptop: 30 epochs, 32-dimensional text space.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            embed_dim: 32,
            hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Usage(format!(
                "batch size must be at least 2 so every positive has negatives, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Usage(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Usage("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Usage("ADAM betas must be in [0, 1)".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Usage(format!("margin must be positive, got {}", self.margin)));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Usage("embedding and hidden sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            gating: self.gating,
            score: self.loss.score_kind(),
            dropout: self.dropout,
        }
    }

    pub fn dims(&self, vocab_size: usize, feature_dim: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            feature_dim,
        }
    }
}

/// Aligned sentences and the ids of their images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDataset {
    pub sentences: Vec<Sentence>,
    pub image_ids: Vec<String>,
}

impl PairDataset {
    pub fn from_captions(captions: &[Caption], vocab: &Vocabulary) -> Result<Self> {
        let mut out = Self::default();
        for c in captions {
            out.sentences.push(vocab.encode(&c.text)?);
            out.image_ids.push(c.image_id.clone());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn distinct_images(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.image_ids
            .iter()
            .filter(|id| seen.insert(id.as_str()))
            .cloned()
            .collect()
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fresh parameters from a generator seeded with `seed`.
pub fn init_params(dims: ModelDims, seed: u64) -> ModelParams {
    ModelParams::random(dims, &mut rng_from_seed(seed))
}

/// Shuffles the dataset and cuts it into batches whose image ids are
/// pairwise distinct. A pair whose image is already in the batch being
/// filled waits for the next one. The final batch may be smaller than `size`
/// and is dropped if it holds fewer than two pairs.
pub fn epoch_batches<R: Rng + ?Sized>(data: &PairDataset, size: usize, rng: &mut R) -> Result<Vec<TrainingBatch>> {
    if size < 2 {
        return Err(Error::Usage("batch size must be at least 2".into()));
    }
    let distinct = data.distinct_images().len();
    if distinct < size {
        return Err(Error::Data(format!(
            "batch size {size} needs at least {size} distinct images, dataset has {distinct}"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut items = Vec::with_capacity(size);
        let mut seen = HashSet::new();
        let mut deferred = Vec::new();
        while items.len() < size {
            let Some(i) = queue.pop_front() else { break };
            if seen.insert(data.image_ids[i].as_str()) {
                items.push(i);
            } else {
                deferred.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            queue.push_front(i);
        }
        if items.len() < 2 {
            break;
        }
        let ids = items.iter().map(|&i| data.image_ids[i].clone()).collect();
        batches.push(TrainingBatch::new(items, ids)?);
    }
    Ok(batches)
}

/// One batch of `size` pairs with distinct images.
pub fn build_batch<R: Rng + ?Sized>(data: &PairDataset, size: usize, rng: &mut R) -> Result<TrainingBatch> {
    epoch_batches(data, size, rng)?
        .into_iter()
        .next()
        .filter(|b| b.len() == size)
        .ok_or_else(|| Error::Data(format!("could not assemble a batch of {size}")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&Hyperparams> for AdamConfig {
    fn from(hp: &Hyperparams) -> Self {
        Self {
            learning_rate: hp.learning_rate,
            beta1: hp.beta1,
            beta2: hp.beta2,
            epsilon: hp.epsilon,
        }
    }
}

/// First and second moment estimates, one pair per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::new(params.groups().iter().map(|(_, t)| t.shape()))
    }
}

/// One bias-corrected ADAM update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut [(&str, &mut Tensor)], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Contract("parameter, gradient and state counts differ".into()));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in parameter group {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - cfg.beta1.powi(t);
    let correct2 = 1.0 - cfg.beta2.powi(t);
    for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / correct1;
            let v_hat = v[i] / correct2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Loss of one batch on a fresh tape, with gradients per parameter group.
pub fn batch_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &PairDataset,
    features: &FeatureSet,
    batch: &TrainingBatch,
    hp: &Hyperparams,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.track(&mut tape);
    let sentences: Vec<&Sentence> = batch.items.iter().map(|&i| &data.sentences[i]).collect();
    let images = batch
        .image_ids
        .iter()
        .map(|id| features.require(id).map(|f| f.values.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let cfg = hp.forward_config();
    let scores = batch_scores(&mut tape, &vars, &sentences, &images, &cfg, mode, rng)?;
    let negatives = batch.negative_mask();
    let loss = match hp.loss {
        LossKind::Hinge => hinge_loss(&mut tape, scores, &negatives, hp.margin)?,
        LossKind::CrossEntropy => cross_entropy_loss(&mut tape, scores, &negatives)?,
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    let per_group = vars
        .vars()
        .iter()
        .zip(params.groups())
        .map(|(&v, (_, t))| grads.wrt(v, t.shape()))
        .collect();
    Ok((value, per_group))
}

/// One ADAM step on one batch; returns the batch loss.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ModelParams,
    state: &mut AdamState,
    data: &PairDataset,
    features: &FeatureSet,
    batch: &TrainingBatch,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    let (loss, mut grads) = batch_loss(params, data, features, batch, hp, Mode::Train, rng)?;
    if !params.embeddings.trainable {
        grads[0] = Tensor::zeros(params.embeddings.weights.shape());
    }
    let mut groups = params.groups_mut();
    adam_step(&mut groups, &grads, state, &AdamConfig::from(hp))?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_metric: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.epoch, self.loss, self.dev_metric)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best: ModelParams,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_dev_metric: Option<f64>,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// `epoch<TAB>loss<TAB>dev_metric`, one line per epoch.
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| r.to_line() + "\n").collect()
    }
}

/// Dev-set 1-of-6 ranking accuracy (percent) of `params`.
pub fn dev_metric(params: &ModelParams, hp: &Hyperparams, dev: &PairDataset, features: &FeatureSet, trials: &[RankTrial]) -> Result<f64> {
    let model = Model::new(params.clone(), hp.forward_config());
    Ok(evaluate_rank(&model, &dev.sentences, features, trials)?.accuracy())
}

/// Initializes from `hp.seed` and trains; see [`train_from`].
pub fn train(vocab_size: usize, train: &PairDataset, dev: &PairDataset, features: &FeatureSet, hp: &Hyperparams) -> Result<TrainOutcome> {
    let feature_dim = features
        .dim()
        .ok_or_else(|| Error::Data("no image features".into()))?;
    let mut rng = rng_from_seed(hp.seed);
    let params = ModelParams::random(hp.dims(vocab_size, feature_dim), &mut rng);
    train_from(params, train, dev, features, hp, &mut rng)
}

/// Runs `hp.epochs` passes over `train`, scoring the dev set after each and
/// keeping the parameters with the highest dev metric (earliest on ties).
pub fn train_from(
    init: ModelParams,
    train: &PairDataset,
    dev: &PairDataset,
    features: &FeatureSet,
    hp: &Hyperparams,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("training and dev sets must be non-empty".into()));
    }
    if features.dim() != Some(init.gate.feature_dim()) {
        return Err(Error::Data(format!(
            "feature width {:?} does not match model feature width {}",
            features.dim(),
            init.gate.feature_dim()
        )));
    }
    let dev_pool = dev.distinct_images();
    let trials = make_rank_trials(&dev.image_ids, &dev_pool, None, rng)?;

    let mut params = init;
    let mut state = AdamState::for_params(&params);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_metric: Option<f64> = None;
    let mut log = Vec::with_capacity(hp.epochs);

    for epoch in 1..=hp.epochs {
        let batches = epoch_batches(train, hp.batch_size, rng)?;
        let mut total = 0.0;
        for batch in &batches {
            total += train_step(&mut params, &mut state, train, features, batch, hp, rng)?;
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        let loss = total / batches.len().max(1) as f64;
        let metric = dev_metric(&params, hp, dev, features, &trials)?;
        log::info!("epoch {epoch}: loss {loss:.6} dev {metric:.2}");
        log.push(EpochRecord {
            epoch,
            loss,
            dev_metric: metric,
        });
        if best_metric.is_none_or(|b| metric > b) {
            best_metric = Some(metric);
            best_epoch = epoch;
            best = params.clone();
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dev_metric: best_metric,
        log,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub per_seed: Vec<(u64, f64)>,
}

impl SeedSummary {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().map(|s| s.1).sum::<f64>() / self.per_seed.len() as f64
    }
}

/// Trains once per seed and reports each run's best dev metric.
pub fn run_seeds(
    vocab_size: usize,
    train_set: &PairDataset,
    dev: &PairDataset,
    features: &FeatureSet,
    hp: &Hyperparams,
    seeds: &[u64],
) -> Result<SeedSummary> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let hp = Hyperparams { seed, ..hp.clone() };
        let out = train(vocab_size, train_set, dev, features, &hp)?;
        per_seed.push((seed, out.best_dev_metric.unwrap_or(f64::NAN)));
    }
    Ok(SeedSummary { per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize, images: usize) -> PairDataset {
        PairDataset {
            sentences: (0..n)
                .map(|i| Sentence {
                    tokens: vec![],
                    ids: vec![1, 3 + i % 4, 2],
                })
                .collect(),
            image_ids: (0..n).map(|i| format!("img{}", i % images)).collect(),
        }
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let hp = Hyperparams {
            batch_size: 1,
            ..Hyperparams::default()
        };
        assert!(matches!(hp.validate(), Err(Error::Usage(_))));
        let hp = Hyperparams {
            dropout: 1.0,
            ..Hyperparams::default()
        };
        assert!(hp.validate().is_err());
    }

    #[test]
    fn hyperparams_reject_unknown_keys() {
        assert!(serde_json::from_str::<Hyperparams>(r#"{"batch_size": 8}"#).is_ok());
        assert!(serde_json::from_str::<Hyperparams>(r#"{"batchsize": 8}"#).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let dims = ModelDims {
            vocab_size: 10,
            embed_dim: 4,
            hidden: 3,
            feature_dim: 5,
        };
        assert_eq!(init_params(dims, 7), init_params(dims, 7));
        assert_ne!(init_params(dims, 7), init_params(dims, 8));
    }

    #[test]
    fn init_distribution() {
        let dims = ModelDims {
            vocab_size: 1000,
            embed_dim: 100,
            hidden: 1,
            feature_dim: 1,
        };
        let p = init_params(dims, 3);
        let x = p.embeddings.weights.data();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        assert!(mean.abs() < 3.0 * 0.1 / n.sqrt(), "{mean}");
        // SE of a normal sample std is σ/√(2(n−1)).
        assert!((sd - 0.1).abs() < 3.0 * 0.1 / (2.0 * (n - 1.0)).sqrt(), "{sd}");
    }

    #[test]
    fn batches_have_distinct_images_and_cover_data() {
        let data = toy_dataset(100, 20);
        let mut rng = rng_from_seed(1);
        let batches = epoch_batches(&data, 8, &mut rng).unwrap();
        let mut covered = 0;
        for b in &batches {
            assert!(b.images_unique());
            assert!(b.len() <= 8 && b.len() >= 2);
            covered += b.len();
        }
        assert!(covered >= 98);
        assert!(batches.iter().filter(|b| b.len() == 8).count() >= 12);
    }

    #[test]
    fn batch_size_32_has_992_negatives() {
        let data = toy_dataset(200, 50);
        let b = build_batch(&data, 32, &mut rng_from_seed(0)).unwrap();
        assert_eq!(b.len(), 32);
        assert_eq!(b.negative_count(), 992);
    }

    #[test]
    fn too_few_images_is_a_data_error() {
        let data = toy_dataset(40, 5);
        assert!(matches!(build_batch(&data, 8, &mut rng_from_seed(0)), Err(Error::Data(_))));
    }

    #[test]
    fn batches_replay_under_the_same_seed() {
        let data = toy_dataset(90, 30);
        let run = |seed| {
            let mut rng = rng_from_seed(seed);
            (0..2).map(|_| epoch_batches(&data, 6, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut w = Tensor::row(vec![0.5, -0.25]);
        let mut state = AdamState::new([w.shape()]);
        state.first[0] = Tensor::row(vec![0.0, 0.0]);
        let cfg = AdamConfig::from(&Hyperparams::default());
        adam_step(&mut [("w", &mut w)], &[Tensor::zeros(&[1, 2])], &mut state, &cfg).unwrap();
        assert_eq!(w.data(), &[0.5, -0.25]);
        assert_eq!(state.step, 1);

        // existing moments decay
        state.first[0] = Tensor::row(vec![1.0, 1.0]);
        state.second[0] = Tensor::row(vec![1.0, 1.0]);
        adam_step(&mut [("w", &mut w)], &[Tensor::zeros(&[1, 2])], &mut state, &cfg).unwrap();
        assert_eq!(state.first[0].data(), &[0.9, 0.9]);
        assert_eq!(state.second[0].data(), &[0.999, 0.999]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // Textbook reference: m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g², Δ = lr·g/(|g|+ε).
        let mut w = Tensor::row(vec![1.0]);
        let mut state = AdamState::new([w.shape()]);
        let cfg = AdamConfig::from(&Hyperparams::default());
        adam_step(&mut [("w", &mut w)], &[Tensor::row(vec![1.0])], &mut state, &cfg).unwrap();
        let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert!((1.0 - w.data()[0] - 0.001).abs() < 1e-10);
    }

    #[test]
    fn adam_matches_reference_over_several_steps() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let mut w = Tensor::row(vec![0.4]);
        let mut state = AdamState::new([w.shape()]);
        let (mut rw, mut m, mut v) = (0.4f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(&mut [("w", &mut w)], &[Tensor::row(vec![g])], &mut state, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            rw -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((w.data()[0] - rw).abs() < 1e-14);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut w = Tensor::row(vec![1.0]);
        let mut state = AdamState::new([w.shape()]);
        let cfg = AdamConfig::from(&Hyperparams::default());
        let err = adam_step(&mut [("gate.w_gate", &mut w)], &[Tensor::row(vec![f64::NAN])], &mut state, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("gate.w_gate")));
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(state.step, 0);
    }

    fn small_run(epochs: usize, seed: u64) -> (usize, PairDataset, PairDataset, FeatureSet, Hyperparams) {
        use crate::synth::{generate, SynthConfig};
        use crate::vocab::{build_vocab, tokenize};
        let d = generate(&SynthConfig {
            clusters: 4,
            slots: 1,
            values_per_slot: 3,
            dim: 16,
            train_pairs: 120,
            dev_pairs: 40,
            test_pairs: 0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let corpus: Vec<Vec<String>> = d.train.iter().map(|c| tokenize(&c.text)).collect();
        let vocab = build_vocab(&corpus, 1).unwrap();
        let train_set = PairDataset::from_captions(&d.train, &vocab).unwrap();
        let dev = PairDataset::from_captions(&d.dev, &vocab).unwrap();
        let hp = Hyperparams {
            batch_size: 16,
            embed_dim: 12,
            hidden: 12,
            learning_rate: 0.01,
            epochs,
            seed,
            ..Hyperparams::default()
        };
        (vocab.len(), train_set, dev, d.features, hp)
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let (v, tr, dev, feats, hp) = small_run(0, 3);
        let out = train(v, &tr, &dev, &feats, &hp).unwrap();
        assert_eq!(out.best, init_params(hp.dims(v, 16), 3));
        assert_eq!(out.best_epoch, 0);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_improves_dev_ranking() {
        for seed in 0..3 {
            let (v, tr, dev, feats, hp) = small_run(20, seed);
            let out = train(v, &tr, &dev, &feats, &hp).unwrap();
            let first = out.log[0];
            let last = out.log.last().unwrap();
            assert!(last.loss < first.loss, "seed {seed}: {first:?} -> {last:?}");
            assert!(out.best_dev_metric.unwrap() > first.dev_metric, "seed {seed}: {}", out.log_text());
            assert!(out.best_dev_metric.unwrap() > 40.0, "seed {seed}: {}", out.log_text());
            assert!(out.best.is_finite());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (v, tr, dev, feats, hp) = small_run(3, 9);
        let a = train(v, &tr, &dev, &feats, &hp).unwrap();
        let b = train(v, &tr, &dev, &feats, &hp).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log_text(), b.log_text());
    }

    #[test]
    fn best_epoch_is_the_first_strict_maximum() {
        let (v, tr, dev, feats, hp) = small_run(6, 1);
        let out = train(v, &tr, &dev, &feats, &hp).unwrap();
        let best = out.log.iter().map(|r| r.dev_metric).fold(f64::NEG_INFINITY, f64::max);
        let first = out.log.iter().find(|r| r.dev_metric == best).unwrap();
        assert_eq!(out.best_epoch, first.epoch);
        assert_eq!(out.best_dev_metric, Some(best));
    }

    #[test]
    fn frozen_embeddings_stay_put() {
        let (v, tr, dev, feats, hp) = small_run(1, 2);
        let mut init = init_params(hp.dims(v, 16), 2);
        init.embeddings.trainable = false;
        let out = train_from(init.clone(), &tr, &dev, &feats, &hp, &mut rng_from_seed(2)).unwrap();
        assert_eq!(out.best.embeddings, init.embeddings);
        assert_ne!(out.best.gate, init.gate);
    }

    #[test]
    fn fixed_batch_loss_falls_monotonically() {
        // Without dropout every step sees the same function of the parameters.
        let mut monotone = 0;
        for seed in 0..10 {
            let mut rng = rng_from_seed(seed);
            let data = toy_dataset(4, 4);
            let mut features = FeatureSet::new();
            for i in 0..4 {
                features
                    .insert(crate::image::ImageFeature {
                        image_id: format!("img{i}"),
                        values: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    })
                    .unwrap();
            }
            let hp = Hyperparams {
                dropout: 0.0,
                embed_dim: 5,
                hidden: 5,
                seed,
                ..Hyperparams::default()
            };
            let mut params = ModelParams::random(hp.dims(8, 6), &mut rng);
            let mut state = AdamState::for_params(&params);
            let batch = TrainingBatch::new((0..4).collect(), data.image_ids.clone()).unwrap();
            let losses: Vec<f64> = (0..21)
                .map(|_| train_step(&mut params, &mut state, &data, &features, &batch, &hp, &mut rng).unwrap())
                .collect();
            monotone += usize::from(losses.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(monotone >= 9, "{monotone}/10");
    }

    #[test]
    fn seed_averaging_runs_each_seed() {
        let (v, tr, dev, feats, hp) = small_run(2, 0);
        let summary = run_seeds(v, &tr, &dev, &feats, &hp, &[4, 5]).unwrap();
        assert_eq!(summary.per_seed.iter().map(|s| s.0).collect::<Vec<_>>(), [4, 5]);
        let single = train(v, &tr, &dev, &feats, &Hyperparams { seed: 5, ..hp }).unwrap();
        assert_eq!(summary.per_seed[1].1, single.best_dev_metric.unwrap());
        assert_eq!(summary.mean(), (summary.per_seed[0].1 + summary.per_seed[1].1) / 2.0);
    }
}
