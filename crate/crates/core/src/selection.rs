//! Top-k selection: a small convolutional classifier scores generated
//! samples, and a sample is kept only when its conditioning label ranks
//! among the classifier's k best classes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::LabeledSample;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, Grid, NodeId, Tape};
use crate::train;

/// Scores samples against a fixed set of classes.
pub trait Discriminator: Send + Sync {
    fn num_classes(&self) -> usize;
    /// Per-class scores, length `num_classes`, all finite.
    fn predict_scores(&self, x: &Grid) -> Result<Vec<f32>>;
}

/// Architecture of the desk-scale classifier: conv blocks with average-pool
/// downsampling between them, global average pooling, and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            in_channels: 1,
            widths: vec![16, 32, 64],
            num_classes: 10,
            height: 128,
            width: 128,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid("channels and classes must be positive"));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("widths must be non-empty and positive"));
        }
        let div = 1usize << (self.widths.len() - 1);
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} not divisible by 2^(blocks-1) = {div}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("block{i}.w"), vec![w, cin, 3, 3]));
            out.push((format!("block{i}.b"), vec![w]));
            cin = w;
        }
        out.push(("head.w".into(), vec![cin, self.num_classes]));
        out.push(("head.b".into(), vec![self.num_classes]));
        out
    }
}

/// Trainable convolutional classifier.
#[derive(Clone, Debug)]
pub struct ConvClassifier {
    config: ClassifierConfig,
    params: Vec<Grid>,
}

impl ConvClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".w") {
                    let fan_in: usize = shape[1..].iter().product::<usize>().max(shape[0]);
                    let std = (2.0 / fan_in as f64).sqrt() as f32;
                    Grid::from_fn(&shape, |_| {
                        let z: f32 = rng.sample(StandardNormal);
                        z * std
                    })
                } else {
                    Grid::zeros(&shape)
                }
            })
            .collect();
        Ok(ConvClassifier { config, params })
    }

    pub fn from_params(config: ClassifierConfig, params: Vec<Grid>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter grids, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), grid) in shapes.iter().zip(&params) {
            if grid.shape() != &shape[..] {
                return Err(Error::invalid(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    grid.shape()
                )));
            }
        }
        Ok(ConvClassifier { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &[Grid] {
        &self.params
    }

    /// Record the logits graph; `x` is `[h, w]` or `[c, h, w]`.
    pub fn build_logits_graph(
        config: &ClassifierConfig,
        tape: &mut Tape,
        param_ids: &[NodeId],
        x: &Grid,
    ) -> Result<NodeId> {
        let expected = [config.in_channels, config.height, config.width];
        let x3 = match x.shape() {
            [h, w] if config.in_channels == 1 && *h == config.height && *w == config.width => {
                x.reshaped(&expected)?
            }
            s if s == expected => x.clone(),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "classifier input",
                    lhs: s.to_vec(),
                    rhs: expected.to_vec(),
                })
            }
        };
        let mut cursor = 0usize;
        let mut next = || {
            let id = param_ids[cursor];
            cursor += 1;
            id
        };
        let mut h = tape.constant(x3);
        let blocks = config.widths.len();
        for i in 0..blocks {
            let (w, b) = (next(), next());
            h = tape.conv2d(h, w, 1)?;
            h = tape.add_channel_bias(h, b)?;
            h = tape.silu(h)?;
            if i + 1 < blocks {
                h = tape.avg_pool2d(h, 2)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let feat_len = tape.value(pooled).len();
        let pooled = tape.reshape(pooled, &[1, feat_len])?;
        let (hw, hb) = (next(), next());
        let logits = tape.matmul(pooled, hw)?;
        tape.add_row_bias(logits, hb)
    }
}

impl Discriminator for ConvClassifier {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_scores(&self, x: &Grid) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let logits = Self::build_logits_graph(&self.config, &mut tape, &ids, x)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

/// Classifier training settings; label smoothing defaults to 0.1 and the
/// optimizer shares the denoiser's AdamW hyperparameters.
#[derive(Clone, Debug)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 500,
            batch_size: 30,
            label_smoothing: 0.1,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Train a classifier on labeled spectrograms with smoothed cross-entropy.
/// Requires at least two distinct classes in the data.
pub fn train_discriminator(
    dataset: &[LabeledSample],
    config: &ClassifierConfig,
    train_config: &ClassifierTrainConfig,
) -> Result<ConvClassifier> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, s) in dataset.iter().enumerate() {
        if s.class_id >= config.num_classes {
            return Err(Error::invalid(format!(
                "sample {i}: class {} out of range for {} classes",
                s.class_id, config.num_classes
            )));
        }
        seen.insert(s.class_id);
    }
    if seen.len() < 2 {
        return Err(Error::invalid(
            "discriminator training needs at least two distinct classes",
        ));
    }
    let mut model = ConvClassifier::new(config.clone(), train_config.seed)?;
    let cfg = config.clone();
    let smoothing = train_config.label_smoothing;
    let builder = move |tape: &mut Tape, ids: &[NodeId], idx: usize, _rng: &mut ChaCha8Rng| {
        let sample = &dataset[idx];
        let logits = ConvClassifier::build_logits_graph(&cfg, tape, ids, &sample.spectrogram)?;
        tape.softmax_cross_entropy(logits, &[sample.class_id], smoothing)
    };
    let mut params = std::mem::take(&mut model.params);
    let result = train::run_epochs(
        &mut params,
        dataset.len(),
        train_config.epochs,
        train_config.batch_size,
        train_config.optimizer,
        train_config.seed,
        &builder,
    );
    model.params = params;
    result?;
    Ok(model)
}

/// Class ranking for one score vector: indices of the `k` highest scores,
/// ties broken toward the lower class index.
pub fn top_k_classes(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Per-class acceptance tallies plus the totals.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionReport {
    pub k: usize,
    /// Accepted count G.
    pub accepted: usize,
    /// Total generated count N.
    pub total: usize,
    /// `(accepted, rejected)` per class id.
    pub per_class: Vec<(usize, usize)>,
}

impl SelectionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,accepted,rejected\n");
        for (class_id, (acc, rej)) in self.per_class.iter().enumerate() {
            out.push_str(&format!("{class_id},{acc},{rej}\n"));
        }
        out.push_str(&format!(
            "total,{},{}\n",
            self.accepted,
            self.total - self.accepted
        ));
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv()).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Keep sample `i` iff `labels[i]` is among the classifier's `k` top-scoring
/// classes for it. Inputs are untouched; accepted samples are returned as
/// copies with their labels.
pub fn topk_filter(
    samples: &[Grid],
    labels: &[usize],
    clf: &dyn Discriminator,
    k: usize,
) -> Result<(Vec<(Grid, usize)>, SelectionReport)> {
    let classes = clf.num_classes();
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("k {k} outside 1..={classes}")));
    }
    if samples.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} samples vs {} labels",
            samples.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut per_class = vec![(0usize, 0usize); classes];
    let mut accepted = Vec::new();
    for (sample, &label) in samples.iter().zip(labels) {
        let scores = clf.predict_scores(sample)?;
        if scores.len() != classes {
            return Err(Error::invalid(format!(
                "discriminator returned {} scores for {classes} classes",
                scores.len()
            )));
        }
        let hit = top_k_classes(&scores, k).contains(&label);
        if hit {
            per_class[label].0 += 1;
            accepted.push((sample.clone(), label));
        } else {
            per_class[label].1 += 1;
        }
    }
    let report = SelectionReport {
        k,
        accepted: accepted.len(),
        total: samples.len(),
        per_class,
    };
    Ok((accepted, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FixedScores(Vec<Vec<f32>>, usize);
    impl Discriminator for FixedScores {
        fn num_classes(&self) -> usize {
            self.1
        }
        fn predict_scores(&self, x: &Grid) -> Result<Vec<f32>> {
            Ok(self.0[x.data()[0] as usize].clone())
        }
    }

    fn indexed_samples(n: usize) -> Vec<Grid> {
        (0..n).map(|i| Grid::scalar(i as f32)).collect()
    }

    #[test]
    fn top_k_breaks_ties_toward_lower_index() {
        let ranked = top_k_classes(&[0.5, 0.9, 0.5, 0.9], 3);
        assert_eq!(ranked, vec![1, 3, 0]);
    }

    #[test]
    fn k_equal_to_class_count_accepts_everything() {
        let clf = FixedScores(vec![vec![0.1, 0.9, 0.0]; 4], 3);
        let samples = indexed_samples(4);
        let labels = vec![0, 1, 2, 0];
        let (accepted, report) = topk_filter(&samples, &labels, &clf, 3).unwrap();
        assert_eq!(accepted.len(), 4);
        assert_eq!(report.accepted, 4);
        assert_eq!(report.total, 4);
    }

    #[test]
    fn oracle_classifier_accepts_all_at_k1() {
        // scores rank the true label first for every sample
        let scores = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let clf = FixedScores(scores, 3);
        let samples = indexed_samples(3);
        let labels = vec![0, 1, 2];
        let (_, report) = topk_filter(&samples, &labels, &clf, 1).unwrap();
        assert_eq!(report.accepted, report.total);
    }

    #[test]
    fn report_counts_reconcile() {
        let scores = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ];
        let clf = FixedScores(scores, 2);
        let samples = indexed_samples(4);
        let labels = vec![0, 1, 1, 0];
        let (accepted, report) = topk_filter(&samples, &labels, &clf, 1).unwrap();
        assert_eq!(report.accepted, accepted.len());
        let sum: usize = report.per_class.iter().map(|(a, _)| a).sum();
        assert_eq!(sum, report.accepted);
        let total: usize = report.per_class.iter().map(|(a, r)| a + r).sum();
        assert_eq!(total, report.total);
    }

    #[test]
    fn acceptance_is_monotone_and_nested_in_k() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let classes = 6;
        let n = 64;
        let scores: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let clf = FixedScores(scores, classes);
        let samples = indexed_samples(n);
        let mut prev_set: Vec<usize> = Vec::new();
        let mut prev_g = 0;
        for k in 1..=classes {
            let (accepted, report) = topk_filter(&samples, &labels, &clf, k).unwrap();
            let set: Vec<usize> = accepted.iter().map(|(g, _)| g.data()[0] as usize).collect();
            assert!(report.accepted >= prev_g, "G not monotone at k={k}");
            for idx in &prev_set {
                assert!(set.contains(idx), "accepted set not nested at k={k}");
            }
            prev_set = set;
            prev_g = report.accepted;
        }
    }

    #[test]
    fn filter_rejects_bad_arguments() {
        let clf = FixedScores(vec![vec![0.0, 1.0]], 2);
        let samples = indexed_samples(1);
        assert!(topk_filter(&samples, &[0], &clf, 0).is_err());
        assert!(topk_filter(&samples, &[0], &clf, 3).is_err());
        assert!(topk_filter(&samples, &[2], &clf, 1).is_err());
        assert!(topk_filter(&samples, &[0, 1], &clf, 1).is_err());
    }

    #[test]
    fn uniform_random_scores_accept_at_rate_k_over_c() {
        use rand::{Rng, SeedableRng};
        struct RandomScores;
        impl Discriminator for RandomScores {
            fn num_classes(&self) -> usize {
                10
            }
            fn predict_scores(&self, x: &Grid) -> Result<Vec<f32>> {
                // hash the index into a per-sample stream
                let mut rng = crate::train::derive_rng(77, x.data()[0] as u64, 0);
                Ok((0..10).map(|_| rng.gen_range(0.0..1.0)).collect())
            }
        }
        let n = 10_000;
        let samples = indexed_samples(n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let (_, report) = topk_filter(&samples, &labels, &RandomScores, 1).unwrap();
        let rate = report.accepted as f64 / report.total as f64;
        assert!((rate - 0.10).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let dataset: Vec<LabeledSample> = (0..4)
            .map(|_| LabeledSample {
                spectrogram: Grid::zeros(&[4, 4]),
                class_id: 0,
                fold: 1,
            })
            .collect();
        let cfg = ClassifierConfig {
            in_channels: 1,
            widths: vec![4, 8],
            num_classes: 2,
            height: 4,
            width: 4,
        };
        let err = train_discriminator(&dataset, &cfg, &ClassifierTrainConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn smoothed_loss_matches_hand_formula() {
        // single row, logits chosen so softmax is easy to write down
        let mut tape = Tape::new();
        let logits = tape.input(Grid::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0], 0.1).unwrap();
        // p = [0.5, 0.5]; q = [0.95, 0.05]; loss = -sum q ln p = ln 2
        assert!((tape.value(loss).item() as f64 - (2.0f64).ln()).abs() < 1e-7);
    }
}
