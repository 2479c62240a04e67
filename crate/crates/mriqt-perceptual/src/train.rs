//! Pretext training of the feature extractor: k-fold cross-validated
//! lesion-class classification. Each fold trains a fresh classifier on the
//! remaining folds; the fold with the best validation accuracy donates its
//! weights, head removed, as the exported extractor.

use crate::config::ExtractorConfig;
use crate::error::{PerceptualError, Result};
use crate::extractor::{Classifier, FeatureExtractor};
use mriqt_core::VolumeGrid;
use mriqt_nn::{AdamW, AdamWConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTrainConfig {
    pub extractor: ExtractorConfig,
    /// Cross-validation folds; at least 2.
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            folds: 5,
            epochs: 8,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Per-fold validation accuracies and which fold was exported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub fold_accuracy: Vec<f64>,
    pub best_fold: usize,
    pub mean_accuracy: f64,
    pub n_classes: usize,
}

/// Packs volumes into a [B, 1, H, W, D] tensor.
fn batch_tensor(vols: &[&VolumeGrid]) -> Tensor {
    let [h, w, d] = vols[0].shape();
    let s = h * w * d;
    let mut data = Vec::with_capacity(vols.len() * s);
    for v in vols {
        data.extend(v.data().iter().map(|&x| x as f64));
    }
    Tensor::new(vec![vols.len(), 1, h, w, d], data)
}

fn accuracy(clf: &Classifier, items: &[&(VolumeGrid, usize)]) -> f64 {
    let mut hits = 0usize;
    for (v, label) in items {
        let mut g = Graph::new(false);
        let x = g.input(batch_tensor(&[v]));
        let logits = clf.logits(&mut g, x);
        let row = g.value(logits).data();
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("nonempty logits");
        if pred == *label {
            hits += 1;
        }
    }
    hits as f64 / items.len() as f64
}

/// Trains one classifier on `train`, reporting accuracy on `val`.
fn train_fold(
    cfg: &ExtractorTrainConfig,
    n_classes: usize,
    train: &[&(VolumeGrid, usize)],
    val: &[&(VolumeGrid, usize)],
    fold_seed: u64,
) -> Result<(Classifier, f64)> {
    let mut clf = Classifier::new(cfg.extractor.clone(), n_classes, fold_seed)?;
    let mut opt = AdamW::new(clf.fe.store(), AdamWConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed ^ 0x5eed);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let vols: Vec<&VolumeGrid> = chunk.iter().map(|&i| &train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let mut g = Graph::new(true);
            let x = g.input(batch_tensor(&vols));
            let logits = clf.logits(&mut g, x);
            let loss = g.cross_entropy(logits, labels);
            clf.fe.store_mut().zero_grads();
            g.backward(loss, clf.fe.store_mut(), &[]);
            opt.step(clf.fe.store_mut(), cfg.lr);
        }
    }
    let acc = accuracy(&clf, val);
    Ok((clf, acc))
}

/// K-fold CV over labeled volumes; exports the best fold's extractor.
///
/// Labels must be 0-based class indices. Requires at least `folds`·2
/// volumes and `folds` ≥ 2 so every fold has nonempty train and val sides.
pub fn train_extractor(
    data: &[(VolumeGrid, usize)],
    cfg: &ExtractorTrainConfig,
) -> Result<(FeatureExtractor, CvReport)> {
    cfg.extractor.validate()?;
    if cfg.folds < 2 {
        return Err(PerceptualError::InsufficientData(format!(
            "cross-validation needs >= 2 folds, got {}",
            cfg.folds
        )));
    }
    if data.len() < cfg.folds * 2 {
        return Err(PerceptualError::InsufficientData(format!(
            "{} labeled volumes for {} folds (need >= {})",
            data.len(),
            cfg.folds,
            cfg.folds * 2
        )));
    }
    let shape = data[0].0.shape();
    for (v, _) in data {
        if v.shape() != shape {
            return Err(PerceptualError::ShapeMismatch {
                a: shape,
                b: v.shape(),
            });
        }
    }
    let n_classes = data.iter().map(|(_, l)| l + 1).max().expect("nonempty");
    if n_classes < 2 {
        return Err(PerceptualError::InsufficientData(
            "all volumes share one label; classification needs >= 2 classes".into(),
        ));
    }

    // Seeded shuffle then round-robin fold assignment.
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    idx.shuffle(&mut rng);
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; data.len()];
        for (pos, &i) in idx.iter().enumerate() {
            f[i] = pos % cfg.folds;
        }
        f
    };

    let mut best: Option<(Classifier, f64, usize)> = None;
    let mut fold_accuracy = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let train: Vec<&(VolumeGrid, usize)> = data
            .iter()
            .enumerate()
            .filter(|(i, _)| fold_of[*i] != fold)
            .map(|(_, d)| d)
            .collect();
        let val: Vec<&(VolumeGrid, usize)> = data
            .iter()
            .enumerate()
            .filter(|(i, _)| fold_of[*i] == fold)
            .map(|(_, d)| d)
            .collect();
        let fold_seed = cfg.seed ^ ((fold as u64) << 32);
        let (clf, acc) = train_fold(cfg, n_classes, &train, &val, fold_seed)?;
        fold_accuracy.push(acc);
        if best.as_ref().map_or(true, |(_, b, _)| acc > *b) {
            best = Some((clf, acc, fold));
        }
    }

    let (clf, _, best_fold) = best.expect("folds >= 2");
    let mean_accuracy = fold_accuracy.iter().sum::<f64>() / fold_accuracy.len() as f64;
    let report = CvReport {
        fold_accuracy,
        best_fold,
        mean_accuracy,
        n_classes,
    };
    let fe = clf.into_extractor(format!(
        "cv{}-best-fold-{best_fold}-classes-{n_classes}",
        cfg.folds
    ));
    Ok((fe, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mriqt_core::Modality;
    use rand::Rng;

    /// Two synthetic classes separated by a bright central lesion.
    fn labeled_set(n: usize, seed: u64) -> Vec<(VolumeGrid, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let dim = 8usize;
                let mut data = vec![0.0f32; dim * dim * dim];
                for (j, v) in data.iter_mut().enumerate() {
                    *v = rng.gen_range(-0.2..0.2);
                    if label == 1 {
                        let (x, y, z) = (j / (dim * dim), (j / dim) % dim, j % dim);
                        let c = dim as f32 / 2.0;
                        let r2 = (x as f32 - c).powi(2)
                            + (y as f32 - c).powi(2)
                            + (z as f32 - c).powi(2);
                        if r2 < 6.0 {
                            *v += 0.8;
                        }
                    }
                }
                (
                    VolumeGrid::new(data, [dim; 3], [1.0; 3], Modality::HF, format!("s{i}"))
                        .unwrap(),
                    label,
                )
            })
            .collect()
    }

    fn tiny_train_cfg() -> ExtractorTrainConfig {
        ExtractorTrainConfig {
            extractor: ExtractorConfig {
                channels: vec![2, 3, 4],
                in_channels: 1,
            },
            folds: 3,
            epochs: 6,
            batch_size: 6,
            lr: 5e-3,
            seed: 9,
        }
    }

    #[test]
    fn separable_classes_reach_high_validation_accuracy() {
        let data = labeled_set(24, 1);
        // Oracle check first: the classes must be separable by a mean
        // intensity threshold, otherwise the accuracy bar tests nothing.
        let mut means: Vec<(f64, usize)> = data
            .iter()
            .map(|(v, l)| {
                (
                    v.data().iter().map(|&x| x as f64).sum::<f64>() / v.num_voxels() as f64,
                    *l,
                )
            })
            .collect();
        means.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let class_flip: usize = means.windows(2).filter(|w| w[0].1 != w[1].1).count();
        assert_eq!(class_flip, 1, "labels must split cleanly by mean intensity");

        let (fe, report) = train_extractor(&data, &tiny_train_cfg()).unwrap();
        assert!(
            report.mean_accuracy > 0.9,
            "mean val accuracy {} too low: {:?}",
            report.mean_accuracy,
            report.fold_accuracy
        );
        assert_eq!(report.n_classes, 2);
        assert!(fe.trained_on().contains("best-fold"));
    }

    #[test]
    fn single_fold_cv_is_rejected() {
        let data = labeled_set(12, 2);
        let cfg = ExtractorTrainConfig {
            folds: 1,
            ..tiny_train_cfg()
        };
        assert!(matches!(
            train_extractor(&data, &cfg),
            Err(PerceptualError::InsufficientData(_))
        ));
    }

    #[test]
    fn too_few_volumes_are_rejected() {
        let data = labeled_set(5, 3);
        assert!(matches!(
            train_extractor(&data, &tiny_train_cfg()),
            Err(PerceptualError::InsufficientData(_))
        ));
    }

    #[test]
    fn fold_assignment_is_seed_deterministic() {
        let data = labeled_set(12, 4);
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 1;
        let (_, r1) = train_extractor(&data, &cfg).unwrap();
        let (_, r2) = train_extractor(&data, &cfg).unwrap();
        assert_eq!(r1.fold_accuracy, r2.fold_accuracy);
        assert_eq!(r1.best_fold, r2.best_fold);
    }
}
