//! The alternating training loop: one consistency step, then one main
//! step, per iteration.

use bmr_autodiff::{cosine_anneal, Adam, AdamConfig, Mode, Session};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BmrConfig, View};
use crate::consistency::{build_consistency_set, default_set_size, ConsistencyPair};
use crate::encoders::RawNews;
use crate::error::{BmrError, Result};
use crate::metrics::{derive_threshold, evaluate, Metrics};
use crate::model::{bce_mean, Batch, Bmr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub seed: u64,
    /// Size of the synthesized consistency set; the largest valid size
    /// when absent.
    pub consistency_size: Option<usize>,
    /// End early once test accuracy reaches 1.0. The best epoch cannot
    /// change after that point.
    pub stop_when_perfect: bool,
    /// Items per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 24,
            lr0: 1e-4,
            seed: 0,
            consistency_size: None,
            stop_when_perfect: false,
            eval_chunk: 256,
        }
    }
}

/// Mean training losses of one epoch plus the test metrics after it.
/// Losses are unweighted batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_final: f64,
    pub loss_coarse: Option<f64>,
    pub loss_cc: Option<f64>,
    pub test: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: BmrConfig,
    pub options: TrainOptions,
    pub threshold: f64,
    /// Test metrics of the untrained model.
    pub init: Metrics,
    pub epochs: Vec<EpochRecord>,
    /// `None` when no epoch ran; `best` is then `init`.
    pub best_epoch: Option<usize>,
    pub best: Metrics,
}

pub struct TrainedRun {
    pub report: RunReport,
    /// Weights of the best epoch.
    pub best: Bmr,
    /// Weights after the last epoch.
    pub last: Bmr,
}

/// Splits `order` into batches of `size`, folding a trailing single item
/// into the previous batch so batch norm always sees two rows.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let size = size.max(2);
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end += 1;
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

fn labels_of(items: &[RawNews]) -> Result<Vec<u8>> {
    items
        .iter()
        .map(|n| {
            n.label
                .ok_or_else(|| BmrError::Data("evaluation item has no label".into()))
        })
        .collect()
}

/// Test metrics of `model` at `threshold`.
pub fn evaluate_model(model: &mut Bmr, test: &[RawNews], threshold: f64, chunk: usize) -> Result<Metrics> {
    let scores = model.predict_news(test, chunk)?;
    Ok(evaluate(&scores.y_hat, &labels_of(test)?, threshold))
}

/// Accuracy of `S_m >= 0.5` as a matched-pair decision.
pub fn consistency_accuracy(model: &mut Bmr, pairs: &[ConsistencyPair], chunk: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(BmrError::Data("no consistency pairs to evaluate".into()));
    }
    let mut correct = 0;
    for part in pairs.chunks(chunk.max(2)) {
        let batch = pair_batch(part, model.cfg())?;
        let s = model.predict_consistency(&batch)?;
        correct += s
            .iter()
            .zip(part)
            .filter(|(s, p)| (**s >= 0.5) == (p.y_prime == 1))
            .count();
    }
    Ok(correct as f64 / pairs.len() as f64)
}

fn pair_batch<'a>(pairs: impl IntoIterator<Item = &'a ConsistencyPair>, cfg: &BmrConfig) -> Result<Batch> {
    Batch::from_pairs(
        pairs
            .into_iter()
            .map(|p| (&p.image, p.text.as_slice(), f64::from(p.y_prime))),
        cfg,
    )
}

pub fn train(train_set: &[RawNews], test_set: &[RawNews], cfg: &BmrConfig, opts: &TrainOptions) -> Result<TrainedRun> {
    train_observed(train_set, test_set, cfg, opts, |_| {})
}

/// [`train`], calling `observe` after every epoch.
pub fn train_observed(
    train_set: &[RawNews],
    test_set: &[RawNews],
    cfg: &BmrConfig,
    opts: &TrainOptions,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainedRun> {
    if train_set.len() < 2 {
        return Err(BmrError::Data(format!(
            "training set needs at least 2 items, got {}",
            train_set.len()
        )));
    }
    if test_set.is_empty() {
        return Err(BmrError::Data("test set is empty".into()));
    }
    if !(opts.lr0 >= 0.0 && opts.lr0.is_finite()) {
        return Err(BmrError::Config(vec![format!(
            "lr0 must be finite and >= 0, got {}",
            opts.lr0
        )]));
    }
    cfg.validate()?;
    let threshold = match cfg.threshold {
        Some(t) => t,
        None => derive_threshold(train_set)?,
    };

    let mut model = Bmr::new(cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);

    let use_cc = cfg.has(View::M) && cfg.consistency_loss;
    let pairs = if use_cc {
        let real: Vec<RawNews> = train_set.iter().filter(|n| n.label == Some(0)).cloned().collect();
        let k = opts.consistency_size.unwrap_or_else(|| default_set_size(real.len()));
        build_consistency_set(&real, k, opts.seed.wrapping_add(1))?
    } else {
        Vec::new()
    };

    let init = evaluate_model(&mut model, test_set, threshold, opts.eval_chunk)?;
    let mut report = RunReport {
        config: cfg.clone(),
        options: opts.clone(),
        threshold,
        init,
        epochs: Vec::new(),
        best_epoch: None,
        best: init,
    };
    let mut best = model.clone();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cc_order: Vec<usize> = (0..pairs.len()).collect();
    let iters_per_epoch = batches(&order, opts.batch).len();
    let total = iters_per_epoch * opts.epochs;
    let mut adam = Adam::new(AdamConfig::default());
    let mut step = 0;
    let mut cc_batches: Vec<Vec<usize>> = Vec::new();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut sum_final, mut sum_coarse, mut sum_cc) = (0.0, 0.0, 0.0);
        let mut n_iter = 0usize;
        for idx in batches(&order, opts.batch) {
            let lr = cosine_anneal(opts.lr0, step, total);
            step += 1;
            n_iter += 1;

            if use_cc {
                if cc_batches.is_empty() {
                    cc_order.shuffle(&mut rng);
                    cc_batches = batches(&cc_order, opts.batch)
                        .into_iter()
                        .rev()
                        .map(<[usize]>::to_vec)
                        .collect();
                }
                let cc_idx = cc_batches.pop().expect("refilled above");
                let batch = pair_batch(cc_idx.iter().map(|&i| &pairs[i]), cfg)?;
                model.store.zero_grad();
                let mut sess = Session::new(&mut model.store, Mode::Train);
                let s_m = model.net.consistency_score(&mut sess, &batch)?;
                let raw = bce_mean(&mut sess, s_m, &batch.labels)?;
                sum_cc += sess.tape.value(raw).item()?;
                let loss = sess.tape.scale(raw, cfg.beta);
                sess.backward(loss)?;
                adam.step(&mut model.store, lr);
                model.net.after_step(&mut model.store);
            }

            let items: Vec<&RawNews> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_news(&items, cfg)?;
            model.store.zero_grad();
            let mut sess = Session::new(&mut model.store, Mode::Train);
            let out = model.net.forward(&mut sess, &batch)?;
            let loss = model.net.main_loss(&mut sess, &out, &batch.labels)?;
            sum_final += sess.tape.value(loss.final_).item()?;
            if let Some(c) = loss.coarse {
                sum_coarse += sess.tape.value(c).item()?;
            }
            sess.backward(loss.total)?;
            adam.step(&mut model.store, lr);
            model.net.after_step(&mut model.store);
        }

        let test = evaluate_model(&mut model, test_set, threshold, opts.eval_chunk)?;
        let n = n_iter as f64;
        let record = EpochRecord {
            epoch,
            loss_final: sum_final / n,
            loss_coarse: (cfg.coarse_loss && !cfg.coarse_views().is_empty()).then_some(sum_coarse / n),
            loss_cc: use_cc.then_some(sum_cc / n),
            test,
        };
        observe(&record);
        report.epochs.push(record);
        if report.best_epoch.is_none() || test.accuracy > report.best.accuracy {
            report.best_epoch = Some(epoch);
            report.best = test;
            model.store.zero_grad();
            best = model.clone();
        }
        if opts.stop_when_perfect && test.accuracy >= 1.0 {
            break;
        }
    }
    Ok(TrainedRun {
        report,
        best,
        last: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_folds_singletons() {
        let order: Vec<usize> = (0..49).collect();
        let b = batches(&order, 24);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![24, 25]);
        let order: Vec<usize> = (0..50).collect();
        assert_eq!(batches(&order, 24).len(), 3);
        assert_eq!(batches(&order[..1], 24), vec![&[0][..]]);
    }
}
