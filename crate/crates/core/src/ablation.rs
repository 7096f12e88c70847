//! Configuration grids trained over several seeds.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{BmrConfig, GateInput, GateMode, RefineMode, ReweighMode, View};
use crate::encoders::RawNews;
use crate::error::Result;
use crate::metrics::Metrics;
use crate::train::{train, TrainOptions};

/// A labelled set of overrides on a base configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigDelta {
    pub label: String,
    pub views: Option<BTreeSet<View>>,
    pub reweigh_mode: Option<ReweighMode>,
    pub stop_grad_reweigh: Option<bool>,
    pub coarse_loss: Option<bool>,
    pub consistency_loss: Option<bool>,
    pub sm_reweighs_multiview: Option<bool>,
    pub complement_mode: Option<bool>,
    pub gate_mode: Option<GateMode>,
    pub gate_input: Option<GateInput>,
    pub refine_mode: Option<RefineMode>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl ConfigDelta {
    pub fn labelled(label: &str) -> Self {
        Self {
            label: label.to_string(),
            ..Self::default()
        }
    }

    pub fn apply(&self, base: &BmrConfig) -> BmrConfig {
        let mut c = base.clone();
        if let Some(v) = &self.views {
            c.views = v.clone();
        }
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(x) = self.$f { c.$f = x; })*};
        }
        set!(
            reweigh_mode,
            stop_grad_reweigh,
            coarse_loss,
            consistency_loss,
            sm_reweighs_multiview,
            complement_mode,
            gate_mode,
            gate_input,
            refine_mode,
            alpha,
            beta
        );
        c
    }
}

/// The seven ablations plus the full model.
pub fn ablation_preset() -> Vec<ConfigDelta> {
    let d = ConfigDelta::labelled;
    vec![
        ConfigDelta {
            views: Some([View::Ip, View::Is, View::T].into_iter().collect()),
            ..d("IS+IP+T")
        },
        ConfigDelta {
            sm_reweighs_multiview: Some(true),
            ..d("S_m reweigh. Multi-view.")
        },
        ConfigDelta {
            reweigh_mode: Some(ReweighMode::Off),
            ..d("w/o Feature Reweigh.")
        },
        ConfigDelta {
            coarse_loss: Some(false),
            ..d("w/o Coarse Class.")
        },
        ConfigDelta {
            refine_mode: Some(RefineMode::SeparateBlocks),
            ..d("using ViT Blocks for Refine.")
        },
        ConfigDelta {
            consistency_loss: Some(false),
            ..d("w/o Cross. Correlat.")
        },
        ConfigDelta {
            gate_mode: Some(GateMode::Softmax),
            ..d("w/o improving MMoE")
        },
        d("BMR"),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Mean over seeds of each seed's best-epoch metrics.
    pub accuracy: f64,
    pub f1_fake: f64,
    pub f1_real: f64,
    pub best_per_seed: Vec<Metrics>,
}

impl AblationRow {
    pub fn csv_header() -> &'static str {
        "label,accuracy,f1_fake,f1_real,seeds"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "\"{}\",{:.4},{:.4},{:.4},{}",
            self.label.replace('"', "\"\""),
            self.accuracy,
            self.f1_fake,
            self.f1_real,
            self.best_per_seed.len()
        )
    }
}

/// Trains every delta with every seed. Runs are independent and spread
/// over `threads` workers; the table does not depend on the thread count.
pub fn run_ablation(
    train_set: &[RawNews],
    test_set: &[RawNews],
    base: &BmrConfig,
    opts: &TrainOptions,
    grid: &[ConfigDelta],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let configs: Vec<BmrConfig> = grid.iter().map(|d| d.apply(base)).collect();
    for c in &configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|g| seeds.iter().map(move |&s| (g, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<Metrics>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(g, seed)) = jobs.get(j) else { break };
        let run_opts = TrainOptions { seed, ..opts.clone() };
        let r = train(train_set, test_set, &configs[g], &run_opts).map(|run| run.report.best);
        results.lock().expect("no worker panicked")[j] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(worker);
        }
        worker();
    });

    let mut results = results.into_inner().expect("no worker panicked").into_iter();
    let mut rows = Vec::with_capacity(grid.len());
    for delta in grid {
        let best: Vec<Metrics> = (0..seeds.len())
            .map(|_| results.next().flatten().expect("every job ran"))
            .collect::<Result<_>>()?;
        let n = best.len().max(1) as f64;
        rows.push(AblationRow {
            label: delta.label.clone(),
            accuracy: best.iter().map(|m| m.accuracy).sum::<f64>() / n,
            f1_fake: best.iter().map(|m| m.fake.f1).sum::<f64>() / n,
            f1_real: best.iter().map(|m| m.real.f1).sum::<f64>() / n,
            best_per_seed: best,
        });
    }
    Ok(rows)
}
