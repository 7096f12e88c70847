//! Helpers shared by the integration tests.
#![allow(dead_code)]

use bmr_autodiff::gradcheck::relative_error;
use bmr_autodiff::{Mode, ParamId, ParamStore, Session};
use bmr_core::model::{BmrNet, MainLoss};
use bmr_core::{Batch, BmrConfig, Grid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random images, token ids and alternating labels for `cfg`.
pub fn random_batch(cfg: &BmrConfig, b: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<(Grid, Vec<u32>, f64)> = (0..b)
        .map(|i| {
            let px = (0..cfg.image_h * cfg.image_w)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            let len = rng.random_range(1..=cfg.max_len);
            let ids = (0..len).map(|_| rng.random_range(1..cfg.vocab as u32)).collect();
            (Grid::new(cfg.image_h, cfg.image_w, px).unwrap(), ids, (i % 2) as f64)
        })
        .collect();
    Batch::from_pairs(items.iter().map(|(g, t, y)| (g, t.as_slice(), *y)), cfg).unwrap()
}

/// Which scalar a gradient check differentiates.
#[derive(Clone, Copy, Debug)]
pub enum Objective {
    /// `L_final + α · L_coarse`.
    Main,
    /// `β · BCE(y′, S_m)`.
    Consistency,
    /// Coarse loss alone.
    Coarse,
}

pub fn objective(net: &BmrNet, sess: &mut Session, batch: &Batch, which: Objective) -> bmr_autodiff::Var {
    match which {
        Objective::Consistency => {
            let s = net.consistency_score(sess, batch).unwrap();
            net.consistency_loss(sess, s, &batch.labels).unwrap()
        }
        Objective::Main | Objective::Coarse => {
            let out = net.forward(sess, batch).unwrap();
            let MainLoss { total, coarse, .. } = net.main_loss(sess, &out, &batch.labels).unwrap();
            match which {
                Objective::Coarse => coarse.expect("coarse loss enabled"),
                _ => total,
            }
        }
    }
}

pub fn loss_value(net: &BmrNet, store: &mut ParamStore, batch: &Batch, which: Objective) -> f64 {
    let mut sess = Session::new(store, Mode::Train);
    let l = objective(net, &mut sess, batch, which);
    sess.tape.value(l).item().unwrap()
}

/// Worst relative error between tape and central-difference gradients
/// over every coordinate of the selected parameters, plus how many
/// coordinates were checked and where the worst one sits.
pub fn gradient_check(
    net: &BmrNet,
    store: &mut ParamStore,
    batch: &Batch,
    which: Objective,
    select: impl Fn(&str) -> bool,
    h: f64,
) -> (f64, usize, String) {
    store.zero_grad();
    {
        let mut sess = Session::new(store, Mode::Train);
        let l = objective(net, &mut sess, batch, which);
        sess.backward(l).unwrap();
    }
    let ids: Vec<ParamId> = store.ids().filter(|&id| select(&store.entry(id).name)).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut at = String::new();
    for id in ids {
        let analytic: Vec<f64> = match store.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; store.value(id).numel()],
        };
        for (i, a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = loss_value(net, store, batch, which);
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = loss_value(net, store, batch, which);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(*a, numeric);
            if err > worst {
                worst = err;
                at = format!("{}[{i}]: tape {a:e}, numeric {numeric:e}", store.entry(id).name);
            }
            checked += 1;
        }
    }
    (worst, checked, at)
}

/// True when the parameter has no gradient or an all-zero one.
pub fn grad_is_zero(store: &ParamStore, id: ParamId) -> bool {
    store.grad(id).is_none_or(|g| g.data().iter().all(|&v| v == 0.0))
}
