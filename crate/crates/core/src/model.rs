//! The full multi-view network and its losses.

use bmr_autodiff::{Mode, ParamId, ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{BmrConfig, RefineMode, ReweighMode, View};
use crate::encoders::{pad_ids, PatternEncoder, RawNews, SemanticsEncoder, TextEncoder};
use crate::error::{BmrError, Result};
use crate::immoe::{fuse, ExpertBlock, ImmoeLayer, Refiner};
use crate::nn::{eval_scalar_mlp, sinusoidal, Mlp};

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy of one prediction.
pub fn bce(y: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Inputs for one forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, H, W]`
    pub images: Tensor,
    /// `B · max_len` padded token ids.
    pub ids: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds a batch from image/text pairs with explicit targets.
    pub fn from_pairs<'a>(
        items: impl IntoIterator<Item = (&'a crate::encoders::Grid, &'a [u32], f64)>,
        cfg: &BmrConfig,
    ) -> Result<Self> {
        let mut pixels = Vec::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (image, text, y) in items {
            if image.height != cfg.image_h || image.width != cfg.image_w {
                return Err(BmrError::Data(format!(
                    "image is {}x{}, model expects {}x{}",
                    image.height, image.width, cfg.image_h, cfg.image_w
                )));
            }
            pixels.extend_from_slice(&image.data);
            ids.extend(pad_ids(text, cfg.max_len, cfg.vocab)?);
            labels.push(y);
        }
        let b = labels.len();
        Ok(Self {
            images: Tensor::new(vec![b, cfg.image_h, cfg.image_w], pixels)?,
            ids,
            labels,
        })
    }

    /// Batch of labeled news; unlabeled items are an error.
    pub fn from_news(items: &[&RawNews], cfg: &BmrConfig) -> Result<Self> {
        let mut triples = Vec::with_capacity(items.len());
        for n in items {
            let y = n.label.ok_or_else(|| BmrError::Data("news item has no label".into()))?;
            triples.push((&n.image, n.text.as_slice(), f64::from(y)));
        }
        Self::from_pairs(triples, cfg)
    }
}

/// Every score and reweighed token of one forward pass. Absent views are
/// `None`.
#[derive(Clone, Debug)]
pub struct ViewOutputs {
    pub s_ip: Option<Var>,
    pub s_is: Option<Var>,
    pub s_t: Option<Var>,
    pub s_m: Option<Var>,
    pub w_ip: Option<Var>,
    pub w_is: Option<Var>,
    pub w_t: Option<Var>,
    pub w_m: Option<Var>,
    pub w_x: Option<Var>,
    /// Bootstrapped sequence `[B, tokens, d]`.
    pub e_f: Var,
    pub y_hat: Var,
    /// Hidden layer of the final classifier, `[B, d]`.
    pub final_hidden: Var,
    /// Hidden layer of each single-view predictor, in `View` order.
    pub view_hidden: Vec<(View, Var)>,
}

impl ViewOutputs {
    pub fn score(&self, v: View) -> Option<Var> {
        match v {
            View::Ip => self.s_ip,
            View::Is => self.s_is,
            View::T => self.s_t,
            View::M => self.s_m,
        }
    }

    /// Tokens that entered bootstrapping, in order.
    pub fn boot_tokens(&self) -> Vec<Var> {
        [self.w_is, self.w_ip, self.w_m, self.w_x, self.w_t]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Loss terms of the main objective.
#[derive(Clone, Copy, Debug)]
pub struct MainLoss {
    pub total: Var,
    pub final_: Var,
    pub coarse: Option<Var>,
}

/// Module handles. Weights live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BmrNet {
    pub cfg: BmrConfig,
    pub pattern: Option<PatternEncoder>,
    pub semantics: Option<SemanticsEncoder>,
    pub text: Option<TextEncoder>,
    pub refine_is: Option<Refiner>,
    pub refine_t: Option<Refiner>,
    pub fusion: Option<ImmoeLayer>,
    /// Single-view predictors, keyed by view.
    pub predictors: Vec<(View, Mlp)>,
    /// Reweighing functions `F`, keyed by view.
    pub reweighers: Vec<(View, Mlp)>,
    pub e_x: Option<ParamId>,
    pub bootstrap: ImmoeLayer,
    pub classifier: Mlp,
    fusion_pe: Tensor,
    boot_pe: Tensor,
}

fn lookup<T>(table: &[(View, T)], v: View) -> Option<&T> {
    table.iter().find(|(k, _)| *k == v).map(|(_, m)| m)
}

fn first_token(sess: &mut Session, x: Var) -> Result<Var> {
    let s = sess.tape.value(x).shape().to_vec();
    let t = sess.tape.narrow(x, 1, 0, 1)?;
    Ok(sess.tape.reshape(t, &[s[0], s[2]])?)
}

/// `[B, 1] -> [B]`.
fn squeeze(sess: &mut Session, x: Var) -> Result<Var> {
    let b = sess.tape.value(x).shape()[0];
    Ok(sess.tape.reshape(x, &[b])?)
}

impl BmrNet {
    /// Registers every parameter the configuration needs in `store`.
    pub fn new(cfg: &BmrConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let n = cfg.n_experts;
        let use_is = cfg.has(View::Is) || cfg.has(View::M);
        let use_t = cfg.has(View::T) || cfg.has(View::M);
        let refine_tasks = if cfg.has(View::M) { 2 } else { 1 };
        let refiner = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| match cfg.refine_mode {
            RefineMode::Immoe => Refiner::Mixture(ImmoeLayer::new(
                store,
                rng,
                name,
                d,
                n,
                refine_tasks,
                cfg.gate_mode,
                cfg.gate_input,
            )),
            RefineMode::SeparateBlocks => Refiner::Blocks(
                (0..refine_tasks)
                    .map(|k| ExpertBlock::new(store, rng, &format!("{name}.block{k}"), d))
                    .collect(),
            ),
        };

        let pattern = cfg.has(View::Ip).then(|| PatternEncoder::new(store, rng, cfg));
        let semantics = use_is.then(|| SemanticsEncoder::new(store, rng, cfg));
        let text = use_t.then(|| TextEncoder::new(store, rng, cfg));
        let refine_is = use_is.then(|| refiner(store, rng, "refine_is"));
        let refine_t = use_t.then(|| refiner(store, rng, "refine_t"));
        let fusion = cfg
            .has(View::M)
            .then(|| ImmoeLayer::new(store, rng, "fusion", d, n, 1, cfg.gate_mode, cfg.gate_input));

        let mut predictors = Vec::new();
        let mut reweighers = Vec::new();
        for v in View::ALL.into_iter().filter(|v| cfg.has(*v)) {
            let name = v.name().to_ascii_lowercase();
            predictors.push((v, Mlp::new(store, rng, &format!("predict_{name}"), (d, d, 1), true)));
        }
        if cfg.reweigh_mode == ReweighMode::Learned {
            for v in View::ALL.into_iter().filter(|v| cfg.has(*v)) {
                if cfg.sm_reweighs_multiview && v != View::M {
                    continue;
                }
                let name = v.name().to_ascii_lowercase();
                reweighers.push((
                    v,
                    Mlp::new(store, rng, &format!("reweigh_{name}"), (1, cfg.f_hidden, 1), false),
                ));
            }
        }
        let e_x = cfg.has(View::M).then(|| {
            let normal = Normal::new(0.0, 0.02).expect("valid normal");
            let data = (0..d).map(|_| normal.sample(rng)).collect();
            store.add("e_x", Tensor::new(vec![d], data).expect("d values"))
        });

        let n_boot = Self::boot_token_count(cfg);
        let bootstrap = ImmoeLayer::new(store, rng, "bootstrap", d, n, 1, cfg.gate_mode, cfg.gate_input);
        let classifier = Mlp::new(store, rng, "classifier", (d, d, 1), true);
        let (gh, gw) = cfg.grid();
        Ok(Self {
            cfg: cfg.clone(),
            pattern,
            semantics,
            text,
            refine_is,
            refine_t,
            fusion,
            predictors,
            reweighers,
            e_x,
            bootstrap,
            classifier,
            fusion_pe: sinusoidal(gh * gw + cfg.max_len, d),
            boot_pe: sinusoidal(n_boot, d),
        })
    }

    /// `[w_is, w_ip, w_m, w_x, w_t]` restricted to the enabled views.
    pub fn boot_token_count(cfg: &BmrConfig) -> usize {
        let m = if cfg.has(View::M) { 2 } else { 0 };
        cfg.has(View::Is) as usize + cfg.has(View::Ip) as usize + cfg.has(View::T) as usize + m
    }

    /// Re-imposes parameter constraints; call after every optimizer step.
    pub fn after_step(&self, store: &mut ParamStore) {
        if let Some(p) = &self.pattern {
            p.bayar.project(store);
        }
    }

    pub fn predictor(&self, v: View) -> Option<&Mlp> {
        lookup(&self.predictors, v)
    }

    pub fn reweigher(&self, v: View) -> Option<&Mlp> {
        lookup(&self.reweighers, v)
    }

    /// `sigmoid(MLP(e))` plus the predictor's hidden layer.
    fn score(&self, sess: &mut Session, v: View, e: Var) -> Result<(Var, Var)> {
        let mlp = self.predictor(v).expect("predictor exists for every enabled view");
        let out = mlp.forward_full(sess, e)?;
        let logits = squeeze(sess, out.out)?;
        Ok((sess.tape.sigmoid(logits), out.hidden))
    }

    /// Multiplicative weight `[B]` derived from score `s` with the
    /// reweighing function of view `f_view`.
    fn weight(&self, sess: &mut Session, f_view: View, s: Var) -> Result<Option<Var>> {
        let s = if self.cfg.stop_grad_reweigh {
            sess.tape.stop_grad(s)
        } else {
            s
        };
        match self.cfg.reweigh_mode {
            ReweighMode::Off => Ok(None),
            ReweighMode::Confidence => {
                let c = sess.tape.add_scalar(s, -0.5);
                let c = sess.tape.abs(c);
                Ok(Some(sess.tape.scale(c, 2.0)))
            }
            ReweighMode::Learned => {
                let f = self.reweigher(f_view).expect("reweigher exists in learned mode");
                let b = sess.tape.value(s).shape()[0];
                let col = sess.tape.reshape(s, &[b, 1])?;
                let out = f.forward(sess, col)?;
                let out = squeeze(sess, out)?;
                Ok(Some(sess.tape.sigmoid(out)))
            }
        }
    }

    fn reweigh(&self, sess: &mut Session, f_view: View, s: Var, e: Var) -> Result<Var> {
        match self.weight(sess, f_view, s)? {
            None => Ok(e),
            Some(w) => Ok(sess.tape.scale_rows(e, w)?),
        }
    }

    /// Refined sequences of one branch: `(prediction, fusion)`.
    fn refine(&self, sess: &mut Session, refiner: &Refiner, x: Var) -> Result<(Var, Option<Var>)> {
        let outs = refiner.forward(sess, x)?;
        Ok((outs[0], outs.get(1).copied()))
    }

    /// Cross-modal consistency score `[B]` only, touching just the
    /// modules on its path.
    pub fn consistency_score(&self, sess: &mut Session, batch: &Batch) -> Result<Var> {
        let (Some(sem), Some(txt), Some(fusion)) = (&self.semantics, &self.text, &self.fusion) else {
            return Err(BmrError::Config(vec!["consistency score requires view M".into()]));
        };
        let r_is = sem.forward(sess, &batch.images)?;
        let r_t = txt.forward(sess, &batch.ids)?;
        let e_is1 = self.refine_task(sess, self.refine_is.as_ref().expect("IS refiner"), r_is, 1)?;
        let e_t1 = self.refine_task(sess, self.refine_t.as_ref().expect("T refiner"), r_t, 1)?;
        let e_m = fuse(sess, e_is1, e_t1, &self.fusion_pe, fusion)?;
        let tok = first_token(sess, e_m)?;
        Ok(self.score(sess, View::M, tok)?.0)
    }

    fn refine_task(&self, sess: &mut Session, refiner: &Refiner, x: Var, task: usize) -> Result<Var> {
        match refiner {
            Refiner::Mixture(layer) => layer.forward_task(sess, x, task),
            Refiner::Blocks(blocks) => blocks[task].forward(sess, x),
        }
    }

    pub fn forward(&self, sess: &mut Session, batch: &Batch) -> Result<ViewOutputs> {
        let cfg = &self.cfg;
        let b = batch.len();
        let d = cfg.d;
        let mut view_hidden = Vec::new();

        // extraction and refinement
        let images = sess.tape.constant(batch.images.clone());
        let e_ip = match &self.pattern {
            Some(p) => Some(p.forward(sess, images)?),
            None => None,
        };
        let (e_is0, e_is1) = match (&self.semantics, &self.refine_is) {
            (Some(sem), Some(r)) => {
                let x = sem.forward(sess, &batch.images)?;
                let (a, f) = self.refine(sess, r, x)?;
                (Some(a), f)
            }
            _ => (None, None),
        };
        let (e_t0, e_t1) = match (&self.text, &self.refine_t) {
            (Some(txt), Some(r)) => {
                let x = txt.forward(sess, &batch.ids)?;
                let (a, f) = self.refine(sess, r, x)?;
                (Some(a), f)
            }
            _ => (None, None),
        };

        // single-view scores; predictors read detached features when the
        // reweighing path is stopped
        let mut firsts = Vec::new();
        for (v, seq) in [(View::Ip, e_ip), (View::Is, e_is0), (View::T, e_t0)] {
            if !cfg.has(v) {
                continue;
            }
            let seq = seq.expect("sequence exists for enabled view");
            let tok = first_token(sess, seq)?;
            let input = if cfg.stop_grad_reweigh {
                sess.tape.stop_grad(tok)
            } else {
                tok
            };
            let (s, h) = self.score(sess, v, input)?;
            view_hidden.push((v, h));
            firsts.push((v, tok, s));
        }

        // fusion and consistency
        let (s_m, w_m) = match (&self.fusion, e_is1, e_t1) {
            (Some(layer), Some(a), Some(t)) => {
                let e_m = fuse(sess, a, t, &self.fusion_pe, layer)?;
                let tok = first_token(sess, e_m)?;
                let (s, h) = self.score(sess, View::M, tok)?;
                view_hidden.push((View::M, h));
                (Some(s), Some(tok))
            }
            _ => (None, None),
        };

        let mut w = [None; 3];
        let mut scores = [None; 3];
        for (v, tok, s) in firsts {
            let idx = v as usize;
            scores[idx] = Some(s);
            let f_view = if cfg.sm_reweighs_multiview { View::M } else { v };
            let s_src = if cfg.sm_reweighs_multiview {
                s_m.expect("validated: M present")
            } else {
                s
            };
            w[idx] = Some(self.reweigh(sess, f_view, s_src, tok)?);
        }
        let w_x = match (self.e_x, s_m) {
            (Some(ex), Some(sm)) => {
                let ex = sess.param(ex);
                let ex_row = sess.tape.reshape(ex, &[1, d])?;
                let weight = match self.weight(sess, View::M, sm)? {
                    Some(g) if cfg.complement_mode && cfg.reweigh_mode == ReweighMode::Learned => {
                        let neg = sess.tape.neg(g);
                        sess.tape.add_scalar(neg, 1.0)
                    }
                    Some(g) => g,
                    None => sess.tape.constant(Tensor::filled(&[b], 1.0)),
                };
                let col = sess.tape.reshape(weight, &[b, 1])?;
                Some(sess.tape.matmul(col, ex_row)?)
            }
            _ => None,
        };

        // bootstrapping
        let [w_ip, w_is, w_t] = w;
        let tokens: Vec<Var> = [w_is, w_ip, w_m, w_x, w_t].into_iter().flatten().collect();
        let mut seq = Vec::with_capacity(tokens.len());
        for t in &tokens {
            seq.push(sess.tape.reshape(*t, &[b, 1, d])?);
        }
        let x = sess.tape.concat(&seq, 1)?;
        let pe = sess.tape.constant(self.boot_pe.clone());
        let x = sess.tape.add(x, pe)?;
        let e_f = self.bootstrap.forward_task(sess, x, 0)?;
        let head = first_token(sess, e_f)?;
        let out = self.classifier.forward_full(sess, head)?;
        let logits = squeeze(sess, out.out)?;
        let y_hat = sess.tape.sigmoid(logits);

        let [s_ip, s_is, s_t] = scores;
        Ok(ViewOutputs {
            s_ip,
            s_is,
            s_t,
            s_m,
            w_ip,
            w_is,
            w_t,
            w_m,
            w_x,
            e_f,
            y_hat,
            final_hidden: out.hidden,
            view_hidden,
        })
    }

    /// `L_final + α · L_coarse`, each term a batch mean.
    pub fn main_loss(&self, sess: &mut Session, out: &ViewOutputs, labels: &[f64]) -> Result<MainLoss> {
        let final_ = bce_mean(sess, out.y_hat, labels)?;
        if !self.cfg.coarse_loss {
            return Ok(MainLoss {
                total: final_,
                final_,
                coarse: None,
            });
        }
        let views = self.cfg.coarse_views();
        let mut acc: Option<Var> = None;
        for v in &views {
            let s = out.score(*v).expect("score exists for enabled view");
            let l = bce_mean(sess, s, labels)?;
            acc = Some(match acc {
                None => l,
                Some(a) => sess.tape.add(a, l)?,
            });
        }
        let Some(sum) = acc else {
            return Ok(MainLoss {
                total: final_,
                final_,
                coarse: None,
            });
        };
        let coarse = sess.tape.scale(sum, 1.0 / views.len() as f64);
        let weighted = sess.tape.scale(coarse, self.cfg.alpha);
        let total = sess.tape.add(final_, weighted)?;
        Ok(MainLoss {
            total,
            final_,
            coarse: Some(coarse),
        })
    }

    /// `β · BCE(y′, S_m)`.
    pub fn consistency_loss(&self, sess: &mut Session, s_m: Var, targets: &[f64]) -> Result<Var> {
        let l = bce_mean(sess, s_m, targets)?;
        Ok(sess.tape.scale(l, self.cfg.beta))
    }

    /// Tabulates `sigmoid(F_view(s))` for each input score.
    pub fn reweigh_curve(&self, store: &mut ParamStore, v: View, scores: &[f64]) -> Result<Vec<f64>> {
        let f = self
            .reweigher(v)
            .ok_or_else(|| BmrError::Data(format!("no reweighing function for view {v}")))?;
        Ok(eval_scalar_mlp(store, f, scores)?
            .into_iter()
            .map(bmr_autodiff::sigmoid)
            .collect())
    }
}

/// Mean binary cross-entropy of probabilities `p[B]` against `targets`.
pub fn bce_mean(sess: &mut Session, p: Var, targets: &[f64]) -> Result<Var> {
    let b = targets.len();
    let p = sess.tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = sess.tape.log(p)?;
    let np = sess.tape.neg(p);
    let q = sess.tape.add_scalar(np, 1.0);
    let log_q = sess.tape.log(q)?;
    let y = sess.tape.constant(Tensor::new(vec![b], targets.to_vec())?);
    let ny = sess
        .tape
        .constant(Tensor::new(vec![b], targets.iter().map(|t| 1.0 - t).collect())?);
    let a = sess.tape.mul(y, log_p)?;
    let c = sess.tape.mul(ny, log_q)?;
    let s = sess.tape.add(a, c)?;
    let m = sess.tape.mean(s);
    Ok(sess.tape.neg(m))
}

/// Network plus weights.
#[derive(Clone, Debug)]
pub struct Bmr {
    pub net: BmrNet,
    pub store: ParamStore,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scores {
    pub y_hat: Vec<f64>,
    pub s_ip: Option<Vec<f64>>,
    pub s_is: Option<Vec<f64>>,
    pub s_t: Option<Vec<f64>>,
    pub s_m: Option<Vec<f64>>,
    /// Row-major `[B, d]` hidden layers: final classifier first, then each
    /// single-view predictor.
    pub hidden: Vec<(String, Vec<f64>)>,
}

impl Scores {
    pub fn stream(&self, v: View) -> Option<&Vec<f64>> {
        match v {
            View::Ip => self.s_ip.as_ref(),
            View::Is => self.s_is.as_ref(),
            View::T => self.s_t.as_ref(),
            View::M => self.s_m.as_ref(),
        }
    }

    fn extend(&mut self, other: Scores) {
        self.y_hat.extend(other.y_hat);
        for (mine, theirs) in [
            (&mut self.s_ip, other.s_ip),
            (&mut self.s_is, other.s_is),
            (&mut self.s_t, other.s_t),
            (&mut self.s_m, other.s_m),
        ] {
            if let Some(t) = theirs {
                mine.get_or_insert_with(Vec::new).extend(t);
            }
        }
        if self.hidden.is_empty() {
            self.hidden = other.hidden;
        } else {
            for ((_, mine), (_, theirs)) in self.hidden.iter_mut().zip(other.hidden) {
                mine.extend(theirs);
            }
        }
    }
}

impl Bmr {
    pub fn new(cfg: &BmrConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = BmrNet::new(cfg, &mut store, &mut rng)?;
        Ok(Self { net, store })
    }

    pub fn cfg(&self) -> &BmrConfig {
        &self.net.cfg
    }

    /// Eval-mode scores for `batch`.
    pub fn predict(&mut self, batch: &Batch) -> Result<Scores> {
        let mut sess = Session::new(&mut self.store, Mode::Eval);
        let out = self.net.forward(&mut sess, batch)?;
        let val = |v: Option<Var>| v.map(|v| sess.tape.value(v).data().to_vec());
        let mut hidden = vec![("y_hat".to_string(), sess.tape.value(out.final_hidden).data().to_vec())];
        for (v, h) in &out.view_hidden {
            hidden.push((
                format!("S_{}", v.name().to_ascii_lowercase()),
                sess.tape.value(*h).data().to_vec(),
            ));
        }
        Ok(Scores {
            y_hat: sess.tape.value(out.y_hat).data().to_vec(),
            s_ip: val(out.s_ip),
            s_is: val(out.s_is),
            s_t: val(out.s_t),
            s_m: val(out.s_m),
            hidden,
        })
    }

    /// Eval-mode scores for many news items, `chunk` at a time.
    pub fn predict_news(&mut self, news: &[RawNews], chunk: usize) -> Result<Scores> {
        let mut all = Scores::default();
        for part in news.chunks(chunk.max(1)) {
            let refs: Vec<&RawNews> = part.iter().collect();
            let batch = Batch::from_news(&refs, self.cfg())?;
            all.extend(self.predict(&batch)?);
        }
        Ok(all)
    }

    /// Eval-mode consistency scores for image/text pairs.
    pub fn predict_consistency(&mut self, batch: &Batch) -> Result<Vec<f64>> {
        let mut sess = Session::new(&mut self.store, Mode::Eval);
        let s = self.net.consistency_score(&mut sess, batch)?;
        Ok(sess.tape.value(s).data().to_vec())
    }
}
