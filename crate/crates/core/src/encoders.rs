//! Stub feature extractors for the three raw views.
//!
//! Each encoder turns a batch of cleaned news into a `[batch, tokens, d]`
//! token sequence. They stand in for large pretrained backbones and can be
//! swapped for another implementation with the same output contract.

use bmr_autodiff::{ParamId, ParamStore, Session, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::BmrConfig;
use crate::error::{BmrError, Result};
use crate::nn::{sinusoidal, Linear, Mlp};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// Reserved ids spelling "No text provided."
pub const PLACEHOLDER_IDS: [u32; 3] = [2, 3, 4];
pub const PLACEHOLDER_WORDS: [&str; 3] = ["No", "text", "provided."];
pub const FIRST_WORD_ID: u32 = 5;

/// Single-channel image, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(BmrError::Data(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawNews {
    pub image: Grid,
    pub text: Vec<u32>,
    /// 1 = fake, 0 = real; `None` for unlabeled records.
    pub label: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanRules {
    pub min_side: usize,
    pub min_words: usize,
    /// Size of the zero grid that replaces a rejected image.
    pub canvas_h: usize,
    pub canvas_w: usize,
}

impl CleanRules {
    pub fn new(canvas_h: usize, canvas_w: usize) -> Self {
        Self {
            min_side: 64,
            min_words: 5,
            canvas_h,
            canvas_w,
        }
    }
}

/// Replaces undersized images with a zero canvas and short texts with the
/// placeholder sequence.
pub fn clean(news: &RawNews, rules: &CleanRules) -> RawNews {
    let image = if news.image.height < rules.min_side || news.image.width < rules.min_side {
        Grid::zeros(rules.canvas_h, rules.canvas_w)
    } else {
        news.image.clone()
    };
    let text = if news.text.len() < rules.min_words {
        PLACEHOLDER_IDS.to_vec()
    } else {
        news.text.clone()
    };
    RawNews {
        image,
        text,
        label: news.label,
    }
}

/// Truncates or right-pads `ids` to `max_len`.
pub fn pad_ids(ids: &[u32], max_len: usize, vocab: usize) -> Result<Vec<usize>> {
    if let Some(bad) = ids.iter().take(max_len).find(|&&id| id as usize >= vocab) {
        return Err(BmrError::Data(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let mut out: Vec<usize> = ids.iter().take(max_len).map(|&id| id as usize).collect();
    out.resize(max_len, PAD_ID as usize);
    Ok(out)
}

/// 3×3 filter whose centre is pinned at −1 and whose other eight weights
/// sum to +1, so a constant image maps to zero.
#[derive(Clone, Debug)]
pub struct BayarFilter {
    pub kernel: ParamId,
}

const CENTER: usize = 4;

/// Restores the constraint in place.
pub fn bayar_project(k: &mut [f64]) {
    k[CENTER] = 0.0;
    let s: f64 = k.iter().sum();
    if s.abs() < 1e-12 || !s.is_finite() {
        k.iter_mut().for_each(|w| *w = 1.0 / 8.0);
    } else {
        k.iter_mut().for_each(|w| *w /= s);
    }
    k[CENTER] = -1.0;
}

impl BayarFilter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str) -> Self {
        let mut k: Vec<f64> = (0..9).map(|_| rng.random_range(0.5..1.5)).collect();
        bayar_project(&mut k);
        let kernel = store.add(format!("{name}.kernel"), Tensor::new(vec![3, 3], k).expect("3x3"));
        Self { kernel }
    }

    pub fn project(&self, store: &mut ParamStore) {
        bayar_project(store.value_mut(self.kernel).data_mut());
    }

    /// `images[B, H, W] -> [B, H-2, W-2]`, valid cross-correlation.
    pub fn forward(&self, sess: &mut Session, images: Var) -> Result<Var> {
        let k = sess.param(self.kernel);
        Ok(sess.tape.conv2d_valid(images, k)?)
    }
}

/// Pooling matrix mapping an `h×w` map onto a `gh×gw` grid of cell means,
/// with cells as even as the sizes allow.
pub fn adaptive_pool_matrix(h: usize, w: usize, gh: usize, gw: usize) -> Tensor {
    let mut m = vec![0.0; h * w * gh * gw];
    let span = |i: usize, n: usize, g: usize| (i * n / g, ((i + 1) * n).div_ceil(g));
    for gi in 0..gh {
        let (r0, r1) = span(gi, h, gh);
        for gj in 0..gw {
            let (c0, c1) = span(gj, w, gw);
            let cell = gi * gw + gj;
            let inv = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    m[(r * w + c) * gh * gw + cell] = inv;
                }
            }
        }
    }
    Tensor::new(vec![h * w, gh * gw], m).expect("pool shape")
}

/// Image-pattern branch: constrained filter, squared residual energy pooled
/// per cell, then an MLP head. Emits a single token.
#[derive(Clone, Debug)]
pub struct PatternEncoder {
    pub bayar: BayarFilter,
    pub head: Mlp,
    pool: Tensor,
    conv_h: usize,
    conv_w: usize,
}

impl PatternEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &BmrConfig) -> Self {
        let (gh, gw) = cfg.grid();
        let (conv_h, conv_w) = (cfg.image_h - 2, cfg.image_w - 2);
        let (ph, pw) = (gh.min(conv_h), gw.min(conv_w));
        Self {
            bayar: BayarFilter::new(store, rng, "pattern.bayar"),
            head: Mlp::new(store, rng, "pattern.head", (ph * pw, cfg.d, cfg.d), true),
            pool: adaptive_pool_matrix(conv_h, conv_w, ph, pw),
            conv_h,
            conv_w,
        }
    }

    /// `images[B, H, W] -> [B, 1, d]`.
    pub fn forward(&self, sess: &mut Session, images: Var) -> Result<Var> {
        let b = sess.tape.value(images).shape()[0];
        let r = self.bayar.forward(sess, images)?;
        let energy = sess.tape.square(r);
        let flat = sess.tape.reshape(energy, &[b, self.conv_h * self.conv_w])?;
        let pool = sess.tape.constant(self.pool.clone());
        let pooled = sess.tape.matmul(flat, pool)?;
        let token = self.head.forward(sess, pooled)?;
        let d = sess.tape.value(token).shape()[1];
        Ok(sess.tape.reshape(token, &[b, 1, d])?)
    }
}

/// Splits `[B, H, W]` images into `[B, patches, patch²]` in row-major
/// patch order.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let &[b, h, w] = images.shape() else {
        return Err(BmrError::Data(format!(
            "expected [B, H, W] images, got {:?}",
            images.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(BmrError::Data(format!("patch {patch} does not divide image {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pp = patch * patch;
    let src = images.data();
    let mut out = vec![0.0; b * gh * gw * pp];
    for bi in 0..b {
        for pi in 0..gh {
            for pj in 0..gw {
                let base = ((bi * gh + pi) * gw + pj) * pp;
                for r in 0..patch {
                    let row = bi * h * w + (pi * patch + r) * w + pj * patch;
                    out[base + r * patch..base + (r + 1) * patch].copy_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, gh * gw, pp], out)?)
}

/// Image-semantics branch: patch embedding plus position encoding.
#[derive(Clone, Debug)]
pub struct SemanticsEncoder {
    pub proj: Linear,
    pe: Tensor,
    patch: usize,
}

impl SemanticsEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &BmrConfig) -> Self {
        let (gh, gw) = cfg.grid();
        Self {
            proj: Linear::frozen(
                store,
                rng,
                "semantics.proj",
                cfg.patch * cfg.patch,
                cfg.d,
                cfg.frozen_semantics,
            ),
            pe: sinusoidal(gh * gw, cfg.d),
            patch: cfg.patch,
        }
    }

    /// `images[B, H, W] -> [B, patches, d]`.
    pub fn forward(&self, sess: &mut Session, images: &Tensor) -> Result<Var> {
        let patches = sess.tape.constant(patchify(images, self.patch)?);
        let tokens = self.proj.forward(sess, patches)?;
        let pe = sess.tape.constant(self.pe.clone());
        Ok(sess.tape.add(tokens, pe)?)
    }
}

/// Text branch: embedding lookup plus position encoding.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pe: Tensor,
    max_len: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &BmrConfig) -> Self {
        let table = store.add("text.embedding", crate::nn::uniform_init(rng, &[cfg.vocab, cfg.d], 1));
        store.set_frozen(table, cfg.frozen_text);
        Self {
            table,
            pe: sinusoidal(cfg.max_len, cfg.d),
            max_len: cfg.max_len,
        }
    }

    /// `ids` holds `B · max_len` padded ids; output `[B, max_len, d]`.
    pub fn forward(&self, sess: &mut Session, ids: &[usize]) -> Result<Var> {
        let table = sess.param(self.table);
        let d = sess.tape.value(table).shape()[1];
        let b = ids.len() / self.max_len;
        let flat = sess.tape.embedding(table, ids)?;
        let tokens = sess.tape.reshape(flat, &[b, self.max_len, d])?;
        let pe = sess.tape.constant(self.pe.clone());
        Ok(sess.tape.add(tokens, pe)?)
    }
}
