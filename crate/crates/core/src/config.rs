use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{BmrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum View {
    /// Image pattern.
    #[serde(rename = "IP")]
    Ip,
    /// Image semantics.
    #[serde(rename = "IS")]
    Is,
    #[serde(rename = "T")]
    T,
    /// Fused multimodal view.
    #[serde(rename = "M")]
    M,
}

impl View {
    pub const ALL: [View; 4] = [View::Ip, View::Is, View::T, View::M];

    pub fn name(self) -> &'static str {
        match self {
            View::Ip => "IP",
            View::Is => "IS",
            View::T => "T",
            View::M => "M",
        }
    }

    pub fn parse(s: &str) -> Option<View> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IP" => Some(View::Ip),
            "IS" => Some(View::Is),
            "T" => Some(View::T),
            "M" => Some(View::M),
            _ => None,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a comma- or plus-separated view list such as `IP,IS,T,M`.
pub fn parse_views(s: &str) -> Result<BTreeSet<View>> {
    let views = s
        .split([',', '+'])
        .filter(|p| !p.trim().is_empty())
        .map(|p| View::parse(p).ok_or_else(|| BmrError::Config(vec![format!("unknown view `{}`", p.trim())])))
        .collect::<Result<BTreeSet<_>>>()?;
    if views.is_empty() {
        return Err(BmrError::Config(vec!["no views given".into()]));
    }
    Ok(views)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweighMode {
    /// `sigmoid(F(S)) · e` with a learned scalar map `F`.
    Learned,
    /// `2·|S − 0.5| · e`.
    Confidence,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Softmax,
    Unconstrained,
}

/// What the gate of each task reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// Softmax-weighted aggregation of tokens by their attention scores.
    Attention,
    /// `Σ_j s_j · x_j` with raw, unnormalized scores.
    LiteralSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Immoe,
    /// One plain transformer block per refined output instead of a gated mixture.
    SeparateBlocks,
}

/// Architecture and loss configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmrConfig {
    pub d: usize,
    pub n_experts: usize,
    pub views: BTreeSet<View>,
    pub reweigh_mode: ReweighMode,
    pub stop_grad_reweigh: bool,
    pub coarse_loss: bool,
    pub consistency_loss: bool,
    pub sm_reweighs_multiview: bool,
    /// Scale `e_x` by `1 − sigmoid(F_m(S_m))` instead of `sigmoid(F_m(S_m))`.
    pub complement_mode: bool,
    pub gate_mode: GateMode,
    pub gate_input: GateInput,
    pub refine_mode: RefineMode,
    pub alpha: f64,
    pub beta: f64,
    /// Decision threshold; derived from the training labels when absent.
    pub threshold: Option<f64>,
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub frozen_text: bool,
    pub frozen_semantics: bool,
    /// Hidden width of every reweighing function `F`.
    pub f_hidden: usize,
}

impl Default for BmrConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_experts: 3,
            views: View::ALL.into_iter().collect(),
            reweigh_mode: ReweighMode::Learned,
            stop_grad_reweigh: true,
            coarse_loss: true,
            consistency_loss: true,
            sm_reweighs_multiview: false,
            complement_mode: false,
            gate_mode: GateMode::Unconstrained,
            gate_input: GateInput::Attention,
            refine_mode: RefineMode::Immoe,
            alpha: 1.0,
            beta: 4.0,
            threshold: None,
            image_h: 16,
            image_w: 16,
            patch: 4,
            vocab: 64,
            max_len: 16,
            frozen_text: true,
            frozen_semantics: true,
            f_hidden: 16,
        }
    }
}

impl BmrConfig {
    /// Full-scale sizes: 224×224 images in 16-pixel patches, 197 text
    /// tokens, hidden size 768.
    pub fn full_scale() -> Self {
        Self {
            d: 768,
            image_h: 224,
            image_w: 224,
            patch: 16,
            vocab: 5000,
            max_len: 197,
            ..Self::default()
        }
    }

    /// Smallest useful network, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            n_experts: 2,
            image_h: 4,
            image_w: 4,
            patch: 2,
            vocab: 8,
            max_len: 2,
            f_hidden: 4,
            ..Self::default()
        }
    }

    pub fn has(&self, v: View) -> bool {
        self.views.contains(&v)
    }

    /// Views with a coarse single-view predictor.
    pub fn coarse_views(&self) -> Vec<View> {
        [View::Ip, View::Is, View::T]
            .into_iter()
            .filter(|v| self.has(*v))
            .collect()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch.max(1), self.image_w / self.patch.max(1))
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.d == 0 {
            v.push("d must be positive".into());
        }
        if self.n_experts == 0 {
            v.push("n_experts must be positive".into());
        }
        if self.views.is_empty() {
            v.push("views must not be empty".into());
        }
        if self.has(View::M) && !(self.has(View::Is) && self.has(View::T)) {
            v.push("view M requires both IS and T".into());
        }
        if self.sm_reweighs_multiview && !self.has(View::M) {
            v.push("sm_reweighs_multiview requires view M".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            v.push(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            v.push(format!("beta must be a finite value >= 0, got {}", self.beta));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                v.push(format!("threshold must lie in (0, 1), got {t}"));
            }
        }
        if self.patch == 0 {
            v.push("patch must be positive".into());
        } else if !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            v.push(format!(
                "patch {} must divide image size {}x{}",
                self.patch, self.image_h, self.image_w
            ));
        }
        if self.image_h < 3 || self.image_w < 3 {
            v.push(format!(
                "image must be at least 3x3 for the constrained filter, got {}x{}",
                self.image_h, self.image_w
            ));
        }
        if self.vocab < 5 {
            v.push(format!("vocab must hold the 5 reserved ids, got {}", self.vocab));
        }
        if self.max_len == 0 {
            v.push("max_len must be positive".into());
        }
        if self.f_hidden == 0 {
            v.push("f_hidden must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(BmrError::Config(v))
        }
    }
}
