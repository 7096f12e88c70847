//! Planted-signal corpora for desk-scale experiments.
//!
//! Every image is a two-level layout: the top half is one level and the
//! bottom half the other. The item's topic flips one column and one row in
//! every `period × period` tile, so each patch of that size carries it.
//! Fake and real items use exactly inverted levels, so a high-pass filter
//! followed by squaring sees the same energy for both classes; only the
//! planted noise reaches the pattern view.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::View;
use crate::encoders::{Grid, RawNews, FIRST_WORD_ID};
use crate::error::{BmrError, Result};

/// Which views carry label information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    /// Pixel noise on fake images only.
    pub pattern: bool,
    /// Bright half on top for fake items, bottom for real ones.
    pub semantics: bool,
    /// Class-specific word pools.
    pub text: bool,
    /// Real items share a topic between image and text; fake items do not.
    pub consistency: bool,
}

impl SignalSpec {
    pub fn all() -> Self {
        Self {
            pattern: true,
            semantics: true,
            text: true,
            consistency: true,
        }
    }

    pub fn none() -> Self {
        Self {
            pattern: false,
            semantics: false,
            text: false,
            consistency: false,
        }
    }

    /// Signal in a single view.
    pub fn only(v: View) -> Self {
        let mut s = Self::none();
        match v {
            View::Ip => s.pattern = true,
            View::Is => s.semantics = true,
            View::T => s.text = true,
            View::M => s.consistency = true,
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub signals: SignalSpec,
    pub image_h: usize,
    pub image_w: usize,
    pub vocab: usize,
    pub text_len: usize,
    /// At most `period²`.
    pub topics: usize,
    /// Tile edge of the topic code.
    pub period: usize,
    /// Words in each class pool.
    pub class_words: usize,
    /// Class words per text.
    pub class_hits: usize,
    /// Half-width of the uniform noise planted in fake images.
    pub noise: f64,
    /// Half-width of the per-image brightness offset.
    pub offset: f64,
    pub test_frac: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            signals: SignalSpec::all(),
            image_h: 16,
            image_w: 16,
            vocab: 64,
            text_len: 8,
            topics: 16,
            period: 4,
            class_words: 6,
            class_hits: 2,
            noise: 0.05,
            offset: 0.1,
            test_frac: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<RawNews>,
    pub test: Vec<RawNews>,
}

impl SynthSpec {
    fn first_filler(&self) -> usize {
        FIRST_WORD_ID as usize + self.topics + 2 * self.class_words
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n < 4 {
            v.push(format!("n must be at least 4, got {}", self.n));
        }
        if self.image_h < 3 || self.image_w < 3 {
            v.push("image sides must be at least 3".into());
        }
        if self.period == 0 || self.period > self.image_h.min(self.image_w) {
            v.push(format!(
                "period must lie in 1..=min(image_h, image_w), got {}",
                self.period
            ));
        } else if self.topics == 0 || self.topics > self.period * self.period {
            v.push(format!(
                "topics must lie in 1..={}, got {}",
                self.period * self.period,
                self.topics
            ));
        }
        if self.class_hits + 1 > self.text_len {
            v.push("text_len must fit the topic word and the class words".into());
        }
        if self.class_words == 0 {
            v.push("class_words must be positive".into());
        }
        if self.first_filler() >= self.vocab {
            v.push(format!("vocab must exceed {}", self.first_filler()));
        }
        if !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            v.push("test_frac must lie in (0, 1)".into());
        }
        if !(self.noise >= 0.0 && self.offset >= 0.0 && self.noise + self.offset <= 0.25) {
            v.push("noise and offset must be non-negative with noise + offset <= 0.25".into());
        }
        v
    }
}

fn image(spec: &SynthSpec, rng: &mut ChaCha8Rng, topic: usize, bright_top: bool, noisy: bool) -> Grid {
    let (h, w) = (spec.image_h, spec.image_w);
    let offset = if spec.offset > 0.0 {
        rng.random_range(-spec.offset..spec.offset)
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let top = r < h / 2;
            let mark = c % spec.period == topic % spec.period || r % spec.period == topic / spec.period;
            let bright = (top ^ mark) == bright_top;
            let mut v = offset + if bright { 0.75 } else { 0.25 };
            if noisy {
                v += rng.random_range(-spec.noise..=spec.noise);
            }
            data.push(v);
        }
    }
    Grid {
        height: h,
        width: w,
        data,
    }
}

fn text(spec: &SynthSpec, rng: &mut ChaCha8Rng, topic: usize, fake: bool) -> Vec<u32> {
    let topic_base = FIRST_WORD_ID as usize;
    let fake_base = topic_base + spec.topics;
    let real_base = fake_base + spec.class_words;
    let filler = spec.first_filler();
    let mut words = vec![topic_base + topic];
    for _ in 0..spec.class_hits {
        let pool = match (spec.signals.text, fake) {
            (true, true) => fake_base,
            (true, false) => real_base,
            (false, _) => {
                if rng.random_bool(0.5) {
                    fake_base
                } else {
                    real_base
                }
            }
        };
        words.push(pool + rng.random_range(0..spec.class_words));
    }
    while words.len() < spec.text_len {
        words.push(rng.random_range(filler..spec.vocab));
    }
    words.shuffle(rng);
    words.into_iter().map(|w| w as u32).collect()
}

fn item(spec: &SynthSpec, rng: &mut ChaCha8Rng, fake: bool) -> RawNews {
    let s = spec.signals;
    let image_topic = rng.random_range(0..spec.topics);
    let text_topic = if s.consistency && spec.topics > 1 {
        if fake {
            (image_topic + rng.random_range(1..spec.topics)) % spec.topics
        } else {
            image_topic
        }
    } else {
        rng.random_range(0..spec.topics)
    };
    let bright_top = if s.semantics { fake } else { rng.random_bool(0.5) };
    RawNews {
        image: image(spec, rng, image_topic, bright_top, s.pattern && fake),
        text: text(spec, rng, text_topic, fake),
        label: Some(u8::from(fake)),
    }
}

/// Balanced labelled corpus split into train and test. Both splits are
/// balanced to within one item.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(BmrError::Config(v));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_fake = spec.n / 2;
    let n_real = spec.n - n_fake;
    let fakes: Vec<RawNews> = (0..n_fake).map(|_| item(spec, &mut rng, true)).collect();
    let reals: Vec<RawNews> = (0..n_real).map(|_| item(spec, &mut rng, false)).collect();

    let n_test = ((spec.n as f64 * spec.test_frac).round() as usize).clamp(2, spec.n - 2);
    let test_fake = n_test / 2;
    let test_real = n_test - test_fake;
    let mut test: Vec<RawNews> = fakes[..test_fake].iter().chain(&reals[..test_real]).cloned().collect();
    let mut train: Vec<RawNews> = fakes[test_fake..].iter().chain(&reals[test_real..]).cloned().collect();
    test.shuffle(&mut rng);
    train.shuffle(&mut rng);
    Ok(Corpus { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_count(items: &[RawNews]) -> usize {
        items.iter().filter(|n| n.label == Some(1)).count()
    }

    #[test]
    fn reproducible_and_balanced() {
        let spec = SynthSpec {
            n: 100,
            ..SynthSpec::default()
        };
        let a = synth_corpus(&spec, 3).unwrap();
        assert_eq!(a, synth_corpus(&spec, 3).unwrap());
        assert_ne!(a, synth_corpus(&spec, 4).unwrap());
        assert_eq!(a.train.len() + a.test.len(), 100);
        assert_eq!(fake_count(&a.train) + fake_count(&a.test), 50);
        assert_eq!(fake_count(&a.test) * 2, a.test.len());
    }

    #[test]
    fn inverted_layouts_without_noise() {
        let spec = SynthSpec {
            n: 4,
            offset: 0.0,
            signals: SignalSpec::only(View::Is),
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = image(&spec, &mut rng, 2, true, false);
        let b = image(&spec, &mut rng, 2, false, false);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x + y - 1.0).abs() < 1e-15);
        }
        // topic 2 marks column 2 and row 0 of every 4×4 tile
        assert_eq!(a.at(1, 0), 0.75);
        assert_eq!(a.at(0, 0), 0.25);
        assert_eq!(a.at(1, 2), 0.25);
        assert_eq!(a.at(5, 6), 0.25);
        assert_eq!(a.at(8, 0), 0.75);
        assert_eq!(a.at(9, 0), 0.25);
    }

    #[test]
    fn consistency_signal_sets_topics() {
        let spec = SynthSpec {
            n: 200,
            offset: 0.0,
            signals: SignalSpec::only(View::M),
            ..SynthSpec::default()
        };
        let c = synth_corpus(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in c.train.iter().chain(&c.test) {
            // brute force over every topic and orientation
            let matches: Vec<usize> = (0..spec.topics)
                .filter(|&k| {
                    [true, false]
                        .iter()
                        .any(|&o| image(&spec, &mut rng, k, o, false) == n.image)
                })
                .collect();
            assert_eq!(matches.len(), 1);
            let topic_txt = n
                .text
                .iter()
                .map(|&w| w as usize)
                .find(|&w| w < FIRST_WORD_ID as usize + spec.topics);
            let topic_txt = topic_txt.unwrap() - FIRST_WORD_ID as usize;
            assert_eq!(matches[0] == topic_txt, n.label == Some(0));
        }
    }

    #[test]
    fn text_signal_switch() {
        let mut spec = SynthSpec {
            n: 400,
            ..SynthSpec::default()
        };
        spec.signals = SignalSpec::only(View::T);
        let fake_base = FIRST_WORD_ID as usize + spec.topics;
        let is_fake_word = |w: u32| (fake_base..fake_base + spec.class_words).contains(&(w as usize));
        let c = synth_corpus(&spec, 2).unwrap();
        for n in &c.train {
            let hits = n.text.iter().filter(|&&w| is_fake_word(w)).count();
            assert_eq!(hits == spec.class_hits, n.label == Some(1));
        }
        spec.signals = SignalSpec::none();
        let c = synth_corpus(&spec, 2).unwrap();
        let real_with_fake_words = c
            .train
            .iter()
            .filter(|n| n.label == Some(0) && n.text.iter().any(|&w| is_fake_word(w)));
        assert!(real_with_fake_words.count() > 50);
    }

    #[test]
    fn pattern_noise_only_on_fakes() {
        let spec = SynthSpec {
            n: 40,
            offset: 0.0,
            signals: SignalSpec::only(View::Ip),
            ..SynthSpec::default()
        };
        let c = synth_corpus(&spec, 5).unwrap();
        for n in &c.train {
            let two_level = n.image.data.iter().all(|&v| v == 0.25 || v == 0.75);
            assert_eq!(two_level, n.label == Some(0));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = SynthSpec {
            vocab: 10,
            topics: 40,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_corpus(&spec, 0), Err(BmrError::Config(v)) if v.len() == 2));
    }
}
