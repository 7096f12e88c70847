//! CSV analysis exports: reweighing curves, score histograms and cosine
//! similarity heatmaps.

use std::fmt::Write as _;

use crate::config::View;
use crate::encoders::RawNews;
use crate::error::{BmrError, Result};
use crate::model::Bmr;

pub const HISTOGRAM_BINS: usize = 10;

/// `view,s,weight` rows: `sigmoid(F_view(s))` on an even grid over
/// `[0, 1]` for every learned reweighing function.
pub fn reweigh_curves_csv(model: &Bmr, resolution: usize) -> Result<String> {
    if resolution < 2 {
        return Err(BmrError::Data(format!(
            "resolution must be at least 2, got {resolution}"
        )));
    }
    if model.net.reweighers.is_empty() {
        return Err(BmrError::Data("model has no learned reweighing functions".into()));
    }
    let grid: Vec<f64> = (0..resolution).map(|i| i as f64 / (resolution - 1) as f64).collect();
    let mut store = model.store.clone();
    let mut out = String::from("view,s,weight\n");
    for (v, _) in &model.net.reweighers {
        let w = model.net.reweigh_curve(&mut store, *v, &grid)?;
        for (s, w) in grid.iter().zip(w) {
            writeln!(out, "{v},{s:.2},{w:.12}").expect("writing to a String");
        }
    }
    Ok(out)
}

/// Bin of `s`: `[0, 0.1]`, then `(k/10, (k+1)/10]`.
pub fn histogram_bin(s: f64) -> usize {
    (1..HISTOGRAM_BINS)
        .find(|&k| s <= k as f64 / 10.0)
        .map_or(HISTOGRAM_BINS - 1, |k| k - 1)
}

/// Percentage of items per bin.
pub fn histogram(scores: &[f64]) -> [f64; HISTOGRAM_BINS] {
    let mut h = [0.0; HISTOGRAM_BINS];
    for &s in scores {
        h[histogram_bin(s)] += 1.0;
    }
    let n = scores.len().max(1) as f64;
    h.map(|c| 100.0 * c / n)
}

/// One row per (class, score stream) with the percentage mass in each bin.
/// Classes absent from `items` get no rows.
pub fn score_histogram_csv(model: &mut Bmr, items: &[RawNews], chunk: usize) -> Result<String> {
    let scores = model.predict_news(items, chunk)?;
    let mut out = String::from("label,stream");
    for k in 0..HISTOGRAM_BINS {
        let open = if k == 0 { '[' } else { '(' };
        write!(out, ",{open}{:.1}-{:.1}]", k as f64 / 10.0, (k + 1) as f64 / 10.0).expect("writing to a String");
    }
    out.push('\n');
    let mut streams: Vec<(&str, &Vec<f64>)> = vec![("y_hat", &scores.y_hat)];
    for (name, v) in [
        ("S_m", View::M),
        ("S_is", View::Is),
        ("S_t", View::T),
        ("S_ip", View::Ip),
    ] {
        if let Some(s) = scores.stream(v) {
            streams.push((name, s));
        }
    }
    for (label, class) in [("fake", 1u8), ("real", 0u8)] {
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].label == Some(class)).collect();
        if idx.is_empty() {
            continue;
        }
        for (name, s) in &streams {
            let picked: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            write!(out, "{label},{name}").expect("writing to a String");
            for p in histogram(&picked) {
                write!(out, ",{p:.4}").expect("writing to a String");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// First `per_class` real items followed by the first `per_class` fake ones.
pub fn heatmap_samples(items: &[RawNews], per_class: usize) -> Result<Vec<RawNews>> {
    let mut out = Vec::with_capacity(2 * per_class);
    for class in [0u8, 1u8] {
        let picked: Vec<RawNews> = items
            .iter()
            .filter(|n| n.label == Some(class))
            .take(per_class)
            .cloned()
            .collect();
        if picked.len() < per_class {
            return Err(BmrError::Data(format!(
                "heatmap needs {per_class} items of class {class}, found {}",
                picked.len()
            )));
        }
        out.extend(picked);
    }
    Ok(out)
}

/// Pairwise cosine similarity of the rows of a row-major `[n, d]` matrix.
/// A zero row is similar only to itself.
pub fn cosine_matrix(rows: &[f64], n: usize) -> Vec<Vec<f64>> {
    let d = rows.len().checked_div(n).unwrap_or(0);
    let row = |i: usize| &rows[i * d..(i + 1) * d];
    let norms: Vec<f64> = (0..n)
        .map(|i| row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        return 1.0;
                    }
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        return 0.0;
                    }
                    let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
                    dot / (norms[i] * norms[j])
                })
                .collect()
        })
        .collect()
}

/// Cosine matrices of the final classifier's hidden layer and of each
/// single-view predictor's hidden layer. Columns:
/// `representation,row,c0,…,c{n-1}`.
pub fn cosine_heatmap_csv(model: &mut Bmr, samples: &[RawNews]) -> Result<String> {
    let n = samples.len();
    if n < 2 {
        return Err(BmrError::Data("heatmap needs at least two samples".into()));
    }
    let scores = model.predict_news(samples, n)?;
    let mut out = String::from("representation,row");
    for j in 0..n {
        write!(out, ",c{j}").expect("writing to a String");
    }
    out.push('\n');
    for (name, hidden) in &scores.hidden {
        for (i, r) in cosine_matrix(hidden, n).into_iter().enumerate() {
            write!(out, "{name},{i}").expect("writing to a String");
            for v in r {
                write!(out, ",{v:.12}").expect("writing to a String");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_are_right_closed() {
        assert_eq!(histogram_bin(0.0), 0);
        assert_eq!(histogram_bin(0.1), 0);
        assert_eq!(histogram_bin(0.100001), 1);
        assert_eq!(histogram_bin(0.3), 2);
        assert_eq!(histogram_bin(0.7), 6);
        assert_eq!(histogram_bin(1.0), 9);
        assert_eq!(histogram(&[0.05]), [100.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_matrix_basics() {
        let m = cosine_matrix(&[1.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0], 4);
        assert_eq!(m[0][2], 1.0);
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[3][3], 1.0);
        assert_eq!(m[3][0], 0.0);
        for (i, r) in m.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                assert_eq!(*v, m[j][i]);
            }
        }
    }
}
