//! Per-layer weight statistics and text histograms.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::Model;
use crate::ternarizer::{layer_stats, sparsity};

pub const HISTOGRAM_BINS: usize = 32;

/// Equal-width bins over `[min, max]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("histogram input"));
        }
        if bins == 0 {
            return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
        }
        let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mut counts = vec![0; bins];
        let width = (max - min) / bins as f64;
        for &v in values {
            let b = if width > 0.0 { (((v - min) / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        Ok(Self { min, max, counts })
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let width = (self.max - self.min) / self.counts.len() as f64;
        (self.min + width * i as f64, self.min + width * (i + 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInspection {
    pub name: String,
    pub params: usize,
    pub mu: f64,
    pub sigma: f64,
    pub skewness: f64,
    /// Quantizer fields, refreshed against the current weights.
    pub delta: Option<f64>,
    pub delta_c: Option<f64>,
    pub scale: Option<f64>,
    pub sparsity: Option<f64>,
    pub histogram: Histogram,
}

/// Population skewness `E[(w−μ)³]/σ³`.
pub fn skewness(w: &[f64], mu: f64, sigma: f64) -> f64 {
    w.iter().map(|v| ((v - mu) / sigma).powi(3)).sum::<f64>() / w.len() as f64
}

pub fn inspect_model(model: &Model) -> Result<Vec<LayerInspection>> {
    model
        .params()
        .iter()
        .map(|p| {
            let w = p.weight.data();
            let (mu, sigma) = layer_stats(w)?;
            let (mut delta, mut delta_c, mut scale, mut sp) = (None, None, None, None);
            if let Some(q) = p.quant {
                let q = q.refresh(w).map_err(|e| crate::network::in_layer(e, &p.name))?;
                delta = Some(q.delta());
                delta_c = Some(q.delta_c());
                scale = Some(q.scale());
                sp = Some(sparsity(&q.codes(&p.weight))?);
            }
            Ok(LayerInspection {
                name: p.name.clone(),
                params: w.len(),
                mu,
                sigma,
                skewness: if sigma > 0.0 { skewness(w, mu, sigma) } else { 0.0 },
                delta,
                delta_c,
                scale,
                sparsity: sp,
                histogram: Histogram::new(w, HISTOGRAM_BINS)?,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

/// Plain-text rendering: a summary line per layer, then its histogram with
/// one `lo,hi,count,bar` row per bin.
pub fn render_text(layers: &[LayerInspection]) -> String {
    let mut out = String::new();
    for l in layers {
        let _ = writeln!(
            out,
            "{} params={} mu={:.6} sigma={:.6} skew={:.4} delta={} delta_c={} S={} sparsity={}",
            l.name,
            l.params,
            l.mu,
            l.sigma,
            l.skewness,
            opt(l.delta),
            opt(l.delta_c),
            opt(l.scale),
            opt(l.sparsity)
        );
        let peak = l.histogram.counts.iter().copied().max().unwrap_or(0).max(1);
        for (i, &c) in l.histogram.counts.iter().enumerate() {
            let (lo, hi) = l.histogram.bin_edges(i);
            let bar = "#".repeat((c * 40).div_ceil(peak));
            let _ = writeln!(out, "  {lo:+.5},{hi:+.5},{c},{bar}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 0.25, 0.5, 1.0], 4).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        let h = Histogram::new(&[2.0, 2.0], 3).unwrap();
        assert_eq!(h.counts, vec![2, 0, 0]);
        assert!(Histogram::new(&[], 3).is_err());
        assert_eq!(h.bin_edges(0).0, 2.0);
    }

    #[test]
    fn skewness_of_symmetric_and_skewed() {
        let w = [-1.0, 0.0, 1.0];
        let (mu, sigma) = layer_stats(&w).unwrap();
        assert!(skewness(&w, mu, sigma).abs() < 1e-15);
        let w = [0.0, 0.0, 0.0, 3.0];
        let (mu, sigma) = layer_stats(&w).unwrap();
        assert!(skewness(&w, mu, sigma) > 1.0);
    }

    #[test]
    fn model_report() {
        let mut m = Model::build_from_config("in:6,dense:5,relu,dense:3:fp", 1).unwrap();
        m.init_thresholds(0.1).unwrap();
        let r = inspect_model(&m).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].histogram.counts.iter().sum::<usize>(), 30);
        assert_eq!(r[0].histogram.counts.len(), HISTOGRAM_BINS);
        assert!(r[0].scale.is_some() && r[1].scale.is_none());
        let text = render_text(&r);
        assert!(text.starts_with("fc1 params=30"));
        assert_eq!(text.lines().count(), 2 * (HISTOGRAM_BINS + 1));
    }
}
