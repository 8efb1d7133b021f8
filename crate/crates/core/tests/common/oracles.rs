//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the code path it checks.
#![allow(dead_code)]

use semid::corpus::{CorpusItem, InteractionEvent};
use semid::ranking::RankingModel;
use semid::rqvae::{Codebook, RqVaeModel};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|)`, with an absolute floor so that two values that
/// are both essentially zero compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Brute-force per-level argmin: scan every codebook vector, squared L2,
/// lowest index on ties.
pub fn brute_force_codes(codebooks: &[Codebook<f32>], z: &[f32]) -> Vec<usize> {
    let mut r = z.to_vec();
    let mut codes = Vec::new();
    for cb in codebooks {
        let mut best = (f32::INFINITY, 0);
        for k in 0..cb.vectors.nrows() {
            let d: f32 = r.iter().zip(cb.vectors.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        codes.push(best.1);
        for (v, e) in r.iter_mut().zip(cb.vectors.row(best.1)) {
            *v -= e;
        }
    }
    codes
}

fn mlp_forward(layers: &[semid::nn::Dense<f64>], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let mut next: Vec<f64> = (0..layer.weights.nrows())
            .map(|o| layer.bias[o] + layer.weights.row(o).iter().zip(&h).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        if i + 1 < layers.len() {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = next;
    }
    h
}

fn min_hidden_preactivation(layers: &[semid::nn::Dense<f64>], x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let mut margin = f64::INFINITY;
    for (i, layer) in layers.iter().enumerate() {
        let mut next: Vec<f64> = (0..layer.weights.nrows())
            .map(|o| layer.bias[o] + layer.weights.row(o).iter().zip(&h).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        if i + 1 < layers.len() {
            margin = next.iter().fold(margin, |m, v| m.min(v.abs()));
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = next;
    }
    margin
}

/// Distance of the nearest ReLU pre-activation from its kink, over the
/// encoder at `x` and the decoder at `ẑ`. Finite differences are only
/// meaningful when this is well above the step size.
pub fn rqvae_kink_margin(model: &RqVaeModel<f64>, x: &[f64]) -> f64 {
    let anchor = rqvae_anchor(model, &[x.to_vec()]);
    let z = mlp_forward(&model.encoder().layers, x);
    let z_hat: Vec<f64> = z.iter().zip(&anchor.offset[0]).map(|(a, b)| a + b).collect();
    min_hidden_preactivation(&model.encoder().layers, x).min(min_hidden_preactivation(&model.decoder().layers, &z_hat))
}

/// Constants of the forward pass at which the straight-through surrogate is expanded.
pub struct RqVaeAnchor {
    codes: Vec<Vec<usize>>,
    /// `ẑ - z` per row.
    offset: Vec<Vec<f64>>,
    /// Per row and level: `r_l`, the selected vector `e_l`, and the sum of the
    /// vectors selected before level `l`.
    residuals: Vec<Vec<Vec<f64>>>,
    selected: Vec<Vec<Vec<f64>>>,
    prefix: Vec<Vec<Vec<f64>>>,
}

pub fn rqvae_anchor(model: &RqVaeModel<f64>, batch: &[Vec<f64>]) -> RqVaeAnchor {
    let mut a = RqVaeAnchor { codes: vec![], offset: vec![], residuals: vec![], selected: vec![], prefix: vec![] };
    for x in batch {
        let z = mlp_forward(&model.encoder().layers, x);
        let mut r = z.clone();
        let mut acc = vec![0.0; z.len()];
        let (mut codes, mut res, mut sel, mut pre) = (vec![], vec![], vec![], vec![]);
        for cb in model.codebooks() {
            let mut best = (f64::INFINITY, 0);
            for k in 0..cb.vectors.nrows() {
                let d: f64 = r.iter().zip(cb.vectors.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            res.push(r.clone());
            pre.push(acc.clone());
            sel.push(cb.vectors.row(best.1).to_vec());
            for ((rv, av), e) in r.iter_mut().zip(acc.iter_mut()).zip(cb.vectors.row(best.1)) {
                *rv -= e;
                *av += e;
            }
            codes.push(best.1);
        }
        a.offset.push(acc.iter().zip(&z).map(|(h, z)| h - z).collect());
        a.codes.push(codes);
        a.residuals.push(res);
        a.selected.push(sel);
        a.prefix.push(pre);
    }
    a
}

/// Loss whose plain gradient equals the stop-gradient loss gradient at the anchor:
/// `‖x - Dec(z + c)‖² + Σ β‖z - s_l - e⁰_l‖² + ‖r⁰_l - e_l‖²`, averaged over rows.
pub fn rqvae_surrogate_loss(model: &RqVaeModel<f64>, batch: &[Vec<f64>], anchor: &RqVaeAnchor) -> f64 {
    let beta = model.config().beta;
    let mut total = 0.0;
    for (b, x) in batch.iter().enumerate() {
        let z = mlp_forward(&model.encoder().layers, x);
        let st: Vec<f64> = z.iter().zip(&anchor.offset[b]).map(|(z, c)| z + c).collect();
        let x_hat = mlp_forward(&model.decoder().layers, &st);
        total += x.iter().zip(&x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        for (l, cb) in model.codebooks().iter().enumerate() {
            let e = cb.vectors.row(anchor.codes[b][l]);
            let (r0, e0, s) = (&anchor.residuals[b][l], &anchor.selected[b][l], &anchor.prefix[b][l]);
            for i in 0..z.len() {
                let commit = z[i] - s[i] - e0[i];
                let pull = r0[i] - e[i];
                total += beta * commit * commit + pull * pull;
            }
        }
    }
    total / batch.len() as f64
}

/// Worst relative error between `analytic` (one slice per parameter tensor) and
/// central differences of `loss` over every parameter.
pub fn finite_difference_check<M>(
    model: &mut M,
    analytic: &[Vec<f64>],
    params: impl Fn(&mut M) -> Vec<&mut [f64]>,
    loss: impl Fn(&M) -> f64,
) -> (f64, usize) {
    let shapes: Vec<usize> = params(model).iter().map(|p| p.len()).collect();
    assert_eq!(shapes.len(), analytic.len(), "tensor count");
    let mut worst = 0f64;
    let mut checked = 0;
    for (t, &len) in shapes.iter().enumerate() {
        assert_eq!(len, analytic[t].len(), "tensor {t} length");
        for i in 0..len {
            let orig = params(model)[t][i];
            params(model)[t][i] = orig + FD_STEP;
            let up = loss(model);
            params(model)[t][i] = orig - FD_STEP;
            let down = loss(model);
            params(model)[t][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = relative_error(analytic[t][i], numeric);
            if e > FD_TOLERANCE && std::env::var("FD_DEBUG").is_ok() {
                eprintln!("tensor {t} index {i}: analytic {} numeric {numeric}", analytic[t][i]);
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Mean BCE of a ranking model, recomputed from `score`.
pub fn ranking_bce(model: &RankingModel<f64>, events: &[&InteractionEvent]) -> f64 {
    let mut total = 0.0;
    for e in events {
        let p = model.score(&e.history, e.context, e.candidate).unwrap();
        total -= if e.clicked { p.ln() } else { (1.0 - p).ln() };
    }
    total / events.len() as f64
}

/// O(n²) AUC: fraction of (positive, negative) pairs ranked correctly, ties ½.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0f64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Mean cosine over all unordered pairs sharing their first `n` codes.
pub fn all_pairs_prefix_similarity(embeddings: &[&[f32]], codes: &[Vec<u32>], n: usize) -> Option<f64> {
    let (mut sum, mut count) = (0f64, 0usize);
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            if codes[i][..n] == codes[j][..n] {
                sum += cosine(embeddings[i], embeddings[j]);
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Shift-or packing with the first code in the most significant field.
pub fn shift_or_pack(codes: &[u32], bits: u32) -> u64 {
    codes.iter().fold(0u64, |acc, &c| (acc << bits) | c as u64)
}

/// Least-squares slope of `ln(weight)` against `ln(rank)` over the heaviest `top` items.
pub fn log_log_slope(items: &[CorpusItem], top: usize) -> f64 {
    let mut w: Vec<f64> = items.iter().map(|i| i.popularity_weight as f64).collect();
    w.sort_by(|a, b| b.total_cmp(a));
    let pts: Vec<(f64, f64)> = w.iter().take(top).enumerate().map(|(r, &v)| (((r + 1) as f64).ln(), v.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
