//! Independent f64 reference computations used as test oracles.
#![allow(dead_code)]

use ndarray::Array2;

pub fn soft_ce(student: &[f64], teacher: &[f64]) -> f64 {
    -teacher.iter().zip(student).map(|(t, s)| t * (s + 1e-12).ln()).sum::<f64>()
}

pub fn kd(student: &[f64], hard: usize, teacher: &[f64], omega: f64) -> f64 {
    let ce = -(student[hard] + 1e-12).ln();
    let kl: f64 = teacher.iter().zip(student).filter(|(t, _)| **t > 0.0).map(|(t, s)| t * (t / s).ln()).sum();
    (1.0 - omega) * ce + omega * kl
}

pub fn gaussian_kl(mu: f64, log_var: f64) -> f64 {
    let var = log_var.exp();
    0.5 * (mu * mu + var - 1.0 - var.ln())
}

/// conv(2, 3x3, pad 1) - relu - maxpool 2x2 - dense(8 -> 2) on 4x4x1 inputs,
/// with parameters laid out as the library stores them.
pub fn micro_logits(p: &[Vec<Vec<f64>>], x: &[f64]) -> Vec<f64> {
    let mut conv = [0.0f64; 32];
    for y in 0..4 {
        for xx in 0..4 {
            for f in 0..2 {
                let mut acc = p[0][1][f];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += p[0][0][(ky * 3 + kx) * 2 + f] * x[(iy * 4 + ix) as usize];
                        }
                    }
                }
                conv[(y * 4 + xx) * 2 + f] = acc.max(0.0);
            }
        }
    }
    let mut pooled = [0.0f64; 8];
    for oy in 0..2 {
        for ox in 0..2 {
            for ch in 0..2 {
                pooled[(oy * 2 + ox) * 2 + ch] = (0..4)
                    .map(|d| conv[((2 * oy + d / 2) * 4 + 2 * ox + d % 2) * 2 + ch])
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
    }
    (0..2).map(|o| p[3][1][o] + (0..8).map(|i| pooled[i] * p[3][0][i * 2 + o]).sum::<f64>()).collect()
}

pub fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean over rows of `-sum_k q_k ln(s_k + eps) + offset`.
pub fn micro_loss(p: &[Vec<Vec<f64>>], x: &Array2<f32>, q: &Array2<f32>, offset: &[f64]) -> f64 {
    let mut total = 0.0;
    for (b, row) in x.rows().into_iter().enumerate() {
        let xs: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        let s = softmax(&micro_logits(p, &xs));
        let qs: Vec<f64> = q.row(b).iter().map(|&v| f64::from(v)).collect();
        total += soft_ce(&s, &qs) + offset[b];
    }
    total / x.nrows() as f64
}

pub fn widen(params: &[Vec<Vec<f32>>]) -> Vec<Vec<Vec<f64>>> {
    params.iter().map(|l| l.iter().map(|t| t.iter().map(|&v| f64::from(v)).collect()).collect()).collect()
}

/// Worst `|fd - an| / max(|fd|, |an|, floor)` over every parameter.
pub fn worst_relative_error(
    p: &mut [Vec<Vec<f64>>],
    analytic: &[Vec<Vec<f32>>],
    floor: f64,
    mut loss: impl FnMut(&[Vec<Vec<f64>>]) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for l in 0..p.len() {
        for t in 0..p[l].len() {
            for i in 0..p[l][t].len() {
                let orig = p[l][t][i];
                p[l][t][i] = orig + h;
                let up = loss(p);
                p[l][t][i] = orig - h;
                let down = loss(p);
                p[l][t][i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = f64::from(analytic[l][t][i]);
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(floor));
            }
        }
    }
    worst
}
