//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uconvert_core::nn::{bce_loss, mse_loss, ParamKind};
use uconvert_core::{Model, Tensor};

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub enum Objective {
    Mse(Tensor<f64>),
    Bce(f64),
}

impl Objective {
    fn eval(&self, out: &Tensor<f64>) -> (f64, Tensor<f64>) {
        match self {
            Objective::Mse(t) => mse_loss(out, t),
            Objective::Bce(label) => bce_loss(out, *label),
        }
    }
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

const DROPOUT_SEED: u64 = 99;

fn loss(model: &mut Model<f64>, x: &Tensor<f64>, obj: &Objective) -> f64 {
    model.reseed_dropout(DROPOUT_SEED);
    let out = model.forward(x, true).unwrap();
    obj.eval(&out).0
}

/// Compare backprop gradients of every learnable scalar with central
/// differences of the training-mode loss. Dropout masks are frozen by
/// reseeding before every forward pass.
pub fn gradcheck(model: &mut Model<f64>, x: &Tensor<f64>, obj: &Objective) -> GradCheck {
    model.zero_grad();
    model.reseed_dropout(DROPOUT_SEED);
    let out = model.forward(x, true).unwrap();
    let (_, dy) = obj.eval(&out);
    model.backward(&dy);
    let analytic: Vec<(String, ParamKind, Vec<f64>)> = model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.kind, p.grad.clone()))
        .collect();

    let h = 1e-5;
    let mut report = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for (pi, (name, kind, grads)) in analytic.iter().enumerate() {
        if *kind != ParamKind::Learnable {
            continue;
        }
        for (j, &a) in grads.iter().enumerate() {
            let orig = model.named_params_mut()[pi].1.value[j];
            model.named_params_mut()[pi].1.value[j] = orig + h;
            let up = loss(model, x, obj);
            model.named_params_mut()[pi].1.value[j] = orig - h;
            let down = loss(model, x, obj);
            model.named_params_mut()[pi].1.value[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{j}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    report
}

/// Elementwise-loop PSNR with peak 1.0.
pub fn reference_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        sum += d * d;
    }
    let mse = sum / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Windowed SSIM recomputing every local statistic with explicit loops
/// over a full 2D Gaussian window (11×11, σ 1.5, L 1.0).
pub fn reference_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    const K: usize = 11;
    let sigma = 1.5f64;
    let mut win = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - K {
        for x0 in 0..=w - K {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let g = win[i][j] / total;
                    mx += g * a[(y0 + i) * w + x0 + j] as f64;
                    my += g * b[(y0 + i) * w + x0 + j] as f64;
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let g = win[i][j] / total;
                    let dx = a[(y0 + i) * w + x0 + j] as f64 - mx;
                    let dy = b[(y0 + i) * w + x0 + j] as f64 - my;
                    vx += g * dx * dx;
                    vy += g * dy * dy;
                    cov += g * dx * dy;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
