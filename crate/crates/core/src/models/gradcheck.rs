//! Central finite-difference check of back-propagated MSE gradients.

use ndarray::{Array1, Array4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelError, Network};
use crate::training::loss_and_gradients;

/// Denominator floor for relative errors, so parameters with vanishing
/// gradients are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn loss(net: &Network<f64>, x: &Array4<f64>, y: &Array1<f64>) -> Result<f64, ModelError> {
    let p = net.forward(x)?;
    Ok((&p - y).mapv(|d| d * d).mean().unwrap())
}

/// Compare analytic gradients of the batch MSE with central differences on
/// `n_samples` parameter entries: one from every tensor, the rest drawn
/// uniformly from all entries. Frozen parameters are skipped.
pub fn gradient_check(
    net: &Network<f64>,
    x: &Array4<f64>,
    y: &Array1<f64>,
    n_samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let mut grads = net.zero_gradients();
    loss_and_gradients(net, x, y, &mut grads)?;
    let mask = net.trainable_mask();

    let sizes: Vec<(String, usize)> = net
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(t, (_, len))| (t, rng.random_range(0..*len)))
        .collect();
    let extra = n_samples.saturating_sub(picks.len()).min(total);
    for flat in sample(&mut rng, total, extra) {
        let mut rem = flat;
        for (t, (_, len)) in sizes.iter().enumerate() {
            if rem < *len {
                picks.push((t, rem));
                break;
            }
            rem -= len;
        }
    }

    let mut probe = net.clone();
    let mut entries = Vec::with_capacity(picks.len());
    for (t, i) in picks.into_iter().filter(|&(t, _)| mask[t]) {
        let original = net.named_params()[t].1.as_slice().unwrap()[i];
        let set = |probe: &mut Network<f64>, v: f64| {
            probe.params_mut()[t].as_slice_mut().unwrap()[i] = v;
        };
        set(&mut probe, original + eps);
        let up = loss(&probe, x, y)?;
        set(&mut probe, original - eps);
        let down = loss(&probe, x, y)?;
        set(&mut probe, original);
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.tensors[t].as_slice().unwrap()[i];
        entries.push(GradCheckEntry {
            param: sizes[t].0.clone(),
            index: i,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { entries })
}
