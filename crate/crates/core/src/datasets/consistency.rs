use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, DatasetManifest};
use crate::eval::spearman;

pub const DEFAULT_RESAMPLES: usize = 25;

/// Mean split-half Spearman correlation over `n_resamples` random rater
/// bisections. In each resample every image's raters are permuted uniformly;
/// the first `ceil(k / 2)` form one half, the rest the other.
pub fn split_half_consistency(
    manifest: &DatasetManifest,
    n_resamples: usize,
    seed: u64,
) -> Result<f64, DatasetError> {
    if manifest.is_empty() || n_resamples == 0 {
        return Err(DatasetError::Empty);
    }
    let responses = manifest
        .records
        .iter()
        .map(|r| match r.rater_responses.as_deref() {
            None | Some([]) => Err(DatasetError::MissingResponses(r.image_ref.clone())),
            Some(v) if v.len() < 2 => Err(DatasetError::TooFewResponses {
                image_ref: r.image_ref.clone(),
                count: v.len(),
            }),
            Some(v) => Ok(v),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mean = |v: &[u8]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let mut total = 0.0;
    for r in 0..n_resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut first = Vec::with_capacity(responses.len());
        let mut second = Vec::with_capacity(responses.len());
        let mut buf = Vec::new();
        for v in &responses {
            buf.clear();
            buf.extend_from_slice(v);
            buf.shuffle(&mut rng);
            let cut = buf.len().div_ceil(2);
            first.push(mean(&buf[..cut]));
            second.push(mean(&buf[cut..]));
        }
        total += spearman(&first, &second)?;
    }
    Ok(total / n_resamples as f64)
}
