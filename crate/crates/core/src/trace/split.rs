use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Seeded shuffle split into `(train, test)` with `round(fraction·n)` training items.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng_from(seed));
    let n_train = (train_fraction * items.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
