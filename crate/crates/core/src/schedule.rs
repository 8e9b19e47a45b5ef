//! Epoch milestones expressed as fractions of the training length.

/// Milestone epochs for a run of `total` epochs; each fraction is scaled and
/// rounded to the nearest epoch.
pub fn scaled_milestones(fractions: &[f64], total: usize) -> Vec<usize> {
    fractions
        .iter()
        .map(|f| (f * total as f64).round() as usize)
        .collect()
}

/// Number of milestones with `milestone <= epoch`.
pub fn passed(fractions: &[f64], epoch: usize, total: usize) -> usize {
    scaled_milestones(fractions, total)
        .into_iter()
        .filter(|&m| m <= epoch)
        .count()
}

/// `{a, b, c}/110` as fractions.
pub fn of_110(epochs: [f64; 3]) -> Vec<f64> {
    epochs.iter().map(|e| e / 110.0).collect()
}
