use std::collections::HashSet;

use crate::error::{DuetError, Result};
use crate::kernel::Rng;

/// Random deconvolution panel of `k` genes disjoint from the prediction
/// targets. Returned in the order the genes appear in `all_genes`.
pub fn select_panel(all_genes: &[String], target_genes: &[String], k: usize, rng: &Rng) -> Result<Vec<String>> {
    let targets: HashSet<&str> = target_genes.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    let pool: Vec<usize> = all_genes
        .iter()
        .enumerate()
        .filter(|(_, g)| !targets.contains(g.as_str()) && seen.insert(g.as_str()))
        .map(|(i, _)| i)
        .collect();
    if pool.len() < k {
        return Err(DuetError::input(format!(
            "panel of {k} genes requested but only {} non-target genes are available",
            pool.len()
        )));
    }
    let mut order = rng.named("panel").permutation(pool.len());
    order.truncate(k);
    let mut chosen: Vec<usize> = order.into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| all_genes[i].clone()).collect())
}
