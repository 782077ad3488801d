//! Dirichlet-skewed site assignment.

use super::PatientRecord;
use crate::error::{Error, Result};
use crate::rng::{keyed, keys};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use std::collections::BTreeMap;

fn dirichlet(rng: &mut impl Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        return draws.into_iter().map(|d| d / total).collect();
    }
    // Every draw underflowed: put all mass on one site.
    let mut out = vec![0.0; k];
    out[rng.random_range(0..k)] = 1.0;
    out
}

/// Assign each patient to one of `k` sites.
///
/// Patients are stratified by (outcome, confounder); each stratum draws its
/// own site proportions from `Dirichlet(alpha)` and is split accordingly, so
/// small `alpha` concentrates strata on few sites. Sites left empty receive
/// patients from the largest site.
pub fn partition_non_iid(records: &[PatientRecord], k: usize, alpha: f64, seed: u64) -> Result<Vec<usize>> {
    let n = records.len();
    if k == 0 {
        return Err(Error::Config("number of sites must be >= 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!("{k} sites exceed {n} patients")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    let mut sites = vec![0usize; n];
    if k == 1 {
        return Ok(sites);
    }
    let mut strata: BTreeMap<(u8, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry((r.outcome, r.confounder)).or_default().push(i);
    }
    let mut rng = keyed(seed, &[keys::PARTITION]);
    for members in strata.values_mut() {
        let props = dirichlet(&mut rng, alpha, k);
        members.shuffle(&mut rng);
        let m = members.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (site, p) in props.iter().enumerate() {
            cum += p;
            let end = if site == k - 1 { m } else { ((cum * m as f64).round() as usize).min(m) };
            for &i in &members[start..end.max(start)] {
                sites[i] = site;
            }
            start = end.max(start);
        }
    }
    let mut by_site: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &s) in sites.iter().enumerate() {
        by_site[s].push(i);
    }
    for empty in 0..k {
        if !by_site[empty].is_empty() {
            continue;
        }
        let donor = (0..k).max_by_key(|&s| (by_site[s].len(), std::cmp::Reverse(s))).expect("k >= 1");
        let j = rng.random_range(0..by_site[donor].len());
        let moved = by_site[donor].swap_remove(j);
        sites[moved] = empty;
        by_site[empty].push(moved);
    }
    Ok(sites)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::{generate_cohort, GeneratorConfig};

    #[test]
    fn single_site() {
        let c = generate_cohort(&GeneratorConfig { n_patients: 50, ..Default::default() }).unwrap();
        assert!(partition_non_iid(&c.records, 1, 0.5, 3).unwrap().iter().all(|&s| s == 0));
    }

    #[test]
    fn every_site_nonempty_and_deterministic() {
        let c = generate_cohort(&GeneratorConfig { n_patients: 40, ..Default::default() }).unwrap();
        for seed in 0..10 {
            let a = partition_non_iid(&c.records, 8, 0.05, seed).unwrap();
            assert_eq!(a, partition_non_iid(&c.records, 8, 0.05, seed).unwrap());
            for s in 0..8 {
                assert!(a.contains(&s));
            }
        }
    }

    #[test]
    fn too_many_sites_rejected() {
        let c = generate_cohort(&GeneratorConfig { n_patients: 3, ..Default::default() }).unwrap();
        assert!(matches!(partition_non_iid(&c.records, 4, 1.0, 0), Err(Error::Config(_))));
    }
}
