//! Identity-preservation metrics on point tracks.
//!
//! Ground truth and hypotheses are matched per frame by centre distance under
//! a radius (closest pairs first). Identity switches, fragmentations and the
//! lite MOTA/IDF1 variants are derived from those matches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assign;
use crate::error::{Error, Result};
use crate::loss::greedy_match;

/// Hypothesis `(track id, position)` pairs per frame.
pub type Hypotheses = Vec<Vec<(u32, [f64; 2])>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub ids: usize,
    pub frag: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ids: usize,
    pub frag: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_count: usize,
    pub mota_lite: f64,
    pub idf1_lite: f64,
    pub assoc_acc: f64,
    /// Optional breakdown keyed by scenario archetype.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_error_type: BTreeMap<String, ErrorCounts>,
}

/// Scores hypotheses against ground truth; both are indexed by frame and
/// must cover the same frames.
pub fn score(hyp: &Hypotheses, gt: &[Vec<(u32, [f64; 2])>], match_radius: f64) -> Result<MetricsReport> {
    if !(match_radius > 0.0) {
        return Err(Error::RadiusNonPositive(match_radius));
    }
    if hyp.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            got: hyp.len(),
        });
    }

    // matched hypothesis id per (gt id, frame)
    let mut matched: BTreeMap<u32, Vec<(usize, Option<u32>)>> = BTreeMap::new();
    let (mut fp, mut fn_, mut gt_count) = (0, 0, 0);
    let mut co: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut n_hyp = 0;
    for (t, (h, g)) in hyp.iter().zip(gt).enumerate() {
        let hp: Vec<[f64; 2]> = h.iter().map(|x| x.1).collect();
        let gp: Vec<[f64; 2]> = g.iter().map(|x| x.1).collect();
        let pairs = greedy_match(&hp, &gp, match_radius);
        fp += h.len() - pairs.len();
        fn_ += g.len() - pairs.len();
        gt_count += g.len();
        n_hyp += h.len();
        for (j, &(gid, _)) in g.iter().enumerate() {
            let m = pairs.iter().find(|p| p.1 == j).map(|p| h[p.0].0);
            matched.entry(gid).or_default().push((t, m));
            if let Some(hid) = m {
                *co.entry((gid, hid)).or_default() += 1;
            }
        }
    }

    let (mut ids, mut frag) = (0, 0);
    let (mut links, mut good_links) = (0usize, 0usize);
    for seq in matched.values() {
        let mut last: Option<u32> = None;
        let mut tracked = false;
        let mut broken = false;
        for (k, &(t, m)) in seq.iter().enumerate() {
            match m {
                Some(h) => {
                    if last.is_some_and(|l| l != h) {
                        ids += 1;
                    }
                    if broken {
                        frag += 1;
                        broken = false;
                    }
                    last = Some(h);
                    tracked = true;
                    if k > 0 {
                        let (tp, mp) = seq[k - 1];
                        if tp + 1 == t {
                            if let Some(hp) = mp {
                                links += 1;
                                good_links += usize::from(hp == h);
                            }
                        }
                    }
                }
                None => {
                    if tracked {
                        broken = true;
                    }
                }
            }
        }
    }

    let idtp = best_identity_overlap(&co);
    let idf1_lite = if gt_count + n_hyp == 0 {
        1.0
    } else {
        2.0 * idtp as f64 / (gt_count + n_hyp) as f64
    };
    let mota_lite = 1.0 - (fp + fn_ + ids) as f64 / gt_count.max(1) as f64;
    let assoc_acc = if links == 0 { 1.0 } else { good_links as f64 / links as f64 };
    Ok(MetricsReport {
        ids,
        frag,
        fp,
        fn_,
        gt_count,
        mota_lite,
        idf1_lite,
        assoc_acc,
        per_error_type: BTreeMap::new(),
    })
}

/// Largest total co-occurrence over one-to-one gt/hypothesis id pairings.
fn best_identity_overlap(co: &BTreeMap<(u32, u32), usize>) -> usize {
    let gids: Vec<u32> = co.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let hids: Vec<u32> = co.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if gids.is_empty() {
        return 0;
    }
    // one dummy column per gt id keeps the problem feasible
    let width = hids.len() + gids.len();
    let cost: Vec<Vec<f64>> = gids
        .iter()
        .map(|g| {
            (0..width)
                .map(|c| match hids.get(c) {
                    Some(h) => -(co.get(&(*g, *h)).copied().unwrap_or(0) as f64),
                    None => 0.0,
                })
                .collect()
        })
        .collect();
    let cols = assign::solve(&cost);
    (-assign::assignment_cost(&cost, &cols)).round() as usize
}
