//! Token sharing policy: ground truth from masks, top-S selection,
//! precision, threshold-based dynamic selection, and random baselines.
//! The learned policy network lives in [`crate::policy_net`].

use rand::seq::index::sample;
use rand::Rng;

use crate::data::SegMask;
use crate::error::{dim_err, usage_err, Result};

/// `true` where a superpatch contains exactly one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyGroundTruth {
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<bool>,
}

impl PolicyGroundTruth {
    pub fn positives(&self) -> usize {
        self.grid.iter().filter(|&&g| g).count()
    }

    pub fn base_rate(&self) -> f64 {
        self.positives() as f64 / self.grid.len() as f64
    }

    /// Ground truth as hard scores, for oracle selection.
    pub fn as_scores(&self) -> PolicyScores {
        PolicyScores {
            rows: self.rows,
            cols: self.cols,
            scores: self.grid.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect(),
        }
    }
}

pub fn gt_policy(mask: &SegMask, patch_size: usize) -> Result<PolicyGroundTruth> {
    let (rows, cols) = mask.superpatch_grid(patch_size)?;
    Ok(PolicyGroundTruth {
        rows,
        cols,
        grid: mask.single_class_superpatches(patch_size)?,
    })
}

/// Per-superpatch probability of being single-class.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyScores {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

impl PolicyScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Which superpatches share one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingPolicy {
    pub rows: usize,
    pub cols: usize,
    pub share_grid: Vec<bool>,
    /// `(row, col)` of shared superpatches, in selection order.
    pub ordered_shared: Vec<(usize, usize)>,
}

impl SharingPolicy {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            share_grid: vec![false; rows * cols],
            ordered_shared: Vec::new(),
        }
    }

    /// Builds a policy from superpatch indices (row-major), in order.
    pub fn from_indices(rows: usize, cols: usize, indices: &[usize]) -> Result<Self> {
        let mut p = Self::none(rows, cols);
        for &i in indices {
            if i >= rows * cols {
                return Err(usage_err!("superpatch {i} outside {rows}x{cols} grid"));
            }
            if p.share_grid[i] {
                return Err(usage_err!("superpatch {i} selected twice"));
            }
            p.share_grid[i] = true;
            p.ordered_shared.push((i / cols, i % cols));
        }
        Ok(p)
    }

    pub fn num_shared(&self) -> usize {
        self.ordered_shared.len()
    }

    pub fn total(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_shared(&self, row: usize, col: usize) -> bool {
        self.share_grid[row * self.cols + col]
    }
}

/// Picks the `s` highest scores; ties go to the earlier superpatch in
/// raster order.
pub fn select_top_s(scores: &PolicyScores, s: usize) -> Result<SharingPolicy> {
    let total = scores.len();
    if s > total {
        return Err(usage_err!("cannot share {s} of {total} superpatches"));
    }
    if let Some(bad) = scores.scores.iter().find(|v| v.is_nan()) {
        return Err(usage_err!("policy score {bad} is not a number"));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .expect("no NaN")
            .then(a.cmp(&b))
    });
    SharingPolicy::from_indices(scores.rows, scores.cols, &order[..s])
}

/// Fraction of selected superpatches that are truly single-class.
pub fn precision(policy: &SharingPolicy, gt: &PolicyGroundTruth) -> Result<f64> {
    if (policy.rows, policy.cols) != (gt.rows, gt.cols) {
        return Err(dim_err!(
            "policy grid {}x{} vs ground truth {}x{}",
            policy.rows,
            policy.cols,
            gt.rows,
            gt.cols
        ));
    }
    let s = policy.num_shared();
    if s == 0 {
        return Err(usage_err!("precision is undefined for an empty policy"));
    }
    let hits = policy
        .ordered_shared
        .iter()
        .filter(|&&(r, c)| gt.grid[r * gt.cols + c])
        .count();
    Ok(hits as f64 / s as f64)
}

/// Number of superpatches whose score exceeds `tau`.
pub fn confident_count(scores: &PolicyScores, tau: f64) -> usize {
    scores.scores.iter().filter(|&&v| v > tau).count()
}

/// Largest available setting strictly below `S* = #{score > tau}`, or 0.
pub fn dynamic_select(scores: &PolicyScores, tau: f64, settings: &[usize]) -> Result<usize> {
    dynamic_select_count(confident_count(scores, tau), settings)
}

/// [`dynamic_select`] given `S*` directly.
pub fn dynamic_select_count(s_star: usize, settings: &[usize]) -> Result<usize> {
    if settings.is_empty() {
        return Err(usage_err!("dynamic_select needs at least one setting"));
    }
    if settings.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage_err!("settings {settings:?} must be strictly ascending"));
    }
    if settings[0] != 0 {
        return Err(usage_err!("settings {settings:?} must contain 0"));
    }
    Ok(settings.iter().copied().filter(|&s| s < s_star).max().unwrap_or(0))
}

/// Uniformly random `s` of the grid's superpatches.
pub fn random_policy(rows: usize, cols: usize, s: usize, rng: &mut impl Rng) -> Result<SharingPolicy> {
    let total = rows * cols;
    if s > total {
        return Err(usage_err!("cannot share {s} of {total} superpatches"));
    }
    let picked = sample(rng, total, s).into_vec();
    SharingPolicy::from_indices(rows, cols, &picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[f64], cols: usize) -> PolicyScores {
        PolicyScores {
            rows: v.len() / cols,
            cols,
            scores: v.to_vec(),
        }
    }

    #[test]
    fn top_s_edges() {
        let sc = scores(&[0.1, 0.9, 0.5, 0.7], 2);
        assert_eq!(select_top_s(&sc, 0).unwrap().num_shared(), 0);
        let all = select_top_s(&sc, 4).unwrap();
        assert!(all.share_grid.iter().all(|&b| b));
        assert_eq!(all.ordered_shared, vec![(0, 1), (1, 1), (1, 0), (0, 0)]);
        assert!(select_top_s(&sc, 5).is_err());
    }

    #[test]
    fn ties_break_in_raster_order() {
        let sc = scores(&[0.5; 6], 3);
        let p = select_top_s(&sc, 3).unwrap();
        assert_eq!(p.ordered_shared, vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn precision_arithmetic() {
        let gt = PolicyGroundTruth {
            rows: 2,
            cols: 2,
            grid: vec![true, true, true, false],
        };
        let p = SharingPolicy::from_indices(2, 2, &[0, 1, 2, 3]).unwrap();
        assert_eq!(precision(&p, &gt).unwrap(), 0.75);
        let sub = SharingPolicy::from_indices(2, 2, &[2, 0]).unwrap();
        assert_eq!(precision(&sub, &gt).unwrap(), 1.0);
        assert!(precision(&SharingPolicy::none(2, 2), &gt).is_err());
    }

    #[test]
    fn dynamic_rule() {
        let settings = [0, 123, 236, 307, 389, 471];
        assert_eq!(dynamic_select_count(400, &settings).unwrap(), 389);
        assert_eq!(dynamic_select_count(389, &settings).unwrap(), 307);
        assert_eq!(dynamic_select_count(0, &settings).unwrap(), 0);
        assert_eq!(dynamic_select_count(10_000, &settings).unwrap(), 471);
        let zero = scores(&[0.0; 4], 2);
        assert_eq!(dynamic_select(&zero, 0.4, &[0, 1]).unwrap(), 0);
        assert!(dynamic_select_count(3, &[]).is_err());
        assert!(dynamic_select_count(3, &[1, 2]).is_err());
    }

    #[test]
    fn gt_flags_off_class_pixel() {
        let mut mask = SegMask::filled(16, 16, 2);
        assert!(gt_policy(&mask, 4).unwrap().grid.iter().all(|&g| g));
        mask.labels[9 * 16 + 3] = 1; // superpatch (1, 0)
        let gt = gt_policy(&mask, 4).unwrap();
        assert_eq!(gt.grid, vec![true, true, false, true]);
    }
}
