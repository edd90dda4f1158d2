//! MixUp synthesis: Beta-weighted convex combinations of original-image pairs,
//! with the alpha filter that discards near-copies of a source image.

use ndarray::Array4;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, SourceTag};
use crate::error::{Error, Result};
use crate::seed;

/// The sampled pairs and coefficients for `m` mixup slots.
///
/// Slot `i` is retained iff `alpha < lambdas[i] < 1 - alpha`. Plans are drawn
/// from one seeded stream slot by slot, so a longer plan with the same seed
/// extends a shorter one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupPlan {
    pub n_pool: usize,
    pub lambdas: Vec<f64>,
    pub left_idx: Vec<usize>,
    pub right_idx: Vec<usize>,
    pub retained_mask: Vec<bool>,
    pub alpha: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub seed: u64,
}

/// Strict open-interval test for a mixup coefficient.
pub fn retains(lambda: f64, alpha: f64) -> bool {
    alpha < lambda && lambda < 1.0 - alpha
}

fn check_args(n_pool: usize, alpha: f64, (a, b): (f64, f64)) -> Result<()> {
    if n_pool < 2 {
        return Err(Error::argument(format!("mixup needs at least 2 originals, got {n_pool}")));
    }
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::argument(format!("alpha {alpha} outside [0, 0.5]")));
    }
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::argument(format!("Beta parameters must be positive, got ({a}, {b})")));
    }
    Ok(())
}

struct SlotStream {
    rng: seed::Rng,
    beta: Beta<f64>,
    n_pool: usize,
}

impl SlotStream {
    fn new(n_pool: usize, (a, b): (f64, f64), seed: u64) -> Self {
        Self { rng: seed::rng_for(seed, "mixup-plan"), beta: Beta::new(a, b).expect("checked"), n_pool }
    }

    fn next_slot(&mut self) -> (usize, usize, f64) {
        let l = self.rng.random_range(0..self.n_pool);
        let r = self.rng.random_range(0..self.n_pool);
        let lambda = self.beta.sample(&mut self.rng);
        (l, r, lambda)
    }
}

/// Samples `m` mixup slots: both sources uniform with replacement from the pool,
/// `lambda ~ Beta(a, b)`.
pub fn sample_mixup_plan(n_pool: usize, m: usize, alpha: f64, beta_params: (f64, f64), seed: u64) -> Result<MixupPlan> {
    check_args(n_pool, alpha, beta_params)?;
    if m == 0 {
        return Err(Error::argument("mixup slot count must be positive"));
    }
    let mut stream = SlotStream::new(n_pool, beta_params, seed);
    let mut plan = empty_plan(n_pool, alpha, beta_params, seed, m);
    for _ in 0..m {
        plan.push(stream.next_slot());
    }
    Ok(plan)
}

/// Extends the same slot stream until `target` slots pass the filter. The result
/// is a prefix-extension of [`sample_mixup_plan`] with the same seed.
pub fn sample_until_retained(
    n_pool: usize,
    target: usize,
    alpha: f64,
    beta_params: (f64, f64),
    seed: u64,
) -> Result<MixupPlan> {
    check_args(n_pool, alpha, beta_params)?;
    if target > 0 && alpha >= 0.5 {
        return Err(Error::argument("alpha = 0.5 retains nothing"));
    }
    let mut stream = SlotStream::new(n_pool, beta_params, seed);
    let mut plan = empty_plan(n_pool, alpha, beta_params, seed, target);
    while plan.retained_count() < target {
        plan.push(stream.next_slot());
        if plan.len() > 1000 * target.max(1) {
            return Err(Error::argument(format!("alpha {alpha} retains almost nothing under this Beta")));
        }
    }
    Ok(plan)
}

fn empty_plan(n_pool: usize, alpha: f64, (a, b): (f64, f64), seed: u64, cap: usize) -> MixupPlan {
    MixupPlan {
        n_pool,
        lambdas: Vec::with_capacity(cap),
        left_idx: Vec::with_capacity(cap),
        right_idx: Vec::with_capacity(cap),
        retained_mask: Vec::with_capacity(cap),
        alpha,
        beta_a: a,
        beta_b: b,
        seed,
    }
}

impl MixupPlan {
    fn push(&mut self, (l, r, lambda): (usize, usize, f64)) {
        self.left_idx.push(l);
        self.right_idx.push(r);
        self.lambdas.push(lambda);
        self.retained_mask.push(retains(lambda, self.alpha));
    }

    /// Number of slots `M`.
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// `M1`.
    pub fn retained_count(&self) -> usize {
        self.retained_mask.iter().filter(|&&k| k).count()
    }

    /// `M2 = M - M1`.
    pub fn rejected_count(&self) -> usize {
        self.len() - self.retained_count()
    }

    pub fn retained_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.retained_mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i)
    }

    /// The same slots filtered at a different threshold.
    pub fn refilter(&self, alpha: f64) -> Result<MixupPlan> {
        check_args(self.n_pool, alpha, (self.beta_a, self.beta_b))?;
        let mut p = self.clone();
        p.alpha = alpha;
        p.retained_mask = p.lambdas.iter().map(|&l| retains(l, alpha)).collect();
        Ok(p)
    }

    /// Keeps only the first `m` slots.
    pub fn truncated(&self, m: usize) -> MixupPlan {
        let m = m.min(self.len());
        let mut p = self.clone();
        p.lambdas.truncate(m);
        p.left_idx.truncate(m);
        p.right_idx.truncate(m);
        p.retained_mask.truncate(m);
        p
    }
}

/// Renders the retained slots: `lambda * x[left] + (1 - lambda) * x[right]`.
pub fn generate_mixup(x: &ImageSet, plan: &MixupPlan) -> Result<ImageSet> {
    if plan.n_pool != x.len() {
        return Err(Error::consistency(format!("plan drawn for {} originals, got {}", plan.n_pool, x.len())));
    }
    let (h, w, c) = x.image_shape();
    let p = h * w * c;
    let slots: Vec<usize> = plan.retained_slots().collect();
    let mut out = Vec::with_capacity(slots.len() * p);
    for &s in &slots {
        let (li, ri) = (plan.left_idx[s], plan.right_idx[s]);
        if li >= x.len() || ri >= x.len() {
            return Err(Error::consistency(format!("slot {s} references image {} of {}", li.max(ri), x.len())));
        }
        let lam = plan.lambdas[s];
        let (a, b) = (x.pixels(li), x.pixels(ri));
        out.extend(a.iter().zip(b).map(|(&u, &v)| {
            let mixed = (lam * f64::from(u) + (1.0 - lam) * f64::from(v)) as f32;
            mixed.clamp(u.min(v), u.max(v))
        }));
    }
    let data = Array4::from_shape_vec((slots.len(), h, w, c), out).expect("sized");
    ImageSet::new(data, SourceTag::Mixup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool() -> ImageSet {
        let data = Array4::from_shape_fn((4, 2, 2, 1), |(i, y, x, _)| (i * 4 + y * 2 + x) as f32 / 15.0);
        ImageSet::new(data, SourceTag::Original).unwrap()
    }

    fn single_slot(lambda: f64, left: usize, right: usize) -> MixupPlan {
        MixupPlan {
            n_pool: 4,
            lambdas: vec![lambda],
            left_idx: vec![left],
            right_idx: vec![right],
            retained_mask: vec![true],
            alpha: 0.0,
            beta_a: 1.0,
            beta_b: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn filter_examples() {
        assert!(retains(0.58, 0.05));
        assert!(!retains(0.98, 0.05));
        assert!(!retains(0.05, 0.05));
        assert!(!retains(0.95, 0.05));
        for l in [0.0, 0.3, 0.5, 0.7, 1.0] {
            assert!(!retains(l, 0.5));
        }
    }

    #[test]
    fn alpha_half_rejects_everything() {
        let p = sample_mixup_plan(10, 500, 0.5, (1.0, 1.0), 3).unwrap();
        assert_eq!(p.retained_count(), 0);
        assert_eq!(p.rejected_count(), 500);
    }

    #[test]
    fn argument_errors() {
        assert!(sample_mixup_plan(10, 5, 0.6, (1.0, 1.0), 0).is_err());
        assert!(sample_mixup_plan(10, 5, -0.1, (1.0, 1.0), 0).is_err());
        assert!(sample_mixup_plan(1, 5, 0.1, (1.0, 1.0), 0).is_err());
        assert!(sample_mixup_plan(10, 5, 0.1, (0.0, 1.0), 0).is_err());
        assert!(sample_mixup_plan(10, 0, 0.1, (1.0, 1.0), 0).is_err());
    }

    #[test]
    fn identity_coefficients() {
        let x = pool();
        assert_eq!(generate_mixup(&x, &single_slot(1.0, 1, 2)).unwrap().pixels(0), x.pixels(1));
        assert_eq!(generate_mixup(&x, &single_slot(0.0, 1, 2)).unwrap().pixels(0), x.pixels(2));
    }

    #[test]
    fn pixel_blend_example() {
        let data = Array4::from_shape_vec((2, 1, 1, 1), vec![0.2f32, 0.8]).unwrap();
        let x = ImageSet::new(data, SourceTag::Original).unwrap();
        let mut plan = single_slot(0.25, 0, 1);
        plan.n_pool = 2;
        let out = generate_mixup(&x, &plan).unwrap();
        assert!((out.pixels(0)[0] - 0.65).abs() < 1e-6);
        assert_eq!(out.tags(), &[SourceTag::Mixup]);
    }

    #[test]
    fn bad_index_is_consistency_error() {
        let mut plan = single_slot(0.5, 0, 9);
        plan.n_pool = 4;
        assert!(matches!(generate_mixup(&pool(), &plan), Err(Error::Consistency(_))));
    }

    #[test]
    fn longer_plans_extend_shorter_ones() {
        let short = sample_mixup_plan(50, 100, 0.05, (1.0, 1.0), 8).unwrap();
        let long = sample_mixup_plan(50, 300, 0.05, (1.0, 1.0), 8).unwrap();
        assert_eq!(long.truncated(100), short);
        let grown = sample_until_retained(50, 250, 0.05, (1.0, 1.0), 8).unwrap();
        assert_eq!(grown.retained_count(), 250);
        assert_eq!(grown.truncated(100), short);
    }

    #[test]
    fn refilter_keeps_slots() {
        let p = sample_mixup_plan(50, 400, 0.05, (1.0, 1.0), 2).unwrap();
        let q = p.refilter(0.10).unwrap();
        assert_eq!(p.lambdas, q.lambdas);
        assert!(q.retained_count() <= p.retained_count());
    }

    proptest! {
        #[test]
        fn plan_invariants(n_pool in 2usize..40, m in 1usize..300, alpha in 0.0f64..=0.5,
                           a in 0.2f64..4.0, b in 0.2f64..4.0, seed in any::<u64>()) {
            let p = sample_mixup_plan(n_pool, m, alpha, (a, b), seed).unwrap();
            prop_assert_eq!(p.len(), m);
            prop_assert_eq!(p.retained_count() + p.rejected_count(), m);
            for i in 0..m {
                let l = p.lambdas[i];
                prop_assert!((0.0..=1.0).contains(&l));
                prop_assert!(p.left_idx[i] < n_pool && p.right_idx[i] < n_pool);
                if p.retained_mask[i] {
                    prop_assert!(alpha < l && l < 1.0 - alpha);
                } else {
                    prop_assert!(l <= alpha || l >= 1.0 - alpha);
                }
            }
            prop_assert_eq!(&p, &sample_mixup_plan(n_pool, m, alpha, (a, b), seed).unwrap());
        }

        #[test]
        fn mixup_pixels_are_convex(seed in any::<u64>(), alpha in 0.0f64..0.45) {
            let x = pool();
            let plan = sample_mixup_plan(4, 40, alpha, (0.5, 0.5), seed).unwrap();
            let out = generate_mixup(&x, &plan).unwrap();
            prop_assert_eq!(out.len(), plan.retained_count());
            for (k, s) in plan.retained_slots().enumerate() {
                let (a, b) = (x.pixels(plan.left_idx[s]), x.pixels(plan.right_idx[s]));
                for (j, &v) in out.pixels(k).iter().enumerate() {
                    prop_assert!(v >= a[j].min(b[j]) && v <= a[j].max(b[j]));
                }
            }
        }
    }
}
