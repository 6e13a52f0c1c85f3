//! Group segmentation on top of any k-branch predictor: tuple sampling
//! strategies, confidence-map fusion by averaging, and the P/J metrics.
//!
//! Strategies:
//!   a) every k-element tuple, all outputs fused per image;
//!   b) one random partition into floor(N/k) groups (remainder absorbed by
//!      the last group), each image predicted exactly once;
//!   c) per target, 5 random (k-1)-subsets of the others, target prepended,
//!      only the target's output kept;
//!   d) per target, a random permutation of the others split into
//!      T = floor((N-1)/(k-1)) chunks (remainder dropped), target prepended,
//!      only the target's output kept.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    A,
    B,
    C,
    D,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Strategy::A),
            "b" => Ok(Strategy::B),
            "c" => Ok(Strategy::C),
            "d" => Ok(Strategy::D),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy '{other}' (a|b|c|d)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::A => "a",
            Strategy::B => "b",
            Strategy::C => "c",
            Strategy::D => "d",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// group size N
    pub n: usize,
    /// tuple size k
    pub k: usize,
    pub seed: u64,
    /// strategy a refuses to enumerate more tuples than this
    pub tuple_cap: u64,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, n: usize, k: usize, seed: u64) -> Self {
        StrategyConfig {
            strategy,
            n,
            k,
            seed,
            tuple_cap: 10_000,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k > self.n {
            return Err(Error::InvalidConfig(format!(
                "need 2 <= k <= N, got k={} N={}",
                self.k, self.n
            )));
        }
        Ok(())
    }
}

/// Which tuple outputs feed the fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UseOutputs {
    /// every branch's prediction counts for its image (strategies a, b)
    All,
    /// only the tuple's first entry receives a prediction (strategies c, d)
    TargetOnly,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub tuples: Vec<Vec<usize>>,
    pub use_outputs: UseOutputs,
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Materialize the tuple schedule for a strategy. Deterministic in the seed.
pub fn plan(cfg: &StrategyConfig) -> Result<Plan> {
    cfg.validate()?;
    let (n, k) = (cfg.n, cfg.k);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.strategy {
        Strategy::A => {
            let count = binomial(n, k);
            if count > cfg.tuple_cap as u128 {
                return Err(Error::CombinatorialBlowup {
                    tuples: count,
                    cap: cfg.tuple_cap,
                });
            }
            let mut tuples = Vec::with_capacity(count as usize);
            let mut idx: Vec<usize> = (0..k).collect();
            loop {
                tuples.push(idx.clone());
                // next lexicographic combination
                let mut i = k;
                loop {
                    if i == 0 {
                        return Ok(Plan {
                            tuples,
                            use_outputs: UseOutputs::All,
                        });
                    }
                    i -= 1;
                    if idx[i] != i + n - k {
                        break;
                    }
                }
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
            }
        }
        Strategy::B => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let groups = n / k;
            let mut tuples: Vec<Vec<usize>> =
                (0..groups).map(|g| order[g * k..(g + 1) * k].to_vec()).collect();
            // remainder images join the last group
            for &img in &order[groups * k..] {
                tuples.last_mut().expect("groups >= 1").push(img);
            }
            Ok(Plan {
                tuples,
                use_outputs: UseOutputs::All,
            })
        }
        Strategy::C => {
            let mut tuples = Vec::with_capacity(n * 5);
            for target in 0..n {
                let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
                for _ in 0..5 {
                    let picks =
                        rand::seq::index::sample(&mut rng, others.len(), k - 1).into_vec();
                    let mut tuple = Vec::with_capacity(k);
                    tuple.push(target);
                    tuple.extend(picks.into_iter().map(|i| others[i]));
                    tuples.push(tuple);
                }
            }
            Ok(Plan {
                tuples,
                use_outputs: UseOutputs::TargetOnly,
            })
        }
        Strategy::D => {
            let t = (n - 1) / (k - 1);
            let mut tuples = Vec::with_capacity(n * t);
            for target in 0..n {
                let mut others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
                others.shuffle(&mut rng);
                for chunk in 0..t {
                    let mut tuple = Vec::with_capacity(k);
                    tuple.push(target);
                    tuple.extend_from_slice(&others[chunk * (k - 1)..(chunk + 1) * (k - 1)]);
                    tuples.push(tuple);
                }
            }
            Ok(Plan {
                tuples,
                use_outputs: UseOutputs::TargetOnly,
            })
        }
    }
}

/// Running per-image sums of foreground-probability maps.
pub struct FusionAccumulator {
    sums: Vec<Option<Vec<f64>>>,
    counts: Vec<usize>,
    shape: Vec<usize>,
}

impl FusionAccumulator {
    pub fn new(images: usize) -> Self {
        FusionAccumulator {
            sums: (0..images).map(|_| None).collect(),
            counts: vec![0; images],
            shape: Vec::new(),
        }
    }

    pub fn add(&mut self, image: usize, prob_map: &Tensor) -> Result<()> {
        if self.shape.is_empty() {
            self.shape = prob_map.shape().to_vec();
        } else if self.shape != prob_map.shape() {
            return Err(Error::shape(format!(
                "fusion: {:?} vs {:?}",
                prob_map.shape(),
                self.shape
            )));
        }
        let slot = self.sums[image].get_or_insert_with(|| vec![0.0; prob_map.numel()]);
        for (s, v) in slot.iter_mut().zip(prob_map.data()) {
            *s += v;
        }
        self.counts[image] += 1;
        Ok(())
    }

    /// Per-image mean maps. Every image must have at least one prediction.
    pub fn finalize(self) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.sums.len());
        for (image, (sum, count)) in self.sums.into_iter().zip(self.counts).enumerate() {
            let sum = sum.ok_or(Error::MissingPrediction { image })?;
            debug_assert!(count > 0);
            let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            out.push(Tensor::new(self.shape.clone(), mean)?);
        }
        Ok(out)
    }
}

/// Precision over both classes and foreground Jaccard. Two empty
/// foregrounds have Jaccard 1.
pub fn metrics(pred: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "metrics: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut correct = 0usize;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        if p == g {
            correct += 1;
        }
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    let precision = correct as f64 / pred.numel() as f64;
    let jaccard = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    Ok((precision, jaccard))
}

/// Anything that maps a tuple of images to per-image foreground-probability
/// maps. Implemented by the trained model and by test mocks.
pub trait TuplePredictor: Sync {
    fn predict(&self, images: &[&Tensor]) -> Result<Vec<Tensor>>;
}

impl<F> TuplePredictor for F
where
    F: Fn(&[&Tensor]) -> Result<Vec<Tensor>> + Sync,
{
    fn predict(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        self(images)
    }
}

pub struct GroupSegResult {
    pub prob_maps: Vec<Tensor>,
    pub pred_masks: Vec<Tensor>,
    /// per image (precision, jaccard)
    pub per_image: Vec<(f64, f64)>,
}

impl GroupSegResult {
    pub fn mean_precision(&self) -> f64 {
        self.per_image.iter().map(|m| m.0).sum::<f64>() / self.per_image.len() as f64
    }

    pub fn mean_jaccard(&self) -> f64 {
        self.per_image.iter().map(|m| m.1).sum::<f64>() / self.per_image.len() as f64
    }
}

/// Execute a plan over a group: predict every tuple (tuples run in
/// parallel), fuse confidence maps per image in plan order, threshold at
/// 0.5, and score against the ground truth.
pub fn run_group_segmentation(
    images: &[Tensor],
    gt_masks: &[Tensor],
    predictor: &dyn TuplePredictor,
    cfg: &StrategyConfig,
) -> Result<GroupSegResult> {
    if images.len() != cfg.n || gt_masks.len() != cfg.n {
        return Err(Error::InvalidConfig(format!(
            "group has {} images / {} masks, config says N={}",
            images.len(),
            gt_masks.len(),
            cfg.n
        )));
    }
    let plan = plan(cfg)?;

    let predictions: Vec<Vec<Tensor>> = plan
        .tuples
        .par_iter()
        .map(|tuple| {
            let refs: Vec<&Tensor> = tuple.iter().map(|&i| &images[i]).collect();
            predictor.predict(&refs)
        })
        .collect::<Result<_>>()?;

    // fuse in plan order: deterministic regardless of prediction scheduling
    let mut acc = FusionAccumulator::new(cfg.n);
    for (tuple, maps) in plan.tuples.iter().zip(&predictions) {
        if maps.len() != tuple.len() {
            return Err(Error::shape(format!(
                "predictor returned {} maps for a {}-tuple",
                maps.len(),
                tuple.len()
            )));
        }
        match plan.use_outputs {
            UseOutputs::All => {
                for (&img, map) in tuple.iter().zip(maps) {
                    acc.add(img, map)?;
                }
            }
            UseOutputs::TargetOnly => acc.add(tuple[0], &maps[0])?,
        }
    }
    let prob_maps = acc.finalize()?;

    let pred_masks: Vec<Tensor> = prob_maps
        .iter()
        .map(|p| Tensor::from_fn(p.shape(), |i| if p.data()[i] > 0.5 { 1.0 } else { 0.0 }))
        .collect();
    let per_image: Vec<(f64, f64)> = pred_masks
        .iter()
        .zip(gt_masks)
        .map(|(p, g)| metrics(p, g))
        .collect::<Result<_>>()?;

    Ok(GroupSegResult {
        prob_maps,
        pred_masks,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest, ProptestConfig};

    fn counts_per_image(plan: &Plan, n: usize) -> Vec<usize> {
        let mut c = vec![0usize; n];
        for t in &plan.tuples {
            match plan.use_outputs {
                UseOutputs::All => {
                    for &i in t {
                        c[i] += 1;
                    }
                }
                UseOutputs::TargetOnly => c[t[0]] += 1,
            }
        }
        c
    }

    #[test]
    fn strategy_a_counts() {
        let cfg = StrategyConfig::new(Strategy::A, 100, 2, 0);
        let p = plan(&cfg).unwrap();
        assert_eq!(p.tuples.len(), 4950);
        assert!(counts_per_image(&p, 100).iter().all(|&c| c == 99));
    }

    #[test]
    fn strategy_a_cap() {
        let mut cfg = StrategyConfig::new(Strategy::A, 100, 5, 0);
        assert!(matches!(
            plan(&cfg),
            Err(Error::CombinatorialBlowup { .. })
        ));
        cfg.k = 3; // C(100,3) = 161700 > 10000
        assert!(plan(&cfg).is_err());
        cfg.n = 30; // C(30,3) = 4060
        assert_eq!(plan(&cfg).unwrap().tuples.len(), 4060);
    }

    #[test]
    fn strategy_b_absorbs_remainder() {
        let cfg = StrategyConfig::new(Strategy::B, 7, 3, 5);
        let p = plan(&cfg).unwrap();
        assert_eq!(p.tuples.len(), 2);
        assert_eq!(p.tuples[0].len(), 3);
        assert_eq!(p.tuples[1].len(), 4);
        let mut all: Vec<usize> = p.tuples.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn strategy_d_prediction_counts() {
        let cfg = StrategyConfig::new(Strategy::D, 100, 5, 1);
        let p = plan(&cfg).unwrap();
        // T = floor(99/4) = 24 predictions per image
        assert!(counts_per_image(&p, 100).iter().all(|&c| c == 24));
        assert_eq!(p.tuples.len(), 2400);
    }

    #[test]
    fn strategy_c_five_tuples_target_first() {
        let cfg = StrategyConfig::new(Strategy::C, 9, 4, 2);
        let p = plan(&cfg).unwrap();
        assert_eq!(p.tuples.len(), 45);
        for (idx, t) in p.tuples.iter().enumerate() {
            let target = idx / 5;
            assert_eq!(t[0], target);
            assert_eq!(t.len(), 4);
            assert!(!t[1..].contains(&target));
            let mut companions = t[1..].to_vec();
            companions.sort_unstable();
            companions.dedup();
            assert_eq!(companions.len(), 3, "companions repeat in {t:?}");
        }
    }

    #[test]
    fn plans_are_deterministic_per_seed() {
        for strat in [Strategy::B, Strategy::C, Strategy::D] {
            let a = plan(&StrategyConfig::new(strat, 11, 3, 42)).unwrap();
            let b = plan(&StrategyConfig::new(strat, 11, 3, 42)).unwrap();
            assert_eq!(a.tuples, b.tuples);
            let c = plan(&StrategyConfig::new(strat, 11, 3, 43)).unwrap();
            assert_ne!(a.tuples, c.tuples, "{strat:?} ignored the seed");
        }
    }

    #[test]
    fn invalid_k_rejected() {
        assert!(plan(&StrategyConfig::new(Strategy::B, 4, 1, 0)).is_err());
        assert!(plan(&StrategyConfig::new(Strategy::B, 4, 5, 0)).is_err());
    }

    fn flat_map(n: usize, v: f64) -> Tensor {
        Tensor::full(&[1, 1, n, n], v)
    }

    #[test]
    fn constant_predictor_fuses_to_itself() {
        let images: Vec<Tensor> = (0..5).map(|_| flat_map(4, 0.3)).collect();
        let gts: Vec<Tensor> = (0..5).map(|_| flat_map(4, 0.0)).collect();
        let predictor = |tuple: &[&Tensor]| -> Result<Vec<Tensor>> {
            Ok(tuple.iter().map(|_| flat_map(4, 0.2)).collect())
        };
        for strat in [Strategy::A, Strategy::B, Strategy::C, Strategy::D] {
            let cfg = StrategyConfig::new(strat, 5, 2, 3);
            let res = run_group_segmentation(&images, &gts, &predictor, &cfg).unwrap();
            for m in &res.prob_maps {
                assert!(m.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
            }
            // constant 0.2 < 0.5: predicted background everywhere, gt empty
            for &(p, j) in &res.per_image {
                assert_eq!(p, 1.0);
                assert_eq!(j, 1.0);
            }
        }
    }

    #[test]
    fn strategy_b_with_k_equals_n_is_single_pass() {
        let images: Vec<Tensor> = (0..4).map(|i| flat_map(4, i as f64 / 4.0)).collect();
        let gts: Vec<Tensor> = (0..4).map(|_| flat_map(4, 0.0)).collect();
        // predictor echoes each input's own mean value
        let predictor = |tuple: &[&Tensor]| -> Result<Vec<Tensor>> {
            Ok(tuple
                .iter()
                .map(|t| flat_map(4, t.data()[0]))
                .collect())
        };
        let cfg = StrategyConfig::new(Strategy::B, 4, 4, 0);
        let p = plan(&cfg).unwrap();
        assert_eq!(p.tuples.len(), 1);
        let res = run_group_segmentation(&images, &gts, &predictor, &cfg).unwrap();
        for (i, m) in res.prob_maps.iter().enumerate() {
            assert!((m.data()[0] - i as f64 / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strategy_a_fusion_matches_hand_computed_means() {
        // index-dependent predictor: map for image i in tuple (i, j) is
        // constant (i*10 + j) normalized; fused map for image i is the mean
        // over the 4 tuples containing i
        let n = 5;
        let images: Vec<Tensor> = (0..n).map(|i| flat_map(2, i as f64)).collect();
        let gts: Vec<Tensor> = (0..n).map(|_| flat_map(2, 0.0)).collect();
        let predictor = |tuple: &[&Tensor]| -> Result<Vec<Tensor>> {
            let ids: Vec<f64> = tuple.iter().map(|t| t.data()[0]).collect();
            Ok(ids
                .iter()
                .map(|&own| {
                    let other: f64 = ids.iter().sum::<f64>() - own;
                    flat_map(2, (own * 10.0 + other) / 100.0)
                })
                .collect())
        };
        let cfg = StrategyConfig::new(Strategy::A, n, 2, 0);
        let res = run_group_segmentation(&images, &gts, &predictor, &cfg).unwrap();
        for i in 0..n {
            let mut want = 0.0;
            let mut cnt = 0.0;
            for j in 0..n {
                if i != j {
                    want += (i as f64 * 10.0 + j as f64) / 100.0;
                    cnt += 1.0;
                }
            }
            want /= cnt;
            assert!(
                (res.prob_maps[i].data()[0] - want).abs() < 1e-12,
                "image {i}: {} vs {want}",
                res.prob_maps[i].data()[0]
            );
        }
    }

    #[test]
    fn metrics_examples() {
        let same = flat_map(8, 1.0);
        assert_eq!(metrics(&same, &same).unwrap(), (1.0, 1.0));

        // disjoint equal halves: left-half prediction vs right-half gt
        let pred = Tensor::from_fn(&[1, 1, 8, 8], |i| if i % 8 < 4 { 1.0 } else { 0.0 });
        let gt = Tensor::from_fn(&[1, 1, 8, 8], |i| if i % 8 >= 4 { 1.0 } else { 0.0 });
        assert_eq!(metrics(&pred, &gt).unwrap(), (0.0, 0.0));

        // 64x64: gt left half, pred top half
        let gt = Tensor::from_fn(&[1, 1, 64, 64], |i| if i % 64 < 32 { 1.0 } else { 0.0 });
        let pred = Tensor::from_fn(&[1, 1, 64, 64], |i| if i / 64 < 32 { 1.0 } else { 0.0 });
        let (p, j) = metrics(&pred, &gt).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert!((j - 1.0 / 3.0).abs() < 1e-12);

        // both empty foregrounds
        let empty = flat_map(4, 0.0);
        assert_eq!(metrics(&empty, &empty).unwrap(), (1.0, 1.0));

        assert!(metrics(&flat_map(4, 0.0), &flat_map(5, 0.0)).is_err());
    }

    #[test]
    fn missing_prediction_detected() {
        let mut acc = FusionAccumulator::new(2);
        acc.add(0, &flat_map(2, 0.5)).unwrap();
        assert!(matches!(
            acc.finalize(),
            Err(Error::MissingPrediction { image: 1 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partition_and_appearance_invariants(
            n in 4usize..13,
            k in 2usize..6,
            seed in 0u64..100,
        ) {
            prop_assume!(k <= n);

            // b: disjoint cover
            let pb = plan(&StrategyConfig::new(Strategy::B, n, k, seed)).unwrap();
            let mut seen: Vec<usize> = pb.tuples.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());

            // a: every image appears in C(n-1, k-1) tuples
            let pa = plan(&StrategyConfig::new(Strategy::A, n, k, seed)).unwrap();
            prop_assert_eq!(pa.tuples.len() as u128, binomial(n, k));
            let counts = counts_per_image(&pa, n);
            for &c in &counts {
                prop_assert_eq!(c as u128, binomial(n - 1, k - 1));
            }

            // c, d: target first, target never among companions, exact counts
            for strat in [Strategy::C, Strategy::D] {
                let p = plan(&StrategyConfig::new(strat, n, k, seed)).unwrap();
                for t in &p.tuples {
                    prop_assert!(!t[1..].contains(&t[0]));
                    prop_assert_eq!(t.len(), k);
                }
                let per = counts_per_image(&p, n);
                let want = if strat == Strategy::C { 5 } else { (n - 1) / (k - 1) };
                for &c in &per {
                    prop_assert_eq!(c, want);
                }
            }
        }
    }
}
