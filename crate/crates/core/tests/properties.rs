use ensembench_core::budget::{match_depth, match_width, plan};
use ensembench_core::data::{
    augment_traced, balanced_indices, subsample_balanced, synth_clusters, AugLevel, AugmentationPolicy, DatasetSplit,
};
use ensembench_core::embed::pairwise_affinities;
use ensembench_core::zoo::{ArchitectureSpec, FlopCount};
use ensembench_core::RngStream;
use proptest::prelude::*;

fn labeled(k: usize, per: &[usize]) -> DatasetSplit {
    let mut labels = Vec::new();
    for (c, &n) in per.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c as u32, n));
    }
    let images = (0..labels.len() * 3).map(|i| (i * 7 % 256) as u8).collect();
    DatasetSplit::new(images, labels, [1, 1, 3], k).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn subsampling_is_balanced_and_seeded(
        k in 1usize..8,
        n in 1usize..12,
        extra in proptest::collection::vec(0usize..10, 8),
        seed in any::<u64>(),
    ) {
        let per: Vec<usize> = (0..k).map(|c| n + extra[c]).collect();
        let split = labeled(k, &per);
        let sub = subsample_balanced(&split, n, seed).unwrap();
        prop_assert_eq!(sub.len(), k * n);
        prop_assert!(sub.class_counts().iter().all(|&c| c == n));
        let a = balanced_indices(&split, n, seed).unwrap();
        prop_assert_eq!(&a, &balanced_indices(&split, n, seed).unwrap());
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(subsample_balanced(&split, n + 11, seed).is_err());
    }

    #[test]
    fn width_match_is_closest(w in 2usize..64, m in 2u64..30) {
        let base = ArchitectureSpec::resnet(8, w, 10);
        let target = base.flops().unwrap().scaled(m);
        let got = match_width(&base, target).unwrap();
        let gap = |w: usize| base.with_width(w).flops().unwrap().macs.abs_diff(target.macs);
        prop_assert!(gap(got) <= gap(got + 1));
        if got > 1 {
            prop_assert!(gap(got) <= gap(got - 1));
        }
    }

    #[test]
    fn depth_match_is_monotone(a in 1u64..400, b in 1u64..400) {
        let base = ArchitectureSpec::resnet(8, 16, 10);
        let unit = base.flops().unwrap().macs / 4;
        let (lo, hi) = (a.min(b), a.max(b));
        let dl = match_depth(&base, FlopCount::from_macs(unit * lo + base.flops().unwrap().macs));
        let dh = match_depth(&base, FlopCount::from_macs(unit * hi + base.flops().unwrap().macs));
        prop_assert!(dl.unwrap() <= dh.unwrap());
    }

    #[test]
    fn plan_costs_bracket_budget(w in 4usize..40, m in 2usize..12) {
        let p = plan(&ArchitectureSpec::resnet(8, w, 10), m).unwrap();
        prop_assert!(p.wide.spec.width > w);
        prop_assert!(p.wide.rel_error.abs() < 0.25);
        let d = p.deep.unwrap();
        prop_assert!(d.spec.depth > 8);
        prop_assert_eq!(d.spec.width, w);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn affinity_invariants(s in 16usize..48, f in 1usize..6, seed in any::<u64>(), frac in 0.1f64..0.9) {
        let mut rng = RngStream::new(seed, 0);
        let x: Vec<f64> = (0..s * f).map(|_| rng.normal()).collect();
        let perp = 1.0 + frac * ((s as f64 - 1.0) / 3.0 - 1.0);
        let a = pairwise_affinities(&x, s, perp).unwrap();
        prop_assert!((a.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..s {
            for j in 0..s {
                prop_assert!(a.p[i * s + j] >= 0.0);
                prop_assert_eq!(a.p[i * s + j], a.p[j * s + i]);
            }
            prop_assert!((a.row_perplexity[i] - perp).abs() < 1e-3);
        }
    }
}

#[test]
fn erase_rate_and_bounds() {
    let policy = AugmentationPolicy::new(AugLevel::PlusPlusPlus);
    let shape = [32, 32, 3];
    let img = vec![0.5f32; 32 * 32 * 3];
    let draws = 10_000;
    let mut erased = 0;
    for i in 0..draws {
        let mut rng = RngStream::new(3, i);
        let (_, rec) = augment_traced(&img, shape, &policy, &mut rng).unwrap();
        if let Some(r) = rec.erase {
            erased += 1;
            assert!(r.top + r.height <= 32 && r.left + r.width <= 32);
            let frac = (r.height * r.width) as f64 / 1024.0;
            assert!((0.02..=0.4).contains(&frac), "{}", frac);
        }
    }
    let rate = erased as f64 / draws as f64;
    assert!((rate - 0.5).abs() <= 0.02, "{}", rate);
}

#[test]
fn separable_toy_is_balanced() {
    let d = synth_clusters(3, 10, [4, 4, 3], 5.0, 1).unwrap();
    assert!(d.is_balanced());
    assert_eq!(d.per_class(), Some(10));
}
