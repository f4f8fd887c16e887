use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use mscsa_core::data::{size_balanced_folds, LabelMask};
use mscsa_core::eval::{connected_components, dice_score};
use mscsa_core::mscsa::{init_params, mscsa_block, msp_project, msp_scales, msp_token_count, MscsaConfig};
use mscsa_core::nn::{NetworkParams, ParamInit, Session};
use mscsa_core::rng::seeded;
use mscsa_core::tensor::NormMode;
use mscsa_core::training::topk_count;
use mscsa_core::Tensor;

fn pooled(n: usize, s: usize) -> usize {
    (n - 1) / s + 1
}

#[test]
fn pooled_extents_exhaustive() {
    for h in 1..=64 {
        for w in [1, 2, 5, 64] {
            let s = msp_scales(h, w, h);
            for (i, stride) in [1, 2, 3].into_iter().enumerate() {
                assert_eq!(s[i], [pooled(h, stride), pooled(w, stride), pooled(h, stride)]);
            }
        }
    }
}

fn mask_strategy(e: [usize; 3]) -> impl Strategy<Value = LabelMask> {
    prop::collection::vec(prop::bool::weighted(0.3), e.iter().product::<usize>())
        .prop_map(move |v| LabelMask::new(e, v.into_iter().map(u8::from).collect()).unwrap())
}

fn block_setup(channels: &[usize]) -> (MscsaConfig, NetworkParams<f64>) {
    let cfg = MscsaConfig::for_channels(channels);
    let mut p = NetworkParams::new();
    init_params(&mut ParamInit { params: &mut p, rng: &mut seeded(1) }, &cfg, channels);
    (cfg, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_count_matches_branches(h in 1usize..8, w in 1usize..8, d in 1usize..8) {
        let (cfg, mut p) = block_setup(&[3, 5]);
        let mut s = Session::new(&mut p, NormMode::Eval, false);
        let x = s.graph.constant(Tensor::from_fn(&[1, 8, h, w, d], |i| (i as f64).sin()));
        let m = msp_project(&mut s, x, &cfg, "mscsa.block.csa1").unwrap();
        let sum: usize = msp_scales(h, w, d).iter().map(|e| e.iter().product::<usize>()).sum();
        prop_assert_eq!(m.branch_tokens.iter().sum::<usize>(), sum);
        prop_assert_eq!(msp_token_count(h, w, d), sum);
        prop_assert_eq!(s.graph.shape(m.k)[1], sum);
    }

    #[test]
    fn block_is_batch_equivariant_in_eval(e in 1usize..5, seed in 0u64..1000) {
        let (cfg, mut p) = block_setup(&[2, 2]);
        let vox = e * e * e;
        let x = Tensor::from_fn(&[2, 4, e, e, e], |i| ((i as u64 * 31 + seed) % 17) as f64 / 8.0 - 1.0);
        let mut run = |t: Tensor<f64>| {
            let mut s = Session::new(&mut p, NormMode::Eval, false);
            let xv = s.graph.constant(t);
            let y = mscsa_block(&mut s, xv, &cfg, &[2, 2], "mscsa.block").unwrap();
            s.graph.value(y).data().to_vec()
        };
        let both = run(x.clone());
        for n in 0..2 {
            let one = Tensor::new(vec![1, 4, e, e, e], x.data()[n * 4 * vox..(n + 1) * 4 * vox].to_vec()).unwrap();
            let y = run(one);
            for (a, b) in y.iter().zip(&both[n * 4 * vox..]) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn topk_count_is_monotone(n in 1usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(topk_count(lo, n) <= topk_count(hi, n));
        prop_assert_eq!(topk_count(1.0, n), n);
        prop_assert!(topk_count(lo, n) >= 1);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in mask_strategy([4, 5, 3]), b in mask_strategy([4, 5, 3])) {
        let ab = dice_score(&a, &b).unwrap();
        prop_assert_eq!(ab, dice_score(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn components_partition_foreground(m in mask_strategy([5, 4, 6])) {
        let (labels, count) = connected_components(&m);
        let mut seen = vec![false; count + 1];
        for (&l, &v) in labels.iter().zip(m.voxels()) {
            prop_assert_eq!(l == 0, v == 0);
            prop_assert!((l as usize) <= count);
            seen[l as usize] = true;
        }
        prop_assert!(seen[1..].iter().all(|&s| s));
    }
}

/// Spread of the per-fold mean volumes.
fn spread(volumes: &[usize], folds: &[Vec<usize>]) -> f64 {
    let means: Vec<f64> =
        folds.iter().map(|f| f.iter().map(|&i| volumes[i] as f64).sum::<f64>() / f.len() as f64).collect();
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64).sqrt()
}

#[test]
fn balanced_folds_beat_random_partitions() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
    // heavy-tailed volumes, like real lesion loads
    let volumes: Vec<usize> = (0..40).map(|i| ((i * 37 % 40) as f64).powi(3) as usize + 10).collect();
    let k = 5;
    let balanced = spread(&volumes, &size_balanced_folds(&volumes, k).unwrap());
    let mut random: Vec<f64> = (0..1000)
        .map(|_| {
            let mut idx: Vec<usize> = (0..volumes.len()).collect();
            idx.shuffle(&mut rng);
            let folds: Vec<Vec<usize>> = idx.chunks(volumes.len() / k).map(<[usize]>::to_vec).collect();
            spread(&volumes, &folds)
        })
        .collect();
    random.sort_by(f64::total_cmp);
    assert!(balanced < random[500], "balanced {balanced} vs median {}", random[500]);
}
