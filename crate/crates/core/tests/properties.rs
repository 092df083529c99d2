use candle_core::{DType, Device, Tensor};
use geocycle::data::{preprocess, split_identities, train_count};
use geocycle::eval::{rank1_accuracy, semantic_accuracy, Gallery};
use geocycle::losses::{
    full_objective, perceptual_distance, pixel_cycle_loss, FeatureMap, LossTerms, LossWeights,
};
use geocycle::networks::{
    build_loss_network, GeometryDiscriminatorSpec, ImageBatch, LossNetwork, LossNetworkConfig, LossNetworkProvider,
    LossNetworkSpec,
};
use geocycle::train::HistoryPool;
use proptest::prelude::*;
use std::sync::OnceLock;

fn map(shape: (usize, usize, usize, usize), v: Vec<f64>) -> FeatureMap {
    FeatureMap::new(Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
}

fn scalar(t: Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn shaped_pair() -> impl Strategy<Value = ((usize, usize, usize, usize), Vec<f64>, Vec<f64>)> {
    (1usize..3, 1usize..5, 1usize..9, 1usize..9).prop_flat_map(|s| {
        let n = s.0 * s.1 * s.2 * s.3;
        (Just(s), prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n))
    })
}

fn images(n: usize, res: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..=1.0, n * 3 * res * res)
}

fn batch(v: Vec<f32>, n: usize, res: usize) -> ImageBatch {
    ImageBatch::new(Tensor::from_vec(v, (n, 3, res, res), &Device::Cpu).unwrap()).unwrap()
}

fn phi() -> &'static LossNetwork {
    static PHI: OnceLock<LossNetwork> = OnceLock::new();
    PHI.get_or_init(|| {
        let cfg = LossNetworkConfig { spec: LossNetworkSpec::compact(), provider: LossNetworkProvider::FixedRandom { seed: 9 } };
        build_loss_network(&cfg, 64, DType::F32).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perceptual_distance_is_a_symmetric_premetric((shape, a, b) in shaped_pair()) {
        let (fa, fb) = (map(shape, a.clone()), map(shape, b));
        let ab = scalar(perceptual_distance(&fa, &fb).unwrap());
        let ba = scalar(perceptual_distance(&fb, &fa).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1e-300));
        prop_assert_eq!(scalar(perceptual_distance(&fa, &map(shape, a)).unwrap()), 0.0);
    }

    #[test]
    fn constant_offset_gives_its_square((shape, a, _) in shaped_pair(), c in -3.0f64..3.0) {
        let b: Vec<f64> = a.iter().map(|v| v + c).collect();
        let d = scalar(perceptual_distance(&map(shape, a), &map(shape, b)).unwrap());
        prop_assert!((d - c * c).abs() <= 1e-6 * (c * c).max(1e-12) + 1e-12);
    }

    #[test]
    fn pixel_cycle_loss_nonnegative_and_zero_on_self(v in images(1, 32), w in images(1, 32)) {
        let (x, y) = (batch(v.clone(), 1, 32), batch(w, 1, 32));
        prop_assert!(scalar(pixel_cycle_loss(&x, &y).unwrap()) >= 0.0);
        prop_assert_eq!(scalar(pixel_cycle_loss(&x, &batch(v, 1, 32)).unwrap()), 0.0);
    }

    #[test]
    fn breakdown_total_is_the_weighted_sum(
        t in prop::array::uniform6(0.0f64..20.0),
        lc in 0.0f64..20.0, lg in 0.0f64..5.0, lp in 0.0f64..5.0,
    ) {
        let terms = LossTerms { adv_patch_x: t[0], adv_patch_y: t[1], adv_geo_x: t[2], adv_geo_y: t[3], cyc_x: t[4], cyc_y: t[5] };
        let w = LossWeights { lambda_cyc: lc, lambda_geo: lg, lambda_patch: lp };
        let b = full_objective(terms, &w).unwrap();
        let expect = lp * (t[0] + t[1]) + lg * (t[2] + t[3]) + lc * (t[4] + t[5]);
        prop_assert!((b.total - expect).abs() <= 1e-6 * expect.max(1e-12));
    }

    #[test]
    fn zero_geometry_weight_reduces_to_the_cycle_objective(t in prop::array::uniform6(0.0f64..20.0), lc in 0.01f64..20.0) {
        let terms = LossTerms { adv_patch_x: t[0], adv_patch_y: t[1], adv_geo_x: t[2], adv_geo_y: t[3], cyc_x: t[4], cyc_y: t[5] };
        let w = LossWeights { lambda_cyc: lc, lambda_geo: 0.0, lambda_patch: 1.0 };
        // GAN(G_x, D_x) + GAN(G_y, D_y) + λ·cyc
        let eq4 = t[0] + t[1] + lc * (t[4] + t[5]);
        let b = full_objective(terms, &w).unwrap();
        prop_assert!((b.total - eq4).abs() <= 1e-6 * eq4.max(1e-12));
    }

    #[test]
    fn preprocessing_stays_in_range(w in 1u32..40, h in 1u32..40, seed in any::<u64>(), res in prop::sample::select(vec![32usize, 64])) {
        let mut s = seed;
        let img = image::RgbImage::from_fn(w, h, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = (s >> 40) as u8;
            image::Rgb([b, b.wrapping_mul(3), b.wrapping_add(7)])
        });
        let t = preprocess(&img, res).unwrap();
        prop_assert_eq!(t.dims(), &[3, res, res]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        prop_assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn splits_are_disjoint_complete_and_seeded(n in 2usize..300, f in 0.05f64..0.95, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i:04}")).collect();
        let (train, test) = split_identities(&ids, f, seed).unwrap();
        prop_assert_eq!(train.len(), train_count(n, f));
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert!(train.iter().all(|t| test.binary_search(t).is_err()));
        prop_assert_eq!(split_identities(&ids, f, seed).unwrap(), (train, test));
    }

    #[test]
    fn pool_holds_exactly_capacity_after_filling(cap in 0usize..8, extra in 0usize..8, seed in any::<u64>()) {
        let mut pool = HistoryPool::new(cap, seed);
        let one = batch(vec![0.5; 3 * 32 * 32], 1, 32);
        for _ in 0..cap + extra {
            let out = pool.query(&one).unwrap();
            prop_assert_eq!(out.batch(), 1);
        }
        prop_assert_eq!(pool.len(), cap);
    }

    #[test]
    fn geometry_discriminator_wiring(k in 3u32..7, c in prop::array::uniform3(1usize..40), b in 1usize..16) {
        let tap1 = 1usize << k;
        let spec = GeometryDiscriminatorSpec::standard(tap1, c, b).unwrap();
        let layers = spec.layers();
        prop_assert_eq!(layers.len(), k as usize);
        prop_assert!(layers.iter().all(|l| l.stride == 2));
        prop_assert_eq!(layers[0].in_channels, c[0]);
        prop_assert_eq!(layers[1].in_channels, layers[0].out_channels + c[1]);
        prop_assert_eq!(layers[2].in_channels, layers[1].out_channels + c[2]);
        prop_assert_eq!(layers.last().unwrap().output_size, 1);
        prop_assert_eq!(layers.last().unwrap().out_channels, 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn semantic_accuracy_is_a_symmetric_premetric(v in images(2, 64), w in images(2, 64)) {
        let (x, y) = (batch(v.clone(), 2, 64), batch(w, 2, 64));
        let xy = semantic_accuracy(&x, &y, phi()).unwrap();
        let yx = semantic_accuracy(&y, &x, phi()).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() <= 1e-6 * xy.max(1e-12));
        prop_assert_eq!(semantic_accuracy(&x, &batch(v, 2, 64), phi()).unwrap(), 0.0);
    }

    #[test]
    fn probes_identical_to_the_gallery_are_all_found(v in images(3, 64)) {
        let x = batch(v, 3, 64);
        let ids: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
        let g = Gallery::from_images(ids.clone(), &x, phi()).unwrap();
        let emb = geocycle::eval::embed(&x, phi()).unwrap();
        // Random images can collide in embedding space only with measure zero.
        prop_assert_eq!(rank1_accuracy(&emb, &ids, &g).unwrap(), 100.0);
    }
}
