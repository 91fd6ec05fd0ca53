mod support;

use garment::{combine_descriptors, pool, FeatureMap, PoolingSpec};
use proptest::prelude::*;
use rand::Rng;
use support::*;

fn random_map(r: &mut rand_chacha::ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let values = (0..c * h * w).map(|_| 1.0 - r.random::<f64>()).collect();
    FeatureMap::new(c, h, w, values).unwrap()
}

#[test]
fn constant_map_pools_to_constant() {
    let m = FeatureMap::new(3, 2, 2, vec![0.5; 12]).unwrap();
    for spec in [PoolingSpec::spoc(), PoolingSpec::mac(), PoolingSpec::gem(3.0), PoolingSpec::gem(7.5)] {
        for v in pool(&m, &spec).unwrap() {
            assert!((v - 0.5).abs() < 1e-15, "{spec:?} gave {v}");
        }
    }
}

#[test]
fn invalid_activations_name_the_channel() {
    let mut values = vec![0.1; 8];
    values[5] = -0.2;
    let err = FeatureMap::new(2, 2, 2, values).unwrap_err().to_string();
    assert!(err.contains("channel 1"), "{err}");
    let mut values = vec![0.1; 8];
    values[1] = f64::INFINITY;
    assert!(FeatureMap::new(2, 2, 2, values).unwrap_err().to_string().contains("channel 0"));
}

#[test]
fn gem_p1_is_spoc() {
    let mut r = rng(3);
    for _ in 0..100 {
        let m = random_map(&mut r, 8, 5, 5);
        let spoc = pool(&m, &PoolingSpec::spoc()).unwrap();
        let gem1 = pool(&m, &PoolingSpec::gem(1.0)).unwrap();
        for (a, b) in spoc.iter().zip(&gem1) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn large_p_gem_approaches_mac() {
    let mut r = rng(4);
    // The gap is at most MAC * (1 - cells^(-1/p)); two cells keep it under 1e-3.
    for _ in 0..100 {
        let m = random_map(&mut r, 8, 1, 2);
        let mac = pool(&m, &PoolingSpec::mac()).unwrap();
        let gem = pool(&m, &PoolingSpec::gem(1000.0)).unwrap();
        for (a, b) in mac.iter().zip(&gem) {
            assert!((a - b).abs() <= 1e-3);
        }
    }
    for _ in 0..100 {
        let m = random_map(&mut r, 8, 7, 7);
        let mac = pool(&m, &PoolingSpec::mac()).unwrap();
        let gem = pool(&m, &PoolingSpec::gem(1000.0)).unwrap();
        for (a, b) in mac.iter().zip(&gem) {
            let bound = a * (1.0 - 49f64.powf(-1e-3));
            assert!(*b <= a + 1e-12 && a - b <= bound + 1e-12);
        }
    }
}

#[test]
fn combine_single_spec_is_normalized_pool() {
    let mut r = rng(4);
    let m = random_map(&mut r, 6, 3, 4);
    let pooled = pool(&m, &PoolingSpec::gem(3.0)).unwrap();
    let combined = combine_descriptors(&m, &[PoolingSpec::gem(3.0)]).unwrap();
    for (a, b) in normalized(&pooled).iter().zip(&combined) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn combine_gem1_spoc_halves_match() {
    let mut r = rng(5);
    let m = random_map(&mut r, 6, 3, 4);
    let out = combine_descriptors(&m, &[PoolingSpec::gem(1.0), PoolingSpec::spoc()]).unwrap();
    let spoc = normalized(&pool(&m, &PoolingSpec::spoc()).unwrap());
    for c in 0..6 {
        assert!((out[c] - out[6 + c]).abs() < 1e-15);
        assert!((out[c] - spoc[c] / 2f64.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn combine_gem_mac_matches_oracle() {
    let mut r = rng(6);
    for _ in 0..20 {
        let m = random_map(&mut r, 16, 7, 7);
        let got = combine_descriptors(&m, &[PoolingSpec::gem(3.0), PoolingSpec::mac()]).unwrap();
        let want = gem_mac_oracle(m.values(), 16, 3.0);
        assert_eq!(got.len(), 32);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_descriptor_is_degenerate() {
    let m = FeatureMap::new(2, 2, 2, vec![0.0; 8]).unwrap();
    assert!(combine_descriptors(&m, &[PoolingSpec::mac()]).is_err());
    assert!(combine_descriptors(&m, &[]).is_err());
}

#[test]
fn spec_parsing() {
    assert_eq!("gem:2.5".parse::<PoolingSpec>().unwrap(), PoolingSpec::gem(2.5));
    assert_eq!("MAC".parse::<PoolingSpec>().unwrap(), PoolingSpec::mac());
    assert_eq!("gem".parse::<PoolingSpec>().unwrap(), PoolingSpec::gem(3.0));
    assert!("gem:0".parse::<PoolingSpec>().is_err());
    assert!("avg".parse::<PoolingSpec>().is_err());
}

fn arb_map() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..4, 1usize..5, 1usize..5)
        .prop_flat_map(|(c, h, w)| prop::collection::vec(0.0..1.0f64, c * h * w).prop_map(move |v| (c, h, w, v)))
}

proptest! {
    #[test]
    fn gem_monotone_in_p((c, h, w, v) in arb_map()) {
        let m = FeatureMap::new(c, h, w, v).unwrap();
        let grid = [1.0, 2.0, 3.0, 10.0, 100.0];
        let outs: Vec<Vec<f64>> = grid.iter().map(|&p| pool(&m, &PoolingSpec::gem(p)).unwrap()).collect();
        for pair in outs.windows(2) {
            for (lo, hi) in pair[0].iter().zip(&pair[1]) {
                prop_assert!(*hi >= lo - 1e-12 * lo.abs().max(1.0));
            }
        }
    }

    #[test]
    fn pooling_ignores_spatial_order((c, h, w, v) in arb_map(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let plane = h * w;
        let mut perm: Vec<usize> = (0..plane).collect();
        perm.shuffle(&mut rng(seed));
        let shuffled: Vec<f64> = (0..c)
            .flat_map(|ch| perm.iter().map(move |&p| (ch, p)))
            .map(|(ch, p)| v[ch * plane + p])
            .collect();
        let a = FeatureMap::new(c, h, w, v.clone()).unwrap();
        let b = FeatureMap::new(c, h, w, shuffled).unwrap();
        for spec in [PoolingSpec::spoc(), PoolingSpec::mac(), PoolingSpec::gem(3.0)] {
            let (x, y) = (pool(&a, &spec).unwrap(), pool(&b, &spec).unwrap());
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn combined_descriptor_is_unit((c, h, w, v) in arb_map()) {
        let v: Vec<f64> = v.into_iter().map(|x| x + 1e-3).collect();
        let m = FeatureMap::new(c, h, w, v).unwrap();
        let out = combine_descriptors(&m, &[PoolingSpec::gem(3.0), PoolingSpec::mac(), PoolingSpec::spoc()]).unwrap();
        prop_assert!((dot(&out, &out).sqrt() - 1.0).abs() <= 1e-6);
    }
}
