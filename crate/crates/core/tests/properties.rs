use msseg::labels::BinaryMask;
use msseg::metrics::{confusion, connected_components, dice, evaluate, Connectivity, LesionCriteria};
use msseg::net::{forward, init_parameters, Tensor, UNetConfig};
use msseg::seqdrop::DropoutPolicy;
use msseg::volume::{normalize, read_volume, write_volume, Dims, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims(max: usize) -> impl Strategy<Value = Dims> {
    (1..=max, 1..=max, 1..=max).prop_map(|(x, y, z)| Dims::new(x, y, z).unwrap())
}

fn volume() -> impl Strategy<Value = Volume> {
    dims(6).prop_flat_map(|d| {
        prop::collection::vec(-1e3f32..1e3, d.len()).prop_map(move |v| Volume::new("v", d, v).unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    dims(6).prop_flat_map(|d| {
        let n = d.len();
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)).prop_map(move |(a, b)| {
            let m = |v: Vec<bool>| BinaryMask::new(d, v.into_iter().map(u8::from).collect()).unwrap();
            (m(a), m(b))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent_with_unit_range(v in volume()) {
        let n = normalize(&v);
        let lo = v.voxels().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = v.voxels().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if lo < hi {
            let min = n.voxels().iter().cloned().fold(f32::INFINITY, f32::min);
            let max = n.voxels().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(min, 0.0);
            prop_assert!((max as f64 - 1.0).abs() <= 1e-12);
            let nn = normalize(&n);
            for (a, b) in n.voxels().iter().zip(nn.voxels()) {
                prop_assert!((*a as f64 - *b as f64).abs() <= 1e-12);
            }
        } else {
            prop_assert!(n.is_all_zero());
        }
    }

    #[test]
    fn volume_file_round_trip_preserves_bits(v in volume()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vol");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        prop_assert_eq!(back.name(), v.name());
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert!(back.voxels().iter().zip(v.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dice_symmetric_and_one_iff_equal((a, b) in mask_pair()) {
        let ab = dice(&confusion(&a, &b).unwrap());
        let ba = dice(&confusion(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab == 1.0, a == b);
        let m = evaluate(&a, &b, &LesionCriteria::default()).unwrap();
        for v in m.values().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn components_survive_translation((a, b) in mask_pair(), shift in (0usize..3, 0usize..3, 0usize..3)) {
        let d = a.dims();
        let big = Dims::new(d.nx + shift.0 + 1, d.ny + shift.1 + 1, d.nz + shift.2 + 1).unwrap();
        let pad = |m: &BinaryMask| BinaryMask::from_fn(big, |x, y, z| {
            x >= shift.0 && y >= shift.1 && z >= shift.2
                && x - shift.0 < d.nx && y - shift.1 < d.ny && z - shift.2 < d.nz
                && m.get(x - shift.0, y - shift.1, z - shift.2)
        });
        let (pa, pb) = (pad(&a), pad(&b));
        for c in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            let small = connected_components(&a, c);
            let large = connected_components(&pa, c);
            let mut s: Vec<usize> = small.components.iter().map(Vec::len).collect();
            let mut l: Vec<usize> = large.components.iter().map(Vec::len).collect();
            s.sort();
            l.sort();
            prop_assert_eq!(s, l);
            let crit = LesionCriteria::with_connectivity(c);
            prop_assert_eq!(evaluate(&a, &b, &crit).unwrap(), evaluate(&pa, &pb, &crit).unwrap());
        }
    }

    #[test]
    fn network_preserves_spatial_shape(
        levels in 1usize..=3,
        mult in (1usize..=2, 1usize..=2, 1usize..=2),
        in_channels in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let cfg = UNetConfig { levels, root_features: 2, in_channels, ..Default::default() };
        let f = cfg.divisor();
        let d = Dims::new(f * mult.0, f * mult.1, f * mult.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_parameters(&cfg, &mut rng).unwrap();
        let x = Tensor::from_vec(in_channels, d, (0..in_channels * d.len()).map(|_| rng.random::<f64>()).collect());
        let p = forward(&params, &cfg, &x).unwrap();
        prop_assert_eq!(p.dims(), d);
        prop_assert_eq!(p.channels(), cfg.classes);
        for v in 0..d.len() {
            let s = p.channel(0)[v] + p.channel(1)[v];
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(&p.channel(1)[v]));
        }
    }
}

#[test]
fn dropout_always_keeps_a_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let policies: Vec<DropoutPolicy> = (1..=6)
        .flat_map(|c| {
            let random: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
            [DropoutPolicy::uniform(c).unwrap(), DropoutPolicy::new(random).unwrap()]
        })
        .collect();
    for i in 0..1_000_000 {
        let p = &policies[i % policies.len()];
        let kept = p.draw(&mut rng);
        assert!(!kept.is_empty() && kept.len() <= p.channels());
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }
}
