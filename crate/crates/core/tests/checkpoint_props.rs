use latentcrf::checkpoint::Container;
use latentcrf::params::NamedTensor;
use proptest::collection::vec;
use proptest::prelude::*;

fn container() -> impl Strategy<Value = Container> {
    let tensor = (1usize..4, 1usize..5).prop_flat_map(|(r, c)| (Just((r, c)), vec(proptest::num::f64::ANY, r * c)));
    (vec(tensor, 0..4), any::<u64>()).prop_map(|(ts, seed)| {
        let mut c = Container::new("props").with_meta("seed", seed);
        for (i, ((r, cols), data)) in ts.into_iter().enumerate() {
            c.push(NamedTensor::new(format!("t{i}"), vec![r, cols], data));
        }
        c
    })
}

fn bits(c: &Container) -> Vec<Vec<u64>> {
    c.tensors.iter().map(|t| t.data.iter().map(|v| v.to_bits()).collect()).collect()
}

proptest! {
    #[test]
    fn roundtrip_preserves_every_bit(c in container()) {
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.metadata, &c.metadata);
        prop_assert_eq!(bits(&back), bits(&c));
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_single_bit_flip_is_detected(c in container(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = c.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(Container::from_bytes(&bytes).is_err());
    }
}
