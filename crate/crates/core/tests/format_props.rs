//! Property tests for the tensor file format and the config format.

use neuralign::data::bten::{decode, encode};
use neuralign::data::{CfgFile, RoleTag};
use neuralign::DenseArray;
use proptest::prelude::*;

fn role_strategy() -> impl Strategy<Value = RoleTag> {
    prop_oneof![
        Just(RoleTag::Generic),
        Just(RoleTag::Brain),
        Just(RoleTag::VisionStack),
        Just(RoleTag::TextStack),
        Just(RoleTag::Embedding),
        Just(RoleTag::Param),
        Just(RoleTag::Latent),
        Just(RoleTag::Similarity),
    ]
}

fn array_strategy() -> impl Strategy<Value = DenseArray<f32>> {
    prop::collection::vec(1usize..=5, 1..=3).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        prop::collection::vec(
            prop_oneof![
                any::<i16>().prop_map(|v| v as f32 / 128.0),
                Just(0.0f32),
                Just(-0.0f32),
                Just(f32::MIN_POSITIVE),
            ],
            n..=n,
        )
        .prop_map(move |data| DenseArray::from_vec(&dims, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn roundtrip_is_bit_exact(array in array_strategy(), role in role_strategy()) {
        let bytes = encode(&array, role);
        let (back, back_role) = decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(back_role, role);
        prop_assert_eq!(back.dims(), array.dims());
        // bit-level comparison, not float comparison
        let raw_a: Vec<u8> = array.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let raw_b: Vec<u8> = back.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        prop_assert_eq!(raw_a, raw_b);
        prop_assert_eq!(encode(&back, back_role), bytes);
    }

    #[test]
    fn any_single_byte_header_corruption_is_rejected(
        array in array_strategy(),
        role in role_strategy(),
        pos_frac in 0.0f64..1.0,
        delta in 1u8..=255,
    ) {
        let bytes = encode(&array, role);
        let header_len = 4 + 4 + 1 + 1 + 4 + array.rank() * 8 + 4;
        let pos = ((pos_frac * header_len as f64) as usize).min(header_len - 1);
        let mut bad = bytes.clone();
        bad[pos] = bad[pos].wrapping_add(delta);
        prop_assume!(bad[pos] != bytes[pos]);
        prop_assert!(decode::<f32>(&bad).is_err(), "byte {} + {} accepted", pos, delta);
    }

    #[test]
    fn cfg_roundtrip(entries in prop::collection::vec(("[a-z][a-z0-9_]{0,8}", "[ -~&&[^=#\\[\\]]]{0,12}"), 1..8)) {
        let mut cfg = CfgFile::new();
        for (i, (k, v)) in entries.iter().enumerate() {
            cfg.set(if i % 2 == 0 { "alpha" } else { "beta" }, k, v.trim());
        }
        let text = cfg.to_string();
        let back = CfgFile::parse(&text).unwrap();
        for s in cfg.sections() {
            for (k, v) in &s.entries {
                prop_assert_eq!(back.get(&s.name, k), Some(v.as_str()));
            }
        }
    }
}
