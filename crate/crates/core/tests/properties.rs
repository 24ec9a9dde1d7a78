use proptest::prelude::*;

use speckind::data::{
    decode_dataset, encode_dataset, from_bit_vector, generate_dataset, split_dataset,
    to_bit_vector, ClassLabel, GeneratorConfig, IvMode, NamedKey,
};
use speckind::gbdt::features::{decode_features, encode_features};
use speckind::gbdt::io::{decode_ensemble, encode_ensemble};
use speckind::gbdt::{fit_gbdt, FeatureMatrix, GbdtHyperParams};
use speckind::harness::{
    machine_rows, parse_rows, Pipeline, ReportRow, RowResult, Scenario, ScenarioKind,
};
use speckind::metrics::{compute_metrics, ConfusionCounts, Rates};
use speckind::speck::{
    cbc_decrypt, cbc_encrypt, decrypt_block, encrypt_block, key_schedule, BlockState, CipherKey,
    InitializationVector,
};

fn key_strategy() -> impl Strategy<Value = NamedKey> {
    prop_oneof![
        Just(NamedKey::k1()),
        Just(NamedKey::k2()),
        any::<u64>().prop_map(|k| NamedKey::parse(&format!("{k:016x}")).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn block_roundtrip(w in any::<[u16; 4]>(), pt in any::<u32>(), rounds in 1usize..=22) {
        let s = key_schedule(CipherKey::new(w), rounds).unwrap();
        let ct = encrypt_block(BlockState::from_u32(pt), &s);
        prop_assert_eq!(decrypt_block(ct, &s).to_u32(), pt);
    }

    #[test]
    fn cbc_roundtrip(
        w in any::<[u16; 4]>(),
        rounds in 1usize..=22,
        iv in any::<u32>(),
        blocks in prop::collection::vec(any::<u32>(), 1..24),
    ) {
        let key = CipherKey::new(w);
        let pt: Vec<BlockState> = blocks.iter().map(|&b| BlockState::from_u32(b)).collect();
        let (iv, ct) = cbc_encrypt(&pt, key, rounds, InitializationVector::from_u32(iv)).unwrap();
        prop_assert_eq!(ct.len(), pt.len());
        prop_assert_eq!(cbc_decrypt(iv, &ct, key, rounds).unwrap(), pt);
    }

    #[test]
    fn bit_vector_bijection(v in any::<u32>()) {
        let bits = to_bit_vector(v);
        prop_assert!(bits.bits().iter().all(|&b| b <= 1));
        prop_assert_eq!(from_bit_vector(&bits), v);
    }

    #[test]
    fn dataset_encoding_roundtrip(
        key in key_strategy(),
        rounds in 1usize..=22,
        n in 1u64..40,
        seed in any::<u64>(),
        store_ivs in any::<bool>(),
        fixed in proptest::option::of(any::<u32>()),
    ) {
        let mut g = GeneratorConfig::new(key, rounds, n, seed);
        g.store_ivs = store_ivs;
        if let Some(iv) = fixed {
            g.iv_mode = IvMode::Fixed(iv);
        }
        let ds = generate_dataset(&g).unwrap();
        prop_assert_eq!(ds.header.class_counts, [n, n]);
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn split_partitions_records(n in 2u64..60, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let ds = generate_dataset(&GeneratorConfig::new(NamedKey::k1(), 5, n, 3)).unwrap();
        if let Ok((a, b)) = split_dataset(&ds, fraction, seed) {
            prop_assert_eq!(a.len() + b.len(), ds.len());
            let mut all: Vec<_> = a.records.iter().chain(&b.records).map(|r| (r.ciphertext.bits().to_vec(), r.label)).collect();
            let mut orig: Vec<_> = ds.records.iter().map(|r| (r.ciphertext.bits().to_vec(), r.label)).collect();
            all.sort();
            orig.sort();
            prop_assert_eq!(all, orig);
        }
    }

    #[test]
    fn metric_identities(tp in 0u64..10_000, tn in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let c = ConfusionCounts::new(tp, tn, fp, fn_);
        match compute_metrics(&c) {
            Err(_) => prop_assert_eq!(c.total(), 0),
            Ok(r) => {
                prop_assert_eq!(r.accuracy, (tp + tn) as f64 / (tp + tn + fp + fn_) as f64);
                prop_assert_eq!(r.tpr, (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64));
                prop_assert_eq!(r.tnr, (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64));
                prop_assert!((0.0..=1.0).contains(&r.accuracy));
            }
        }
    }

    #[test]
    fn scenario_kind_follows_fields(a in key_strategy(), b in key_strategy(), r in 1usize..=22, d in 0usize..3) {
        let e = match d { 0 => r, 1 => r + 1, _ => r.wrapping_sub(1) };
        match Scenario::new(a, b, r, e) {
            Ok(s) => {
                let want = ScenarioKind::of(a.key == b.key, r == e);
                prop_assert_eq!(s.kind(), want);
            }
            Err(_) => prop_assert!(!(1..=22).contains(&e)),
        }
    }

    #[test]
    fn report_rows_roundtrip(
        rows in prop::collection::vec(
            (any::<bool>(), key_strategy(), key_strategy(), 2usize..=21, 0usize..3,
             proptest::option::of(1u64..1_000_000), proptest::option::of((0.0f64..=1.0, proptest::option::of(0.0f64..=1.0), proptest::option::of(0.0f64..=1.0))), any::<u64>()),
            0..12,
        )
    ) {
        let rows: Vec<ReportRow> = rows
            .into_iter()
            .map(|(tl, a, b, r, d, n, m, seed)| ReportRow {
                pipeline: if tl { Pipeline::Tl } else { Pipeline::Dl },
                scenario: Scenario::new(a, b, r, [r, r + 1, r - 1][d]).unwrap(),
                samples_per_class: n,
                result: m.map_or(RowResult::Failed, |(accuracy, tpr, tnr)| RowResult::Metrics(Rates { accuracy, tpr, tnr })),
                seed,
            })
            .collect();
        prop_assert_eq!(parse_rows(&machine_rows(&rows)).unwrap(), rows);
    }

    #[test]
    fn feature_encoding_roundtrip(rows in 1usize..20, cols in 1usize..10, seed in any::<u64>()) {
        let mut x = seed;
        let values: Vec<f32> = (0..rows * cols)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (x >> 40) as f32 / 1024.0 - 8000.0
            })
            .collect();
        let labels: Vec<ClassLabel> = (0..rows).map(|i| if i % 2 == 0 { ClassLabel::First } else { ClassLabel::Second }).collect();
        let fm = FeatureMatrix::new(rows, cols, values, labels).unwrap();
        prop_assert_eq!(decode_features(&encode_features(&fm)).unwrap(), fm);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ensemble_encoding_roundtrip(seed in any::<u64>(), depth in 1usize..5, trees in 1usize..6) {
        let rows = 60;
        let mut x = seed | 1;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..rows {
            for _ in 0..4 {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                values.push((x % 1000) as f32 / 100.0);
            }
            labels.push(if i % 2 == 0 { ClassLabel::First } else { ClassLabel::Second });
        }
        let fm = FeatureMatrix::new(rows, 4, values, labels).unwrap();
        let hp = GbdtHyperParams { max_depth: depth, n_estimators: trees, ..GbdtHyperParams::default() };
        let ens = fit_gbdt(&fm, &hp, seed).unwrap();
        let bytes = encode_ensemble(&ens);
        let back = decode_ensemble(&bytes).unwrap();
        prop_assert_eq!(&back, &ens);
        prop_assert_eq!(encode_ensemble(&back), bytes);
    }
}
