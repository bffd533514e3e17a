//! Cross-module pipeline tests: compress → fit → archive → read → enhance,
//! plus property-based invariants over randomized volumes.

use proptest::prelude::*;
use tempfile::tempdir;

use gwlz_core::codec::{compress, decompress, CodecConfig};
use gwlz_core::container::{
    archive_from_bytes, archive_to_bytes, read_archive, write_archive, QualityRecord,
};
use gwlz_core::enhancer::{enhance, fit, ClampMode};
use gwlz_core::grouping::{build_spec, compute_stats, GroupStrategy};
use gwlz_core::metrics::psnr;
use gwlz_core::nn::TrainConfig;
use gwlz_core::volume::{
    gen_synthetic, load_raw, save_raw, ByteOrder, SyntheticKind, SyntheticSpec, Volume,
};

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn full_round_trip_through_archive() {
    let vol = gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::SkewedExponential,
        dims: (16, 16, 16),
        seed: 99,
        amplitude: 8.0,
    })
    .unwrap();
    let ccfg = CodecConfig::from_reb(1e-2, vol.vrange()).unwrap();
    let (payload, dec) = compress(&vol, &ccfg).unwrap();
    let bundle = fit(&vol, &dec, 3, GroupStrategy::Quantile, &train_cfg(5, 7), 0, 1).unwrap();
    let enhanced = enhance(&dec, &bundle, ClampMode::None).unwrap();
    let quality = QualityRecord {
        psnr_base: psnr(&vol, &dec).unwrap(),
        psnr_enhanced: psnr(&vol, &enhanced).unwrap(),
    };

    let dir = tempdir().unwrap();
    let path = dir.path().join("vol.gwlz");
    write_archive(&path, &payload, Some(&bundle), &quality, false).unwrap();

    // The reconstruction side sees only the file.
    let arch = read_archive(&path).unwrap();
    let dec2 = decompress(&arch.payload).unwrap();
    assert!(dec2.bit_eq(&dec));
    let enhanced2 = enhance(&dec2, arch.bundle.as_ref().unwrap(), ClampMode::None).unwrap();
    assert!(enhanced2.bit_eq(&enhanced));
}

#[test]
fn sidecar_bundle_matches_compress_bundle() {
    // The enhance-only mode over a (original, decompressed) file pair must
    // train the same bundle the integrated path embeds, seed for seed.
    let vol = gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::SkewedExponential,
        dims: (12, 12, 12),
        seed: 5,
        amplitude: 4.0,
    })
    .unwrap();
    let ccfg = CodecConfig::from_reb(1e-2, vol.vrange()).unwrap();
    let (_, dec) = compress(&vol, &ccfg).unwrap();

    let dir = tempdir().unwrap();
    let orig_path = dir.path().join("a.f32");
    let dec_path = dir.path().join("b.f32");
    save_raw(&vol, &orig_path, ByteOrder::Little).unwrap();
    save_raw(&dec, &dec_path, ByteOrder::Little).unwrap();
    let vol2 = load_raw(&orig_path, vol.dims(), ByteOrder::Little).unwrap();
    let dec2 = load_raw(&dec_path, vol.dims(), ByteOrder::Little).unwrap();

    let cfg = train_cfg(4, 21);
    let direct = fit(&vol, &dec, 2, GroupStrategy::Quantile, &cfg, 0, 1).unwrap();
    let via_files = fit(&vol2, &dec2, 2, GroupStrategy::Quantile, &cfg, 0, 1).unwrap();
    for (a, b) in direct.models.iter().zip(&via_files.models) {
        match (a, b) {
            (Some(x), Some(y)) => assert!(x.bit_eq(y)),
            (None, None) => {}
            _ => panic!("bundles disagree"),
        }
    }
}

#[test]
fn reconstruction_side_grouping_matches() {
    // The group spec rebuilt from decompressed data alone must equal the
    // compression-side spec, and the serialized one matches both.
    let vol = gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::GaussianMixture,
        dims: (14, 14, 14),
        seed: 3,
        amplitude: 50.0,
    })
    .unwrap();
    let ccfg = CodecConfig::from_reb(5e-3, vol.vrange()).unwrap();
    let (_, dec) = compress(&vol, &ccfg).unwrap();
    let spec_a = build_spec(&dec, 6, GroupStrategy::Quantile).unwrap();
    let dec_again = decompress(&compress(&vol, &ccfg).unwrap().0).unwrap();
    let spec_b = build_spec(&dec_again, 6, GroupStrategy::Quantile).unwrap();
    assert_eq!(spec_a, spec_b);
    for (a, b) in spec_a.boundaries().iter().zip(spec_b.boundaries()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn stats_scales_stay_within_codec_bound() {
    let vol = gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::SkewedExponential,
        dims: (10, 10, 10),
        seed: 13,
        amplitude: 20.0,
    })
    .unwrap();
    let ccfg = CodecConfig::from_reb(1e-2, vol.vrange()).unwrap();
    let (_, dec) = compress(&vol, &ccfg).unwrap();
    let spec = build_spec(&dec, 4, GroupStrategy::Quantile).unwrap();
    let stats = compute_stats(&vol, &dec, &spec).unwrap();
    for st in stats.all() {
        assert!(st.res_scale as f64 <= ccfg.e_abs * (1.0 + 1e-6));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn raw_file_round_trip_is_bit_exact(
        d0 in 1usize..6,
        d1 in 1usize..6,
        d2 in 1usize..8,
        seed in any::<u32>(),
        big in any::<bool>(),
    ) {
        let vol = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::GaussianMixture,
            dims: (d0, d1, d2),
            seed: seed as u64,
            amplitude: 3.0,
        }).unwrap();
        let order = if big { ByteOrder::Big } else { ByteOrder::Little };
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.f32");
        let n = save_raw(&vol, &path, order).unwrap();
        prop_assert_eq!(n as usize, vol.len() * 4);
        let back = load_raw(&path, vol.dims(), order).unwrap();
        prop_assert!(back.bit_eq(&vol));
    }

    #[test]
    fn codec_bound_and_round_trip(
        d0 in 1usize..10,
        d1 in 1usize..10,
        d2 in 1usize..10,
        seed in any::<u32>(),
        reb in 1e-4f64..0.2,
        kind_pick in 0u8..3,
    ) {
        let kind = match kind_pick {
            0 => SyntheticKind::CosineField,
            1 => SyntheticKind::GaussianMixture,
            _ => SyntheticKind::SkewedExponential,
        };
        let vol = gen_synthetic(&SyntheticSpec {
            kind,
            dims: (d0, d1, d2),
            seed: seed as u64,
            amplitude: 10.0,
        }).unwrap();
        let range = vol.vrange();
        let e = if range > 0.0 { reb * range } else { reb };
        let cfg = CodecConfig::with_abs_bound(reb, e).unwrap();
        let (payload, dec) = compress(&vol, &cfg).unwrap();
        for (a, b) in vol.values().iter().zip(dec.values()) {
            prop_assert!((*a as f64 - *b as f64).abs() <= e);
        }
        let back = decompress(&payload).unwrap();
        prop_assert!(back.bit_eq(&dec));
        let bytes = payload.to_bytes().unwrap();
        let reparsed = gwlz_core::codec::CompressedPayload::from_bytes(&bytes).unwrap();
        prop_assert_eq!(reparsed.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn partition_counts_always_sum(
        seed in any::<u32>(),
        n_groups in 1usize..9,
        equal_width in any::<bool>(),
    ) {
        let vol = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::SkewedExponential,
            dims: (6, 6, 6),
            seed: seed as u64,
            amplitude: 5.0,
        }).unwrap();
        let strategy = if equal_width { GroupStrategy::EqualWidth } else { GroupStrategy::Quantile };
        let spec = build_spec(&vol, n_groups, strategy).unwrap();
        let stats = compute_stats(&vol, &vol, &spec).unwrap();
        let total: u64 = stats.all().iter().map(|s| s.count).sum();
        prop_assert_eq!(total, vol.len() as u64);
        for &v in vol.values() {
            prop_assert!(spec.assign(v) < n_groups);
        }
    }

    #[test]
    fn archive_bytes_round_trip(
        seed in any::<u32>(),
        with_bundle in any::<bool>(),
    ) {
        let vol = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::CosineField,
            dims: (8, 8, 8),
            seed: seed as u64,
            amplitude: 2.0,
        }).unwrap();
        let ccfg = CodecConfig::from_reb(1e-2, vol.vrange()).unwrap();
        let (payload, dec) = compress(&vol, &ccfg).unwrap();
        let bundle = if with_bundle {
            Some(fit(&vol, &dec, 2, GroupStrategy::Quantile, &train_cfg(1, 0), 0, 1).unwrap())
        } else {
            None
        };
        let quality = QualityRecord { psnr_base: 10.0, psnr_enhanced: 11.0 };
        let bytes = archive_to_bytes(&payload, bundle.as_ref(), &quality, false).unwrap();
        let arch = archive_from_bytes(&bytes).unwrap();
        let again = archive_to_bytes(&arch.payload, arch.bundle.as_ref(), &arch.quality, false).unwrap();
        prop_assert_eq!(bytes, again);
    }
}

#[test]
fn volume_rejects_overflowing_dims() {
    assert!(Volume::zeros((usize::MAX, 2, 2)).is_err());
    assert!(Volume::zeros((0, 1, 1)).is_err());
}
