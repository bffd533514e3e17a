//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`). Run with
//! `cargo test -p gwlz-cli --test acceptance`.

use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use gwlz_core::codec::{self, compress, decompress, CodecConfig};
use gwlz_core::container::{
    self, archive_from_bytes, archive_to_bytes, enhancer_weight_bytes, read_archive,
    sidecar_from_bytes, sidecar_to_bytes, write_archive, QualityRecord, SidecarProvenance,
};
use gwlz_core::enhancer::{apply_residual, enhance, fit, predict_residual, ClampMode, EnhancerBundle};
use gwlz_core::grouping::{build_spec, compute_stats, GroupStrategy, MaskedPair};
use gwlz_core::metrics::{psnr, psnr_f64};
use gwlz_core::nn::{
    analytic_flat_grads, grad_check, init_model, init_model_with, max_rel_err, numeric_flat_grads,
    ModelWeights, TrainConfig,
};
use gwlz_core::volume::{gen_synthetic, load_raw, save_raw, ByteOrder, SyntheticKind, SyntheticSpec, Volume};

fn criterion<F: FnOnce() + UnwindSafe>(id: u32, name: &str, body: F) {
    let start = Instant::now();
    let outcome = catch_unwind(body);
    let verdict = if outcome.is_ok() { "PASS" } else { "FAIL" };
    println!(
        "ACCEPTANCE {id:02} {name}: {verdict} ({:.1}s)",
        start.elapsed().as_secs_f64()
    );
    if let Err(panic) = outcome {
        resume_unwind(panic);
    }
}

fn desk_field() -> Volume {
    gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::SkewedExponential,
        dims: (64, 64, 64),
        seed: 7,
        amplitude: 10.0,
    })
    .unwrap()
}

fn desk_train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 1234,
        ..TrainConfig::default()
    }
}

fn random_pair(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> MaskedPair {
    let n = rows * cols;
    let mask: Vec<u8> = (0..n).map(|_| (rng.random::<f32>() < 0.7) as u8).collect();
    MaskedPair {
        rows,
        cols,
        input: (0..n)
            .map(|i| if mask[i] != 0 { rng.random::<f32>() } else { 0.0 })
            .collect(),
        target: (0..n)
            .map(|i| {
                if mask[i] != 0 {
                    rng.random::<f32>() * 2.0 - 1.0
                } else {
                    0.0
                }
            })
            .collect(),
        mask,
    }
}

fn random_weights(rng: &mut ChaCha8Rng) -> ModelWeights {
    let mut w = init_model_with(rng.random(), 9);
    for v in w.conv1_b.iter_mut().chain(w.conv2_w.iter_mut()) {
        *v = rng.random::<f32>() * 0.5 - 0.25;
    }
    for v in w.bn_beta.iter_mut().chain(w.bn_gamma.iter_mut()) {
        *v += rng.random::<f32>() * 0.2 - 0.1;
    }
    w.conv2_b = rng.random::<f32>() * 0.2;
    w
}

struct CliRun {
    status: i32,
    stdout: String,
}

fn gwlz(args: &[&str]) -> CliRun {
    let out = Command::new(env!("CARGO_BIN_EXE_gwlz"))
        .args(args)
        .output()
        .expect("spawn gwlz");
    CliRun {
        status: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
    }
}

fn csv_column(body: &str, column: &str) -> Vec<f64> {
    let mut lines = body.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header
        .iter()
        .position(|&h| h == column)
        .unwrap_or_else(|| panic!("no column {column}"));
    lines
        .map(|l| l.split(',').nth(idx).unwrap().parse().unwrap())
        .collect()
}

// ---------------------------------------------------------------------
// 1. Error-bound guarantee over >=1000 randomized volumes, exact, <60 s.
// ---------------------------------------------------------------------
#[test]
fn criterion_01_error_bound_guarantee() {
    criterion(1, "error-bound guarantee", || {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xB0D1);
        let mut total_elements = 0usize;
        let mut total_outliers = 0usize;
        for case in 0..1000u64 {
            let dims = (
                rng.random_range(1..=32usize),
                rng.random_range(1..=32usize),
                rng.random_range(1..=32usize),
            );
            let n = dims.0 * dims.1 * dims.2;
            let vol = match case % 5 {
                0 => gen_synthetic(&SyntheticSpec {
                    kind: SyntheticKind::CosineField,
                    dims,
                    seed: case,
                    amplitude: 10.0,
                })
                .unwrap(),
                1 => gen_synthetic(&SyntheticSpec {
                    kind: SyntheticKind::GaussianMixture,
                    dims,
                    seed: case,
                    amplitude: 100.0,
                })
                .unwrap(),
                2 => gen_synthetic(&SyntheticSpec {
                    kind: SyntheticKind::SkewedExponential,
                    dims,
                    seed: case,
                    amplitude: 5.0,
                })
                .unwrap(),
                3 => {
                    let c = rng.random_range(-100.0f32..100.0);
                    Volume::new(dims, vec![c; n]).unwrap()
                }
                _ => {
                    // Noise with occasional huge spikes: the escape path.
                    let values: Vec<f32> = (0..n)
                        .map(|i| {
                            if i % 37 == 19 {
                                rng.random_range(-1e8f32..1e8)
                            } else {
                                rng.random_range(-1.0f32..1.0)
                            }
                        })
                        .collect();
                    Volume::new(dims, values).unwrap()
                }
            };
            let reb = 10f64.powf(rng.random_range(-4.0..-1.0));
            let range = vol.vrange();
            let e = if range > 0.0 { reb * range } else { reb };
            let mut cfg = CodecConfig::with_abs_bound(reb, e).unwrap();
            if case % 7 == 3 {
                cfg.max_quant_code = 63;
            }
            let (payload, dec) = compress(&vol, &cfg).unwrap();
            for (a, b) in vol.values().iter().zip(dec.values()) {
                let err = (*a as f64 - *b as f64).abs();
                assert!(err <= e, "bound violated: |{a} - {b}| = {err} > {e}");
            }
            let back = decompress(&payload).unwrap();
            assert!(back.bit_eq(&dec), "decompression disagrees with compressor");
            total_elements += n;
            total_outliers += payload.outlier_count();
        }
        let elapsed = start.elapsed();
        assert!(total_outliers > 0, "spiky cases never hit the escape path");
        assert!(
            elapsed.as_secs_f64() < 60.0,
            "took {elapsed:?} for {total_elements} elements"
        );
    });
}

// ---------------------------------------------------------------------
// 2. PSNR oracle: hand-derived cases to 1e-6 dB; identical inputs -> inf.
// ---------------------------------------------------------------------
#[test]
fn criterion_02_psnr_oracle() {
    criterion(2, "PSNR oracle", || {
        let got = psnr_f64(&[0.0, 1.0], &[0.0, 0.9]).unwrap();
        assert!((got - 23.0103).abs() < 1e-6, "got {got}");
        let got = psnr_f64(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((got - 6.0206).abs() < 1e-6, "got {got}");
        let v = Volume::new((1, 1, 2), vec![0.25, 0.75]).unwrap();
        assert_eq!(psnr(&v, &v).unwrap(), f64::INFINITY);
        assert_eq!(psnr_f64(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), f64::INFINITY);
    });
}

// ---------------------------------------------------------------------
// 3. Reported improvement percentages recompute from the rounded PSNR
//    columns within +/-0.15 points.
// ---------------------------------------------------------------------
#[test]
fn criterion_03_improvement_arithmetic() {
    criterion(3, "improvement-percentage arithmetic", || {
        // (psnr_base, psnr_enhanced, printed improvement %)
        let rows: [(f64, f64, f64); 12] = [
            (60.7, 73.0, 20.2),
            (72.8, 80.8, 11.0),
            (77.6, 83.8, 8.1),
            (88.0, 91.9, 4.4),
            (92.7, 95.3, 2.8),
            (105.1, 106.7, 1.5),
            (72.4, 77.6, 7.3),
            (77.3, 85.0, 9.9),
            (80.7, 88.4, 9.6),
            (89.6, 97.7, 9.0),
            (93.4, 102.1, 9.3),
            (105.0, 112.3, 7.0),
        ];
        for (base, enhanced, printed) in rows {
            let computed = gwlz_core::metrics::improvement_pct(base, enhanced).unwrap();
            assert!(
                (computed - printed).abs() <= 0.15,
                "{base} -> {enhanced}: computed {computed:.3}, printed {printed}"
            );
        }
    });
}

// ---------------------------------------------------------------------
// 4. Gradient correctness on 50 random instances; a negated backward
//    pass must fail the check.
// ---------------------------------------------------------------------
#[test]
fn criterion_04_gradient_correctness() {
    criterion(4, "gradient correctness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6AD5);
        let mut checked = 0;
        while checked < 50 {
            let w = random_weights(&mut rng);
            let pair = random_pair(&mut rng, 8, 8);
            if pair.mask_count() == 0 {
                continue;
            }
            let err = grad_check(&w, &pair, 1e-4);
            assert!(err < 1e-3, "instance {checked}: relative error {err}");
            checked += 1;
        }

        // Sabotage: negate the first-layer weight gradients.
        let w = random_weights(&mut rng);
        let pair = random_pair(&mut rng, 8, 8);
        let (_, mut analytic) = analytic_flat_grads(&w, &pair);
        for g in &mut analytic[..9 * w.channels()] {
            *g = -*g;
        }
        let numeric = numeric_flat_grads(&w, &pair, 1e-4);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err > 1e-3, "negated backward passed the check: {err}");
        assert!((err - 2.0).abs() < 0.5, "expected ~2, got {err}");
    });
}

// ---------------------------------------------------------------------
// 5. Mask isolation: out-of-mask targets change nothing, exactly.
// ---------------------------------------------------------------------
#[test]
fn criterion_05_mask_isolation() {
    criterion(5, "mask isolation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x3A5C);
        for _ in 0..10 {
            let w = random_weights(&mut rng);
            let mut pair = random_pair(&mut rng, 8, 8);
            assert!(pair.mask.iter().any(|&m| m == 0));
            let (loss_before, grads_before) = analytic_flat_grads(&w, &pair);
            for i in 0..pair.mask.len() {
                if pair.mask[i] == 0 {
                    pair.target[i] = rng.random_range(-1e6f32..1e6);
                }
            }
            let (loss_after, grads_after) = analytic_flat_grads(&w, &pair);
            assert_eq!(loss_before.to_bits(), loss_after.to_bits());
            for (a, b) in grads_before.iter().zip(&grads_after) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    });
}

// ---------------------------------------------------------------------
// 6. Identity safety: zero-initialized bundles leave PSNR bit-identical.
// ---------------------------------------------------------------------
#[test]
fn criterion_06_identity_safety() {
    criterion(6, "identity safety", || {
        let vol = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::SkewedExponential,
            dims: (20, 20, 20),
            seed: 3,
            amplitude: 10.0,
        })
        .unwrap();
        let ccfg = CodecConfig::from_reb(1e-2, vol.vrange()).unwrap();
        let (_, dec) = compress(&vol, &ccfg).unwrap();
        let spec = build_spec(&dec, 4, GroupStrategy::Quantile).unwrap();
        let stats = compute_stats(&vol, &dec, &spec).unwrap();
        let bundle = EnhancerBundle {
            models: (0..4).map(|g| Some(init_model(g as u64))).collect(),
            spec,
            stats,
            hyper: gwlz_core::enhancer::ArchHyper::with_channels(9),
            axis: 0,
            train_meta: None,
        };
        let rhat = predict_residual(&bundle, &dec).unwrap();
        assert!(rhat.values().iter().all(|&r| r == 0.0));
        let enhanced = enhance(&dec, &bundle, ClampMode::None).unwrap();
        assert!(enhanced.bit_eq(&dec));
        let p_base = psnr(&vol, &dec).unwrap();
        let p_enh = psnr(&vol, &enhanced).unwrap();
        assert_eq!(p_base.to_bits(), p_enh.to_bits());
    });
}

// ---------------------------------------------------------------------
// 7. Desk-scale enhancement gain: 64^3 skewed field, reb 1e-2, 4 groups,
//    100 epochs -> at least +0.5 dB, within 10 minutes.
// ---------------------------------------------------------------------
#[test]
fn criterion_07_desk_scale_gain() {
    criterion(7, "desk-scale enhancement gain", || {
        let start = Instant::now();
        let vol = desk_field();
        let ccfg = CodecConfig::from_reb(1e-2, vol.vrange()).unwrap();
        let (_, dec) = compress(&vol, &ccfg).unwrap();
        let bundle = fit(
            &vol,
            &dec,
            4,
            GroupStrategy::Quantile,
            &desk_train_cfg(100),
            0,
            1,
        )
        .unwrap();
        let enhanced = enhance(&dec, &bundle, ClampMode::None).unwrap();
        let before = psnr(&vol, &dec).unwrap();
        let after = psnr(&vol, &enhanced).unwrap();
        assert!(
            after >= before + 0.5,
            "gain {:.3} dB below +0.5 dB ({before:.3} -> {after:.3})",
            after - before
        );
        assert!(start.elapsed().as_secs_f64() < 600.0);
    });
}

// ---------------------------------------------------------------------
// 8. Group-wise benefit: equal parameter budget, 4 groups beat 1 group's
//    final loss by >=5%; bench PSNR non-decreasing over {1,2,4}.
// ---------------------------------------------------------------------
#[test]
fn criterion_08_group_wise_benefit() {
    criterion(8, "group-wise benefit", || {
        let vol = desk_field();
        let ccfg = CodecConfig::from_reb(1e-2, vol.vrange()).unwrap();
        let (_, dec) = compress(&vol, &ccfg).unwrap();

        // 4 groups x 190 params against one 757-param model (36 channels).
        let four = fit(
            &vol,
            &dec,
            4,
            GroupStrategy::Quantile,
            &desk_train_cfg(100),
            0,
            1,
        )
        .unwrap();
        let sole_cfg = TrainConfig {
            channels: 36,
            ..desk_train_cfg(100)
        };
        let sole = fit(&vol, &dec, 1, GroupStrategy::Quantile, &sole_cfg, 0, 1).unwrap();
        let mean_loss = |b: &EnhancerBundle| -> f64 {
            let xs: Vec<f64> = b
                .train_meta
                .as_ref()
                .unwrap()
                .final_loss
                .iter()
                .flatten()
                .copied()
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let loss4 = mean_loss(&four);
        let loss1 = mean_loss(&sole);
        assert!(loss4 < loss1, "4-group loss {loss4} not below {loss1}");
        let improvement = 1.0 - loss4 / loss1;
        assert!(
            improvement >= 0.05,
            "loss improvement {:.1}% below 5%",
            improvement * 100.0
        );

        // Bench sweep over group counts through the CLI.
        let dir = tempdir().unwrap();
        let input = dir.path().join("field.f32");
        save_raw(&vol, &input, ByteOrder::Little).unwrap();
        let csv = dir.path().join("bench.csv");
        let curves = dir.path().join("curves");
        let run = gwlz(&[
            "bench",
            "--input",
            input.to_str().unwrap(),
            "--dims",
            "64x64x64",
            "--rebs",
            "0.01",
            "--groups-list",
            "1,2,4",
            "--epochs",
            "100",
            "--seed",
            "1234",
            "--out",
            csv.to_str().unwrap(),
            "--loss-curves",
            curves.to_str().unwrap(),
        ]);
        assert_eq!(run.status, 0);
        let body = std::fs::read_to_string(&csv).unwrap();
        let psnr_enh = csv_column(&body, "psnr_enh");
        assert_eq!(psnr_enh.len(), 3);
        assert!(
            psnr_enh[0] <= psnr_enh[1] && psnr_enh[1] <= psnr_enh[2],
            "PSNR not non-decreasing over groups: {psnr_enh:?}"
        );

        // Mean final training loss must not increase as groups refine.
        let mut mean_final = Vec::new();
        for g in [1, 2, 4] {
            let curve =
                std::fs::read_to_string(curves.join(format!("loss_reb0.01_g{g}.csv"))).unwrap();
            let mut last_per_group: std::collections::BTreeMap<usize, f64> = Default::default();
            for line in curve.lines().skip(1) {
                let mut cells = line.split(',');
                let _epoch: usize = cells.next().unwrap().parse().unwrap();
                let group: usize = cells.next().unwrap().parse().unwrap();
                let loss: f64 = cells.next().unwrap().parse().unwrap();
                last_per_group.insert(group, loss);
            }
            let losses: Vec<f64> = last_per_group.into_values().collect();
            mean_final.push(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        assert!(
            mean_final[0] >= mean_final[1] && mean_final[1] >= mean_final[2],
            "mean final loss not non-increasing over groups: {mean_final:?}"
        );
    });
}

// ---------------------------------------------------------------------
// 9. Overhead accounting: 16,640 weight bytes for 20 models; ratio is
//    the exact section quotient; overhead shrinks as REB shrinks.
// ---------------------------------------------------------------------
#[test]
fn criterion_09_overhead_accounting() {
    criterion(9, "overhead accounting", || {
        let vol = desk_field();
        let ccfg = CodecConfig::from_reb(1e-2, vol.vrange()).unwrap();
        let (payload, dec) = compress(&vol, &ccfg).unwrap();
        let bundle = fit(
            &vol,
            &dec,
            20,
            GroupStrategy::Quantile,
            &desk_train_cfg(1),
            0,
            1,
        )
        .unwrap();
        assert_eq!(bundle.trained_models(), 20, "expected all 20 groups trained");
        assert_eq!(enhancer_weight_bytes(&bundle), 16_640);

        let dir = tempdir().unwrap();
        let path = dir.path().join("twenty.gwlz");
        let quality = QualityRecord {
            psnr_base: psnr(&vol, &dec).unwrap(),
            psnr_enhanced: psnr(&vol, &dec).unwrap(),
        };
        write_archive(&path, &payload, Some(&bundle), &quality, false).unwrap();

        // Independent file walk: header is 37 bytes, then length-prefixed
        // payload and enhancer sections.
        let bytes = std::fs::read(&path).unwrap();
        let u64_at = |off: usize| {
            u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize
        };
        let payload_len = u64_at(37);
        let enhancer_len = u64_at(37 + 8 + payload_len);
        let arch = read_archive(&path).unwrap();
        assert_eq!(arch.payload_bytes, payload_len);
        assert_eq!(arch.enhancer_bytes, enhancer_len);
        let expected = enhancer_len as f64 / payload_len as f64;
        assert_eq!(container::overhead_ratio(&arch), expected);

        // Inspect reports the same weight byte count.
        let inspect = gwlz(&["inspect", path.to_str().unwrap()]);
        assert_eq!(inspect.status, 0);
        assert!(
            inspect.stdout.contains("weight_bytes=16640"),
            "inspect output:\n{}",
            inspect.stdout
        );

        // Fixed bundle configuration, shrinking REB: overhead must fall.
        let mut overheads = Vec::new();
        for reb in [1e-2, 1e-3, 1e-4] {
            let ccfg = CodecConfig::from_reb(reb, vol.vrange()).unwrap();
            let (payload, dec) = compress(&vol, &ccfg).unwrap();
            let bundle = fit(
                &vol,
                &dec,
                2,
                GroupStrategy::Quantile,
                &desk_train_cfg(1),
                0,
                1,
            )
            .unwrap();
            let blob = container::enhancer_blob_bytes(&bundle).unwrap();
            let psize = codec::compressed_size(&payload).unwrap();
            overheads.push(blob as f64 / psize as f64);
        }
        assert!(
            overheads[0] > overheads[1] && overheads[1] > overheads[2],
            "overhead not decreasing: {overheads:?}"
        );
    });
}

// ---------------------------------------------------------------------
// 10. Format round trips are bit-exact; every flipped byte is caught.
// ---------------------------------------------------------------------
#[test]
fn criterion_10_format_round_trips() {
    criterion(10, "format round trips", || {
        let dir = tempdir().unwrap();

        // Raw volumes.
        let vol = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::GaussianMixture,
            dims: (7, 9, 11),
            seed: 15,
            amplitude: 30.0,
        })
        .unwrap();
        for order in [ByteOrder::Little, ByteOrder::Big] {
            let path = dir.path().join("raw.f32");
            save_raw(&vol, &path, order).unwrap();
            assert!(load_raw(&path, vol.dims(), order).unwrap().bit_eq(&vol));
        }

        // Archive: bit-exact round trip, then exhaustive single-byte flips.
        let small = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::SkewedExponential,
            dims: (8, 8, 8),
            seed: 2,
            amplitude: 5.0,
        })
        .unwrap();
        let ccfg = CodecConfig::from_reb(1e-2, small.vrange()).unwrap();
        let (payload, dec) = compress(&small, &ccfg).unwrap();
        let bundle = fit(
            &small,
            &dec,
            2,
            GroupStrategy::Quantile,
            &desk_train_cfg(1),
            0,
            1,
        )
        .unwrap();
        let quality = QualityRecord {
            psnr_base: 1.0,
            psnr_enhanced: 2.0,
        };
        let bytes = archive_to_bytes(&payload, Some(&bundle), &quality, true).unwrap();
        let arch = archive_from_bytes(&bytes).unwrap();
        let again = archive_to_bytes(&arch.payload, arch.bundle.as_ref(), &arch.quality, true)
            .unwrap();
        assert_eq!(bytes, again);
        for pos in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x02;
            assert!(
                archive_from_bytes(&bad).is_err(),
                "archive flip at {pos} undetected"
            );
        }

        // Sidecar likewise.
        let prov = SidecarProvenance {
            dims: small.dims(),
            e_abs: ccfg.e_abs,
        };
        let sc = sidecar_to_bytes(&bundle, &prov).unwrap();
        let (back, prov_back) = sidecar_from_bytes(&sc).unwrap();
        assert_eq!(sidecar_to_bytes(&back, &prov_back).unwrap(), sc);
        for pos in 0..sc.len() {
            let mut bad = sc.clone();
            bad[pos] ^= 0x80;
            assert!(
                sidecar_from_bytes(&bad).is_err(),
                "sidecar flip at {pos} undetected"
            );
        }
    });
}

// ---------------------------------------------------------------------
// 11. Clamped-bound property: |x - x_enhanced| <= 2 e_abs, exactly,
//     over 100 randomized runs.
// ---------------------------------------------------------------------
#[test]
fn criterion_11_clamped_bound() {
    criterion(11, "clamped-bound property", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC1A4);
        for case in 0..100u64 {
            let dims = (
                rng.random_range(6..=14usize),
                rng.random_range(6..=14usize),
                rng.random_range(6..=14usize),
            );
            let kind = match case % 3 {
                0 => SyntheticKind::CosineField,
                1 => SyntheticKind::GaussianMixture,
                _ => SyntheticKind::SkewedExponential,
            };
            let vol = gen_synthetic(&SyntheticSpec {
                kind,
                dims,
                seed: case,
                amplitude: 20.0,
            })
            .unwrap();
            let reb = 10f64.powf(rng.random_range(-3.0..-1.0));
            let ccfg = CodecConfig::from_reb(reb, vol.vrange()).unwrap();
            let (_, dec) = compress(&vol, &ccfg).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                seed: case,
                ..TrainConfig::default()
            };
            let mut bundle = fit(&vol, &dec, 2, GroupStrategy::Quantile, &cfg, 0, 1).unwrap();
            if case % 2 == 0 {
                // Force absurd predictions so clamping must engage.
                for m in bundle.models.iter_mut().flatten() {
                    m.conv2_b += 25.0;
                }
            }
            let e = ccfg.e_abs;
            let enhanced = enhance(&dec, &bundle, ClampMode::Bound2e { e_abs: e }).unwrap();
            for (a, b) in vol.values().iter().zip(enhanced.values()) {
                let err = (*a as f64 - *b as f64).abs();
                assert!(err <= 2.0 * e, "case {case}: |{a} - {b}| = {err} > {}", 2.0 * e);
            }
        }

        // The raw residual-application path obeys the same contract.
        let dec = Volume::new((1, 1, 3), vec![0.0, 1.0, -1.0]).unwrap();
        let rhat = Volume::new((1, 1, 3), vec![5.0, -5.0, 0.25]).unwrap();
        let out = apply_residual(&dec, &rhat, ClampMode::Bound2e { e_abs: 0.5 }).unwrap();
        assert_eq!(out.values(), &[0.5, 0.5, -0.75]);
    });
}

// ---------------------------------------------------------------------
// 12. Determinism: identical CLI invocations (any --threads) produce
//     byte-identical archives and reports.
// ---------------------------------------------------------------------
#[test]
fn criterion_12_cli_determinism() {
    criterion(12, "CLI determinism", || {
        let dir = tempdir().unwrap();
        let input = dir.path().join("field.f32");
        let run = gwlz(&[
            "gen",
            "--kind",
            "skewed-exponential",
            "--dims",
            "32x32x32",
            "--seed",
            "7",
            "--out",
            input.to_str().unwrap(),
        ]);
        assert_eq!(run.status, 0);

        let mut archives: Vec<Vec<u8>> = Vec::new();
        let mut reports: Vec<String> = Vec::new();
        for (i, threads) in ["1", "1", "4"].iter().enumerate() {
            let out = dir.path().join(format!("a{i}.gwlz"));
            let run = gwlz(&[
                "compress",
                "--input",
                input.to_str().unwrap(),
                "--dims",
                "32x32x32",
                "--reb",
                "1e-2",
                "--out",
                out.to_str().unwrap(),
                "--groups",
                "3",
                "--epochs",
                "5",
                "--seed",
                "42",
                "--threads",
                threads,
            ]);
            assert_eq!(run.status, 0);
            archives.push(std::fs::read(&out).unwrap());
            reports.push(run.stdout);
        }
        assert_eq!(archives[0], archives[1], "same-flags runs differ");
        assert_eq!(archives[0], archives[2], "--threads changed the archive");
        assert_eq!(reports[0], reports[1]);
        assert_eq!(reports[0], reports[2]);

        // Decompression is deterministic too.
        let arch_path = dir.path().join("a0.gwlz");
        let mut outputs = Vec::new();
        for i in 0..2 {
            let out = dir.path().join(format!("d{i}.f32"));
            let run = gwlz(&[
                "decompress",
                "--input",
                arch_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(run.status, 0);
            outputs.push(std::fs::read(&out).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
    });
}
