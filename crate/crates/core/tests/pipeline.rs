mod common;

use std::collections::HashSet;
use std::fs;

use ginas::data::{self, decode_image, encode_cifar10, encode_image, parse_cifar10, synthetic_batch};
use ginas::defense::{apply_defense, kept_count, DefenseConfig};
use ginas::harness::{persist, run_attack, ExperimentConfig, HarnessMode};
use ginas::nas::{
    build_decoder, latent_shape_for, sample_genome, sample_latent, Activation, ArchGenome, Interp, SearchMode,
    Transform, DEFAULT_WIDTHS, DILATION_OPTIONS, KERNEL_OPTIONS,
};
use ginas::recovery::{recover, RecoveryOptions};
use ginas::search::MatchingProblem;
use ginas::tensor::Tensor;
use ginas::victim::{compute_gradients, infer_labels, Classifier, ClassifierKind, ClassifierSpec, GradientSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn victim(kind: ClassifierKind, shape: [usize; 4], seed: u64) -> Classifier {
    Classifier::build(ClassifierSpec {
        kind,
        input_shape: shape,
        classes: 10,
        seed,
    })
    .unwrap()
}

#[test]
fn single_image_labels_are_always_recovered() {
    for kind in ClassifierKind::ALL {
        for trial in 0..100 {
            let batch = synthetic_batch(1000 + trial, 1, 3, 16, 10).unwrap();
            let model = victim(kind, [1, 3, 16, 16], trial);
            let inf = infer_labels(&compute_gradients(&model, &batch).unwrap(), &model).unwrap();
            assert_eq!(inf.labels, batch.labels, "{kind} trial {trial}");
            assert!(!inf.partial);
        }
    }
}

#[test]
fn distinct_labels_of_four_images_are_mostly_recovered() {
    let hits = (0..100)
        .filter(|&trial| {
            let batch = synthetic_batch(2000 + trial, 4, 1, 16, 10).unwrap();
            let model = victim(ClassifierKind::TinyConvnet, [4, 1, 16, 16], trial);
            infer_labels(&compute_gradients(&model, &batch).unwrap(), &model).unwrap().labels == batch.labels
        })
        .count();
    assert!(hits >= 95, "{hits}/100");
}

fn large_gradient(seed: u64) -> GradientSet {
    let batch = synthetic_batch(seed, 2, 1, 16, 10).unwrap();
    let model = victim(ClassifierKind::TinyConvnet, [2, 1, 16, 16], seed);
    let g = compute_gradients(&model, &batch).unwrap();
    let scaled: Vec<f64> = g.flatten().iter().map(|v| v * 1e3).collect();
    GradientSet::unflatten(&g.shapes(), &scaled).unwrap()
}

#[test]
fn clipping_bounds_the_norm() {
    for seed in 0..10 {
        let g = large_gradient(seed);
        assert!(g.l2_norm() > 4.0);
        let c = apply_defense(&g, &DefenseConfig::clipping(4.0)).unwrap();
        assert!(c.l2_norm() <= 4.0 + 1e-12);
        assert!((c.l2_norm() - 4.0).abs() < 1e-9);
    }
}

#[test]
fn sparsification_keeps_the_exact_count() {
    let g = large_gradient(1);
    let d = g.flatten().len();
    let kept = apply_defense(&g, &DefenseConfig::sparsification(0.9)).unwrap();
    let nonzero = kept.flatten().iter().filter(|v| **v != 0.0).count();
    assert_eq!(nonzero, (0.1 * d as f64).ceil() as usize);
    assert_eq!(nonzero, kept_count(d, 0.9));
    let per_layer = apply_defense(&g, &"sparsify-layer:0.9".parse().unwrap()).unwrap();
    for t in &per_layer.tensors {
        let nz = t.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nz, kept_count(t.numel(), 0.9));
    }
}

#[test]
fn gaussian_noise_has_the_requested_spread() {
    let n = 1_000_000;
    let g = GradientSet::new(vec![Tensor::zeros(&[n])]);
    let noisy = apply_defense(&g, &DefenseConfig::noise(0.1, 7)).unwrap().flatten();
    let mean = noisy.iter().sum::<f64>() / n as f64;
    let var = noisy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var.sqrt() - 0.1).abs() / 0.1 < 0.01, "std {}", var.sqrt());
    assert!(mean.abs() < 1e-3);
}

#[test]
fn genome_sampling_covers_every_option() {
    let base = ArchGenome::baseline(&DEFAULT_WIDTHS, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let genomes: Vec<_> = (0..5000).map(|_| sample_genome(&mut rng, SearchMode::Full, &base)).collect();
    let ups: Vec<_> = genomes.iter().flat_map(|g| g.upsample.iter().copied()).collect();
    for &i in Interp::ALL {
        assert!(ups.iter().any(|u| u.interp == i));
    }
    for &t in Transform::ALL {
        assert!(ups.iter().any(|u| u.transform == t));
    }
    for &a in Activation::ALL {
        assert!(ups.iter().any(|u| u.activation == a));
    }
    for k in KERNEL_OPTIONS {
        assert!(ups.iter().any(|u| u.kernel == k));
    }
    for d in DILATION_OPTIONS {
        assert!(ups.iter().any(|u| u.dilation == d));
    }
    let matrices: HashSet<String> = genomes.iter().map(|g| g.skips.to_string()).collect();
    assert_eq!(matrices.len(), 512);
    let seeds: HashSet<u64> = genomes.iter().map(|g| g.init_seed).collect();
    assert!(seeds.len() as f64 / genomes.len() as f64 >= 0.999);
    let archs: HashSet<u64> = genomes.iter().map(|g| g.arch_fingerprint()).collect();
    assert!(archs.len() as f64 / genomes.len() as f64 >= 0.999);
}

#[test]
fn restricted_modes_freeze_their_axis() {
    let base = ArchGenome::baseline(&DEFAULT_WIDTHS, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let u = sample_genome(&mut rng, SearchMode::UpsampleOnly, &base);
        assert_eq!(u.skips, base.skips);
        let c = sample_genome(&mut rng, SearchMode::ConnectionOnly, &base);
        assert_eq!(c.upsample, base.upsample);
    }
}

fn small_problem() -> (MatchingProblem, [usize; 4]) {
    let batch = synthetic_batch(5, 1, 1, 8, 10).unwrap();
    let model = victim(ClassifierKind::TinyConvnet, [1, 1, 8, 8], 5);
    let g = compute_gradients(&model, &batch).unwrap();
    (MatchingProblem::new(model, g, DefenseConfig::none()).unwrap(), latent_shape_for([1, 1, 8, 8], 2).unwrap())
}

#[test]
fn zero_iterations_return_the_initial_decoder_output() {
    let (problem, latent) = small_problem();
    let genome = ArchGenome::baseline(&[4, 8], 3);
    let z0 = sample_latent(latent, 1);
    let mut d = build_decoder(&genome, latent, [1, 1, 8, 8]).unwrap();
    let before = d.checksum();
    let opts = RecoveryOptions {
        iterations: 0,
        ..Default::default()
    };
    let r = recover(&mut d, &z0, &problem, &opts).unwrap();
    assert_eq!(d.checksum(), before);
    assert_eq!(r.reconstruction.data(), d.generate(&z0).unwrap().data());
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.trace[0].0, 0);
}

#[test]
fn recovery_is_deterministic_and_lowers_the_loss() {
    let (problem, latent) = small_problem();
    let genome = ArchGenome::baseline(&[4, 8], 3);
    let z0 = sample_latent(latent, 1);
    let opts = RecoveryOptions {
        iterations: 60,
        ..Default::default()
    };
    let run = || {
        let mut d = build_decoder(&genome, latent, [1, 1, 8, 8]).unwrap();
        recover(&mut d, &z0, &problem, &opts).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.params_checksum, b.params_checksum);
    assert_eq!(a.reconstruction.data(), b.reconstruction.data());
    assert!(a.final_loss < a.trace[0].1);
}

#[test]
fn cifar_records_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let records: Vec<(u8, Vec<u8>)> = (0..5)
        .map(|i| (i as u8 * 2, (0..3072).map(|_| rng.random()).collect()))
        .collect();
    let bytes = encode_cifar10(&records).unwrap();
    let batch = parse_cifar10(&bytes, &[3, 0]).unwrap();
    assert_eq!(batch.labels, vec![6, 0]);
    assert_eq!(batch.images.shape(), &[2, 3, 32, 32]);
    let (q, clamped) = data::quantize(&batch.images.data()[..3072]);
    assert_eq!(clamped, 0);
    assert_eq!(q, records[3].1);
    assert!(parse_cifar10(&bytes[..100], &[0]).is_err());
    assert!(parse_cifar10(&bytes, &[9]).is_err());
}

#[test]
fn image_files_roundtrip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    for (i, c) in [1, 3].into_iter().enumerate() {
        let img = common::random_tensor(&[c, 5, 7], i as u64);
        let img = Tensor::new(img.shape(), img.data().iter().map(|v| v.abs()).collect()).unwrap();
        let (bytes, clamped) = encode_image(&img).unwrap();
        assert_eq!(clamped, 0);
        let back = decode_image(&bytes).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(common::max_abs_diff(back.data(), img.data()) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(encode_image(&back).unwrap().0, bytes);
        let ext = if c == 1 { "pgm" } else { "ppm" };
        fs::write(dir.path().join(format!("{}_img.{ext}", 4 + i)), &bytes).unwrap();
    }
    let gray = data::load_image_dir(dir.path(), &[0]).unwrap();
    assert_eq!(gray.labels, vec![4]);
    assert!(data::load_image_dir(dir.path(), &[0, 1]).is_err());
}

fn quick_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        master_seed: seed,
        ..Default::default()
    };
    cfg.search.n = 3;
    cfg.recovery.iterations = 20;
    cfg
}

#[test]
fn attack_reports_are_reproducible() {
    let cfg = quick_config(4);
    let a = run_attack(&cfg);
    let b = run_attack(&cfg);
    assert!(a.succeeded(), "{:?}", a.failure);
    assert_eq!(a.without_timings().to_toml().unwrap(), b.without_timings().to_toml().unwrap());
    assert_eq!(a.candidates.len(), 3);
    assert_eq!(a.loss_trace.last().unwrap().step, 20);
}

#[test]
fn persisted_report_reloads_as_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(1);
    let mut report = run_attack(&cfg);
    persist(&mut report, dir.path()).unwrap();
    for f in ["report.toml", "candidates.csv", "loss.csv", "original_000.pgm", "reconstruction_000.pgm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let reloaded = ExperimentConfig::load(&dir.path().join("report.toml")).unwrap();
    assert_eq!(reloaded, cfg);
    let csv = fs::read_to_string(dir.path().join("candidates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn fixed_genome_mode_varies_only_the_seed() {
    let mut cfg = quick_config(2);
    cfg.search.mode = HarnessMode::FixedGenome;
    cfg.search.n = 4;
    let genomes = ginas::harness::candidate_genomes(&cfg);
    let base = ginas::harness::base_genome(&cfg);
    assert_eq!(genomes[0], base);
    for g in &genomes[1..] {
        assert_eq!(g.arch_fingerprint(), base.arch_fingerprint());
        assert_ne!(g.init_seed, base.init_seed);
    }
}

#[test]
fn failures_name_their_stage() {
    let mut cfg = quick_config(0);
    cfg.dataset = "cifar10:/nonexistent/batch.bin".parse().unwrap();
    let r = run_attack(&cfg);
    assert_eq!(r.failure.unwrap().stage, ginas::harness::Stage::Load);
    let mut cfg = quick_config(0);
    cfg.search.widths = vec![1];
    let r = run_attack(&cfg);
    assert_eq!(r.failure.unwrap().stage, ginas::harness::Stage::Search);
}

#[test]
fn labels_and_selection_ignore_gradient_scale() {
    let batch = synthetic_batch(11, 3, 1, 8, 10).unwrap();
    let model = victim(ClassifierKind::TinyConvnet, [3, 1, 8, 8], 11);
    let g = compute_gradients(&model, &batch).unwrap();
    let latent = latent_shape_for([3, 1, 8, 8], 2).unwrap();
    let z0 = sample_latent(latent, 2);
    let base = ArchGenome::baseline(&[4, 8], 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let genomes: Vec<_> = (0..6).map(|_| sample_genome(&mut rng, SearchMode::Full, &base)).collect();
    let reference = MatchingProblem::new(model.clone(), g.clone(), DefenseConfig::none()).unwrap();
    let (best, scores) = ginas::search::select_optimal(&genomes, &z0, &reference, [3, 1, 8, 8]).unwrap();
    for c in [1e-6, 0.37, 250.0] {
        let scaled = GradientSet::unflatten(&g.shapes(), &g.flatten().iter().map(|v| v * c).collect::<Vec<_>>()).unwrap();
        assert_eq!(infer_labels(&scaled, &model).unwrap(), infer_labels(&g, &model).unwrap());
        let problem = MatchingProblem::new(model.clone(), scaled, DefenseConfig::none()).unwrap();
        let (b, s) = ginas::search::select_optimal(&genomes, &z0, &problem, [3, 1, 8, 8]).unwrap();
        assert_eq!(b, best);
        for (x, y) in s.iter().zip(&scores) {
            assert!((x.initial_loss - y.initial_loss).abs() < 1e-12);
        }
    }
}
