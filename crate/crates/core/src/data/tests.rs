use std::collections::HashSet;
use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::tensor::Tensor;

fn write_png(path: &Path, size: u32, value: u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let px = vec![value; (size * size) as usize];
    image::save_buffer(path, &px, size, size, image::ExtendedColorType::L8).unwrap();
}

fn tree(classes: &[(&str, usize)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, n) in classes {
        for i in 0..*n {
            write_png(&dir.path().join(name).join(format!("img{i}.png")), 8, (i * 20) as u8);
        }
    }
    dir
}

fn synthetic_manifest(counts: &[usize]) -> DatasetManifest {
    let class_names = (0..counts.len()).map(|c| format!("class{c}")).collect();
    let mut entries = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        for i in 0..n {
            entries.push(ManifestEntry { path: format!("class{label}/{i}.png"), label });
        }
    }
    DatasetManifest { root: "/nonexistent".into(), class_names, entries, skipped: Vec::new() }
}

#[test]
fn scan_two_classes() {
    let dir = tree(&[("b", 3), ("a", 3)]);
    let m = scan_image_folder(dir.path()).unwrap();
    assert_eq!(m.len(), 6);
    assert_eq!(m.class_names, ["a", "b"]);
    assert_eq!(m.labels(), [0, 0, 0, 1, 1, 1]);
    assert_eq!(m.entries[0].path, "a/img0.png");
}

#[test]
fn rescan_is_identical() {
    let dir = tree(&[("x", 2), ("y", 4)]);
    assert_eq!(scan_image_folder(dir.path()).unwrap(), scan_image_folder(dir.path()).unwrap());
}

#[test]
fn empty_class_is_an_error_naming_it() {
    let dir = tree(&[("full", 2)]);
    std::fs::create_dir(dir.path().join("hollow")).unwrap();
    let err = scan_image_folder(dir.path()).unwrap_err().to_string();
    assert!(err.contains("hollow"), "{err}");
}

#[test]
fn unreadable_file_is_skipped() {
    let dir = tree(&[("a", 2)]);
    std::fs::write(dir.path().join("a/broken.png"), b"not an image").unwrap();
    let m = scan_image_folder(dir.path()).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m.skipped.len(), 1);
    assert!(m.skipped[0].path.ends_with("broken.png"));
}

#[test]
fn manifest_csv_round_trip() {
    let dir = tree(&[("Lung Opacity", 2), ("Normal", 1)]);
    let m = scan_image_folder(dir.path()).unwrap();
    let csv = dir.path().join("manifest.csv");
    m.write_csv(&csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("path,label_index,class_name\n"));
    assert!(!text.contains('\r'));
    assert_eq!(DatasetManifest::read_csv(&csv, dir.path()).unwrap(), m);
}

#[test]
fn real_data_class_totals() {
    let m = synthetic_manifest(&[3716, 6012, 10192, 1345]);
    assert_eq!(m.len(), 21_265);
    assert_eq!(m.class_counts(), [3716, 6012, 10192, 1345]);
}

#[test]
fn split_exact_division() {
    let m = synthetic_manifest(&[100, 100, 100]);
    let s = split_dataset(&m, SplitFractions::default(), 3).unwrap();
    for class in 0..3 {
        let count = |split| s.indices(split).iter().filter(|&&i| m.entries[i].label == class).count();
        assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [70, 10, 20]);
    }
}

#[test]
fn split_seven_by_largest_remainder() {
    // 4.9 / 0.7 / 1.4 floor to 4/0/1; the two leftovers go to remainders 0.9 and 0.7.
    assert_eq!(SplitFractions::default().allocate(7), [5, 1, 1]);
    let m = synthetic_manifest(&[7]);
    let s = split_dataset(&m, SplitFractions::default(), 0).unwrap();
    assert_eq!([s.indices(Split::Train).len(), s.indices(Split::Val).len(), s.indices(Split::Test).len()], [5, 1, 1]);
}

#[test]
fn split_is_seeded() {
    let m = synthetic_manifest(&[40, 25]);
    let a = split_dataset(&m, SplitFractions::default(), 9).unwrap();
    assert_eq!(a, split_dataset(&m, SplitFractions::default(), 9).unwrap());
    assert_ne!(a, split_dataset(&m, SplitFractions::default(), 10).unwrap());
}

#[test]
fn tiny_class_is_rejected_by_name() {
    let m = synthetic_manifest(&[30, 3]);
    let err = split_dataset(&m, SplitFractions::default(), 0).unwrap_err().to_string();
    assert!(err.contains("class1") && !err.contains("class0"), "{err}");
}

#[test]
fn bad_fractions_rejected() {
    let f = SplitFractions { train: 0.7, val: 0.2, test: 0.2 };
    assert!(split_dataset(&synthetic_manifest(&[10]), f, 0).is_err());
}

#[test]
fn split_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic_manifest(&[12, 15]);
    let s = split_dataset(&m, SplitFractions::default(), 4).unwrap();
    let path = dir.path().join("split.csv");
    s.write_csv(&m, &path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("path,split\n"));
    assert_eq!(SplitAssignment::read_csv(&m, &path, 4, SplitFractions::default()).unwrap(), s);
}

proptest! {
    #[test]
    fn split_partitions_within_one_sample(
        counts in prop::collection::vec(10usize..80, 1..4),
        seed in any::<u64>(),
    ) {
        let m = synthetic_manifest(&counts);
        let f = SplitFractions::default();
        let s = split_dataset(&m, f, seed).unwrap();
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for i in s.indices(split) {
                prop_assert!(seen.insert(i));
            }
        }
        prop_assert_eq!(seen.len(), m.len());
        for (class, &n) in counts.iter().enumerate() {
            for (split, frac) in Split::ALL.into_iter().zip(f.as_array()) {
                let got = s.indices(split).iter().filter(|&&i| m.entries[i].label == class).count();
                prop_assert!((got as f64 - frac * n as f64).abs() < 1.0);
            }
        }
    }
}

/// Separable two-pass reference: horizontal pass then vertical pass, with
/// the source coordinate `(o + 0.5) * in / out - 0.5` clamped to the image.
fn reference_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    fn weights(o: usize, n_in: usize, n_out: usize) -> Vec<(usize, f64)> {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0).min((n_in - 1) as f64);
        let i = s as usize;
        let t = s - i as f64;
        if i + 1 < n_in { vec![(i, 1.0 - t), (i + 1, t)] } else { vec![(i, 1.0)] }
    }
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = weights(ox, w, ow).iter().map(|&(x, wt)| wt * src[y * w + x]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = weights(oy, h, oh).iter().map(|&(y, wt)| wt * rows[y * ow + ox]).sum();
        }
    }
    out
}

#[test]
fn checkerboard_resize_matches_reference() {
    let n = 299;
    let board: Vec<f64> = (0..n * n).map(|i| (((i / n) / 7 + (i % n) / 7) % 2) as f64).collect();
    let img = GrayImage::new(n, n, board.iter().map(|&v| v as f32).collect()).unwrap();
    let got = img.resized(224, 224);
    let want = reference_bilinear(&board, n, n, 224, 224);
    let worst = got.data.iter().zip(&want).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "max deviation {worst}");
}

#[test]
fn constant_image_stays_constant() {
    let img = GrayImage::new(13, 17, vec![0.3; 13 * 17]).unwrap();
    let plane = preprocess(&img, 32, Normalization::default());
    let want = (0.3 - 0.5) / 0.25;
    assert!(plane.iter().all(|&v| (v - want).abs() < 1e-6));
}

#[test]
fn load_batch_replicates_gray() {
    let dir = tree(&[("a", 2), ("b", 1)]);
    let m = scan_image_folder(dir.path()).unwrap();
    let (x, labels) = load_batch(&m, &[0, 2], 16, Normalization::default()).unwrap();
    assert_eq!(x.shape(), [2, 3, 16, 16]);
    assert_eq!(labels, [0, 1]);
    let plane = 16 * 16;
    for s in 0..2 {
        let base = s * 3 * plane;
        let (c0, rest) = x.data()[base..base + 3 * plane].split_at(plane);
        assert_eq!(c0, &rest[..plane]);
        assert_eq!(c0, &rest[plane..]);
    }
    // Mid-gray 128/255 maps to about 0.0078.
    let img = tree(&[("g", 1)]);
    write_png(&img.path().join("g/img0.png"), 8, 128);
    let m = scan_image_folder(img.path()).unwrap();
    let (x, _) = load_batch(&m, &[0], 8, Normalization::default()).unwrap();
    let want = (128.0 / 255.0 - 0.5) / 0.25;
    assert!(x.data().iter().all(|&v| (v - want).abs() < 1e-6));
}

#[test]
fn corrupt_image_error_names_path() {
    let dir = tree(&[("a", 1)]);
    let m = scan_image_folder(dir.path()).unwrap();
    std::fs::write(m.full_path(0), b"garbage").unwrap();
    let err = load_batch(&m, &[0], 8, Normalization::default()).unwrap_err().to_string();
    assert!(err.contains("img0.png"), "{err}");
}

#[test]
fn dataset_cache_matches_direct_load() {
    let dir = tree(&[("a", 2), ("b", 2)]);
    let m = scan_image_folder(dir.path()).unwrap();
    let ds = Dataset::new(m.clone(), 12, Normalization::default()).unwrap();
    let first = ds.batch(&[3, 0]).unwrap();
    let again = ds.batch(&[3, 0]).unwrap();
    let direct = load_batch(&m, &[3, 0], 12, Normalization::default()).unwrap();
    assert_eq!(first, again);
    assert_eq!(first, direct);
}

fn ramp_batch() -> Tensor<f32> {
    Tensor::from_fn(&[3, 3, 9, 11], |i| ((i * 37) % 101) as f32 / 50.0 - 1.0)
}

#[test]
fn augmentation_disabled_is_bitwise_identity() {
    let x = ramp_batch();
    assert_eq!(augment(&x, &AugmentConfig::default(), 5).unwrap(), x);
}

#[test]
fn forced_flip_twice_is_identity() {
    let x = ramp_batch();
    let cfg = AugmentConfig { enabled: true, flip_p: 1.0, max_rotation_deg: 0.0 };
    let once = augment(&x, &cfg, 1).unwrap();
    assert_eq!(once, hflip(&x).unwrap());
    assert_ne!(once, x);
    assert!(augment(&once, &cfg, 2).unwrap().max_abs_diff(&x) < 1e-6);
}

#[test]
fn augmentation_is_seeded() {
    let x = ramp_batch();
    let cfg = AugmentConfig { enabled: true, ..AugmentConfig::default() };
    let a = augment(&x, &cfg, 77).unwrap();
    assert_eq!(a, augment(&x, &cfg, 77).unwrap());
    assert_ne!(a, augment(&x, &cfg, 78).unwrap());
    assert!(a.is_finite());
}

#[test]
fn small_rotation_of_constant_plane_is_constant() {
    let x = Tensor::<f32>::full(&[1, 3, 8, 8], 0.25);
    let cfg = AugmentConfig { enabled: true, flip_p: 0.0, max_rotation_deg: 10.0 };
    assert!(augment(&x, &cfg, 3).unwrap().max_abs_diff(&x) < 1e-6);
}

#[test]
fn preset_counts() {
    let s = SyntheticSpec::preset(Preset::Imbalanced, 0);
    assert_eq!(s.counts, [74, 120, 204, 27]);
    assert_eq!(s.total(), 425);
    let table = [3716.0, 6012.0, 10192.0, 1345.0];
    for (&c, t) in s.counts.iter().zip(table) {
        assert_eq!(c, (t / 50.0_f64).round() as usize);
    }
    let easy = SyntheticSpec::preset(Preset::Easy, 0);
    assert!(easy.counts.iter().all(|&c| c == easy.counts[0]));
    assert_eq!(s.class_names, TABLE3_CLASSES);
}

#[test]
fn invalid_specs_rejected() {
    let mut s = SyntheticSpec::preset(Preset::Easy, 0);
    s.image_size = 15;
    assert!(s.validate().is_err());
    let mut s = SyntheticSpec::preset(Preset::Easy, 0);
    s.counts[2] = 0;
    assert!(s.validate().is_err());
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { counts: vec![3, 2, 4, 1], image_size: 32, ..SyntheticSpec::preset(Preset::Easy, seed) }
}

#[test]
fn generation_is_byte_identical() {
    let spec = small_spec(11);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    for e in &out.manifest.entries {
        assert_eq!(std::fs::read(a.path().join(&e.path)).unwrap(), std::fs::read(b.path().join(&e.path)).unwrap());
    }
    assert_eq!(std::fs::read(a.path().join("manifest.csv")).unwrap(), std::fs::read(b.path().join("manifest.csv")).unwrap());
    let rescanned = scan_image_folder(a.path()).unwrap();
    assert_eq!(rescanned.entries, out.manifest.entries);
    assert_eq!(rescanned.class_counts(), [3, 2, 4, 1]);
}

#[test]
fn blob_centroid_in_class_quadrant() {
    for preset in [Preset::Easy, Preset::Imbalanced] {
        let spec = SyntheticSpec::preset(preset, 5);
        let size = spec.image_size;
        let half = size as f64 / 2.0;
        for class in 0..4 {
            for index in 0..spec.counts[class] {
                let (pixels, center) = render_sample(&spec, class, index);
                let in_quadrant = |(r, c): (f64, f64)| ((r >= half) as usize) * 2 + (c >= half) as usize == class;
                assert!(in_quadrant(center));
                // Intensity-weighted centroid of the pixels above the background level.
                let (mut m, mut mr, mut mc) = (0.0, 0.0, 0.0);
                for (i, &p) in pixels.iter().enumerate() {
                    let excess = (p as f64 / 255.0 - 0.25 - 2.0 * spec.noise).max(0.0);
                    m += excess;
                    mr += excess * (i / size) as f64;
                    mc += excess * (i % size) as f64;
                }
                if preset == Preset::Easy {
                    assert!(in_quadrant((mr / m, mc / m)), "class {class} sample {index}");
                }
            }
        }
    }
}
