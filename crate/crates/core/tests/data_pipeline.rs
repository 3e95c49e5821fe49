use std::fs;
use std::path::Path;

use lightnet::data::{
    encode_pgm, load_chip_dataset, split_by_depression, subsample_per_class, synth_sar_generate,
    write_chip_dataset, GrayImage, Sample, MANIFEST_FILE,
};
use lightnet::Error;

fn write_constant_tree(root: &Path, classes: usize, per_class: usize) {
    for c in 0..classes {
        let dir = root.join(format!("cls{c}"));
        fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let img = GrayImage::constant(32, 32, 128.0 / 255.0);
            fs::write(dir.join(format!("chip{i}.pgm")), encode_pgm(&img)).unwrap();
        }
    }
}

#[test]
fn ten_classes_three_chips() {
    let tmp = tempfile::tempdir().unwrap();
    write_constant_tree(tmp.path(), 10, 3);
    let (samples, manifest) = load_chip_dataset(tmp.path()).unwrap();
    assert_eq!(samples.len(), 30);
    assert_eq!(manifest.counts, vec![3; 10]);
    assert!(samples[0].image.pixels.iter().all(|&v| (v - 0.50196).abs() < 1e-5));
    // lexicographic ordering
    let ids: Vec<_> = samples.iter().map(|s| s.source_id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn empty_class_and_bad_chip_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    write_constant_tree(tmp.path(), 2, 1);
    fs::create_dir(tmp.path().join("zz_empty")).unwrap();
    let err = load_chip_dataset(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("zz_empty"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    write_constant_tree(tmp.path(), 2, 1);
    fs::write(tmp.path().join("cls1/broken.pgm"), b"P5\n32 32\n255\n\x00").unwrap();
    let err = load_chip_dataset(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("broken.pgm"), "{err}");
}

#[test]
fn duplicate_manifest_entry_is_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_constant_tree(tmp.path(), 2, 1);
    fs::write(
        tmp.path().join(MANIFEST_FILE),
        "file,class,depression\ncls0/chip0.pgm,cls0,17\ncls0/chip0.pgm,cls0,17\n",
    )
    .unwrap();
    assert!(matches!(load_chip_dataset(tmp.path()), Err(Error::Dataset(_))));
}

#[test]
fn synthetic_disk_round_trip_is_exact() {
    let data = synth_sar_generate(3, 4, 2, 40, 11).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let all: Vec<Sample> = data.train.iter().chain(&data.test).cloned().collect();
    write_chip_dataset(tmp.path(), &data.manifest.classes, &all).unwrap();
    let (loaded, manifest) = load_chip_dataset(tmp.path()).unwrap();
    assert_eq!(manifest, data.manifest);
    let (train, test) = split_by_depression(loaded, 17.0, 15.0).unwrap();
    let mut expect_train = data.train.clone();
    expect_train.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    assert_eq!(train, expect_train);
    assert_eq!(test.len(), data.test.len());
    let csv = fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap();
    assert!(csv.starts_with("file,class,depression\n"));
    assert!(!csv.contains('\r'));
}

#[test]
fn subsampler_uniform_over_seeds() {
    let samples: Vec<Sample> = (0..3)
        .map(|i| Sample {
            image: GrayImage::constant(32, 32, 0.0),
            label: 0,
            class_name: "only".into(),
            depression_deg: None,
            source_id: format!("only/{i}"),
        })
        .collect();
    let mut hits = [0usize; 3];
    for seed in 0..1000 {
        let pick = subsample_per_class(&samples, 1, seed).unwrap();
        let i: usize = pick[0].source_id[5..].parse().unwrap();
        hits[i] += 1;
    }
    for h in hits {
        assert!((283..=383).contains(&h), "{hits:?}");
    }
}

#[test]
fn subsampler_seed_determinism() {
    let data = synth_sar_generate(4, 30, 0, 32, 0).unwrap();
    let a = subsample_per_class(&data.train, 10, 3).unwrap();
    let b = subsample_per_class(&data.train, 10, 3).unwrap();
    let c = subsample_per_class(&data.train, 10, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 40);
}

// ---- template-matcher oracle: an independent, non-learned classifier that
// rotates class exemplars and picks the best normalized correlation.

fn blur(img: &GrayImage) -> Vec<f64> {
    let (h, w) = (img.height as isize, img.width as isize);
    let k = [0.25, 0.5, 0.25];
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (yy, xx) = ((y + dy).clamp(0, h - 1), (x + dx).clamp(0, w - 1));
                    acc += k[(dy + 1) as usize] * k[(dx + 1) as usize]
                        * img.pixels[(yy * w + xx) as usize] as f64;
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

fn rotate(v: &[f64], n: usize, theta: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    let mut out = vec![0.0; v.len()];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 - c, y as f64 - c);
            let sx = co * fx + s * fy + c;
            let sy = -s * fx + co * fy + c;
            if sx < 0.0 || sy < 0.0 || sx > (n - 1) as f64 || sy > (n - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            out[y * n + x] = v[y0 * n + x0] * (1.0 - ax) * (1.0 - ay)
                + v[y0 * n + x1] * ax * (1.0 - ay)
                + v[y1 * n + x0] * (1.0 - ax) * ay
                + v[y1 * n + x1] * ax * ay;
        }
    }
    out
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let (mut da, mut db) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    num / (da.sqrt() * db.sqrt()).max(1e-12)
}

/// Best correlation of `probe` against `template` over 36 rotations.
fn rotated_match(template: &[f64], probe: &[f64], n: usize) -> f64 {
    (0..36)
        .map(|r| correlation(&rotate(template, n, r as f64 * std::f64::consts::TAU / 36.0), probe))
        .fold(f64::MIN, f64::max)
}

#[test]
fn template_matcher_beats_chance() {
    let (classes, res) = (10, 48);
    let data = synth_sar_generate(classes, 3, 6, res, 0).unwrap();
    let templates: Vec<(usize, Vec<f64>)> =
        data.train.iter().map(|s| (s.label, blur(&s.image))).collect();
    let mut correct = 0;
    for s in &data.test {
        let probe = blur(&s.image);
        let best = templates
            .iter()
            .map(|(label, t)| (*label, rotated_match(t, &probe, res)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        correct += (best == s.label) as usize;
    }
    let accuracy = correct as f64 / data.test.len() as f64;
    println!("template matcher accuracy {accuracy:.3}");
    assert!(accuracy >= 3.0 / classes as f64, "{accuracy}");
}

#[test]
fn intra_class_correlation_exceeds_inter_class() {
    let res = 48;
    let data = synth_sar_generate(6, 3, 0, res, 1).unwrap();
    let imgs: Vec<(usize, Vec<f64>)> = data.train.iter().map(|s| (s.label, blur(&s.image))).collect();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for i in 0..imgs.len() {
        for j in i + 1..imgs.len() {
            let c = rotated_match(&imgs[i].1, &imgs[j].1, res);
            if imgs[i].0 == imgs[j].0 { intra.push(c) } else { inter.push(c) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&intra) > mean(&inter), "{} vs {}", mean(&intra), mean(&inter));
}
