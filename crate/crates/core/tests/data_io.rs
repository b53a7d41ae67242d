mod common;

use std::fs;
use std::path::Path;

use pucare::data_io::*;
use pucare::model::{init_params, ModelConfig};
use pucare::preprocess::{Image, Mask};
use pucare::training::{Evaluation, SampleMetrics, TrainHistory};
use pucare::metrics::confusion_counts;
use pucare::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, data: &[u8]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let mut enc = png::Encoder::new(fs::File::create(path).unwrap(), w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().unwrap().write_image_data(data).unwrap();
}

#[test]
fn loads_pairs_sorted_and_thresholds_masks() {
    let dir = tempfile::tempdir().unwrap();
    for (id, v) in [("c", 10u8), ("a", 200), ("b", 90)] {
        write_png(&dir.path().join(format!("images/{id}.png")), 2, 2, png::ColorType::Rgb, &[v; 12]);
        write_png(&dir.path().join(format!("masks/{id}.png")), 2, 2, png::ColorType::Grayscale, &[200, 100, 127, 128]);
    }
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.ids(), vec!["a", "b", "c"]);
    let a = ds.get("a").unwrap();
    assert_eq!(a.mask.data(), &[1, 0, 0, 1]);
    assert_eq!(a.image.pixel(0, 0), [200.0 / 255.0; 3]);
}

#[test]
fn mismatched_or_missing_masks_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("images/x.png"), 10, 10, png::ColorType::Rgb, &[0; 300]);
    write_png(&dir.path().join("masks/x.png"), 8, 8, png::ColorType::Grayscale, &[0; 64]);
    assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));

    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("images/lonely.png"), 2, 2, png::ColorType::Rgb, &[0; 12]);
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Data(msg)) => assert!(msg.contains("lonely")),
        other => panic!("expected a data error, got {other:?}"),
    }
    fs::write(dir.path().join("masks/lonely.png"), b"not a png").unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn png_round_trip_within_one_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = (0..3)
        .map(|i| Sample::new(format!("s{i}"), common::random_image(&mut rng, 7, 5), common::random_mask(&mut rng, 7, 5, 0.4)).unwrap())
        .collect();
    let meta = DatasetMeta { source: "unit".into(), preprocessing: vec!["none".into()], provenance: vec![] };
    let ds = Dataset::new(samples, meta).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.ids(), ds.ids());
    assert_eq!(back.meta, ds.meta);
    for (a, b) in ds.samples().iter().zip(back.samples()) {
        assert_eq!(a.mask, b.mask);
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn synthetic_generation_contract() {
    let spec = SyntheticSpec::new(100, Domain::Source, 48, 17);
    let a = generate_synthetic(&spec).unwrap();
    assert_eq!(a, generate_synthetic(&spec).unwrap());
    assert_eq!(a.get("source-0042").unwrap(), &synthetic_sample(&spec, 42).unwrap());
    for domain in [Domain::Source, Domain::Target] {
        let ds = generate_synthetic(&SyntheticSpec::new(100, domain, 48, 3)).unwrap();
        let mut redder = 0;
        for s in ds.samples() {
            let m = &s.mask;
            assert!(m.count() > 0);
            let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
            let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for y in 0..48 {
                for x in 0..48 {
                    let r = s.image.pixel(y, x)[0];
                    if m.get(y, x) {
                        (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
                        fg += r;
                        nf += 1.0;
                    } else {
                        bg += r;
                        nb += 1.0;
                    }
                }
            }
            assert!(y0 > 0 && x0 > 0 && y1 < 47 && x1 < 47, "{} touches the frame", s.id);
            redder += (fg / nf > bg / nb) as usize;
        }
        assert!(redder >= 95, "{domain:?}: {redder}/100");
    }
    assert!(SyntheticSpec::new(1, Domain::Source, 8, 0).validate().is_err());
}

fn saved_tiny() -> (tempfile::TempDir, std::path::PathBuf, pucare::model::ModelParams<f32>, CheckpointMeta) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut p = init_params(&ModelConfig { seed: 5, ..ModelConfig::tiny() }).unwrap();
    // Non-trivial buffers and an awkward float.
    p.buffers.values_mut().next().unwrap().data_mut()[0] = f32::MIN_POSITIVE / 4.0;
    let meta = CheckpointMeta {
        train_seed: Some(9),
        history_digest: Some("abc".into()),
        resolved_config: Some(serde_json::json!({"k": 1})),
    };
    save_checkpoint(&p, &path, &meta).unwrap();
    (dir, path, p, meta)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_d, path, p, meta) = saved_tiny();
    let (q, m) = load_checkpoint(&path).unwrap();
    assert!(q.bit_identical(&p));
    assert_eq!(q.config, p.config);
    assert_eq!(m, meta);
}

fn header_span(bytes: &[u8]) -> (usize, usize) {
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    (16, 16 + n)
}

#[test]
fn damaged_checkpoints_are_classified() {
    let (_d, path, _, _) = saved_tiny();
    let bytes = fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] ^= 0x20;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    assert!(matches!(decode_checkpoint(b"PUCK"), Err(Error::Corrupt(_))));

    for cut in [12, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode_checkpoint(&longer), Err(Error::Corrupt(_))));

    // Last manifest entry's offset moved past the end of the file.
    let (s, e) = header_span(&bytes);
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[s..e]).unwrap();
    let last = header["manifest"].as_array_mut().unwrap().last_mut().unwrap();
    last["offset"] = serde_json::json!(bytes.len() as u64 * 4);
    let rebuilt = rebuild(&bytes, &header);
    assert!(matches!(decode_checkpoint(&rebuilt), Err(Error::Corrupt(_))));

    header = serde_json::from_slice(&bytes[s..e]).unwrap();
    header["format_version"] = serde_json::json!(2);
    assert!(matches!(decode_checkpoint(&rebuild(&bytes, &header)), Err(Error::Version { found: 2, expected: 1 })));

    // A flipped blob bit fails the checksum.
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Corrupt(_))));
}

fn rebuild(bytes: &[u8], header: &serde_json::Value) -> Vec<u8> {
    let (_, e) = header_span(bytes);
    let json = serde_json::to_vec(header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    out.extend(&bytes[e..]);
    out
}

#[test]
fn every_single_manifest_byte_corruption_is_detected() {
    let (_d, path, _, _) = saved_tiny();
    let bytes = fs::read(&path).unwrap();
    let (s, e) = header_span(&bytes);
    let text = std::str::from_utf8(&bytes[s..e]).unwrap();
    let start = s + text.find("\"manifest\"").unwrap();
    let end = s + text.find("\"blob_sha256\"").unwrap();
    let mut checked = 0;
    for i in start..end {
        for mask in [0x01u8, 0x10, 0x80] {
            let mut bad = bytes.clone();
            bad[i] ^= mask;
            assert!(decode_checkpoint(&bad).is_err(), "byte {i} ^ {mask:#x} went unnoticed");
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

fn eval_rows() -> Evaluation {
    let a = Mask::from_fn(3, 3, |y, _| y == 0);
    let b = Mask::from_fn(3, 3, |_, x| x == 0);
    let rows = [("p", &a, &b), ("q", &b, &b)]
        .into_iter()
        .map(|(id, p, t)| {
            let c = confusion_counts(p, t).unwrap();
            SampleMetrics { id: id.into(), confusion: c, metrics: c.triple().unwrap() }
        })
        .collect();
    Evaluation::from_samples(rows).unwrap()
}

#[test]
fn reports_round_trip_and_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let empty = Report::new(serde_json::json!({}), &TrainHistory::default(), None);
    let path = dir.path().join("empty.json");
    write_report(&empty, &path).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(back, empty);
    assert!(back.epochs.is_empty() && back.samples.is_empty());
    assert_eq!(back.recompute_aggregates().unwrap(), None);

    let ev = eval_rows();
    let mut r = Report::new(serde_json::json!({"seed": 1}), &TrainHistory::default(), Some(&ev));
    r.comparisons.push(Comparison { label: "variant".into(), metrics: ev.macro_avg });
    let path = dir.path().join("full.json");
    write_report(&r, &path).unwrap();
    let back = read_report(&path).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.recompute_aggregates().unwrap(), back.aggregates);
    let agg = back.aggregates.unwrap();
    assert_eq!(agg.micro.iou, 4.0 / 8.0);
    assert_eq!(agg.macro_avg.iou, (0.2 + 1.0) / 2.0);

    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    v["report_version"] = serde_json::json!(7);
    fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    assert!(matches!(read_report(&path), Err(Error::Version { found: 7, .. })));
}

#[test]
fn overlay_blends_only_wound_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = common::random_image(&mut rng, 6, 6);
    let m = common::random_mask(&mut rng, 6, 6, 0.5);
    let color = [1.0, 0.0, 0.25];
    assert_eq!(render_overlay(&img, &m, color, 0.0).unwrap(), img);
    let full = render_overlay(&img, &m, color, 1.0).unwrap();
    let half = render_overlay(&img, &m, color, 0.4).unwrap();
    for y in 0..6 {
        for x in 0..6 {
            if m.get(y, x) {
                assert_eq!(full.pixel(y, x), color);
                let p = img.pixel(y, x);
                for k in 0..3 {
                    assert!((half.pixel(y, x)[k] - (0.6 * p[k] + 0.4 * color[k])).abs() < 1e-15);
                }
            } else {
                assert_eq!(half.pixel(y, x), img.pixel(y, x));
                assert_eq!(full.pixel(y, x), img.pixel(y, x));
            }
        }
    }
    assert!(matches!(render_overlay(&img, &Mask::zeros(5, 6), color, 0.5), Err(Error::Data(_))));
    assert!(matches!(render_overlay(&img, &m, color, 1.5), Err(Error::Param(_))));
}

#[test]
fn image_writer_reader_pair() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(3, 4, |y, x| [x as f64 / 3.0, y as f64 / 2.0, 1.0]);
    let p = dir.path().join("i.png");
    write_image_png(&p, &img).unwrap();
    let back = read_image_png(&p).unwrap();
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    let m = Mask::from_fn(3, 4, |y, x| x > y);
    write_mask_png(&p, &m).unwrap();
    assert_eq!(read_mask_png(&p).unwrap(), m);
}
