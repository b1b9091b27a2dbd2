use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliencycut::data::image_io::{decode_pnm, encode_png, encode_pnm, quantize, read_image, write_image, ImageFormat, Raster};
use saliencycut::data::synth::{
    read_manifest, render, sample_seed, synth_dataset, synth_samples, write_corpus, CorpusSpec, DefectKind, TextureKind,
};
use saliencycut::data::{load_dataset, load_image, Dataset, LoadOptions, Sample};
use saliencycut::tensor::Tensor;
use saliencycut::Error;

fn random_raster(w: usize, h: usize, channels: usize, rng: &mut impl Rng) -> Raster {
    Raster {
        width: w,
        height: h,
        channels,
        pixels: (0..w * h * channels).map(|_| rng.gen()).collect(),
    }
}

fn write_ppm(path: &Path, raster: &Raster) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_image(path, raster, ImageFormat::Pnm).unwrap();
}

#[test]
fn loads_normals_and_typed_anomalies() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..4 {
        write_ppm(&dir.path().join(format!("normal/{i}.ppm")), &random_raster(8, 8, 3, &mut rng));
    }
    for i in 0..2 {
        write_ppm(&dir.path().join(format!("anomaly/cut/{i}.ppm")), &random_raster(8, 8, 3, &mut rng));
    }
    std::fs::write(dir.path().join("normal/notes.txt"), "ignored").unwrap();
    let opts = LoadOptions {
        input_size: 8,
        channels: 3,
    };
    let ds = load_dataset(dir.path(), opts).unwrap();
    assert_eq!(ds.normals.len(), 4);
    assert_eq!(ds.anomalies.len(), 2);
    assert!(ds.normals.iter().all(|s| s.label == 0 && s.type_tag == "normal"));
    assert!(ds.anomalies.iter().all(|s| s.label == 1 && s.type_tag == "cut"));
    assert_eq!(ds.anomalies[1].id, "cut/1");
    assert_eq!(ds.anomaly_types(), vec!["cut".to_string()]);
    assert!(ds.split.is_none());

    std::fs::remove_dir_all(dir.path().join("anomaly")).unwrap();
    let only_normals = load_dataset(dir.path(), opts).unwrap();
    assert!(only_normals.anomalies.is_empty());
}

#[test]
fn missing_or_empty_normals_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), LoadOptions::default()), Err(Error::Data(_))));
    std::fs::create_dir(dir.path().join("normal")).unwrap();
    assert!(matches!(load_dataset(dir.path(), LoadOptions::default()), Err(Error::Data(_))));
}

#[test]
fn split_manifests_are_read_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..3 {
        write_ppm(&dir.path().join(format!("normal/{i}.ppm")), &random_raster(4, 4, 3, &mut rng));
    }
    std::fs::write(dir.path().join("train.txt"), "# ids\nnormal/0\nnormal/1\n").unwrap();
    std::fs::write(dir.path().join("test.txt"), "normal/2\n").unwrap();
    let opts = LoadOptions {
        input_size: 4,
        channels: 3,
    };
    let split = load_dataset(dir.path(), opts).unwrap().split.unwrap();
    assert_eq!(split.train, vec!["normal/0", "normal/1"]);
    assert_eq!(split.test, vec!["normal/2"]);
    std::fs::write(dir.path().join("test.txt"), "normal/9\n").unwrap();
    assert!(matches!(load_dataset(dir.path(), opts), Err(Error::Data(_))));
}

#[test]
fn pnm_and_png_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for channels in [1, 3] {
        let r = random_raster(7, 5, channels, &mut rng);
        assert_eq!(decode_pnm(&encode_pnm(&r).unwrap()).unwrap(), r);
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("x.png");
        std::fs::write(&png, encode_png(&r).unwrap()).unwrap();
        assert_eq!(read_image(&png).unwrap(), r);
    }
    // Plain-text variant with a comment.
    let ascii = b"P3\n# tiny\n2 1\n255\n255 0 0  0 128 255\n";
    let r = decode_pnm(ascii).unwrap();
    assert_eq!(r.pixels, vec![255, 0, 0, 0, 128, 255]);
    assert!(matches!(decode_pnm(b"P9\n1 1\n255\n\0"), Err(Error::Format(_))));
    assert!(matches!(decode_pnm(b"P6\n2 2\n255\n\0\0"), Err(Error::Format(_))));
}

#[test]
fn quantized_tensors_survive_a_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = Tensor::from_fn(&[3, 6, 6], |_| quantize(rng.gen()) as f64 / 255.0);
    let raster = Raster::from_tensor(&image).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ppm");
    write_image(&path, &raster, ImageFormat::Pnm).unwrap();
    let opts = LoadOptions {
        input_size: 6,
        channels: 3,
    };
    assert_eq!(load_image(&path, opts).unwrap(), image);
    let gray = load_image(&path, LoadOptions { channels: 1, ..opts }).unwrap();
    assert_eq!(gray.shape(), &[1, 6, 6]);
    let big = load_image(&path, LoadOptions { input_size: 12, ..opts }).unwrap();
    assert_eq!(big.data()[0], image.data()[0]);
    assert_eq!(big.data()[1], image.data()[0]);
    assert_eq!(quantize(0.5), 128);
    assert_eq!((quantize(-0.2), quantize(1.7)), (0, 255));
}

#[test]
fn samples_validate_their_images() {
    assert!(matches!(Sample::new("a", Tensor::zeros(&[2, 2]), "normal"), Err(Error::Dimension(_))));
    assert!(matches!(Sample::new("a", Tensor::full(&[1, 2, 2], -0.1), "normal"), Err(Error::Data(_))));
    let n = Sample::new("n", Tensor::zeros(&[1, 2, 2]), "normal").unwrap();
    let a = Sample::new("a", Tensor::zeros(&[1, 2, 2]), "cut").unwrap();
    assert!(matches!(Dataset::new(vec![a.clone()], vec![]), Err(Error::Data(_))));
    assert!(matches!(Dataset::new(vec![n.clone()], vec![n.clone()]), Err(Error::Data(_))));
    assert!(Dataset::new(vec![n], vec![a]).is_ok());
}

fn small_spec(format: ImageFormat) -> CorpusSpec {
    CorpusSpec {
        texture: TextureKind::ValueNoise,
        normal_count: 6,
        defects: vec![(DefectKind::Blotch, 2), (DefectKind::Scratch, 2), (DefectKind::Hole, 1), (DefectKind::HueShift, 1)],
        size: 32,
        format,
    }
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_corpus_is_byte_deterministic() {
    for format in [ImageFormat::Pnm, ImageFormat::Png] {
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_corpus(a.path(), &small_spec(format), 11).unwrap();
        write_corpus(b.path(), &small_spec(format), 11).unwrap();
        write_corpus(c.path(), &small_spec(format), 12).unwrap();
        let (ta, tb, tc) = (tree_bytes(a.path()), tree_bytes(b.path()), tree_bytes(c.path()));
        assert_eq!(ta, tb);
        assert_ne!(ta, tc);
    }
}

#[test]
fn manifest_covers_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(ImageFormat::Pnm);
    let rows = write_corpus(dir.path(), &spec, 5).unwrap();
    assert_eq!(rows, read_manifest(&dir.path().join("manifest.csv")).unwrap());
    assert_eq!(rows.len(), 12);
    let ds = load_dataset(dir.path(), LoadOptions { input_size: 32, channels: 3 }).unwrap();
    assert_eq!(ds.samples().count(), rows.len());
    let in_memory = synth_dataset(&spec, 5).unwrap();
    for row in &rows {
        let loaded = ds.samples().find(|s| s.id == row.id).expect("manifest id on disk");
        let synth = in_memory.samples().find(|s| s.id == row.id).unwrap();
        assert_eq!(loaded.image, synth.image);
        assert_eq!(loaded.label, row.label);
        assert_eq!(loaded.type_tag, row.type_tag);
        assert!(dir.path().join(&row.path).is_file());
        if row.label == 1 {
            let mask = read_image(&dir.path().join("masks").join(format!("{}.pgm", row.id))).unwrap();
            let on: Vec<usize> = (0..mask.pixels.len()).filter(|&i| mask.pixels[i] == 255).collect();
            assert!((on.len() as f64 / 1024.0 - row.mask_fraction).abs() < 1e-12);
            let (x0, y0, x1, y1) = (row.bbox_x0.unwrap(), row.bbox_y0.unwrap(), row.bbox_x1.unwrap(), row.bbox_y1.unwrap());
            assert!(on.iter().all(|&i| (x0..x1).contains(&(i % 32)) && (y0..y1).contains(&(i / 32))));
            assert!(row.mask_fraction > 0.005 && row.mask_fraction < 0.3);
        } else {
            assert!(row.bbox_x0.is_none() && row.mask_fraction == 0.0);
        }
    }
}

#[test]
fn defects_only_touch_their_mask() {
    let spec = small_spec(ImageFormat::Pnm);
    for (sample, rendered, row) in synth_samples(&spec, 9).unwrap() {
        assert_eq!(row.seed, rendered_seed(&spec, &row.id));
        if sample.is_normal() {
            assert_eq!(rendered.image, rendered.clean);
            continue;
        }
        let plane = 32 * 32;
        let mut changed = 0;
        for p in 0..plane {
            let differs = (0..3).any(|c| rendered.image.data()[c * plane + p] != rendered.clean.data()[c * plane + p]);
            if differs {
                assert!(rendered.mask[p], "{}: change outside mask at {p}", row.id);
                changed += 1;
            }
        }
        assert!(changed > 0, "{} has no visible defect", row.id);
    }
}

fn rendered_seed(spec: &CorpusSpec, id: &str) -> u64 {
    let (tag, index) = id.split_once('/').unwrap();
    let index: u64 = index.parse().unwrap();
    let mut global = 0;
    if tag != "normal" {
        global += spec.normal_count as u64;
        for (d, n) in &spec.defects {
            if d.name() == tag {
                break;
            }
            global += *n as u64;
        }
    }
    sample_seed(9, global + index)
}

#[test]
fn renders_are_seeded() {
    for texture in [TextureKind::Stripes, TextureKind::Checker, TextureKind::ValueNoise] {
        let a = render(texture, Some(DefectKind::Scratch), 24, 3).unwrap();
        let b = render(texture, Some(DefectKind::Scratch), 24, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(sample_seed(1, 0), sample_seed(1, 1));
    assert_ne!(sample_seed(1, 0), sample_seed(2, 0));
}

#[test]
fn corpus_spec_parsing() {
    assert_eq!(
        CorpusSpec::parse_defects("blotch=3, hue_shift=1").unwrap(),
        vec![(DefectKind::Blotch, 3), (DefectKind::HueShift, 1)]
    );
    assert!(matches!(CorpusSpec::parse_defects("crack=2"), Err(Error::Config(_))));
    let dup = CorpusSpec {
        defects: vec![(DefectKind::Hole, 1), (DefectKind::Hole, 2)],
        ..CorpusSpec::default()
    };
    assert!(matches!(dup.validate(), Err(Error::Config(_))));
    assert!("checker".parse::<TextureKind>().is_ok());
}

#[test]
fn defects_render_at_every_supported_size() {
    for size in [16, 20, 32, 48, 64, 96] {
        for kind in [DefectKind::Blotch, DefectKind::Scratch, DefectKind::Hole, DefectKind::HueShift] {
            for seed in 0..5 {
                let r = render(TextureKind::Stripes, Some(kind), size, seed).unwrap();
                let f = r.mask_fraction();
                assert!(f > 0.005 && f < 0.3, "{kind:?} at {size}: coverage {f}");
            }
        }
    }
}
