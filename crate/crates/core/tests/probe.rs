use diffloss_core::image::ImageBatch;
use diffloss_core::metrics::{train_probe, ProbeConfig, PROBE_GATE};
use diffloss_core::synthdata::{generate_shapes, ShapesDatasetSpec, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn spec(n: usize, split: Split) -> ShapesDatasetSpec {
    ShapesDatasetSpec {
        n_images: n,
        resolution: 32,
        n_classes: 8,
        seed: 11,
        split,
    }
}

#[test]
fn probe_passes_gate_and_shuffled_labels_hit_chance() {
    let train = generate_shapes(&spec(2000, Split::Train)).unwrap();
    let test = generate_shapes(&spec(400, Split::Test)).unwrap();
    let t0 = std::time::Instant::now();
    let probe = train_probe(&train, &test, ProbeConfig::default(), 5).unwrap();
    let acc = probe.clean_accuracy().unwrap();
    eprintln!("probe accuracy {acc:.4} in {:?}", t0.elapsed());
    assert!(acc >= PROBE_GATE, "clean-test accuracy {acc}");

    let images = ImageBatch::from_images(&train.images).unwrap();
    let mut shuffled = train.labels.clone();
    shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
    let top1 = probe.top1(&images, &shuffled).unwrap();
    let p = 1.0 / 8.0;
    let sigma = (p * (1.0 - p) / shuffled.len() as f64).sqrt();
    assert!((top1 - p).abs() <= 3.0 * sigma, "shuffled top1 {top1}");

    let a = probe.features(&images.narrow(0, 4)).unwrap();
    let b = probe.features(&images.narrow(0, 4)).unwrap();
    assert_eq!(a, b);
}
