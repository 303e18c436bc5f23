use std::path::Path;

use pdgcl::data::{self, rotate_image, IMAGE_SIDE, ROTATION_GRID};

fn digits(n: usize) -> data::Dataset {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    data::load_mnist(dir).unwrap().train.truncated(n)
}

#[test]
fn real_digits_load_in_range() {
    let d = digits(100);
    assert_eq!(d.len(), 100);
    assert!(d.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
    let mut seen = [false; 10];
    d.labels.iter().for_each(|&l| seen[l] = true);
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn quarter_turn_is_a_pixel_permutation() {
    let d = digits(100);
    let s = IMAGE_SIDE;
    for img in d.images.rows() {
        let src = img.to_vec();
        let out = rotate_image(&src, 90.0);
        for y in 0..s {
            for x in 0..s {
                let expect = src[x * s + (s - 1 - y)];
                assert!((out[y * s + x] - expect).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn grid_rotations_roughly_keep_ink() {
    // Digits sit well inside the frame, so little mass is cropped and
    // bilinear resampling keeps the total within a few percent.
    let d = digits(100);
    for img in d.images.rows() {
        let src = img.to_vec();
        let mass: f64 = src.iter().sum();
        for deg in ROTATION_GRID {
            let m: f64 = rotate_image(&src, f64::from(deg)).iter().sum();
            let ratio = m / mass;
            assert!((0.85..=1.05).contains(&ratio), "{deg}: {ratio}");
        }
    }
}

#[test]
fn untrained_models_sit_at_chance() {
    use pdgcl::nn::{MlpModel, MNIST_DIMS};
    use pdgcl::train::evaluate;
    use rand::SeedableRng;

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let test = data::load_mnist(dir).unwrap().test.truncated(500);
    let sets = data::test_sets(&ROTATION_GRID, &test);
    let mut total = 0.0;
    for seed in 0..10 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let model = MlpModel::he_uniform(&MNIST_DIMS, &mut rng).unwrap();
        total += evaluate(&model, &sets, 150).unwrap().avg_accuracy;
    }
    let mean = total / 10.0;
    assert!((mean - 0.1).abs() <= 0.05, "{mean}");
}
