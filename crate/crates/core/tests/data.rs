use fedsnn::data::*;
use fedsnn::rng::{derived_rng, rng_from};
use proptest::prelude::*;

fn assert_exact_cover(p: &Partition, n: usize) {
    let mut all: Vec<usize> = p.assignments.iter().flatten().copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..n).collect::<Vec<_>>());
    assert!(p.is_valid_for(n));
}

#[test]
fn synth_is_balanced_and_reproducible() {
    let a = synth_dataset(4, 50, 3, 16, &mut rng_from(3)).unwrap();
    let b = synth_dataset(4, 50, 3, 16, &mut rng_from(3)).unwrap();
    assert_eq!(a.len(), 200);
    assert_eq!(a.class_counts(), vec![50; 4]);
    assert_eq!(a, b);
    assert_ne!(a, synth_dataset(4, 50, 3, 16, &mut rng_from(4)).unwrap());
}

#[test]
fn nearest_class_mean_separates_synthetic_classes() {
    for (classes, side) in [(4, 16), (62, 28)] {
        let train = synth_dataset(classes, 10, 3, side, &mut rng_from(1)).unwrap();
        let fresh = synth_dataset(classes, 10, 3, side, &mut rng_from(2)).unwrap();
        let dim = 3 * side * side;
        let mut means = vec![vec![0f64; dim]; classes];
        for (img, &l) in train.images.iter().zip(&train.labels) {
            for (m, &v) in means[l].iter_mut().zip(img) {
                *m += v as f64 / 10.0;
            }
        }
        let correct = fresh
            .images
            .iter()
            .zip(&fresh.labels)
            .filter(|(img, &l)| {
                let dist = |m: &Vec<f64>| m.iter().zip(img.iter()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
                let best = (0..classes).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
                best == l
            })
            .count();
        let acc = correct as f64 / fresh.len() as f64;
        assert!(acc >= 0.95, "{classes} classes: nearest-mean accuracy {acc}");
    }
}

#[test]
fn iid_gives_every_client_the_same_class_mix() {
    let ds = synth_dataset(62, 60, 1, 8, &mut rng_from(5)).unwrap();
    let p = partition_iid(&ds, 20, 3, &mut rng_from(6)).unwrap();
    assert_eq!(p.sizes(), vec![186; 20]);
    for client in &p.assignments {
        let mut counts = vec![0; 62];
        for &i in client {
            counts[ds.labels[i]] += 1;
        }
        assert_eq!(counts, vec![3; 62]);
    }
    assert!(p.is_valid_for(ds.len()));
}

#[test]
fn iid_names_the_short_class() {
    let mut ds = synth_dataset(3, 6, 1, 4, &mut rng_from(7)).unwrap();
    // drop one sample of class 2: it then has K * per_class - 1
    let drop = ds.labels.iter().position(|&l| l == 2).unwrap();
    ds.images.remove(drop);
    ds.labels.remove(drop);
    match partition_iid(&ds, 3, 2, &mut rng_from(8)) {
        Err(fedsnn::Error::InsufficientClass { class: 2, available: 5, required: 6 }) => {}
        other => panic!("expected a shortage of class 2, got {other:?}"),
    }
}

#[test]
fn dirichlet_entropy_falls_with_concentration() {
    let ds = synth_dataset(10, 20, 1, 4, &mut rng_from(9)).unwrap();
    let mean_entropy = |mu: f64| {
        (0..50)
            .map(|s| mean_class_entropy(&ds, &partition_dirichlet(&ds, 10, mu, &mut rng_from(s)).unwrap()))
            .sum::<f64>()
            / 50.0
    };
    let (low, high) = (mean_entropy(0.1), mean_entropy(10.0));
    assert!(low < high, "entropy at mu=0.1 is {low}, at mu=10 {high}");
}

#[test]
fn huge_concentration_is_nearly_uniform() {
    let ds = synth_dataset(4, 500, 1, 4, &mut rng_from(10)).unwrap();
    let mut worst: f64 = 0.0;
    for s in 0..100 {
        let p = partition_dirichlet(&ds, 5, 1e6, &mut rng_from(s)).unwrap();
        for (class, members) in ds.class_indices().iter().enumerate() {
            for client in &p.assignments {
                let held = client.iter().filter(|&&i| ds.labels[i] == class).count();
                worst = worst.max((held as f64 / members.len() as f64 - 0.2).abs());
            }
        }
    }
    assert!(worst <= 0.05, "largest deviation from 1/K: {worst}");
}

#[test]
fn dirichlet_is_deterministic() {
    let ds = synth_dataset(5, 10, 1, 4, &mut rng_from(11)).unwrap();
    let a = partition_dirichlet(&ds, 4, 0.5, &mut derived_rng(1, &[2])).unwrap();
    let b = partition_dirichlet(&ds, 4, 0.5, &mut derived_rng(1, &[2])).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dirichlet_is_an_exact_set_partition(seed in 0u64..10_000, k in 1usize..12, log_mu in -3.0f64..3.0, per_class in 1usize..8) {
        let ds = synth_dataset(5, per_class.max(3), 1, 4, &mut rng_from(seed)).unwrap();
        let p = partition_dirichlet(&ds, k, 10f64.powf(log_mu), &mut rng_from(seed + 1)).unwrap();
        prop_assert_eq!(p.num_clients(), k);
        assert_exact_cover(&p, ds.len());
    }

    #[test]
    fn truncation_keeps_a_subset(seed in 0u64..1000, max in 1usize..10) {
        let ds = synth_dataset(3, 12, 1, 4, &mut rng_from(seed)).unwrap();
        let p = partition_iid(&ds, 3, 4, &mut rng_from(seed)).unwrap();
        let t = p.truncated(max, &mut rng_from(seed + 2)).unwrap();
        for (full, kept) in p.assignments.iter().zip(&t.assignments) {
            prop_assert_eq!(kept.len(), full.len().min(max));
            prop_assert!(kept.iter().all(|i| full.contains(i)));
        }
    }
}

#[test]
fn salt_and_pepper_extremes() {
    let ds = synth_dataset(2, 3, 3, 8, &mut rng_from(12)).unwrap();
    assert_eq!(add_salt_pepper(&ds, 0.0, &mut rng_from(1)).unwrap(), ds);
    let full = add_salt_pepper(&ds, 1.0, &mut rng_from(1)).unwrap();
    assert!(full.images.iter().flatten().all(|&v| v == 0 || v == 255));
    assert_eq!(full.labels, ds.labels);
    assert!(add_salt_pepper(&ds, 1.5, &mut rng_from(1)).is_err());
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.fds");
    let ds = synth_dataset(3, 4, 2, 6, &mut rng_from(13)).unwrap();
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
    assert!(load_dataset(&dir.path().join("missing.fds")).is_err());
}
