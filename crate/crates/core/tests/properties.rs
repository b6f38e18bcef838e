use proptest::prelude::*;
use refed_core::data::{Domain, LabeledDataset, SitsSample};
use refed_core::metrics::confusion;
use refed_core::preprocess::{apply_scaling, fit_scaling, polygon_split, Partition};
use refed_core::refed::contrastive_loss;

/// Straight transcription of the supervised contrastive loss: normalize,
/// then loop over anchors and positives.
fn brute_force(z: &[f64], n: usize, dim: usize, labels: &[usize], tau: f64) -> f64 {
    let rows: Vec<Vec<f64>> = z
        .chunks(dim)
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (dot(&rows[i], &rows[a]) / tau).exp())
            .sum();
        let mut term = 0.0;
        for &p in &positives {
            term -= ((dot(&rows[i], &rows[p]) / tau).exp() / denom).ln();
        }
        total += term / positives.len() as f64;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>, f64)> {
    (1usize..=16, 1usize..=8, prop::sample::select(vec![0.07, 0.5, 1.0])).prop_flat_map(|(b, dim, tau)| {
        let n = 2 * b;
        (
            Just(n),
            Just(dim),
            prop::collection::vec(-2.0f64..2.0, n * dim),
            prop::collection::vec(0usize..4, n),
            Just(tau),
        )
    })
}

fn rotate(z: &[f64], dim: usize, angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = z.to_vec();
    if dim >= 2 {
        for row in out.chunks_mut(dim) {
            let (a, b) = (row[0], row[1]);
            row[0] = c * a - s * b;
            row[1] = s * a + c * b;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn contrastive_matches_the_double_loop((n, dim, z, labels, tau) in instance()) {
        prop_assume!(z.chunks(dim).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let fast = contrastive_loss(&z, n, dim, &labels, tau, true).unwrap().loss;
        let slow = brute_force(&z, n, dim, &labels, tau);
        prop_assert!((fast - slow).abs() <= 1e-6 * slow.abs().max(1.0), "{fast} vs {slow}");
    }

    #[test]
    fn contrastive_ignores_rotation_and_scale(
        (n, dim, z, labels, tau) in instance(),
        angle in 0.0f64..std::f64::consts::TAU,
        scale in 0.1f64..10.0,
    ) {
        prop_assume!(z.chunks(dim).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let base = contrastive_loss(&z, n, dim, &labels, tau, true).unwrap().loss;
        let moved: Vec<f64> = rotate(&z, dim, angle).iter().map(|v| v * scale).collect();
        let after = contrastive_loss(&moved, n, dim, &labels, tau, true).unwrap().loss;
        prop_assert!((base - after).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn contrastive_is_non_negative_with_a_bounded_gradient((n, dim, z, labels, tau) in instance()) {
        let out = contrastive_loss(&z, n, dim, &labels, tau, true).unwrap();
        prop_assert!(out.loss >= 0.0 && out.loss.is_finite());
        prop_assert!(out.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn confusion_counts_every_sample(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let (r, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&r, &p, 5).unwrap();
        prop_assert_eq!(cm.total() as usize, r.len());
        prop_assert_eq!(cm.trace() as usize, r.iter().zip(&p).filter(|(a, b)| a == b).count());
        let acc = cm.accuracy().unwrap();
        prop_assert!(cm.weighted_f1().unwrap() <= 100.0 && (0.0..=100.0).contains(&acc));
    }

    #[test]
    fn split_never_shares_a_polygon(
        polygons in prop::collection::vec((0u16..3, 1usize..6), 3..40),
        seed in 0u64..1000,
    ) {
        let ds = dataset(&polygons);
        let split = polygon_split(&ds, [0.5, 0.2, 0.3], seed).unwrap();
        let mut seen = vec![None; polygons.len()];
        for part in [Partition::Train, Partition::Validation, Partition::Test] {
            for i in split.indices(&ds, part).unwrap() {
                let poly = ds.polygon_ids()[i] as usize;
                prop_assert!(seen[poly].is_none() || seen[poly] == Some(part));
                seen[poly] = Some(part);
            }
        }
        prop_assert!(seen.iter().all(|s| s.is_some()), "every sample is assigned");
    }

    #[test]
    fn scaling_maps_into_a_bounded_range(polygons in prop::collection::vec((0u16..3, 1usize..6), 3..20)) {
        let ds = dataset(&polygons);
        let scaled = apply_scaling(&ds, &fit_scaling(&ds).unwrap()).unwrap();
        prop_assert_eq!(scaled.len(), ds.len());
        prop_assert!(scaled.all_features().iter().all(|v| v.is_finite()));
    }
}

/// One sample per pixel; polygon `i` has label `polygons[i].0` and
/// `polygons[i].1` pixels.
fn dataset(polygons: &[(u16, usize)]) -> LabeledDataset {
    let mut ds = LabeledDataset::new(4, 2, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    for (poly, &(label, pixels)) in polygons.iter().enumerate() {
        for px in 0..pixels {
            let features = (0..8).map(|j| (poly * 7 + px * 3 + j) as f32 * 0.01).collect();
            ds.push(SitsSample {
                features,
                class_label: label,
                polygon_id: poly as u32,
                domain: Domain::Target,
            })
            .unwrap();
        }
    }
    ds
}
