use gabmil::data::{synthesize_bags, SynthTaskSpec, SyntheticBag};

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Rejection threshold at α = 0.01 for large samples.
fn ks_critical(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.628 * ((n + m) / (n * m)).sqrt()
}

type Projection = (&'static str, Box<dyn Fn(&[f32]) -> f64>);

fn pooled(bags: &[SyntheticBag], label: u8, column: impl Fn(&[f32]) -> f64) -> Vec<f64> {
    bags.iter()
        .filter(|b| b.record.label == label)
        .flat_map(|b| {
            let c = b.record.feature_dim();
            b.record.features.data().chunks(c).map(&column).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn instance_features_are_indistinguishable_across_classes() {
    let spec = SynthTaskSpec::default();
    let bags = synthesize_bags(&spec, 100).unwrap();
    let projections: [Projection; 3] = [
        ("signature axis", Box::new(|r: &[f32]| r[0] as f64)),
        ("noise axis", Box::new(|r: &[f32]| r[7] as f64)),
        ("row mean", Box::new(|r: &[f32]| r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64)),
    ];
    for (name, f) in projections.iter() {
        let neg = pooled(&bags, 0, f);
        let pos = pooled(&bags, 1, f);
        let d = ks_statistic(neg.clone(), pos.clone());
        let crit = ks_critical(neg.len(), pos.len());
        assert!(d < crit, "{name}: KS statistic {d:.4} >= {crit:.4}");
    }
}

#[test]
fn signal_counts_match_across_classes() {
    let spec = SynthTaskSpec::default();
    for b in synthesize_bags(&spec, 30).unwrap() {
        assert_eq!(b.signal.len(), spec.signal_count);
        assert_eq!(b.record.len(), spec.bag_size);
    }
}

#[test]
fn signal_geometry_follows_the_label() {
    let spec = SynthTaskSpec::default();
    for b in synthesize_bags(&spec, 50).unwrap() {
        let coords: Vec<_> = b.signal.iter().map(|&i| b.record.coords[i]).collect();
        for (i, a) in coords.iter().enumerate() {
            for c in &coords[i + 1..] {
                let d = a.chebyshev(*c) as usize;
                if b.record.label == 1 {
                    assert!(d < spec.cluster_window, "{}: spread {d}", b.record.id);
                } else {
                    assert!(d >= spec.min_distance, "{}: distance {d}", b.record.id);
                }
            }
        }
    }
}

#[test]
fn generator_is_a_pure_function_of_the_seed() {
    let spec = SynthTaskSpec {
        seed: 41,
        ..SynthTaskSpec::default()
    };
    let a = synthesize_bags(&spec, 5).unwrap();
    let b = synthesize_bags(&spec, 5).unwrap();
    assert_eq!(a, b);
    let other = synthesize_bags(&SynthTaskSpec { seed: 42, ..spec }, 5).unwrap();
    assert_ne!(a, other);
}
