//! Distribution checks on the random samplers, by Pearson chi-square at p = 0.001.

use fdrn_core::eval::synth_scene;
use fdrn_core::interaction::{make_misleading_schedule, MisleadingKind, MISLEADING_TOTAL_CLICKS};
use fdrn_core::training::{sample_dynamic_roi, synthesize_train_clicks};
use fdrn_core::{BinaryMask, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Upper 0.1% points of the chi-square distribution by degrees of freedom.
fn critical(df: usize) -> f64 {
    match df {
        2 => 13.816,
        9 => 27.877,
        18 => 42.312,
        19 => 43.820,
        23 => 49.728,
        _ => panic!("no table entry for {df} degrees of freedom"),
    }
}

fn chi_square(counts: &[usize], expected: f64) -> f64 {
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn misleading_positions_are_uniform() {
    let mut counts = vec![0usize; MISLEADING_TOTAL_CLICKS];
    let mut repetitive = 0usize;
    let seeds = 10_000u64;
    for seed in 0..seeds {
        let s = make_misleading_schedule(seed);
        for (&i, &kind) in &s.bad {
            counts[i - 1] += 1;
            repetitive += (kind == MisleadingKind::Repetitive) as usize;
        }
    }
    let total: usize = counts.iter().sum();
    let x2 = chi_square(&counts, total as f64 / MISLEADING_TOTAL_CLICKS as f64);
    assert!(x2 < critical(MISLEADING_TOTAL_CLICKS - 1), "chi-square {x2:.1} for {counts:?}");
    let sd = (total as f64 * 0.25).sqrt();
    assert!((repetitive as f64 - total as f64 / 2.0).abs() < 4.5 * sd, "{repetitive} of {total} repetitive");
}

#[test]
fn roi_proportion_is_uniform_between_bounds() {
    let cfg = TrainConfig::default();
    let gt = BinaryMask::from_fn(100, 100, |(r, c)| (45..50).contains(&r) && (45..50).contains(&c));
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 20_000;
    let mut deciles = vec![0usize; 10];
    for _ in 0..n {
        let d = sample_dynamic_roi((100, 100), &gt, &mut rng, &cfg).unwrap();
        assert!(!d.clamped);
        let u = (d.proportion - cfg.min_proportion) / (cfg.max_proportion - cfg.min_proportion);
        deciles[((u * 10.0) as usize).min(9)] += 1;
    }
    let x2 = chi_square(&deciles, n as f64 / 10.0);
    assert!(x2 < critical(9), "chi-square {x2:.1} for {deciles:?}");
}

#[test]
fn roi_placement_is_uniform_among_feasible_offsets() {
    let cfg = TrainConfig { min_proportion: 0.25, max_proportion: 0.25, ..TrainConfig::default() };
    let gt = BinaryMask::from_fn(40, 40, |(r, c)| (18..20).contains(&r) && (18..20).contains(&c));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tops = std::collections::BTreeMap::new();
    let n = 30_000;
    for _ in 0..n {
        let d = sample_dynamic_roi((40, 40), &gt, &mut rng, &cfg).unwrap();
        assert_eq!(d.roi.height(), 20);
        *tops.entry(d.roi.top).or_insert(0usize) += 1;
    }
    let counts: Vec<usize> = tops.values().copied().collect();
    assert_eq!(tops.keys().copied().collect::<Vec<_>>(), (0..=18).collect::<Vec<_>>());
    let x2 = chi_square(&counts, n as f64 / counts.len() as f64);
    assert!(x2 < critical(counts.len() - 1), "chi-square {x2:.1} for {counts:?}");
}

#[test]
fn initial_click_count_is_uniform() {
    let gt = BinaryMask::from_fn(48, 48, |(r, c)| (10..30).contains(&r) && (12..40).contains(&c));
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let max = 24;
    let n = 24_000;
    let mut counts = vec![0usize; max];
    let mut negatives = 0usize;
    let mut later = 0usize;
    for _ in 0..n {
        let clicks = synthesize_train_clicks(&gt, None, &mut rng, 1, max, 3).unwrap();
        counts[clicks.len() - 1] += 1;
        assert!(clicks[0].polarity.is_positive());
        negatives += clicks[1..].iter().filter(|c| !c.polarity.is_positive()).count();
        later += clicks.len() - 1;
        for c in &clicks {
            assert_eq!(gt.get(c.row, c.col), c.polarity.is_positive());
        }
    }
    let x2 = chi_square(&counts, n as f64 / max as f64);
    assert!(x2 < critical(max - 1), "chi-square {x2:.1} for {counts:?}");
    let sd = (later as f64 * 0.25).sqrt();
    assert!((negatives as f64 - later as f64 / 2.0).abs() < 4.5 * sd);
}

#[test]
fn synthetic_scenes_cover_one_to_three_instances() {
    let mut hist = [0usize; 3];
    let n = 600;
    for i in 0..n {
        let s = synth_scene(9, i, 64);
        hist[s.instances - 1] += 1;
    }
    for (k, &c) in hist.iter().enumerate() {
        let share = c as f64 / n as f64;
        assert!((0.15..0.5).contains(&share), "{} instances in {share:.2} of scenes", k + 1);
    }
}
