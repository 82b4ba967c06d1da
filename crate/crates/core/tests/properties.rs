//! Invariants of the grid, generator, POD, sensing and metric modules.

use fieldrecon::grid::{read_snapshots_csv, write_snapshots_csv, FieldGrid, SnapshotLibrary};
use fieldrecon::metrics::{depth_band_stats, error1, error_map};
use fieldrecon::sensing::{self, MeasurementOperator, NoiseModel};
use fieldrecon::synth::{generate_snapshot, StratificationParams};
use fieldrecon::{compute_pod, gappy_reconstruct, GappyOptions, Snapshot};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Column depths from the surface, each at least one layer.
fn arb_grid() -> impl Strategy<Value = FieldGrid> {
    (1usize..12, 1usize..8).prop_flat_map(|(nx, nz)| {
        proptest::collection::vec(1..=nz, nx).prop_map(move |depths| {
            let mask: Vec<Vec<bool>> = (0..nz)
                .map(|l| depths.iter().map(|&d| l < d).collect())
                .collect();
            FieldGrid::new(nx, nz, 500.0, 1.5, &mask).unwrap()
        })
    })
}

fn gaussian_field(rng: &mut ChaCha8Rng, n: usize, label: &str) -> Snapshot {
    Snapshot::new(
        label,
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0 + 10.0)
            .collect(),
    )
    .unwrap()
}

fn library(grid: &FieldGrid, r: usize, seed: u64) -> SnapshotLibrary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snaps: Vec<Snapshot> = (0..r)
        .map(|j| gaussian_field(&mut rng, grid.n(), &format!("s{j}")))
        .collect();
    SnapshotLibrary::from_snapshots(grid.clone(), &snaps).unwrap()
}

fn params_strategy() -> impl Strategy<Value = StratificationParams> {
    (
        4.0f64..10.0,
        0.0f64..15.0,
        2.0f64..40.0,
        0.5f64..6.0,
        -0.1f64..0.1,
        0.0f64..59.0,
        0.0f64..3.0,
        0.0f64..1.0,
        any::<u64>(),
    )
        .prop_map(
            |(bottom, rise, depth, width, grad, intake, strength, pert, seed)| {
                StratificationParams {
                    t_surface: bottom + rise,
                    t_bottom: bottom,
                    thermocline_depth: depth,
                    thermocline_width: width,
                    longitudinal_gradient: grad,
                    intake_depth: intake,
                    intake_strength: strength,
                    perturbation_amplitude: pert,
                    seed,
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cell_index_round_trip(grid in arb_grid()) {
        for i in 0..grid.n() {
            let c = grid.cell(i);
            prop_assert_eq!(grid.index_of(c.column, c.layer), Some(i));
        }
    }

    #[test]
    fn centering_preserves_columns(grid in arb_grid(), r in 1usize..6, seed in any::<u64>()) {
        let lib = library(&grid, r, seed);
        let original = lib.matrix().clone();
        let centered = lib.center().unwrap();
        let mean = centered.mean().unwrap().clone();
        for j in 0..r {
            let back = centered.matrix().column(j) + &mean;
            for i in 0..grid.n() {
                let want = original[(i, j)];
                prop_assert!((back[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn csv_round_trip_is_bit_identical(grid in arb_grid(), r in 1usize..5, seed in any::<u64>()) {
        let snaps = library(&grid, r, seed).snapshots();
        let mut first = Vec::new();
        write_snapshots_csv(&mut first, &snaps, grid.n()).unwrap();
        let loaded = read_snapshots_csv(first.as_slice(), &grid).unwrap();
        let mut second = Vec::new();
        write_snapshots_csv(&mut second, &loaded, grid.n()).unwrap();
        let reloaded = read_snapshots_csv(second.as_slice(), &grid).unwrap();
        prop_assert_eq!(&first, &second);
        for (a, b) in snaps.iter().zip(&reloaded) {
            let bits = |s: &Snapshot| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn unperturbed_intake_keeps_columns_stratified(mut p in params_strategy()) {
        p.intake_strength = 0.0;
        let grid = FieldGrid::default_reservoir();
        let field = generate_snapshot(&grid, &p).unwrap();
        for column in 0..grid.nx() {
            let ix = grid.column_indices(column);
            for w in ix.windows(2) {
                prop_assert!(field.values()[w[1]] <= field.values()[w[0]]);
            }
        }
    }

    #[test]
    fn generated_values_are_bounded(p in params_strategy()) {
        let grid = FieldGrid::default_reservoir();
        let field = generate_snapshot(&grid, &p).unwrap();
        let km = grid.length() / 1000.0;
        // a negative gradient lowers the far end by |gradient| * length
        let lo = p.t_bottom - p.intake_strength - 1.0 - (-p.longitudinal_gradient).max(0.0) * km;
        let hi = p.t_surface + p.longitudinal_gradient.abs() * km + 1.0;
        prop_assert!(field.values().iter().all(|v| (lo..=hi).contains(v)));
        prop_assert_eq!(generate_snapshot(&grid, &p).unwrap(), field);
    }

    #[test]
    fn selection_is_linear(grid in arb_grid(), seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = gaussian_field(&mut rng, grid.n(), "x1");
        let x2 = gaussian_field(&mut rng, grid.n(), "x2");
        let mix = Snapshot::new(
            "mix",
            x1.values().iter().zip(x2.values()).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let p = rng.random_range(1..=grid.n());
        let op = sensing::random_points(&grid, p, seed).unwrap();
        let quiet = NoiseModel::noiseless();
        let lhs = op.apply(&mix, &quiet).unwrap();
        let rhs = op.apply(&x1, &quiet).unwrap() * a + op.apply(&x2, &quiet).unwrap() * b;
        prop_assert!((lhs - rhs).amax() <= 1e-12 * 100.0);
    }

    #[test]
    fn random_points_are_wet_distinct_and_seeded(grid in arb_grid(), seed in any::<u64>(), frac in 0.0f64..1.0) {
        let p = 1 + ((grid.n() - 1) as f64 * frac) as usize;
        let op = sensing::random_points(&grid, p, seed).unwrap();
        let mut ix = op.indices().to_vec();
        prop_assert!(ix.iter().all(|&i| i < grid.n()));
        ix.sort_unstable();
        ix.dedup();
        prop_assert_eq!(ix.len(), p);
        let again = sensing::random_points(&grid, p, seed).unwrap();
        prop_assert_eq!(again.indices(), op.indices());

        let noise = NoiseModel::gaussian(0.3, seed);
        let x = Snapshot::new("x", vec![1.0; grid.n()]).unwrap();
        prop_assert_eq!(op.apply(&x, &noise).unwrap(), op.apply(&x, &noise).unwrap());
    }

    #[test]
    fn error1_is_scale_invariant(seed in any::<u64>(), c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_field(&mut rng, 20, "x");
        let xhat = gaussian_field(&mut rng, 20, "xhat");
        let scale = |s: &Snapshot| Snapshot::new("c", s.values().iter().map(|v| v * c).collect()).unwrap();
        let base = error1(&x, &xhat).unwrap();
        prop_assert!((error1(&scale(&x), &scale(&xhat)).unwrap() - base).abs() <= 1e-12 * base.max(1.0));
        prop_assert_eq!(error1(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn band_counts_cover_every_cell(grid in arb_grid(), cuts in proptest::collection::vec(0.01f64..0.99, 0..6)) {
        let depth = grid.depth();
        let mut edges = vec![0.0];
        let mut inner: Vec<f64> = cuts.iter().map(|c| c * depth).collect();
        inner.sort_by(f64::total_cmp);
        inner.dedup();
        edges.extend(inner);
        edges.push(depth);
        let map = vec![1.0; grid.n()];
        let bands = depth_band_stats(&map, &grid, &edges).unwrap();
        prop_assert_eq!(bands.iter().map(|b| b.count).sum::<usize>(), grid.n());
        let m = error_map(&Snapshot::new("a", map.clone()).unwrap(), &Snapshot::new("b", map).unwrap()).unwrap();
        prop_assert!(m.iter().all(|v| *v == 0.0));
    }
}

fn small_grid() -> FieldGrid {
    FieldGrid::triangular(10, 6, 1000.0, 2.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn span_fields_are_recovered_exactly(seed in any::<u64>(), k in 1usize..4) {
        let grid = small_grid();
        let pod = compute_pod(&library(&grid, 8, seed).center().unwrap(), k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let a = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal) * 4.0);
        let x = Snapshot::new("x", (pod.mean() + pod.modes() * a).iter().copied().collect()).unwrap();
        let op = sensing::random_points(&grid, 2 * k, seed).unwrap();
        prop_assume!(op.select_rows(pod.modes()).svd(false, false).singular_values.min() > 1e-6);
        let y = op.apply(&x, &NoiseModel::noiseless()).unwrap();
        let rec = gappy_reconstruct(&pod, &op, &y, GappyOptions::default()).unwrap();
        let fluct = |s: &Snapshot| Snapshot::new("f", s.values().iter().zip(pod.mean().iter()).map(|(v, m)| v - m).collect()).unwrap();
        prop_assert!(error1(&fluct(&x), &fluct(&rec.field)).unwrap() <= 1e-10);
    }

    #[test]
    fn full_observation_projects_orthogonally(seed in any::<u64>(), k in 1usize..5) {
        let grid = small_grid();
        let pod = compute_pod(&library(&grid, 8, seed).center().unwrap(), k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let x = gaussian_field(&mut rng, grid.n(), "x");
        let op = MeasurementOperator::from_indices(&grid, (0..grid.n()).collect()).unwrap();
        let y = op.apply(&x, &NoiseModel::noiseless()).unwrap();
        let rec = gappy_reconstruct(&pod, &op, &y, GappyOptions::default()).unwrap();
        let xp = x.to_vector() - pod.mean();
        let proj = pod.mean() + pod.modes() * (pod.modes().transpose() * xp);
        let diff = (rec.field.to_vector() - &proj).norm();
        prop_assert!(diff <= 1e-10 * proj.norm());
    }

    #[test]
    fn residual_does_not_grow_with_k(seed in any::<u64>()) {
        let grid = small_grid();
        let pod = compute_pod(&library(&grid, 8, seed).center().unwrap(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let x = gaussian_field(&mut rng, grid.n(), "x");
        let op = sensing::random_points(&grid, 12, seed).unwrap();
        let y = op.apply(&x, &NoiseModel::noiseless()).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..=5 {
            let basis = pod.truncate(k).unwrap();
            prop_assume!(op.select_rows(basis.modes()).svd(false, false).singular_values.min() > 1e-6);
            let r = gappy_reconstruct(&basis, &op, &y, GappyOptions::default()).unwrap().residual_norm;
            prop_assert!(r <= last * (1.0 + 1e-12) + 1e-12);
            last = r;
        }
    }
}
