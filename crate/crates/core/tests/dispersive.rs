mod common;

use common::*;
use dmpo_autodiff::{Eval, Graph, Tensor};
use dmpo_core::dispersive::*;
use dmpo_core::rng;
use proptest::prelude::*;

fn config(kind: DispersiveKind) -> DispersiveConfig {
    DispersiveConfig {
        kind,
        temperature: 0.7,
        margin: 1.5,
    }
}

const LOSSES: [DispersiveKind; 4] = [
    DispersiveKind::NceL2,
    DispersiveKind::NceCos,
    DispersiveKind::Hinge,
    DispersiveKind::Cov,
];

fn batch(seed: u64, rows: usize, cols: usize) -> Tensor {
    uniform(&mut rng::seeded(seed), rows, cols, -1.0, 1.0)
}

#[test]
fn hand_values() {
    let v = |h: &Tensor, kind, t: f64, m: f64| {
        dispersive_value(h, &DispersiveConfig { kind, temperature: t, margin: m }).unwrap()
    };
    let pair = |a: &[f64], b: &[f64]| Tensor::from_rows(&[a.to_vec(), b.to_vec()]);
    assert!(v(&pair(&[0.0], &[0.0]), DispersiveKind::NceL2, 1.0, 1.0).abs() < 1e-10);
    assert!((v(&pair(&[0.0], &[1.0]), DispersiveKind::NceL2, 1.0, 1.0) + 1.5).abs() < 1e-10);
    assert!((v(&pair(&[0.0, 0.0], &[0.4, 0.0]), DispersiveKind::Hinge, 1.0, 1.0) - 0.6).abs() < 1e-10);
    assert!((v(&pair(&[0.5], &[0.5]), DispersiveKind::Hinge, 1.0, 1.0) - 1.0).abs() < 1e-10);
    assert_eq!(v(&pair(&[0.0], &[3.0]), DispersiveKind::Hinge, 1.0, 1.0), 0.0);
    assert!((v(&pair(&[1.0, 1.0], &[-1.0, -1.0]), DispersiveKind::Cov, 1.0, 1.0) - 4.0).abs() < 1e-10);
    assert!((v(&pair(&[1.0, 0.0], &[-1.0, 0.0]), DispersiveKind::NceCos, 1.0, 1.0) + 2.0).abs() < 1e-10);
    assert!(v(&pair(&[0.0, 1.0], &[0.0, 1.0]), DispersiveKind::NceCos, 1.0, 1.0).abs() < 1e-10);
    assert_eq!(v(&batch(1, 5, 3), DispersiveKind::None, 1.0, 1.0), 0.0);
}

#[test]
fn uncorrelated_columns_have_zero_covariance_loss() {
    let h = Tensor::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
    assert!(dispersive_value(&h, &config(DispersiveKind::Cov)).unwrap().abs() < 1e-15);
}

#[test]
fn single_row_rejected() {
    for kind in LOSSES {
        assert!(dispersive_value(&Tensor::row(&[1.0, 2.0]), &config(kind)).is_err());
    }
    assert!(effective_rank(&Tensor::row(&[1.0]), 1e-3).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    for (seed, kind) in LOSSES.into_iter().enumerate() {
        let h = batch(seed as u64 + 10, 4, 3);
        let cfg = config(kind);
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let loss = dispersive_loss(&mut g, &hv, &cfg).unwrap();
        let analytic = g.backward_scalar(loss).unwrap().wrt(hv).unwrap().data().to_vec();
        let numeric = fd_tensor(&h, |x| dispersive_value(x, &cfg).unwrap());
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn nce_l2_is_not_translation_invariant() {
    let h = Tensor::from_rows(&[[0.0], [1.0]]);
    let moved = h.add(&Tensor::from_rows(&[[2.0], [2.0]]));
    let cfg = DispersiveConfig {
        kind: DispersiveKind::NceL2,
        temperature: 1.0,
        margin: 1.0,
    };
    let a = dispersive_value(&h, &cfg).unwrap();
    let b = dispersive_value(&moved, &cfg).unwrap();
    // Numerator terms grow from (0 + 1)/2 to (4 + 9)/2.
    assert!((a - b - 6.0).abs() < 1e-12);
}

#[test]
fn separating_two_points_never_raises_the_loss() {
    let cfg_l2 = config(DispersiveKind::NceL2);
    let cfg_h = config(DispersiveKind::Hinge);
    let at = |d: f64| Tensor::from_rows(&[[-d / 2.0, 0.0], [d / 2.0, 0.0]]);
    let mut prev = (f64::INFINITY, f64::INFINITY);
    for i in 0..40 {
        let d = 0.1 * i as f64;
        let cur = (
            dispersive_value(&at(d), &cfg_l2).unwrap(),
            dispersive_value(&at(d), &cfg_h).unwrap(),
        );
        assert!(cur.0 <= prev.0 && cur.1 <= prev.1, "d = {d}");
        if d >= cfg_h.margin {
            assert_eq!(cur.1, 0.0);
        }
        prev = cur;
    }
}

#[test]
fn effective_rank_oracles() {
    assert_eq!(effective_rank(&Tensor::from_rows(&[[1.0, 2.0]; 5]), 1e-3).unwrap(), 0);
    // Centered scaled basis rows span a (d-1)-dimensional subspace.
    assert_eq!(effective_rank(&Tensor::identity(2).scale(3.0), 1e-3).unwrap(), 1);
    assert_eq!(effective_rank(&Tensor::identity(3), 1e-3).unwrap(), 2);
    let h = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [0.0, 0.0, 0.0]]);
    assert_eq!(effective_rank(&h, 1e-3).unwrap(), 3);
    // Rank 1 plus a tiny direction that the threshold drops.
    let thin = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 1e-6], [2.0, 0.0], [-2.0, -1e-6]]);
    assert_eq!(effective_rank(&thin, 1e-3).unwrap(), 1);
    assert_eq!(effective_rank(&thin, 1e-9).unwrap(), 2);
}

#[test]
fn dispatch_matches_direct_calls() {
    let h = batch(3, 6, 4);
    let b = &mut Eval;
    let c = config(DispersiveKind::Hinge);
    assert_eq!(
        dispersive_value(&h, &c).unwrap(),
        hinge(b, &h, c.margin).unwrap().item()
    );
    assert_eq!(
        dispersive_value(&h, &config(DispersiveKind::Cov)).unwrap(),
        cov_loss(b, &h).unwrap().item()
    );
    for kind in DispersiveKind::ALL {
        assert_eq!(kind.as_str().parse::<DispersiveKind>().unwrap(), kind);
    }
    assert!("l2".parse::<DispersiveKind>().is_err());
}

fn permuted(h: &Tensor, seed: u64) -> Tensor {
    let mut idx: Vec<usize> = (0..h.rows()).collect();
    let mut r = rng::seeded(seed);
    for i in (1..idx.len()).rev() {
        let j = rand::Rng::random_range(&mut r, 0..=i);
        idx.swap(i, j);
    }
    h.select_rows(&idx)
}

proptest! {
    #[test]
    fn losses_and_rank_ignore_row_order(seed in 0u64..5_000, rows in 2usize..9, cols in 1usize..5) {
        let h = batch(seed, rows, cols);
        let p = permuted(&h, seed + 1);
        for kind in LOSSES {
            let a = dispersive_value(&h, &config(kind)).unwrap();
            let b = dispersive_value(&p, &config(kind)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{kind}");
        }
        prop_assert_eq!(effective_rank(&h, 1e-3).unwrap(), effective_rank(&p, 1e-3).unwrap());
    }

    #[test]
    fn hinge_and_cov_ignore_translation(seed in 0u64..5_000, rows in 2usize..9, shift in -3.0f64..3.0) {
        let h = batch(seed, rows, 3);
        let moved = h.map(|x| x + shift);
        for kind in [DispersiveKind::Hinge, DispersiveKind::Cov] {
            let a = dispersive_value(&h, &config(kind)).unwrap();
            let b = dispersive_value(&moved, &config(kind)).unwrap();
            prop_assert!((a - b).abs() < 1e-10, "{kind}: {a} vs {b}");
        }
    }

    #[test]
    fn nce_cos_ignores_row_scale(seed in 0u64..5_000, s in 0.1f64..10.0) {
        let h = batch(seed, 5, 3);
        let mut scaled = h.clone();
        for x in &mut scaled.data_mut()[3..6] {
            *x *= s;
        }
        let c = config(DispersiveKind::NceCos);
        let a = dispersive_value(&h, &c).unwrap();
        let b = dispersive_value(&scaled, &c).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }
}
