mod common;

use common::*;
use dfsp_core::diff::{Matrix, Tape};
use dfsp_core::objective::{
    combine_losses, loss_dfm, loss_spm, loss_st_obj, total_loss, LossParts, LossWeights,
};
use proptest::prelude::*;

fn scalar(tape: &Tape, v: dfsp_core::diff::Var) -> f64 {
    tape.value(v).get(0, 0)
}

#[test]
fn uniform_logits_give_log_class_count() {
    for classes in [1usize, 2, 5, 83] {
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::filled(4, classes, 0.37)).unwrap();
        let l = loss_dfm(&mut tape, logits, &[0, classes - 1, 0, 0]).unwrap();
        assert!((scalar(&tape, l) - (classes as f64).ln()).abs() < 1e-9);
    }
}

#[test]
fn spm_uniform_when_image_orthogonal_to_text() {
    let mut tape = Tape::new();
    let fv = tape
        .constant(Matrix::from_rows(&[[1.0, 0.0]]).unwrap())
        .unwrap();
    let ft = tape
        .constant(Matrix::from_rows(&[[0.0, 1.0]; 5]).unwrap())
        .unwrap();
    let l = loss_spm(&mut tape, fv, ft, &[3], 0.01).unwrap();
    assert!((scalar(&tape, l) - 5f64.ln()).abs() < 1e-9);
}

#[test]
fn st_obj_uniform_is_sum_of_logs() {
    let mut tape = Tape::new();
    let fv = tape
        .constant(Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap())
        .unwrap();
    let fs = tape
        .constant(Matrix::from_rows(&[[0.0, 2.0, 0.0]; 3]).unwrap())
        .unwrap();
    let fo = tape
        .constant(Matrix::from_rows(&[[0.0, 0.0, -1.0]; 4]).unwrap())
        .unwrap();
    let l = loss_st_obj(&mut tape, fv, fs, fo, &[2], &[1], 0.01).unwrap();
    assert!((scalar(&tape, l) - (3f64.ln() + 4f64.ln())).abs() < 1e-9);
}

#[test]
fn single_state_term_is_exactly_zero() {
    let mut tape = Tape::new();
    let fv = tape
        .constant(Matrix::from_rows(&[[0.6, 0.8]]).unwrap())
        .unwrap();
    let fs = tape
        .constant(Matrix::from_rows(&[[0.3, -0.2]]).unwrap())
        .unwrap();
    let fo = tape
        .constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())
        .unwrap();
    let both = loss_st_obj(&mut tape, fv, fs, fo, &[0], &[1], 1.0).unwrap();
    let mut t2 = Tape::new();
    let logits = t2
        .constant(Matrix::from_rows(&[[0.6, 0.8]]).unwrap())
        .unwrap();
    let obj_only = loss_dfm(&mut t2, logits, &[1]).unwrap();
    assert_eq!(scalar(&tape, both), scalar(&t2, obj_only));
}

#[test]
fn margin_saturates_to_zero() {
    let mut prev = f64::INFINITY;
    for margin in [1.0, 10.0, 100.0, 1000.0] {
        let mut tape = Tape::new();
        let logits = tape
            .constant(Matrix::from_rows(&[[margin, 0.0, 0.0]]).unwrap())
            .unwrap();
        let l = {
            let v = loss_dfm(&mut tape, logits, &[0]).unwrap();
            scalar(&tape, v)
        };
        assert!(l >= 0.0 && l <= prev);
        prev = l;
    }
    assert!(prev < 1e-12);
}

#[test]
fn random_instances_match_direct_cross_entropy() {
    let mut r = rng(3);
    for _ in 0..20 {
        let fv_rows: Rows = random_rows(&mut r, 2, 3)
            .iter()
            .map(|x| normalize(x))
            .collect();
        let ft_rows: Rows = random_rows(&mut r, 4, 3)
            .iter()
            .map(|x| normalize(x))
            .collect();
        let tau = 0.1;
        let labels = [1usize, 3];
        let direct: Rows = fv_rows
            .iter()
            .map(|v| ft_rows.iter().map(|t| dot(v, t) / tau).collect())
            .collect();
        let want = cross_entropy(&direct, &labels);

        let mut tape = Tape::new();
        let fv = tape.constant(to_matrix(&fv_rows)).unwrap();
        let ft = tape.constant(to_matrix(&ft_rows)).unwrap();
        let got = {
            let v = loss_spm(&mut tape, fv, ft, &labels, tau).unwrap();
            scalar(&tape, v)
        };
        assert!((got - want).abs() < 1e-9);

        // states and objects with unnormalized decomposed rows
        let fs_rows = random_rows(&mut r, 3, 3);
        let fo_rows = random_rows(&mut r, 2, 3);
        let s_logits: Rows = fv_rows
            .iter()
            .map(|v| {
                fs_rows
                    .iter()
                    .map(|s| dot(v, &normalize(s)) / tau)
                    .collect()
            })
            .collect();
        let o_logits: Rows = fv_rows
            .iter()
            .map(|v| {
                fo_rows
                    .iter()
                    .map(|o| dot(v, &normalize(o)) / tau)
                    .collect()
            })
            .collect();
        let want = cross_entropy(&s_logits, &[2, 0]) + cross_entropy(&o_logits, &[1, 1]);
        let fs = tape.constant(to_matrix(&fs_rows)).unwrap();
        let fo = tape.constant(to_matrix(&fo_rows)).unwrap();
        let got = {
            let v = loss_st_obj(&mut tape, fv, fs, fo, &[2, 0], &[1, 1], tau).unwrap();
            scalar(&tape, v)
        };
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn label_out_of_range_rejected() {
    let mut tape = Tape::new();
    let logits = tape.constant(Matrix::zeros(1, 3)).unwrap();
    assert!(loss_dfm(&mut tape, logits, &[3]).is_err());
}

#[test]
fn total_loss_arithmetic_and_ablation() {
    let parts = LossParts {
        l_dfm: 1.0,
        l_st_obj: 2.0,
        l_spm: 3.0,
    };
    let b = total_loss(
        parts,
        LossWeights {
            alpha: 0.5,
            beta: 0.25,
        },
    )
    .unwrap();
    assert_eq!(b.total, 2.75);
    let b = total_loss(
        parts,
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
        },
    )
    .unwrap();
    assert_eq!(b.total, b.l_dfm);
    let d = LossWeights::default();
    assert_eq!((d.alpha, d.beta), (0.01, 0.1));
    assert!(total_loss(
        parts,
        LossWeights {
            alpha: -1.0,
            beta: 0.0
        }
    )
    .is_err());
    assert!(total_loss(
        LossParts {
            l_dfm: f64::NAN,
            ..parts
        },
        d
    )
    .is_err());
}

#[test]
fn combined_graph_skips_zero_weight_terms() {
    let mut tape = Tape::new();
    let x = tape
        .param(Matrix::from_rows(&[[0.3, -0.7]]).unwrap())
        .unwrap();
    let y = tape
        .param(Matrix::from_rows(&[[1.0, 2.0]]).unwrap())
        .unwrap();
    let a = loss_dfm(&mut tape, x, &[0]).unwrap();
    let b = loss_dfm(&mut tape, y, &[1]).unwrap();
    let total = combine_losses(
        &mut tape,
        a,
        b,
        b,
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
        },
    )
    .unwrap();
    assert_eq!(scalar(&tape, total), scalar(&tape, a));
    let g = tape.backward(total).unwrap();
    assert!(g.get(y).is_none());
}

proptest! {
    #[test]
    fn breakdown_identity_holds(
        l in prop::array::uniform3(0.0f64..10.0),
        alpha in 0.0f64..5.0,
        beta in 0.0f64..5.0,
    ) {
        let b = total_loss(LossParts { l_dfm: l[0], l_st_obj: l[1], l_spm: l[2] }, LossWeights { alpha, beta }).unwrap();
        prop_assert!((b.total - (l[0] + alpha * l[1] + beta * l[2])).abs() < 1e-9);
        prop_assert!(b.total >= 0.0);
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in 0u64..10_000, classes in 1usize..8) {
        let mut r = rng(seed);
        let rows = random_rows(&mut r, 3, classes).into_iter()
            .map(|row| row.into_iter().map(|v| 50.0 * v).collect())
            .collect::<Rows>();
        let mut tape = Tape::new();
        let logits = tape.constant(to_matrix(&rows)).unwrap();
        let labels = [0, classes - 1, classes / 2];
        let l = { let v = loss_dfm(&mut tape, logits, &labels).unwrap(); scalar(&tape, v) };
        prop_assert!(l >= 0.0);
        prop_assert!((l - cross_entropy(&rows, &labels)).abs() < 1e-9);
    }
}
