use modalprompt::evaluation::{AccuracyMatrix, MetricReport};
use proptest::prelude::*;

fn lower_triangle(t: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(0.0f64..=100.0, t * (t + 1) / 2).prop_map(move |flat| {
        let mut rows = Vec::new();
        let mut it = flat.into_iter();
        for s in 1..=t {
            rows.push(it.by_ref().take(s).collect());
        }
        rows
    })
}

fn names(t: usize) -> Vec<String> {
    (1..=t).map(|i| format!("task{i}")).collect()
}

proptest! {
    #[test]
    fn renaming_tasks_moves_names_not_numbers(rows in (2usize..=6).prop_flat_map(lower_triangle)) {
        let t = rows.len();
        let a = MetricReport::from_matrix(&AccuracyMatrix::from_rows(names(t), rows.clone()).unwrap()).unwrap();
        let mut renamed = names(t);
        renamed.reverse();
        let b = MetricReport::from_matrix(&AccuracyMatrix::from_rows(renamed.clone(), rows).unwrap()).unwrap();
        prop_assert_eq!(&b.task_names, &renamed);
        prop_assert_eq!(a.last, b.last);
        prop_assert_eq!(a.bwt, b.bwt);
    }

    #[test]
    fn permuting_the_final_row_permutes_last_and_keeps_its_mean(
        rows in (2usize..=6).prop_flat_map(lower_triangle),
        rot in 0usize..6,
    ) {
        let t = rows.len();
        let base = MetricReport::from_matrix(&AccuracyMatrix::from_rows(names(t), rows.clone()).unwrap()).unwrap();
        let mut shuffled = rows;
        shuffled[t - 1].rotate_left(rot % t);
        let r = MetricReport::from_matrix(&AccuracyMatrix::from_rows(names(t), shuffled).unwrap()).unwrap();
        let mut expected = base.last.values.clone();
        expected.rotate_left(rot % t);
        prop_assert_eq!(&r.last.values, &expected);
        prop_assert!((r.last.mean - base.last.mean).abs() < 1e-9);
        prop_assert!((r.mean_acc.unwrap().values[t - 2] - base.mean_acc.unwrap().values[t - 2]).abs() < 1e-9);
    }

    #[test]
    fn no_change_after_learning_means_zero_forgetting(diag in proptest::collection::vec(0.0f64..=100.0, 2..=8)) {
        // every task keeps the accuracy it reached when it was learned
        let t = diag.len();
        let rows: Vec<Vec<f64>> = (1..=t).map(|s| diag[..s].to_vec()).collect();
        let r = MetricReport::from_matrix(&AccuracyMatrix::from_rows(names(t), rows).unwrap()).unwrap();
        prop_assert!(r.bwt.unwrap().values.iter().all(|&b| b.abs() < 1e-9));
    }
}
