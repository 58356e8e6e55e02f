/// `counts[true][pred]` over `classes` classes.
pub fn confusion(truth: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn class_count(truth: &[usize], pred: &[usize]) -> usize {
    truth.iter().chain(pred).max().map_or(0, |m| m + 1)
}

/// F1 from pooled true-positive, false-positive and false-negative counts.
pub fn micro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(truth.len(), pred.len(), "label and prediction counts differ");
    if truth.is_empty() {
        return 0.0;
    }
    let m = confusion(truth, pred, class_count(truth, pred));
    let tp: usize = (0..m.len()).map(|c| m[c][c]).sum();
    let miss = truth.len() - tp;
    f1(tp, miss, miss)
}

/// Unweighted mean of per-class F1 over the classes present in either
/// `truth` or `pred`.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(truth.len(), pred.len(), "label and prediction counts differ");
    let c = class_count(truth, pred);
    let m = confusion(truth, pred, c);
    let mut sum = 0.0;
    let mut present = 0;
    for k in 0..c {
        let tp = m[k][k];
        let fn_: usize = m[k].iter().sum::<usize>() - tp;
        let fp: usize = (0..c).map(|r| m[r][k]).sum::<usize>() - tp;
        if tp + fn_ + fp == 0 {
            continue;
        }
        present += 1;
        sum += f1(tp, fp, fn_);
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_hand_cases() {
        assert_eq!(micro_f1(&[0, 1, 2], &[0, 1, 2]), 1.0);
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]), 1.0);
        // Class 0: tp 1, fn 1; class 1: tp 1, fp 1.
        let t = [0, 0, 1];
        let p = [0, 1, 1];
        assert!((micro_f1(&t, &p) - 2.0 / 3.0).abs() < 1e-15);
        assert!((macro_f1(&t, &p) - (2.0 / 3.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[1, 1], &[0, 0]), 0.0);
    }
}
