//! Segmentation losses. Each kernel returns the scalar loss together with
//! its gradient with respect to the input matrix.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::pointcloud::Label;

fn check_labels(rows: usize, classes: usize, labels: &[Label], ignore: Label) -> Result<usize> {
    if labels.len() != rows {
        return Err(Error::shape(format!("{rows} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= classes) {
        return Err(Error::format(format!("label {bad} out of range for {classes} classes")));
    }
    let valid = labels.iter().filter(|&&l| l != ignore).count();
    if valid == 0 {
        return Err(Error::Empty("every row carries the ignore label".into()));
    }
    Ok(valid)
}

/// Mean over non-ignored rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[Label], ignore: Label) -> Result<(f64, Array2<f64>)> {
    let count = check_labels(logits.nrows(), logits.ncols(), labels, ignore)? as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut g), &l) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(labels) {
        if l == ignore {
            continue;
        }
        let l = l as usize;
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += if row[l] == max {
            // log(1 + Σ_{j≠l} e^{z_j - z_l}) without cancellation
            (sum - exps[l]).ln_1p()
        } else {
            max - row[l] + sum.ln()
        };
        for (j, e) in exps.iter().enumerate() {
            g[j] = (e / sum - if j == l { 1.0 } else { 0.0 }) / count;
        }
    }
    Ok((total / count, grad))
}

/// Gradient of the Lovász extension of the Jaccard loss for ground-truth
/// indicators already sorted by decreasing error.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász-softmax over the classes present in `labels`. `probs` rows must
/// be distributions; ignored rows contribute neither loss nor gradient.
pub fn lovasz_softmax(probs: ArrayView2<f64>, labels: &[Label], ignore: Label) -> Result<(f64, Array2<f64>)> {
    check_labels(probs.nrows(), probs.ncols(), labels, ignore)?;
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != ignore).collect();
    let present: Vec<usize> = (0..probs.ncols())
        .filter(|&c| rows.iter().any(|&i| labels[i] as usize == c))
        .collect();

    let mut grad = Array2::zeros(probs.raw_dim());
    let mut total = 0.0;
    let scale = 1.0 / present.len() as f64;
    for &c in &present {
        let mut items: Vec<(f64, bool, usize)> = rows
            .iter()
            .map(|&i| {
                let fg = labels[i] as usize == c;
                let p = probs[[i, c]];
                (if fg { 1.0 - p } else { p }, fg, i)
            })
            .collect();
        items.sort_by(|a, b| b.0.total_cmp(&a.0));
        let gt_sorted: Vec<bool> = items.iter().map(|t| t.1).collect();
        let g = lovasz_grad(&gt_sorted);
        for ((err, fg, i), gk) in items.iter().zip(&g) {
            total += err * gk;
            grad[[*i, c]] += scale * if *fg { -gk } else { *gk };
        }
    }
    Ok((total * scale, grad))
}

/// Deep-supervision total: `main + α · Σ aux`.
pub fn dss_total(main: f64, aux: &[f64], alpha: f64) -> f64 {
    main + alpha * aux.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_ln_c() {
        let (l, _) = cross_entropy(Array2::zeros((4, 5)).view(), &[0, 1, 2, 4], 255).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_logits() {
        let logits = array![[50.0, 0.0, 0.0], [0.0, 0.0, 50.0]];
        let (l, _) = cross_entropy(logits.view(), &[0, 2], 255).unwrap();
        assert!(l >= 0.0 && l <= 1e-20, "{l}");
    }

    #[test]
    fn ignored_rows_have_zero_grad() {
        let logits = array![[1.0, 2.0], [3.0, -1.0]];
        let (_, g) = cross_entropy(logits.view(), &[255, 1], 255).unwrap();
        assert_eq!(g.row(0).to_vec(), vec![0.0, 0.0]);
        assert!(cross_entropy(logits.view(), &[255, 255], 255).is_err());
        assert!(cross_entropy(logits.view(), &[0, 7], 255).is_err());
    }

    #[test]
    fn lovasz_perfect_is_zero() {
        let probs = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (l, _) = lovasz_softmax(probs.view(), &[0, 1, 2], 255).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn lovasz_binary_hand_case() {
        // class-1 probs 0.9/0.6/0.2 with labels 1,1,0.
        // class 1 errors (0.1, 0.4, 0.2): sorted 0.4(fg) 0.2(bg) 0.1(fg);
        //   jaccard 1/2, 2/3, 1 → grads 1/2, 1/6, 1/3 → 0.2 + 0.2/6 + 0.1/3
        // class 0 errors (0.1, 0.4, 0.2) for p0 = 0.1/0.4/0.8, fg only on row 2:
        //   sorted 0.4(bg) 0.2(fg) 0.1(bg): jaccard 1/2, 1, 1 → grads 1/2, 1/2, 0 → 0.3
        let probs = array![[0.1, 0.9], [0.4, 0.6], [0.8, 0.2]];
        let (l, _) = lovasz_softmax(probs.view(), &[1, 1, 0], 255).unwrap();
        let c1 = 0.4 * 0.5 + 0.2 / 6.0 + 0.1 / 3.0;
        let c0 = 0.3;
        assert!((l - (c0 + c1) / 2.0).abs() < 1e-15, "{l}");
    }

    #[test]
    fn lovasz_row_permutation_invariant() {
        let probs = array![[0.3, 0.7], [0.55, 0.45], [0.9, 0.1], [0.2, 0.8]];
        let labels = [1, 0, 0, 0];
        let (a, _) = lovasz_softmax(probs.view(), &labels, 255).unwrap();
        let perm = [2, 0, 3, 1];
        let p2 = Array2::from_shape_fn((4, 2), |(i, j)| probs[[perm[i], j]]);
        let l2: Vec<Label> = perm.iter().map(|&i| labels[i]).collect();
        let (b, _) = lovasz_softmax(p2.view(), &l2, 255).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn dss_formula() {
        assert_eq!(dss_total(2.0, &[1.0; 4], 0.0), 2.0);
        assert_eq!(dss_total(2.0, &[1.0; 4], 1.0), 6.0);
        assert_eq!(dss_total(0.5, &[0.25, 0.75], 2.0), 2.5);
    }
}
