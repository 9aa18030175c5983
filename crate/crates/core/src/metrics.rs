//! Overlap (DSC) and boundary distance (ASD, in pixels) metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdfaError};

fn check(pred: &[u8], gt: &[u8], height: usize, width: usize) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != height * width {
        return Err(SdfaError::Shape(format!(
            "masks of {} and {} pixels for a {height}x{width} grid",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Dice similarity of class `cls`; 1.0 when the class is absent from both.
pub fn dsc(pred: &[u8], gt: &[u8], cls: u8) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == cls, b == cls);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Foreground pixels with a 4-neighbour outside the class or on the border.
pub fn boundary(mask: &[u8], cls: u8, height: usize, width: usize) -> Vec<bool> {
    let fg = |y: usize, x: usize| mask[y * width + x] == cls;
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if !fg(y, x) {
                continue;
            }
            out[y * width + x] = y == 0
                || x == 0
                || y + 1 == height
                || x + 1 == width
                || !fg(y - 1, x)
                || !fg(y + 1, x)
                || !fg(y, x - 1)
                || !fg(y, x + 1);
        }
    }
    out
}

/// Lower envelope of parabolas rooted at `f` (exact 1D squared distance).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let first = (0..n).find(|&q| f[q].is_finite());
    let Some(first) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest `true` site.
pub fn distance_transform(sites: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = height.max(width);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid.into_iter().map(f64::sqrt).collect()
}

/// Symmetric average surface distance of class `cls` in pixels.
pub fn asd(pred: &[u8], gt: &[u8], cls: u8, height: usize, width: usize) -> Result<f64> {
    check(pred, gt, height, width)?;
    let bp = boundary(pred, cls, height, width);
    let bg = boundary(gt, cls, height, width);
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(((height * height + width * width) as f64).sqrt()),
        _ => {}
    }
    let to_gt = distance_transform(&bg, height, width);
    let to_pred = distance_transform(&bp, height, width);
    let sum_p: f64 = bp.iter().zip(&to_gt).filter(|(b, _)| **b).map(|(_, d)| d).sum();
    let sum_g: f64 = bg.iter().zip(&to_pred).filter(|(b, _)| **b).map(|(_, d)| d).sum();
    Ok((sum_p + sum_g) / (np + ng) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_dsc: Vec<f64>,
    pub per_class_asd: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_asd: f64,
}

/// Per-sample metrics averaged over samples, then over foreground classes.
pub fn evaluate_masks(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    num_classes: usize,
    height: usize,
    width: usize,
) -> Result<EvalResult> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(SdfaError::Shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if num_classes < 2 {
        return Err(SdfaError::Config("need at least one foreground class".into()));
    }
    let fg = num_classes - 1;
    let mut d = vec![0.0; fg];
    let mut a = vec![0.0; fg];
    for (p, g) in preds.iter().zip(gts) {
        check(p, g, height, width)?;
        for c in 0..fg {
            let cls = (c + 1) as u8;
            d[c] += dsc(p, g, cls);
            a[c] += asd(p, g, cls, height, width)?;
        }
    }
    let n = preds.len() as f64;
    d.iter_mut().chain(a.iter_mut()).for_each(|v| *v /= n);
    Ok(EvalResult {
        mean_dsc: d.iter().sum::<f64>() / fg as f64,
        mean_asd: a.iter().sum::<f64>() / fg as f64,
        per_class_dsc: d,
        per_class_asd: a,
    })
}
