//! Segmentation evaluation: Dice overlap and boundary-distance percentiles
//! on integer label maps with physical pixel spacing.
//!
//! The distance side uses an exact separable squared Euclidean distance
//! transform, which stays an independent route from the all-pairs oracle
//! used in tests.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// 2-D integer class-label map with physical pixel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    labels: Vec<u16>,
    height: usize,
    width: usize,
    /// (row spacing, column spacing), both strictly positive.
    spacing: (f64, f64),
}

impl LabelMask {
    pub fn new(labels: Vec<u16>, height: usize, width: usize, spacing: (f64, f64)) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Validation(format!(
                "label buffer has {} entries for a {}x{} grid",
                labels.len(),
                height,
                width
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 {
            return Err(Error::Validation(format!(
                "spacing must be positive, got {:?}",
                spacing
            )));
        }
        Ok(LabelMask {
            labels,
            height,
            width,
            spacing,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn same_grid(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixels of class c that touch the grid border or a non-c 4-neighbor.
    pub fn boundary(&self, class: u16) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) != class {
                    continue;
                }
                let on_border =
                    y == 0 || x == 0 || y == self.height - 1 || x == self.width - 1;
                let exposed = on_border
                    || self.get(y - 1, x) != class
                    || self.get(y + 1, x) != class
                    || self.get(y, x - 1) != class
                    || self.get(y, x + 1) != class;
                if exposed {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Per-pixel argmax over the class axis of [classes, H, W] logits.
/// Ties resolve to the lowest class index.
pub fn logits_to_mask<E: Element>(logits: &Tensor<E>, spacing: (f64, f64)) -> Result<LabelMask> {
    if logits.rank() != 3 {
        return Err(Error::Validation(format!(
            "logits_to_mask expects [classes, H, W], got {:?}",
            logits.shape()
        )));
    }
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let plane = h * w;
    let mut labels = vec![0u16; plane];
    for p in 0..plane {
        let mut best = logits.data()[p];
        let mut best_c = 0usize;
        for ci in 1..c {
            let v = logits.data()[ci * plane + p];
            if v > best {
                best = v;
                best_c = ci;
            }
        }
        labels[p] = best_c as u16;
    }
    LabelMask::new(labels, h, w, spacing)
}

/// Dice similarity 2|X n Y| / (|X| + |Y|) on the class-c sets.
/// Both sets empty counts as perfect agreement (1.0); exactly one empty is 0.
pub fn dsc(pred: &LabelMask, gt: &LabelMask, class: u16) -> Result<f64> {
    if !pred.same_grid(gt) {
        return Err(Error::Validation(format!(
            "grid mismatch: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut x = 0u64;
    let mut y = 0u64;
    let mut inter = 0u64;
    for (a, b) in pred.labels.iter().zip(&gt.labels) {
        let pa = *a == class;
        let pb = *b == class;
        x += pa as u64;
        y += pb as u64;
        inter += (pa && pb) as u64;
    }
    if x == 0 && y == 0 {
        return Ok(1.0);
    }
    if x == 0 || y == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (x + y) as f64)
}

/// Exact anisotropic squared Euclidean distance transform (separable
/// lower-envelope passes). `sites` marks zero-distance pixels.
fn squared_edt(sites: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    const INF: f64 = f64::INFINITY;
    let (sy, sx) = spacing;
    let wy = sy * sy;
    let wx = sx * sx;

    let mut field: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { INF }).collect();

    // 1-D transform d(p) = min_q f(q) + weight (p-q)^2 via parabola
    // envelope; infinite cells never contribute a parabola.
    fn pass(f: &[f64], weight: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
        let n = f.len();
        let Some(first) = f.iter().position(|&x| x != f64::INFINITY) else {
            out[..n].fill(f64::INFINITY);
            return;
        };
        let sq = |i: usize| i as f64 * i as f64;
        let mut k = 0usize;
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in first + 1..n {
            if f[q] == f64::INFINITY {
                continue;
            }
            loop {
                let p = v[k];
                let s = ((f[q] + weight * sq(q)) - (f[p] + weight * sq(p)))
                    / (2.0 * weight * (q as f64 - p as f64));
                if s <= z[k] {
                    k -= 1; // finite parabolas keep s > z[0] = -inf
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        let mut k2 = 0usize;
        for p in 0..n {
            while z[k2 + 1] < p as f64 {
                k2 += 1;
            }
            let q = v[k2];
            let d = p as f64 - q as f64;
            out[p] = f[q] + weight * d * d;
        }
    }

    let n = h.max(w);
    let mut buf = vec![0.0f64; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];

    // along columns (x), row by row
    let mut tmp = vec![INF; h * w];
    for y in 0..h {
        pass(&field[y * w..(y + 1) * w], wx, &mut buf[..w], &mut v, &mut z);
        tmp[y * w..(y + 1) * w].copy_from_slice(&buf[..w]);
    }
    // along rows (y), column by column
    let mut col = vec![INF; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = tmp[y * w + x];
        }
        pass(&col, wy, &mut buf[..h], &mut v, &mut z);
        for y in 0..h {
            field[y * w + x] = buf[y];
        }
    }
    field
}

/// Pooled directed boundary distances between the class-c sets of two
/// masks, in mm. Errors when either class set is empty.
fn pooled_boundary_distances(pred: &LabelMask, gt: &LabelMask, class: u16) -> Result<Vec<f64>> {
    if !pred.same_grid(gt) {
        return Err(Error::Validation(format!(
            "grid mismatch: {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::Validation(format!(
            "spacing mismatch: {:?} vs {:?}",
            pred.spacing, gt.spacing
        )));
    }
    let bp = pred.boundary(class);
    let bg = gt.boundary(class);
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "class {class} absent from {}",
            if bp.is_empty() { "prediction" } else { "ground truth" }
        )));
    }
    let (h, w) = (pred.height, pred.width);
    let mut sites_g = vec![false; h * w];
    for &(y, x) in &bg {
        sites_g[y * w + x] = true;
    }
    let mut sites_p = vec![false; h * w];
    for &(y, x) in &bp {
        sites_p[y * w + x] = true;
    }
    let edt_g = squared_edt(&sites_g, h, w, pred.spacing);
    let edt_p = squared_edt(&sites_p, h, w, pred.spacing);

    let mut pooled = Vec::with_capacity(bp.len() + bg.len());
    for &(y, x) in &bp {
        pooled.push(edt_g[y * w + x].sqrt());
    }
    for &(y, x) in &bg {
        pooled.push(edt_p[y * w + x].sqrt());
    }
    Ok(pooled)
}

/// Nearest-rank percentile: sorted ascending, element ceil(q n) - 1.
pub fn percentile_nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

/// 95th percentile of the pooled directed boundary distances, in mm.
pub fn hd95(pred: &LabelMask, gt: &LabelMask, class: u16) -> Result<f64> {
    let mut pooled = pooled_boundary_distances(pred, gt, class)?;
    Ok(percentile_nearest_rank(&mut pooled, 0.95))
}

/// The literal maximum form: max over the pooled directed distances
/// (the 100th-percentile Hausdorff distance), in mm.
pub fn hd100(pred: &LabelMask, gt: &LabelMask, class: u16) -> Result<f64> {
    let pooled = pooled_boundary_distances(pred, gt, class)?;
    Ok(pooled.iter().cloned().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&[u16]], spacing: (f64, f64)) -> LabelMask {
        let h = rows.len();
        let w = rows[0].len();
        let labels: Vec<u16> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LabelMask::new(labels, h, w, spacing).unwrap()
    }

    #[test]
    fn dsc_hand_cases() {
        let a = mask_from(&[&[1, 1, 0], &[0, 0, 0]], (1.0, 1.0));
        let b = mask_from(&[&[1, 0, 1], &[0, 0, 0]], (1.0, 1.0));
        // |X|=2, |Y|=2, intersection 1 -> 0.5
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        // disjoint nonempty
        let c = mask_from(&[&[0, 0, 1], &[0, 0, 0]], (1.0, 1.0));
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.0);
        // both empty -> 1, one empty -> 0
        assert_eq!(dsc(&a, &b, 7).unwrap(), 1.0);
        let empty = mask_from(&[&[0, 0, 0], &[0, 0, 0]], (1.0, 1.0));
        assert_eq!(dsc(&a, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn dsc_is_symmetric() {
        let a = mask_from(&[&[1, 1, 0], &[0, 1, 0]], (1.0, 1.0));
        let b = mask_from(&[&[1, 0, 0], &[1, 1, 0]], (1.0, 1.0));
        assert_eq!(dsc(&a, &b, 1).unwrap(), dsc(&b, &a, 1).unwrap());
    }

    #[test]
    fn hd95_identical_masks_is_zero() {
        let a = mask_from(&[&[0, 1, 0], &[1, 1, 1], &[0, 1, 0]], (1.0, 1.0));
        assert_eq!(hd95(&a, &a, 1).unwrap(), 0.0);
        assert_eq!(hd100(&a, &a, 1).unwrap(), 0.0);
    }

    #[test]
    fn hd95_singletons_five_pixels_apart() {
        // two single-pixel sets 5 px apart at 1 mm spacing; with two pooled
        // samples the 95th percentile is the max
        let mut p = vec![0u16; 8 * 8];
        p[1 * 8 + 1] = 1;
        let mut g = vec![0u16; 8 * 8];
        g[1 * 8 + 6] = 1;
        let pm = LabelMask::new(p, 8, 8, (1.0, 1.0)).unwrap();
        let gm = LabelMask::new(g, 8, 8, (1.0, 1.0)).unwrap();
        assert_eq!(hd95(&pm, &gm, 1).unwrap(), 5.0);
    }

    #[test]
    fn spacing_scales_distances_exactly() {
        let a = mask_from(&[&[1, 0, 0, 0], &[0, 0, 0, 0]], (1.0, 1.0));
        let b = mask_from(&[&[0, 0, 0, 1], &[0, 0, 0, 0]], (1.0, 1.0));
        let d1 = hd95(&a, &b, 1).unwrap();
        let a3 = mask_from(&[&[1, 0, 0, 0], &[0, 0, 0, 0]], (3.0, 3.0));
        let b3 = mask_from(&[&[0, 0, 0, 1], &[0, 0, 0, 0]], (3.0, 3.0));
        let d3 = hd95(&a3, &b3, 1).unwrap();
        assert!((d3 - 3.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn empty_class_is_undefined_not_zero() {
        let a = mask_from(&[&[1, 0], &[0, 0]], (1.0, 1.0));
        let empty = mask_from(&[&[0, 0], &[0, 0]], (1.0, 1.0));
        assert!(matches!(
            hd95(&a, &empty, 1),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn edt_matches_brute_force_with_anisotropic_spacing() {
        let (h, w) = (9, 7);
        let spacing = (0.7, 1.9);
        let mut sites = vec![false; h * w];
        for (i, s) in sites.iter_mut().enumerate() {
            *s = (i * 2654435761) % 97 < 13;
        }
        if !sites.iter().any(|&s| s) {
            sites[5] = true;
        }
        let edt = squared_edt(&sites, h, w, spacing);
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::INFINITY;
                for sy in 0..h {
                    for sx in 0..w {
                        if sites[sy * w + sx] {
                            let dy = (y as f64 - sy as f64) * spacing.0;
                            let dx = (x as f64 - sx as f64) * spacing.1;
                            best = best.min(dy * dy + dx * dx);
                        }
                    }
                }
                assert!(
                    (edt[y * w + x] - best).abs() < 1e-9,
                    "({y},{x}): {} vs {}",
                    edt[y * w + x],
                    best
                );
            }
        }
    }

    #[test]
    fn logits_argmax_to_labels() {
        let logits = Tensor::<f32>::new(
            vec![3, 1, 2],
            vec![0.1, 0.9, 0.8, 0.2, 0.3, 0.2],
        )
        .unwrap();
        let m = logits_to_mask(&logits, (1.0, 1.0)).unwrap();
        assert_eq!(m.labels(), &[1, 0]);
        assert!(m.max_label() < 3);
    }
}
