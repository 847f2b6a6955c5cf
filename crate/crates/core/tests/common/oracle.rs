//! Independent reference computations, written directly from the layer
//! formulas without touching the crate's module table.
#![allow(dead_code)]

/// Conv2d (no bias) plus BatchNorm scale and shift.
pub fn conv(c1: u64, c2: u64, k: u64) -> u64 {
    c1 * c2 * k * k + 2 * c2
}

/// Two 3x3 convs through a half-width hidden layer.
pub fn bottleneck(c1: u64, c2: u64) -> u64 {
    let h = c2 / 2;
    conv(c1, h, 3) + conv(h, c2, 3)
}

/// Anchor-free head: box branch, class branch and the fixed DFL conv.
pub fn detect(chs: &[u64], nc: u64) -> u64 {
    let reg_max = 16;
    let c2 = (chs[0] / 4).max(16).max(4 * reg_max);
    let c3 = chs[0].max(nc.min(100));
    let mut total = reg_max;
    for &x in chs {
        total += conv(x, c2, 3) + conv(c2, c2, 3) + c2 * 4 * reg_max + 4 * reg_max;
        total += conv(x, c3, 3) + conv(c3, c3, 3) + c3 * nc + nc;
    }
    total
}

/// Per-layer parameters of the three-block YOLOv3 listing (nc 80, unit
/// multiples), expanded by hand.
pub fn yolov3_layers() -> Vec<u64> {
    let rep = |n: u64, c: u64| n * bottleneck(c, c);
    vec![
        conv(3, 32, 3),
        conv(32, 64, 3),
        bottleneck(64, 64),
        conv(64, 128, 3),
        rep(2, 128),
        conv(128, 256, 3),
        rep(8, 256),
        conv(256, 512, 3),
        rep(8, 512),
        conv(512, 1024, 3),
        rep(4, 1024),
        bottleneck(1024, 1024),
        conv(1024, 512, 1),
        conv(512, 1024, 3),
        conv(1024, 512, 1),
        conv(512, 1024, 3),
        conv(512, 256, 1),
        0,
        0,
        bottleneck(256 + 512, 512),
        bottleneck(512, 512),
        conv(512, 256, 1),
        conv(256, 512, 3),
        conv(256, 128, 1),
        0,
        0,
        bottleneck(128 + 256, 256),
        rep(2, 256),
        detect(&[256, 512, 1024], 80),
    ]
}

/// Every point of `pts` that no other point dominates, by direct pairwise
/// comparison.
pub fn brute_front(pts: &[Vec<f64>]) -> Vec<usize> {
    let dom = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y);
    (0..pts.len())
        .filter(|&i| !(0..pts.len()).any(|j| j != i && dom(&pts[j], &pts[i])))
        .collect()
}

/// Area under the monotone precision envelope, enumerating every prefix of
/// the ranked list as a PR point.
pub fn brute_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut pts = vec![(0.0f64, 1.0f64)];
    let mut hits = 0;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        pts.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    let mut area = 0.0;
    for i in 1..pts.len() {
        let dr = pts[i].0 - pts[i - 1].0;
        if dr > 0.0 {
            let best = pts[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            area += dr * best;
        }
    }
    area
}
