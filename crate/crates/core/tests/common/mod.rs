//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use pucare::preprocess::{Image, Mask};

/// Triangle kernel of half-width `support`.
fn tri(t: f64, support: f64) -> f64 {
    (1.0 - t.abs() / support).max(0.0)
}

/// Direct 2-D evaluation of the resize definition: every output pixel is a
/// normalized weighted sum over the whole input, weights from the half-pixel
/// source coordinate `(d + 0.5)·scale − 0.5`.
pub fn naive_resize(img: &Image, out_h: usize, out_w: usize, antialias: bool) -> Image {
    let (h, w) = (img.height(), img.width());
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let ky = if antialias && sy > 1.0 { sy } else { 1.0 };
    let kx = if antialias && sx > 1.0 { sx } else { 1.0 };
    Image::from_fn(out_h, out_w, |oy, ox| {
        let cy = (oy as f64 + 0.5) * sy - 0.5;
        let cx = (ox as f64 + 0.5) * sx - 0.5;
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let wt = tri(y as f64 - cy, ky) * tri(x as f64 - cx, kx);
                if wt > 0.0 {
                    let p = img.pixel(y, x);
                    for c in 0..3 {
                        acc[c] += wt * p[c];
                    }
                    total += wt;
                }
            }
        }
        acc.map(|v| v / total)
    })
}

/// Priority flood with a linear scan for the minimum key; no heap.
pub fn flood_oracle(gray: &[f64], markers: &[u32], h: usize, w: usize, threshold: f64) -> (Vec<u32>, Vec<bool>) {
    let n = h * w;
    let at = |y: isize, x: isize| gray[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut grad = vec![0.0; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = if w > 1 {
                let (a, b) = ((x - 1).max(0), (x + 1).min(w as isize - 1));
                (at(y, b) - at(y, a)) / (b - a) as f64
            } else {
                0.0
            };
            let dy = if h > 1 {
                let (a, b) = ((y - 1).max(0), (y + 1).min(h as isize - 1));
                (at(b, x) - at(a, x)) / (b - a) as f64
            } else {
                0.0
            };
            grad[y as usize * w + x as usize] = (dx * dx + dy * dy).sqrt();
        }
    }
    let max = grad.iter().cloned().fold(0.0, f64::max);
    let neighbors = |i: usize| {
        let (y, x) = (i / w, i % w);
        let mut v = Vec::new();
        if y > 0 {
            v.push(i - w);
        }
        if x > 0 {
            v.push(i - 1);
        }
        if x + 1 < w {
            v.push(i + 1);
        }
        if y + 1 < h {
            v.push(i + w);
        }
        v
    };
    let mut labels = markers.to_vec();
    let mut boundary = vec![false; n];
    let mut queued: Vec<bool> = markers.iter().map(|&m| m != 0).collect();
    // (ridge, level, hops, index), compared lexicographically.
    let mut queue: Vec<(bool, f64, u32, usize)> = Vec::new();
    let key = |i: usize, hops: u32| (grad[i] > threshold * max, grad[i], hops, i);
    for i in (0..n).filter(|&i| markers[i] != 0) {
        for j in neighbors(i) {
            if !queued[j] {
                queued[j] = true;
                queue.push(key(j, 1));
            }
        }
    }
    while !queue.is_empty() {
        let mut best = 0;
        for k in 1..queue.len() {
            if queue[k].partial_cmp(&queue[best]) == Some(std::cmp::Ordering::Less) {
                best = k;
            }
        }
        let cur = queue.swap_remove(best);
        let mut seen: Vec<u32> = neighbors(cur.3).into_iter().map(|j| labels[j]).filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != 1 {
            boundary[cur.3] = true;
            continue;
        }
        labels[cur.3] = seen[0];
        for j in neighbors(cur.3) {
            if !queued[j] {
                queued[j] = true;
                queue.push(key(j, cur.2 + 1));
            }
        }
    }
    for i in 0..n {
        if labels[i] == 0 {
            boundary[i] = true;
        }
    }
    (labels, boundary)
}

/// Pixel-by-pixel confusion counts `(tp, tn, fp, fn)`.
pub fn count_pixels(pred: &Mask, truth: &Mask) -> (u64, u64, u64, u64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            match (pred.get(y, x), truth.get(y, x)) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    (tp, tn, fp, fn_)
}

pub fn random_image(rng: &mut impl rand::Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

pub fn random_mask(rng: &mut impl rand::Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::from_fn(h, w, |_, _| rng.gen_bool(p))
}
