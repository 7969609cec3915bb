//! User clicks, their disk encoding, and the simulated annotator.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

/// Disk radius used to encode clicks.
pub const DISK_RADIUS: usize = 5;

/// Upper bound on clicks sampled for one training example.
pub const MAX_TRAINING_CLICKS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
    /// 1-based position within a session.
    pub ordinal: u32,
}

impl Click {
    pub fn positive(row: usize, col: usize, ordinal: u32) -> Self {
        Self {
            row,
            col,
            polarity: Polarity::Positive,
            ordinal,
        }
    }

    pub fn negative(row: usize, col: usize, ordinal: u32) -> Self {
        Self {
            row,
            col,
            polarity: Polarity::Negative,
            ordinal,
        }
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::ClickOutOfBounds {
                row: self.row,
                col: self.col,
                height,
                width,
            });
        }
        Ok(())
    }
}

/// Positive (`c_f`) and negative (`c_b`) disk maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidanceMaps {
    pub positive: Mask,
    pub negative: Mask,
}

impl GuidanceMaps {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            positive: Mask::zeros(height, width),
            negative: Mask::zeros(height, width),
        }
    }

    pub fn height(&self) -> usize {
        self.positive.height()
    }

    pub fn width(&self) -> usize {
        self.positive.width()
    }
}

pub fn render_disks(
    clicks: &[Click],
    height: usize,
    width: usize,
    radius: usize,
) -> Result<GuidanceMaps> {
    if radius == 0 {
        return Err(Error::InvalidArgument("disk radius must be >= 1".into()));
    }
    let mut maps = GuidanceMaps::empty(height, width);
    let r2 = (radius * radius) as i64;
    for click in clicks {
        click.check_bounds(height, width)?;
        let target = match click.polarity {
            Polarity::Positive => &mut maps.positive,
            Polarity::Negative => &mut maps.negative,
        };
        let r0 = click.row.saturating_sub(radius);
        let r1 = (click.row + radius).min(height - 1);
        let c0 = click.col.saturating_sub(radius);
        let c1 = (click.col + radius).min(width - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dr = r as i64 - click.row as i64;
                let dc = c as i64 - click.col as i64;
                if dr * dr + dc * dc <= r2 {
                    target.set(r, c, true);
                }
            }
        }
    }
    Ok(maps)
}

/// 4-connected components of the set pixels, labelled in row-major order of
/// their first pixel. Returns per-pixel labels (0 = background) and areas
/// indexed by `label - 1`.
pub fn connected_components(mask: &Mask) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.as_slice()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut area = 0;
        while let Some(idx) = queue.pop_front() {
            area += 1;
            let (r, c) = (idx / w, idx % w);
            let mut visit = |n: usize| {
                if mask.as_slice()[n] == 1 && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            };
            if r > 0 {
                visit(idx - w);
            }
            if r + 1 < h {
                visit(idx + w);
            }
            if c > 0 {
                visit(idx - 1);
            }
            if c + 1 < w {
                visit(idx + 1);
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Exact squared Euclidean distance from every set pixel to the nearest pixel
/// outside the set, where everything beyond the image border counts as outside.
/// Unset pixels get 0.
pub fn squared_distance_to_boundary(mask: &Mask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    // vertical pass: distance to the nearest unset pixel in the same column,
    // counting the rows just outside the image as unset
    let mut col_sq = vec![0.0f64; h * w];
    for c in 0..w {
        let mut run = 0usize;
        for r in 0..h {
            run = if mask.get(r, c) { run + 1 } else { 0 };
            col_sq[r * w + c] = run as f64;
        }
        let mut run = 0usize;
        for r in (0..h).rev() {
            run = if mask.get(r, c) { run + 1 } else { 0 };
            let d = col_sq[r * w + c].min(run as f64);
            col_sq[r * w + c] = d * d;
        }
    }
    // horizontal pass over a row padded with one unset pixel on each side
    let mut out = vec![0.0; h * w];
    let mut line = vec![0.0f64; w + 2];
    let mut dist = Vec::new();
    for r in 0..h {
        line[1..=w].copy_from_slice(&col_sq[r * w..(r + 1) * w]);
        edt_1d(&line, &mut dist);
        out[r * w..(r + 1) * w].copy_from_slice(&dist[1..=w]);
    }
    out
}

/// Lower envelope of parabolas (Felzenszwalb and Huttenlocher). All inputs
/// must be finite.
fn edt_1d(f: &[f64], d: &mut Vec<f64>) {
    let n = f.len();
    d.clear();
    d.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Largest component of `region` (ties: earliest first pixel), with its area.
fn largest_component(region: &Mask) -> Option<(Mask, usize)> {
    let (labels, areas) = connected_components(region);
    let mut best: Option<(usize, usize)> = None;
    for (i, &a) in areas.iter().enumerate() {
        if best.is_none_or(|(_, ba)| a > ba) {
            best = Some((i, a));
        }
    }
    best.map(|(i, area)| {
        let label = i as u32 + 1;
        let comp = Mask::from_fn(region.height(), region.width(), |r, c| {
            labels[r * region.width() + c] == label
        });
        (comp, area)
    })
}

/// The simulated annotator: clicks the interior-most pixel of the largest
/// error region. False negatives win ties against false positives.
pub fn next_robot_click(pred: &Mask, gt: &Mask, ordinal: u32) -> Result<Click> {
    if !pred.same_shape(gt) {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (h, w) = (gt.height(), gt.width());
    let fn_region = Mask::from_fn(h, w, |r, c| gt.get(r, c) && !pred.get(r, c));
    let fp_region = Mask::from_fn(h, w, |r, c| !gt.get(r, c) && pred.get(r, c));
    let fn_best = largest_component(&fn_region);
    let fp_best = largest_component(&fp_region);
    let (component, polarity) = match (fn_best, fp_best) {
        (None, None) => return Err(Error::NoErrorRegion),
        (Some((c, _)), None) => (c, Polarity::Positive),
        (None, Some((c, _))) => (c, Polarity::Negative),
        (Some((cf, af)), Some((cb, ab))) => {
            if af >= ab {
                (cf, Polarity::Positive)
            } else {
                (cb, Polarity::Negative)
            }
        }
    };
    let dist = squared_distance_to_boundary(&component);
    let mut best = 0;
    for (i, &d) in dist.iter().enumerate() {
        if d > dist[best] {
            best = i;
        }
    }
    Ok(Click {
        row: best / w,
        col: best % w,
        polarity,
        ordinal,
    })
}

fn erode(mask: &Mask, steps: usize) -> Mask {
    let mut cur = mask.clone();
    let (h, w) = (mask.height(), mask.width());
    for _ in 0..steps {
        let prev = cur.clone();
        cur = Mask::from_fn(h, w, |r, c| {
            prev.get(r, c)
                && r > 0
                && c > 0
                && r + 1 < h
                && c + 1 < w
                && prev.get(r - 1, c)
                && prev.get(r + 1, c)
                && prev.get(r, c - 1)
                && prev.get(r, c + 1)
        });
    }
    cur
}

/// Background pixels within `reach` (Chebyshev) of the foreground.
fn background_band(mask: &Mask, reach: usize) -> Vec<usize> {
    let (h, w) = (mask.height(), mask.width());
    let mut near = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                for rr in r.saturating_sub(reach)..=(r + reach).min(h - 1) {
                    for cc in c.saturating_sub(reach)..=(c + reach).min(w - 1) {
                        near[rr * w + cc] = true;
                    }
                }
            }
        }
    }
    (0..h * w)
        .filter(|&i| near[i] && mask.as_slice()[i] == 0)
        .collect()
}

/// Random clicks for one training example: 1 to 10 clicks, the first always
/// positive. Positives come from the eroded object, negatives from a band
/// around it or from anywhere in the background.
pub fn sample_training_clicks(gt: &Mask, seed: u64) -> Result<Vec<Click>> {
    if gt.is_empty() {
        return Err(Error::EmptyMask("cannot sample clicks on an empty object".into()));
    }
    let w = gt.width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eroded = erode(gt, 2);
    let inner = if eroded.is_empty() { gt } else { &eroded };
    let positives: Vec<usize> = (0..inner.as_slice().len())
        .filter(|&i| inner.as_slice()[i] == 1)
        .collect();
    let background: Vec<usize> = (0..gt.as_slice().len())
        .filter(|&i| gt.as_slice()[i] == 0)
        .collect();
    let band = background_band(gt, 10);

    let count = rng.random_range(1..=MAX_TRAINING_CLICKS);
    let mut clicks = Vec::with_capacity(count);
    for k in 0..count {
        let negative = k > 0 && !background.is_empty() && rng.random_bool(0.5);
        let idx = if negative {
            let pool = if !band.is_empty() && rng.random_bool(0.6) {
                &band
            } else {
                &background
            };
            pool[rng.random_range(0..pool.len())]
        } else {
            positives[rng.random_range(0..positives.len())]
        };
        let polarity = if negative {
            Polarity::Negative
        } else {
            Polarity::Positive
        };
        clicks.push(Click {
            row: idx / w,
            col: idx % w,
            polarity,
            ordinal: k as u32 + 1,
        });
    }
    Ok(clicks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_count_oracle(row: i64, col: i64, h: i64, w: i64, radius: i64) -> usize {
        let mut n = 0;
        for r in 0..h {
            for c in 0..w {
                if (r - row).pow(2) + (c - col).pow(2) <= radius * radius {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn interior_disk_has_81_pixels() {
        assert_eq!(disk_count_oracle(10, 10, 32, 32, 5), 81);
        let maps = render_disks(&[Click::positive(10, 10, 1)], 32, 32, 5).unwrap();
        assert_eq!(maps.positive.count(), 81);
        assert!(maps.negative.is_empty());
    }

    #[test]
    fn corner_disk_is_clipped() {
        let maps = render_disks(&[Click::negative(0, 0, 1)], 32, 32, 5).unwrap();
        assert_eq!(maps.negative.count(), disk_count_oracle(0, 0, 32, 32, 5));
        assert_eq!(maps.negative.count(), 26);
    }

    #[test]
    fn empty_clicks_render_nothing() {
        let maps = render_disks(&[], 16, 16, 5).unwrap();
        assert!(maps.positive.is_empty() && maps.negative.is_empty());
    }

    #[test]
    fn out_of_bounds_click_is_rejected() {
        assert!(matches!(
            render_disks(&[Click::positive(16, 0, 1)], 16, 16, 5),
            Err(Error::ClickOutOfBounds { .. })
        ));
        assert!(render_disks(&[Click::positive(1, 1, 1)], 16, 16, 0).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let mask = Mask::from_fn(20, 23, |r, c| (r * 7 + c * 3) % 11 != 0 && r != 9);
        let fast = squared_distance_to_boundary(&mask);
        for r in 0..20i64 {
            for c in 0..23i64 {
                if !mask.get(r as usize, c as usize) {
                    assert_eq!(fast[(r * 23 + c) as usize], 0.0);
                    continue;
                }
                let mut best = i64::MAX;
                for rr in -1..=20i64 {
                    for cc in -1..=23i64 {
                        let outside = rr < 0
                            || cc < 0
                            || rr >= 20
                            || cc >= 23
                            || !mask.get(rr as usize, cc as usize);
                        if outside {
                            best = best.min((rr - r).pow(2) + (cc - c).pow(2));
                        }
                    }
                }
                assert_eq!(fast[(r * 23 + c) as usize], best as f64, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn robot_clicks_square_center() {
        let gt = Mask::from_fn(32, 32, |r, c| (10..21).contains(&r) && (10..21).contains(&c));
        let click = next_robot_click(&Mask::zeros(32, 32), &gt, 1).unwrap();
        assert_eq!((click.row, click.col, click.polarity), (15, 15, Polarity::Positive));
    }

    #[test]
    fn robot_clicks_full_frame_false_positive() {
        let pred = Mask::from_fn(32, 32, |_, _| true);
        let click = next_robot_click(&pred, &Mask::zeros(32, 32), 1).unwrap();
        // distance to the padded border is min(r+1, 32-r); maximal at 15 and 16,
        // row-major tie-break picks (15, 15)
        assert_eq!((click.row, click.col, click.polarity), (15, 15, Polarity::Negative));
    }

    #[test]
    fn robot_refuses_perfect_prediction() {
        let gt = Mask::from_fn(16, 16, |r, _| r < 4);
        assert!(matches!(
            next_robot_click(&gt, &gt, 1),
            Err(Error::NoErrorRegion)
        ));
    }

    #[test]
    fn equal_area_components_prefer_first_in_row_major() {
        let gt = Mask::from_fn(20, 20, |r, c| {
            ((2..5).contains(&r) && (12..15).contains(&c))
                || ((12..15).contains(&r) && (2..5).contains(&c))
        });
        let click = next_robot_click(&Mask::zeros(20, 20), &gt, 1).unwrap();
        assert_eq!((click.row, click.col), (3, 13));
    }

    #[test]
    fn full_frame_gt_gives_only_positive_clicks() {
        let gt = Mask::from_fn(16, 16, |_, _| true);
        for seed in 0..20 {
            let clicks = sample_training_clicks(&gt, seed).unwrap();
            assert!(clicks.iter().all(|c| c.polarity == Polarity::Positive));
        }
    }

    #[test]
    fn training_clicks_deterministic_and_valid() {
        let gt = Mask::from_fn(40, 40, |r, c| (r as i64 - 20).pow(2) + (c as i64 - 18).pow(2) < 80);
        assert!(sample_training_clicks(&Mask::zeros(8, 8), 0).is_err());
        let mut positives = 0;
        let mut seed = 0;
        while positives < 1000 {
            let clicks = sample_training_clicks(&gt, seed).unwrap();
            assert_eq!(clicks, sample_training_clicks(&gt, seed).unwrap());
            assert!((1..=MAX_TRAINING_CLICKS).contains(&clicks.len()));
            assert_eq!(clicks[0].polarity, Polarity::Positive);
            for (k, c) in clicks.iter().enumerate() {
                assert_eq!(c.ordinal, k as u32 + 1);
                match c.polarity {
                    Polarity::Positive => {
                        assert!(gt.get(c.row, c.col));
                        positives += 1;
                    }
                    Polarity::Negative => assert!(!gt.get(c.row, c.col)),
                }
            }
            seed += 1;
        }
    }
}
