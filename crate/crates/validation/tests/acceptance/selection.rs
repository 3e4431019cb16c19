//! A2: query selection against a sort oracle and a greedy oracle, plus
//! pixel/patch budget parity.

use std::time::{Duration, Instant};

use odes_core::acquisition::{select_patches, select_pixels, AcqError, ScoreMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

/// Budgets given in hundredths of a percent so the oracle can floor in
/// integer arithmetic.
fn budget(b_hundredths: usize, h: usize, w: usize) -> usize {
    b_hundredths * h * w / 10_000
}

/// Scores drawn from a few levels so that ties are common.
fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScoreMap {
    let levels = rng.random_range(2..=12);
    let values = (0..h * w)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
        .collect();
    ScoreMap::new(h, w, values).unwrap()
}

/// Row-major positions ordered by descending score, ties row-major.
fn sort_oracle(map: &ScoreMap) -> Vec<(usize, usize)> {
    let mut cells: Vec<(f64, usize, usize)> = (0..map.height)
        .flat_map(|y| (0..map.width).map(move |x| (y, x)))
        .map(|(y, x)| (map.values[y * map.width + x], y, x))
        .collect();
    cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    cells.into_iter().map(|(_, y, x)| (x, y)).collect()
}

/// Visits centers in score order, keeping those whose patch lies inside the
/// image and is at Chebyshev distance ≥ side from every kept center.
fn greedy_oracle(map: &ScoreMap, n: usize, side: usize) -> Vec<(usize, usize)> {
    let half = side / 2;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (x, y) in sort_oracle(map) {
        if kept.len() == n {
            break;
        }
        let inside = x >= half && y >= half && x + half < map.width && y + half < map.height;
        let clear = kept.iter().all(|&(kx, ky)| kx.abs_diff(x) >= side || ky.abs_diff(y) >= side);
        if inside && clear {
            kept.push((x, y));
        }
    }
    kept
}

#[test]
fn a2_selection_oracles() {
    let start = Instant::now();
    let mut v = Verdict::new("A2", "selection oracles and budget parity");
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2);

    // 6x6 maps hold 36 pixels, so budgets below ~2.8% select nothing.
    let pixel_budgets = [300, 500, 1000, 2000, 2500, 3333, 5000, 7500, 10_000];
    let mut mismatches = 0;
    for _ in 0..200 {
        let map = random_map(&mut rng, 6, 6);
        let bh = pixel_budgets[rng.random_range(0..pixel_budgets.len())];
        let q = select_pixels(&map, bh as f64 / 100.0).unwrap();
        let want: Vec<[usize; 2]> = sort_oracle(&map)
            .into_iter()
            .take(budget(bh, 6, 6))
            .map(|(x, y)| [x, y])
            .collect();
        if q.pixels != want || q.pixels_covered != want.len() {
            mismatches += 1;
        }
    }
    v.check(mismatches == 0, format!("select_pixels equals the sort oracle on 200 6x6 maps ({mismatches} mismatches)"));

    let mut mismatches = 0;
    let mut compared = 0;
    while compared < 100 {
        let (h, w) = (rng.random_range(3..=16), rng.random_range(3..=16));
        let map = random_map(&mut rng, h, w);
        let side = [3, 5, 7][rng.random_range(0..3)];
        let bh = rng.random_range(500..=10_000);
        let n = budget(bh, h, w) / (side * side);
        match select_patches(&map, bh as f64 / 100.0, side) {
            Err(AcqError::BelowOnePatch) if n == 0 => continue,
            Err(e) => panic!("{h}x{w} side {side} b {bh}: {e}"),
            Ok(q) => {
                compared += 1;
                let want: Vec<[usize; 3]> = greedy_oracle(&map, n, side)
                    .into_iter()
                    .map(|(x, y)| [x, y, side])
                    .collect();
                if q.patches != want || q.pixels_covered != want.len() * side * side {
                    mismatches += 1;
                }
            }
        }
    }
    v.check(
        mismatches == 0,
        format!("select_patches equals the greedy oracle on 100 maps up to 16x16 ({mismatches} mismatches)"),
    );

    // A budget too small for one patch covers nothing in patch mode.
    let mut worst = 0usize;
    let mut ok = true;
    for (h, w) in [(48, 48), (64, 64), (96, 80)] {
        for b in [0.5, 1.0, 2.0] {
            for side in [3, 5, 7] {
                for _ in 0..5 {
                    let map = random_map(&mut rng, h, w);
                    let pixel = select_pixels(&map, b).unwrap().pixels_covered;
                    let patch = match select_patches(&map, b, side) {
                        Ok(q) => q.pixels_covered,
                        Err(AcqError::BelowOnePatch) => 0,
                        Err(e) => panic!("{e}"),
                    };
                    let gap = pixel.abs_diff(patch);
                    worst = worst.max(gap);
                    ok &= gap < side * side;
                }
            }
        }
    }
    v.check(ok, format!("|pixel - patch| coverage < side^2 for b in {{0.5,1,2}}, sides {{3,5,7}} (largest gap {worst})"));

    let took = start.elapsed();
    v.check(took < Duration::from_secs(120), format!("runtime {took:.1?}"));
    v.finish();
}
