//! Pixel scoring and budgeted query selection.
//!
//! The default score is uncertainty (entropy, optionally window-averaged)
//! times regional impurity of the pseudo-label map. Random, entropy-only and
//! margin baselines plug into the same selectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segcore::{LabelMap, ProbMap};

#[derive(Debug, Error, PartialEq)]
pub enum AcqError {
    #[error("patch side must be odd and at least 3, got {0}")]
    PatchSide(usize),
    #[error("budget must lie in (0, 100], got {0}")]
    Budget(f64),
    #[error("budget below one pixel")]
    BelowOnePixel,
    #[error("budget below one patch")]
    BelowOnePatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("query ({x}, {y}) outside a {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
}

/// Row-major per-pixel scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, AcqError> {
        if values.len() != height * width {
            return Err(AcqError::Shape(format!(
                "{} values for {height}x{width}",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    Pixel,
    Patch,
}

/// Pixels or patches chosen for annotation in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct QuerySet {
    pub image_index: usize,
    pub mode: QueryMode,
    pub budget_b: f64,
    /// `[x, y]` pairs.
    pub pixels: Vec<[usize; 2]>,
    /// `[center_x, center_y, side]` triples.
    pub patches: Vec<[usize; 3]>,
    pub pixels_covered: usize,
}

impl QuerySet {
    pub fn empty(image_index: usize, mode: QueryMode, budget_b: f64) -> Self {
        Self {
            image_index,
            mode,
            budget_b,
            pixels: Vec::new(),
            patches: Vec::new(),
            pixels_covered: 0,
        }
    }

    /// Every covered pixel: the queried pixels, or every pixel of every
    /// patch (patch by patch, row-major inside each).
    pub fn coverage(&self) -> Vec<[usize; 2]> {
        let mut out = self.pixels.clone();
        for &[cx, cy, side] in &self.patches {
            let half = side / 2;
            for y in cy - half..=cy + half {
                for x in cx - half..=cx + half {
                    out.push([x, y]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    #[default]
    Oracle,
    Human,
}

/// Class labels for queried locations of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct AnnotationRecord {
    pub image_index: usize,
    /// `[x, y, class]` triples.
    pub entries: Vec<[usize; 3]>,
    pub source: AnnotationSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uncertainty times regional impurity.
    #[default]
    Ripu,
    Ent,
    /// Margin: `1 − (p_top1 − p_top2)`.
    Sconf,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = AcqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ripu" => Ok(Self::Ripu),
            "ent" => Ok(Self::Ent),
            "sconf" => Ok(Self::Sconf),
            "random" => Ok(Self::Random),
            other => Err(AcqError::UnknownStrategy(other.to_string())),
        }
    }
}

fn check_side(side: usize) -> Result<(), AcqError> {
    if side < 3 || side % 2 == 0 {
        return Err(AcqError::PatchSide(side));
    }
    Ok(())
}

/// Clipped window bounds `[lo, hi)` around `c` on an axis of length `n`.
fn window(c: usize, half: usize, n: usize) -> (usize, usize) {
    (c.saturating_sub(half), (c + half + 1).min(n))
}

/// Per-pixel Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy_map(probs: &ProbMap) -> ScoreMap {
    let (h, w) = (probs.height(), probs.width());
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut e = 0.0;
            for c in 0..probs.classes() {
                let p = probs.get(x, y, c) as f64;
                if p > 0.0 {
                    e -= p * p.ln();
                }
            }
            values[y * w + x] = e.max(0.0);
        }
    }
    ScoreMap { height: h, width: w, values }
}

/// Pixel mode returns the entropy unchanged; patch mode averages it over the
/// clipped `side × side` window around each pixel.
pub fn uncertainty_map(entropy: &ScoreMap, mode: QueryMode, side: usize) -> Result<ScoreMap, AcqError> {
    match mode {
        QueryMode::Pixel => Ok(entropy.clone()),
        QueryMode::Patch => window_mean(entropy, side),
    }
}

/// Mean of `map` over the clipped window around each pixel.
pub fn window_mean(map: &ScoreMap, side: usize) -> Result<ScoreMap, AcqError> {
    check_side(side)?;
    let (h, w) = (map.height, map.width);
    let half = side / 2;
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = window(y, half, h);
        for x in 0..w {
            let (x0, x1) = window(x, half, w);
            let mut s = 0.0;
            for yy in y0..y1 {
                s += map.values[yy * w + x0..yy * w + x1].iter().sum::<f64>();
            }
            values[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    Ok(ScoreMap { height: h, width: w, values })
}

/// Entropy of the class histogram of `pseudo` inside the clipped window
/// around each pixel.
pub fn impurity_map(pseudo: &LabelMap, side: usize) -> Result<ScoreMap, AcqError> {
    check_side(side)?;
    let (h, w) = (pseudo.height, pseudo.width);
    let half = side / 2;
    let mut counts = [0u32; 256];
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = window(y, half, h);
        for x in 0..w {
            let (x0, x1) = window(x, half, w);
            counts.fill(0);
            for yy in y0..y1 {
                for xx in x0..x1 {
                    counts[pseudo.at(xx, yy) as usize] += 1;
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let mut e = 0.0;
            for &k in counts.iter().filter(|&&k| k > 0) {
                let q = k as f64 / n;
                e -= q * q.ln();
            }
            values[y * w + x] = e.max(0.0);
        }
    }
    Ok(ScoreMap { height: h, width: w, values })
}

/// Elementwise product.
pub fn acquisition_score(uncertainty: &ScoreMap, impurity: &ScoreMap) -> Result<ScoreMap, AcqError> {
    if (uncertainty.height, uncertainty.width) != (impurity.height, impurity.width) {
        return Err(AcqError::Shape(format!(
            "{}x{} vs {}x{}",
            uncertainty.height, uncertainty.width, impurity.height, impurity.width
        )));
    }
    Ok(ScoreMap {
        height: uncertainty.height,
        width: uncertainty.width,
        values: uncertainty
            .values
            .iter()
            .zip(&impurity.values)
            .map(|(u, p)| u * p)
            .collect(),
    })
}

/// `floor(b·H·W/100)`.
pub fn pixel_budget(b: f64, height: usize, width: usize) -> Result<usize, AcqError> {
    if !(b > 0.0 && b <= 100.0) {
        return Err(AcqError::Budget(b));
    }
    // The epsilon absorbs representation error, e.g. b = 0.29 on a 100x100
    // image must give 29 pixels.
    Ok((b * (height * width) as f64 / 100.0 + 1e-9).floor() as usize)
}

/// Pixel indices sorted by descending score, ties row-major.
fn ranked(score: &ScoreMap) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..score.values.len()).collect();
    idx.sort_by(|&a, &b| score.values[b].total_cmp(&score.values[a]).then(a.cmp(&b)));
    idx
}

/// The `floor(b·H·W/100)` highest-scoring pixels.
pub fn select_pixels(score: &ScoreMap, b: f64) -> Result<QuerySet, AcqError> {
    let n = pixel_budget(b, score.height, score.width)?;
    if n == 0 {
        return Err(AcqError::BelowOnePixel);
    }
    let w = score.width;
    let pixels: Vec<[usize; 2]> = ranked(score)
        .into_iter()
        .take(n)
        .map(|i| [i % w, i / w])
        .collect();
    Ok(QuerySet {
        image_index: 0,
        mode: QueryMode::Pixel,
        budget_b: b,
        pixels_covered: pixels.len(),
        pixels,
        patches: Vec::new(),
    })
}

/// Greedy non-overlapping patches: walk pixels by descending score and keep
/// each one whose centered patch fits inside the image and touches no
/// earlier patch, until the budget is spent.
pub fn select_patches(score: &ScoreMap, b: f64, side: usize) -> Result<QuerySet, AcqError> {
    check_side(side)?;
    let (h, w) = (score.height, score.width);
    let target = pixel_budget(b, h, w)? / (side * side);
    if target == 0 {
        return Err(AcqError::BelowOnePatch);
    }
    let half = side / 2;
    let mut taken = vec![false; h * w];
    let mut patches = Vec::with_capacity(target);
    for i in ranked(score) {
        if patches.len() == target {
            break;
        }
        let (cx, cy) = (i % w, i / w);
        if cx < half || cy < half || cx + half >= w || cy + half >= h {
            continue;
        }
        let rows = cy - half..=cy + half;
        let cols = cx - half..=cx + half;
        if rows
            .clone()
            .any(|y| cols.clone().any(|x| taken[y * w + x]))
        {
            continue;
        }
        for y in rows {
            for x in cols.clone() {
                taken[y * w + x] = true;
            }
        }
        patches.push([cx, cy, side]);
    }
    Ok(QuerySet {
        image_index: 0,
        mode: QueryMode::Patch,
        budget_b: b,
        pixels: Vec::new(),
        pixels_covered: patches.len() * side * side,
        patches,
    })
}

/// Seed for the random baseline of one image.
pub fn image_seed(session_seed: u64, batch_id: u64, image_index: usize) -> u64 {
    let mut z = session_seed
        ^ batch_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (image_index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Baseline scores. `Ripu` needs a window and is computed by
/// [`ripu_score`] instead.
pub fn baseline_score(probs: &ProbMap, strategy: Strategy, seed: u64) -> Result<ScoreMap, AcqError> {
    let (h, w) = (probs.height(), probs.width());
    Ok(match strategy {
        Strategy::Ent => entropy_map(probs),
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ScoreMap {
                height: h,
                width: w,
                values: (0..h * w).map(|_| rng.random::<f64>()).collect(),
            }
        }
        Strategy::Sconf => {
            let mut values = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let (mut p1, mut p2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                    for c in 0..probs.classes() {
                        let p = probs.get(x, y, c) as f64;
                        if p > p1 {
                            p2 = p1;
                            p1 = p;
                        } else if p > p2 {
                            p2 = p;
                        }
                    }
                    values.push((1.0 - (p1 - p2)).clamp(0.0, 1.0));
                }
            }
            ScoreMap { height: h, width: w, values }
        }
        Strategy::Ripu => return Err(AcqError::UnknownStrategy("ripu is not a baseline".into())),
    })
}

/// Score map for `strategy` in `mode`. Entropy and margin are
/// window-averaged in patch mode like the default score; random is not.
pub fn score_image(
    probs: &ProbMap,
    strategy: Strategy,
    mode: QueryMode,
    side: usize,
    seed: u64,
) -> Result<ScoreMap, AcqError> {
    match strategy {
        Strategy::Ripu => ripu_score(probs, mode, side),
        Strategy::Random => baseline_score(probs, strategy, seed),
        Strategy::Ent | Strategy::Sconf => {
            uncertainty_map(&baseline_score(probs, strategy, seed)?, mode, side)
        }
    }
}

/// Runs the selector for `mode`, tagging the result with `image_index`.
pub fn select(score: &ScoreMap, mode: QueryMode, b: f64, side: usize, image_index: usize) -> Result<QuerySet, AcqError> {
    let mut q = match mode {
        QueryMode::Pixel => select_pixels(score, b)?,
        QueryMode::Patch => select_patches(score, b, side)?,
    };
    q.image_index = image_index;
    Ok(q)
}

/// Uncertainty times impurity for one probability map.
pub fn ripu_score(probs: &ProbMap, mode: QueryMode, side: usize) -> Result<ScoreMap, AcqError> {
    let u = uncertainty_map(&entropy_map(probs), mode, side)?;
    let p = impurity_map(&probs.argmax(), side)?;
    acquisition_score(&u, &p)
}

/// Looks up ground truth at every covered location.
pub fn oracle_annotate(queries: &QuerySet, truth: &LabelMap) -> Result<AnnotationRecord, AcqError> {
    let mut entries = Vec::with_capacity(queries.pixels_covered);
    for [x, y] in queries.coverage() {
        if x >= truth.width || y >= truth.height {
            return Err(AcqError::OutOfBounds {
                x,
                y,
                width: truth.width,
                height: truth.height,
            });
        }
        entries.push([x, y, truth.at(x, y) as usize]);
    }
    Ok(AnnotationRecord {
        image_index: queries.image_index,
        entries,
        source: AnnotationSource::Oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs2(h: usize, w: usize, p0: &[f32]) -> ProbMap {
        let mut raw = p0.to_vec();
        raw.extend(p0.iter().map(|p| 1.0 - p));
        ProbMap::from_raw(2, h, w, raw).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let pm = probs2(1, 3, &[1.0, 0.5, 0.0]);
        let e = entropy_map(&pm);
        assert_eq!(e.values[0], 0.0);
        assert!((e.values[1] - 2f64.ln()).abs() < 1e-9);
        assert_eq!(e.values[2], 0.0);
        let u = ProbMap::constant(2, 2, &[0.25; 4]).unwrap();
        assert!(entropy_map(&u).values.iter().all(|v| (v - 4f64.ln()).abs() < 1e-6));
    }

    #[test]
    fn impurity_examples() {
        let mut l = LabelMap::filled(3, 3, 0);
        assert!(impurity_map(&l, 3).unwrap().values.iter().all(|&v| v == 0.0));
        l.set(2, 2, 1);
        let v = impurity_map(&l, 3).unwrap().at(1, 1);
        let expect = -(8.0 / 9.0 * (8.0f64 / 9.0).ln() + 1.0 / 9.0 * (1.0f64 / 9.0).ln());
        assert!((v - expect).abs() < 1e-12);
        assert!((expect - 0.3488).abs() < 1e-4);
        assert_eq!(impurity_map(&l, 4), Err(AcqError::PatchSide(4)));
    }

    #[test]
    fn uncertainty_modes() {
        let e = ScoreMap::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(uncertainty_map(&e, QueryMode::Pixel, 2).unwrap(), e);
        let m = uncertainty_map(&e, QueryMode::Patch, 3).unwrap();
        assert_eq!(m.at(1, 1), 5.0);
        assert_eq!(m.at(0, 0), (1.0 + 2.0 + 4.0 + 5.0) / 4.0);
        assert!(uncertainty_map(&e, QueryMode::Patch, 2).is_err());
    }

    #[test]
    fn pixel_selection() {
        let mut s = ScoreMap::filled(4, 4, 0.0);
        s.values[5] = 2.0;
        s.values[14] = 3.0;
        let q = select_pixels(&s, 12.5).unwrap();
        assert_eq!(q.pixels, vec![[2, 3], [1, 1]]);
        let flat = ScoreMap::filled(4, 4, 1.0);
        assert_eq!(select_pixels(&flat, 18.75).unwrap().pixels, vec![[0, 0], [1, 0], [2, 0]]);
        assert_eq!(select_pixels(&flat, 100.0).unwrap().pixels_covered, 16);
        assert_eq!(select_pixels(&flat, 1.0), Err(AcqError::BelowOnePixel));
    }

    #[test]
    fn patch_selection() {
        let s = ScoreMap::filled(256, 256, 0.0);
        let q = select_patches(&s, 1.0, 5).unwrap();
        assert_eq!(q.patches.len(), 26);
        assert_eq!(q.pixels_covered, 650);
        let mut s = ScoreMap::filled(16, 16, 0.0);
        s.values[8 * 16 + 8] = 5.0;
        s.values[8 * 16 + 10] = 4.0;
        s.values[2 * 16 + 13] = 3.0;
        let q = select_patches(&s, 20.0, 5).unwrap();
        assert_eq!(q.patches[0], [8, 8, 5]);
        assert_eq!(q.patches[1], [13, 2, 5]);
        assert!(matches!(select_patches(&s, 1.0, 5), Err(AcqError::BelowOnePatch)));
    }

    #[test]
    fn baselines() {
        let one_hot = probs2(2, 4, &[1.0; 8]);
        let ent = baseline_score(&one_hot, Strategy::Ent, 0).unwrap();
        assert!(ent.values.iter().all(|&v| v == 0.0));
        let conf = ProbMap::from_raw(3, 1, 1, vec![0.5, 0.5, 0.0]).unwrap();
        assert_eq!(baseline_score(&conf, Strategy::Sconf, 0).unwrap().values, vec![1.0]);
        let r1 = baseline_score(&one_hot, Strategy::Random, 4).unwrap();
        assert_eq!(r1, baseline_score(&one_hot, Strategy::Random, 4).unwrap());
        assert_ne!(r1, baseline_score(&one_hot, Strategy::Random, 5).unwrap());
        assert!(baseline_score(&one_hot, Strategy::Ripu, 0).is_err());
        assert!("bald".parse::<Strategy>().is_err());
    }

    #[test]
    fn oracle() {
        let mut truth = LabelMap::filled(8, 8, 1);
        truth.set(3, 4, 2);
        let mut q = QuerySet::empty(2, QueryMode::Pixel, 1.0);
        assert!(oracle_annotate(&q, &truth).unwrap().entries.is_empty());
        q.pixels = vec![[3, 4]];
        let r = oracle_annotate(&q, &truth).unwrap();
        assert_eq!((r.image_index, r.entries.clone()), (2, vec![[3, 4, 2]]));
        let patch = QuerySet {
            patches: vec![[4, 4, 5]],
            pixels: vec![],
            mode: QueryMode::Patch,
            pixels_covered: 25,
            ..q.clone()
        };
        assert_eq!(oracle_annotate(&patch, &truth).unwrap().entries.len(), 25);
        q.pixels = vec![[8, 0]];
        assert!(matches!(oracle_annotate(&q, &truth), Err(AcqError::OutOfBounds { .. })));
    }

    #[test]
    fn wire_format() {
        let q = QuerySet {
            image_index: 1,
            mode: QueryMode::Patch,
            budget_b: 1.0,
            pixels: vec![],
            patches: vec![[2, 3, 5]],
            pixels_covered: 25,
        };
        let v: serde_json::Value = serde_json::to_value(&q).unwrap();
        assert_eq!(v["mode"], "patch");
        assert_eq!(v["patches"][0], serde_json::json!([2, 3, 5]));
        let r = AnnotationRecord {
            image_index: 0,
            entries: vec![[1, 2, 3]],
            source: AnnotationSource::Human,
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["entries"], serde_json::json!([[1, 2, 3]]));
        assert_eq!(v["source"], "human");
    }
}
