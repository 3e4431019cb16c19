//! A1: the scoring and loss functions against brute-force oracles written
//! independently of the library code.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use odes_core::acquisition::{
    acquisition_score, entropy_map, impurity_map, uncertainty_map, AnnotationRecord, AnnotationSource, QueryMode,
    ScoreMap,
};
use odes_core::adaptation::{adjacent_pairs, continuity_loss, supervised_loss, ContinuityTarget};
use odes_core::metrics::dsc;
use odes_core::pruning::gaussian_kl;
use odes_core::segcore::{LabelMap, ProbMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const TOL: f64 = 1e-6;
const FLOOR: f64 = 1e-12;

/// Random distributions with some exact zeros and one-hot pixels.
fn random_probs(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> ProbMap {
    let mut probs = vec![0f32; classes * h * w];
    for p in 0..h * w {
        let mut weights: Vec<f64> = (0..classes)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        if rng.random_bool(0.05) {
            weights.fill(0.0);
        }
        if weights.iter().all(|&v| v == 0.0) {
            weights[rng.random_range(0..classes)] = 1.0;
        }
        let s: f64 = weights.iter().sum();
        for (c, v) in weights.iter().enumerate() {
            probs[c * h * w + p] = (v / s) as f32;
        }
    }
    ProbMap::from_raw(classes, h, w, probs).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, classes: u8, h: usize, w: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

fn p(map: &ProbMap, x: usize, y: usize, c: usize) -> f64 {
    map.get(x, y, c) as f64
}

fn oracle_entropy(map: &ProbMap, x: usize, y: usize) -> f64 {
    (0..map.classes())
        .map(|c| p(map, x, y, c))
        .filter(|&q| q > 0.0)
        .map(|q| -q * q.ln())
        .sum()
}

/// Entries of `(x, y)`'s clipped window, found by scanning the whole image.
fn neighbours(h: usize, w: usize, x: usize, y: usize, side: usize) -> Vec<(usize, usize)> {
    let half = (side / 2) as i64;
    let mut out = Vec::new();
    for yy in 0..h {
        for xx in 0..w {
            if (xx as i64 - x as i64).abs() <= half && (yy as i64 - y as i64).abs() <= half {
                out.push((xx, yy));
            }
        }
    }
    out
}

fn oracle_impurity(labels: &LabelMap, x: usize, y: usize, side: usize) -> f64 {
    let window = neighbours(labels.height, labels.width, x, y, side);
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &(xx, yy) in &window {
        *counts.entry(labels.labels[yy * labels.width + xx]).or_default() += 1;
    }
    let n = window.len() as f64;
    counts.values().map(|&k| k as f64 / n).map(|q| -q * q.ln()).sum()
}

fn oracle_argmax(map: &ProbMap, x: usize, y: usize) -> usize {
    let mut best = 0;
    for c in 1..map.classes() {
        if map.get(x, y, c) > map.get(x, y, best) {
            best = c;
        }
    }
    best
}

/// Simpson's rule on `∫ p ln(p/q)` over `mu1 ± 14 sd1`.
fn oracle_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    let log_pdf = |x: f64, mu: f64, var: f64| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mu).powi(2) / (2.0 * var);
    let sd = var1.sqrt();
    let (a, b) = (mu1 - 14.0 * sd, mu1 + 14.0 * sd);
    let n = 40_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lp = log_pdf(x, mu1, var1);
        lp.exp() * (lp - log_pdf(x, mu2, var2))
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn a1_math_oracles() {
    let start = Instant::now();
    let mut v = Verdict::new("A1", "math oracles within 1e-6 on instances up to 16x16");
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);

    let mut worst = 0f64;
    for _ in 0..300 {
        let (mu1, mu2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (v1, v2) = (rng.random_range(0.05..4.0), rng.random_range(0.05..4.0));
        let got = gaussian_kl(mu1, v1, mu2, v2).unwrap();
        let want = oracle_kl(mu1, v1, mu2, v2);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    v.check(worst <= TOL, format!("gaussian_kl vs numerical integration, 300 cases, max err {worst:.2e}"));

    let (mut e_ent, mut e_imp, mut e_acq) = (0f64, 0f64, 0f64);
    for case in 0..60 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let classes = rng.random_range(2..=6);
        let probs = random_probs(&mut rng, classes, h, w);
        let side = [3, 5, 7][case % 3];

        let ent = entropy_map(&probs);
        let want_ent: Vec<f64> = (0..h * w).map(|i| oracle_entropy(&probs, i % w, i / w)).collect();
        e_ent = e_ent.max(max_err(&ent.values, &want_ent));

        let pseudo = probs.argmax();
        let oracle_pseudo: Vec<u8> = (0..h * w).map(|i| oracle_argmax(&probs, i % w, i / w) as u8).collect();
        assert_eq!(pseudo.labels, oracle_pseudo);
        let imp = impurity_map(&pseudo, side).unwrap();
        let want_imp: Vec<f64> = (0..h * w).map(|i| oracle_impurity(&pseudo, i % w, i / w, side)).collect();
        e_imp = e_imp.max(max_err(&imp.values, &want_imp));

        for mode in [QueryMode::Pixel, QueryMode::Patch] {
            let u = uncertainty_map(&ent, mode, side).unwrap();
            let score: ScoreMap = acquisition_score(&u, &imp).unwrap();
            let want: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (x, y) = (i % w, i / w);
                    let unc = match mode {
                        QueryMode::Pixel => want_ent[i],
                        QueryMode::Patch => {
                            let win = neighbours(h, w, x, y, side);
                            win.iter().map(|&(xx, yy)| want_ent[yy * w + xx]).sum::<f64>() / win.len() as f64
                        }
                    };
                    unc * want_imp[i]
                })
                .collect();
            e_acq = e_acq.max(max_err(&score.values, &want));
        }
    }
    v.check(e_ent <= TOL, format!("entropy_map, 60 maps, max err {e_ent:.2e}"));
    v.check(e_imp <= TOL, format!("impurity_map, 60 maps, max err {e_imp:.2e}"));
    v.check(e_acq <= TOL, format!("acquisition_score, pixel and patch, max err {e_acq:.2e}"));

    let mut e_sup = 0f64;
    for _ in 0..60 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let classes = rng.random_range(2..=6);
        let n = rng.random_range(1..=4);
        let probs: Vec<ProbMap> = (0..n).map(|_| random_probs(&mut rng, classes, h, w)).collect();
        let mut records = Vec::new();
        for _ in 0..rng.random_range(1..=5) {
            let entries = (0..rng.random_range(1..=12))
                .map(|_| [rng.random_range(0..w), rng.random_range(0..h), rng.random_range(0..classes)])
                .collect();
            records.push(AnnotationRecord {
                image_index: rng.random_range(0..n),
                entries,
                source: AnnotationSource::Oracle,
            });
        }
        // Dense masks, later entries overwriting earlier ones.
        let mut label: HashMap<(usize, usize, usize), usize> = HashMap::new();
        for r in &records {
            for &[x, y, c] in &r.entries {
                label.insert((r.image_index, x, y), c);
            }
        }
        let want = label
            .iter()
            .map(|(&(i, x, y), &c)| -p(&probs[i], x, y, c).max(FLOOR).ln())
            .sum::<f64>()
            / label.len() as f64;
        let got = supervised_loss(&probs, &records).unwrap();
        e_sup = e_sup.max((got - want).abs());
    }
    v.check(e_sup <= TOL, format!("supervised_loss, 60 batches, max err {e_sup:.2e}"));

    let mut e_cont = 0f64;
    for _ in 0..60 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let classes = rng.random_range(2..=6);
        let n: usize = rng.random_range(1..=5);
        let probs: Vec<ProbMap> = (0..n).map(|_| random_probs(&mut rng, classes, h, w)).collect();
        let ids: Vec<String> = (0..n).map(|_| format!("p{}", rng.random_range(0..2))).collect();
        let pairs: Vec<usize> = (0..n.saturating_sub(1)).filter(|&j| ids[j] == ids[j + 1]).collect();
        assert_eq!(adjacent_pairs(&ids), pairs);
        for target in [ContinuityTarget::Hard, ContinuityTarget::Soft] {
            let mut want = 0.0;
            for &j in &pairs {
                let (a, b) = (&probs[j], &probs[j + 1]);
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s -= match target {
                            ContinuityTarget::Hard => p(a, x, y, oracle_argmax(b, x, y)).max(FLOOR).ln(),
                            ContinuityTarget::Soft => (0..classes)
                                .map(|c| p(b, x, y, c) * p(a, x, y, c).max(FLOOR).ln())
                                .sum::<f64>(),
                        };
                    }
                }
                want += s / (h * w) as f64;
            }
            e_cont = e_cont.max((continuity_loss(&probs, &pairs, target) - want).abs());
        }
    }
    v.check(e_cont <= TOL, format!("continuity_loss, hard and soft targets, max err {e_cont:.2e}"));

    let mut e_dsc = 0f64;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let classes = rng.random_range(2..=6u8);
        let pred = random_labels(&mut rng, classes, h, w);
        let truth = random_labels(&mut rng, classes, h, w);
        for c in 0..=classes {
            let a: HashSet<usize> = (0..h * w).filter(|&i| pred.labels[i] == c).collect();
            let b: HashSet<usize> = (0..h * w).filter(|&i| truth.labels[i] == c).collect();
            let want = if a.is_empty() && b.is_empty() {
                1.0
            } else {
                2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
            };
            e_dsc = e_dsc.max((dsc(&pred, &truth, c) - want).abs());
        }
    }
    v.check(e_dsc <= TOL, format!("dsc, 200 label pairs, max err {e_dsc:.2e}"));

    let took = start.elapsed();
    v.check(took < Duration::from_secs(60), format!("runtime {took:.1?}"));
    v.finish();
}
