//! Scoring, DET curves and equal error rate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::{FusionModel, LossMaskMode, ModelInput};
use crate::tokenizer::{NO, YES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

impl ScoredExample {
    pub fn new(id: impl Into<String>, label: Label, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::validation("score", format!("{score} is not in [0, 1]")));
        }
        Ok(ScoredExample {
            id: id.into(),
            label,
            score,
        })
    }
}

/// `exp(z_yes) / (exp(z_yes) + exp(z_no))`, computed stably.
pub fn decision_score(z_yes: f64, z_no: f64) -> f64 {
    let d = z_yes - z_no;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// Scores one example in eval mode.
pub fn score(model: &FusionModel, id: &str, label: Label, input: &ModelInput) -> Result<ScoredExample> {
    model.require_complete(input)?;
    let fwd = model.forward_batch::<rand_chacha::ChaCha8Rng>(&[input], LossMaskMode::DecisionOnly, None)?;
    let row = fwd.logits.row(0);
    ScoredExample::new(id, label, decision_score(row[YES as usize], row[NO as usize]))
}

/// Scores many examples, batching the forward passes.
pub fn score_examples(model: &FusionModel, examples: &[Example]) -> Result<Vec<ScoredExample>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let inputs: Vec<&ModelInput> = chunk.iter().map(|e| &e.input).collect();
        for inp in &inputs {
            model.require_complete(inp)?;
        }
        let fwd = model.forward_batch::<rand_chacha::ChaCha8Rng>(&inputs, LossMaskMode::DecisionOnly, None)?;
        for (i, ex) in chunk.iter().enumerate() {
            let row = fwd.logits.row(i);
            out.push(ScoredExample::new(
                ex.id.clone(),
                ex.label,
                decision_score(row[YES as usize], row[NO as usize]),
            )?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    /// Increasing thresholds: a sentinel below every score, each distinct
    /// score, and a sentinel above every score.
    pub points: Vec<DetPoint>,
    pub eer: f64,
    pub eer_threshold: f64,
}

/// Accept rule `score >= threshold`. The EER is where linearly interpolated
/// FAR and FRR cross between adjacent operating points.
pub fn compute_det(scored: &[ScoredExample]) -> Result<DetCurve> {
    let n_pos = scored.iter().filter(|s| s.label.is_directed()).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation(
            "EER needs at least one example of each label".into(),
        ));
    }
    let mut sorted: Vec<(f64, bool)> = scored
        .iter()
        .map(|s| (s.score, s.label.is_directed()))
        .collect();
    if sorted.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite score".into()));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (np, nn) = (n_pos as f64, n_neg as f64);
    let mut points = Vec::with_capacity(sorted.len() + 2);
    let lo = sorted[0].0;
    let hi = sorted[sorted.len() - 1].0;
    points.push(DetPoint {
        threshold: lo - 1.0,
        far: 1.0,
        frr: 0.0,
    });
    // rejected counts below the current threshold
    let mut pos_below = 0usize;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        points.push(DetPoint {
            threshold: t,
            far: (n_neg - neg_below) as f64 / nn,
            frr: pos_below as f64 / np,
        });
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: hi + 1.0,
        far: 0.0,
        frr: 1.0,
    });

    let (eer, eer_threshold) = eer_from_points(&points);
    Ok(DetCurve {
        points,
        eer,
        eer_threshold,
    })
}

fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.far - a.frr;
        let db = b.far - b.frr;
        if da == 0.0 {
            return (a.far, a.threshold);
        }
        if da > 0.0 && db <= 0.0 {
            if db == 0.0 {
                return (b.far, b.threshold);
            }
            let u = da / (da - db);
            let far = a.far + u * (b.far - a.far);
            let frr = a.frr + u * (b.frr - a.frr);
            // FAR and FRR agree up to rounding; report their mean
            let eer = 0.5 * (far + frr);
            return (eer, a.threshold + u * (b.threshold - a.threshold));
        }
    }
    unreachable!("FAR - FRR goes from +1 to -1 across the sentinels")
}

pub fn write_det_csv(curve: &DetCurve, path: &Path) -> Result<()> {
    let mut s = String::from("threshold,far,frr\n");
    for p in &curve.points {
        writeln!(s, "{:.6},{:.6},{:.6}", p.threshold, p.far, p.frr).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_det_csv(path: &Path) -> Result<Vec<DetPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(parse_err(format!("expected 3 columns, got {}", cols.len())));
        }
        let v: Vec<f64> = cols
            .iter()
            .map(|c| c.trim().parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<_>>()?;
        out.push(DetPoint {
            threshold: v[0],
            far: v[1],
            frr: v[2],
        });
    }
    Ok(out)
}

const SVG_SIZE: f64 = 400.0;
const SVG_MARGIN: f64 = 50.0;

/// Maps a rate in `[0, clip]` to plot coordinates.
fn svg_xy(far: f64, frr: f64, clip: f64) -> (f64, f64) {
    let span = SVG_SIZE - 2.0 * SVG_MARGIN;
    (
        SVG_MARGIN + far / clip * span,
        SVG_SIZE - SVG_MARGIN - frr / clip * span,
    )
}

/// FRR against FAR, both axes clipped to `[0, clip]`. Points carry their
/// rate values in `data-far`/`data-frr` attributes; the EER marker has
/// `id="eer"`.
pub fn det_svg(curve: &DetCurve, clip: f64) -> Result<String> {
    if !(clip > 0.0 && clip <= 1.0) {
        return Err(Error::validation("clip", "must be in (0, 1]"));
    }
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}" data-clip="{clip}">"#
    )
    .unwrap();
    let (x0, y0) = svg_xy(0.0, 0.0, clip);
    let (x1, y1) = svg_xy(clip, clip, clip);
    writeln!(
        s,
        r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">FAR (0 to {clip})</text>"#,
        (x0 + x1) / 2.0,
        SVG_SIZE - 15.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {})">FRR (0 to {clip})</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    )
    .unwrap();
    let visible: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.far.min(clip), p.frr.min(clip)))
        .collect();
    let path: Vec<String> = visible
        .iter()
        .map(|&(far, frr)| {
            let (x, y) = svg_xy(far, frr, clip);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
        path.join(" ")
    )
    .unwrap();
    for &(far, frr) in &visible {
        let (x, y) = svg_xy(far, frr, clip);
        writeln!(
            s,
            r#"<circle class="pt" cx="{x:.2}" cy="{y:.2}" r="1.5" data-far="{far}" data-frr="{frr}"/>"#
        )
        .unwrap();
    }
    if curve.eer <= clip {
        let (x, y) = svg_xy(curve.eer, curve.eer, clip);
        writeln!(
            s,
            r#"<circle id="eer" cx="{x:.2}" cy="{y:.2}" r="4" fill="crimson" data-far="{e}" data-frr="{e}"/>"#,
            e = curve.eer
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">EER {:.2}%</text>"#,
            x + 6.0,
            y - 6.0,
            curve.eer * 100.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_det_svg(curve: &DetCurve, path: &Path, clip: f64) -> Result<()> {
    let svg = det_svg(curve, clip)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

pub fn write_scores_csv(scored: &[ScoredExample], path: &Path) -> Result<()> {
    let mut s = String::from("id,label,score\n");
    for e in scored {
        writeln!(s, "{},{},{}", e.id, e.label.as_str(), e.score).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("id,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let mut it = line.rsplitn(3, ',');
        let (Some(score), Some(label), Some(id)) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err("expected id,label,score".into()));
        };
        let label = Label::parse(label.trim())
            .ok_or_else(|| parse_err(format!("unknown label `{label}`")))?;
        let score: f64 = score.trim().parse().map_err(|e| parse_err(format!("{e}")))?;
        out.push(ScoredExample::new(id, label, score).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub modalities: String,
    pub trainable_params: usize,
    pub eer: f64,
    pub eer_threshold: f64,
    pub n_directed: usize,
    pub n_non_directed: usize,
    #[serde(default)]
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scored: Vec<ScoredExample>,
    pub curve: DetCurve,
    pub n_directed: usize,
    pub n_non_directed: usize,
}

pub fn evaluate_scores(scored: Vec<ScoredExample>) -> Result<Evaluation> {
    let curve = compute_det(&scored)?;
    let n_directed = scored.iter().filter(|s| s.label.is_directed()).count();
    Ok(Evaluation {
        n_non_directed: scored.len() - n_directed,
        n_directed,
        scored,
        curve,
    })
}

pub fn evaluate(model: &FusionModel, examples: &[Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Evaluation("evaluation manifest is empty".into()));
    }
    evaluate_scores(score_examples(model, examples)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ex(label: Label, score: f64) -> ScoredExample {
        ScoredExample::new("x", label, score).unwrap()
    }

    // Counts every rate from scratch at every candidate threshold.
    fn oracle_eer(data: &[(f64, bool)]) -> f64 {
        let mut ts: Vec<f64> = data.iter().map(|d| d.0).collect();
        ts.push(f64::NEG_INFINITY);
        ts.push(f64::INFINITY);
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        let np = data.iter().filter(|d| d.1).count() as f64;
        let nn = data.len() as f64 - np;
        let rates: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| {
                let fa = data.iter().filter(|d| !d.1 && d.0 >= t).count() as f64 / nn;
                let fr = data.iter().filter(|d| d.1 && d.0 < t).count() as f64 / np;
                (fa, fr)
            })
            .collect();
        for k in 0..rates.len() - 1 {
            let (a, b) = (rates[k], rates[k + 1]);
            let (da, db) = (a.0 - a.1, b.0 - b.1);
            if da == 0.0 {
                return a.0;
            }
            if da > 0.0 && db <= 0.0 {
                let u = da / (da - db);
                return a.1 + u * (b.1 - a.1);
            }
        }
        panic!("no crossing")
    }

    #[test]
    fn separable_scores_give_zero() {
        let s = vec![ex(Label::Directed, 0.9), ex(Label::Directed, 0.8), ex(Label::NonDirected, 0.1)];
        assert_eq!(compute_det(&s).unwrap().eer, 0.0);
    }

    #[test]
    fn identical_scores_give_half() {
        let s: Vec<_> = (0..10)
            .map(|i| ex(if i % 3 == 0 { Label::Directed } else { Label::NonDirected }, 0.5))
            .collect();
        let c = compute_det(&s).unwrap();
        assert!((c.eer - 0.5).abs() < 1e-12);
        assert_eq!(c.points.len(), 3);
    }

    #[test]
    fn sentinels_are_extreme_operating_points() {
        let s = vec![ex(Label::Directed, 0.3), ex(Label::NonDirected, 0.6)];
        let c = compute_det(&s).unwrap();
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((first.far, first.frr), (1.0, 0.0));
        assert_eq!((last.far, last.frr), (0.0, 1.0));
        assert_eq!(c.eer, 1.0);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = vec![ex(Label::Directed, 0.3)];
        assert!(matches!(compute_det(&s), Err(Error::Evaluation(_))));
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let data: Vec<(f64, bool)> = (0..200)
                .map(|_| {
                    let d = rng.gen_bool(0.5);
                    let s = ((rng.gen::<f64>() + if d { 0.3 } else { 0.0 }) * 20.0).round() / 26.0;
                    (s, d)
                })
                .collect();
            if data.iter().all(|d| d.1) || data.iter().all(|d| !d.1) {
                continue;
            }
            let scored: Vec<_> = data
                .iter()
                .map(|&(s, d)| ex(if d { Label::Directed } else { Label::NonDirected }, s))
                .collect();
            let c = compute_det(&scored).unwrap();
            assert!((c.eer - oracle_eer(&data)).abs() < 1e-9);
        }
    }

    #[test]
    fn decision_score_identities() {
        assert_eq!(decision_score(1.3, 1.3), 0.5);
        assert!((1.0 - decision_score(50.0, -50.0)) < 1e-20);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (a, b): (f64, f64) = (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
            let renorm = a.exp() / (a.exp() + b.exp());
            assert!((decision_score(a, b) - renorm).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![ex(Label::Directed, 0.71), ex(Label::NonDirected, 0.2), ex(Label::Directed, 0.2)];
        let c = compute_det(&s).unwrap();
        let p = dir.path().join("det.csv");
        write_det_csv(&c, &p).unwrap();
        let back = read_det_csv(&p).unwrap();
        assert_eq!(back.len(), c.points.len());
        for (a, b) in back.iter().zip(&c.points) {
            assert!((a.threshold - b.threshold).abs() <= 1e-6);
            assert!((a.far - b.far).abs() <= 1e-6 && (a.frr - b.frr).abs() <= 1e-6);
        }
        let sp = dir.path().join("scores.csv");
        write_scores_csv(&s, &sp).unwrap();
        assert_eq!(read_scores_csv(&sp).unwrap(), s);
    }

    fn svg_pairs(svg: &str) -> Vec<(f64, f64)> {
        svg.lines()
            .filter(|l| l.contains("data-far"))
            .map(|l| {
                let get = |key: &str| -> f64 {
                    let i = l.find(key).unwrap() + key.len() + 2;
                    let j = i + l[i..].find('"').unwrap();
                    l[i..j].parse().unwrap()
                };
                (get("data-far"), get("data-frr"))
            })
            .collect()
    }

    #[test]
    fn svg_clips_and_marks_eer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let s: Vec<_> = (0..300)
            .map(|i| {
                let d = i % 2 == 0;
                let v: f64 = rng.gen::<f64>() * 0.6 + if d { 0.4 } else { 0.0 };
                ex(if d { Label::Directed } else { Label::NonDirected }, v)
            })
            .collect();
        let c = compute_det(&s).unwrap();
        let svg = det_svg(&c, 0.25).unwrap();
        let pairs = svg_pairs(&svg);
        assert!(pairs.iter().all(|&(a, b)| a <= 0.25 && b <= 0.25));
        let eer_line = svg.lines().find(|l| l.contains(r#"id="eer""#)).unwrap();
        let marker = svg_pairs(eer_line)[0];
        assert_eq!(marker, (c.eer, c.eer));
    }

    proptest! {
        #[test]
        fn det_is_monotone_and_oracle_equal(
            data in prop::collection::vec((0u8..20, any::<bool>()), 2..120)
        ) {
            prop_assume!(data.iter().any(|d| d.1) && data.iter().any(|d| !d.1));
            let pts: Vec<(f64, bool)> = data.iter().map(|&(s, d)| (s as f64 / 19.0, d)).collect();
            let scored: Vec<_> = pts
                .iter()
                .map(|&(s, d)| ex(if d { Label::Directed } else { Label::NonDirected }, s))
                .collect();
            let c = compute_det(&scored).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[0].threshold < w[1].threshold);
                prop_assert!(w[1].far <= w[0].far);
                prop_assert!(w[1].frr >= w[0].frr);
            }
            prop_assert!((0.0..=1.0).contains(&c.eer));
            prop_assert!((c.eer - oracle_eer(&pts)).abs() < 1e-9);

            // strictly increasing transform
            let warped: Vec<_> = scored
                .iter()
                .map(|e| ex(e.label, e.score.powi(3) * 0.5 + 0.1))
                .collect();
            prop_assert!((compute_det(&warped).unwrap().eer - c.eer).abs() < 1e-12);

            // flip labels and mirror scores
            let flipped: Vec<_> = scored.iter().map(|e| ex(e.label.flipped(), 1.0 - e.score)).collect();
            prop_assert!((compute_det(&flipped).unwrap().eer - c.eer).abs() < 1e-9);
        }
    }
}
