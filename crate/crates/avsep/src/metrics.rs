//! bss_eval-style SDR/SIR/SAR (time-invariant gain variant), localization
//! scoring, and report aggregation.
//!
//! The decomposition is the orthogonal-projection flavor without
//! distortion filters: `s_target` is the projection of the estimate onto
//! the target reference, `s_target + e_interf` its projection onto the
//! span of all references, and `e_artif` the remainder.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{AvsepError, Result};
use crate::synthdata::BBox;

/// Energy floor for dB denominators.
pub const ENERGY_FLOOR: f64 = 1e-20;
/// dB cap applied symmetrically; degenerate ratios report +/-100 dB.
pub const DB_CAP: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the small Gram system G c = r by Gaussian elimination with
/// partial pivoting; errors on (near) rank deficiency.
fn solve_gram(mut g: Vec<Vec<f64>>, mut r: Vec<f64>, scale: f64) -> Result<Vec<f64>> {
    let n = r.len();
    let tol = 1e-12 * scale;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| g[a][col].abs().partial_cmp(&g[b][col].abs()).unwrap())
            .unwrap();
        if g[pivot][col].abs() <= tol {
            return Err(AvsepError::Degenerate(
                "reference set is rank deficient".into(),
            ));
        }
        g.swap(col, pivot);
        r.swap(col, pivot);
        for row in col + 1..n {
            let f = g[row][col] / g[col][col];
            for k in col..n {
                g[row][k] -= f * g[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut c = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = r[col];
        for k in col + 1..n {
            acc -= g[col][k] * c[k];
        }
        c[col] = acc / g[col][col];
    }
    Ok(c)
}

/// Orthogonal decomposition of `estimate` into target, interference and
/// artifact parts. `references[0]` is the target source.
pub fn decompose(estimate: &[f64], references: &[&[f64]]) -> Result<Decomposition> {
    if references.is_empty() {
        return Err(AvsepError::Validation("no references".into()));
    }
    for r in references {
        if r.len() != estimate.len() {
            return Err(AvsepError::Validation("length mismatch".into()));
        }
    }
    let target = references[0];
    let target_energy = dot(target, target);
    if target_energy <= ENERGY_FLOOR {
        return Err(AvsepError::Degenerate("zero-energy target reference".into()));
    }

    // projection onto the target alone
    let alpha = dot(estimate, target) / target_energy;
    let s_target: Vec<f64> = target.iter().map(|&t| alpha * t).collect();

    // projection onto the span of all references
    let n = references.len();
    let mut gram = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    let mut scale = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            gram[i][j] = dot(references[i], references[j]);
        }
        scale = scale.max(gram[i][i]);
        rhs[i] = dot(estimate, references[i]);
    }
    if references.iter().any(|r| dot(r, r) <= ENERGY_FLOOR) {
        return Err(AvsepError::Degenerate("zero-energy reference".into()));
    }
    let coeffs = solve_gram(gram, rhs, scale)?;
    let mut span_proj = vec![0.0; estimate.len()];
    for (c, r) in coeffs.iter().zip(references) {
        for (p, &x) in span_proj.iter_mut().zip(r.iter()) {
            *p += c * x;
        }
    }

    let e_interf: Vec<f64> = span_proj.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = estimate.iter().zip(&span_proj).map(|(e, p)| e - p).collect();
    Ok(Decomposition { s_target, e_interf, e_artif })
}

fn db_ratio(num: f64, den: f64) -> f64 {
    (10.0 * (num.max(ENERGY_FLOOR) / den.max(ENERGY_FLOOR)).log10()).clamp(-DB_CAP, DB_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

pub fn sdr_sir_sar(d: &Decomposition) -> BssScores {
    let et = dot(&d.s_target, &d.s_target);
    let ei = dot(&d.e_interf, &d.e_interf);
    let ea = dot(&d.e_artif, &d.e_artif);
    let target_plus_interf: Vec<f64> =
        d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b).collect();
    let eti = dot(&target_plus_interf, &target_plus_interf);
    BssScores {
        sdr: db_ratio(et, ei + ea),
        sir: db_ratio(et, ei),
        sar: db_ratio(eti, ea),
    }
}

/// Convenience: decompose then score.
pub fn score_estimate(estimate: &[f64], references: &[&[f64]]) -> Result<BssScores> {
    Ok(sdr_sir_sar(&decompose(estimate, references)?))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LocalizationScore {
    pub hit: bool,
    /// Distance in pixels from the heatmap argmax to the bbox center.
    pub pointing_error: f64,
    pub argmax: (usize, usize),
}

/// Bilinearly upsamples a coarse heatmap to `(height, width)`, takes the
/// argmax (ties to the first index in row-major order), and scores it
/// against the object bounding box.
pub fn localization_score(
    heatmap: &Array2<f64>,
    bbox: &BBox,
    height: usize,
    width: usize,
) -> LocalizationScore {
    let up = bilinear_upsample(heatmap, height, width);
    let mut best = f64::NEG_INFINITY;
    let mut arg = (0usize, 0usize);
    for y in 0..height {
        for x in 0..width {
            if up[(y, x)] > best {
                best = up[(y, x)];
                arg = (y, x);
            }
        }
    }
    let (cy, cx) = bbox.center();
    let dy = arg.0 as f64 - cy;
    let dx = arg.1 as f64 - cx;
    LocalizationScore {
        hit: bbox.contains(arg.1, arg.0),
        pointing_error: (dx * dx + dy * dy).sqrt(),
        argmax: arg,
    }
}

/// Align-corners bilinear interpolation of a 2-D grid.
pub fn bilinear_upsample(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    let mut out = Array2::<f64>::zeros((height, width));
    let fy = if height > 1 { (sh - 1) as f64 / (height - 1) as f64 } else { 0.0 };
    let fx = if width > 1 { (sw - 1) as f64 / (width - 1) as f64 } else { 0.0 };
    for y in 0..height {
        let sy = y as f64 * fy;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = sy - y0 as f64;
        for x in 0..width {
            let sx = x as f64 * fx;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = sx - x0 as f64;
            // nested lerps keep a constant field exactly constant
            let top = src[(y0, x0)] + (src[(y0, x1)] - src[(y0, x0)]) * wx;
            let bot = src[(y1, x0)] + (src[(y1, x1)] - src[(y1, x0)]) * wx;
            out[(y, x)] = top + (bot - top) * wy;
        }
    }
    out
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleScore {
    pub mixture_id: String,
    pub source_index: usize,
    pub category: usize,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    /// Same metrics for the unseparated mixture scored as the estimate.
    pub baseline_sdr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationStats {
    pub evaluated: usize,
    pub hits: usize,
    pub hit_rate: f64,
    pub mean_pointing_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationReport {
    pub schema_version: u32,
    /// Resolved configuration echoed from the run that produced this report.
    pub config: serde_json::Value,
    pub predictor: String,
    pub per_example: Vec<ExampleScore>,
    pub mean_sdr: f64,
    pub mean_sir: f64,
    pub mean_sar: f64,
    pub median_sdr: f64,
    pub mean_baseline_sdr: f64,
    pub localization: Option<LocalizationStats>,
    /// Degeneracy policy applied to all dB values.
    pub db_floor: f64,
    pub db_cap: f64,
}

impl SeparationReport {
    pub fn from_scores(
        config: serde_json::Value,
        predictor: String,
        per_example: Vec<ExampleScore>,
        localization: Option<LocalizationStats>,
    ) -> Self {
        let n = per_example.len().max(1) as f64;
        let mean = |f: fn(&ExampleScore) -> f64| per_example.iter().map(f).sum::<f64>() / n;
        let mut sdrs: Vec<f64> = per_example.iter().map(|e| e.sdr).collect();
        sdrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_sdr = if sdrs.is_empty() {
            f64::NAN
        } else if sdrs.len() % 2 == 1 {
            sdrs[sdrs.len() / 2]
        } else {
            0.5 * (sdrs[sdrs.len() / 2 - 1] + sdrs[sdrs.len() / 2])
        };
        SeparationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            predictor,
            mean_sdr: mean(|e| e.sdr),
            mean_sir: mean(|e| e.sir),
            mean_sar: mean(|e| e.sar),
            median_sdr,
            mean_baseline_sdr: mean(|e| e.baseline_sdr),
            per_example,
            localization,
            db_floor: ENERGY_FLOOR,
            db_cap: DB_CAP,
        }
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "predictor: {}\nexamples: {}\n{:>10} {:>10} {:>10} {:>14}\n",
            self.predictor,
            self.per_example.len(),
            "mean SDR",
            "mean SIR",
            "mean SAR",
            "baseline SDR"
        ));
        s.push_str(&format!(
            "{:>10.2} {:>10.2} {:>10.2} {:>14.2}\n",
            self.mean_sdr, self.mean_sir, self.mean_sar, self.mean_baseline_sdr
        ));
        if let Some(loc) = &self.localization {
            s.push_str(&format!(
                "localization: {}/{} hits ({:.1}%), mean pointing error {:.1} px\n",
                loc.hits,
                loc.evaluated,
                100.0 * loc.hit_rate,
                loc.mean_pointing_error
            ));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

/// One predicted source: the reconstructed waveform plus, when the predictor
/// has an appearance branch, the low-resolution localization heatmap for the
/// source's image.
pub struct EvalOutput {
    pub estimate: crate::dsp::AudioClip,
    pub heatmap: Option<Array2<f64>>,
}

/// Scores a predictor over every cross-category mixture of a corpus split.
/// Both sources of each mixture are scored; references\[0\] is always the
/// target source. Results are aggregated in sorted (mixture id, source)
/// order so the report is deterministic.
pub fn evaluate_mixtures<F>(
    corpus: &crate::synthdata::Corpus,
    split: crate::synthdata::Split,
    limit: Option<usize>,
    config: serde_json::Value,
    predictor_name: &str,
    predict: &mut F,
) -> Result<SeparationReport>
where
    F: FnMut(&crate::synthdata::MixtureExample, usize) -> Result<EvalOutput>,
{
    let map = crate::dsp::FreqMap::new();
    let rows = corpus.rows_for(split);
    let mut pairs = crate::synthdata::mixture_pairs(&rows, corpus.meta.config.categories);
    if let Some(l) = limit {
        pairs.truncate(l);
    }
    let mut scores = Vec::new();
    let mut loc_evaluated = 0usize;
    let mut loc_hits = 0usize;
    let mut loc_error_sum = 0.0;
    for &(i, j) in &pairs {
        let mut a = corpus.load_sample(rows[i])?;
        let mut b = corpus.load_sample(rows[j])?;
        a.audio = crate::dsp::prepare_clip(&a.audio);
        b.audio = crate::dsp::prepare_clip(&b.audio);
        let ex = crate::synthdata::make_mixture(&a, &b, &map)?;
        for s in 0..ex.sources.len() {
            let out = predict(&ex, s)?;
            let target = ex.sources[s].audio.samples();
            let other = ex.sources[1 - s].audio.samples();
            let refs: [&[f64]; 2] = [target, other];
            let est = score_estimate(out.estimate.samples(), &refs)?;
            let base = score_estimate(ex.mix.samples(), &refs)?;
            scores.push(ExampleScore {
                mixture_id: ex.id.clone(),
                source_index: s,
                category: ex.sources[s].category,
                sdr: est.sdr,
                sir: est.sir,
                sar: est.sar,
                baseline_sdr: base.sdr,
            });
            if let Some(heatmap) = &out.heatmap {
                let (_, ih, iw) = ex.sources[s].image.dim();
                let loc = localization_score(heatmap, &ex.sources[s].bbox, ih, iw);
                loc_evaluated += 1;
                loc_hits += loc.hit as usize;
                loc_error_sum += loc.pointing_error;
            }
        }
    }
    scores.sort_by(|x, y| {
        (x.mixture_id.as_str(), x.source_index).cmp(&(y.mixture_id.as_str(), y.source_index))
    });
    let localization = (loc_evaluated > 0).then(|| LocalizationStats {
        evaluated: loc_evaluated,
        hits: loc_hits,
        hit_rate: loc_hits as f64 / loc_evaluated as f64,
        mean_pointing_error: loc_error_sum / loc_evaluated as f64,
    });
    Ok(SeparationReport::from_scores(
        config,
        predictor_name.to_string(),
        scores,
        localization,
    ))
}

/// The ideal-binary-mask oracle: applies a mixture's ground-truth dominance
/// mask instead of a model prediction. This is the ceiling every mask-based
/// model sits under.
pub fn ibm_oracle(
    map: &crate::dsp::FreqMap,
) -> impl FnMut(&crate::synthdata::MixtureExample, usize) -> Result<EvalOutput> + '_ {
    move |ex, s| {
        let estimate = crate::dsp::apply_mask_and_reconstruct(
            &ex.mix_spec,
            &ex.gt_masks[s],
            map,
            ex.mix.len(),
        )?;
        Ok(EvalOutput { estimate, heatmap: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn orthogonal_refs(n: usize) -> (Vec<f64>, Vec<f64>) {
        // equal-energy, exactly orthogonal over n samples
        let r1: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r2: Vec<f64> = (0..n)
            .map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        assert!(dot(&r1, &r2).abs() < 1e-12);
        (r1, r2)
    }

    #[test]
    fn perfect_estimate_hits_the_cap() {
        let (r1, r2) = orthogonal_refs(64);
        let scores = score_estimate(&r1, &[&r1, &r2]).unwrap();
        assert_eq!(scores.sdr, DB_CAP);
        assert_eq!(scores.sir, DB_CAP);
        assert_eq!(scores.sar, DB_CAP);
    }

    #[test]
    fn scaling_the_estimate_does_not_change_scores() {
        let (r1, r2) = orthogonal_refs(64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est: Vec<f64> = r1
            .iter()
            .zip(&r2)
            .map(|(a, b)| 0.7 * a + 0.2 * b + 0.05 * (rng.random::<f64>() - 0.5))
            .collect();
        let base = score_estimate(&est, &[&r1, &r2]).unwrap();
        for alpha in [0.1, 1.0, 10.0] {
            let scaled: Vec<f64> = est.iter().map(|e| alpha * e).collect();
            let s = score_estimate(&scaled, &[&r1, &r2]).unwrap();
            assert!((s.sdr - base.sdr).abs() < 1e-9, "alpha {alpha}");
            assert!((s.sir - base.sir).abs() < 1e-9);
            assert!((s.sar - base.sar).abs() < 1e-9);
        }
    }

    #[test]
    fn known_mixture_gives_closed_form_sir() {
        // estimate = 0.8 r1 + 0.2 r2 with orthogonal equal-energy refs:
        // SIR = 10 log10(0.64/0.04) ~= 12.04 dB, artifacts ~ 0.
        let (r1, r2) = orthogonal_refs(256);
        let est: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| 0.8 * a + 0.2 * b).collect();
        let d = decompose(&est, &[&r1, &r2]).unwrap();
        let artif_energy = dot(&d.e_artif, &d.e_artif);
        assert!(artif_energy < 1e-18);
        let scores = sdr_sir_sar(&d);
        assert!((scores.sir - 10.0 * (0.64f64 / 0.04).log10()).abs() < 1e-9);
        assert!((scores.sir - 12.04).abs() < 0.01);
    }

    #[test]
    fn decomposition_is_additive_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 512;
        let r1: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let r2: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let est: Vec<f64> = (0..n)
            .map(|i| 0.6 * r1[i] - 0.3 * r2[i] + 0.1 * (rng.random::<f64>() - 0.5))
            .collect();
        let d = decompose(&est, &[&r1, &r2]).unwrap();
        let norm = dot(&est, &est).sqrt();
        for i in 0..n {
            let sum = d.s_target[i] + d.e_interf[i] + d.e_artif[i];
            assert!((sum - est[i]).abs() < 1e-8 * norm.max(1.0));
        }
        // pairwise orthogonality within numerical tolerance
        let scale = norm * norm;
        assert!(dot(&d.s_target, &d.e_interf).abs() < 1e-6 * scale);
        assert!(dot(&d.s_target, &d.e_artif).abs() < 1e-6 * scale);
        assert!(dot(&d.e_interf, &d.e_artif).abs() < 1e-6 * scale);
    }

    #[test]
    fn white_noise_estimate_scores_badly() {
        let (r1, r2) = orthogonal_refs(4096);
        for seed in 3..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..4096).map(|_| rng.random::<f64>() - 0.5).collect();
            let scores = score_estimate(&noise, &[&r1, &r2]).unwrap();
            assert!(scores.sdr < 0.0, "seed {seed}: sdr {}", scores.sdr);
        }
    }

    #[test]
    fn sdr_bounded_by_sir_and_sar() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = 256;
            let r1: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let r2: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let est: Vec<f64> = (0..n)
                .map(|i| {
                    0.5 * r1[i]
                        + 0.2 * r2[i]
                        + 0.3 * (rng.random::<f64>() - 0.5)
                })
                .collect();
            let s = score_estimate(&est, &[&r1, &r2]).unwrap();
            assert!(s.sdr <= s.sir + 1e-9);
            assert!(s.sdr <= s.sar + 3.02 + 1e-9);
        }
    }

    #[test]
    fn degenerate_references_are_rejected() {
        let zeros = vec![0.0; 16];
        let ones = vec![1.0; 16];
        assert!(matches!(
            decompose(&ones, &[&zeros]),
            Err(AvsepError::Degenerate(_))
        ));
        // rank-deficient: second reference is a multiple of the first
        let twice: Vec<f64> = ones.iter().map(|x| 2.0 * x).collect();
        assert!(decompose(&ones, &[&ones, &twice]).is_err());
    }

    #[test]
    fn heatmap_delta_at_bbox_center_is_a_hit() {
        let bbox = BBox { x0: 20, y0: 24, x1: 40, y1: 44 };
        let mut heat = Array2::<f64>::zeros((4, 4));
        // coarse cell whose upsampled argmax lands near (34, 30)
        let (cy, cx) = bbox.center();
        let gy = (cy / 63.0 * 3.0).round() as usize;
        let gx = (cx / 63.0 * 3.0).round() as usize;
        heat[(gy, gx)] = 1.0;
        let score = localization_score(&heat, &bbox, 64, 64);
        assert!(score.hit, "argmax {:?}", score.argmax);
    }

    #[test]
    fn uniform_heatmap_breaks_ties_to_first_index() {
        let bbox = BBox { x0: 10, y0: 10, x1: 20, y1: 20 };
        let heat = Array2::<f64>::ones((4, 4));
        let score = localization_score(&heat, &bbox, 64, 64);
        assert_eq!(score.argmax, (0, 0));
        assert!(!score.hit);
    }

    #[test]
    fn report_aggregates_match_counts() {
        let scores = vec![
            ExampleScore {
                mixture_id: "m0".into(),
                source_index: 0,
                category: 0,
                sdr: 10.0,
                sir: 12.0,
                sar: 14.0,
                baseline_sdr: 0.0,
            },
            ExampleScore {
                mixture_id: "m0".into(),
                source_index: 1,
                category: 1,
                sdr: 6.0,
                sir: 8.0,
                sar: 9.0,
                baseline_sdr: 1.0,
            },
        ];
        let report = SeparationReport::from_scores(
            serde_json::json!({"variant": "test"}),
            "unit".into(),
            scores,
            None,
        );
        assert_eq!(report.per_example.len(), 2);
        assert!((report.mean_sdr - 8.0).abs() < 1e-12);
        assert!((report.median_sdr - 8.0).abs() < 1e-12);
        assert_eq!(report.db_cap, DB_CAP);
    }
}
