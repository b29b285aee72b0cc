//! Finite-difference verification of the tape gradients.
//!
//! For every learnable tensor entry the loss is re-evaluated on the plain
//! (tape-free) path at +h and -h and the central difference is compared to
//! the tape adjoint. Because the probe drives the plain implementation and
//! the adjoint comes from the tape, the check also pins the two forward
//! paths to each other.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::ProjectionParams;
use crate::config::RunConfig;
use crate::error::Result;
use crate::feature::{Branch, FeatureSet, FeatureVector, ScaleTag};
use crate::mat::Mat;
use crate::objective::{loss_and_gradients, total_loss, ClassifierParams, TrainBatch};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Refinement steps for suspicious probes. The loss contains `max(x, 0)`
/// terms, so a fixed +-1e-4 window occasionally crosses a kink where the
/// central difference does not estimate the derivative, and the sharp
/// softmaxes push plain truncation error toward the tolerance; shrinking
/// the step resolves both. A wrong gradient disagrees at every step size,
/// so refinement cannot mask real defects.
pub const REFINE_STEPS: [f64; 2] = [1e-6, 1e-7];

/// Probes whose primary error exceeds this are re-measured at the refined
/// steps before being judged against [`TOLERANCE`].
pub const REFINE_TRIGGER: f64 = TOLERANCE / 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckDims {
    pub batch: usize,
    pub visual: usize,
    pub textual: usize,
    pub dim: usize,
    pub identities: usize,
}

impl Default for GradcheckDims {
    fn default() -> Self {
        Self { batch: 4, visual: 6, textual: 8, dim: 16, identities: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    /// Probes re-measured at refined steps.
    pub kink_refined: usize,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub results: Vec<SeedResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub kink_refined: usize,
    pub elapsed_secs: f64,
}

fn random_set(rng: &mut ChaCha8Rng, owner: &str, count: usize, dim: usize) -> FeatureSet {
    let entries = (0..count)
        .map(|i| {
            let tag = if i == 0 {
                ScaleTag::new(Branch::Global, 0)
            } else {
                ScaleTag::new(Branch::Patch, (i - 1) as u16)
            };
            let values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (tag, FeatureVector::new(values).unwrap())
        })
        .collect();
    FeatureSet::new(owner, entries).unwrap()
}

fn random_instance(
    seed: u64,
    dims: &GradcheckDims,
) -> (TrainBatch, ProjectionParams, ClassifierParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<FeatureSet> = (0..dims.batch)
        .map(|i| random_set(&mut rng, &format!("i{i}"), dims.visual, dims.dim))
        .collect();
    let texts: Vec<FeatureSet> = (0..dims.batch)
        .map(|j| random_set(&mut rng, &format!("t{j}"), dims.textual, dims.dim))
        .collect();
    let persons: Vec<u32> =
        (0..dims.batch).map(|_| rng.gen_range(0..dims.identities as u32)).collect();
    let batch = TrainBatch::new(images, texts, persons).expect("matched pairs always label");
    let params = ProjectionParams::seeded(dims.dim, seed.wrapping_add(0x5151));
    let classifier =
        ClassifierParams::seeded(dims.identities, dims.dim, seed.wrapping_add(0xC1A5));
    (batch, params, classifier)
}

#[derive(Clone, Copy)]
enum Slot {
    WIq,
    WIv,
    WTk,
    WTv,
    Classifier,
    Image(usize),
    Text(usize),
}

impl Slot {
    fn name(self) -> String {
        match self {
            Slot::WIq => "w_iq".into(),
            Slot::WIv => "w_iv".into(),
            Slot::WTk => "w_tk".into(),
            Slot::WTv => "w_tv".into(),
            Slot::Classifier => "classifier".into(),
            Slot::Image(i) => format!("image[{i}]"),
            Slot::Text(j) => format!("text[{j}]"),
        }
    }
}

struct Probe<'a> {
    cfg: &'a RunConfig,
    batch: &'a TrainBatch,
    params: &'a ProjectionParams,
    classifier: &'a ClassifierParams,
}

impl Probe<'_> {
    fn eval(&self, slot: Slot, entry: usize, delta: f64) -> Result<f64> {
        let mut params = self.params.clone();
        let mut classifier = self.classifier.clone();
        let mut batch = self.batch.clone();
        match slot {
            Slot::WIq => params.w_iq.data_mut()[entry] += delta,
            Slot::WIv => params.w_iv.data_mut()[entry] += delta,
            Slot::WTk => params.w_tk.data_mut()[entry] += delta,
            Slot::WTv => params.w_tv.data_mut()[entry] += delta,
            Slot::Classifier => classifier.weights.data_mut()[entry] += delta,
            Slot::Image(i) => {
                let mut matrix = batch.images[i].matrix();
                matrix.data_mut()[entry] += delta;
                batch.images[i] = batch.images[i].with_matrix(&matrix)?;
            }
            Slot::Text(j) => {
                let mut matrix = batch.texts[j].matrix();
                matrix.data_mut()[entry] += delta;
                batch.texts[j] = batch.texts[j].with_matrix(&matrix)?;
            }
        }
        total_loss(
            &batch,
            &params,
            &classifier,
            &self.cfg.loss_weights()?,
            &self.cfg.temperatures()?,
            self.cfg.norm_axis,
            &self.cfg.loss_config(),
        )
    }
}

/// Relative error with a unit floor: tiny components compare absolutely,
/// large components relatively.
fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

fn check_seed(
    cfg: &RunConfig,
    seed: u64,
    dims: &GradcheckDims,
    fault_injection: bool,
) -> Result<SeedResult> {
    let (batch, params, classifier) = random_instance(seed, dims);
    let (_, mut grads) = loss_and_gradients(
        &batch,
        &params,
        &classifier,
        &cfg.loss_weights()?,
        &cfg.temperatures()?,
        cfg.norm_axis,
        &cfg.loss_config(),
    )?;
    if fault_injection {
        grads.w_iq.data_mut()[0] += 1e-2;
    }

    let probe = Probe { cfg, batch: &batch, params: &params, classifier: &classifier };
    let mut slots: Vec<(Slot, Mat)> = vec![
        (Slot::WIq, grads.w_iq),
        (Slot::WIv, grads.w_iv),
        (Slot::WTk, grads.w_tk),
        (Slot::WTv, grads.w_tv),
        (Slot::Classifier, grads.classifier),
    ];
    for (i, g) in grads.image_features.into_iter().enumerate() {
        slots.push((Slot::Image(i), g));
    }
    for (j, g) in grads.text_features.into_iter().enumerate() {
        slots.push((Slot::Text(j), g));
    }

    let central = |slot: Slot, entry: usize, h: f64| -> Result<f64> {
        Ok((probe.eval(slot, entry, h)? - probe.eval(slot, entry, -h)?) / (2.0 * h))
    };

    let mut max_rel = 0.0;
    let mut worst = String::from("-");
    let mut kink_refined = 0;
    for (slot, analytic) in &slots {
        for entry in 0..analytic.data().len() {
            let a = analytic.data()[entry];
            let mut rel = rel_error(a, central(*slot, entry, FD_STEP)?);
            if rel >= REFINE_TRIGGER {
                kink_refined += 1;
                for h in REFINE_STEPS {
                    let refined = rel_error(a, central(*slot, entry, h)?);
                    rel = rel.min(refined);
                    if rel < REFINE_TRIGGER {
                        break;
                    }
                }
            }
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{entry}]", slot.name());
            }
        }
    }
    Ok(SeedResult { seed, max_rel_error: max_rel, worst_tensor: worst, kink_refined })
}

/// Test aid: the analytic derivative of one component plus central
/// differences at several step sizes.
pub fn probe_component(
    cfg: &RunConfig,
    seed: u64,
    tensor: &str,
    entry: usize,
    steps: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    let (batch, params, classifier) = random_instance(seed, &GradcheckDims::default());
    let (_, grads) = loss_and_gradients(
        &batch,
        &params,
        &classifier,
        &cfg.loss_weights()?,
        &cfg.temperatures()?,
        cfg.norm_axis,
        &cfg.loss_config(),
    )?;
    let (slot, analytic) = match tensor {
        "w_iq" => (Slot::WIq, grads.w_iq.data()[entry]),
        "w_iv" => (Slot::WIv, grads.w_iv.data()[entry]),
        "w_tk" => (Slot::WTk, grads.w_tk.data()[entry]),
        "w_tv" => (Slot::WTv, grads.w_tv.data()[entry]),
        other => panic!("unsupported probe tensor {other}"),
    };
    let probe = Probe { cfg, batch: &batch, params: &params, classifier: &classifier };
    let mut fds = Vec::new();
    for &h in steps {
        let fd = (probe.eval(slot, entry, h)? - probe.eval(slot, entry, -h)?) / (2.0 * h);
        fds.push((h, fd));
    }
    Ok((analytic, fds))
}

/// Runs the finite-difference contract over the given seeds.
pub fn gradcheck(
    cfg: &RunConfig,
    seeds: &[u64],
    dims: &GradcheckDims,
    fault_injection: bool,
) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        results.push(check_seed(cfg, seed, dims, fault_injection)?);
    }
    let max_rel_error = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let kink_refined = results.iter().map(|r| r.kink_refined).sum();
    Ok(GradcheckReport {
        max_rel_error,
        passed: max_rel_error < TOLERANCE,
        tolerance: TOLERANCE,
        kink_refined,
        results,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn render_gradcheck_report(report: &GradcheckReport) -> String {
    let mut out = String::new();
    for r in &report.results {
        out.push_str(&format!(
            "seed {}: max_rel_error {:.3e} (worst {}, kink_refined {})\n",
            r.seed, r.max_rel_error, r.worst_tensor, r.kink_refined
        ));
    }
    out.push_str(&format!(
        "overall max_rel_error {:.3e} tolerance {:.0e} kink_refined {} elapsed {:.1}s -> {}\n",
        report.max_rel_error,
        report.tolerance,
        report.kink_refined,
        report.elapsed_secs,
        if report.passed { "PASS" } else { "FAIL" }
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> GradcheckDims {
        GradcheckDims { batch: 2, visual: 2, textual: 3, dim: 4, identities: 3 }
    }

    #[test]
    fn tape_matches_finite_differences_on_small_instances() {
        let cfg = RunConfig::default();
        let report = gradcheck(&cfg, &[0, 1], &tiny_dims(), false).unwrap();
        println!("tiny gradcheck max_rel_error {:.3e}", report.max_rel_error);
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn fault_injection_is_detected() {
        let cfg = RunConfig::default();
        let report = gradcheck(&cfg, &[0], &tiny_dims(), true).unwrap();
        assert!(!report.passed);
        assert!(report.results[0].worst_tensor.starts_with("w_iq"));
    }

    #[test]
    fn zero_weights_report_exact_zeros() {
        let mut cfg = RunConfig::default();
        cfg.w_cmpm = 0.0;
        cfg.w_cmpc = 0.0;
        cfg.w_csal = 0.0;
        let report = gradcheck(&cfg, &[3], &tiny_dims(), false).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn keys_axis_gradients_also_check_out() {
        let mut cfg = RunConfig::default();
        cfg.norm_axis = crate::attention::NormAxis::Keys;
        let report = gradcheck(&cfg, &[5], &tiny_dims(), false).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn report_rendering_mentions_verdict() {
        let cfg = RunConfig::default();
        let report = gradcheck(&cfg, &[0], &tiny_dims(), false).unwrap();
        let text = render_gradcheck_report(&report);
        assert!(text.contains("PASS"));
        assert!(text.contains("seed 0"));
    }

    #[test]
    fn refinement_converges_where_the_primary_window_straddles_a_clamp() {
        // Components where the +-1e-4 window crosses a max(x, 0) boundary:
        // the primary probe misestimates, the refined steps converge to the
        // analytic value.
        let cfg = RunConfig::default();
        for (seed, entry) in [(19u64, 86usize), (6, 69)] {
            let (analytic, fds) =
                probe_component(&cfg, seed, "w_iq", entry, &[FD_STEP, 1e-6, 1e-7]).unwrap();
            let rel_at = |idx: usize| {
                let (_, fd) = fds[idx];
                (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
            };
            assert!(rel_at(0) >= TOLERANCE);
            assert!(rel_at(1).min(rel_at(2)) < 1e-6);
        }
    }
}
