//! Convergence comparison of conditional against additive cross-attention
//! under identical budgets, seeds and data streams.

use std::fmt::Write as _;

use crate::attention::AttentionVariant;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::train::{evaluation_scenes, MetricsRecord, Trainer};

pub const MIN_SEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CompareSettings {
    pub seeds: Vec<u64>,
    /// Smoothed (per logging interval) total loss a run must reach.
    pub threshold: f64,
    pub eval_scenes: usize,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub variant: AttentionVariant,
    pub seed: u64,
    /// First logged iteration whose interval-mean loss is at or below the
    /// threshold.
    pub iterations_to_threshold: Option<usize>,
    pub final_loss: f64,
    pub ap50: f64,
    pub ap: f64,
    pub records: Vec<MetricsRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub budget: usize,
    pub threshold: f64,
    pub runs: Vec<RunSummary>,
}

pub fn variant_label(v: AttentionVariant) -> &'static str {
    match v {
        AttentionVariant::Conditional => "conditional",
        AttentionVariant::Additive => "additive",
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl CompareReport {
    fn of(&self, v: AttentionVariant) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    /// Median iterations to threshold; runs that never reach it count as
    /// `budget + 1`.
    pub fn median_iterations(&self, v: AttentionVariant) -> f64 {
        let censored = (self.budget + 1) as f64;
        median(
            self.of(v)
                .map(|r| r.iterations_to_threshold.map_or(censored, |i| i as f64))
                .collect(),
        )
    }

    pub fn median_ap50(&self, v: AttentionVariant) -> f64 {
        median(self.of(v).map(|r| r.ap50).collect())
    }

    pub fn median_ap(&self, v: AttentionVariant) -> f64 {
        median(self.of(v).map(|r| r.ap).collect())
    }

    pub fn conditional_reaches_threshold_sooner(&self) -> bool {
        self.median_iterations(AttentionVariant::Conditional) < self.median_iterations(AttentionVariant::Additive)
    }

    pub fn conditional_ap_not_worse(&self) -> bool {
        self.median_ap50(AttentionVariant::Conditional) >= self.median_ap50(AttentionVariant::Additive)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seed,iterations_to_threshold,final_loss,ap50,ap\n");
        for r in &self.runs {
            let it = r
                .iterations_to_threshold
                .map_or_else(|| "none".to_string(), |i| i.to_string());
            writeln!(
                s,
                "{},{},{},{},{},{}",
                variant_label(r.variant),
                r.seed,
                it,
                r.final_loss,
                r.ap50,
                r.ap
            )
            .expect("write to string");
        }
        s
    }

    pub fn verdict(&self) -> String {
        let c = AttentionVariant::Conditional;
        let a = AttentionVariant::Additive;
        let faster = self.conditional_reaches_threshold_sooner();
        format!(
            "median iterations to loss <= {}: conditional {} vs additive {} (budget {}); \
             median AP50: conditional {:.4} vs additive {:.4}; verdict: conditional {} faster",
            self.threshold,
            self.median_iterations(c),
            self.median_iterations(a),
            self.budget,
            self.median_ap50(c),
            self.median_ap50(a),
            if faster { "converges" } else { "does NOT converge" }
        )
    }
}

/// Trains `base` for one seed (which sets both init and data) and
/// evaluates it.
pub fn run_one(base: &TrainConfig, seed: u64, settings: &CompareSettings) -> Result<RunSummary> {
    let mut config = base.clone();
    config.seed = seed;
    config.scene.seed = seed;
    config.validate()?;
    let mut trainer = Trainer::new(&config)?;
    let records = trainer.run(config.iterations, |_| {})?;
    let iterations_to_threshold = records
        .iter()
        .find(|r| r.loss <= settings.threshold)
        .map(|r| r.iteration);
    let scenes = evaluation_scenes(&config, settings.eval_seed, settings.eval_scenes)?;
    let ap = evaluate(&trainer.model, &trainer.params, &scenes)?;
    Ok(RunSummary {
        variant: config.attention,
        seed,
        iterations_to_threshold,
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        ap50: ap.ap50,
        ap: ap.ap,
        records,
    })
}

/// Runs `first` then `second` for every seed under the same budget.
pub fn compare_configs(
    first: &TrainConfig,
    second: &TrainConfig,
    settings: &CompareSettings,
    mut on_run: impl FnMut(&RunSummary),
) -> Result<CompareReport> {
    if settings.seeds.len() < MIN_SEEDS {
        return Err(Error::Invalid(format!(
            "comparison needs at least {MIN_SEEDS} seeds, got {}",
            settings.seeds.len()
        )));
    }
    if first.iterations != second.iterations {
        return Err(Error::Invalid(format!(
            "compared configs must share one budget, got {} and {}",
            first.iterations, second.iterations
        )));
    }
    if first.iterations == 0 {
        return Err(Error::Invalid("comparison needs a positive iteration budget".into()));
    }
    if !settings.threshold.is_finite() {
        return Err(Error::Invalid(format!("threshold {} is not finite", settings.threshold)));
    }
    if settings.eval_scenes == 0 {
        return Err(Error::Invalid("comparison needs at least one evaluation scene".into()));
    }
    let mut runs = Vec::new();
    for &seed in &settings.seeds {
        for config in [first, second] {
            let r = run_one(config, seed, settings)?;
            on_run(&r);
            runs.push(r);
        }
    }
    Ok(CompareReport {
        budget: first.iterations,
        threshold: settings.threshold,
        runs,
    })
}

/// Conditional against additive cross-attention, all else equal.
pub fn compare_convergence(
    base: &TrainConfig,
    settings: &CompareSettings,
    on_run: impl FnMut(&RunSummary),
) -> Result<CompareReport> {
    let mut conditional = base.clone();
    conditional.attention = AttentionVariant::Conditional;
    let mut additive = base.clone();
    additive.attention = AttentionVariant::Additive;
    compare_configs(&conditional, &additive, settings, on_run)
}
