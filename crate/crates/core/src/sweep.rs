//! Limited-data sweeps: for each per-class budget `k` and seed, subsample,
//! train a fresh network and evaluate on the full test split.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::arch::ArchSpec;
use crate::data::{subsample_per_class, Sample};
use crate::error::{Error, Result};
use crate::model::build_model;
use crate::tensor::Scalar;
use crate::train::{evaluate_prepared, train, Metrics, PreparedSet, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub metrics: Metrics,
    /// Parameter hash right after initialization.
    pub init_hash: u64,
    /// Parameter hash after training.
    pub final_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub k: usize,
    pub per_class_accuracy: Vec<f64>,
    pub average_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub class_names: Vec<String>,
    /// Ordered by `k` as given, then by seed as given.
    pub rows: Vec<SweepRow>,
    /// Mean over seeds, one entry per `k`.
    pub summary: Vec<SweepSummary>,
}

impl SweepReport {
    /// Header `k,seed,<classes>,average`; percentages with two decimals.
    /// Summary rows carry `mean` in the seed column.
    pub fn to_csv(&self) -> String {
        let mut out = format!("k,seed,{},average\n", self.class_names.join(","));
        let pct = |v: &f64| format!("{:.2}", v * 100.0);
        for r in &self.rows {
            let cells: Vec<String> = r.metrics.per_class_accuracy.iter().map(pct).collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.k,
                r.seed,
                cells.join(","),
                pct(&r.metrics.average_accuracy)
            ));
        }
        for s in &self.summary {
            let cells: Vec<String> = s.per_class_accuracy.iter().map(pct).collect();
            out.push_str(&format!(
                "{},mean,{},{}\n",
                s.k,
                cells.join(","),
                pct(&s.average_accuracy)
            ));
        }
        out
    }

    pub fn mean_average(&self, k: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.k == k).map(|s| s.average_accuracy)
    }
}

pub struct SweepPlan<'a> {
    pub train: &'a [Sample],
    pub test: &'a [Sample],
    pub class_names: &'a [String],
    pub spec: &'a ArchSpec,
    pub k_list: &'a [usize],
    pub seeds: &'a [u64],
    pub config: TrainConfig,
    /// Worker threads; each run is isolated, so only wall time changes.
    pub jobs: usize,
}

/// Every `(k, seed)` run uses `seed` for both the subsample and the model
/// initialization.
pub fn run_limited_data_sweep<T: Scalar>(plan: &SweepPlan<'_>) -> Result<SweepReport> {
    if plan.k_list.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one k and one seed".into()));
    }
    plan.config.validate()?;
    // fail fast on an undersized class before any training starts
    let max_k = *plan.k_list.iter().max().expect("non-empty");
    subsample_per_class(plan.train, max_k, 0)?;

    let test = PreparedSet::<T>::new(plan.test, plan.config.resolution, plan.config.channel_mode)?;
    let runs: Vec<(usize, u64)> = plan
        .k_list
        .iter()
        .flat_map(|&k| plan.seeds.iter().map(move |&s| (k, s)))
        .collect();

    let one = |&(k, seed): &(usize, u64)| -> Result<SweepRow> {
        let subset = subsample_per_class(plan.train, k, seed)?;
        let mut model = build_model::<T>(plan.spec, seed)?;
        let init_hash = model.state_hash();
        let config = TrainConfig {
            seed,
            ..plan.config.clone()
        };
        train(&mut model, &subset, &config)?;
        let metrics = evaluate_prepared(&mut model, &test, plan.class_names)?;
        Ok(SweepRow {
            k,
            seed,
            metrics,
            init_hash,
            final_hash: model.state_hash(),
        })
    };

    let jobs = plan.jobs.clamp(1, runs.len());
    let rows: Vec<SweepRow> = if jobs == 1 {
        runs.iter().map(one).collect::<Result<_>>()?
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<SweepRow>>>> =
            Mutex::new((0..runs.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= runs.len() {
                        break;
                    }
                    let r = one(&runs[i]);
                    slots.lock().expect("no poisoned workers")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("no poisoned workers")
            .into_iter()
            .map(|s| s.expect("every run completed"))
            .collect::<Result<_>>()?
    };

    let classes = plan.class_names.len();
    let summary = plan
        .k_list
        .iter()
        .map(|&k| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.k == k).collect();
            let n = group.len() as f64;
            let per_class_accuracy = (0..classes)
                .map(|c| group.iter().map(|r| r.metrics.per_class_accuracy[c]).sum::<f64>() / n)
                .collect();
            let average_accuracy = group.iter().map(|r| r.metrics.average_accuracy).sum::<f64>() / n;
            SweepSummary {
                k,
                per_class_accuracy,
                average_accuracy,
            }
        })
        .collect();
    Ok(SweepReport {
        class_names: plan.class_names.to_vec(),
        rows,
        summary,
    })
}
