use std::time::Duration;

use super::{fuzz, seeds, workload, FuzzPlan};
use crate::gateway::GatewayMutation;
use crate::kernel::Mutation;
use crate::runtime::programs;
use crate::harness::{probe_timing, ProbeConfig};

/// The documented determinism-breaking defects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarnessMutation {
    LiveChildMerge,
    SharedFuelCounter,
    WallClockNow,
}

impl HarnessMutation {
    pub const ALL: [HarnessMutation; 3] = [
        HarnessMutation::LiveChildMerge,
        HarnessMutation::SharedFuelCounter,
        HarnessMutation::WallClockNow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HarnessMutation::LiveChildMerge => "live-child-merge",
            HarnessMutation::SharedFuelCounter => "shared-fuel-counter",
            HarnessMutation::WallClockNow => "wall-clock-now",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MutationReport {
    pub mutation: HarnessMutation,
    pub detected: bool,
    /// The check that caught it, or what was tried.
    pub evidence: String,
}

/// Runs the fuzz suite (kernel mutations) or the timing probe (gateway
/// mutation) against a build with `m` switched on. Detection means the
/// suite saw outputs differ between runs that must agree.
pub fn detect_mutation(m: HarnessMutation, master_seed: u64) -> MutationReport {
    let kernel = match m {
        HarnessMutation::LiveChildMerge => Some(Mutation::LiveChildMerge),
        HarnessMutation::SharedFuelCounter => Some(Mutation::SharedFuelCounter),
        HarnessMutation::WallClockNow => None,
    };
    if let Some(km) = kernel {
        let seeds = seeds(master_seed, 20);
        let mut tried: Vec<String> = Vec::new();
        // The long-working clock keeps main busy until well after the timer
        // has used its budget, so a timer that is not held to its budget
        // races main for fuel.
        let long_clock = programs::Workload {
            name: "refclock-long".into(),
            ..programs::ref_clock(20_000, 100_000)
        };
        let candidates = [long_clock].into_iter().chain(
            ["refclock", "swap", "applog", "pipeline", "qsort"].map(|n| workload(n).expect("standard")),
        );
        for w in candidates {
            let name = w.name.clone();
            let mut plan = FuzzPlan::new(w, seeds.clone(), vec![1, 2, 4, 8]);
            plan.mutation = Some(km);
            let r = fuzz(&plan);
            if let Some(d) = r.divergence {
                return MutationReport {
                    mutation: m,
                    detected: true,
                    evidence: format!("fuzz {name}: {d}"),
                };
            }
            tried.push(name);
        }
        return MutationReport {
            mutation: m,
            detected: false,
            evidence: format!("no divergence in {}", tried.join(", ")),
        };
    }
    let report = probe_timing(&ProbeConfig {
        runs: 20,
        max_stall: Duration::from_millis(3),
        seed: master_seed,
        mutation: Some(GatewayMutation::WallClockNow),
        ..ProbeConfig::default()
    });
    MutationReport {
        mutation: m,
        detected: !report.passed(),
        evidence: format!("probe: {}", report.summary()),
    }
}
