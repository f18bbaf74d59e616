//! Prints the reference benchmark numbers for a few seeds.
//!
//! cargo run --release -p logn-core --example reference -- 1 2 3

use logn_core::bench::{prepare, reference_classification, reference_detection, sweep_csv};
use logn_core::calibrate::{BetaMode, Components};

fn main() -> logn_core::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![1, 2, 3] } else { seeds };
    for &seed in &seeds {
        let det = prepare(&reference_detection(seed))?;
        println!("detection seed {seed}");
        print!("{}", sweep_csv(&det.ablation(BetaMode::FgMin)?));
        print!("{}", sweep_csv(&det.beta_sweep(&[BetaMode::FgMin, BetaMode::BgMean], 1.0)?));

        let cls = prepare(&reference_classification(seed))?;
        let base = cls.metric(&cls.test_logits)?;
        let (_, z) = cls.calibrated(BetaMode::None, 1.0, Components::ALL)?;
        let logn = cls.metric(&z)?;
        let la = cls.metric(&cls.logit_adjusted(1.0)?)?;
        let corr = cls.evaluate(&cls.test_logits)?.correlation_mean;
        println!("classification seed {seed}: base={base:.4} logn={logn:.4} la={la:.4} corr={corr:?}");
    }
    Ok(())
}
