//! Scoring adapters on the noise-level x seed grid.
//!
//! The evaluation harness re-reads the backbone under every (noise level,
//! seed) cell, scores each dataset on every read, and reports per-cell
//! means and spreads plus a grand mean. The grid is deterministic: cell
//! (level, seed) uses its own derived noise stream, so reports reproduce
//! byte-for-byte and parallel evaluation equals serial evaluation.
//!
//! Run with: `cargo run --release --example robustness_eval`

use halora::eval::{compare, evaluate, render_comparison, EvalPlan};
use halora::model::mlp::{MlpConfig, ToyMlp};
use halora::model::Adapted;
use halora::numerics::Rng;
use halora::train::{train, Mode, TrainPlan};

fn main() -> halora::Result<()> {
    let config = MlpConfig {
        input: 8,
        hidden: 16,
        classes: 3,
    };
    let pristine = ToyMlp::new(config.clone(), &mut Rng::new(31))?;
    let data = ToyMlp::blobs(&config, 1600, 0.45, 32)?;

    // Same initialization and data order for both runs; only the plan differs.
    let adapt = |mode: Mode| -> halora::Result<ToyMlp> {
        let mut m = pristine.clone();
        m.attach_adapters(2, &mut Rng::new(33))?;
        let plan = TrainPlan {
            mode,
            epochs: 4,
            ..TrainPlan::default()
        };
        train(&mut m, &plan, &data, &Rng::new(34))?;
        Ok(m)
    };
    let baseline = adapt(Mode::Lora)?;
    let noise_aware = adapt(Mode::Halora)?;

    // Two held-out datasets: in-distribution and a wider, harder variant.
    let datasets = vec![
        ("main".to_string(), ToyMlp::blobs(&config, 512, 0.45, 35)?),
        ("wide".to_string(), ToyMlp::blobs(&config, 512, 0.9, 36)?),
    ];
    let plan = EvalPlan::new(datasets);
    println!(
        "grid: noise levels {:?} x seeds {:?}\n",
        plan.noise_levels, plan.seeds
    );

    let base_report = evaluate(&baseline, &plan)?;
    let aware_report = evaluate(&noise_aware, &plan)?;

    println!("--- plain adapters ---");
    print!("{}", base_report.render_table());
    println!("\n--- noise-aware adapters ---");
    print!("{}", aware_report.render_table());

    let sigma = *plan.noise_levels.last().expect("levels");
    println!("\nat the harshest level (sigma = {sigma}):");
    for (name, report) in [("plain", &base_report), ("noise-aware", &aware_report)] {
        println!(
            "  {name:<12} grand mean {:.4}  degradation from clean {:+.4}",
            report.grand_at(sigma).expect("level"),
            report.degradation(sigma).expect("level")
        );
    }

    println!("\n--- cell-by-cell comparison (other minus base) ---");
    let comparison = compare(&base_report, &aware_report)?;
    print!("{}", render_comparison(&comparison));
    Ok(())
}
