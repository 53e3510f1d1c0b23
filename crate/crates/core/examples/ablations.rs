//! Stress tests on top of the core matrix: the temperature × weight grid,
//! module leave-one-out, progressive module stacking and the sampler control.

use crossmodal_kd::cohort::{ingest_metadata, normalize_records, ColumnMap, Manifests};
use crossmodal_kd::experiments::{sampler_deltas, Harness, MatrixSettings};
use crossmodal_kd::reporting::{export_figure, FigureKind};
use crossmodal_kd::synthetic::{generate_cohort, SynthConfig};
use crossmodal_kd::trainer::TrainConfig;

fn main() -> crossmodal_kd::Result<()> {
    let root = std::env::temp_dir().join("crossmodal-kd/ablations");
    let cohort = generate_cohort(
        &SynthConfig {
            n_patients: 24,
            image_size: 32,
            ..SynthConfig::default()
        },
        &root.join("cohort"),
    )?;
    let raw = ingest_metadata(&cohort.metadata_csv, &ColumnMap::default())?;
    let (records, _) = normalize_records(&raw, &cohort.image_root);
    let manifests = Manifests::build(&records)?;
    let train = TrainConfig {
        input_size: 32,
        epochs: 3,
        ..TrainConfig::default()
    };
    let settings = MatrixSettings {
        seeds: vec![42],
        ..MatrixSettings::default()
    };
    let harness = Harness::new(&manifests, train, settings).with_output(&root.join("work"));

    let grid = harness.run_grid_ablation(42)?;
    print!("{}", grid.grid_cells()?.to_csv());
    let svg = export_figure(&grid, FigureKind::GridHeatmap)?;
    println!(
        "heatmap: {} bytes, {} cells",
        svg.len(),
        svg.matches("class=\"cell\"").count()
    );

    for result in [harness.run_module_ablation()?, harness.run_progressive()?] {
        println!("\n{}", result.name);
        for s in &result.specs {
            println!(
                "  {:<24} macro-F1 {:.3}",
                s.spec.name, s.summary.mean.macro_f1
            );
        }
    }

    let sampler = harness.run_sampler_control()?;
    println!("\nclass-balanced minus shuffled");
    for d in sampler_deltas(&sampler)? {
        println!(
            "  {:<24} BA {:+.3}  specificity {:+.3}  pos-rate {:+.3}",
            d.model.as_str(),
            d.balanced_accuracy_delta(),
            d.specificity_delta(),
            d.positive_rate_delta()
        );
    }
    Ok(())
}
