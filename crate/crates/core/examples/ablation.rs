//! Compares unguided sampling with the R, R+M and R+M+Reg loss settings on
//! held-out synthetic layouts, scored by the detector oracle.
//!
//! cargo run --release --example ablation -- <checkpoint> [prompts] [seeds]

use macguide::cli::{ablation_table, AblationRow};
use macguide::eval::{detect, evaluate, DetectorConfig, EvalItem};
use macguide::guidance::{generate, GuidanceConfig};
use macguide::losses::Ablation;
use macguide::model::{load_checkpoint, make_dataset, parse_manifest, random_manifest, Color, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().ok_or("usage: ablation <checkpoint> [prompts] [seeds]")?;
    let prompts: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let model = load_checkpoint(path.as_ref())?;

    // Held out: a different manifest seed and scene seeds far from training.
    let specs = parse_manifest(&random_manifest(prompts, 4, 777))?;
    let scenes = make_dataset(&specs, 100_000, &SceneConfig::for_size(model.config.image_size))?;
    let base = GuidanceConfig::default();
    let mut modes = vec![("unguided".to_string(), GuidanceConfig { optim_steps: 0, ..base })];
    modes.extend(Ablation::ALL.map(|a| (a.label().to_string(), GuidanceConfig { ablation: a, ..base })));

    let mut rows = Vec::new();
    for (mode, cfg) in modes {
        let mut items = Vec::new();
        let (mut first, mut last) = (0.0, 0.0);
        let mut traced = 0;
        for (i, scene) in scenes.iter().enumerate() {
            let tokens = model.vocab.encode(&scene.prompt_tokens)?;
            for seed in 0..seeds {
                let g = generate(&tokens, &scene.layout, &GuidanceConfig { seed, ..cfg }, &model)?;
                if let (Some(a), Some(b)) = (g.trace.first(), g.trace.last()) {
                    first += a.loss.combined;
                    last += b.loss.combined;
                    traced += 1;
                }
                items.push(EvalItem {
                    image_id: format!("{i}_s{seed}"),
                    layout: scene.layout.clone(),
                    detections: detect(&g.image, &Color::ALL, &DetectorConfig::default()),
                });
            }
        }
        let n = traced as f64;
        rows.push(AblationRow {
            mode,
            report: evaluate(&items)?,
            initial_loss: (traced > 0).then(|| first / n),
            final_loss: (traced > 0).then(|| last / n),
        });
    }
    print!("{}", ablation_table(&rows));
    Ok(())
}
