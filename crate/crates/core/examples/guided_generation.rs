//! Samples one layout with and without latent guidance, writes both images
//! and the loss trace, and reports what the detector oracle finds.
//!
//! cargo run --release --example guided_generation -- [checkpoint] [out_dir] [seed]
//!
//! Without a checkpoint a miniature model is trained for a few seconds first;
//! its samples are crude but the pipeline is the same.

use std::path::PathBuf;

use macguide::eval::{detect, evaluate, DetectorConfig, EvalItem};
use macguide::guidance::{generate, GuidanceConfig};
use macguide::image::write_ppm;
use macguide::layout::parse_layout;
use macguide::losses::trace_to_csv;
use macguide::model::{
    load_checkpoint, make_dataset, parse_manifest, random_manifest, train, Color, ModelConfig, NoiseSchedule,
    SceneConfig, ToyDenoiser, TokenVocabulary, TrainConfig,
};

const LAYOUT: &str = "\
<sot> two red square and one blue circle <eot>
phrase 2,3 0.06 0.06 0.38 0.38
phrase 2,3 0.56 0.06 0.88 0.38
phrase 6,7 0.31 0.56 0.66 0.91
";

fn quick_model() -> Result<ToyDenoiser, Box<dyn std::error::Error>> {
    let cfg = ModelConfig::tiny();
    let specs = parse_manifest(&random_manifest(400, 3, 1))?;
    let data = make_dataset(&specs, 0, &SceneConfig::for_size(cfg.image_size))?;
    let mut model = ToyDenoiser::new(cfg, TokenVocabulary::default(), NoiseSchedule::default(), 0)?;
    train(&mut model, &data, &TrainConfig { epochs: 4, ..TrainConfig::default() })?;
    Ok(model)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) if path != "-" => load_checkpoint(path.as_ref())?,
        _ => quick_model()?,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "guided_out".into()));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    std::fs::create_dir_all(&out)?;

    let layout = parse_layout(LAYOUT)?;
    let tokens = model.vocab.encode(&layout.prompt_tokens)?;
    for (name, optim_steps) in [("unguided", 0), ("guided", 10)] {
        let cfg = GuidanceConfig {
            optim_steps,
            seed,
            ..GuidanceConfig::default()
        };
        let g = generate(&tokens, &layout, &cfg, &model)?;
        write_ppm(&out.join(format!("{name}_s{seed}.ppm")), &g.image)?;
        let dets = detect(&g.image, &Color::ALL, &DetectorConfig::default());
        println!("{name}: {} detection(s)", dets.len());
        for d in &dets {
            let (cx, cy) = d.centroid();
            println!("  {:<14} centroid ({cx:.2}, {cy:.2}) confidence {:.2}", d.label, d.confidence);
        }
        let report = evaluate(&[EvalItem {
            image_id: name.into(),
            layout: layout.clone(),
            detections: dets,
        }])?;
        println!("  F1 {:.1}", report.f1);
        if let (Some(first), Some(last)) = (g.trace.first(), g.trace.last()) {
            println!("  L_mac {:.4} -> {:.4} over {} evaluations", first.loss.combined, last.loss.combined, g.trace.len());
            std::fs::write(out.join(format!("trace_s{seed}.csv")), trace_to_csv(&g.trace))?;
        }
    }
    println!("images in {}", out.display());
    Ok(())
}
