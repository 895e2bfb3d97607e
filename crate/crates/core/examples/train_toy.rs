//! Trains the toy denoiser on random synthetic scenes and writes a checkpoint
//! plus its loss curve.
//!
//! cargo run --release --example train_toy -- [scenes] [epochs] [out_dir]

use std::path::PathBuf;

use macguide::model::{
    loss_curve_to_csv, make_dataset, parse_manifest, random_manifest, save_checkpoint, train,
    ModelConfig, NoiseSchedule, SceneConfig, ToyDenoiser, TokenVocabulary, TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let scenes: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy_model".into()));
    std::fs::create_dir_all(&out)?;

    let specs = parse_manifest(&random_manifest(scenes, 4, 1))?;
    let data = make_dataset(&specs, 0, &SceneConfig::default())?;
    let mut model = ToyDenoiser::new(
        ModelConfig::default(),
        TokenVocabulary::default(),
        NoiseSchedule::default(),
        0,
    )?;
    println!("{} parameters, {} scenes, {} epochs", model.parameter_count(), data.len(), epochs);
    let cfg = TrainConfig {
        epochs,
        log_every: 25,
        ..TrainConfig::default()
    };
    let curve = train(&mut model, &data, &cfg)?;
    save_checkpoint(&model, &out.join("model.json"))?;
    std::fs::write(out.join("loss.csv"), loss_curve_to_csv(&curve))?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!("loss {:.4} -> {:.4}", first.loss, last.loss);
    }
    println!("wrote {}", out.display());
    Ok(())
}
