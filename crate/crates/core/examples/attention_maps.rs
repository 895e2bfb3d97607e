//! Runs one denoiser pass on a noisy scene and prints each phrase's enhanced
//! attention map, writing the text dumps to an output directory.
//!
//! cargo run --release --example attention_maps -- [checkpoint] [out_dir]

use std::path::PathBuf;

use macguide::attention::{phrase_maps, write_map_dump};
use macguide::model::{
    forward_noise, image_to_latent, load_checkpoint, make_scene_with, ModelConfig, NoiseSchedule, SceneConfig,
    TokenVocabulary, ToyDenoiser,
};
use macguide::numeric::Tensor;

const SHADES: [char; 5] = [' ', '.', ':', '*', '#'];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) if path != "-" => load_checkpoint(path.as_ref())?,
        _ => {
            println!("no checkpoint given; using an untrained model");
            ToyDenoiser::new(ModelConfig::default(), TokenVocabulary::default(), NoiseSchedule::default(), 0)?
        }
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "attention_dump".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = SceneConfig::for_size(model.config.image_size);
    let scene = make_scene_with(&"one red square and two blue circle".parse()?, 4, &cfg)?;
    let tokens = model.vocab.encode(&scene.prompt_tokens)?;
    let t = 400;
    let noise = Tensor::from_fn(&model.config.latent_shape(), |i| ((i * 7919 % 1000) as f64 / 500.0) - 1.0);
    let z = forward_noise(&image_to_latent(&scene.image), t, &noise, &model.schedule)?;
    let (_, stack) = model.predict_noise(&z, &tokens, t)?;
    let phrases: Vec<(usize, Vec<usize>)> = scene.layout.phrases.iter().map(|p| (p.index, p.tokens.clone())).collect();
    let (gw, gh) = stack.reference_resolution;
    println!("{} layers aggregated at {gw}x{gh}", stack.layers.len());
    for m in phrase_maps(&stack, &phrases, 1)? {
        let words: Vec<&str> = phrases
            .iter()
            .find(|(i, _)| *i == m.phrase_index)
            .map(|(_, t)| t.iter().map(|&k| scene.prompt_tokens[k].as_str()).collect())
            .unwrap_or_default();
        println!("\nphrase {} `{}`", m.phrase_index, words.join(" "));
        for y in 0..gh {
            let row: String = (0..gw)
                .map(|x| SHADES[((m.map.data()[y * gw + x] * 4.0).round() as usize).min(4)])
                .collect();
            println!("  |{row}|");
        }
        write_map_dump(&out, 1, &m, true)?;
    }
    println!("\ndumps written to {}", out.display());
    Ok(())
}
